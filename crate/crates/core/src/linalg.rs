//! Small dense kernels shared by the search, clustering and training code.
//! Accumulation is always f64 in index order so results never depend on
//! how work is tiled.

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
pub fn dot_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * y).sum()
}

/// In-place softmax of `logits / temperature`.
pub fn softmax_inplace(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_inplace(&mut out, temperature);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_basics() {
        let p = softmax(&[3f64.ln(), 0.0], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let p = softmax(&[1.0, 0.0], 0.01);
        assert!(p[0] >= 0.999);
        let p = softmax(&[1000.0, 1000.0], 1.0);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
