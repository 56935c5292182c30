use std::collections::HashMap;

use crate::error::{Error, Result};

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization:
/// `I(a; b) / ((H(a) + H(b)) / 2)`, and 1 when both partitions are trivial.
pub fn nmi(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = a.len() as f64;
    let mut ca: HashMap<u32, usize> = HashMap::new();
    let mut cb: HashMap<u32, usize> = HashMap::new();
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut keys: Vec<&(u32, u32)> = joint.keys().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .into_iter()
        .map(|k| {
            let nij = joint[k] as f64;
            let pij = nij / n;
            pij * (nij * n / (ca[&k.0] as f64 * cb[&k.1] as f64)).ln()
        })
        .sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 3, 3]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[2, 2], &[7, 7]).unwrap(), 1.0);
        assert!(matches!(nmi(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn symmetric() {
        let a = [0, 1, 1, 2, 2, 2, 0, 1];
        let b = [1, 1, 0, 0, 2, 2, 1, 0];
        assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
    }
}
