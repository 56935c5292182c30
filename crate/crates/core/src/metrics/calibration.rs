use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width reliability bins over `(0, 1]`; bin `b` covers `(b/n, (b+1)/n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
}

fn bin_index(conf: f64, n_bins: usize) -> usize {
    ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1
}

/// Expected calibration error `sum_b (n_b / N) |acc_b - conf_b|`.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<(f64, CalibrationBins)> {
    if confidences.len() != correct.len() {
        return Err(Error::LengthMismatch {
            left: confidences.len(),
            right: correct.len(),
        });
    }
    if confidences.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be positive".into()));
    }
    if let Some(c) = confidences.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
        return Err(Error::OutOfRange(format!("confidence {c} outside (0, 1]")));
    }
    let mut sum_conf = vec![0f64; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        counts[b] += 1;
        sum_conf[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if counts[b] > 0 {
                let k = counts[b] as f64;
                (sum_conf[b] / k, hits[b] as f64 / k)
            } else {
                (0.0, 0.0)
            };
            total += counts[b] as f64 / n * (accuracy - mean_confidence).abs();
            CalibrationBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count: counts[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok((total, CalibrationBins { bins }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let (e, _) = ece(&[0.9], &[true], 15).unwrap();
        assert!((e - 0.1).abs() < 1e-12);
        let (e, _) = ece(&[0.6, 0.6], &[false, false], 15).unwrap();
        assert!((e - 0.6).abs() < 1e-12);
        // Bin (0.4, 0.6] holds mean confidence 0.5 with half correct.
        let (e, bins) = ece(&[0.5, 0.5, 1.0], &[true, false, true], 10).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(bins.bins.iter().map(|b| b.count).sum::<usize>(), 3);
    }

    #[test]
    fn edges_and_errors() {
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1000001, 10), 1);
        assert!(matches!(ece(&[], &[], 15), Err(Error::EmptyInput)));
        assert!(ece(&[0.0], &[true], 15).is_err());
    }
}
