use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hungarian::{contingency, hungarian, Assignment};
use crate::assignment::ClusterAssignment;
use crate::error::{Error, Result};
use crate::store::MultiLabelSets;

/// Number of ranked predictions used by the top-k metrics.
pub const TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Hit when the mapped prediction equals the mapping label.
    Single,
    /// Hit when the mapped prediction is anywhere in the label set.
    Multi,
}

/// The four accuracy variants. Top-5 entries are absent when fewer than five
/// ranked predictions exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub top1_1: f64,
    pub top1_l: f64,
    pub top5_1: Option<f64>,
    pub top5_l: Option<f64>,
}

impl Accuracies {
    /// Checks the containment ordering between the variants.
    pub fn ordering_holds(&self) -> bool {
        let mut ok = self.top1_1 <= self.top1_l;
        if let (Some(t51), Some(t5l)) = (self.top5_1, self.top5_l) {
            ok &= self.top1_1 <= t51 && t51 <= t5l && self.top1_l <= t5l;
        }
        ok
    }
}

fn check_len(pred: &ClusterAssignment, gt: &MultiLabelSets) -> Result<()> {
    if pred.n_rows() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.n_rows(),
            right: gt.len(),
        });
    }
    Ok(())
}

fn mapping_for(pred: &ClusterAssignment, mapping_labels: &[u32], n_classes: usize) -> Assignment {
    hungarian(&contingency(
        &pred.top1(),
        mapping_labels,
        pred.n_clusters(),
        n_classes,
    ))
}

/// All four accuracies with `f` estimated from `(top-1 prediction, mapping_labels)`.
pub fn evaluate_with_labels(
    pred: &ClusterAssignment,
    gt: &MultiLabelSets,
    mapping_labels: &[u32],
) -> Result<(Accuracies, Assignment)> {
    check_len(pred, gt)?;
    let f = mapping_for(pred, mapping_labels, gt.n_classes());
    let n = pred.n_rows().max(1) as f64;
    let use_top5 = pred.k() >= TOP_K && pred.n_clusters() >= TOP_K;
    let (mut t11, mut t1l, mut t51, mut t5l) = (0usize, 0usize, 0usize, 0usize);
    for (i, &label) in mapping_labels.iter().enumerate() {
        let ids = pred.ids(i);
        if let Some(c) = f.map(ids[0]) {
            t11 += usize::from(c == label);
            t1l += usize::from(gt.contains(i, c));
        }
        if use_top5 {
            let mapped = ids[..TOP_K].iter().filter_map(|&p| f.map(p));
            let (mut hit1, mut hitl) = (false, false);
            for c in mapped {
                hit1 |= c == label;
                hitl |= gt.contains(i, c);
            }
            t51 += usize::from(hit1);
            t5l += usize::from(hitl);
        }
    }
    let acc = Accuracies {
        top1_1: t11 as f64 / n,
        top1_l: t1l as f64 / n,
        top5_1: use_top5.then(|| t51 as f64 / n),
        top5_l: use_top5.then(|| t5l as f64 / n),
    };
    Ok((acc, f))
}

/// Accuracies with `f` estimated from the primary labels.
pub fn evaluate(pred: &ClusterAssignment, gt: &MultiLabelSets) -> Result<(Accuracies, Assignment)> {
    evaluate_with_labels(pred, gt, gt.primary())
}

/// Top-1 accuracy: `single` compares with the primary label, `multi` with the set.
pub fn acc_top1(pred: &ClusterAssignment, gt: &MultiLabelSets, mode: AccuracyMode) -> Result<f64> {
    let (acc, _) = evaluate(pred, gt)?;
    Ok(match mode {
        AccuracyMode::Single => acc.top1_1,
        AccuracyMode::Multi => acc.top1_l,
    })
}

/// Top-5 accuracy with `f` still estimated from the top-1 predictions.
pub fn acc_top5(pred: &ClusterAssignment, gt: &MultiLabelSets, mode: AccuracyMode) -> Result<f64> {
    if pred.n_clusters() < TOP_K || pred.k() < TOP_K {
        return Err(Error::KExceedsC {
            k: TOP_K,
            c: pred.n_clusters().min(pred.k()),
        });
    }
    let (acc, _) = evaluate(pred, gt)?;
    Ok(match mode {
        AccuracyMode::Single => acc.top5_1,
        AccuracyMode::Multi => acc.top5_l,
    }
    .expect("top-5 available"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub repeats: usize,
    pub seed: u64,
    pub mean: Accuracies,
    pub std: Accuracies,
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Repeated evaluation where each repeat draws the mapping label of every row
/// uniformly from its label set.
pub fn real_protocol(
    pred: &ClusterAssignment,
    gt: &MultiLabelSets,
    repeats: usize,
    seed: u64,
) -> Result<ProtocolSummary> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    check_len(pred, gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let labels: Vec<u32> = (0..gt.len())
            .map(|i| {
                let s = gt.set(i);
                s[rng.random_range(0..s.len())]
            })
            .collect();
        runs.push(evaluate_with_labels(pred, gt, &labels)?.0);
    }
    let column = |get: &dyn Fn(&Accuracies) -> Option<f64>| -> (Option<f64>, Option<f64>) {
        let vals: Option<Vec<f64>> = runs.iter().map(get).collect();
        match vals {
            Some(v) => {
                let (m, s) = moments(&v);
                (Some(m), Some(s))
            }
            None => (None, None),
        }
    };
    let (m11, s11) = column(&|a| Some(a.top1_1));
    let (m1l, s1l) = column(&|a| Some(a.top1_l));
    let (m51, s51) = column(&|a| a.top5_1);
    let (m5l, s5l) = column(&|a| a.top5_l);
    Ok(ProtocolSummary {
        repeats,
        seed,
        mean: Accuracies {
            top1_1: m11.unwrap(),
            top1_l: m1l.unwrap(),
            top5_1: m51,
            top5_l: m5l,
        },
        std: Accuracies {
            top1_1: s11.unwrap(),
            top1_l: s1l.unwrap(),
            top5_1: s51,
            top5_l: s5l,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard(p: &[u32], c: usize) -> ClusterAssignment {
        ClusterAssignment::from_hard(p, c)
    }

    #[test]
    fn perfect_top1() {
        let gt = MultiLabelSets::new(vec![0, 1], vec![vec![0], vec![1]], 2).unwrap();
        assert_eq!(acc_top1(&hard(&[0, 1], 2), &gt, AccuracyMode::Single).unwrap(), 1.0);
    }

    #[test]
    fn multi_label_mapping_uses_primary() {
        let gt = MultiLabelSets::new(vec![0, 3], vec![vec![0, 2], vec![3]], 4).unwrap();
        let (acc, f) = evaluate(&hard(&[0, 1], 2), &gt).unwrap();
        assert_eq!(f.mapping, vec![Some(0), Some(3)]);
        assert_eq!(acc.top1_l, 1.0);
        let (acc, f) = evaluate(&hard(&[0, 0], 2), &gt).unwrap();
        assert_eq!(f.map(0), Some(0));
        assert_eq!(acc.top1_1, 0.5);
        assert!(acc.top1_l >= acc.top1_1);
    }

    #[test]
    fn top5_rank_three_hit() {
        // Six clusters, six classes; rows are identity-mapped by top-1 except row 2.
        let ids: Vec<u32> = vec![
            0, 1, 2, 3, 4, //
            1, 0, 2, 3, 4, //
            0, 1, 2, 3, 4, //
            3, 0, 1, 2, 4, //
            4, 0, 1, 2, 3, //
            5, 0, 1, 2, 3, //
        ];
        let confs = vec![0.2f32; 30];
        let pred = ClusterAssignment::new(6, 5, 6, ids, confs).unwrap();
        let gt = MultiLabelSets::singletons(&crate::store::LabelVector::from_labels(vec![0, 1, 2, 3, 4, 5]));
        let (acc, f) = evaluate(&pred, &gt).unwrap();
        // f is identity on 0,1,3,4,5 ; cluster 2 unused in top-1 so maps to class 2.
        assert_eq!(f.map(0), Some(0));
        assert_eq!(acc.top1_1, 5.0 / 6.0);
        // Row 2 is found at rank 3 of its top-5.
        assert_eq!(acc.top5_1, Some(1.0));
        assert!(acc.ordering_holds());
        assert!(matches!(
            acc_top5(&hard(&[0, 1], 2), &MultiLabelSets::new(vec![0, 1], vec![vec![0], vec![1]], 2).unwrap(), AccuracyMode::Single),
            Err(Error::KExceedsC { .. })
        ));
    }

    #[test]
    fn protocol_single_label_sets_have_zero_std() {
        let gt = MultiLabelSets::new(vec![0, 1, 1], vec![vec![0], vec![1], vec![1]], 2).unwrap();
        let pred = hard(&[1, 0, 1], 2);
        let s = real_protocol(&pred, &gt, 7, 3).unwrap();
        assert_eq!(s.std.top1_1, 0.0);
        assert_eq!(s.mean.top1_1, acc_top1(&pred, &gt, AccuracyMode::Single).unwrap());
        assert_eq!(real_protocol(&pred, &gt, 1, 3).unwrap().repeats, 1);
    }
}
