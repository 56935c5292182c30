//! Evaluation metrics against direct recomputation.

use fclust_core::metrics::{ece, evaluate, nmi};
use fclust_core::{ClusterAssignment, MultiLabelSets};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bins by linear scan of the edges `(b/n, (b+1)/n]`.
fn ece_oracle(conf: &[f64], correct: &[bool], n_bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let idx: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo || (b == 0 && conf[i] > 0.0)) && conf[i] <= hi)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let m = idx.len() as f64;
        let acc = idx.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / conf.len() as f64 * (acc - c).abs();
    }
    total
}

fn entropy(labels: &[u32]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

fn nmi_oracle(a: &[u32], b: &[u32]) -> f64 {
    let joint: Vec<u32> = a.iter().zip(b).map(|(&x, &y)| x * 1000 + y).collect();
    let (ha, hb) = (entropy(a), entropy(b));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    (ha + hb - entropy(&joint)) / ((ha + hb) / 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn ece_matches_direct_binning(seed in 0u64..100_000, n in 1usize..300, bins in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Include values sitting exactly on bin edges.
        let conf: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(1..=bins) as f64 / bins as f64 } else { rng.random_range(0.001..=1.0) })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let (e, table) = ece(&conf, &correct, bins).unwrap();
        prop_assert!((e - ece_oracle(&conf, &correct, bins)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), n);
    }

    #[test]
    fn single_sample_ece(conf in 0.001f64..=1.0, hit in any::<bool>()) {
        let (e, _) = ece(&[conf], &[hit], 15).unwrap();
        let want = if hit { 1.0 - conf } else { conf };
        prop_assert!((e - want).abs() < 1e-12);
    }

    #[test]
    fn nmi_matches_entropy_identity(seed in 0u64..100_000, n in 1usize..200, ka in 1u32..6, kb in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let v = nmi(&a, &b).unwrap();
        prop_assert!((v - nmi_oracle(&a, &b)).abs() < 1e-9);
        prop_assert!((v - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        // Renaming clusters leaves the score unchanged.
        let renamed: Vec<u32> = a.iter().map(|&x| 7 - x).collect();
        prop_assert!((v - nmi(&renamed, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_variants_are_ordered(seed in 0u64..100_000, n in 5usize..150, c in 5usize..9, k in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let pred = ClusterAssignment::from_scores(&scores, c, 5);
        let primary: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let sets: Vec<Vec<u32>> = primary
            .iter()
            .map(|&p| {
                let mut s: Vec<u32> = (0..k as u32).filter(|&x| x == p || rng.random_bool(0.3)).collect();
                s.sort_unstable();
                s
            })
            .collect();
        let gt = MultiLabelSets::new(primary, sets, k).unwrap();
        let (a, _) = evaluate(&pred, &gt).unwrap();
        prop_assert!(a.ordering_holds(), "{:?}", a);
    }
}

#[test]
fn perfect_confidence_has_zero_ece() {
    let (e, _) = ece(&[1.0; 10], &[true; 10], 15).unwrap();
    assert_eq!(e, 0.0);
}
