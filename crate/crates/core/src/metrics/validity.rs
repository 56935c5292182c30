use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{true_positive_pairs, NeighborTable};
use crate::store::{FeatureMatrix, LabelVector};

/// Above this many rows the silhouette is computed on a seeded row sample.
pub const SILHOUETTE_FULL_LIMIT: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub alignment: Option<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn groups(labels: &LabelVector) -> Result<(Vec<usize>, usize)> {
    let present = labels.present_classes();
    if present.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let mut dense = vec![usize::MAX; labels.n_classes()];
    for (i, &c) in present.iter().enumerate() {
        dense[c as usize] = i;
    }
    Ok((
        labels.labels().iter().map(|&l| dense[l as usize]).collect(),
        present.len(),
    ))
}

/// Mean silhouette with Euclidean distances; singleton clusters score 0.
pub fn silhouette(features: &FeatureMatrix, labels: &LabelVector, seed: u64) -> Result<f64> {
    if features.n_rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.n_rows(),
            right: labels.len(),
        });
    }
    let (g, k) = groups(labels)?;
    let n = features.n_rows();
    let rows: Vec<usize> = if n > SILHOUETTE_FULL_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample(&mut rng, n, SILHOUETTE_FULL_LIMIT).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..n).collect()
    };
    let mut sizes = vec![0usize; k];
    for &r in &rows {
        sizes[g[r]] += 1;
    }
    let scores: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let own = g[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0f64; k];
            let xi = features.row(i);
            for &j in &rows {
                if j != i {
                    sums[g[j]] += sq_dist(xi, features.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Davies-Bouldin index with group means as centroids.
pub fn davies_bouldin(features: &FeatureMatrix, labels: &LabelVector) -> Result<f64> {
    if features.n_rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.n_rows(),
            right: labels.len(),
        });
    }
    let (g, k) = groups(labels)?;
    let d = features.n_cols();
    let mut cent = vec![vec![0f64; d]; k];
    let mut size = vec![0usize; k];
    for (i, row) in features.rows().enumerate() {
        size[g[i]] += 1;
        for (c, &v) in cent[g[i]].iter_mut().zip(row) {
            *c += f64::from(v);
        }
    }
    for (c, &s) in cent.iter_mut().zip(&size) {
        c.iter_mut().for_each(|v| *v /= s as f64);
    }
    let mut scatter = vec![0f64; k];
    for (i, row) in features.rows().enumerate() {
        let dist: f64 = row
            .iter()
            .zip(&cent[g[i]])
            .map(|(&x, &m)| (f64::from(x) - m).powi(2))
            .sum::<f64>()
            .sqrt();
        scatter[g[i]] += dist;
    }
    for (s, &n) in scatter.iter_mut().zip(&size) {
        *s /= n as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep: f64 = cent[i]
                .iter()
                .zip(&cent[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let r = if sep > 0.0 {
                (scatter[i] + scatter[j]) / sep
            } else {
                f64::INFINITY
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Mean squared distance over neighbor pairs that share a label.
pub fn alignment(
    features: &FeatureMatrix,
    table: &NeighborTable,
    labels: &LabelVector,
) -> Result<Option<f64>> {
    let pairs = true_positive_pairs(table, labels)?;
    if pairs.is_empty() {
        return Ok(None);
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| sq_dist(features.row(i), features.row(j)))
        .sum();
    Ok(Some(sum / pairs.len() as f64))
}

pub fn validity_indices(
    features: &FeatureMatrix,
    labels: &LabelVector,
    table: Option<&NeighborTable>,
    seed: u64,
) -> Result<Validity> {
    Ok(Validity {
        silhouette: silhouette(features, labels, seed)?,
        davies_bouldin: davies_bouldin(features, labels)?,
        alignment: match table {
            Some(t) => alignment(features, t, labels)?,
            None => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[[f32; 2]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn far_pairs_silhouette_near_one() {
        let f = fm(&[[0.0, 0.0], [0.01, 0.0], [1.0, 0.0], [1.01, 0.0]]);
        let l = LabelVector::from_labels(vec![0, 0, 1, 1]);
        assert!(silhouette(&f, &l, 0).unwrap() >= 0.9);
    }

    #[test]
    fn singleton_scores_zero() {
        let f = fm(&[[0.0, 0.0], [0.1, 0.0], [5.0, 0.0]]);
        let l = LabelVector::from_labels(vec![0, 0, 1]);
        let s = silhouette(&f, &l, 0).unwrap();
        let a = 0.1f64;
        let row0 = ((5.0 - a) / 5.0f64).max(0.0);
        let row1 = ((4.9 - a) / 4.9f64).max(0.0);
        assert!((s - (row0 + row1) / 3.0).abs() < 1e-6);
    }

    #[test]
    fn single_group_rejected() {
        let f = fm(&[[0.0, 0.0], [1.0, 0.0]]);
        let l = LabelVector::from_labels(vec![0, 0]);
        assert!(matches!(silhouette(&f, &l, 0), Err(Error::SingleCluster)));
        assert!(matches!(davies_bouldin(&f, &l), Err(Error::SingleCluster)));
    }

    #[test]
    fn duplicate_pairs_align_perfectly() {
        let f = fm(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
            .normalized()
            .unwrap();
        let t = crate::neighbors::mine_knn(&f, 1, 2).unwrap();
        let l = LabelVector::from_labels(vec![0, 0, 1, 1]);
        assert_eq!(alignment(&f, &t, &l).unwrap(), Some(0.0));
    }
}
