//! Spherical k-means.
//!
//! Lloyd iterations in cosine space: each row joins the centroid with the
//! largest dot product, then every centroid becomes the L2-normalized mean of
//! its members. The objective is the mean best similarity, recorded once per
//! assignment step; it never decreases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::ClusterAssignment;
use crate::error::{Error, Result};
use crate::linalg::{dot_f64, softmax_inplace};
use crate::store::{self, FeatureMatrix};

const ASSIGN_BLOCK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[serde(rename = "kmeanspp")]
    KMeansPlusPlus,
    /// The `c` rows with the smallest seeded content hash.
    RandomRows,
    /// Explicit row-major `c x d` starting centroids (normalized on use).
    #[serde(skip)]
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub n_clusters: usize,
    pub init: Init,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent initializations; the fit with the highest final objective wins.
    pub n_init: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            n_clusters: 2,
            init: Init::KMeansPlusPlus,
            max_iter: 100,
            tol: 1e-6,
            n_init: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    n_clusters: usize,
    dim: usize,
    values: Vec<f64>,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    /// Empty-cluster repairs performed before each update.
    pub repairs: Vec<usize>,
}

impl Centroids {
    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.values[c * self.dim..(c + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        store::write_f32(path, self.n_clusters, self.dim, &self.as_f32())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, d, values) = store::read_f32(path)?;
        Ok(Centroids {
            n_clusters: c,
            dim: d,
            values: values.into_iter().map(f64::from).collect(),
            iterations: 0,
            objective_history: Vec::new(),
            repairs: Vec::new(),
        })
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// `iteration,objective,repairs` rows, one per assignment step.
    pub fn run_log_csv(&self) -> String {
        let mut out = String::from("iteration,objective,empty_cluster_repairs\n");
        for (i, obj) in self.objective_history.iter().enumerate() {
            let r = self.repairs.get(i).copied().unwrap_or(0);
            out.push_str(&format!("{i},{obj:.9},{r}\n"));
        }
        out
    }

    /// Hard assignment of every row to its most similar centroid.
    pub fn assign(&self, features: &FeatureMatrix) -> Result<Vec<u32>> {
        self.check_dim(features)?;
        let (assign, _) = assign_rows(features, &self.values, self.n_clusters);
        Ok(assign)
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<()> {
        if features.n_cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.n_cols(),
            });
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn row_hash(row: &[f32], seed: u64) -> u64 {
    row.iter()
        .fold(splitmix(seed), |h, v| splitmix(h ^ u64::from(v.to_bits())))
}

fn init_centroids(features: &FeatureMatrix, cfg: &KMeansConfig) -> Result<Vec<f64>> {
    let (n, d, c) = (features.n_rows(), features.n_cols(), cfg.n_clusters);
    let pick = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&r| features.row(r).iter().map(|&v| f64::from(v)))
            .collect()
    };
    match &cfg.init {
        Init::Given(values) => {
            if values.len() != c * d {
                return Err(Error::DimensionMismatch {
                    expected: c * d,
                    found: values.len(),
                });
            }
            let mut v = values.clone();
            for row in v.chunks_exact_mut(d) {
                normalize(row);
            }
            Ok(v)
        }
        Init::RandomRows => {
            let mut order: Vec<(u64, usize)> = (0..n)
                .map(|i| (row_hash(features.row(i), cfg.seed), i))
                .collect();
            order.sort_unstable();
            let rows: Vec<usize> = order[..c].iter().map(|&(_, i)| i).collect();
            Ok(pick(&rows))
        }
        Init::KMeansPlusPlus => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut chosen = vec![rng.random_range(0..n)];
            let mut best: Vec<f64> = (0..n)
                .map(|i| crate::linalg::dot(features.row(i), features.row(chosen[0])))
                .collect();
            while chosen.len() < c {
                let weights: Vec<f64> = best
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        if chosen.contains(&i) {
                            0.0
                        } else {
                            (1.0 - s).max(0.0).powi(2)
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let next = if total > 0.0 {
                    let target = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (i, &w) in weights.iter().enumerate() {
                        acc += w;
                        if w > 0.0 && acc > target {
                            pick = Some(i);
                            break;
                        }
                    }
                    pick.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).unwrap())
                } else {
                    let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                    free[rng.random_range(0..free.len())]
                };
                chosen.push(next);
                for (i, b) in best.iter_mut().enumerate() {
                    let s = crate::linalg::dot(features.row(i), features.row(next));
                    if s > *b {
                        *b = s;
                    }
                }
            }
            Ok(pick(&chosen))
        }
    }
}

/// Best centroid (lowest id on ties) and its similarity for every row.
fn assign_rows(features: &FeatureMatrix, centroids: &[f64], c: usize) -> (Vec<u32>, Vec<f64>) {
    let d = features.n_cols();
    let blocks: Vec<(Vec<u32>, Vec<f64>)> = (0..features.n_rows())
        .collect::<Vec<_>>()
        .par_chunks(ASSIGN_BLOCK)
        .map(|rows| {
            let mut a = Vec::with_capacity(rows.len());
            let mut s = Vec::with_capacity(rows.len());
            for &r in rows {
                let x = features.row(r);
                let mut best = (0u32, f64::NEG_INFINITY);
                for (j, mu) in centroids.chunks_exact(d).take(c).enumerate() {
                    let sim = dot_f64(x, mu);
                    if sim > best.1 {
                        best = (j as u32, sim);
                    }
                }
                a.push(best.0);
                s.push(best.1);
            }
            (a, s)
        })
        .collect();
    let mut assign = Vec::with_capacity(features.n_rows());
    let mut sims = Vec::with_capacity(features.n_rows());
    for (a, s) in blocks {
        assign.extend(a);
        sims.extend(s);
    }
    (assign, sims)
}

/// Fits spherical k-means on row-normalized features. Restart `r > 0` seeds
/// its initialization with `derive_seed(seed, "restart{r}")`; ties keep the
/// earliest restart.
pub fn kmeans_fit(features: &FeatureMatrix, cfg: &KMeansConfig) -> Result<Centroids> {
    let (n, c) = (features.n_rows(), cfg.n_clusters);
    if !features.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if c == 0 || c > n {
        return Err(Error::CTooLarge { c, n });
    }
    let restarts = if matches!(cfg.init, Init::Given(_)) { 1 } else { cfg.n_init.max(1) };
    let mut best: Option<Centroids> = None;
    for r in 0..restarts {
        let run_cfg = KMeansConfig {
            seed: if r == 0 { cfg.seed } else { crate::derive_seed(cfg.seed, &format!("restart{r}")) },
            ..cfg.clone()
        };
        let fit = fit_once(features, &run_cfg)?;
        let better = best
            .as_ref()
            .is_none_or(|b| fit.final_objective() > b.final_objective());
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn fit_once(features: &FeatureMatrix, cfg: &KMeansConfig) -> Result<Centroids> {
    let (n, d, c) = (features.n_rows(), features.n_cols(), cfg.n_clusters);
    let mut centroids = init_centroids(features, cfg)?;
    let mut history = Vec::new();
    let mut repairs_log = Vec::new();
    let mut iterations = 0;
    loop {
        let (mut assign, mut sims) = assign_rows(features, &centroids, c);
        let objective = sims.iter().sum::<f64>() / n as f64;
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| objective - prev < cfg.tol);
        history.push(objective);
        if converged || iterations >= cfg.max_iter {
            repairs_log.push(0);
            break;
        }

        let mut counts = vec![0usize; c];
        for &a in &assign {
            counts[a as usize] += 1;
        }
        let mut repairs = 0;
        for empty in 0..c {
            if counts[empty] > 0 {
                continue;
            }
            // Steal the row least similar to its centroid from a cluster
            // that can spare it.
            let victim = (0..n)
                .filter(|&i| counts[assign[i] as usize] > 1)
                .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)))
                .expect("c <= n guarantees a donor");
            counts[assign[victim] as usize] -= 1;
            counts[empty] = 1;
            assign[victim] = empty as u32;
            sims[victim] = 1.0;
            repairs += 1;
        }
        repairs_log.push(repairs);

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &a) in assign.iter().enumerate() {
            members[a as usize].push(i);
        }
        let updated: Vec<Vec<f64>> = members
            .par_iter()
            .enumerate()
            .map(|(j, rows)| {
                let mut sum = vec![0f64; d];
                for &r in rows {
                    for (s, &v) in sum.iter_mut().zip(features.row(r)) {
                        *s += f64::from(v);
                    }
                }
                if normalize(&mut sum) {
                    sum
                } else {
                    centroids[j * d..(j + 1) * d].to_vec()
                }
            })
            .collect();
        centroids = updated.concat();
        iterations += 1;
    }
    Ok(Centroids {
        n_clusters: c,
        dim: d,
        values: centroids,
        iterations,
        objective_history: history,
        repairs: repairs_log,
    })
}

/// Top-`k` closest centroids per row; confidences are the softmax of all
/// cosine similarities (not calibrated probabilities).
pub fn kmeans_predict_topk(
    centroids: &Centroids,
    features: &FeatureMatrix,
    k: usize,
) -> Result<ClusterAssignment> {
    centroids.check_dim(features)?;
    let c = centroids.n_clusters();
    if k == 0 || k > c {
        return Err(Error::KTooLarge { k, available: c });
    }
    let rows: Vec<(Vec<u32>, Vec<f32>)> = (0..features.n_rows())
        .into_par_iter()
        .map(|r| {
            let x = features.row(r);
            let sims: Vec<f64> = (0..c).map(|j| dot_f64(x, centroids.centroid(j))).collect();
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            let mut probs = sims.clone();
            softmax_inplace(&mut probs, 1.0);
            order[..k]
                .iter()
                .map(|&j| (j as u32, probs[j] as f32))
                .unzip()
        })
        .collect();
    let mut ids = Vec::with_capacity(features.n_rows() * k);
    let mut confs = Vec::with_capacity(features.n_rows() * k);
    for (i, p) in rows {
        ids.extend(i);
        confs.extend(p);
    }
    ClusterAssignment::new(features.n_rows(), k, c, ids, confs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[Vec<f32>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap().normalized().unwrap()
    }

    #[test]
    fn antipodal_pair() {
        let f = fm(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let cfg = KMeansConfig {
            n_clusters: 2,
            ..Default::default()
        };
        let m = kmeans_fit(&f, &cfg).unwrap();
        let mut cents: Vec<Vec<f64>> = (0..2).map(|j| m.centroid(j).to_vec()).collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cents, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(*m.objective_history.last().unwrap(), 1.0);
        assert_eq!(m.iterations, 1);
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let f = fm(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let m = kmeans_fit(
            &f,
            &KMeansConfig {
                n_clusters: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mean = [1.0 + s, 1.0 + s];
        let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        for (a, b) in m.centroid(0).iter().zip(mean) {
            assert!((a - b / norm).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_cluster_repaired() {
        // Two given centroids point at the same place; one starts empty.
        let f = fm(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let cfg = KMeansConfig {
            n_clusters: 2,
            init: Init::Given(vec![1.0, 0.0, 1.0, 0.0]),
            max_iter: 5,
            ..Default::default()
        };
        let m = kmeans_fit(&f, &cfg).unwrap();
        assert_eq!(m.repairs[0], 1);
        let a = m.assign(&f).unwrap();
        assert_eq!(a[0], a[1]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn errors() {
        let f = fm(&[vec![1.0, 0.0]]);
        assert!(matches!(
            kmeans_fit(&f, &KMeansConfig { n_clusters: 2, ..Default::default() }),
            Err(Error::CTooLarge { c: 2, n: 1 })
        ));
        let raw = FeatureMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(matches!(
            kmeans_fit(&raw, &KMeansConfig { n_clusters: 1, ..Default::default() }),
            Err(Error::NotNormalized)
        ));
    }

    fn fixed_centroids(values: Vec<f64>, c: usize, d: usize) -> Centroids {
        Centroids {
            n_clusters: c,
            dim: d,
            values,
            iterations: 0,
            objective_history: vec![],
            repairs: vec![],
        }
    }

    #[test]
    fn predict_topk_examples() {
        let cents = fixed_centroids(
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
            4,
            2,
        );
        let f = fm(&[vec![0.0, -1.0], vec![1.0, 1.0]]);
        let top1 = kmeans_predict_topk(&cents, &f, 1).unwrap();
        assert_eq!(top1.ids(0), &[3]);
        // Row 1 is equidistant to centroids 0 and 1.
        assert_eq!(top1.ids(1), &[0]);
        let all = kmeans_predict_topk(&cents, &f, 4).unwrap();
        let mut ids = all.ids(0).to_vec();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(&all.ids(1)[..2], &[0, 1]);
        let bad = fm(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            kmeans_predict_topk(&cents, &bad, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let rows: Vec<Vec<f32>> = (0..200)
            .map(|i| {
                let t = i as f32 * 0.37;
                vec![t.cos(), t.sin(), (t * 1.7).sin()]
            })
            .collect();
        let f = fm(&rows);
        for init in [Init::KMeansPlusPlus, Init::RandomRows] {
            let cfg = KMeansConfig {
                n_clusters: 7,
                init,
                seed: 11,
                ..Default::default()
            };
            let a = kmeans_fit(&f, &cfg).unwrap();
            let b = kmeans_fit(&f, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn run_log_has_one_row_per_step() {
        let f = fm(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let m = kmeans_fit(&f, &KMeansConfig { n_clusters: 2, ..Default::default() }).unwrap();
        assert_eq!(m.run_log_csv().lines().count(), 1 + m.objective_history.len());
    }
}
