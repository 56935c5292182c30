//! Supervised linear probe with a learning-rate x weight-decay grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Dense, Network};
use crate::error::{Error, Result};
use crate::store::{FeatureMatrix, LabelVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rates: vec![1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
            weight_decays: vec![0.0, 1e-3, 1e-5],
            epochs: 100,
            batch_size: 256,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub best: GridPoint,
    pub grid: Vec<GridPoint>,
    /// `(class, val rows, accuracy)` for every class present in validation.
    pub per_class: Vec<(u32, usize, f64)>,
}

impl ProbeResult {
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,accuracy,n_val\n");
        for (c, n, a) in &self.per_class {
            out.push_str(&format!("{c},{a:.6},{n}\n"));
        }
        out
    }
}

fn predict(net: &Network, x: &[f64]) -> Vec<u32> {
    let c = net.n_out();
    net.logits(x)
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

fn fit(
    x: &[f64],
    y: &[u32],
    dim: usize,
    n_classes: usize,
    lr: f64,
    wd: f64,
    cfg: &ProbeConfig,
) -> Network {
    let mut net = Network {
        layers: vec![Dense {
            n_in: dim,
            n_out: n_classes,
            w: vec![0.0; dim * n_classes],
            b: vec![0.0; n_classes],
        }],
    };
    let mut velocity = net.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut xb = Vec::with_capacity(chunk.len() * dim);
            for &r in chunk {
                xb.extend_from_slice(&x[r * dim..(r + 1) * dim]);
            }
            let cache = net.forward_cached(&xb);
            let mut d = cache.logits().to_vec();
            let inv = 1.0 / chunk.len() as f64;
            for (row, &r) in d.chunks_exact_mut(n_classes).zip(chunk) {
                crate::linalg::softmax_inplace(row, 1.0);
                row[y[r] as usize] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            let mut grad = net.backward(&cache, &d);
            grad.add_weight_decay(&net, wd);
            velocity.scale_add(cfg.momentum, &grad, 1.0);
            net.axpy(-lr, &velocity);
        }
    }
    net
}

fn as_f64(f: &FeatureMatrix) -> Vec<f64> {
    f.values().iter().map(|&v| f64::from(v)).collect()
}

/// Trains one softmax classifier per grid point and keeps the one with the
/// best validation accuracy (earliest grid point on ties).
pub fn linear_probe(
    train_x: &FeatureMatrix,
    train_y: &LabelVector,
    val_x: &FeatureMatrix,
    val_y: &LabelVector,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.n_rows() != train_y.len() {
        return Err(Error::RowCountMismatch {
            expected: train_x.n_rows(),
            found: train_y.len(),
        });
    }
    if val_x.n_rows() != val_y.len() {
        return Err(Error::RowCountMismatch {
            expected: val_x.n_rows(),
            found: val_y.len(),
        });
    }
    if train_x.n_cols() != val_x.n_cols() {
        return Err(Error::DimensionMismatch {
            expected: train_x.n_cols(),
            found: val_x.n_cols(),
        });
    }
    if train_y.is_empty() || val_y.is_empty() || cfg.learning_rates.is_empty() || cfg.weight_decays.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dim = train_x.n_cols();
    let n_classes = train_y.n_classes().max(val_y.n_classes());
    let xt = as_f64(train_x);
    let xv = as_f64(val_x);
    let points: Vec<(f64, f64)> = cfg
        .learning_rates
        .iter()
        .flat_map(|&lr| cfg.weight_decays.iter().map(move |&wd| (lr, wd)))
        .collect();
    let fitted: Vec<(GridPoint, Vec<u32>)> = points
        .par_iter()
        .map(|&(lr, wd)| {
            let net = fit(&xt, train_y.labels(), dim, n_classes, lr, wd, cfg);
            let pred = predict(&net, &xv);
            let correct = pred.iter().zip(val_y.labels()).filter(|(a, b)| a == b).count();
            (
                GridPoint {
                    lr,
                    weight_decay: wd,
                    val_accuracy: correct as f64 / val_y.len() as f64,
                },
                pred,
            )
        })
        .collect();
    let mut best = 0;
    for (i, (p, _)) in fitted.iter().enumerate() {
        if p.val_accuracy > fitted[best].0.val_accuracy {
            best = i;
        }
    }
    let pred = &fitted[best].1;
    let mut per_class = Vec::new();
    for (class, rows) in val_y.rows_by_class().iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ok = rows.iter().filter(|&&r| pred[r] == class as u32).count();
        per_class.push((class as u32, rows.len(), ok as f64 / rows.len() as f64));
    }
    Ok(ProbeResult {
        best: fitted[best].0.clone(),
        grid: fitted.into_iter().map(|(p, _)| p).collect(),
        per_class,
    })
}
