//! Multi-head self-distillation clustering on precomputed features.
//!
//! Every head is a student/teacher pair of identical networks mapping a
//! feature vector to `C` logits. The student is trained by SGD on pairs
//! `(x, x')` where `x'` is a mined neighbor of `x`; the teacher follows the
//! student by exponential moving average and never receives gradients.
//!
//! Two objectives are supported:
//!
//! * **TEMI**: `-w * log sum_c (q_s(c|x) q_t(c|x'))^beta / prior(c)`, where
//!   the instance weight `w` is the mean over heads of `<q_t(x), q_t(x')>`
//!   and `prior` is an EMA estimate of the teacher marginal.
//! * **SCAN**: `-log <q_t(x), q_s(x')> + alpha * sum_c qhat(c) log qhat(c)`,
//!   with `qhat` the mini-batch mean of the student probabilities. The
//!   entropy term is added with a positive sign so that minimizing the loss
//!   spreads mass across clusters.
//!
//! Both losses are symmetrized over the pair direction and only the student
//! probabilities carry gradients.

mod checkpoint;
mod network;
mod probe;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::ClusterAssignment;
use crate::error::{Error, Result};
use crate::neighbors::NeighborTable;
use crate::store::FeatureMatrix;

pub use network::{Dense, Network};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};

/// Floor applied to probabilities before logs and divisions.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Temi,
    Scan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub n_heads: usize,
    pub n_clusters: usize,
    /// Hidden width; `None` gives a single linear layer.
    pub hidden: Option<usize>,
    pub beta: f64,
    /// Momentum of the cluster-prior EMA.
    pub prior_momentum: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub teacher_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Temi,
            n_heads: 32,
            n_clusters: 2,
            hidden: None,
            beta: 0.6,
            prior_momentum: 0.99,
            alpha: 5.0,
            batch_size: 512,
            epochs: 50,
            lr: 0.02,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            teacher_momentum: 0.996,
            student_temp: 0.1,
            teacher_temp: 0.04,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_heads == 0 {
            return bad("n_heads must be >= 1");
        }
        if self.n_clusters < 2 {
            return bad("n_clusters must be >= 2");
        }
        if !(self.beta > 0.5 && self.beta <= 1.0) {
            return bad("beta must lie in (0.5, 1]");
        }
        if !(self.prior_momentum > 0.0 && self.prior_momentum < 1.0) {
            return bad("prior_momentum must lie in (0, 1)");
        }
        if self.alpha < 0.0 {
            return bad("alpha must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.teacher_momentum) {
            return bad("teacher_momentum must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if self.student_temp <= 0.0 || self.teacher_temp <= 0.0 {
            return bad("temperatures must be positive");
        }
        Ok(())
    }
}

/// One student/teacher pair with its cluster prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub student: Network,
    pub teacher: Network,
    velocity: Network,
    pub prior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadBank {
    pub heads: Vec<Head>,
    pub dim: usize,
    pub n_clusters: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
}

impl HeadBank {
    pub fn new(dim: usize, cfg: &TrainConfig) -> Self {
        let heads = (0..cfg.n_heads)
            .map(|h| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xA5A5_0000 + h as u64));
                let student = Network::random(dim, cfg.hidden, cfg.n_clusters, cfg.init_std, &mut rng);
                Head {
                    teacher: student.clone(),
                    velocity: student.zeros_like(),
                    student,
                    prior: vec![1.0 / cfg.n_clusters as f64; cfg.n_clusters],
                }
            })
            .collect();
        HeadBank {
            heads,
            dim,
            n_clusters: cfg.n_clusters,
            student_temp: cfg.student_temp,
            teacher_temp: cfg.teacher_temp,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub(crate) fn from_parts(
        heads: Vec<(Network, Network, Vec<f64>)>,
        dim: usize,
        n_clusters: usize,
        student_temp: f64,
        teacher_temp: f64,
    ) -> Self {
        HeadBank {
            heads: heads
                .into_iter()
                .map(|(student, teacher, prior)| Head {
                    velocity: student.zeros_like(),
                    student,
                    teacher,
                    prior,
                })
                .collect(),
            dim,
            n_clusters,
            student_temp,
            teacher_temp,
        }
    }

    /// Softmax probabilities of head `index` for every row of `rows`
    /// (row-major `n x dim`).
    pub fn forward_rows(&self, role: Role, index: usize, rows: &[f64]) -> Result<Vec<f64>> {
        if !rows.len().is_multiple_of(self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: rows.len(),
            });
        }
        let head = &self.heads[index];
        let (net, temp) = match role {
            Role::Student => (&head.student, self.student_temp),
            Role::Teacher => (&head.teacher, self.teacher_temp),
        };
        Ok(net.probabilities(rows, temp))
    }

    pub fn forward(&self, role: Role, index: usize, features: &FeatureMatrix) -> Result<Vec<f64>> {
        if features.n_cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.n_cols(),
            });
        }
        let rows: Vec<f64> = features.values().iter().map(|&v| f64::from(v)).collect();
        self.forward_rows(role, index, &rows)
    }

    pub fn save(&self, path: &std::path::Path, cfg: &TrainConfig) -> Result<()> {
        checkpoint::save(self, cfg, path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, TrainConfig)> {
        checkpoint::load(path)
    }
}

/// Mean over heads of the teacher agreement `<q_t(x), q_t(x')>`.
pub fn instance_weight(teacher_x: &[&[f64]], teacher_xp: &[&[f64]]) -> f64 {
    let h = teacher_x.len() as f64;
    teacher_x
        .iter()
        .zip(teacher_xp)
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| p * q).sum::<f64>())
        .sum::<f64>()
        / h
}

/// One-direction TEMI loss for a single pair and head.
pub fn temi_loss(student_x: &[f64], teacher_xp: &[f64], prior: &[f64], beta: f64, weight: f64) -> f64 {
    let s: f64 = student_x
        .iter()
        .zip(teacher_xp)
        .zip(prior)
        .map(|((&qs, &qt), &p)| (qs.max(PROB_FLOOR) * qt.max(PROB_FLOOR)).powf(beta) / p.max(PROB_FLOOR))
        .sum();
    -weight * s.ln()
}

/// Symmetrized TEMI loss `0.5 * [L(x, x') + L(x', x)]`.
pub fn temi_loss_symmetric(
    student_x: &[f64],
    student_xp: &[f64],
    teacher_x: &[f64],
    teacher_xp: &[f64],
    prior: &[f64],
    beta: f64,
    weight: f64,
) -> f64 {
    0.5 * (temi_loss(student_x, teacher_xp, prior, beta, weight)
        + temi_loss(student_xp, teacher_x, prior, beta, weight))
}

/// SCAN loss for one pair given the batch-mean student distribution.
pub fn scan_loss(teacher_x: &[f64], student_xp: &[f64], batch_mean: &[f64], alpha: f64) -> f64 {
    let agree: f64 = teacher_x.iter().zip(student_xp).map(|(a, b)| a * b).sum();
    -agree.max(PROB_FLOOR).ln() + alpha * neg_entropy(batch_mean)
}

/// `sum_c p(c) log p(c)` with floored logs.
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().map(|&v| v * v.max(PROB_FLOOR).ln()).sum()
}

/// EMA prior update followed by flooring and renormalization.
pub fn update_prior(prior: &mut [f64], batch_mean: &[f64], momentum: f64) {
    for (p, &m) in prior.iter_mut().zip(batch_mean) {
        *p = momentum * *p + (1.0 - momentum) * m;
        *p = p.max(PROB_FLOOR);
    }
    let s: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= s);
}

fn column_mean(rows: &[f64], c: usize) -> Vec<f64> {
    let n = rows.len() / c;
    let mut m = vec![0f64; c];
    for row in rows.chunks_exact(c) {
        for (a, &b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// Inputs of one head's step. Student rows are stacked `[x; x']` and the
/// teacher targets are stacked in the opposite direction `[t(x'); t(x)]`.
pub struct StepBatch<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
    pub weights: &'a [f64],
}

/// Batch loss and gradient with respect to the student parameters.
pub fn batch_loss_and_grad(
    student: &Network,
    batch: &StepBatch<'_>,
    prior: &[f64],
    cfg: &TrainConfig,
) -> (f64, Network) {
    let c = student.n_out();
    let cache = student.forward_cached(batch.inputs);
    let mut probs = cache.logits().to_vec();
    for row in probs.chunks_exact_mut(c) {
        crate::linalg::softmax_inplace(row, cfg.student_temp);
    }
    let rows = probs.len() / c;
    let inv_n = 1.0 / rows as f64;
    let mut dlogits = vec![0f64; probs.len()];
    let mut loss = 0.0;
    match cfg.objective {
        Objective::Temi => {
            let mut a = vec![0f64; c];
            for r in 0..rows {
                let qs = &probs[r * c..(r + 1) * c];
                let qt = &batch.targets[r * c..(r + 1) * c];
                let w = batch.weights[r];
                let mut s = 0.0;
                for k in 0..c {
                    a[k] = (qs[k].max(PROB_FLOOR) * qt[k].max(PROB_FLOOR)).powf(cfg.beta)
                        / prior[k].max(PROB_FLOOR);
                    s += a[k];
                }
                loss += -w * s.ln() * inv_n;
                let scale = -w * cfg.beta * inv_n / cfg.student_temp;
                for k in 0..c {
                    dlogits[r * c + k] = scale * (a[k] / s - qs[k]);
                }
            }
        }
        Objective::Scan => {
            for r in 0..rows {
                let qs = &probs[r * c..(r + 1) * c];
                let qt = &batch.targets[r * c..(r + 1) * c];
                let p: f64 = qs.iter().zip(qt).map(|(a, b)| a * b).sum::<f64>().max(PROB_FLOOR);
                loss += -p.ln() * inv_n;
                let scale = -inv_n / cfg.student_temp;
                for k in 0..c {
                    dlogits[r * c + k] = scale * (qt[k] * qs[k] / p - qs[k]);
                }
            }
            if cfg.alpha != 0.0 {
                let mean = column_mean(&probs, c);
                loss += cfg.alpha * neg_entropy(&mean);
                let logm: Vec<f64> = mean.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
                let scale = cfg.alpha * inv_n / cfg.student_temp;
                for r in 0..rows {
                    let qs = &probs[r * c..(r + 1) * c];
                    let avg: f64 = qs.iter().zip(&logm).map(|(q, l)| q * l).sum();
                    for k in 0..c {
                        dlogits[r * c + k] += scale * qs[k] * (logm[k] - avg);
                    }
                }
            }
        }
    }
    (loss, student.backward(&cache, &dlogits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub head: usize,
    pub loss: f64,
    pub min_prior: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_losses(&self) -> Vec<f64> {
        let Some(last) = self.records.iter().map(|r| r.epoch).max() else {
            return Vec::new();
        };
        let mut rows: Vec<&EpochRecord> = self.records.iter().filter(|r| r.epoch == last).collect();
        rows.sort_by_key(|r| r.head);
        rows.into_iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,head,loss,min_prior\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.9},{:.9}\n", r.epoch, r.head, r.loss, r.min_prior));
        }
        out
    }
}

/// Index of the head with the lowest final-epoch loss (lowest index on ties).
pub fn select_head(log: &TrainingLog) -> Result<usize> {
    let losses = log.final_losses();
    if losses.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

fn to_f64_rows(features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * features.n_cols());
    for &r in rows {
        out.extend(features.row(r).iter().map(|&v| f64::from(v)));
    }
    out
}

/// Trains a head bank on `(x, x')` pairs drawn from the neighbor table.
pub fn train(
    features: &FeatureMatrix,
    neighbors: &NeighborTable,
    cfg: &TrainConfig,
) -> Result<(HeadBank, TrainingLog)> {
    cfg.validate()?;
    let n = features.n_rows();
    if neighbors.n_rows() != n || neighbors.k() == 0 {
        return Err(Error::NeighborMisaligned);
    }
    if cfg.objective == Objective::Scan && cfg.batch_size <= cfg.n_clusters {
        log::warn!(
            "batch size {} is not larger than the cluster count {}; the batch marginal will be poorly estimated",
            cfg.batch_size,
            cfg.n_clusters
        );
    }
    let c = cfg.n_clusters;
    let mut bank = HeadBank::new(features.n_cols(), cfg);
    let mut log = TrainingLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(n);
    for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut sums = vec![0f64; bank.n_heads()];
        let mut steps = 0usize;
        for (step, anchors) in perm.chunks(batch).enumerate() {
            let partners: Vec<usize> = anchors
                .iter()
                .map(|&a| {
                    let nn = neighbors.neighbors(a);
                    nn[rng.random_range(0..nn.len())] as usize
                })
                .collect();
            let stacked: Vec<usize> = anchors.iter().chain(&partners).copied().collect();
            let inputs = to_f64_rows(features, &stacked);
            let b = anchors.len();

            let teacher: Vec<Vec<f64>> = bank
                .heads
                .par_iter()
                .map(|h| h.teacher.probabilities(&inputs, cfg.teacher_temp))
                .collect();
            let weights: Vec<f64> = match cfg.objective {
                Objective::Temi => {
                    let half: Vec<f64> = (0..b)
                        .map(|r| {
                            let tx: Vec<&[f64]> = teacher.iter().map(|t| &t[r * c..(r + 1) * c]).collect();
                            let txp: Vec<&[f64]> =
                                teacher.iter().map(|t| &t[(b + r) * c..(b + r + 1) * c]).collect();
                            instance_weight(&tx, &txp)
                        })
                        .collect();
                    half.iter().chain(&half).copied().collect()
                }
                Objective::Scan => vec![1.0; 2 * b],
            };

            let losses: Vec<f64> = bank
                .heads
                .par_iter_mut()
                .zip(teacher.par_iter())
                .map(|(head, t)| {
                    // Swap halves so row r of x is paired with the teacher on x'.
                    let mut targets = Vec::with_capacity(t.len());
                    targets.extend_from_slice(&t[b * c..]);
                    targets.extend_from_slice(&t[..b * c]);
                    let step_batch = StepBatch {
                        inputs: &inputs,
                        targets: &targets,
                        weights: &weights,
                    };
                    let (loss, mut grad) = batch_loss_and_grad(&head.student, &step_batch, &head.prior, cfg);
                    grad.add_weight_decay(&head.student, cfg.weight_decay);
                    head.velocity.scale_add(cfg.sgd_momentum, &grad, 1.0);
                    head.student.axpy(-cfg.lr, &head.velocity);
                    head.teacher.ema_toward(&head.student, cfg.teacher_momentum);
                    update_prior(&mut head.prior, &column_mean(t, c), cfg.prior_momentum);
                    loss
                })
                .collect();
            for (h, &l) in losses.iter().enumerate() {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step, head: h });
                }
                sums[h] += l;
            }
            steps += 1;
        }
        for (h, head) in bank.heads.iter().enumerate() {
            log.records.push(EpochRecord {
                epoch,
                head: h,
                loss: sums[h] / steps as f64,
                min_prior: head.prior.iter().copied().fold(f64::INFINITY, f64::min),
            });
        }
    }
    Ok((bank, log))
}

/// Top-`k` clusters from the teacher of the selected head.
pub fn predict_topk(bank: &HeadBank, head: usize, features: &FeatureMatrix, k: usize) -> Result<ClusterAssignment> {
    if k == 0 || k > bank.n_clusters {
        return Err(Error::KTooLarge {
            k,
            available: bank.n_clusters,
        });
    }
    let probs = bank.forward(Role::Teacher, head, features)?;
    Ok(ClusterAssignment::from_scores(&probs, bank.n_clusters, k))
}
