//! Head losses, prior and teacher dynamics, end-to-end training and the
//! linear probe.

use fclust_core::heads::{
    linear_probe, neg_entropy, predict_topk, scan_loss, select_head, temi_loss, train, update_prior, EpochRecord,
    Network, ProbeConfig, Role, TrainingLog,
};
use fclust_core::metrics::{contingency, hungarian};
use fclust_core::neighbors::mine_knn;
use fclust_core::synth::{synth_blobs, SynthSpec};
use fclust_core::{FeatureMatrix, LabelVector, Objective, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn temi_identity_at_beta_one(seed in 0u64..100_000, c in 2usize..12, w in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = simplex(&mut rng, c);
        prop_assert!(temi_loss(&q, &q, &q, 1.0, w).abs() < 1e-9);
    }

    #[test]
    fn scan_without_regularizer_is_consistency(seed in 0u64..100_000, c in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, s, m) = (simplex(&mut rng, c), simplex(&mut rng, c), simplex(&mut rng, c));
        let dot: f64 = t.iter().zip(&s).map(|(a, b)| a * b).sum();
        prop_assert!((scan_loss(&t, &s, &m, 0.0) + dot.ln()).abs() < 1e-12);
        let oracle = -dot.ln() + 5.0 * m.iter().map(|p| p * p.ln()).sum::<f64>();
        prop_assert!((scan_loss(&t, &s, &m, 5.0) - oracle).abs() < 1e-12);
    }

    #[test]
    fn prior_stays_on_simplex(seed in 0u64..100_000, c in 2usize..10, steps in 1usize..40, lambda in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prior = simplex(&mut rng, c);
        for _ in 0..steps {
            let mut mean = vec![0.0; c];
            mean[rng.random_range(0..c)] = 1.0;
            update_prior(&mut prior, &mean, lambda);
            prop_assert!((prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(prior.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn scan_one_hot_agreement_is_zero() {
    let one = [0.0, 1.0, 0.0];
    assert!(scan_loss(&one, &one, &one, 5.0).abs() < 1e-9);
    assert!(neg_entropy(&one).abs() < 1e-9);
}

#[test]
fn teacher_gap_shrinks_geometrically() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let student = Network::random(6, Some(5), 4, 0.5, &mut rng);
    let mut teacher = Network::random(6, Some(5), 4, 0.5, &mut rng);
    let gap = |t: &Network| -> f64 {
        t.flat().iter().zip(student.flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let g0 = gap(&teacher);
    let m: f64 = 0.9;
    for n in 1..=20 {
        teacher.ema_toward(&student, m);
        let want = g0 * m.powi(n);
        assert!((gap(&teacher) - want).abs() <= 1e-9 * g0, "step {n}");
    }
}

#[test]
fn zero_weights_give_uniform_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::random(3, None, 4, 0.0, &mut rng);
    let p = net.probabilities(&[0.3, -1.0, 2.0, 1.0, 1.0, 1.0], 0.1);
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn head_selection_ties_and_permutation() {
    let log = |losses: &[f64]| TrainingLog {
        records: losses
            .iter()
            .enumerate()
            .map(|(head, &loss)| EpochRecord {
                epoch: 3,
                head,
                loss,
                min_prior: 0.1,
            })
            .collect(),
    };
    assert_eq!(select_head(&log(&[0.5, 0.2, 0.9])).unwrap(), 1);
    assert_eq!(select_head(&log(&[0.2, 0.2])).unwrap(), 0);
    assert_eq!(select_head(&log(&[0.7])).unwrap(), 0);
    assert_eq!(select_head(&log(&[0.9, 0.5, 0.2])).unwrap(), 2);
}

fn acc(pred: &[u32], gt: &[u32], c: usize, k: usize) -> f64 {
    hungarian(&contingency(pred, gt, c, k)).agreement as f64 / gt.len() as f64
}

fn train_on_blobs(objective: Objective) -> f64 {
    let data = synth_blobs(&SynthSpec::default()).unwrap();
    let x = &data.train.features;
    let nn = mine_knn(x, 50, 256).unwrap();
    let cfg = TrainConfig {
        objective,
        n_heads: 8,
        n_clusters: 5,
        ..TrainConfig::default()
    };
    let (bank, log) = train(x, &nn, &cfg).unwrap();
    assert_eq!(log.records.len(), cfg.epochs * cfg.n_heads);
    let head = select_head(&log).unwrap();
    let pred = predict_topk(&bank, head, x, 1).unwrap();
    acc(&pred.top1(), data.train.labels.labels(), 5, 5)
}

#[test]
fn temi_recovers_blobs() {
    let a = train_on_blobs(Objective::Temi);
    assert!(a >= 0.95, "acc {a}");
}

#[test]
fn scan_recovers_blobs() {
    let a = train_on_blobs(Objective::Scan);
    assert!(a >= 0.95, "acc {a}");
}

#[test]
fn temi_avoids_collapse_on_one_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f32>> = (0..600)
        .map(|_| {
            let mut v = vec![1.0f32; 8];
            v.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
            v
        })
        .collect();
    let x = FeatureMatrix::from_rows(&rows).unwrap().normalized().unwrap();
    let nn = mine_knn(&x, 10, 128).unwrap();
    let cfg = TrainConfig {
        n_heads: 2,
        n_clusters: 2,
        beta: 0.6,
        batch_size: 128,
        epochs: 20,
        ..TrainConfig::default()
    };
    let (bank, _) = train(&x, &nn, &cfg).unwrap();
    for h in &bank.heads {
        let min = h.prior.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= 0.05, "prior {:?}", h.prior);
    }
}

#[test]
fn training_is_reproducible() {
    let data = synth_blobs(&SynthSpec {
        per_blob: 100,
        ..SynthSpec::default()
    })
    .unwrap();
    let x = &data.train.features;
    let nn = mine_knn(x, 10, 64).unwrap();
    let cfg = TrainConfig {
        n_heads: 3,
        n_clusters: 5,
        epochs: 3,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let (a, la) = train(x, &nn, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (b, lb) = pool.install(|| train(x, &nn, &cfg).unwrap());
    assert_eq!(la, lb);
    assert_eq!(a, b);
    let p: Vec<f64> = a.forward(Role::Teacher, 0, x).unwrap();
    for row in p.chunks_exact(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn two_blobs(seed: u64, n: usize) -> (FeatureMatrix, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 2) as u32;
        let sign = if c == 0 { 1.0 } else { -1.0 };
        rows.push(vec![
            sign * 3.0 + rng.random_range(-0.5f32..0.5),
            rng.random_range(-1.0f32..1.0),
            rng.random_range(-1.0f32..1.0),
        ]);
        labels.push(c);
    }
    (FeatureMatrix::from_rows(&rows).unwrap(), labels)
}

fn probe_cfg() -> ProbeConfig {
    ProbeConfig {
        learning_rates: vec![1e-3, 5e-3],
        weight_decays: vec![0.0],
        epochs: 30,
        batch_size: 64,
        ..ProbeConfig::default()
    }
}

#[test]
fn probe_separates_two_blobs() {
    let (xt, yt) = two_blobs(1, 400);
    let (xv, yv) = two_blobs(2, 200);
    let r = linear_probe(
        &xt,
        &LabelVector::new(yt, 2).unwrap(),
        &xv,
        &LabelVector::new(yv, 2).unwrap(),
        &probe_cfg(),
    )
    .unwrap();
    assert_eq!(r.best.val_accuracy, 1.0);
    assert_eq!(r.grid.len(), 2);
}

#[test]
fn probe_on_shuffled_labels_is_chance() {
    let (xt, _) = two_blobs(3, 2000);
    let (xv, _) = two_blobs(4, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shuffled = |n: usize| {
        let mut y: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        for i in (1..n).rev() {
            y.swap(i, rng.random_range(0..=i));
        }
        LabelVector::new(y, 2).unwrap()
    };
    let (yt, yv) = (shuffled(2000), shuffled(2000));
    let cfg = ProbeConfig {
        learning_rates: vec![1e-3],
        ..probe_cfg()
    };
    let r = linear_probe(&xt, &yt, &xv, &yv, &cfg).unwrap();
    assert!((r.best.val_accuracy - 0.5).abs() <= 0.05, "acc {}", r.best.val_accuracy);
}
