//! Benchmark construction from class histograms, hierarchies and per-class
//! accuracy tables.
//!
//! Frequency ranks run from least to most frequent (ties by ascending class
//! id). The percentile of rank `r` among `K` classes is `100 * (r + 0.5) / K`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{LabelVector, Split};

const PCT_EPS: f64 = 1e-9;

/// Per-class sample counts with frequency ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    counts: BTreeMap<u32, usize>,
    /// Classes in ascending frequency order; `by_rank[r]` has rank `r`.
    by_rank: Vec<u32>,
    total: usize,
}

impl ClassHistogram {
    /// Builds from `(class, count)` pairs; classes with a zero count are skipped.
    pub fn from_counts(counts: impl IntoIterator<Item = (u32, usize)>) -> Self {
        let counts: BTreeMap<u32, usize> = counts.into_iter().filter(|&(_, n)| n > 0).collect();
        let mut by_rank: Vec<u32> = counts.keys().copied().collect();
        by_rank.sort_by_key(|c| (counts[c], *c));
        let total = counts.values().sum();
        ClassHistogram {
            counts,
            by_rank,
            total,
        }
    }

    pub fn from_labels(labels: &LabelVector) -> Self {
        Self::from_counts(
            labels
                .counts()
                .into_iter()
                .enumerate()
                .map(|(c, n)| (c as u32, n)),
        )
    }

    pub fn n_classes(&self) -> usize {
        self.by_rank.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self, class: u32) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn by_rank(&self) -> &[u32] {
        &self.by_rank
    }

    pub fn rank_percentile(&self, rank: usize) -> f64 {
        100.0 * (rank as f64 + 0.5) / self.by_rank.len() as f64
    }

    /// Max/min class count over `classes` (1.0 for an empty selection).
    pub fn imbalance_ratio(&self, classes: &BTreeSet<u32>) -> f64 {
        let counts: Vec<usize> = classes.iter().map(|&c| self.count(c)).filter(|&n| n > 0).collect();
        match (counts.iter().max(), counts.iter().min()) {
            (Some(&hi), Some(&lo)) => hi as f64 / lo as f64,
            _ => 1.0,
        }
    }
}

/// Classes whose frequency-rank percentile lies in `[50 - s, 50 + s]`.
pub fn percentile_split(hist: &ClassHistogram, s: f64) -> BTreeSet<u32> {
    let (lo, hi) = (50.0 - s, 50.0 + s);
    hist.by_rank
        .iter()
        .enumerate()
        .filter(|&(r, _)| {
            let p = hist.rank_percentile(r);
            p >= lo - PCT_EPS && p <= hi + PCT_EPS
        })
        .map(|(_, &c)| c)
        .collect()
}

/// `(imbalanced, centered)`: the `s = 10` window plus the most frequent 10%
/// of classes, against a contiguous rank block of equal size around the median.
pub fn imbalanced_pair(hist: &ClassHistogram) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let k = hist.n_classes();
    let mut imbalanced = percentile_split(hist, 10.0);
    let n_top = k.div_ceil(10);
    imbalanced.extend(hist.by_rank[k - n_top..].iter().copied());
    let m = imbalanced.len();
    // Lower side takes the extra rank when k - m is odd.
    let start = (k - m) / 2;
    let centered = hist.by_rank[start..start + m].iter().copied().collect();
    (imbalanced, centered)
}

/// Row mask keeping a random `ceil(n_c / 2)` rows of every odd class.
pub fn odd_halving(labels: &LabelVector, split: Split, seed: u64) -> Result<Vec<bool>> {
    if split != Split::Train {
        return Err(Error::AppliedToValSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![true; labels.len()];
    for (class, rows) in labels.rows_by_class().into_iter().enumerate() {
        if class % 2 == 0 || rows.is_empty() {
            continue;
        }
        let keep = rows.len().div_ceil(2);
        let kept: BTreeSet<usize> = rows.iter().copied().choose_multiple(&mut rng, keep).into_iter().collect();
        for r in rows {
            mask[r] = kept.contains(&r);
        }
    }
    Ok(mask)
}

/// The `k` classes with the highest accuracy (ties by ascending id).
pub fn model_based_subset(per_class_acc: &BTreeMap<u32, f64>, k: usize) -> Result<BTreeSet<u32>> {
    if k > per_class_acc.len() {
        return Err(Error::KTooLarge {
            k,
            available: per_class_acc.len(),
        });
    }
    let mut ranked: Vec<(u32, f64)> = per_class_acc.iter().map(|(&c, &a)| (c, a)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(c, _)| c).collect())
}

/// Uniform random `k`-subset, deterministic under `seed`.
pub fn random_subset(classes: &BTreeSet<u32>, k: usize, seed: u64) -> Result<BTreeSet<u32>> {
    if k > classes.len() {
        return Err(Error::KTooLarge {
            k,
            available: classes.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(classes
        .iter()
        .copied()
        .choose_multiple(&mut rng, k)
        .into_iter()
        .collect())
}

pub fn union<'a>(sets: impl IntoIterator<Item = &'a BTreeSet<u32>>) -> BTreeSet<u32> {
    sets.into_iter().flat_map(|s| s.iter().copied()).collect()
}

/// Parses a `class_id,accuracy` CSV (an optional header line is skipped).
pub fn parse_accuracy_csv(text: &str) -> Result<BTreeMap<u32, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(c), Some(a)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse(format!("accuracy csv line {}", i + 1)));
        };
        match (c.trim().parse::<u32>(), a.trim().parse::<f64>()) {
            (Ok(c), Ok(a)) => {
                out.insert(c, a);
            }
            _ if i == 0 => continue,
            _ => return Err(Error::Parse(format!("accuracy csv line {}: {line:?}", i + 1))),
        }
    }
    Ok(out)
}

pub fn class_set_csv(classes: &BTreeSet<u32>) -> String {
    let mut out = String::from("class_id\n");
    for c in classes {
        out.push_str(&format!("{c}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchmarkSpec {
    Percentile { s: f64 },
    ImbalancedPair { which: PairSide },
    OddHalving { seed: u64 },
    Coarse { d_max: u32 },
    Leaf,
    RandomK { k: usize, seed: u64 },
    ModelBased { k: usize, accuracy_tables: Vec<String> },
    Union { parts: Vec<BenchmarkSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSide {
    Imbalanced,
    Centered,
}

/// Provenance record emitted beside every generated subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: BenchmarkSpec,
    pub n_samples: usize,
    pub n_classes: usize,
    pub imbalance_ratio: f64,
    pub note: String,
}
