//! Synthetic fixtures: Gaussian blobs on the unit sphere.
//!
//! Blob centers are random unit vectors. With `sigma = min center distance /
//! separation`, each sample is `normalize(center + sigma * eps)` for
//! standard normal `eps`. The optional tree lists the leaves first so that
//! leaf node ids equal the dense class ids.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{
    write_text, DatasetManifest, FeatureMatrix, LabelVector, MultiLabelSets, SimilarityMatrix, Split,
};
use crate::tree::SemanticTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Imbalance {
    Balanced,
    /// Class `k` receives `round(per_blob * ratio^k)` rows (at least one).
    Geometric { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeShape {
    #[serde(rename = "none")]
    None,
    /// root -> one inner node -> every leaf.
    #[serde(rename = "chain-3")]
    Chain3,
    /// root -> pairs of leaves under one inner node each.
    #[serde(rename = "balanced-3")]
    Balanced3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_blobs: usize,
    pub per_blob: usize,
    /// Rows per blob in the validation split, before imbalance; 0 disables it.
    pub val_per_blob: usize,
    pub dim: usize,
    pub separation: f64,
    pub imbalance: Imbalance,
    pub tree: TreeShape,
    pub similarity: bool,
    pub similarity_noise: f64,
    /// When set, a row's label set also holds every class whose center is
    /// within this cosine margin of its own center's similarity.
    pub multilabel_margin: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_blobs: 5,
            per_blob: 1000,
            val_per_blob: 0,
            dim: 16,
            separation: 10.0,
            imbalance: Imbalance::Balanced,
            tree: TreeShape::None,
            similarity: false,
            similarity_noise: 0.05,
            multilabel_margin: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub similarity: Option<SimilarityMatrix>,
    pub multilabels: Option<MultiLabelSets>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub train: SynthSplit,
    pub val: Option<SynthSplit>,
    pub tree: Option<SemanticTree>,
}

pub fn class_counts(spec: &SynthSpec, per_blob: usize) -> Vec<usize> {
    (0..spec.n_blobs)
        .map(|k| match spec.imbalance {
            Imbalance::Balanced => per_blob,
            Imbalance::Geometric { ratio } => ((per_blob as f64 * ratio.powi(k as i32)).round() as usize).max(1),
        })
        .collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn build_tree(spec: &SynthSpec) -> Result<Option<SemanticTree>> {
    let c = spec.n_blobs;
    let mut text = String::new();
    match spec.tree {
        TreeShape::None => return Ok(None),
        TreeShape::Chain3 => {
            for k in 0..c {
                text.push_str(&format!("blob{k}\tmid\n"));
            }
            text.push_str("mid\troot\nroot\t\n");
        }
        TreeShape::Balanced3 => {
            for k in 0..c {
                text.push_str(&format!("blob{k}\tgroup{}\n", k / 2));
            }
            for g in 0..c.div_ceil(2) {
                text.push_str(&format!("group{g}\troot\n"));
            }
            text.push_str("root\t\n");
        }
    }
    SemanticTree::parse_tsv(&text).map(Some)
}

/// Per-term direction: the blob center for a leaf, the normalized mean of
/// the descendant centers for an inner node.
fn term_vectors(centers: &[Vec<f64>], tree: Option<&SemanticTree>) -> (Vec<String>, Vec<Vec<f64>>) {
    match tree {
        None => ((0..centers.len()).map(|k| format!("blob{k}")).collect(), centers.to_vec()),
        Some(t) => {
            let dim = centers[0].len();
            let mut names = Vec::new();
            let mut vecs = Vec::new();
            for (i, node) in t.nodes().iter().enumerate() {
                let mut v = vec![0.0; dim];
                for (k, c) in centers.iter().enumerate() {
                    if t.is_descendant_or_self(k, i) {
                        v.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                    }
                }
                unit(&mut v);
                names.push(node.id.clone());
                vecs.push(v);
            }
            (names, vecs)
        }
    }
}

fn sample_split(
    spec: &SynthSpec,
    per_blob: usize,
    centers: &[Vec<f64>],
    sigma: f64,
    terms: &(Vec<String>, Vec<Vec<f64>>),
    rng: &mut ChaCha8Rng,
) -> Result<SynthSplit> {
    let counts = class_counts(spec, per_blob);
    let mut labels: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k as u32, n))
        .collect();
    labels.shuffle(rng);
    let mut values = Vec::with_capacity(labels.len() * spec.dim);
    let mut sets = Vec::new();
    for &l in &labels {
        let mut x: Vec<f64> = centers[l as usize]
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + sigma * e
            })
            .collect();
        unit(&mut x);
        if let Some(margin) = spec.multilabel_margin {
            let sims: Vec<f64> = centers.iter().map(|c| c.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            let own = sims[l as usize];
            sets.push(
                (0..centers.len() as u32)
                    .filter(|&k| k == l || sims[k as usize] >= own - margin)
                    .collect::<Vec<u32>>(),
            );
        }
        values.extend(x.iter().map(|&v| v as f32));
    }
    let features = FeatureMatrix::new(labels.len(), spec.dim, values)?.normalized()?;
    let similarity = if spec.similarity {
        let noise = Normal::new(0.0, spec.similarity_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut sims = Vec::with_capacity(labels.len() * terms.0.len());
        for &l in &labels {
            let c = &centers[l as usize];
            for t in &terms.1 {
                let d: f64 = c.iter().zip(t).map(|(a, b)| a * b).sum();
                sims.push((d + noise.sample(rng)) as f32);
            }
        }
        Some(SimilarityMatrix::new(labels.len(), terms.0.clone(), sims)?)
    } else {
        None
    };
    let multilabels = match spec.multilabel_margin {
        Some(_) => Some(MultiLabelSets::new(labels.clone(), sets, spec.n_blobs)?),
        None => None,
    };
    Ok(SynthSplit {
        features,
        labels: LabelVector::new(labels, spec.n_blobs)?,
        similarity,
        multilabels,
    })
}

pub fn synth_blobs(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n_blobs == 0 || spec.per_blob == 0 || spec.dim < 2 {
        return Err(Error::InvalidConfig("synth needs n_blobs >= 1, per_blob >= 1, dim >= 2".into()));
    }
    if !(spec.separation > 0.0) {
        return Err(Error::InvalidConfig("separation must be positive".into()));
    }
    if let Imbalance::Geometric { ratio } = spec.imbalance {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidConfig("geometric ratio must lie in (0, 1]".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.n_blobs)
        .map(|_| {
            let mut v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            unit(&mut v);
            v
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if !min_dist.is_finite() {
        min_dist = 1.0;
    }
    let sigma = min_dist / spec.separation;
    let tree = build_tree(spec)?;
    let terms = term_vectors(&centers, tree.as_ref());
    let train = sample_split(spec, spec.per_blob, &centers, sigma, &terms, &mut rng)?;
    let val = if spec.val_per_blob > 0 {
        Some(sample_split(spec, spec.val_per_blob, &centers, sigma, &terms, &mut rng)?)
    } else {
        None
    };
    Ok(SynthData {
        centers,
        sigma,
        train,
        val,
        tree,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthArtifacts {
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub tree: Option<PathBuf>,
}

fn write_split(dir: &Path, name: &str, split: Split, data: &SynthSplit) -> Result<PathBuf> {
    let tag = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let feature_path = format!("{tag}.features.fbcf");
    let label_path = format!("{tag}.labels.fbcf");
    data.features.write(&dir.join(&feature_path))?;
    data.labels.write(&dir.join(&label_path))?;
    let mut manifest = DatasetManifest {
        name: name.to_owned(),
        split,
        feature_path,
        label_path,
        multilabel_path: None,
        similarity_path: None,
        terms_path: None,
        remap_path: None,
        checksums: Default::default(),
    };
    if let Some(ml) = &data.multilabels {
        let p = format!("{tag}.multilabels.txt");
        write_text(&dir.join(&p), &ml.to_text())?;
        manifest.multilabel_path = Some(p);
    }
    if let Some(sim) = &data.similarity {
        let s = format!("{tag}.similarity.fbcf");
        let t = format!("{tag}.terms.txt");
        sim.write(&dir.join(&s), &dir.join(&t))?;
        manifest.similarity_path = Some(s);
        manifest.terms_path = Some(t);
    }
    manifest.fill_checksums(dir)?;
    let path = dir.join(format!("{tag}.manifest.json"));
    manifest.save(&path)?;
    Ok(path)
}

/// Generates a fixture and writes manifests (plus tree TSV) under `dir`.
pub fn write_fixture(spec: &SynthSpec, dir: &Path, name: &str) -> Result<SynthArtifacts> {
    let data = synth_blobs(spec)?;
    let train_manifest = write_split(dir, name, Split::Train, &data.train)?;
    let val_manifest = match &data.val {
        Some(v) => Some(write_split(dir, name, Split::Val, v)?),
        None => None,
    };
    let tree = match &data.tree {
        Some(t) => {
            let p = dir.join("tree.tsv");
            write_text(&p, &t.to_tsv())?;
            Some(p)
        }
        None => None,
    };
    Ok(SynthArtifacts {
        train_manifest,
        val_manifest,
        tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_blobs_are_unit_norm_with_expected_counts() {
        let spec = SynthSpec {
            per_blob: 40,
            dim: 8,
            ..SynthSpec::default()
        };
        let d = synth_blobs(&spec).unwrap();
        assert_eq!(d.train.features.n_rows(), 200);
        assert_eq!(d.train.labels.n_classes(), 5);
        assert_eq!(d.train.labels.counts(), vec![40; 5]);
        for row in d.train.features.rows() {
            let n: f64 = row.iter().map(|&v| f64::from(v).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn geometric_profile_halves() {
        let spec = SynthSpec {
            per_blob: 1600,
            imbalance: Imbalance::Geometric { ratio: 0.5 },
            ..SynthSpec::default()
        };
        let counts = class_counts(&spec, spec.per_blob);
        assert_eq!(counts, vec![1600, 800, 400, 200, 100]);
        assert_eq!(counts[0] / counts[4], 1 << 4);
    }

    #[test]
    fn chain_tree_coarsens_to_one_class() {
        let spec = SynthSpec {
            per_blob: 5,
            tree: TreeShape::Chain3,
            ..SynthSpec::default()
        };
        let d = synth_blobs(&spec).unwrap();
        let t = d.tree.unwrap();
        assert_eq!(t.max_depth(), 3);
        for k in 0..5 {
            assert_eq!(t.lookup(&format!("blob{k}")), Some(k));
        }
        let (coarse, _) = t.coarsen(&d.train.labels, 1).unwrap();
        assert_eq!(coarse.n_classes(), 1);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            per_blob: 10,
            similarity: true,
            tree: TreeShape::Balanced3,
            val_per_blob: 3,
            ..SynthSpec::default()
        };
        let a = synth_blobs(&spec).unwrap();
        let b = synth_blobs(&spec).unwrap();
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.val.unwrap().labels, b.val.unwrap().labels);
        let c = synth_blobs(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn multilabel_sets_contain_primary_and_near_classes() {
        let spec = SynthSpec {
            per_blob: 50,
            separation: 2.0,
            multilabel_margin: Some(0.05),
            ..SynthSpec::default()
        };
        let d = synth_blobs(&spec).unwrap();
        let ml = d.train.multilabels.unwrap();
        assert_eq!(ml.primary(), d.train.labels.labels());
        assert!((0..ml.len()).any(|i| ml.set(i).len() > 1));
        let dir = tempfile::tempdir().unwrap();
        let art = write_fixture(&spec, dir.path(), "ml").unwrap();
        let ds = crate::store::Dataset::load(&art.train_manifest, true).unwrap();
        assert_eq!(ds.multilabels.unwrap().len(), 250);
    }

    #[test]
    fn fixture_roundtrips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_blob: 6,
            val_per_blob: 2,
            similarity: true,
            tree: TreeShape::Balanced3,
            ..SynthSpec::default()
        };
        let art = write_fixture(&spec, dir.path(), "blobs").unwrap();
        let ds = crate::store::Dataset::load(&art.train_manifest, true).unwrap();
        assert!(ds.multilabels.is_none());
        assert_eq!(ds.features.n_rows(), 30);
        let sim = ds.similarity.unwrap();
        // 5 leaves, 3 groups, 1 root.
        assert_eq!(sim.n_terms(), 9);
        let tree = SemanticTree::load(art.tree.as_ref().unwrap()).unwrap();
        assert_eq!(tree.len(), 9);
        assert!(art.val_manifest.is_some());
    }
}
