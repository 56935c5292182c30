//! Pipeline configuration.
//!
//! A pipeline is one JSON document:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "stages": [
//!     { "stage": "synth", "name": "data", "spec": { "n_blobs": 5, "val_per_blob": 200 } },
//!     { "stage": "kmeans", "name": "km", "dataset": "@data/train", "eval": "@data/val" },
//!     { "stage": "eval", "name": "km_eval", "predictions": "@km", "dataset": "@data/val" }
//!   ]
//! }
//! ```
//!
//! References starting with `@` point into the output directory:
//! `@stage/split` is the dataset manifest `<out>/stage/split.manifest.json`
//! and `@stage` is the stage directory itself. Any other reference is a
//! path relative to the config file.

use std::path::Path;

use fclust_core::benchmark::BenchmarkSpec;
use fclust_core::heads::ProbeConfig;
use fclust_core::kmeans::KMeansConfig;
use fclust_core::refine::{HzrMode, Restriction, DEFAULT_TEMPERATURE};
use fclust_core::synth::SynthSpec;
use fclust_core::{Split, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<StageDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDef {
    pub name: String,
    /// Overrides the seed derived from the root seed and the stage name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub kind: StageKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageKind {
    Synth(SynthStage),
    Ingest(IngestStage),
    Bench(BenchStage),
    Knn(KnnStage),
    Kmeans(KmeansStage),
    Train(TrainStage),
    Probe(ProbeStage),
    Refine(RefineStage),
    Eval(EvalStage),
    Report(ReportStage),
}

impl StageKind {
    pub fn label(&self) -> &'static str {
        match self {
            StageKind::Synth(_) => "synth",
            StageKind::Ingest(_) => "ingest",
            StageKind::Bench(_) => "bench",
            StageKind::Knn(_) => "knn",
            StageKind::Kmeans(_) => "kmeans",
            StageKind::Train(_) => "train",
            StageKind::Probe(_) => "probe",
            StageKind::Refine(_) => "refine",
            StageKind::Eval(_) => "eval",
            StageKind::Report(_) => "report",
        }
    }

    /// Every reference the stage reads from.
    pub fn references(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        match self {
            StageKind::Synth(_) => {}
            StageKind::Ingest(s) => {
                out.extend([s.features.as_str(), s.labels.as_str()]);
                out.extend(s.multilabels.as_deref());
                out.extend(s.similarity.as_deref());
                out.extend(s.terms.as_deref());
            }
            StageKind::Bench(s) => {
                out.push(&s.train);
                out.extend(s.val.as_deref());
                out.extend(s.tree.as_deref());
                collect_tables(&s.spec, &mut out);
            }
            StageKind::Knn(s) => out.push(&s.dataset),
            StageKind::Kmeans(s) => {
                out.push(&s.dataset);
                out.extend(s.eval.as_deref());
            }
            StageKind::Train(s) => {
                out.extend([s.dataset.as_str(), s.neighbors.as_str()]);
                out.extend(s.eval.as_deref());
            }
            StageKind::Probe(s) => out.extend([s.train.as_str(), s.val.as_str()]),
            StageKind::Refine(s) => {
                out.extend([s.dataset.as_str(), s.tree.as_str()]);
                out.extend(s.val.as_deref());
            }
            StageKind::Eval(s) => {
                out.extend([s.predictions.as_str(), s.dataset.as_str()]);
                out.extend(s.neighbors.as_deref());
            }
            StageKind::Report(s) => out.extend(s.dir.as_deref()),
        }
        out
    }
}

fn collect_tables<'a>(spec: &'a BenchmarkSpec, out: &mut Vec<&'a str>) {
    match spec {
        BenchmarkSpec::ModelBased { accuracy_tables, .. } => out.extend(accuracy_tables.iter().map(String::as_str)),
        BenchmarkSpec::Union { parts } => parts.iter().for_each(|p| collect_tables(p, out)),
        _ => {}
    }
}

fn default_true() -> bool {
    true
}

fn default_split() -> Split {
    Split::Train
}

fn default_k() -> usize {
    fclust_core::neighbors::DEFAULT_K
}

fn default_block() -> usize {
    fclust_core::neighbors::DEFAULT_BLOCK
}

fn default_top_k() -> usize {
    fclust_core::metrics::TOP_K
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_mode() -> HzrMode {
    HzrMode::Parent
}

fn default_repeats() -> usize {
    50
}

fn default_bins() -> usize {
    fclust_core::metrics::DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStage {
    #[serde(default)]
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestStage {
    pub features: String,
    pub labels: String,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default)]
    pub multilabels: Option<String>,
    #[serde(default)]
    pub similarity: Option<String>,
    #[serde(default)]
    pub terms: Option<String>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchStage {
    pub train: String,
    #[serde(default)]
    pub val: Option<String>,
    #[serde(default)]
    pub tree: Option<String>,
    pub spec: BenchmarkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnStage {
    pub dataset: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_block")]
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansStage {
    pub dataset: String,
    /// Dataset to predict on; defaults to the training dataset.
    #[serde(default)]
    pub eval: Option<String>,
    /// Defaults to the number of classes present in the training labels.
    #[serde(default)]
    pub n_clusters: Option<usize>,
    #[serde(default)]
    pub config: KMeansConfig,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    pub dataset: String,
    /// Stage directory of a `knn` stage mined on `dataset`.
    pub neighbors: String,
    #[serde(default)]
    pub eval: Option<String>,
    #[serde(default)]
    pub n_clusters: Option<usize>,
    #[serde(default)]
    pub config: TrainConfig,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeStage {
    pub train: String,
    pub val: String,
    #[serde(default)]
    pub config: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineStage {
    pub dataset: String,
    #[serde(default)]
    pub val: Option<String>,
    pub tree: String,
    #[serde(default = "default_mode")]
    pub mode: HzrMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub canonicalize: bool,
    /// Restricted-candidate calibration runs on the unrefined labels.
    #[serde(default)]
    pub calibration: Vec<Restriction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    /// Stage directory of a `kmeans` or `train` stage.
    pub predictions: String,
    pub dataset: String,
    #[serde(default)]
    pub benchmark: Option<String>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_true")]
    pub validity: bool,
    /// Neighbor table of `dataset`, used for the alignment score.
    #[serde(default)]
    pub neighbors: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportStage {
    /// Directory searched for evaluation reports; defaults to the output root.
    #[serde(default)]
    pub dir: Option<String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl PipelineConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::missing_path(path, None))?;
        Self::parse(&text)
    }

    /// Structural checks that need no file system access.
    pub fn check(&self) -> CliResult<()> {
        self.check_structure()?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.stages {
            for r in s.kind.references() {
                if let Some(rest) = r.strip_prefix('@') {
                    let target = rest.split('/').next().unwrap_or("");
                    if !seen.contains(target) {
                        return Err(CliError::Validation {
                            message: format!("reference {r:?} does not name an earlier stage"),
                            path: None,
                            stage: Some(s.name.clone()),
                        });
                    }
                }
            }
            seen.insert(s.name.as_str());
        }
        Ok(())
    }

    /// Name and parameter checks; references are not inspected.
    pub fn check_structure(&self) -> CliResult<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.stages {
            if !valid_name(&s.name) {
                return Err(CliError::validation(format!(
                    "stage name {:?} must be non-empty and use only [A-Za-z0-9_-]",
                    s.name
                )));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(CliError::validation(format!("duplicate stage name {:?}", s.name)));
            }
            s.check_params()?;
        }
        if self.stages.is_empty() {
            return Err(CliError::validation("config has no stages"));
        }
        Ok(())
    }
}

impl StageDef {
    pub fn check_params(&self) -> CliResult<()> {
        let bad = |m: String| CliError::Validation {
            message: m,
            path: None,
            stage: Some(self.name.clone()),
        };
        match &self.kind {
            StageKind::Knn(s) if s.k == 0 || s.block == 0 => Err(bad("k and block must be positive".into())),
            StageKind::Kmeans(s) if s.top_k == 0 => Err(bad("top_k must be positive".into())),
            StageKind::Kmeans(s) if s.config.max_iter == 0 => Err(bad("max_iter must be positive".into())),
            StageKind::Train(s) if s.top_k == 0 => Err(bad("top_k must be positive".into())),
            StageKind::Train(s) => {
                let mut cfg = s.config.clone();
                cfg.n_clusters = cfg.n_clusters.max(2);
                cfg.validate().map_err(|e| bad(e.to_string()))
            }
            StageKind::Refine(s) if !(s.temperature > 0.0) => Err(bad("temperature must be positive".into())),
            StageKind::Eval(s) if s.repeats == 0 || s.bins == 0 => {
                Err(bad("repeats and bins must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::EXIT_VALIDATION;

    fn parse(text: &str) -> CliResult<PipelineConfig> {
        PipelineConfig::parse(text)
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(r#"{ "stages": [ { "stage": "synth", "name": "s", "spec": {} },
            { "stage": "knn", "name": "k", "dataset": "@s/train" } ] }"#)
        .unwrap();
        assert_eq!(cfg.seed, 0);
        match &cfg.stages[1].kind {
            StageKind::Knn(k) => assert_eq!((k.k, k.block), (50, 256)),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.stages[1].kind.references(), vec!["@s/train"]);
    }

    #[test]
    fn rejects_bad_structure() {
        let cases = [
            r#"{ "stages": [] }"#,
            r#"{ "stages": [ { "stage": "report", "name": "a b" } ] }"#,
            r#"{ "stages": [ { "stage": "report", "name": "a" }, { "stage": "report", "name": "a" } ] }"#,
            r#"{ "stages": [ { "stage": "knn", "name": "k", "dataset": "@k/train" } ] }"#,
            r#"{ "stages": [ { "stage": "knn", "name": "k", "dataset": "x", "k": 0 } ] }"#,
            r#"{ "stages": [ { "stage": "train", "name": "t", "dataset": "x", "neighbors": "y", "config": { "beta": 0.4 } } ] }"#,
            r#"{ "stages": [], "extra": 1 }"#,
        ];
        for text in cases {
            let err = parse(text).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_VALIDATION, "{text}");
        }
    }
}
