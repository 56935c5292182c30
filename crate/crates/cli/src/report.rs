//! Evaluation report schema and the consolidated benchmark table.

use std::collections::BTreeMap;

use fclust_core::metrics::{Accuracies, CalibrationBins, ProtocolSummary, Validity};
use fclust_core::Split;
use serde::{Deserialize, Serialize};

pub const EVAL_REPORT: &str = "eval_report.json";

/// Written next to every prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    /// `kmeans`, `temi` or `scan`.
    pub method: String,
    pub n_clusters: usize,
    pub k: usize,
    pub n_rows: usize,
    pub dataset: String,
    pub split: Split,
    pub seed: u64,
    /// Whether the confidences are probabilities from a trained head.
    pub calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_prior: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub cluster: u32,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub bins: usize,
    pub repeats: usize,
    pub top_k: usize,
    pub nmi_normalization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSeeds {
    pub method: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub method: String,
    pub stage: String,
    pub predictions: String,
    pub split: Split,
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_clusters: usize,
    pub accuracies: Accuracies,
    pub ordering_holds: bool,
    /// Repeat-sampling summary, present when rows carry label sets.
    pub protocol: Option<ProtocolSummary>,
    /// Cluster to original class id.
    pub mapping: Vec<MappingEntry>,
    pub agreement: u64,
    pub nmi: f64,
    pub ece: f64,
    pub confidence_calibrated: bool,
    pub calibration: CalibrationBins,
    /// Validity indices of the features under the ground-truth labels.
    pub validity: Option<Validity>,
    pub params: EvalParams,
    pub seeds: EvalSeeds,
    pub notes: Vec<String>,
}

fn method_rank(m: &str) -> usize {
    match m {
        "kmeans" => 0,
        "temi" => 1,
        "scan" => 2,
        _ => 3,
    }
}

/// Sorts reports by benchmark, then method (kmeans, temi, scan, others), then stage.
pub fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        a.benchmark
            .cmp(&b.benchmark)
            .then(method_rank(&a.method).cmp(&method_rank(&b.method)))
            .then(a.method.cmp(&b.method))
            .then(a.stage.cmp(&b.stage))
    });
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const REPORT_COLUMNS: &str = "benchmark,method,stage,n_samples,n_classes,n_clusters,top1_1,top1_l,top5_1,top5_l,nmi,ece,silhouette,davies_bouldin,alignment,method_seed,eval_seed";

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_COLUMNS);
    out.push('\n');
    for r in reports {
        // With label sets the protocol mean is the headline number.
        let acc = r.protocol.as_ref().map_or(r.accuracies, |p| p.mean);
        let v = r.validity.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{:.6},{:.6},{},{},{},{},{}\n",
            r.benchmark,
            r.method,
            r.stage,
            r.n_samples,
            r.n_classes,
            r.n_clusters,
            acc.top1_1,
            acc.top1_l,
            opt(acc.top5_1),
            opt(acc.top5_l),
            r.nmi,
            r.ece,
            opt(v.map(|v| v.silhouette)),
            opt(v.map(|v| v.davies_bouldin)),
            opt(v.and_then(|v| v.alignment)),
            r.seeds.method,
            r.seeds.eval,
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub benchmark: String,
    pub method: String,
    pub stage: String,
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_clusters: usize,
    pub accuracies: Accuracies,
    pub nmi: f64,
    pub ece: f64,
    pub validity: Option<Validity>,
    pub seeds: EvalSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: Vec<ReportRow>,
    /// Stages per benchmark, in row order.
    pub benchmarks: BTreeMap<String, Vec<String>>,
    pub notes: Vec<String>,
}

pub fn report_summary(reports: &[EvalReport]) -> ReportSummary {
    let mut benchmarks: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut notes: Vec<String> = Vec::new();
    let rows = reports
        .iter()
        .map(|r| {
            benchmarks.entry(r.benchmark.clone()).or_default().push(r.stage.clone());
            for n in &r.notes {
                if !notes.contains(n) {
                    notes.push(n.clone());
                }
            }
            ReportRow {
                benchmark: r.benchmark.clone(),
                method: r.method.clone(),
                stage: r.stage.clone(),
                n_samples: r.n_samples,
                n_classes: r.n_classes,
                n_clusters: r.n_clusters,
                accuracies: r.protocol.as_ref().map_or(r.accuracies, |p| p.mean),
                nmi: r.nmi,
                ece: r.ece,
                validity: r.validity,
                seeds: r.seeds.clone(),
            }
        })
        .collect();
    ReportSummary { rows, benchmarks, notes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(benchmark: &str, method: &str, stage: &str) -> EvalReport {
        let acc = Accuracies {
            top1_1: 0.5,
            top1_l: 0.75,
            top5_1: None,
            top5_l: None,
        };
        EvalReport {
            benchmark: benchmark.into(),
            method: method.into(),
            stage: stage.into(),
            predictions: String::new(),
            split: Split::Val,
            n_samples: 4,
            n_classes: 2,
            n_clusters: 2,
            accuracies: acc,
            ordering_holds: true,
            protocol: None,
            mapping: Vec::new(),
            agreement: 2,
            nmi: 0.25,
            ece: 0.125,
            confidence_calibrated: false,
            calibration: CalibrationBins { bins: Vec::new() },
            validity: None,
            params: EvalParams {
                bins: 15,
                repeats: 50,
                top_k: 5,
                nmi_normalization: "arithmetic".into(),
            },
            seeds: EvalSeeds { method: 1, eval: 2 },
            notes: vec!["n".into()],
        }
    }

    #[test]
    fn rows_sort_by_benchmark_then_method() {
        let mut r = vec![
            report("b", "kmeans", "z"),
            report("a", "scan", "s"),
            report("a", "other", "o"),
            report("a", "kmeans", "k"),
            report("a", "temi", "t"),
        ];
        sort_reports(&mut r);
        let order: Vec<&str> = r.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(order, ["k", "t", "s", "o", "z"]);
    }

    #[test]
    fn csv_rows_and_summary() {
        let r = vec![report("a", "kmeans", "k"), report("a", "temi", "t")];
        let csv = report_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_COLUMNS);
        assert_eq!(lines[1], "a,kmeans,k,4,2,2,0.500000,0.750000,,,0.250000,0.125000,,,,1,2");
        let s = report_summary(&r);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.benchmarks["a"], vec!["k", "t"]);
        assert_eq!(s.notes, vec!["n"]);
    }
}
