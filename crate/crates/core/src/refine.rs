//! Zero-shot relabeling over precomputed image-text similarities.
//!
//! Class ids are tree node indices. A class scores the maximum similarity
//! over its term columns, or the single column pinned by [`lemma_vote`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ece, DEFAULT_BINS};
use crate::store::{LabelVector, SimilarityMatrix};
use crate::tree::SemanticTree;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const DEPTH_BUDGET: usize = 64;

/// Term columns per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermIndex {
    columns: Vec<Vec<usize>>,
}

impl TermIndex {
    pub fn new(columns: Vec<Vec<usize>>) -> Self {
        let columns = columns
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c.dedup();
                c
            })
            .collect();
        TermIndex { columns }
    }

    /// Matches each node's lemmas, then its name and id, against the term list.
    pub fn from_tree(tree: &SemanticTree, sim: &SimilarityMatrix) -> Self {
        let columns = tree
            .nodes()
            .iter()
            .map(|n| {
                n.lemmas
                    .iter()
                    .chain([&n.name, &n.id])
                    .filter_map(|t| sim.term_id(t))
                    .collect()
            })
            .collect();
        Self::new(columns)
    }

    pub fn columns(&self, class: usize) -> &[usize] {
        self.columns.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Pins every class with labeled rows to its majority-vote lemma.
    pub fn canonicalize(&mut self, sim: &SimilarityMatrix, labels: &LabelVector) -> Result<()> {
        let by_class = labels.rows_by_class();
        for (class, rows) in by_class.iter().enumerate() {
            if rows.is_empty() || class >= self.columns.len() || self.columns[class].len() < 2 {
                continue;
            }
            let chosen = lemma_vote(sim, rows, &self.columns[class])?;
            self.columns[class] = vec![chosen];
        }
        Ok(())
    }

    fn score(&self, sim: &SimilarityMatrix, row: usize, class: usize) -> Result<f64> {
        let cols = self.columns(class);
        if cols.is_empty() {
            return Err(Error::UnknownTerm(class));
        }
        Ok(cols
            .iter()
            .map(|&c| f64::from(sim.get(row, c)))
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Zero-shot decision for one row: chosen class and softmax over candidates
/// (in ascending candidate order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub class: usize,
    pub confidences: Vec<f64>,
}

impl ZeroShot {
    pub fn max_confidence(&self) -> f64 {
        self.confidences.iter().copied().fold(0.0, f64::max)
    }
}

pub fn zero_shot_row(
    sim: &SimilarityMatrix,
    row: usize,
    candidates: &BTreeSet<usize>,
    terms: &TermIndex,
    temperature: f64,
) -> Result<ZeroShot> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &c in candidates {
        scores.push(terms.score(sim, row, c)?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    crate::linalg::softmax_inplace(&mut scores, temperature);
    Ok(ZeroShot {
        class: *candidates.iter().nth(best).unwrap(),
        confidences: scores,
    })
}

pub fn zero_shot(
    sim: &SimilarityMatrix,
    candidates: &BTreeSet<usize>,
    terms: &TermIndex,
    temperature: f64,
) -> Result<Vec<ZeroShot>> {
    (0..sim.n_rows())
        .into_par_iter()
        .map(|r| zero_shot_row(sim, r, candidates, terms, temperature))
        .collect()
}

/// Modal per-row argmax among `lemmas`; ties go to the lowest term id.
pub fn lemma_vote(sim: &SimilarityMatrix, rows: &[usize], lemmas: &[usize]) -> Result<usize> {
    if rows.is_empty() || lemmas.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = lemmas.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &r in rows {
        let mut best = sorted[0];
        for &t in &sorted[1..] {
            if sim.get(r, t) > sim.get(r, best) {
                best = t;
            }
        }
        *votes.entry(best).or_default() += 1;
    }
    let mut winner = (0, 0);
    for (&t, &n) in &votes {
        if n > winner.1 {
            winner = (t, n);
        }
    }
    Ok(winner.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HzrMode {
    Leaf,
    Parent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LeafReached,
    ParentRetained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub candidates: Vec<usize>,
    pub chosen: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub row: usize,
    pub original: usize,
    pub steps: Vec<RefineStep>,
    #[serde(rename = "final")]
    pub final_class: usize,
    pub stopped_by: StopReason,
}

fn refine_row(
    tree: &SemanticTree,
    sim: &SimilarityMatrix,
    terms: &TermIndex,
    row: usize,
    label: usize,
    mode: HzrMode,
    temperature: f64,
) -> Result<RefinementTrace> {
    let mut cur = label;
    let mut steps = Vec::new();
    let stopped_by = loop {
        let children = tree.children(cur);
        if children.is_empty() {
            break StopReason::LeafReached;
        }
        if steps.len() >= DEPTH_BUDGET {
            return Err(Error::DepthBudgetExceeded(DEPTH_BUDGET));
        }
        let mut cand: BTreeSet<usize> = children.iter().copied().collect();
        if mode == HzrMode::Parent {
            cand.insert(cur);
        }
        let z = zero_shot_row(sim, row, &cand, terms, temperature)?;
        steps.push(RefineStep {
            candidates: cand.into_iter().collect(),
            chosen: z.class,
            scores: z.confidences,
        });
        if z.class == cur {
            break StopReason::ParentRetained;
        }
        cur = z.class;
    };
    Ok(RefinementTrace {
        row,
        original: label,
        steps,
        final_class: cur,
        stopped_by,
    })
}

/// Recursively relabels every row toward the leaves of `tree`.
pub fn hzr(
    tree: &SemanticTree,
    sim: &SimilarityMatrix,
    labels: &LabelVector,
    terms: &TermIndex,
    mode: HzrMode,
    temperature: f64,
) -> Result<(LabelVector, Vec<RefinementTrace>)> {
    if sim.n_rows() != labels.len() {
        return Err(Error::RowCountMismatch {
            expected: labels.len(),
            found: sim.n_rows(),
        });
    }
    if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= tree.len()) {
        return Err(Error::UnmappedLabel(bad));
    }
    let traces: Vec<RefinementTrace> = labels
        .labels()
        .par_iter()
        .enumerate()
        .map(|(row, &l)| refine_row(tree, sim, terms, row, l as usize, mode, temperature))
        .collect::<Result<_>>()?;
    let refined = traces.iter().map(|t| t.final_class as u32).collect();
    Ok((LabelVector::new(refined, tree.len())?, traces))
}

pub fn trace_jsonl(traces: &[RefinementTrace]) -> Result<String> {
    let mut out = String::new();
    for t in traces.iter().filter(|t| !t.steps.is_empty()) {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub rows: usize,
    pub classes_before: usize,
    pub classes_after: usize,
    pub rows_refined: usize,
    pub fraction_refined: f64,
    pub parent_retained: usize,
    pub rows_dropped: usize,
}

impl RefineSummary {
    pub fn new(traces: &[RefinementTrace], rows_dropped: usize) -> Self {
        let before: BTreeSet<usize> = traces.iter().map(|t| t.original).collect();
        let after: BTreeSet<usize> = traces.iter().map(|t| t.final_class).collect();
        let refined = traces.iter().filter(|t| t.final_class != t.original).count();
        RefineSummary {
            rows: traces.len(),
            classes_before: before.len(),
            classes_after: after.len(),
            rows_refined: refined,
            fraction_refined: if traces.is_empty() {
                0.0
            } else {
                refined as f64 / traces.len() as f64
            },
            parent_retained: traces
                .iter()
                .filter(|t| t.stopped_by == StopReason::ParentRetained)
                .count(),
            rows_dropped,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "rows,classes_before,classes_after,rows_refined,fraction_refined,parent_retained,rows_dropped\n{},{},{},{},{:.6},{},{}\n",
            self.rows,
            self.classes_before,
            self.classes_after,
            self.rows_refined,
            self.fraction_refined,
            self.parent_retained,
            self.rows_dropped
        )
    }
}

/// Rows to keep in each split so that both cover the same class set.
pub fn align_splits(train: &LabelVector, val: &LabelVector) -> (Vec<usize>, Vec<usize>) {
    let shared: BTreeSet<u32> = train
        .present_classes()
        .intersection(&val.present_classes())
        .copied()
        .collect();
    let keep = |l: &LabelVector| {
        (0..l.len())
            .filter(|&i| shared.contains(&l.get(i)))
            .collect::<Vec<_>>()
    };
    (keep(train), keep(val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    All,
    SameHierarchy,
    Siblings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub restriction: Restriction,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub n_rows: usize,
    pub sibling_fallbacks: usize,
}

/// Candidate set for a row whose ground truth is `class`. Sibling sets with
/// no class other than the ground truth fall back to the same depth.
pub fn restricted_candidates(
    tree: &SemanticTree,
    class: usize,
    restriction: Restriction,
) -> Result<(BTreeSet<usize>, bool)> {
    match restriction {
        Restriction::All => Ok((tree.all_classes(), false)),
        Restriction::SameHierarchy => {
            let mut s = tree.same_depth_classes(class)?;
            s.insert(class);
            Ok((s, false))
        }
        Restriction::Siblings => {
            let mut s = tree.siblings(class)?;
            if s.is_empty() {
                s = tree.same_depth_classes(class)?;
                s.insert(class);
                return Ok((s, true));
            }
            s.insert(class);
            Ok((s, false))
        }
    }
}

pub fn restricted_calibration(
    sim: &SimilarityMatrix,
    tree: &SemanticTree,
    labels: &LabelVector,
    terms: &TermIndex,
    restriction: Restriction,
    temperature: f64,
) -> Result<CalibrationResult> {
    if sim.n_rows() != labels.len() {
        return Err(Error::RowCountMismatch {
            expected: labels.len(),
            found: sim.n_rows(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<(bool, f64, bool)> = labels
        .labels()
        .par_iter()
        .enumerate()
        .map(|(r, &l)| {
            let gt = l as usize;
            if gt >= tree.len() {
                return Err(Error::UnmappedLabel(l));
            }
            let (cand, fell_back) = restricted_candidates(tree, gt, restriction)?;
            let z = zero_shot_row(sim, r, &cand, terms, temperature)?;
            Ok((z.class == gt, z.max_confidence(), fell_back))
        })
        .collect::<Result<_>>()?;
    let correct: Vec<bool> = rows.iter().map(|r| r.0).collect();
    let conf: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (e, _) = ece(&conf, &correct, DEFAULT_BINS)?;
    let n = rows.len() as f64;
    Ok(CalibrationResult {
        restriction,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        ece: e,
        mean_confidence: conf.iter().sum::<f64>() / n,
        n_rows: rows.len(),
        sibling_fallbacks: rows.iter().filter(|r| r.2).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(rows: usize, terms: &[&str], values: Vec<f32>) -> SimilarityMatrix {
        SimilarityMatrix::new(rows, terms.iter().map(|s| s.to_string()).collect(), values).unwrap()
    }

    fn furniture() -> SemanticTree {
        SemanticTree::from_edges(&[("furniture", None), ("chair", Some("furniture")), ("desk", Some("furniture"))])
            .unwrap()
    }

    #[test]
    fn single_candidate_is_certain() {
        let s = sim(1, &["a", "b"], vec![0.1, 0.7]);
        let terms = TermIndex::new(vec![vec![0], vec![1]]);
        let z = zero_shot_row(&s, 0, &BTreeSet::from([1]), &terms, 0.01).unwrap();
        assert_eq!(z.class, 1);
        assert_eq!(z.confidences, vec![1.0]);
    }

    #[test]
    fn softmax_arithmetic() {
        let s = sim(1, &["a", "b"], vec![2.0, 1.0]);
        let terms = TermIndex::new(vec![vec![0], vec![1]]);
        let z = zero_shot_row(&s, 0, &BTreeSet::from([0, 1]), &terms, 1.0).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert_eq!(z.class, 0);
        assert!((z.confidences[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((z.confidences[0] - 0.731).abs() < 1e-3);
    }

    #[test]
    fn ties_pick_lower_id() {
        let s = sim(1, &["a", "b"], vec![0.5, 0.5]);
        let terms = TermIndex::new(vec![vec![0], vec![1]]);
        let z = zero_shot_row(&s, 0, &BTreeSet::from([0, 1]), &terms, 0.01).unwrap();
        assert_eq!(z.class, 0);
        assert!((z.confidences[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_term_is_reported() {
        let s = sim(1, &["a"], vec![0.5]);
        let terms = TermIndex::new(vec![vec![0], vec![]]);
        let err = zero_shot_row(&s, 0, &BTreeSet::from([0, 1]), &terms, 0.01).unwrap_err();
        assert!(matches!(err, Error::UnknownTerm(1)));
    }

    #[test]
    fn votes() {
        // rows prefer terms A, A, B
        let s = sim(3, &["A", "B"], vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.6]);
        assert_eq!(lemma_vote(&s, &[0, 1, 2], &[0, 1]).unwrap(), 0);
        assert_eq!(lemma_vote(&s, &[0, 1, 2], &[1]).unwrap(), 1);
        let tie = sim(4, &["A", "B"], vec![0.9, 0.1, 0.1, 0.9, 0.9, 0.1, 0.1, 0.9]);
        assert_eq!(lemma_vote(&tie, &[0, 1, 2, 3], &[1, 0]).unwrap(), 0);
    }

    #[test]
    fn parent_mode_descends_to_leaf() {
        let t = furniture();
        let s = sim(1, &["furniture", "chair", "desk"], vec![0.5, 0.9, 0.2]);
        let terms = TermIndex::from_tree(&t, &s);
        let labels = LabelVector::new(vec![0], 3).unwrap();
        let (out, traces) = hzr(&t, &s, &labels, &terms, HzrMode::Parent, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(out.labels(), &[1]);
        assert_eq!(traces[0].stopped_by, StopReason::LeafReached);
        assert_eq!(traces[0].steps.len(), 1);
        assert_eq!(traces[0].steps[0].candidates, vec![0, 1, 2]);
    }

    #[test]
    fn parent_mode_retains_parent() {
        let t = furniture();
        let s = sim(1, &["furniture", "chair", "desk"], vec![0.95, 0.9, 0.2]);
        let terms = TermIndex::from_tree(&t, &s);
        let labels = LabelVector::new(vec![0], 3).unwrap();
        let (out, traces) = hzr(&t, &s, &labels, &terms, HzrMode::Parent, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(out.labels(), &[0]);
        assert_eq!(traces[0].stopped_by, StopReason::ParentRetained);
        // Leaf mode must still go down.
        let (leaf, _) = hzr(&t, &s, &labels, &terms, HzrMode::Leaf, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(leaf.labels(), &[1]);
    }

    #[test]
    fn leaf_rows_pass_through() {
        let t = furniture();
        let s = sim(1, &["furniture", "chair", "desk"], vec![0.95, 0.1, 0.9]);
        let terms = TermIndex::from_tree(&t, &s);
        let labels = LabelVector::new(vec![1], 3).unwrap();
        for mode in [HzrMode::Leaf, HzrMode::Parent] {
            let (out, traces) = hzr(&t, &s, &labels, &terms, mode, DEFAULT_TEMPERATURE).unwrap();
            assert_eq!(out.labels(), &[1]);
            assert!(traces[0].steps.is_empty());
        }
        assert_eq!(trace_jsonl(&[]).unwrap(), "");
    }

    #[test]
    fn unmapped_label() {
        let t = furniture();
        let s = sim(1, &["furniture"], vec![0.5]);
        let terms = TermIndex::from_tree(&t, &s);
        let labels = LabelVector::new(vec![7], 8).unwrap();
        assert!(matches!(
            hzr(&t, &s, &labels, &terms, HzrMode::Leaf, 0.01),
            Err(Error::UnmappedLabel(7))
        ));
    }

    #[test]
    fn sibling_fallback_when_only_child() {
        // r -> {a -> {x}, b -> {y}}: x has no siblings besides itself.
        let t = SemanticTree::from_edges(&[
            ("r", None),
            ("a", Some("r")),
            ("b", Some("r")),
            ("x", Some("a")),
            ("y", Some("b")),
        ])
        .unwrap();
        let x = t.lookup("x").unwrap();
        let (cand, fell_back) = restricted_candidates(&t, x, Restriction::Siblings).unwrap();
        assert!(fell_back);
        assert_eq!(cand, BTreeSet::from([x, t.lookup("y").unwrap()]));
    }

    #[test]
    fn perfect_similarities_are_fully_accurate() {
        let t = furniture();
        // GT term always maximal.
        let s = sim(2, &["furniture", "chair", "desk"], vec![0.1, 0.9, 0.2, 0.1, 0.2, 0.9]);
        let terms = TermIndex::from_tree(&t, &s);
        let labels = LabelVector::new(vec![1, 2], 3).unwrap();
        for r in [Restriction::All, Restriction::SameHierarchy, Restriction::Siblings] {
            let c = restricted_calibration(&s, &t, &labels, &terms, r, 0.01).unwrap();
            assert_eq!(c.accuracy, 1.0);
            assert!(c.mean_confidence > 0.99);
        }
    }

    #[test]
    fn canonicalize_pins_majority_lemma() {
        let t = SemanticTree::parse_tsv("root\t\tRoot\tfirst|second\n").unwrap();
        let s = sim(3, &["first", "second"], vec![0.1, 0.9, 0.2, 0.8, 0.9, 0.1]);
        let mut terms = TermIndex::from_tree(&t, &s);
        assert_eq!(terms.columns(0), &[0, 1]);
        terms.canonicalize(&s, &LabelVector::new(vec![0, 0, 0], 1).unwrap()).unwrap();
        assert_eq!(terms.columns(0), &[1]);
    }

    #[test]
    fn align_drops_unshared_classes() {
        let train = LabelVector::new(vec![0, 1, 2, 1], 3).unwrap();
        let val = LabelVector::new(vec![1, 2, 2], 3).unwrap();
        let (kt, kv) = align_splits(&train, &val);
        assert_eq!(kt, vec![1, 2, 3]);
        assert_eq!(kv, vec![0, 1, 2]);
    }
}
