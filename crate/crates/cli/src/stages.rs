//! Stage bodies. Each one reads resolved inputs and writes into its own
//! directory; the scheduler handles stamps and skipping.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use fclust_core::benchmark::{self, BenchmarkSpec, ClassHistogram, PairSide, Provenance};
use fclust_core::heads::{self, linear_probe};
use fclust_core::kmeans::{kmeans_fit, kmeans_predict_topk};
use fclust_core::metrics::{self, ece, nmi, real_protocol, validity_indices};
use fclust_core::neighbors::mine_knn;
use fclust_core::refine::{self, RefineSummary, TermIndex};
use fclust_core::store::{self, write_text, DatasetManifest, FeatureMatrix, SimilarityMatrix};
use fclust_core::synth::write_fixture;
use fclust_core::{
    derive_seed, ClusterAssignment, Dataset, HeadBank, LabelVector, MultiLabelSets, NeighborTable,
    Objective, SemanticTree, Split,
};
use serde::Serialize;

use crate::config::*;
use crate::error::{CliError, CliResult};
use crate::pipeline::{list_files, StageContext};
use crate::report::{
    report_csv, report_summary, sort_reports, EvalParams, EvalReport, EvalSeeds, MappingEntry,
    PredictionMeta, EVAL_REPORT,
};

pub const NEIGHBORS_FILE: &str = "neighbors.fbcf";
pub const PRED_IDS: &str = "predictions.ids.fbcf";
pub const PRED_CONF: &str = "predictions.conf.fbcf";
pub const PRED_META: &str = "predictions.json";

pub fn run(kind: &StageKind, ctx: &StageContext) -> CliResult<()> {
    match kind {
        StageKind::Synth(s) => synth(s, ctx),
        StageKind::Ingest(s) => ingest(s, ctx),
        StageKind::Bench(s) => bench(s, ctx),
        StageKind::Knn(s) => knn(s, ctx),
        StageKind::Kmeans(s) => kmeans(s, ctx),
        StageKind::Train(s) => train(s, ctx),
        StageKind::Probe(s) => probe(s, ctx),
        StageKind::Refine(s) => refine(s, ctx),
        StageKind::Eval(s) => eval(s, ctx),
        StageKind::Report(s) => report(s, ctx),
    }
}

fn write_json<T: Serialize>(ctx: &StageContext, file: &str, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ctx.fail(e.to_string()))?;
    text.push('\n');
    ctx.core(write_text(&ctx.dir.join(file), &text))
}

fn read_json<T: serde::de::DeserializeOwned>(ctx: &StageContext, path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))
}

fn load_dataset(ctx: &StageContext, reference: &str) -> CliResult<Dataset> {
    ctx.core(Dataset::load(&ctx.resolve(reference), true))
}

/// Labels in their original (tree node) ids.
fn original_labels(ds: &Dataset) -> Vec<u32> {
    ds.labels
        .labels()
        .iter()
        .map(|&l| ds.remap.original[l as usize])
        .collect()
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

/// Rows of a dataset about to be written, labels in original ids.
struct Rows<'a> {
    name: &'a str,
    split: Split,
    features: FeatureMatrix,
    labels: Vec<u32>,
    /// Label sets in original ids, primary first.
    sets: Option<Vec<Vec<u32>>>,
    similarity: Option<SimilarityMatrix>,
}

fn write_rows(ctx: &StageContext, rows: Rows) -> CliResult<PathBuf> {
    let tag = split_tag(rows.split);
    let feature_path = format!("{tag}.features.fbcf");
    let label_path = format!("{tag}.labels.fbcf");
    ctx.core(rows.features.write(&ctx.dir.join(&feature_path)))?;
    let n = rows.labels.len();
    ctx.core(store::write_u32(&ctx.dir.join(&label_path), n, 1, &rows.labels))?;
    let mut manifest = DatasetManifest {
        name: rows.name.to_owned(),
        split: rows.split,
        feature_path,
        label_path,
        multilabel_path: None,
        similarity_path: None,
        terms_path: None,
        remap_path: None,
        checksums: Default::default(),
    };
    if let Some(sets) = rows.sets {
        // Sets may only name classes that still occur as a primary label.
        let present: BTreeSet<u32> = rows.labels.iter().copied().collect();
        let mut text = String::new();
        for (p, set) in rows.labels.iter().zip(&sets) {
            text.push_str(&p.to_string());
            for c in set.iter().filter(|&c| c != p && present.contains(c)) {
                text.push_str(&format!(",{c}"));
            }
            text.push('\n');
        }
        let p = format!("{tag}.multilabels.txt");
        ctx.core(write_text(&ctx.dir.join(&p), &text))?;
        manifest.multilabel_path = Some(p);
    }
    if let Some(sim) = rows.similarity {
        let s = format!("{tag}.similarity.fbcf");
        let t = format!("{tag}.terms.txt");
        ctx.core(sim.write(&ctx.dir.join(&s), &ctx.dir.join(&t)))?;
        manifest.similarity_path = Some(s);
        manifest.terms_path = Some(t);
    }
    ctx.core(manifest.fill_checksums(&ctx.dir))?;
    let path = ctx.dir.join(format!("{tag}.manifest.json"));
    ctx.core(manifest.save(&path))?;
    Ok(path)
}

/// Label sets of `ds` in original ids, for the given rows.
fn original_sets(ds: &Dataset, rows: &[usize]) -> Option<Vec<Vec<u32>>> {
    let ml = ds.multilabels.as_ref()?;
    Some(
        rows.iter()
            .map(|&r| {
                let p = ds.remap.original[ml.primary()[r] as usize];
                let mut s = vec![p];
                s.extend(ml.set(r).iter().map(|&c| ds.remap.original[c as usize]).filter(|&c| c != p));
                s
            })
            .collect(),
    )
}

fn select<'a>(ds: &'a Dataset, rows: &[usize], labels: Option<Vec<u32>>) -> Rows<'a> {
    let orig = original_labels(ds);
    Rows {
        name: &ds.manifest.name,
        split: ds.manifest.split,
        features: ds.features.select_rows(rows),
        labels: labels.unwrap_or_else(|| rows.iter().map(|&r| orig[r]).collect()),
        sets: original_sets(ds, rows),
        similarity: ds.similarity.as_ref().map(|s| s.select_rows(rows)),
    }
}

fn synth(s: &SynthStage, ctx: &StageContext) -> CliResult<()> {
    let mut spec = s.spec.clone();
    spec.seed = ctx.seed;
    ctx.core(write_fixture(&spec, &ctx.dir, ctx.name))?;
    Ok(())
}

fn ingest(s: &IngestStage, ctx: &StageContext) -> CliResult<()> {
    let features = ctx.core(store::load_features(&ctx.resolve(&s.features), s.normalize))?;
    let n = features.n_rows();
    let loaded = ctx.core(store::load_labels(&ctx.resolve(&s.labels), n))?;
    if !loaded.unused.is_empty() {
        log::warn!("{} class ids in [0, C) are unused", loaded.unused.len());
    }
    let labels: Vec<u32> = loaded
        .labels
        .labels()
        .iter()
        .map(|&l| loaded.remap.original[l as usize])
        .collect();
    let sets = match &s.multilabels {
        Some(p) => {
            let path = ctx.resolve(p);
            let text = fs::read_to_string(&path).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
            let ml = ctx.core(MultiLabelSets::parse(&text, usize::MAX))?;
            if ml.len() != n {
                return Err(ctx.fail(format!("{} label-set rows for {n} feature rows", ml.len())));
            }
            Some(
                (0..n)
                    .map(|i| {
                        let mut v = vec![labels[i]];
                        v.extend(ml.set(i).iter().copied().filter(|&c| c != labels[i]));
                        v
                    })
                    .collect(),
            )
        }
        None => None,
    };
    let similarity = match (&s.similarity, &s.terms) {
        (Some(sp), Some(tp)) => Some(ctx.core(SimilarityMatrix::load(&ctx.resolve(sp), &ctx.resolve(tp)))?),
        (None, None) => None,
        _ => return Err(ctx.fail("similarity and terms must be given together")),
    };
    let name = s.dataset_name.clone().unwrap_or_else(|| ctx.name.to_owned());
    write_rows(
        ctx,
        Rows {
            name: &name,
            split: s.split,
            features,
            labels,
            sets,
            similarity,
        },
    )?;
    Ok(())
}

/// Class set selected by a benchmark spec over the training histogram.
fn class_set(
    spec: &BenchmarkSpec,
    hist: &ClassHistogram,
    tree: Option<&SemanticTree>,
    ctx: &StageContext,
    depth: usize,
) -> CliResult<BTreeSet<u32>> {
    let universe: BTreeSet<u32> = hist.by_rank().iter().copied().collect();
    // Nested parts draw from distinct substreams of the stage seed.
    let seed = if depth == 0 {
        ctx.seed
    } else {
        derive_seed(ctx.seed, &format!("part{depth}"))
    };
    Ok(match spec {
        BenchmarkSpec::Percentile { s } => {
            if !(*s > 0.0 && *s <= 50.0) {
                return Err(CliError::validation(format!("percentile s={s} must lie in (0, 50]")));
            }
            benchmark::percentile_split(hist, *s)
        }
        BenchmarkSpec::ImbalancedPair { which } => {
            let (imb, cen) = benchmark::imbalanced_pair(hist);
            match which {
                PairSide::Imbalanced => imb,
                PairSide::Centered => cen,
            }
        }
        BenchmarkSpec::Leaf => {
            let tree = tree.ok_or_else(|| ctx.fail("leaf benchmark needs a tree"))?;
            let u: BTreeSet<usize> = universe.iter().map(|&c| c as usize).collect();
            tree.leaf_classes(&u).into_iter().map(|c| c as u32).collect()
        }
        BenchmarkSpec::RandomK { k, .. } => ctx.core(benchmark::random_subset(&universe, *k, seed))?,
        BenchmarkSpec::ModelBased { k, accuracy_tables } => {
            let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
            for t in accuracy_tables {
                let path = ctx.resolve(t);
                let text = fs::read_to_string(&path).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
                for (c, a) in ctx.core(benchmark::parse_accuracy_csv(&text))? {
                    let e = sums.entry(c).or_default();
                    e.0 += a;
                    e.1 += 1;
                }
            }
            let mean: BTreeMap<u32, f64> = sums
                .into_iter()
                .filter(|(c, _)| universe.contains(c))
                .map(|(c, (s, n))| (c, s / n as f64))
                .collect();
            ctx.core(benchmark::model_based_subset(&mean, *k))?
        }
        BenchmarkSpec::Union { parts } => {
            let mut sets = Vec::with_capacity(parts.len());
            for p in parts {
                sets.push(class_set(p, hist, tree, ctx, depth + sets.len() + 1)?);
            }
            benchmark::union(&sets)
        }
        BenchmarkSpec::OddHalving { .. } | BenchmarkSpec::Coarse { .. } => {
            return Err(CliError::validation(
                "odd_halving and coarse benchmarks cannot be combined in a union",
            ))
        }
    })
}

fn bench(s: &BenchStage, ctx: &StageContext) -> CliResult<()> {
    let train = load_dataset(ctx, &s.train)?;
    let val = match &s.val {
        Some(v) => Some(load_dataset(ctx, v)?),
        None => None,
    };
    let tree = match &s.tree {
        Some(t) => Some(ctx.core(SemanticTree::load(&ctx.resolve(t)))?),
        None => None,
    };
    let train_orig = original_labels(&train);
    let hist = ClassHistogram::from_counts({
        let mut m: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &train_orig {
            *m.entry(l).or_default() += 1;
        }
        m
    });
    let all_rows = |ds: &Dataset| -> Vec<usize> { (0..ds.labels.len()).collect() };
    let mut note = String::from("frequency ranks over the training histogram; mid-rank percentiles");
    let (train_rows, classes): (Rows, BTreeSet<u32>) = match &s.spec {
        BenchmarkSpec::OddHalving { .. } => {
            let lv = LabelVector::from_labels(train_orig.clone());
            let mask = ctx.core(benchmark::odd_halving(&lv, Split::Train, ctx.seed))?;
            let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            note = "odd class ids keep ceil(n/2) rows; validation untouched".into();
            (select(&train, &rows, None), hist.by_rank().iter().copied().collect())
        }
        BenchmarkSpec::Coarse { d_max } => {
            let tree = tree.as_ref().ok_or_else(|| ctx.fail("coarse benchmark needs a tree"))?;
            if *d_max == 0 {
                return Err(CliError::validation("d_max must be at least 1"));
            }
            let map = tree.coarsen_map(*d_max);
            let coarse = |ds: &Dataset| -> CliResult<Vec<u32>> {
                original_labels(ds)
                    .into_iter()
                    .map(|l| {
                        map.get(l as usize)
                            .map(|&c| c as u32)
                            .ok_or_else(|| ctx.fail(format!("label {l} is not a tree node")))
                    })
                    .collect()
            };
            let labels = coarse(&train)?;
            let classes: BTreeSet<u32> = labels.iter().copied().collect();
            let mut rows = select(&train, &all_rows(&train), Some(labels));
            rows.sets = None;
            note = format!("labels replaced by their ancestor at depth {d_max}");
            if let Some(v) = &val {
                let mut vr = select(v, &all_rows(v), Some(coarse(v)?));
                vr.sets = None;
                write_rows(ctx, vr)?;
            }
            (rows, classes)
        }
        spec => {
            let classes = class_set(spec, &hist, tree.as_ref(), ctx, 0)?;
            let rows: Vec<usize> = (0..train_orig.len()).filter(|&i| classes.contains(&train_orig[i])).collect();
            if rows.is_empty() {
                return Err(CliError::from_core(ctx.name, fclust_core::Error::EmptyResult));
            }
            (select(&train, &rows, None), classes)
        }
    };
    let kept_hist = ClassHistogram::from_counts({
        let mut m: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &train_rows.labels {
            *m.entry(l).or_default() += 1;
        }
        m
    });
    let provenance = Provenance {
        spec: s.spec.clone(),
        n_samples: train_rows.labels.len(),
        n_classes: kept_hist.n_classes(),
        imbalance_ratio: kept_hist.imbalance_ratio(&kept_hist.by_rank().iter().copied().collect()),
        note: format!("{note}; seed {}", ctx.seed),
    };
    write_rows(ctx, train_rows)?;
    if let (Some(v), false) = (&val, matches!(s.spec, BenchmarkSpec::Coarse { .. })) {
        let vo = original_labels(v);
        let rows: Vec<usize> = (0..vo.len()).filter(|&i| classes.contains(&vo[i])).collect();
        if rows.is_empty() {
            return Err(ctx.fail("no validation rows fall in the benchmark classes"));
        }
        write_rows(ctx, select(v, &rows, None))?;
    }
    ctx.core(write_text(&ctx.dir.join("classes.csv"), &benchmark::class_set_csv(&classes)))?;
    write_json(ctx, "provenance.json", &provenance)
}

fn knn(s: &KnnStage, ctx: &StageContext) -> CliResult<()> {
    let ds = load_dataset(ctx, &s.dataset)?;
    let table = ctx.core(mine_knn(&ds.features, s.k, s.block))?;
    ctx.core(table.write(&ctx.dir.join(NEIGHBORS_FILE)))
}

fn n_clusters_for(requested: Option<usize>, ds: &Dataset) -> usize {
    requested.unwrap_or_else(|| ds.labels.present_classes().len())
}

fn write_predictions(ctx: &StageContext, pred: &ClusterAssignment, meta: &PredictionMeta) -> CliResult<()> {
    ctx.core(pred.write(&ctx.dir.join(PRED_IDS), &ctx.dir.join(PRED_CONF)))?;
    write_json(ctx, PRED_META, meta)
}

fn kmeans(s: &KmeansStage, ctx: &StageContext) -> CliResult<()> {
    let ds = load_dataset(ctx, &s.dataset)?;
    let mut cfg = s.config.clone();
    cfg.n_clusters = n_clusters_for(s.n_clusters, &ds);
    cfg.seed = ctx.seed;
    let centroids = ctx.core(kmeans_fit(&ds.features, &cfg))?;
    ctx.core(centroids.write(&ctx.dir.join("centroids.fbcf")))?;
    ctx.core(write_text(&ctx.dir.join("run_log.csv"), &centroids.run_log_csv()))?;
    let target = match &s.eval {
        Some(e) => load_dataset(ctx, e)?,
        None => ds,
    };
    let k = s.top_k.min(cfg.n_clusters);
    let pred = ctx.core(kmeans_predict_topk(&centroids, &target.features, k))?;
    let meta = PredictionMeta {
        method: "kmeans".into(),
        n_clusters: cfg.n_clusters,
        k,
        n_rows: pred.n_rows(),
        dataset: target.manifest.name.clone(),
        split: target.manifest.split,
        seed: ctx.seed,
        calibrated: false,
        head: None,
        min_prior: None,
    };
    write_predictions(ctx, &pred, &meta)
}

fn train(s: &TrainStage, ctx: &StageContext) -> CliResult<()> {
    let ds = load_dataset(ctx, &s.dataset)?;
    let table = ctx.core(NeighborTable::load(&ctx.resolve(&s.neighbors).join(NEIGHBORS_FILE)))?;
    let mut cfg = s.config.clone();
    cfg.n_clusters = n_clusters_for(s.n_clusters, &ds);
    cfg.seed = ctx.seed;
    let (bank, log): (HeadBank, _) = ctx.core(heads::train(&ds.features, &table, &cfg))?;
    ctx.core(bank.save(&ctx.dir.join("checkpoint.bin"), &cfg))?;
    ctx.core(write_text(&ctx.dir.join("training_log.csv"), &log.to_csv()))?;
    let head = ctx.core(heads::select_head(&log))?;
    let target = match &s.eval {
        Some(e) => load_dataset(ctx, e)?,
        None => ds,
    };
    let k = s.top_k.min(cfg.n_clusters);
    let pred = ctx.core(heads::predict_topk(&bank, head, &target.features, k))?;
    let min_prior = bank.heads[head].prior.iter().copied().fold(f64::INFINITY, f64::min);
    let meta = PredictionMeta {
        method: match cfg.objective {
            Objective::Temi => "temi",
            Objective::Scan => "scan",
        }
        .into(),
        n_clusters: cfg.n_clusters,
        k,
        n_rows: pred.n_rows(),
        dataset: target.manifest.name.clone(),
        split: target.manifest.split,
        seed: ctx.seed,
        calibrated: true,
        head: Some(head),
        min_prior: Some(min_prior),
    };
    write_predictions(ctx, &pred, &meta)
}

fn probe(s: &ProbeStage, ctx: &StageContext) -> CliResult<()> {
    let train = load_dataset(ctx, &s.train)?;
    let val = load_dataset(ctx, &s.val)?;
    let to = original_labels(&train);
    let vo = original_labels(&val);
    // One dense id space shared by both splits.
    let ids: BTreeSet<u32> = to.iter().chain(&vo).copied().collect();
    let ids: Vec<u32> = ids.into_iter().collect();
    let dense = |l: &u32| ids.binary_search(l).unwrap() as u32;
    let ty = ctx.core(LabelVector::new(to.iter().map(dense).collect(), ids.len()))?;
    let vy = ctx.core(LabelVector::new(vo.iter().map(dense).collect(), ids.len()))?;
    let mut cfg = s.config.clone();
    cfg.seed = ctx.seed;
    let mut result = ctx.core(linear_probe(&train.features, &ty, &val.features, &vy, &cfg))?;
    for entry in &mut result.per_class {
        entry.0 = ids[entry.0 as usize];
    }
    ctx.core(write_text(&ctx.dir.join("per_class_accuracy.csv"), &result.per_class_csv()))?;
    write_json(ctx, "probe.json", &result)
}

fn refine(s: &RefineStage, ctx: &StageContext) -> CliResult<()> {
    let tree = ctx.core(SemanticTree::load(&ctx.resolve(&s.tree)))?;
    let train = load_dataset(ctx, &s.dataset)?;
    let sim = train
        .similarity
        .as_ref()
        .ok_or_else(|| ctx.fail("refinement needs a similarity matrix in the dataset"))?;
    let labels = ctx.core(LabelVector::new(original_labels(&train), tree.len()))?;
    let mut terms = TermIndex::from_tree(&tree, sim);
    if s.canonicalize {
        ctx.core(terms.canonicalize(sim, &labels))?;
    }
    let (refined, traces) = ctx.core(refine::hzr(&tree, sim, &labels, &terms, s.mode, s.temperature))?;

    let mut calibration = Vec::with_capacity(s.calibration.len());
    for &r in &s.calibration {
        calibration.push(ctx.core(refine::restricted_calibration(sim, &tree, &labels, &terms, r, s.temperature))?);
    }

    let (train_keep, val_out) = match &s.val {
        Some(v) => {
            let val = load_dataset(ctx, v)?;
            let vsim = val
                .similarity
                .as_ref()
                .ok_or_else(|| ctx.fail("validation split has no similarity matrix"))?;
            if vsim.terms() != sim.terms() {
                return Err(ctx.fail("train and validation term lists differ"));
            }
            let vlabels = ctx.core(LabelVector::new(original_labels(&val), tree.len()))?;
            let (vref, vtraces) = ctx.core(refine::hzr(&tree, vsim, &vlabels, &terms, s.mode, s.temperature))?;
            let (tk, vk) = refine::align_splits(&refined, &vref);
            (tk, Some((val, vref, vtraces, vk)))
        }
        None => ((0..refined.len()).collect(), None),
    };

    let dropped = refined.len() - train_keep.len();
    let mut rows = select(&train, &train_keep, Some(train_keep.iter().map(|&r| refined.get(r)).collect()));
    rows.sets = None;
    write_rows(ctx, rows)?;
    ctx.core(write_text(&ctx.dir.join("trace.jsonl"), &ctx.core(refine::trace_jsonl(&traces))?))?;
    let mut summary = vec![("train", RefineSummary::new(&traces, dropped))];
    if let Some((val, vref, vtraces, vk)) = val_out {
        let vd = vref.len() - vk.len();
        let mut vrows = select(&val, &vk, Some(vk.iter().map(|&r| vref.get(r)).collect()));
        vrows.sets = None;
        write_rows(ctx, vrows)?;
        ctx.core(write_text(&ctx.dir.join("val_trace.jsonl"), &ctx.core(refine::trace_jsonl(&vtraces))?))?;
        summary.push(("val", RefineSummary::new(&vtraces, vd)));
    }
    let mut csv = String::from("split,");
    csv.push_str(summary[0].1.to_csv().lines().next().unwrap_or_default());
    csv.push('\n');
    for (split, sm) in &summary {
        csv.push_str(&format!("{split},{}\n", sm.to_csv().lines().nth(1).unwrap_or_default()));
    }
    ctx.core(write_text(&ctx.dir.join("summary.csv"), &csv))?;
    if !calibration.is_empty() {
        write_json(ctx, "calibration.json", &calibration)?;
    }
    Ok(())
}

fn eval(s: &EvalStage, ctx: &StageContext) -> CliResult<()> {
    let pdir = ctx.resolve(&s.predictions);
    let meta: PredictionMeta = read_json(ctx, &pdir.join(PRED_META))?;
    let pred = ctx.core(ClusterAssignment::load(&pdir.join(PRED_IDS), &pdir.join(PRED_CONF), meta.n_clusters))?;
    let ds = load_dataset(ctx, &s.dataset)?;
    if pred.n_rows() != ds.labels.len() {
        return Err(ctx.fail(format!(
            "{} predictions for {} dataset rows",
            pred.n_rows(),
            ds.labels.len()
        )));
    }
    let gt = ds
        .multilabels
        .clone()
        .unwrap_or_else(|| MultiLabelSets::singletons(&ds.labels));
    let (accuracies, f) = ctx.core(metrics::evaluate(&pred, &gt))?;
    let protocol = match &ds.multilabels {
        Some(ml) => Some(ctx.core(real_protocol(&pred, ml, s.repeats, ctx.seed))?),
        None => None,
    };
    let top1 = pred.top1();
    let nmi_value = ctx.core(nmi(&top1, ds.labels.labels()))?;
    let correct: Vec<bool> = top1
        .iter()
        .zip(ds.labels.labels())
        .map(|(&p, &g)| f.map(p) == Some(g))
        .collect();
    let (ece_value, bins) = ctx.core(ece(&pred.msp(), &correct, s.bins))?;
    let validity = if s.validity {
        let table = match &s.neighbors {
            Some(n) => Some(ctx.core(NeighborTable::load(&ctx.resolve(n).join(NEIGHBORS_FILE)))?),
            None => None,
        };
        match validity_indices(&ds.features, &ds.labels, table.as_ref(), ctx.seed) {
            Ok(v) => Some(v),
            Err(fclust_core::Error::SingleCluster) => None,
            Err(e) => return Err(CliError::from_core(ctx.name, e)),
        }
    } else {
        None
    };
    let mapping = f
        .mapping
        .iter()
        .enumerate()
        .filter_map(|(c, m)| {
            m.map(|class| MappingEntry {
                cluster: c as u32,
                class: ds.remap.original[class as usize],
            })
        })
        .collect();
    let mut notes = vec![
        "NMI normalized by the arithmetic mean of the two entropies".to_owned(),
        format!("ECE over {} equal-width bins on (0, 1]", s.bins),
    ];
    if !meta.calibrated {
        notes.push("k-means confidences are a softmax over centroid similarities, not calibrated probabilities".into());
    }
    if meta.method == "scan" {
        notes.push(
            "SCAN entropy term uses the entropy-maximizing sign (+alpha * sum q log q), opposite to the printed equation".into(),
        );
    }
    let report = EvalReport {
        benchmark: s.benchmark.clone().unwrap_or_else(|| ds.manifest.name.clone()),
        method: meta.method.clone(),
        stage: ctx.name.to_owned(),
        predictions: s.predictions.clone(),
        split: ds.manifest.split,
        n_samples: ds.labels.len(),
        n_classes: ds.labels.present_classes().len(),
        n_clusters: meta.n_clusters,
        ordering_holds: accuracies.ordering_holds() && protocol.as_ref().is_none_or(|p| p.mean.ordering_holds()),
        accuracies,
        protocol,
        mapping,
        agreement: f.agreement,
        nmi: nmi_value,
        ece: ece_value,
        confidence_calibrated: meta.calibrated,
        calibration: bins,
        validity,
        params: EvalParams {
            bins: s.bins,
            repeats: s.repeats,
            top_k: meta.k,
            nmi_normalization: "arithmetic_mean".into(),
        },
        seeds: EvalSeeds {
            method: meta.seed,
            eval: ctx.seed,
        },
        notes,
    };
    write_json(ctx, EVAL_REPORT, &report)
}

/// Every evaluation report below `dir`, sorted by path; the directory of
/// stage `skip` is ignored.
pub fn find_reports(dir: &Path, skip: Option<&str>) -> Vec<PathBuf> {
    list_files(dir)
        .into_iter()
        .filter(|rel| rel.file_name().is_some_and(|n| n == EVAL_REPORT))
        .filter(|rel| skip.is_none_or(|s| rel.components().next().is_none_or(|c| c.as_os_str() != s)))
        .map(|rel| dir.join(rel))
        .collect()
}

fn report(s: &ReportStage, ctx: &StageContext) -> CliResult<()> {
    let dir = match &s.dir {
        Some(d) => ctx.resolve(d),
        None => ctx.out.to_path_buf(),
    };
    let paths = find_reports(&dir, (s.dir.is_none()).then_some(ctx.name));
    if paths.is_empty() {
        return Err(ctx.fail(format!("no {EVAL_REPORT} found under {}", dir.display())));
    }
    let mut reports: Vec<EvalReport> = Vec::with_capacity(paths.len());
    for p in &paths {
        reports.push(read_json(ctx, p)?);
    }
    sort_reports(&mut reports);
    ctx.core(write_text(&ctx.dir.join("report.csv"), &report_csv(&reports)))?;
    write_json(ctx, "report.json", &report_summary(&reports))
}
