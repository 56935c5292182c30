//! Stage scheduling, reference resolution and resumability stamps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fclust_core::store::{sha256_bytes, sha256_file};
use fclust_core::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, StageDef, StageKind};
use crate::error::{CliError, CliResult};
use crate::stages;

/// File written into every finished stage directory.
pub const STAMP: &str = "stage.json";
/// Sidecar log; the only artifact carrying timestamps.
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Directory that plain (non-`@`) references are relative to.
    pub base: PathBuf,
    pub threads: Option<usize>,
    /// Replaces the root seed of the config.
    pub seed: Option<u64>,
    /// `@` references may name stage directories left by earlier invocations.
    pub external_refs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub kind: String,
    pub seed: u64,
    pub fingerprint: String,
    /// sha256 per output file, relative to the stage directory.
    pub outputs: BTreeMap<String, String>,
}

/// Everything a stage needs to locate its inputs and outputs.
pub struct StageContext<'a> {
    pub name: &'a str,
    pub seed: u64,
    pub dir: PathBuf,
    pub out: &'a Path,
    pub base: &'a Path,
}

impl StageContext<'_> {
    pub fn resolve(&self, reference: &str) -> PathBuf {
        resolve_ref(reference, self.base, self.out)
    }

    pub fn core<T>(&self, r: fclust_core::Result<T>) -> CliResult<T> {
        r.map_err(|e| CliError::from_core(self.name, e))
    }

    pub fn fail(&self, message: impl Into<String>) -> CliError {
        CliError::failed(self.name, message)
    }
}

/// `@stage/file.ext` is a file in a stage directory, `@stage/split` the
/// manifest `split.manifest.json` there and `@stage` the directory itself.
pub fn resolve_ref(reference: &str, base: &Path, out: &Path) -> PathBuf {
    match reference.strip_prefix('@') {
        Some(rest) => match rest.split_once('/') {
            Some((stage, file)) if file.contains('.') => out.join(stage).join(file),
            Some((stage, split)) => out.join(stage).join(format!("{split}.manifest.json")),
            None => out.join(rest),
        },
        None => base.join(reference),
    }
}

pub fn stage_seed(root: u64, def: &StageDef) -> u64 {
    def.seed.unwrap_or_else(|| derive_seed(root, &def.name))
}

/// Checks that every plain path exists before any stage runs.
fn check_paths(cfg: &PipelineConfig, opts: &RunOptions) -> CliResult<()> {
    for def in &cfg.stages {
        for r in def.kind.references() {
            let external = r.starts_with('@');
            if external && !opts.external_refs {
                continue;
            }
            let path = resolve_ref(r, &opts.base, &opts.out);
            if !path.exists() {
                return Err(CliError::missing_path(path, Some(&def.name)));
            }
        }
    }
    Ok(())
}

fn log_line(out: &Path, message: &str) {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(RUN_LOG));
    if let Ok(mut f) = file {
        let _ = writeln!(f, "{ts:.3}\t{message}");
    }
}

/// Relative paths of every regular file under `dir`, sorted.
pub fn list_files(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else if let Ok(rel) = p.strip_prefix(root) {
                acc.push(rel.to_path_buf());
            }
        }
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc);
    acc.sort();
    acc
}

fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn output_sums(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut sums = BTreeMap::new();
    for rel in list_files(dir) {
        let key = rel_key(&rel);
        if key == STAMP {
            continue;
        }
        let sum = sha256_file(&dir.join(&rel)).map_err(|e| CliError::from_core("stamp", e))?;
        sums.insert(key, sum);
    }
    Ok(sums)
}

/// Digest of one input: file contents, or the stamp of a stage directory.
fn input_digest(path: &Path) -> String {
    if path.is_dir() {
        let stamp = path.join(STAMP);
        if stamp.is_file() {
            return sha256_file(&stamp).unwrap_or_default();
        }
        let mut h = String::new();
        for rel in list_files(path) {
            h.push_str(&rel_key(&rel));
            h.push_str(&sha256_file(&path.join(&rel)).unwrap_or_default());
        }
        return sha256_bytes(h.as_bytes());
    }
    sha256_file(path).unwrap_or_default()
}

fn fingerprint(def: &StageDef, seed: u64, inputs: &[(String, String)]) -> CliResult<String> {
    let mut text = serde_json::to_string(def).map_err(|e| CliError::validation(e.to_string()))?;
    text.push_str(&format!("\nseed={seed}\n"));
    for (r, d) in inputs {
        text.push_str(&format!("{r}={d}\n"));
    }
    Ok(sha256_bytes(text.as_bytes()))
}

fn stamp_is_current(dir: &Path, fp: &str) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(STAMP)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.fingerprint == fp && output_sums(dir).map(|s| s == stamp.outputs).unwrap_or(false)
}

fn stage_inputs(def: &StageDef, ctx: &StageContext) -> Vec<(String, String)> {
    let mut inputs: Vec<(String, String)> = def
        .kind
        .references()
        .into_iter()
        // Manifests carry checksums of their data files, so hashing the
        // manifest covers the data.
        .map(|r| (r.to_owned(), input_digest(&ctx.resolve(r))))
        .collect();
    if let StageKind::Report(s) = &def.kind {
        if s.dir.is_none() {
            for p in stages::find_reports(ctx.out, Some(ctx.name)) {
                let key = p.strip_prefix(ctx.out).map(rel_key).unwrap_or_default();
                inputs.push((key, input_digest(&p)));
            }
        }
    }
    inputs
}

fn run_stage(def: &StageDef, root_seed: u64, opts: &RunOptions) -> CliResult<StageStatus> {
    let seed = stage_seed(root_seed, def);
    let ctx = StageContext {
        name: &def.name,
        seed,
        dir: opts.out.join(&def.name),
        out: &opts.out,
        base: &opts.base,
    };
    for r in def.kind.references() {
        let p = ctx.resolve(r);
        if !p.exists() {
            return Err(CliError::missing_path(p, Some(&def.name)));
        }
    }
    let inputs = stage_inputs(def, &ctx);
    let fp = fingerprint(def, seed, &inputs)?;
    if stamp_is_current(&ctx.dir, &fp) {
        log::info!("stage {} ({}) is up to date", def.name, def.kind.label());
        log_line(&opts.out, &format!("skip\t{}", def.name));
        return Ok(StageStatus::Skipped);
    }
    if ctx.dir.exists() {
        fs::remove_dir_all(&ctx.dir).map_err(|e| ctx.fail(format!("cannot clear {}: {e}", ctx.dir.display())))?;
    }
    fs::create_dir_all(&ctx.dir).map_err(|e| ctx.fail(format!("cannot create {}: {e}", ctx.dir.display())))?;
    log::info!("running stage {} ({}) with seed {seed}", def.name, def.kind.label());
    log_line(&opts.out, &format!("start\t{}", def.name));
    let started = std::time::Instant::now();
    stages::run(&def.kind, &ctx)?;
    let stamp = Stamp {
        stage: def.name.clone(),
        kind: def.kind.label().to_owned(),
        seed,
        fingerprint: fp,
        outputs: output_sums(&ctx.dir)?,
    };
    let mut text = serde_json::to_string_pretty(&stamp).map_err(|e| ctx.fail(e.to_string()))?;
    text.push('\n');
    fs::write(ctx.dir.join(STAMP), text).map_err(|e| ctx.fail(e.to_string()))?;
    log_line(
        &opts.out,
        &format!("done\t{}\t{:.3}s", def.name, started.elapsed().as_secs_f64()),
    );
    Ok(StageStatus::Ran)
}

fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> CliResult<Vec<(String, StageStatus)>> {
    let root = opts.seed.unwrap_or(cfg.seed);
    let mut statuses = Vec::with_capacity(cfg.stages.len());
    for def in &cfg.stages {
        statuses.push((def.name.clone(), run_stage(def, root, opts)?));
    }
    Ok(statuses)
}

/// Validates `cfg` and runs its stages in order.
pub fn run(cfg: &PipelineConfig, opts: &RunOptions) -> CliResult<Vec<(String, StageStatus)>> {
    if opts.external_refs {
        cfg.check_structure()?;
    } else {
        cfg.check()?;
    }
    check_paths(cfg, opts)?;
    fs::create_dir_all(&opts.out).map_err(|_| CliError::missing_path(&opts.out, None))?;
    match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
            pool.install(|| run_all(cfg, opts))
        }
        None => run_all(cfg, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_resolve() {
        let (base, out) = (Path::new("cfg"), Path::new("out"));
        assert_eq!(resolve_ref("@s/train", base, out), PathBuf::from("out/s/train.manifest.json"));
        assert_eq!(resolve_ref("@s/tree.tsv", base, out), PathBuf::from("out/s/tree.tsv"));
        assert_eq!(resolve_ref("@knn", base, out), PathBuf::from("out/knn"));
        assert_eq!(resolve_ref("data/x.fbcf", base, out), PathBuf::from("cfg/data/x.fbcf"));
    }

    #[test]
    fn stage_seed_prefers_explicit() {
        let def: StageDef = serde_json::from_str(r#"{ "stage": "report", "name": "r" }"#).unwrap();
        assert_eq!(stage_seed(7, &def), derive_seed(7, "r"));
        assert_ne!(stage_seed(7, &def), stage_seed(8, &def));
        let pinned: StageDef = serde_json::from_str(r#"{ "stage": "report", "name": "r", "seed": 3 }"#).unwrap();
        assert_eq!(stage_seed(7, &pinned), 3);
    }
}
