//! Dense matrix and label storage.
//!
//! All binary artifacts share one header family:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FBCF"
//!      4     1  version (1)
//!      5     1  dtype (1 = f32, 2 = u32, 3 = neighbor table)
//!      6     2  reserved, zero
//!      8     4  n_cols (u32 LE)
//!     12     8  n_rows (u64 LE)
//!     20     -  row-major little-endian payload
//! ```
//!
//! Labels use the same header with `n_cols = 1` and dtype u32. Neighbor
//! tables (dtype 3) store the u32 id payload followed by the f32 similarity
//! payload, both `n_rows x n_cols`. A text
//! fallback (one decimal integer per line) is accepted on ingest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FBCF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

const NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    U32 = 2,
    Knn = 3,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::U32),
            3 => Some(Dtype::Knn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub n_cols: u32,
    pub n_rows: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(MAGIC);
        out[4] = VERSION;
        out[5] = self.dtype as u8;
        out[8..12].copy_from_slice(&self.n_cols.to_le_bytes());
        out[12..20].copy_from_slice(&self.n_rows.to_le_bytes());
        out
    }

    /// Parses a header and checks the payload length against `file_len`.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[0..4] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("version {}", bytes[4]),
            });
        }
        let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("dtype code {}", bytes[5]),
        })?;
        let n_cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let n_rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header = Header {
            dtype,
            n_cols,
            n_rows,
        };
        let expected = header.file_len();
        if bytes.len() as u64 != expected {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected,
                found: bytes.len() as u64,
            });
        }
        Ok(header)
    }

    pub fn file_len(&self) -> u64 {
        let payloads = if self.dtype == Dtype::Knn { 2 } else { 1 };
        HEADER_LEN as u64 + payloads * self.n_rows * self.n_cols as u64 * 4
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a raw f32 matrix in FBCF layout.
pub fn write_f32(path: &Path, n_rows: usize, n_cols: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), n_rows * n_cols);
    let header = Header {
        dtype: Dtype::F32,
        n_cols: n_cols as u32,
        n_rows: n_rows as u64,
    };
    let mut buf = Vec::with_capacity(header.file_len() as usize);
    buf.extend_from_slice(&header.encode());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Writes a raw u32 matrix in FBCF layout.
pub fn write_u32(path: &Path, n_rows: usize, n_cols: usize, values: &[u32]) -> Result<()> {
    assert_eq!(values.len(), n_rows * n_cols);
    let header = Header {
        dtype: Dtype::U32,
        n_cols: n_cols as u32,
        n_rows: n_rows as u64,
    };
    let mut buf = Vec::with_capacity(header.file_len() as usize);
    buf.extend_from_slice(&header.encode());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &buf)
}

fn expect_dtype(header: &Header, dtype: Dtype, path: &Path) -> Result<()> {
    if header.dtype != dtype {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("expected dtype {:?}, found {:?}", dtype, header.dtype),
        });
    }
    Ok(())
}

/// Reads an f32 FBCF file, returning `(n_rows, n_cols, values)`.
pub fn read_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let header = Header::decode(&bytes, path)?;
    expect_dtype(&header, Dtype::F32, path)?;
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header.n_rows as usize, header.n_cols as usize, values))
}

/// Reads a u32 FBCF file, returning `(n_rows, n_cols, values)`.
pub fn read_u32(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let bytes = read_file(path)?;
    let header = Header::decode(&bytes, path)?;
    expect_dtype(&header, Dtype::U32, path)?;
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header.n_rows as usize, header.n_cols as usize, values))
}

/// Dense row-major f32 matrix of precomputed embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                expected: n_rows * n_cols,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / n_cols.max(1),
                col: pos % n_cols.max(1),
            });
        }
        Ok(FeatureMatrix {
            n_rows,
            n_cols,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), n_cols, values)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.n_cols.max(1))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize(&mut self) -> Result<()> {
        let d = self.n_cols;
        for (i, row) in self.values.chunks_exact_mut(d.max(1)).enumerate() {
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow { row: i });
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        self.normalized = true;
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// Checks the unit-norm invariant and sets the flag if it holds.
    pub fn mark_normalized(&mut self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            let norm = l2_norm(row);
            if (norm - 1.0).abs() > NORM_TOL {
                log::debug!("row {i} has norm {norm}");
                return Err(Error::NotNormalized);
            }
        }
        self.normalized = true;
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            values,
            normalized: self.normalized,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_f32(path, self.n_rows, self.n_cols, &self.values)
    }
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Loads a feature file, optionally normalizing every row.
pub fn load_features(path: &Path, normalize: bool) -> Result<FeatureMatrix> {
    let (n_rows, n_cols, values) = read_f32(path)?;
    let mut m = FeatureMatrix::new(n_rows, n_cols, values)?;
    if normalize {
        m.normalize()?;
    }
    Ok(m)
}

/// Dense-id mapping: `original[new_id] = old_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRemap {
    pub original: Vec<u32>,
}

impl ClassRemap {
    pub fn identity(n: usize) -> Self {
        ClassRemap {
            original: (0..n as u32).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.original.iter().enumerate().all(|(i, &o)| i as u32 == o)
    }

    pub fn forward(&self) -> BTreeMap<u32, u32> {
        self.original
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new as u32))
            .collect()
    }

    /// Two-column CSV `original,dense`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("original,dense\n");
        for (new, old) in self.original.iter().enumerate() {
            out.push_str(&format!("{old},{new}\n"));
        }
        out
    }

    pub fn compose(&self, inner: &ClassRemap) -> ClassRemap {
        ClassRemap {
            original: self
                .original
                .iter()
                .map(|&mid| inner.original[mid as usize])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<u32>,
    n_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<u32>, n_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::UnknownClass(bad as usize));
        }
        Ok(LabelVector { labels, n_classes })
    }

    /// Builds a vector with `C = 1 + max label`.
    pub fn from_labels(labels: Vec<u32>) -> Self {
        let n_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
        LabelVector { labels, n_classes }
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn present_classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            rows[l as usize].push(i);
        }
        rows
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelVector {
        LabelVector {
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Renumbers present classes densely in ascending id order.
    pub fn densify(&self) -> (LabelVector, ClassRemap) {
        let present: Vec<u32> = self.present_classes().into_iter().collect();
        let remap = ClassRemap { original: present };
        let fwd = remap.forward();
        let labels = self.labels.iter().map(|l| fwd[l]).collect();
        (
            LabelVector {
                labels,
                n_classes: remap.original.len(),
            },
            remap,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_u32(path, self.labels.len(), 1, &self.labels)
    }
}

/// Outcome of label ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedLabels {
    pub labels: LabelVector,
    pub remap: ClassRemap,
    /// Ids inside `[0, C)` that no row uses (kept when ids were not remapped).
    pub unused: Vec<u32>,
}

/// Applies the sparse-id rule to raw ids: ids are kept as-is while at least
/// half of `[0, max]` is occupied, otherwise they are densely remapped.
pub fn ingest_label_ids(raw: Vec<u32>) -> LoadedLabels {
    let lv = LabelVector::from_labels(raw);
    let present = lv.present_classes();
    let span = lv.n_classes();
    if present.len() * 2 >= span {
        let unused = (0..span as u32).filter(|c| !present.contains(c)).collect();
        LoadedLabels {
            remap: ClassRemap::identity(span),
            labels: lv,
            unused,
        }
    } else {
        let (labels, remap) = lv.densify();
        LoadedLabels {
            labels,
            remap,
            unused: Vec::new(),
        }
    }
}

fn parse_label_text(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: i64 = line
            .parse()
            .map_err(|_| Error::Parse(format!("label line {}: {line:?}", row + 1)))?;
        if value < 0 {
            return Err(Error::NegativeLabel { row, value });
        }
        let value =
            u32::try_from(value).map_err(|_| Error::Parse(format!("label {value} too large")))?;
        out.push(value);
    }
    Ok(out)
}

/// Loads labels from a binary FBCF u32 file or a newline-delimited text file.
pub fn load_labels(path: &Path, n_rows_expected: usize) -> Result<LoadedLabels> {
    let bytes = read_file(path)?;
    let raw = if bytes.starts_with(MAGIC) {
        let header = Header::decode(&bytes, path)?;
        expect_dtype(&header, Dtype::U32, path)?;
        bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Parse(format!("{} is neither FBCF nor UTF-8", path.display())))?;
        parse_label_text(&text)?
    };
    if raw.len() != n_rows_expected {
        return Err(Error::RowCountMismatch {
            expected: n_rows_expected,
            found: raw.len(),
        });
    }
    Ok(ingest_label_ids(raw))
}

/// Keeps rows whose label is in `keep`, preserving order, and remaps labels densely.
pub fn subset(
    features: &FeatureMatrix,
    labels: &LabelVector,
    keep: &BTreeSet<u32>,
) -> Result<(FeatureMatrix, LabelVector, ClassRemap)> {
    if features.n_rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.n_rows(),
            right: labels.len(),
        });
    }
    let rows: Vec<usize> = (0..labels.len())
        .filter(|&i| keep.contains(&labels.get(i)))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyResult);
    }
    let (dense, remap) = labels.select_rows(&rows).densify();
    Ok((features.select_rows(&rows), dense, remap))
}

/// Per-row admissible label sets with a designated primary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelSets {
    sets: Vec<Vec<u32>>,
    primary: Vec<u32>,
    n_classes: usize,
}

impl MultiLabelSets {
    pub fn new(primary: Vec<u32>, sets: Vec<Vec<u32>>, n_classes: usize) -> Result<Self> {
        if primary.len() != sets.len() {
            return Err(Error::LengthMismatch {
                left: primary.len(),
                right: sets.len(),
            });
        }
        let mut clean = Vec::with_capacity(sets.len());
        for (row, (p, mut s)) in primary.iter().zip(sets).enumerate() {
            s.sort_unstable();
            s.dedup();
            if s.is_empty() || s.binary_search(p).is_err() {
                return Err(Error::Parse(format!(
                    "row {row}: primary label {p} missing from its label set"
                )));
            }
            if let Some(&bad) = s.iter().find(|&&c| c as usize >= n_classes) {
                return Err(Error::UnknownClass(bad as usize));
            }
            clean.push(s);
        }
        Ok(MultiLabelSets {
            sets: clean,
            primary,
            n_classes,
        })
    }

    /// Single-label sets `{primary}` for every row.
    pub fn singletons(labels: &LabelVector) -> Self {
        MultiLabelSets {
            sets: labels.labels().iter().map(|&l| vec![l]).collect(),
            primary: labels.labels().to_vec(),
            n_classes: labels.n_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn primary(&self) -> &[u32] {
        &self.primary
    }

    /// Sorted label set of row `i`.
    pub fn set(&self, i: usize) -> &[u32] {
        &self.sets[i]
    }

    pub fn contains(&self, i: usize, class: u32) -> bool {
        self.sets[i].binary_search(&class).is_ok()
    }

    /// Text form: one row per line, comma-separated ids, primary first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, s) in self.primary.iter().zip(&self.sets) {
            out.push_str(&p.to_string());
            for c in s.iter().filter(|&c| c != p) {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, n_classes: usize) -> Result<Self> {
        let mut primary = Vec::new();
        let mut sets = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let ids = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::Parse(format!("multilabel line {}: {line:?}", row + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            primary.push(ids[0]);
            sets.push(ids);
        }
        Self::new(primary, sets, n_classes)
    }
}

/// Image-term similarity scores with the term registry.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_rows: usize,
    values: Vec<f32>,
    terms: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(n_rows: usize, terms: Vec<String>, values: Vec<f32>) -> Result<Self> {
        let v = terms.len();
        if values.len() != n_rows * v {
            return Err(Error::DimensionMismatch {
                expected: n_rows * v,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / v.max(1),
                col: pos % v.max(1),
            });
        }
        Ok(SimilarityMatrix {
            n_rows,
            values,
            terms,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term_id(&self, term: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    #[inline]
    pub fn get(&self, row: usize, term: usize) -> f32 {
        self.values[row * self.terms.len() + term]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let v = self.terms.len();
        &self.values[row * v..(row + 1) * v]
    }

    pub fn select_rows(&self, rows: &[usize]) -> SimilarityMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.terms.len());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        SimilarityMatrix {
            n_rows: rows.len(),
            values,
            terms: self.terms.clone(),
        }
    }

    /// Writes the matrix and a sidecar term list (one term per line).
    pub fn write(&self, path: &Path, terms_path: &Path) -> Result<()> {
        write_f32(path, self.n_rows, self.terms.len(), &self.values)?;
        let mut text = String::new();
        for t in &self.terms {
            text.push_str(t);
            text.push('\n');
        }
        write_file(terms_path, text.as_bytes())
    }

    pub fn load(path: &Path, terms_path: &Path) -> Result<Self> {
        let (n_rows, n_cols, values) = read_f32(path)?;
        let text = fs::read_to_string(terms_path).map_err(|e| Error::io(terms_path, e))?;
        let terms: Vec<String> = text.lines().map(str::to_owned).collect();
        if terms.len() != n_cols {
            return Err(Error::DimensionMismatch {
                expected: n_cols,
                found: terms.len(),
            });
        }
        Self::new(n_rows, terms, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Dataset description: file references relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub feature_path: String,
    pub label_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multilabel_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap_path: Option<String>,
    /// sha256 hex digest per referenced path.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DatasetManifest {
    pub fn referenced_paths(&self) -> Vec<&str> {
        let mut out = vec![self.feature_path.as_str(), self.label_path.as_str()];
        for p in [
            &self.multilabel_path,
            &self.similarity_path,
            &self.terms_path,
            &self.remap_path,
        ]
        .into_iter()
        .flatten()
        {
            out.push(p.as_str());
        }
        out
    }

    /// Recomputes checksums for every referenced file under `dir`.
    pub fn fill_checksums(&mut self, dir: &Path) -> Result<()> {
        let mut sums = BTreeMap::new();
        for p in self.referenced_paths() {
            sums.insert(p.to_owned(), sha256_file(&dir.join(p))?);
        }
        self.checksums = sums;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    /// Loads and validates: every referenced file exists, checksums match and
    /// binary headers parse.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for p in manifest.referenced_paths() {
            let full = dir.join(p);
            let bytes = read_file(&full)?;
            if let Some(expected) = manifest.checksums.get(p) {
                if &sha256_bytes(&bytes) != expected {
                    return Err(Error::ChecksumMismatch { path: full });
                }
            }
            if bytes.starts_with(MAGIC) {
                Header::decode(&bytes, &full)?;
            }
        }
        Ok((manifest, dir))
    }
}

/// Fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub remap: ClassRemap,
    pub multilabels: Option<MultiLabelSets>,
    pub similarity: Option<SimilarityMatrix>,
}

impl Dataset {
    pub fn load(manifest_path: &Path, normalize: bool) -> Result<Self> {
        let (manifest, dir) = DatasetManifest::load(manifest_path)?;
        let features = load_features(&dir.join(&manifest.feature_path), normalize)?;
        let loaded = load_labels(&dir.join(&manifest.label_path), features.n_rows())?;
        let multilabels = match &manifest.multilabel_path {
            Some(p) => {
                let full = dir.join(p);
                let text = fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?;
                let fwd = loaded.remap.forward();
                let raw = MultiLabelSets::parse(&text, usize::MAX)?;
                let n = loaded.labels.n_classes();
                let mut primary = Vec::with_capacity(raw.len());
                let mut sets = Vec::with_capacity(raw.len());
                for i in 0..raw.len() {
                    let map = |c: u32| fwd.get(&c).copied().ok_or(Error::UnknownClass(c as usize));
                    primary.push(map(raw.primary()[i])?);
                    sets.push(raw.set(i).iter().map(|&c| map(c)).collect::<Result<Vec<_>>>()?);
                }
                let ml = MultiLabelSets::new(primary, sets, n)?;
                if ml.len() != features.n_rows() {
                    return Err(Error::RowCountMismatch {
                        expected: features.n_rows(),
                        found: ml.len(),
                    });
                }
                Some(ml)
            }
            None => None,
        };
        let similarity = match (&manifest.similarity_path, &manifest.terms_path) {
            (Some(s), Some(t)) => {
                let sim = SimilarityMatrix::load(&dir.join(s), &dir.join(t))?;
                if sim.n_rows() != features.n_rows() {
                    return Err(Error::RowCountMismatch {
                        expected: features.n_rows(),
                        found: sim.n_rows(),
                    });
                }
                Some(sim)
            }
            _ => None,
        };
        Ok(Dataset {
            manifest,
            features,
            labels: loaded.labels,
            remap: loaded.remap,
            multilabels,
            similarity,
        })
    }
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let dir = tmp();
        let p = dir.path().join("f.fbcf");
        write_f32(&p, 2, 2, &[3.0, 4.0, 0.0, 1.0]).unwrap();
        let m = load_features(&p, true).unwrap();
        assert!(m.is_normalized());
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.0, 1.0]);
        let raw = load_features(&p, false).unwrap();
        assert!(!raw.is_normalized());
        assert_eq!(raw.values(), &[3.0, 4.0, 0.0, 1.0]);
    }

    #[test]
    fn nan_reports_row() {
        let dir = tmp();
        let p = dir.path().join("f.fbcf");
        write_f32(&p, 2, 2, &[1.0, 0.0, 0.5, f32::NAN]).unwrap();
        match load_features(&p, false) {
            Err(Error::NonFiniteValue { row: 1, col: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tmp();
        let p = dir.path().join("f.fbcf");
        fs::write(&p, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_features(&p, false), Err(Error::BadMagic(_))));
        write_f32(&p, 2, 2, &[1.0; 4]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_features(&p, false),
            Err(Error::TruncatedFile { expected: 36, found: 33, .. })
        ));
    }

    #[test]
    fn zero_row_rejected_only_when_normalizing() {
        let dir = tmp();
        let p = dir.path().join("f.fbcf");
        write_f32(&p, 2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(load_features(&p, false).is_ok());
        assert!(matches!(
            load_features(&p, true),
            Err(Error::ZeroNormRow { row: 1 })
        ));
    }

    #[test]
    fn header_layout_is_fixed() {
        let h = Header {
            dtype: Dtype::F32,
            n_cols: 3,
            n_rows: 5,
        };
        let bytes = h.encode();
        assert_eq!(&bytes[0..4], b"FBCF");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &5u64.to_le_bytes());
    }

    #[test]
    fn labels_text_with_gap_keep_ids() {
        let dir = tmp();
        let p = dir.path().join("l.txt");
        fs::write(&p, "0\n2\n2\n").unwrap();
        let l = load_labels(&p, 3).unwrap();
        assert_eq!(l.labels.labels(), &[0, 2, 2]);
        assert_eq!(l.labels.n_classes(), 3);
        assert_eq!(l.unused, vec![1]);
        assert!(l.remap.is_identity());
        assert!(matches!(
            load_labels(&p, 4),
            Err(Error::RowCountMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn sparse_labels_remapped() {
        let dir = tmp();
        let p = dir.path().join("l.bin");
        write_u32(&p, 2, 1, &[5, 7]).unwrap();
        let l = load_labels(&p, 2).unwrap();
        assert_eq!(l.labels.labels(), &[0, 1]);
        assert_eq!(l.labels.n_classes(), 2);
        assert_eq!(l.remap.original, vec![5, 7]);
        assert_eq!(l.remap.to_csv(), "original,dense\n5,0\n7,1\n");
    }

    #[test]
    fn negative_label_rejected() {
        let dir = tmp();
        let p = dir.path().join("l.txt");
        fs::write(&p, "0\n-1\n").unwrap();
        assert!(matches!(
            load_labels(&p, 2),
            Err(Error::NegativeLabel { row: 1, value: -1 })
        ));
    }

    #[test]
    fn subset_examples() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let l = LabelVector::from_labels(vec![0, 1, 0, 2]);
        let (sf, sl, remap) = subset(&f, &l, &[0, 2].into_iter().collect()).unwrap();
        assert_eq!(sf.values(), &[0.0, 2.0, 3.0]);
        assert_eq!(sl.labels(), &[0, 0, 1]);
        assert_eq!(remap.original, vec![0, 2]);

        let (sf, sl, remap) = subset(&f, &l, &[0, 1, 2].into_iter().collect()).unwrap();
        assert_eq!(sf, f);
        assert_eq!(sl, l);
        assert!(remap.is_identity());

        assert!(matches!(
            subset(&f, &l, &[9].into_iter().collect()),
            Err(Error::EmptyResult)
        ));
    }

    #[test]
    fn multilabel_text_roundtrip() {
        let ml = MultiLabelSets::new(vec![0, 3], vec![vec![2, 0], vec![3]], 4).unwrap();
        let back = MultiLabelSets::parse(&ml.to_text(), 4).unwrap();
        assert_eq!(ml, back);
        assert!(MultiLabelSets::new(vec![1], vec![vec![2]], 4).is_err());
    }

    #[test]
    fn manifest_checksum_validation() {
        let dir = tmp();
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        f.write(&dir.path().join("x.fbcf")).unwrap();
        LabelVector::from_labels(vec![0, 1])
            .write(&dir.path().join("y.fbcf"))
            .unwrap();
        let mut m = DatasetManifest {
            name: "toy".into(),
            split: Split::Train,
            feature_path: "x.fbcf".into(),
            label_path: "y.fbcf".into(),
            multilabel_path: None,
            similarity_path: None,
            terms_path: None,
            remap_path: None,
            checksums: BTreeMap::new(),
        };
        m.fill_checksums(dir.path()).unwrap();
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        let ds = Dataset::load(&mp, true).unwrap();
        assert_eq!(ds.labels.labels(), &[0, 1]);
        f.write(&dir.path().join("x.fbcf")).unwrap();
        write_f32(&dir.path().join("x.fbcf"), 2, 2, &[1.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(matches!(
            Dataset::load(&mp, true),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
