use std::path::Path;

use crate::error::{Error, Result};
use crate::store;

/// Per-row top-k cluster predictions, descending by confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    n_rows: usize,
    k: usize,
    ids: Vec<u32>,
    confidences: Vec<f32>,
    n_clusters: usize,
}

impl ClusterAssignment {
    pub fn new(
        n_rows: usize,
        k: usize,
        n_clusters: usize,
        ids: Vec<u32>,
        confidences: Vec<f32>,
    ) -> Result<Self> {
        if ids.len() != n_rows * k || confidences.len() != n_rows * k {
            return Err(Error::DimensionMismatch {
                expected: n_rows * k,
                found: ids.len().min(confidences.len()),
            });
        }
        Ok(ClusterAssignment {
            n_rows,
            k,
            ids,
            confidences,
            n_clusters,
        })
    }

    /// Hard top-1 assignment with unit confidence.
    pub fn from_hard(labels: &[u32], n_clusters: usize) -> Self {
        ClusterAssignment {
            n_rows: labels.len(),
            k: 1,
            ids: labels.to_vec(),
            confidences: vec![1.0; labels.len()],
            n_clusters,
        }
    }

    /// Selects the `k` largest entries of each probability row (ties by lower id).
    pub fn from_scores(scores: &[f64], n_clusters: usize, k: usize) -> Self {
        let n_rows = scores.len() / n_clusters.max(1);
        let mut ids = Vec::with_capacity(n_rows * k);
        let mut confidences = Vec::with_capacity(n_rows * k);
        let mut order: Vec<usize> = Vec::with_capacity(n_clusters);
        for row in scores.chunks_exact(n_clusters) {
            order.clear();
            order.extend(0..n_clusters);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &c in &order[..k] {
                ids.push(c as u32);
                confidences.push(row[c] as f32);
            }
        }
        ClusterAssignment {
            n_rows,
            k,
            ids,
            confidences,
            n_clusters,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn ids(&self, row: usize) -> &[u32] {
        &self.ids[row * self.k..(row + 1) * self.k]
    }

    pub fn confidences(&self, row: usize) -> &[f32] {
        &self.confidences[row * self.k..(row + 1) * self.k]
    }

    pub fn top1(&self) -> Vec<u32> {
        (0..self.n_rows).map(|r| self.ids[r * self.k]).collect()
    }

    /// Maximum softmax probability per row.
    pub fn msp(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| f64::from(self.confidences[r * self.k]))
            .collect()
    }

    /// Writes ids (u32) and confidences (f32) as two `n_rows x k` FBCF files.
    pub fn write(&self, ids_path: &Path, conf_path: &Path) -> Result<()> {
        store::write_u32(ids_path, self.n_rows, self.k, &self.ids)?;
        store::write_f32(conf_path, self.n_rows, self.k, &self.confidences)
    }

    pub fn load(ids_path: &Path, conf_path: &Path, n_clusters: usize) -> Result<Self> {
        let (n, k, ids) = store::read_u32(ids_path)?;
        let (n2, k2, confidences) = store::read_f32(conf_path)?;
        if n != n2 || k != k2 {
            return Err(Error::DimensionMismatch {
                expected: n * k,
                found: n2 * k2,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&c| c as usize >= n_clusters) {
            return Err(Error::UnknownClass(bad as usize));
        }
        Self::new(n, k, n_clusters, ids, confidences)
    }
}
