//! Exact cosine top-k neighbor mining over row-normalized features.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::store::{self, FeatureMatrix, Header, LabelVector, HEADER_LEN};

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_BLOCK: usize = 256;

/// Row-wise top-k neighbors, similarities non-increasing per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    n_rows: usize,
    k: usize,
    ids: Vec<u32>,
    sims: Vec<f32>,
}

/// Candidate ordered so that the heap top is the worst kept neighbor.
#[derive(Clone, Copy)]
struct Cand {
    sim: f64,
    id: u32,
}

impl Cand {
    /// `Less` means `self` ranks ahead of `other`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other.sim.total_cmp(&self.sim).then(self.id.cmp(&other.id))
    }
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Mines the exact top-`k` neighbors of every row by dot product, excluding
/// the row itself. Ties go to the lower row id. `block` is the tile edge of
/// the query x candidate scan and never changes the result.
pub fn mine_knn(features: &FeatureMatrix, k: usize, block: usize) -> Result<NeighborTable> {
    let n = features.n_rows();
    if !features.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if k >= n {
        return Err(Error::KTooLarge {
            k,
            available: n.saturating_sub(1),
        });
    }
    let block = block.max(1);
    let mut ids = vec![0u32; n * k];
    let mut sims = vec![0f32; n * k];
    ids.par_chunks_mut(block * k)
        .zip(sims.par_chunks_mut(block * k))
        .enumerate()
        .for_each(|(b, (id_out, sim_out))| {
            let q0 = b * block;
            let q1 = (q0 + block).min(n);
            let mut heaps: Vec<BinaryHeap<Cand>> =
                (q0..q1).map(|_| BinaryHeap::with_capacity(k + 1)).collect();
            let mut c0 = 0;
            while c0 < n {
                let c1 = (c0 + block).min(n);
                for (qi, heap) in (q0..q1).zip(heaps.iter_mut()) {
                    let q = features.row(qi);
                    for ci in c0..c1 {
                        if ci == qi {
                            continue;
                        }
                        let cand = Cand {
                            sim: dot(q, features.row(ci)),
                            id: ci as u32,
                        };
                        if heap.len() < k {
                            heap.push(cand);
                        } else if cand < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
                c0 = c1;
            }
            for (local, heap) in heaps.into_iter().enumerate() {
                let sorted = heap.into_sorted_vec();
                for (j, c) in sorted.into_iter().enumerate() {
                    id_out[local * k + j] = c.id;
                    sim_out[local * k + j] = c.sim as f32;
                }
            }
        });
    Ok(NeighborTable {
        n_rows: n,
        k,
        ids,
        sims,
    })
}

impl NeighborTable {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, row: usize) -> &[u32] {
        &self.ids[row * self.k..(row + 1) * self.k]
    }

    pub fn similarities(&self, row: usize) -> &[f32] {
        &self.sims[row * self.k..(row + 1) * self.k]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            dtype: store::Dtype::Knn,
            n_cols: self.k as u32,
            n_rows: self.n_rows as u64,
        };
        let mut buf = Vec::with_capacity(header.file_len() as usize);
        buf.extend_from_slice(&header.encode());
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for s in &self.sims {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        store::write_file(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = store::read_file(path)?;
        let header = Header::decode(&bytes, path)?;
        if header.dtype != store::Dtype::Knn {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: "not a neighbor table".into(),
            });
        }
        let n = header.n_rows as usize;
        let k = header.n_cols as usize;
        let payload = &bytes[HEADER_LEN..];
        let (id_bytes, sim_bytes) = payload.split_at(n * k * 4);
        let ids: Vec<u32> = id_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let sims = sim_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if ids.iter().any(|&i| i as usize >= n) {
            return Err(Error::Parse(format!("{}: neighbor id out of range", path.display())));
        }
        Ok(NeighborTable {
            n_rows: n,
            k,
            ids,
            sims,
        })
    }
}

/// All `(i, j)` with `j` among the neighbors of `i` and equal labels.
pub fn true_positive_pairs(table: &NeighborTable, labels: &LabelVector) -> Result<Vec<(usize, usize)>> {
    if table.n_rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: table.n_rows(),
            right: labels.len(),
        });
    }
    let mut out = Vec::new();
    for i in 0..table.n_rows() {
        for &j in table.neighbors(i) {
            if labels.get(i) == labels.get(j as usize) {
                out.push((i, j as usize));
            }
        }
    }
    Ok(out)
}
