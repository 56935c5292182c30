//! Head-bank checkpoints.
//!
//! Layout: `"FBCK"`, version byte, three reserved bytes, `u64` length of a
//! JSON metadata block, the JSON itself, then one FBCF f32 blob per array in
//! the order student layers, teacher layers, prior, repeated for every head.
//! Each layer contributes its weight matrix (`n_out x n_in`) then its bias
//! (`n_out x 1`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Dense, Network};
use super::{HeadBank, TrainConfig};
use crate::error::{Error, Result};
use crate::store::{read_file, write_file, Dtype, Header, HEADER_LEN};

const MAGIC: &[u8; 4] = b"FBCK";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    dim: usize,
    n_clusters: usize,
    n_heads: usize,
    hidden: Option<usize>,
    config: TrainConfig,
}

fn push_blob(buf: &mut Vec<u8>, n_rows: usize, n_cols: usize, values: &[f64]) {
    let header = Header {
        dtype: Dtype::F32,
        n_cols: n_cols as u32,
        n_rows: n_rows as u64,
    };
    buf.extend_from_slice(&header.encode());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_network(buf: &mut Vec<u8>, net: &Network) {
    for l in &net.layers {
        push_blob(buf, l.n_out, l.n_in, &l.w);
        push_blob(buf, l.n_out, 1, &l.b);
    }
}

pub(super) fn save(bank: &HeadBank, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let meta = Meta {
        dim: bank.dim,
        n_clusters: bank.n_clusters,
        n_heads: bank.n_heads(),
        hidden: bank.heads.first().and_then(|h| h.student.hidden()),
        config: cfg.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, 0, 0, 0]);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for head in &bank.heads {
        push_network(&mut buf, &head.student);
        push_network(&mut buf, &head.teacher);
        push_blob(&mut buf, 1, bank.n_clusters, &head.prior);
    }
    write_file(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn truncated(&self, need: usize) -> Error {
        Error::TruncatedFile {
            path: self.path.to_path_buf(),
            expected: (self.at + need) as u64,
            found: self.bytes.len() as u64,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.truncated(n));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn blob(&mut self, n_rows: usize, n_cols: usize) -> Result<Vec<f64>> {
        let head = self.take(HEADER_LEN)?.to_vec();
        self.at -= HEADER_LEN;
        if head[0..4] != *b"FBCF" {
            return Err(Error::BadMagic(self.path.to_path_buf()));
        }
        let cols = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
        if rows != n_rows || cols != n_cols {
            return Err(Error::UnsupportedFormat {
                path: self.path.to_path_buf(),
                detail: format!("blob shape {rows}x{cols}, expected {n_rows}x{n_cols}"),
            });
        }
        let len = HEADER_LEN + rows * cols * 4;
        let path = self.path;
        let slice = self.take(len)?;
        let header = Header::decode(slice, path)?;
        if header.dtype != Dtype::F32 {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: "checkpoint blobs must be f32".into(),
            });
        }
        Ok(slice[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn network(&mut self, dims: &[usize]) -> Result<Network> {
        let mut layers = Vec::new();
        for d in dims.windows(2) {
            let w = self.blob(d[1], d[0])?;
            let b = self.blob(d[1], 1)?;
            layers.push(Dense {
                n_in: d[0],
                n_out: d[1],
                w,
                b,
            });
        }
        Ok(Network { layers })
    }
}

pub(super) fn load(path: &Path) -> Result<(HeadBank, TrainConfig)> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.take(4)?[0];
    if version != VERSION {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("checkpoint version {version}"),
        });
    }
    let json_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let meta: Meta = serde_json::from_slice(r.take(json_len)?)?;
    let dims: Vec<usize> = match meta.hidden {
        Some(h) => vec![meta.dim, h, meta.n_clusters],
        None => vec![meta.dim, meta.n_clusters],
    };
    let mut heads = Vec::with_capacity(meta.n_heads);
    for _ in 0..meta.n_heads {
        let student = r.network(&dims)?;
        let teacher = r.network(&dims)?;
        let prior = r.blob(1, meta.n_clusters)?;
        heads.push((student, teacher, prior));
    }
    if r.at != bytes.len() {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "trailing bytes after checkpoint".into(),
        });
    }
    let cfg = meta.config;
    let bank = HeadBank::from_parts(heads, meta.dim, meta.n_clusters, cfg.student_temp, cfg.teacher_temp);
    Ok((bank, cfg))
}
