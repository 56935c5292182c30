//! Maximum-agreement one-to-one matching between clusters and classes.
//!
//! Rectangular contingency tables are padded with zero rows/columns. Among
//! all optimal matchings the lexicographically smallest one (by cluster
//! order, padded columns last) is returned.

use serde::{Deserialize, Serialize};

/// Cluster → class mapping `f`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `mapping[cluster]` is the matched class, if any.
    pub mapping: Vec<Option<u32>>,
    pub agreement: u64,
}

impl Assignment {
    pub fn map(&self, cluster: u32) -> Option<u32> {
        self.mapping.get(cluster as usize).copied().flatten()
    }
}

/// `counts[cluster][class]` for aligned prediction/label vectors.
pub fn contingency(pred: &[u32], gt: &[u32], n_clusters: usize, n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_clusters];
    for (&p, &g) in pred.iter().zip(gt) {
        m[p as usize][g as usize] += 1;
    }
    m
}

/// Solves the assignment problem on a `C_pred x C_gt` count matrix.
pub fn hungarian(counts: &[Vec<u64>]) -> Assignment {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Assignment {
            mapping: Vec::new(),
            agreement: 0,
        };
    }
    let weight = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            counts[i][j] as i64
        } else {
            0
        }
    };
    let max_w = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| weight(i, j))
        .max()
        .unwrap_or(0);
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| (0..n).map(|j| max_w - weight(i, j)).collect())
        .collect();

    let (row_to_col, u, v) = min_cost_perfect(&cost);

    // Any optimal matching uses only edges that are tight under the optimal
    // dual, so lexicographic refinement can stay inside the tight subgraph.
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cost[i][j] - u[i + 1] - v[j + 1] == 0).collect())
        .collect();
    let row_to_col = lexicographic_refine(&tight, row_to_col);

    let mut mapping = vec![None; rows];
    let mut agreement = 0u64;
    for (i, slot) in mapping.iter_mut().enumerate() {
        let j = row_to_col[i];
        if j < cols {
            *slot = Some(j as u32);
            agreement += counts[i][j];
        }
    }
    Assignment { mapping, agreement }
}

/// Shortest augmenting path Hungarian method (1-indexed potentials).
fn min_cost_perfect(cost: &[Vec<i64>]) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u, v)
}

/// Turns a perfect matching of `tight` into the lexicographically smallest one.
fn lexicographic_refine(tight: &[Vec<usize>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = tight.len();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for &j in &tight[i] {
            if row_to_col[i] == j {
                break;
            }
            // Force i -> j: the displaced row must reach i's old column
            // through rows that are not yet fixed.
            let freed = row_to_col[i];
            let owner = col_to_row[j];
            if owner < i {
                continue;
            }
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if augment(tight, owner, freed, i, &col_to_row, &mut visited, &mut path) {
                for (r, c) in path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
    row_to_col
}

fn augment(
    tight: &[Vec<usize>],
    row: usize,
    target: usize,
    fixed_upto: usize,
    col_to_row: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for &c in &tight[row] {
        if visited[c] {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = col_to_row[c];
        if next <= fixed_upto {
            continue;
        }
        if augment(tight, next, target, fixed_upto, col_to_row, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}
