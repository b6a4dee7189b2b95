//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the sparse kernels or the metric functions of the
//! library; every quantity is recomputed from its definition.

#![allow(dead_code)]

use std::collections::HashSet;

use coheat::corpus::InteractionTable;
use coheat::Matrix;
use rand::Rng;

/// Uniformly random bipartite edge set with the given density.
pub fn random_table<R: Rng>(rng: &mut R, n_left: usize, n_right: usize, density: f64) -> InteractionTable {
    let mut pairs = Vec::new();
    for l in 0..n_left {
        for r in 0..n_right {
            if rng.random::<f64>() < density {
                pairs.push((l, r));
            }
        }
    }
    InteractionTable::new(pairs, n_left, n_right).unwrap()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Full `(L+R) x (L+R)` symmetric normalized adjacency, built entry by entry.
pub fn dense_adjacency(table: &InteractionTable) -> Vec<Vec<f64>> {
    let (nl, nr) = (table.n_left(), table.n_right());
    let n = nl + nr;
    let mut adj = vec![vec![0.0; n]; n];
    for &(l, r) in table.pairs() {
        adj[l][nl + r] = 1.0;
        adj[nl + r][l] = 1.0;
    }
    let deg: Vec<f64> = adj.iter().map(|row| row.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            if adj[i][j] != 0.0 {
                adj[i][j] = 1.0 / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
    }
    adj
}

fn dense_mul(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = x.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| row.iter().zip(x).map(|(&w, xr)| w * xr[c]).sum())
                .collect()
        })
        .collect()
}

/// `sum_k A^k E / (k+1)` on the stacked embedding `E = [left; right]`.
pub fn dense_propagate(table: &InteractionTable, left0: &Matrix, right0: &Matrix, layers: usize) -> (Matrix, Matrix) {
    let adj = dense_adjacency(table);
    let d = left0.cols();
    let mut e: Vec<Vec<f64>> = (0..left0.rows())
        .map(|r| left0.row(r).to_vec())
        .chain((0..right0.rows()).map(|r| right0.row(r).to_vec()))
        .collect();
    let mut acc = e.clone();
    for k in 1..=layers {
        e = dense_mul(&adj, &e);
        for (a, x) in acc.iter_mut().zip(&e) {
            for (ai, xi) in a.iter_mut().zip(x) {
                *ai += xi / (k as f64 + 1.0);
            }
        }
    }
    let nl = left0.rows();
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<_>>();
    (
        Matrix::from_vec(nl, d, flat(&acc[..nl])),
        Matrix::from_vec(right0.rows(), d, flat(&acc[nl..])),
    )
}

/// Recall@k counted by direct set membership over every position.
pub fn brute_recall(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let mut hits = 0usize;
    for (pos, b) in ranked.iter().enumerate() {
        if pos < k && rel.contains(b) {
            hits += 1;
        }
    }
    hits as f64 / rel.len() as f64
}

/// nDCG@k with the ideal ordering obtained by sorting relevance labels.
pub fn brute_ndcg(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let gains: Vec<f64> = ranked
        .iter()
        .map(|b| if rel.contains(b) { 1.0 } else { 0.0 })
        .collect();
    let dcg_of = |g: &[f64]| {
        let mut s = 0.0;
        for (pos, &x) in g.iter().enumerate().take(k) {
            if x > 0.0 {
                s += x / ((pos + 2) as f64).log2();
            }
        }
        s
    };
    // The ideal list places every relevant id first, whether or not the
    // ranking contains it.
    let mut ideal = vec![1.0; rel.len()];
    ideal.extend(std::iter::repeat_n(0.0, ranked.len()));
    dcg_of(&gains) / dcg_of(&ideal)
}
