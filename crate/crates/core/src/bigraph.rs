//! Symmetric-normalized bipartite graphs and linear layer propagation.
//!
//! For an edge `(l, r)` the propagation weight is `1 / (sqrt(deg l) * sqrt(deg r))`.
//! Layer `k` embeddings of one side are weighted sums of layer `k-1`
//! embeddings of the other side, and the final representation is
//! `sum_k layer_k / (k + 1)`. The whole map is linear in the base tables, so
//! its adjoint is the same recurrence run through the transposed operator.
//!
//! Nodes with no edges have empty rows: they contribute nothing beyond their
//! base layer.

use crate::corpus::InteractionTable;
use crate::matrix::{axpy, Matrix};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Compressed sparse rows with per-entry weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn transpose(&self) -> Csr {
        let mut indptr = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            indptr[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            indptr[c + 1] += indptr[c];
        }
        let mut cursor = indptr.clone();
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let dst = cursor[c];
                indices[dst] = r;
                values[dst] = v;
                cursor[c] += 1;
            }
        }
        Csr {
            indptr,
            indices,
            values,
            n_rows: self.n_cols,
            n_cols: self.n_rows,
        }
    }

    /// `out = self * x`, where `x` has `n_cols` rows.
    pub fn spmm(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.rows(), self.n_cols);
        let mut out = Matrix::zeros(self.n_rows, x.cols());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let dst = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                axpy(v, x.row(c), dst);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                m.set(r, c, v);
            }
        }
        m
    }
}

/// A bipartite graph stored in both directions with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBigraph {
    pub l2r: Csr,
    pub r2l: Csr,
}

impl NormalizedBigraph {
    pub fn n_left(&self) -> usize {
        self.l2r.n_rows
    }

    pub fn n_right(&self) -> usize {
        self.l2r.n_cols
    }

    pub fn n_edges(&self) -> usize {
        self.l2r.nnz()
    }
}

pub fn build_normalized(edges: &InteractionTable) -> NormalizedBigraph {
    let (n_left, n_right) = (edges.n_left(), edges.n_right());
    let mut deg_l = vec![0usize; n_left];
    let mut deg_r = vec![0usize; n_right];
    for &(l, r) in edges.pairs() {
        deg_l[l] += 1;
        deg_r[r] += 1;
    }
    // Pairs are sorted by left id, so they already are in CSR order.
    let mut indptr = vec![0usize; n_left + 1];
    let mut indices = Vec::with_capacity(edges.len());
    let mut values = Vec::with_capacity(edges.len());
    for &(l, r) in edges.pairs() {
        indptr[l + 1] += 1;
        indices.push(r);
        values.push(1.0 / ((deg_l[l] as f64).sqrt() * (deg_r[r] as f64).sqrt()));
    }
    for l in 0..n_left {
        indptr[l + 1] += indptr[l];
    }
    let l2r = Csr {
        indptr,
        indices,
        values,
        n_rows: n_left,
        n_cols: n_right,
    };
    let r2l = l2r.transpose();
    NormalizedBigraph { l2r, r2l }
}

/// Per-layer embeddings, layers `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub left: Vec<Matrix>,
    pub right: Vec<Matrix>,
}

impl LayerStack {
    pub fn n_layers(&self) -> usize {
        self.left.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.left[0].cols()
    }
}

fn check_shapes(
    g: &NormalizedBigraph,
    left: &Matrix,
    right: &Matrix,
    what: &str,
) -> Result<(), GraphError> {
    if left.rows() != g.n_left() || right.rows() != g.n_right() || left.cols() != right.cols() {
        return Err(GraphError::DimensionMismatch(format!(
            "{what}: graph is {}x{}, got left {:?} and right {:?}",
            g.n_left(),
            g.n_right(),
            left.shape(),
            right.shape()
        )));
    }
    Ok(())
}

pub fn propagate(
    g: &NormalizedBigraph,
    left0: &Matrix,
    right0: &Matrix,
    layers: usize,
) -> Result<LayerStack, GraphError> {
    check_shapes(g, left0, right0, "propagate")?;
    let mut left = Vec::with_capacity(layers + 1);
    let mut right = Vec::with_capacity(layers + 1);
    left.push(left0.clone());
    right.push(right0.clone());
    for k in 1..=layers {
        let next_left = g.l2r.spmm(&right[k - 1]);
        let next_right = g.r2l.spmm(&left[k - 1]);
        left.push(next_left);
        right.push(next_right);
    }
    Ok(LayerStack { left, right })
}

#[inline]
pub fn layer_weight(k: usize) -> f64 {
    1.0 / (k as f64 + 1.0)
}

pub fn aggregate_layers(stack: &LayerStack) -> (Matrix, Matrix) {
    let mut left = stack.left[0].clone();
    let mut right = stack.right[0].clone();
    for k in 1..stack.left.len() {
        left.add_scaled(layer_weight(k), &stack.left[k]);
        right.add_scaled(layer_weight(k), &stack.right[k]);
    }
    (left, right)
}

/// Propagation followed by layer aggregation.
pub fn propagate_final(
    g: &NormalizedBigraph,
    left0: &Matrix,
    right0: &Matrix,
    layers: usize,
) -> Result<(Matrix, Matrix), GraphError> {
    Ok(aggregate_layers(&propagate(g, left0, right0, layers)?))
}

/// Maps gradients of the final embeddings back to the base tables.
///
/// Evaluated by Horner's rule: `acc_K = w_K g`, `acc_k = w_k g + Pᵀ acc_{k+1}`,
/// where `P` is one propagation step and `w_k = 1/(k+1)`.
pub fn propagate_adjoint(
    g: &NormalizedBigraph,
    grad_left: &Matrix,
    grad_right: &Matrix,
    layers: usize,
) -> Result<(Matrix, Matrix), GraphError> {
    check_shapes(g, grad_left, grad_right, "propagate_adjoint")?;
    let mut acc_left = grad_left.clone();
    let mut acc_right = grad_right.clone();
    acc_left.scale(layer_weight(layers));
    acc_right.scale(layer_weight(layers));
    for k in (0..layers).rev() {
        // Forward: left_k+1 = L2R right_k, right_k+1 = R2L left_k.
        // Transposed: right gets L2Rᵀ = R2L applied to left, and vice versa.
        let mut next_right = g.r2l.spmm(&acc_left);
        let mut next_left = g.l2r.spmm(&acc_right);
        next_left.add_scaled(layer_weight(k), grad_left);
        next_right.add_scaled(layer_weight(k), grad_right);
        acc_left = next_left;
        acc_right = next_right;
    }
    Ok((acc_left, acc_right))
}
