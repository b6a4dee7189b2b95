//! Loss terms and their exact gradients with respect to the base tables.
//!
//! The total loss for one batch is
//!
//! ```text
//! L = mean_t softplus(-(y(u,b+) - y(u,b-)))           (pairwise ranking)
//!   + lambda1 * (align + uniform)                       (cross-view regularizer)
//!   + lambda2 * l2(params)
//! ```
//!
//! `align` and `uniform` act on l2-normalized final embeddings of the batch's
//! unique users and bundles. The per-bundle view weights are inputs, not
//! parameters, so no gradient flows into them.
//!
//! Gradients are accumulated on the final embeddings, pushed through the
//! mean-pooling adjoint for bundles of the user-item view, and then through
//! the propagation adjoint of each graph.

mod gradcheck;

pub use gradcheck::{
    central_difference, finite_diff_check, tiny_instance, GradCheckReport, TableCheck, TinyInstance,
};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bigraph::{propagate_adjoint, NormalizedBigraph};
use crate::matrix::{axpy, dot, squared_distance, Matrix};
use crate::model::{
    compute_views, pool_items_adjoint, predict, BundleItems, Gradients, ModelError, ModelParams,
    ViewEmbeddings,
};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("{view} embedding of {entity} {id} collapsed to zero norm")]
    CollapsedEmbedding {
        view: &'static str,
        entity: &'static str,
        id: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Triplets `(user, positive bundle, negative bundle)` plus the unique ids they touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub triplets: Vec<(usize, usize, usize)>,
    /// Ascending, each id once.
    pub unique_users: Vec<usize>,
    /// Positives and negatives pooled; ascending, each id once.
    pub unique_bundles: Vec<usize>,
}

impl TrainBatch {
    pub fn new(triplets: Vec<(usize, usize, usize)>) -> Self {
        let mut unique_users: Vec<usize> = triplets.iter().map(|t| t.0).collect();
        unique_users.sort_unstable();
        unique_users.dedup();
        let mut unique_bundles: Vec<usize> = triplets.iter().flat_map(|t| [t.1, t.2]).collect();
        unique_bundles.sort_unstable();
        unique_bundles.dedup();
        Self {
            triplets,
            unique_users,
            unique_bundles,
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub align: f64,
    pub uniform: f64,
    pub au: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.bpr, self.align, self.uniform, self.au, self.l2, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// How the parameter penalty is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Form {
    /// `0.5 * ||params||^2`
    #[default]
    Squared,
    /// `||params||`
    Norm,
}

pub fn normalize_rows(rows: &Matrix) -> Result<Matrix, ObjectiveError> {
    let mut out = rows.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm == 0.0 {
            return Err(ObjectiveError::ZeroNorm { row: r });
        }
        for x in row {
            *x /= norm;
        }
    }
    Ok(out)
}

pub fn gather_rows(m: &Matrix, ids: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(ids.len(), m.cols());
    for (dst, &id) in ids.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(id));
    }
    out
}

/// Normalized final embeddings of the batch's unique users and bundles,
/// rows aligned with `TrainBatch::unique_users` / `unique_bundles`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchViews {
    pub h_u: Matrix,
    pub a_u: Matrix,
    pub h_b: Matrix,
    pub a_b: Matrix,
}

impl BatchViews {
    pub fn from_views(ve: &ViewEmbeddings, batch: &TrainBatch) -> Result<Self, ObjectiveError> {
        let norm = |m: &Matrix, ids: &[usize], view, entity| {
            normalize_rows(&gather_rows(m, ids)).map_err(|e| match e {
                ObjectiveError::ZeroNorm { row } => ObjectiveError::CollapsedEmbedding {
                    view,
                    entity,
                    id: ids[row],
                },
                other => other,
            })
        };
        let (us, bs) = (&batch.unique_users, &batch.unique_bundles);
        Ok(Self {
            h_u: norm(&ve.h_u, us, "user-bundle", "user")?,
            a_u: norm(&ve.a_u, us, "user-item", "user")?,
            h_b: norm(&ve.h_b, bs, "user-bundle", "bundle")?,
            a_b: norm(&ve.a_b, bs, "user-item", "bundle")?,
        })
    }
}

fn mean_sq_distance(x: &Matrix, y: &Matrix) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..x.rows()).map(|r| squared_distance(x.row(r), y.row(r))).sum();
    total / x.rows() as f64
}

/// Mean squared distance between the two views, for users plus for bundles.
pub fn align_loss(v: &BatchViews) -> f64 {
    mean_sq_distance(&v.h_u, &v.a_u) + mean_sq_distance(&v.h_b, &v.a_b)
}

/// `log mean_{i != j} exp(-2 ||x_i - x_j||^2)`; zero when there are fewer than two rows.
pub fn uniform_term(x: &Matrix) -> f64 {
    uniform_term_sum(x).map_or(0.0, |(s, pairs)| s.ln() - pairs.ln())
}

fn uniform_term_sum(x: &Matrix) -> Option<(f64, f64)> {
    let n = x.rows();
    if n < 2 {
        warn!("uniformity term skipped: {n} unique rows in batch");
        return None;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += 2.0 * (-2.0 * squared_distance(x.row(i), x.row(j))).exp();
        }
    }
    Some((s, (n * (n - 1)) as f64))
}

/// Gradient of [`uniform_term`] with respect to each row.
fn uniform_term_grad(x: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let Some((s, _)) = uniform_term_sum(x) else {
        return g;
    };
    let n = x.rows();
    for i in 0..n {
        for j in i + 1..n {
            let e = (-2.0 * squared_distance(x.row(i), x.row(j))).exp();
            // d/dx_i of the two ordered-pair terms: -8 e (x_i - x_j), scaled by 1/S.
            let c = -8.0 * e / s;
            for k in 0..x.cols() {
                let diff = x.get(i, k) - x.get(j, k);
                g.set(i, k, g.get(i, k) + c * diff);
                g.set(j, k, g.get(j, k) - c * diff);
            }
        }
    }
    g
}

/// Sum of the four uniformity terms: users and bundles in both views.
pub fn uniform_loss(v: &BatchViews) -> f64 {
    uniform_term(&v.h_u) + uniform_term(&v.a_u) + uniform_term(&v.h_b) + uniform_term(&v.a_b)
}

pub fn au_loss(align: f64, uniform: f64) -> f64 {
    align + uniform
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln sigmoid(pos - neg)`.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len(), "prediction lists differ in length");
    if pos.is_empty() {
        return 0.0;
    }
    let sum: f64 = pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum();
    sum / pos.len() as f64
}

pub fn l2_penalty(params: &ModelParams, form: L2Form) -> f64 {
    let sq = params.frobenius_sq();
    match form {
        L2Form::Squared => 0.5 * sq,
        L2Form::Norm => sq.sqrt(),
    }
}

pub fn total_loss(
    bpr: f64,
    align: f64,
    uniform: f64,
    l2: f64,
    lambda1: f64,
    lambda2: f64,
) -> LossBreakdown {
    let au = au_loss(align, uniform);
    LossBreakdown {
        bpr,
        align,
        uniform,
        au,
        l2,
        total: bpr + lambda1 * au + lambda2 * l2,
    }
}

/// Everything besides the parameters that the loss depends on.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub ub_graph: &'a NormalizedBigraph,
    pub ui_graph: &'a NormalizedBigraph,
    pub bundle_items: &'a BundleItems,
    pub batch: &'a TrainBatch,
    /// Per-bundle weight of the user-bundle view.
    pub gammas: &'a [f64],
    pub lambda1: f64,
    pub lambda2: f64,
    pub layers: usize,
    pub l2_form: L2Form,
}

impl LossInputs<'_> {
    fn validate(&self, params: &ModelParams) -> Result<(), ObjectiveError> {
        params.check_consistent()?;
        if self.gammas.len() != params.bundles() {
            return Err(ObjectiveError::InvalidInput(format!(
                "{} view weights for {} bundles",
                self.gammas.len(),
                params.bundles()
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(ObjectiveError::InvalidInput(
                "loss weights must be non-negative".into(),
            ));
        }
        let (u, b) = (params.users(), params.bundles());
        if let Some(t) = self
            .batch
            .triplets
            .iter()
            .find(|t| t.0 >= u || t.1 >= b || t.2 >= b)
        {
            return Err(ObjectiveError::InvalidInput(format!(
                "triplet {t:?} out of range"
            )));
        }
        Ok(())
    }

    fn predictions(&self, ve: &ViewEmbeddings) -> (Vec<f64>, Vec<f64>) {
        self.batch
            .triplets
            .iter()
            .map(|&(u, p, n)| {
                let score = |b: usize| {
                    predict(
                        dot(ve.h_u.row(u), ve.h_b.row(b)),
                        dot(ve.a_u.row(u), ve.a_b.row(b)),
                        self.gammas[b],
                    )
                };
                (score(p), score(n))
            })
            .unzip()
    }

    pub fn loss(&self, params: &ModelParams) -> Result<LossBreakdown, ObjectiveError> {
        self.validate(params)?;
        let ve = compute_views(
            params,
            self.ub_graph,
            self.ui_graph,
            self.bundle_items,
            self.layers,
        )?;
        Ok(self.loss_from_views(params, &ve)?.0)
    }

    fn loss_from_views(
        &self,
        params: &ModelParams,
        ve: &ViewEmbeddings,
    ) -> Result<(LossBreakdown, Option<BatchViews>), ObjectiveError> {
        let (pos, neg) = self.predictions(ve);
        let bpr = bpr_loss(&pos, &neg);
        let (align, uniform, bv) = if self.lambda1 > 0.0 {
            let bv = BatchViews::from_views(ve, self.batch)?;
            (align_loss(&bv), uniform_loss(&bv), Some(bv))
        } else {
            (0.0, 0.0, None)
        };
        let l2 = l2_penalty(params, self.l2_form);
        Ok((
            total_loss(bpr, align, uniform, l2, self.lambda1, self.lambda2),
            bv,
        ))
    }

    /// Loss breakdown and the gradient of `total` with respect to every base table.
    pub fn loss_and_gradients(
        &self,
        params: &ModelParams,
    ) -> Result<(LossBreakdown, Gradients), ObjectiveError> {
        self.validate(params)?;
        let ve = compute_views(
            params,
            self.ub_graph,
            self.ui_graph,
            self.bundle_items,
            self.layers,
        )?;
        let (breakdown, bv) = self.loss_from_views(params, &ve)?;
        let d = params.dim();
        let mut g_hu = Matrix::zeros(params.users(), d);
        let mut g_hb = Matrix::zeros(params.bundles(), d);
        let mut g_au = Matrix::zeros(params.users(), d);
        let mut g_ab = Matrix::zeros(params.bundles(), d);

        let n = self.batch.len();
        for &(u, p, q) in &self.batch.triplets {
            let score = |b: usize| {
                predict(
                    dot(ve.h_u.row(u), ve.h_b.row(b)),
                    dot(ve.a_u.row(u), ve.a_b.row(b)),
                    self.gammas[b],
                )
            };
            let margin = score(p) - score(q);
            // d/d(margin) of softplus(-margin), averaged over triplets.
            let coeff = -sigmoid(-margin) / n as f64;
            for (b, sign) in [(p, 1.0), (q, -1.0)] {
                let gh = sign * coeff * self.gammas[b];
                let ga = sign * coeff * (1.0 - self.gammas[b]);
                axpy(gh, ve.h_b.row(b), g_hu.row_mut(u));
                axpy(gh, ve.h_u.row(u), g_hb.row_mut(b));
                axpy(ga, ve.a_b.row(b), g_au.row_mut(u));
                axpy(ga, ve.a_u.row(u), g_ab.row_mut(b));
            }
        }

        if let Some(bv) = bv {
            let l1 = self.lambda1;
            let (us, bs) = (&self.batch.unique_users, &self.batch.unique_bundles);
            let (mut dh_u, mut da_u) = align_grad(&bv.h_u, &bv.a_u);
            let (mut dh_b, mut da_b) = align_grad(&bv.h_b, &bv.a_b);
            dh_u.add_scaled(1.0, &uniform_term_grad(&bv.h_u));
            da_u.add_scaled(1.0, &uniform_term_grad(&bv.a_u));
            dh_b.add_scaled(1.0, &uniform_term_grad(&bv.h_b));
            da_b.add_scaled(1.0, &uniform_term_grad(&bv.a_b));
            scatter_normalize_grad(&mut g_hu, l1, &dh_u, &bv.h_u, &ve.h_u, us);
            scatter_normalize_grad(&mut g_au, l1, &da_u, &bv.a_u, &ve.a_u, us);
            scatter_normalize_grad(&mut g_hb, l1, &dh_b, &bv.h_b, &ve.h_b, bs);
            scatter_normalize_grad(&mut g_ab, l1, &da_b, &bv.a_b, &ve.a_b, bs);
        }

        let g_ai = pool_items_adjoint(&g_ab, self.bundle_items);
        let (ub_user, ub_bundle) = propagate_adjoint(self.ub_graph, &g_hu, &g_hb, self.layers)
            .map_err(ModelError::from)?;
        let (ui_user, ui_item) = propagate_adjoint(self.ui_graph, &g_au, &g_ai, self.layers)
            .map_err(ModelError::from)?;
        let mut grads = Gradients {
            ub_user,
            ub_bundle,
            ui_user,
            ui_item,
        };

        if self.lambda2 > 0.0 {
            let scale = match self.l2_form {
                L2Form::Squared => self.lambda2,
                L2Form::Norm => {
                    let norm = params.frobenius_sq().sqrt();
                    if norm > 0.0 {
                        self.lambda2 / norm
                    } else {
                        0.0
                    }
                }
            };
            grads.add_scaled(scale, params);
        }
        Ok((breakdown, grads))
    }
}

pub fn analytic_gradients(
    params: &ModelParams,
    inputs: &LossInputs<'_>,
) -> Result<Gradients, ObjectiveError> {
    Ok(inputs.loss_and_gradients(params)?.1)
}

/// Gradients of the mean squared distance with respect to both arguments.
fn align_grad(x: &Matrix, y: &Matrix) -> (Matrix, Matrix) {
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut gy = Matrix::zeros(y.rows(), y.cols());
    if x.rows() == 0 {
        return (gx, gy);
    }
    let c = 2.0 / x.rows() as f64;
    for r in 0..x.rows() {
        for k in 0..x.cols() {
            let diff = c * (x.get(r, k) - y.get(r, k));
            gx.set(r, k, diff);
            gy.set(r, k, -diff);
        }
    }
    (gx, gy)
}

/// Backpropagates `grad_unit` through `unit = raw / ||raw||` and adds
/// `scale` times the result into the rows `ids` of `target`.
fn scatter_normalize_grad(
    target: &mut Matrix,
    scale: f64,
    grad_unit: &Matrix,
    unit: &Matrix,
    raw: &Matrix,
    ids: &[usize],
) {
    for (r, &id) in ids.iter().enumerate() {
        let raw_row = raw.row(id);
        let norm = dot(raw_row, raw_row).sqrt();
        let (g, y) = (grad_unit.row(r), unit.row(r));
        let proj = dot(y, g);
        let dst = target.row_mut(id);
        for k in 0..g.len() {
            dst[k] += scale * (g[k] - y[k] * proj) / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let m = normalize_rows(&Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[1.0, 0.0]);
        let err = normalize_rows(&Matrix::from_rows(&[vec![1.0], vec![0.0]])).unwrap_err();
        assert!(matches!(err, ObjectiveError::ZeroNorm { row: 1 }));
    }

    #[test]
    fn align_examples() {
        let unit = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let empty = Matrix::zeros(0, 2);
        let same = BatchViews {
            h_u: unit.clone(),
            a_u: unit.clone(),
            h_b: empty.clone(),
            a_b: empty.clone(),
        };
        assert_eq!(align_loss(&same), 0.0);
        let ortho = BatchViews {
            a_u: Matrix::from_rows(&[vec![0.0, 1.0]]),
            ..same
        };
        assert_eq!(align_loss(&ortho), 2.0);
    }

    #[test]
    fn uniform_examples() {
        let same = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]);
        assert_eq!(uniform_term(&same), 0.0);
        let ortho = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((uniform_term(&ortho) + 4.0).abs() < 1e-14);
        assert_eq!(uniform_term(&Matrix::from_rows(&[vec![1.0, 0.0]])), 0.0);
    }

    #[test]
    fn au_examples() {
        assert_eq!(au_loss(0.0, 0.0), 0.0);
        assert_eq!(au_loss(2.0, -4.0), -2.0);
    }

    #[test]
    fn bpr_examples() {
        assert!((bpr_loss(&[0.3], &[0.3]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bpr_loss(&[1.0], &[0.0]) - 0.313_261_687_518_222_86).abs() < 1e-15);
        let tiny = bpr_loss(&[50.0], &[0.0]);
        assert!(tiny > 0.0 && tiny < 1e-20, "{tiny}");
        assert!(bpr_loss(&[-700.0], &[700.0]).is_finite());
        assert_eq!(bpr_loss(&[], &[]), 0.0);
    }

    #[test]
    fn total_examples() {
        let b = total_loss(0.7, 1.0, -2.0, 3.0, 0.0, 0.0);
        assert_eq!(b.total, 0.7);
        let p = ModelParams::zeros(2, 2, 2, 3);
        assert_eq!(l2_penalty(&p, L2Form::Squared), 0.0);
        assert_eq!(l2_penalty(&p, L2Form::Norm), 0.0);
        let b = total_loss(0.5, 0.25, -1.0, 2.0, 0.5, 0.1);
        assert!((b.total - (0.5 + 0.5 * -0.75 + 0.2)).abs() < 1e-15);
        assert_eq!(b.au, -0.75);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn batch_unique_lists() {
        let b = TrainBatch::new(vec![(3, 1, 2), (0, 2, 1), (3, 4, 1)]);
        assert_eq!(b.unique_users, vec![0, 3]);
        assert_eq!(b.unique_bundles, vec![1, 2, 4]);
    }
}
