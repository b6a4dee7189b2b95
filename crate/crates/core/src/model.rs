//! Embedding tables, the two graph views, and the popularity-weighted score.
//!
//! The user-bundle view propagates over user-bundle interactions. The
//! user-item view propagates over user-item interactions and represents a
//! bundle as the mean of its items. A bundle with `n_b` training interactions
//! scores `gamma * h_ub + (1 - gamma) * a_ub` with `gamma = tanh(n_b / psi)`,
//! where the temperature `psi` rises from 1 to `epsilon` over training.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bigraph::{propagate_final, GraphError, NormalizedBigraph};
use crate::corpus::{InteractionTable, PopularityIndex};
use crate::matrix::{dot, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"COHEAT1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bundles without affiliated items: {0:?}")]
    DegenerateBundles(Vec<usize>),
    #[error("id out of range: {0}")]
    IdOutOfRange(String),
    #[error("empty candidate set for user {0}")]
    EmptyCandidates(usize),
    #[error("invalid temperature schedule: {0}")]
    InvalidSchedule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// The four base embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub ub_user: Matrix,
    pub ub_bundle: Matrix,
    pub ui_user: Matrix,
    pub ui_item: Matrix,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

pub const TABLE_NAMES: [&str; 4] = ["ub_user", "ub_bundle", "ui_user", "ui_item"];

impl ModelParams {
    /// Gaussian entries with standard deviation `1/sqrt(d)`.
    pub fn init(users: usize, bundles: usize, items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim.max(1) as f64).sqrt();
        Self {
            ub_user: Matrix::gaussian(users, dim, std, &mut rng),
            ub_bundle: Matrix::gaussian(bundles, dim, std, &mut rng),
            ui_user: Matrix::gaussian(users, dim, std, &mut rng),
            ui_item: Matrix::gaussian(items, dim, std, &mut rng),
        }
    }

    pub fn zeros(users: usize, bundles: usize, items: usize, dim: usize) -> Self {
        Self {
            ub_user: Matrix::zeros(users, dim),
            ub_bundle: Matrix::zeros(bundles, dim),
            ui_user: Matrix::zeros(users, dim),
            ui_item: Matrix::zeros(items, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.users(), self.bundles(), self.items(), self.dim())
    }

    pub fn dim(&self) -> usize {
        self.ub_user.cols()
    }

    pub fn users(&self) -> usize {
        self.ub_user.rows()
    }

    pub fn bundles(&self) -> usize {
        self.ub_bundle.rows()
    }

    pub fn items(&self) -> usize {
        self.ui_item.rows()
    }

    pub fn tables(&self) -> [&Matrix; 4] {
        [&self.ub_user, &self.ub_bundle, &self.ui_user, &self.ui_item]
    }

    pub fn tables_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.ub_user,
            &mut self.ub_bundle,
            &mut self.ui_user,
            &mut self.ui_item,
        ]
    }

    /// Total number of scalars across the four tables: `(2U + B + I) d`.
    pub fn num_scalars(&self) -> usize {
        self.tables().iter().map(|t| t.rows() * t.cols()).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.tables().iter().map(|t| t.frobenius_sq()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tables().iter().all(|t| t.is_finite())
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tables_mut().into_iter().zip(other.tables()) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn check_consistent(&self) -> Result<(), ModelError> {
        let d = self.dim();
        let ok = self.ub_bundle.cols() == d
            && self.ui_user.cols() == d
            && self.ui_item.cols() == d
            && self.ui_user.rows() == self.ub_user.rows();
        if ok {
            Ok(())
        } else {
            Err(ModelError::DimensionMismatch(format!(
                "tables {:?} {:?} {:?} {:?}",
                self.ub_user.shape(),
                self.ub_bundle.shape(),
                self.ui_user.shape(),
                self.ui_item.shape()
            )))
        }
    }
}

/// Writes the checkpoint layout: the 7-byte magic `COHEAT1`, then U, B, I, d
/// as little-endian u64, then the four tables (ub_user, ub_bundle, ui_user,
/// ui_item) row-major as little-endian f64.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<(), ModelError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for n in [params.users(), params.bundles(), params.items(), params.dim()] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    for t in params.tables() {
        for v in t.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams, ModelError> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut header = [0usize; 4];
    for h in &mut header {
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        *h = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| ModelError::Checkpoint("header overflow".into()))?;
    }
    let [u, b, i, d] = header;
    let mut read_table = |rows: usize| -> Result<Matrix, ModelError> {
        let mut data = Vec::with_capacity(rows * d);
        let mut buf = [0u8; 8];
        for _ in 0..rows * d {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Matrix::from_vec(rows, d, data))
    };
    let params = ModelParams {
        ub_user: read_table(u)?,
        ub_bundle: read_table(b)?,
        ui_user: read_table(u)?,
        ui_item: read_table(i)?,
    };
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Item lists per bundle; every bundle has at least one item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleItems {
    lists: Vec<Vec<usize>>,
    n_items: usize,
}

impl BundleItems {
    pub fn from_table(bi: &InteractionTable) -> Result<Self, ModelError> {
        let lists = bi.right_lists();
        let degenerate: Vec<usize> = (0..lists.len()).filter(|&b| lists[b].is_empty()).collect();
        if !degenerate.is_empty() {
            return Err(ModelError::DegenerateBundles(degenerate));
        }
        Ok(Self {
            lists,
            n_items: bi.n_right(),
        })
    }

    pub fn items(&self, bundle: usize) -> &[usize] {
        &self.lists[bundle]
    }

    pub fn n_bundles(&self) -> usize {
        self.lists.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }
}

/// Mean of item rows per bundle.
pub fn pool_items(items: &Matrix, bundle_items: &BundleItems) -> Matrix {
    let mut out = Matrix::zeros(bundle_items.n_bundles(), items.cols());
    for b in 0..bundle_items.n_bundles() {
        let members = bundle_items.items(b);
        let w = 1.0 / members.len() as f64;
        let dst = out.row_mut(b);
        for &i in members {
            crate::matrix::axpy(w, items.row(i), dst);
        }
    }
    out
}

/// Adjoint of [`pool_items`]: each item receives `1/|items(b)|` of its bundles' gradients.
pub fn pool_items_adjoint(grad_bundles: &Matrix, bundle_items: &BundleItems) -> Matrix {
    let mut out = Matrix::zeros(bundle_items.n_items(), grad_bundles.cols());
    for b in 0..bundle_items.n_bundles() {
        let members = bundle_items.items(b);
        let w = 1.0 / members.len() as f64;
        for &i in members {
            crate::matrix::axpy(w, grad_bundles.row(b), out.row_mut(i));
        }
    }
    out
}

/// Final representations of both views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbeddings {
    pub h_u: Matrix,
    pub h_b: Matrix,
    pub a_u: Matrix,
    pub a_i: Matrix,
    pub a_b: Matrix,
}

impl ViewEmbeddings {
    pub fn users(&self) -> usize {
        self.h_u.rows()
    }

    pub fn bundles(&self) -> usize {
        self.h_b.rows()
    }
}

pub fn compute_views(
    params: &ModelParams,
    ub_graph: &NormalizedBigraph,
    ui_graph: &NormalizedBigraph,
    bundle_items: &BundleItems,
    layers: usize,
) -> Result<ViewEmbeddings, ModelError> {
    params.check_consistent()?;
    if bundle_items.n_bundles() != params.bundles() || bundle_items.n_items() != params.items() {
        return Err(ModelError::DimensionMismatch(format!(
            "bundle-item table is {}x{}, params have {} bundles and {} items",
            bundle_items.n_bundles(),
            bundle_items.n_items(),
            params.bundles(),
            params.items()
        )));
    }
    let (h_u, h_b) = propagate_final(ub_graph, &params.ub_user, &params.ub_bundle, layers)?;
    let (a_u, a_i) = propagate_final(ui_graph, &params.ui_user, &params.ui_item, layers)?;
    let a_b = pool_items(&a_i, bundle_items);
    Ok(ViewEmbeddings {
        h_u,
        h_b,
        a_u,
        a_i,
        a_b,
    })
}

/// `(h_u · h_b, a_u · a_b)`.
pub fn pair_scores(ve: &ViewEmbeddings, user: usize, bundle: usize) -> Result<(f64, f64), ModelError> {
    if user >= ve.users() || bundle >= ve.bundles() {
        return Err(ModelError::IdOutOfRange(format!(
            "pair ({user}, {bundle}) with {} users and {} bundles",
            ve.users(),
            ve.bundles()
        )));
    }
    Ok((
        dot(ve.h_u.row(user), ve.h_b.row(bundle)),
        dot(ve.a_u.row(user), ve.a_b.row(bundle)),
    ))
}

/// `epsilon^(t/T)`; `t = 0` gives exactly 1 and `t = T` exactly `epsilon`.
pub fn temperature(t: usize, max_epoch: usize, epsilon: f64) -> Result<f64, ModelError> {
    if !(epsilon.is_finite() && epsilon > 1.0) {
        return Err(ModelError::InvalidSchedule(format!(
            "maximum temperature must exceed 1, got {epsilon}"
        )));
    }
    if t > max_epoch {
        return Err(ModelError::InvalidSchedule(format!(
            "epoch {t} beyond horizon {max_epoch}"
        )));
    }
    if t == 0 {
        return Ok(1.0);
    }
    if t == max_epoch {
        return Ok(epsilon);
    }
    Ok(epsilon.powf(t as f64 / max_epoch as f64))
}

/// Weight of the user-bundle view for a bundle with `n_b` training interactions.
#[inline]
pub fn gamma(n_b: u64, psi: f64) -> f64 {
    (n_b as f64 / psi).tanh()
}

/// `gamma * h_ub + (1 - gamma) * a_ub`.
#[inline]
pub fn predict(h_ub: f64, a_ub: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        // Exact even when a_ub is -0.0.
        return a_ub;
    }
    gamma * h_ub + (1.0 - gamma) * a_ub
}

/// Epoch, horizon, maximum temperature and the temperature they imply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub t: usize,
    pub max_epoch: usize,
    pub epsilon: f64,
    pub psi: f64,
}

impl CurriculumState {
    pub fn new(t: usize, max_epoch: usize, epsilon: f64) -> Result<Self, ModelError> {
        Ok(Self {
            t,
            max_epoch,
            epsilon,
            psi: temperature(t, max_epoch, epsilon)?,
        })
    }

    /// State at the end of the schedule, used at inference.
    pub fn finished(max_epoch: usize, epsilon: f64) -> Result<Self, ModelError> {
        Self::new(max_epoch, max_epoch, epsilon)
    }

    pub fn gammas(&self, popularity: &PopularityIndex) -> Vec<f64> {
        gammas_at(popularity, self.psi)
    }
}

pub fn gammas_at(popularity: &PopularityIndex, psi: f64) -> Vec<f64> {
    popularity.counts().iter().map(|&n| gamma(n, psi)).collect()
}

/// Anything that can score a (user, bundle) pair.
pub trait BundleScorer: Sync {
    fn score(&self, user: usize, bundle: usize) -> f64;
    fn n_users(&self) -> usize;
    fn n_bundles(&self) -> usize;
}

/// Coalesced two-view score with per-bundle weights.
#[derive(Debug, Clone)]
pub struct CoalescedScorer<'a> {
    pub views: &'a ViewEmbeddings,
    pub gammas: Vec<f64>,
}

impl<'a> CoalescedScorer<'a> {
    pub fn new(views: &'a ViewEmbeddings, gammas: Vec<f64>) -> Result<Self, ModelError> {
        if gammas.len() != views.bundles() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} weights for {} bundles",
                gammas.len(),
                views.bundles()
            )));
        }
        Ok(Self { views, gammas })
    }
}

impl BundleScorer for CoalescedScorer<'_> {
    fn score(&self, user: usize, bundle: usize) -> f64 {
        let v = self.views;
        let h = dot(v.h_u.row(user), v.h_b.row(bundle));
        let a = dot(v.a_u.row(user), v.a_b.row(bundle));
        predict(h, a, self.gammas[bundle])
    }

    fn n_users(&self) -> usize {
        self.views.users()
    }

    fn n_bundles(&self) -> usize {
        self.views.bundles()
    }
}

/// Orders by descending score, then ascending bundle id.
#[inline]
pub fn ranking_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `k` candidates for `user`, skipping the sorted `masked` ids.
pub fn rank_topk<S: BundleScorer + ?Sized>(
    scorer: &S,
    user: usize,
    candidates: &[usize],
    masked: &[usize],
    k: usize,
) -> Result<Vec<usize>, ModelError> {
    if user >= scorer.n_users() {
        return Err(ModelError::IdOutOfRange(format!("user {user}")));
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .copied()
        .filter(|b| masked.binary_search(b).is_err())
        .map(|b| (scorer.score(user, b), b))
        .collect();
    if scored.is_empty() {
        return Err(ModelError::EmptyCandidates(user));
    }
    let k = k.max(1).min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, ranking_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(ranking_order);
    Ok(scored.into_iter().map(|(_, b)| b).collect())
}
