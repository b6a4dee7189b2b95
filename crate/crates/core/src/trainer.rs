//! Curriculum-heated training: triplet sampling, edge dropout, Adam updates,
//! per-epoch temperature and validation-based model selection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bigraph::{build_normalized, NormalizedBigraph};
use crate::corpus::{popularity_counts, DatasetBundle, InteractionTable, PopularityIndex, ScenarioSplit};
use crate::metrics::{evaluate, EvalReport, EvalTarget, MetricsError};
use crate::model::{
    compute_views, gammas_at, temperature, BundleItems, CoalescedScorer, Gradients, ModelError,
    ModelParams,
};
use crate::objective::{L2Form, LossBreakdown, LossInputs, ObjectiveError, TrainBatch};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: LossBreakdown,
    },
    #[error("non-finite gradient in {table} at optimizer step {step}")]
    NonFiniteGradient { table: &'static str, step: u64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Popularity weights with the rising temperature schedule.
    #[default]
    Full,
    /// Both views weighted 0.5 for every bundle.
    NoPc,
    /// Temperature schedule run backwards, from `epsilon` down to 1.
    ChAnt,
    /// Temperature held at `epsilon`.
    ChFix,
    /// No alignment/uniformity term.
    NoAu,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPc,
        Variant::ChAnt,
        Variant::ChFix,
        Variant::NoAu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPc => "no_pc",
            Variant::ChAnt => "ch_ant",
            Variant::ChFix => "ch_fix",
            Variant::NoAu => "no_au",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                TrainError::InvalidConfig(format!(
                    "unknown variant {s:?} (expected full, no_pc, ch_ant, ch_fix or no_au)"
                ))
            })
    }
}

/// Which view graphs lose edges each epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutGraphs {
    #[default]
    Both,
    UserBundle,
    UserItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub edge_dropout: f64,
    pub dropout_graphs: DropoutGraphs,
    pub seed: u64,
    pub variant: Variant,
    pub l2_form: L2Form,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            learning_rate: 1e-3,
            lambda1: 0.5,
            lambda2: 1e-4,
            epsilon: 1e4,
            epochs: 100,
            batch_size: 2048,
            edge_dropout: 0.2,
            dropout_graphs: DropoutGraphs::Both,
            seed: 0,
            variant: Variant::Full,
            l2_form: L2Form::Squared,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon > 1.0) {
            return bad(format!("epsilon must exceed 1, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return bad(format!("edge_dropout must be in [0, 1), got {}", self.edge_dropout));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must be in [0, 1)".into());
        }
        if !(self.adam_eps.is_finite() && self.adam_eps.is_sign_positive() && self.adam_eps != 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.eval_k == 0 {
            return bad("eval_k must be at least 1".into());
        }
        Ok(())
    }

    /// Weight of the alignment/uniformity term after applying the variant.
    pub fn effective_lambda1(&self) -> f64 {
        match self.variant {
            Variant::NoAu => 0.0,
            _ => self.lambda1,
        }
    }

    /// Temperature used during epoch `t` (0-based).
    pub fn temperature_at(&self, t: usize) -> Result<f64, ModelError> {
        match self.variant {
            Variant::Full | Variant::NoAu | Variant::NoPc => temperature(t, self.epochs, self.epsilon),
            Variant::ChAnt => temperature(self.epochs - t, self.epochs, self.epsilon),
            Variant::ChFix => Ok(self.epsilon),
        }
    }

    /// Temperature at the end of the schedule, used for validation and inference.
    pub fn inference_temperature(&self) -> f64 {
        match self.variant {
            Variant::ChAnt => 1.0,
            _ => self.epsilon,
        }
    }

    pub fn gammas(&self, popularity: &PopularityIndex, psi: f64) -> Vec<f64> {
        match self.variant {
            Variant::NoPc => vec![0.5; popularity.len()],
            _ => gammas_at(popularity, psi),
        }
    }

    pub fn inference_gammas(&self, popularity: &PopularityIndex) -> Vec<f64> {
        self.gammas(popularity, self.inference_temperature())
    }
}

/// Draws `batch_size` positives uniformly from `train`, each with one negative
/// drawn uniformly from `warm_bundles` and resampled while it is a positive of
/// the same user. A positive whose user rejects 100 negatives in a row is dropped.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &InteractionTable,
    warm_bundles: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> TrainBatch {
    const MAX_TRIES: usize = 100;
    let pairs = train.pairs();
    let mut triplets = Vec::with_capacity(batch_size);
    if pairs.is_empty() || warm_bundles.is_empty() {
        return TrainBatch::new(triplets);
    }
    for _ in 0..batch_size {
        let (u, pos) = pairs[rng.random_range(0..pairs.len())];
        let negative = (0..MAX_TRIES)
            .map(|_| *warm_bundles.choose(rng).expect("non-empty"))
            .find(|&b| !train.contains((u, b)));
        match negative {
            Some(neg) => triplets.push((u, pos, neg)),
            None => warn!("user {u} has no sampled negative after {MAX_TRIES} tries; skipped"),
        }
    }
    TrainBatch::new(triplets)
}

/// Keeps each edge independently with probability `1 - rate`.
pub fn edge_dropout<R: Rng + ?Sized>(
    edges: &InteractionTable,
    rate: f64,
    rng: &mut R,
) -> InteractionTable {
    if rate <= 0.0 {
        return edges.clone();
    }
    let kept = edges
        .pairs()
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= rate);
    InteractionTable::new(kept, edges.n_left(), edges.n_right()).expect("subset of a valid table")
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.m.num_scalars() + self.v.num_scalars()
    }
}

/// One bias-corrected Adam update. Rejects the step, leaving everything
/// untouched, if any gradient entry is not finite.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    learning_rate: f64,
) -> Result<(), TrainError> {
    for (name, g) in crate::model::TABLE_NAMES.iter().zip(grads.tables()) {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                table: name,
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let tables = params
        .tables_mut()
        .into_iter()
        .zip(grads.tables())
        .zip(state.m.tables_mut())
        .zip(state.v.tables_mut());
    for (((p, g), m), v) in tables {
        let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scalars held by parameters plus optimizer moments: `3 (2U + B + I) d`.
pub fn memory_footprint(users: usize, bundles: usize, items: usize, dim: usize) -> usize {
    3 * (2 * users + bundles + items) * dim
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub psi: f64,
    pub loss: LossBreakdown,
    pub batches: usize,
    pub val_recall: f64,
    pub val_ndcg: f64,
    /// View weights used for training in this epoch.
    #[serde(skip)]
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,psi,loss_total,loss_bpr,loss_align,loss_uniform,loss_l2,val_recall20,val_ndcg20";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.psi,
                r.loss.total,
                r.loss.bpr,
                r.loss.align,
                r.loss.uniform,
                r.loss.l2,
                r.val_recall,
                r.val_ndcg
            ));
        }
        out
    }
}

/// What the observer sees after each epoch.
pub struct EpochSnapshot<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a ModelParams,
    pub popularity: &'a PopularityIndex,
    pub ub_graph: &'a NormalizedBigraph,
    pub ui_graph: &'a NormalizedBigraph,
    pub bundle_items: &'a BundleItems,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation recall, or the
    /// last epoch when validation never produced a score.
    pub best: ModelParams,
    pub last: ModelParams,
    pub history: TrainHistory,
    pub popularity: PopularityIndex,
}

/// Graphs and lookup tables shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct TrainingGraphs {
    pub popularity: PopularityIndex,
    pub ub_graph: NormalizedBigraph,
    pub ui_graph: NormalizedBigraph,
    pub bundle_items: BundleItems,
}

impl TrainingGraphs {
    pub fn new(data: &DatasetBundle, split: &ScenarioSplit) -> Result<Self, TrainError> {
        if split.train.n_left() != data.u_count || split.train.n_right() != data.b_count {
            return Err(TrainError::Degenerate(
                "split does not match dataset cardinalities".into(),
            ));
        }
        Ok(Self {
            popularity: popularity_counts(&split.train),
            ub_graph: build_normalized(&split.train),
            ui_graph: build_normalized(&data.ui),
            bundle_items: BundleItems::from_table(&data.bi)?,
        })
    }
}

pub fn train(
    data: &DatasetBundle,
    split: &ScenarioSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_observer(data, split, config, |_| {})
}

pub fn train_with_observer<F>(
    data: &DatasetBundle,
    split: &ScenarioSplit,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochSnapshot<'_>),
{
    config.validate()?;
    let graphs = TrainingGraphs::new(data, split)?;
    let params = ModelParams::init(data.u_count, data.b_count, data.i_count, config.dim, config.seed);
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            best: params.clone(),
            last: params,
            history: TrainHistory::default(),
            popularity: graphs.popularity,
        });
    }
    if split.train.is_empty() {
        return Err(TrainError::Degenerate("no training interactions".into()));
    }
    let warm = graphs.popularity.warm_bundles();
    if warm.len() < 2 {
        return Err(TrainError::Degenerate(format!(
            "{} bundles have training interactions; negatives need at least 2",
            warm.len()
        )));
    }

    // Separate stream from initialization so the two never alias.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut params = params;
    let mut opt = OptimizerState::new(&params, config.beta1, config.beta2, config.adam_eps);
    let lambda1 = config.effective_lambda1();
    let inference_gammas = config.inference_gammas(&graphs.popularity);
    let n_batches = split.train.len().div_ceil(config.batch_size);
    let drop_ub = matches!(config.dropout_graphs, DropoutGraphs::Both | DropoutGraphs::UserBundle);
    let drop_ui = matches!(config.dropout_graphs, DropoutGraphs::Both | DropoutGraphs::UserItem);

    let mut history = TrainHistory::default();
    let mut best: Option<((f64, f64), ModelParams)> = None;

    for epoch in 0..config.epochs {
        let psi = config.temperature_at(epoch)?;
        let gammas = config.gammas(&graphs.popularity, psi);
        let ub_graph = if drop_ub && config.edge_dropout > 0.0 {
            build_normalized(&edge_dropout(&split.train, config.edge_dropout, &mut rng))
        } else {
            graphs.ub_graph.clone()
        };
        let ui_graph = if drop_ui && config.edge_dropout > 0.0 {
            build_normalized(&edge_dropout(&data.ui, config.edge_dropout, &mut rng))
        } else {
            graphs.ui_graph.clone()
        };

        let mut sum = LossBreakdown::default();
        let mut done = 0usize;
        for batch_idx in 0..n_batches {
            let batch = sample_batch(&split.train, &warm, config.batch_size, &mut rng);
            if batch.is_empty() {
                warn!("epoch {epoch} batch {batch_idx}: no valid triplets");
                continue;
            }
            let inputs = LossInputs {
                ub_graph: &ub_graph,
                ui_graph: &ui_graph,
                bundle_items: &graphs.bundle_items,
                batch: &batch,
                gammas: &gammas,
                lambda1,
                lambda2: config.lambda2,
                layers: config.layers,
                l2_form: config.l2_form,
            };
            let (loss, grads) = inputs.loss_and_gradients(&params)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            optimizer_step(&mut params, &grads, &mut opt, config.learning_rate)?;
            sum.bpr += loss.bpr;
            sum.align += loss.align;
            sum.uniform += loss.uniform;
            sum.au += loss.au;
            sum.l2 += loss.l2;
            sum.total += loss.total;
            done += 1;
        }
        let mean = if done > 0 {
            let n = done as f64;
            LossBreakdown {
                bpr: sum.bpr / n,
                align: sum.align / n,
                uniform: sum.uniform / n,
                au: sum.au / n,
                l2: sum.l2 / n,
                total: sum.total / n,
            }
        } else {
            sum
        };

        let views = compute_views(
            &params,
            &graphs.ub_graph,
            &graphs.ui_graph,
            &graphs.bundle_items,
            config.layers,
        )?;
        let scorer = CoalescedScorer::new(&views, inference_gammas.clone())?;
        let (val_recall, val_ndcg) = match evaluate(&scorer, split, EvalTarget::Validation, config.eval_k) {
            Ok(r) => (r.recall, r.ndcg),
            Err(MetricsError::NoEvaluableUsers) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e.into()),
        };
        debug!(
            "epoch {epoch}: psi={psi:.4} loss={:.6} val_recall={val_recall:.4}",
            mean.total
        );

        let record = EpochRecord {
            epoch,
            psi,
            loss: mean,
            batches: done,
            val_recall,
            val_ndcg,
            gammas,
        };
        observer(&EpochSnapshot {
            record: &record,
            params: &params,
            popularity: &graphs.popularity,
            ub_graph: &graphs.ub_graph,
            ui_graph: &graphs.ui_graph,
            bundle_items: &graphs.bundle_items,
        });
        let key = (val_recall, val_ndcg);
        if !val_recall.is_nan() && best.as_ref().is_none_or(|(b, _)| improves(key, *b)) {
            best = Some((key, params.clone()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(record);
    }

    let best = best.map_or_else(|| params.clone(), |(_, p)| p);
    Ok(TrainOutcome {
        best,
        last: params,
        history,
        popularity: graphs.popularity,
    })
}

/// Scores `params` on the full graphs at the inference temperature.
pub fn evaluate_params(
    data: &DatasetBundle,
    split: &ScenarioSplit,
    config: &TrainConfig,
    params: &ModelParams,
    target: EvalTarget,
) -> Result<EvalReport, TrainError> {
    let graphs = TrainingGraphs::new(data, split)?;
    let views = compute_views(
        params,
        &graphs.ub_graph,
        &graphs.ui_graph,
        &graphs.bundle_items,
        config.layers,
    )?;
    let scorer = CoalescedScorer::new(&views, config.inference_gammas(&graphs.popularity))?;
    Ok(evaluate(&scorer, split, target, config.eval_k)?)
}

/// Default grid for [`sweep_epsilon`].
pub const EPSILON_GRID: [f64; 6] = [1e1, 1e2, 1e3, 1e4, 1e5, 1e6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Trains once per maximum temperature with everything else fixed and
/// reports test metrics of the selected parameters.
pub fn sweep_epsilon(
    data: &DatasetBundle,
    split: &ScenarioSplit,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::InvalidConfig("empty epsilon grid".into()));
    }
    grid.iter()
        .map(|&epsilon| {
            let cfg = TrainConfig {
                epsilon,
                ..config.clone()
            };
            let out = train(data, split, &cfg)?;
            let r = evaluate_params(data, split, &cfg, &out.best, EvalTarget::Test)?;
            Ok(SweepPoint {
                epsilon,
                recall: r.recall,
                ndcg: r.ndcg,
            })
        })
        .collect()
}

/// Higher recall wins; equal recall falls back to nDCG, and a full tie goes
/// to the newer epoch.
fn improves(candidate: (f64, f64), best: (f64, f64)) -> bool {
    match candidate.0.total_cmp(&best.0) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => candidate.1 >= best.1,
    }
}
