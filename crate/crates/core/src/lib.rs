//! Cold-start bundle recommendation over two graph views.
//!
//! A user-bundle graph and a user-item graph are each propagated with a
//! linear, symmetric-normalized convolution. Bundles are represented in the
//! user-item view by the mean of their items, which gives bundles without any
//! interactions a usable embedding. The two view scores are blended per
//! bundle by `tanh(n_b / psi)`, where `n_b` counts the bundle's training
//! interactions and the temperature `psi` rises over training so the model
//! leans more on the item view as it goes. An alignment/uniformity term ties
//! the views together.
//!
//! Modules, bottom-up:
//! - [`corpus`]: interaction tables, scenario splits, synthetic data.
//! - [`bigraph`]: normalized bipartite graphs, propagation and its adjoint.
//! - [`model`]: embedding tables, views, blended score, ranking, checkpoints.
//! - [`objective`]: losses, analytic gradients, finite-difference checks.
//! - [`trainer`]: the training loop and ablation variants.
//! - [`metrics`]: Recall@k, nDCG@k and the evaluation protocol.

pub mod bigraph;
pub mod corpus;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod trainer;

pub use bigraph::{build_normalized, NormalizedBigraph};
pub use corpus::{DatasetBundle, InteractionTable, PopularityIndex, Scenario, ScenarioSplit};
pub use matrix::Matrix;
pub use metrics::{evaluate, EvalReport, EvalTarget};
pub use model::{compute_views, ModelParams, ViewEmbeddings};
pub use objective::{LossBreakdown, LossInputs, TrainBatch};
pub use trainer::{train, TrainConfig, TrainHistory, TrainOutcome, Variant};

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Graph(#[from] bigraph::GraphError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
