use coheat::corpus::CorpusError;
use coheat::metrics::MetricsError;
use coheat::model::ModelError;
use coheat::objective::ObjectiveError;
use coheat::trainer::TrainError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Lib(#[from] coheat::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Lib(e) => lib_code(e),
        }
    }
}

macro_rules! impl_from_lib {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Lib(e.into())
            }
        }
    )*};
}

impl_from_lib!(CorpusError, ModelError, ObjectiveError, TrainError, MetricsError);

fn lib_code(e: &coheat::Error) -> u8 {
    match e {
        coheat::Error::Corpus(e) => corpus_code(e),
        coheat::Error::Graph(_) => EXIT_DATA,
        coheat::Error::Model(e) => model_code(e),
        coheat::Error::Objective(e) => objective_code(e),
        coheat::Error::Train(e) => train_code(e),
        coheat::Error::Metrics(e) => metrics_code(e),
    }
}

fn corpus_code(e: &CorpusError) -> u8 {
    match e {
        CorpusError::InvalidRatios(_) | CorpusError::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::InvalidSchedule(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn objective_code(e: &ObjectiveError) -> u8 {
    match e {
        ObjectiveError::ZeroNorm { .. } | ObjectiveError::CollapsedEmbedding { .. } => EXIT_NUMERICAL,
        ObjectiveError::Model(e) => model_code(e),
        ObjectiveError::InvalidInput(_) => EXIT_USAGE,
    }
}

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::NoEvaluableUsers => EXIT_DATA,
        MetricsError::Model(e) => model_code(e),
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::InvalidConfig(_) => EXIT_USAGE,
        TrainError::Degenerate(_) => EXIT_DATA,
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => EXIT_NUMERICAL,
        TrainError::Objective(e) => objective_code(e),
        TrainError::Model(e) => model_code(e),
        TrainError::Metrics(e) => metrics_code(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_by_failure_kind() {
        assert_eq!(CliError::from(TrainError::InvalidConfig("x".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::from(CorpusError::InsufficientData("x".into())).exit_code(), EXIT_DATA);
        let collapsed = ObjectiveError::CollapsedEmbedding {
            view: "item",
            entity: "user",
            id: 0,
        };
        assert_eq!(CliError::from(TrainError::Objective(collapsed)).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CliError::from(MetricsError::NoEvaluableUsers).exit_code(), EXIT_DATA);
    }
}
