use thiserror::Error;

/// Errors raised anywhere in the scoring, training and search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate scale in {context}: {value:e} is below tolerance")]
    DegenerateScale { context: String, value: f64 },

    #[error("parse error at token `{token}`: {detail}")]
    Parse { token: String, detail: String },

    #[error("invalid graph at node `{node}`: {detail}")]
    Graph { node: String, detail: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("degenerate batch: all accuracies are equal")]
    DegenerateBatch,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("degenerate scorer {index}: score standard deviation is zero")]
    DegenerateScorer { index: usize },

    #[error("no feasible individual in final population (best infeasible has {params} params, score {score})")]
    NoFeasible {
        genome: Box<crate::arch::genome::ResNetGenome>,
        params: u64,
        score: f64,
    },

    #[error("{0} numerical self-checks failed")]
    CheckFailed(usize),

    #[error("graph {index} failed: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) => ErrorClass::Usage,
            Error::DegenerateScale { .. }
            | Error::NonFiniteGradient(_)
            | Error::DegenerateBatch
            | Error::UndefinedCorrelation(_)
            | Error::DegenerateScorer { .. }
            | Error::NoFeasible { .. }
            | Error::CheckFailed(_) => ErrorClass::Numerical,
            Error::AtIndex { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn graph(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Graph {
            node: node.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
