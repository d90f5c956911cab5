use thiserror::Error;

use crate::topology::{LinkId, NodeId, SourceId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("unknown link {0}")]
    UnknownLink(LinkId),

    #[error("unknown source {0}")]
    UnknownSource(SourceId),

    #[error("node {node} is not in the tree of source {source_id}")]
    NotInTree { source_id: SourceId, node: NodeId },

    #[error("topology is invalid: {0}")]
    InvalidTopology(String),

    #[error("value outside the likelihood domain: {0}")]
    Domain(String),

    /// The child pass ratios sum to at most one, so the likelihood
    /// polynomial has no root strictly inside the feasible interval.
    #[error("no interior root (sum of child ratios = {sum_c})")]
    NoInteriorRoot { sum_c: f64 },

    #[error("data consistency: {0}")]
    Consistency(String),

    #[error("maximizer did not converge after {iterations} iterations (best log-likelihood {best_loglik}, last improvement {last_improvement:e})")]
    NonConvergence {
        iterations: usize,
        best_loglik: f64,
        last_improvement: f64,
        best_theta: Vec<f64>,
    },

    #[error("trace format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
