//! Small differentiable click models, their training loop, ensembles and the
//! MRR rank score.

mod checkpoint;
mod dataset;
mod model;
mod objective;
mod rank;
mod train;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, CheckpointError};
pub use dataset::{Dataset, UserRecord};
pub use model::{interaction, sigmoid, ModelKind, SurrogateModel};
pub use objective::{
    bce_from_logit, loss_hessian, loss_hvp, objective, objective_grad, user_hessian, user_loss,
    user_loss_grad, DEFAULT_HESSIAN_CAP,
};
pub use rank::{
    candidate_scores, mrr, mrr_from_ranks, rank_all, rank_candidates, rank_of, target_ranks,
    Ensemble, RankResult, Scorer, UserRanking,
};
pub use train::{train, Adam, EnsembleSpec, TrainConfig, TrainReport};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RecommenderError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty click history")]
    EmptyHistory,
    #[error("explicit hessian of {params} parameters exceeds the cap of {cap}")]
    HessianTooLarge { params: usize, cap: usize },
    #[error("training loss became non-finite")]
    DivergedLoss,
    #[error("target is not among the candidates")]
    TargetNotInCandidates,
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
}

/// Mean of the news embeddings of a click history.
pub fn user_vector(
    table: &crate::embeddings::EmbeddingTable,
    history: &[&crate::corpus::NewsArticle],
) -> Result<Vec<f64>, RecommenderError> {
    if history.is_empty() {
        return Err(RecommenderError::EmptyHistory);
    }
    let mut acc = vec![0.0; table.dim()];
    for a in history {
        for (s, x) in acc.iter_mut().zip(table.news_embedding(a)) {
            *s += x;
        }
    }
    let k = history.len() as f64;
    Ok(acc.into_iter().map(|s| s / k).collect())
}
