use super::dataset::Dataset;
use super::model::{interaction, sigmoid, SurrogateModel};
use super::RecommenderError;

/// Anything that maps a (user vector, candidate vector) pair to a score.
pub trait Scorer {
    fn score(&self, u: &[f64], c: &[f64]) -> f64;
}

impl Scorer for SurrogateModel {
    fn score(&self, u: &[f64], c: &[f64]) -> f64 {
        sigmoid(self.logit(&interaction(u, c)))
    }
}

/// Weighted offline substitute: `F(o) = (1/Q) Σ w_q F_q(o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    models: Vec<SurrogateModel>,
    weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(models: Vec<SurrogateModel>, weights: Vec<f64>) -> Result<Self, RecommenderError> {
        if models.len() != weights.len() || models.is_empty() {
            return Err(RecommenderError::InvalidEnsemble(
                "models and weights must be non-empty and of equal length".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(RecommenderError::InvalidEnsemble(
                "weights must be nonnegative".into(),
            ));
        }
        let dim = models[0].dim;
        if let Some(m) = models.iter().find(|m| m.dim != dim) {
            return Err(RecommenderError::DimMismatch {
                expected: dim,
                got: m.dim,
            });
        }
        Ok(Ensemble { models, weights })
    }

    pub fn models(&self) -> &[SurrogateModel] {
        &self.models
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim
    }

    /// Combines per-member scores with the ensemble formula.
    pub fn combine(&self, member_scores: &[f64]) -> f64 {
        let q = self.models.len() as f64;
        member_scores
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * s)
            .sum::<f64>()
            / q
    }

    pub fn ensemble_score(&self, u: &[f64], c: &[f64]) -> Result<f64, RecommenderError> {
        let scores = self
            .models
            .iter()
            .map(|m| m.predict(u, c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.combine(&scores))
    }
}

impl Scorer for Ensemble {
    fn score(&self, u: &[f64], c: &[f64]) -> f64 {
        let scores: Vec<f64> = self.models.iter().map(|m| m.score(u, c)).collect();
        self.combine(&scores)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRanking {
    /// 1-based rank of the target.
    pub target_rank: usize,
    /// Candidate news indices, best first.
    pub ordering: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub users: Vec<UserRanking>,
}

/// Rank of `target_pos` among `scores`: descending score, ties to the
/// smaller candidate index.
pub fn rank_of(scores: &[f64], ids: &[usize], target_pos: usize) -> usize {
    let ts = scores[target_pos];
    let tid = ids[target_pos];
    1 + scores
        .iter()
        .zip(ids)
        .filter(|(s, id)| **s > ts || (**s == ts && **id < tid))
        .count()
}

pub fn mrr_from_ranks(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&k| 1.0 / k as f64).sum::<f64>() / ranks.len() as f64
}

fn target_position(ds: &Dataset) -> Result<usize, RecommenderError> {
    ds.candidates()
        .iter()
        .position(|&c| c == ds.target())
        .ok_or(RecommenderError::TargetNotInCandidates)
}

pub fn candidate_scores<S: Scorer + ?Sized>(scorer: &S, ds: &Dataset, u: usize) -> Vec<f64> {
    let uv = &ds.users()[u].vector;
    ds.candidates()
        .iter()
        .map(|&c| scorer.score(uv, ds.news_vector(c)))
        .collect()
}

pub fn rank_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    ds: &Dataset,
    u: usize,
) -> Result<UserRanking, RecommenderError> {
    let tpos = target_position(ds)?;
    let scores = candidate_scores(scorer, ds, u);
    let ids = ds.candidates();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    Ok(UserRanking {
        target_rank: rank_of(&scores, ids, tpos),
        ordering: order.into_iter().map(|i| ids[i]).collect(),
    })
}

pub fn rank_all<S: Scorer + ?Sized>(scorer: &S, ds: &Dataset) -> Result<RankResult, RecommenderError> {
    let users = (0..ds.user_count())
        .map(|u| rank_candidates(scorer, ds, u))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RankResult { users })
}

/// Target ranks for every user.
pub fn target_ranks<S: Scorer + ?Sized>(scorer: &S, ds: &Dataset) -> Result<Vec<usize>, RecommenderError> {
    let tpos = target_position(ds)?;
    Ok((0..ds.user_count())
        .map(|u| rank_of(&candidate_scores(scorer, ds, u), ds.candidates(), tpos))
        .collect())
}

/// `(1/M) Σ 1/k_m` over all users.
pub fn mrr<S: Scorer + ?Sized>(scorer: &S, ds: &Dataset) -> Result<f64, RecommenderError> {
    Ok(mrr_from_ranks(&target_ranks(scorer, ds)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::model::ModelKind;

    #[test]
    fn mrr_formula() {
        let v = mrr_from_ranks(&[1, 2, 4]);
        assert!((v - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(mrr_from_ranks(&[1, 1, 1]), 1.0);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(rank_of(&scores, &[3, 1, 2], 0), 3);
        assert_eq!(rank_of(&scores, &[3, 1, 2], 1), 1);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], &[0, 1, 2], 0), 3);
    }

    #[test]
    fn ensemble_formula() {
        let m = SurrogateModel::zeros(ModelKind::MeanpoolLr, 2, 0);
        let one = Ensemble::new(vec![m.clone()], vec![1.0]).unwrap();
        assert_eq!(one.combine(&[0.7]), 0.7);
        let two = Ensemble::new(vec![m.clone(), m.clone()], vec![0.5, 0.5]).unwrap();
        assert!((two.combine(&[0.4, 0.8]) - 0.3).abs() < 1e-15);
        let zero = Ensemble::new(vec![m.clone(), m.clone()], vec![0.0, 0.0]).unwrap();
        assert_eq!(zero.ensemble_score(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(Ensemble::new(vec![m.clone()], vec![]).is_err());
        assert!(Ensemble::new(vec![m.clone()], vec![-1.0]).is_err());
        let other = SurrogateModel::zeros(ModelKind::MeanpoolLr, 3, 0);
        assert!(Ensemble::new(vec![m, other], vec![0.5, 0.5]).is_err());
    }
}
