//! First-order estimates of how a title edit moves trained parameters,
//! click scores and the target's MRR, plus the retraining ground truth.
//!
//! With the training objective `(1/|U|) Σ_u L_u(θ)`, editing the data of the
//! users in `D` shifts the minimizer by
//!
//! ```text
//! Δθ ≈ -(|U|·ε) (H + λI)⁻¹ g,    g = Σ_{u∈D} ∇L_u(after) - ∇L_u(before)
//! ```
//!
//! where `H = Σ_u ∇²L_u` and `ε` is the per-user weight (default `1/|U|`).

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use thiserror::Error;

use crate::recommender::{
    loss_hessian, loss_hvp, mrr_from_ranks, rank_of, sigmoid, user_loss_grad, Dataset, Ensemble,
    EnsembleSpec, RecommenderError, SurrogateModel,
};

#[derive(Debug, Error, PartialEq)]
pub enum InfluenceError {
    #[error("conjugate gradient stalled at residual {residual:e} after {iterations} iterations")]
    CgStalled {
        best: Vec<f64>,
        residual: f64,
        iterations: usize,
    },
    #[error("vector has length {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("damped hessian is singular")]
    Singular,
    #[error("invalid influence config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Recommender(#[from] RecommenderError),
}

/// How the data edit enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InfluenceForm {
    /// `Σ ∇L(after) - ∇L(before)` over users whose loss reads the edited news.
    #[default]
    Difference,
    /// `Σ_{u∈U'} ∇L_u(before)`: plain upweighting of the clickers, blind to
    /// what the edit was.
    Upweight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub cg_tolerance: f64,
    pub cg_max_iters: usize,
    pub explicit_hessian_cap: usize,
    /// Per-user weight `ε`; `None` means `1/|U|`.
    pub epsilon: Option<f64>,
    /// Must equal the L2 coefficient the models were trained with.
    pub l2: f64,
    pub form: InfluenceForm,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            damping: 1e-3,
            cg_tolerance: 1e-6,
            cg_max_iters: 500,
            explicit_hessian_cap: 512,
            epsilon: None,
            l2: 1e-3,
            form: InfluenceForm::Difference,
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<(), InfluenceError> {
        if !(self.damping > 0.0) {
            return Err(InfluenceError::InvalidConfig("damping must be > 0".into()));
        }
        if !(self.cg_tolerance > 0.0) {
            return Err(InfluenceError::InvalidConfig("cg_tolerance must be > 0".into()));
        }
        Ok(())
    }

    /// `|U| · ε`, the factor between the sum-form inverse and `Δθ`.
    pub fn step_scale(&self, users: usize) -> f64 {
        match self.epsilon {
            Some(e) => e * users as f64,
            None => 1.0,
        }
    }
}

/// Something that applies a symmetric positive-definite matrix.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

/// `(Σ_u ∇²L_u + λI) v` through analytic Hessian-vector products.
pub struct HessianOperator<'a> {
    pub model: &'a SurrogateModel,
    pub data: &'a Dataset,
    pub l2: f64,
    pub damping: f64,
}

impl LinearOperator for HessianOperator<'_> {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let hv = loss_hvp(self.model, self.data, self.l2, v);
        for ((o, h), x) in out.iter_mut().zip(hv).zip(v) {
            *o = h + self.damping * x;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    /// `|b - Ax|`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vnorm(a: &[f64]) -> f64 {
    vdot(a, a).sqrt()
}

/// Iterations without a new best residual before CG gives up.
const CG_PATIENCE: usize = 50;

/// Solves `A x = b` until `|r| <= tol · |b|` or `max_iters`.
pub fn conjugate_gradient<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<CgSolution, InfluenceError> {
    let n = op.dim();
    if b.len() != n {
        return Err(InfluenceError::DimMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let bnorm = vnorm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgSolution {
            x,
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = vdot(&r, &r);
    let (mut best, mut best_res, mut since_best) = (x.clone(), rr.sqrt(), 0);
    for it in 1..=max_iters {
        op.apply(&p, &mut ap);
        let pap = vdot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(InfluenceError::CgStalled {
                best,
                residual: best_res,
                iterations: it,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = vdot(&r, &r);
        let res = rr_new.sqrt();
        if res < best_res {
            best.copy_from_slice(&x);
            best_res = res;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= CG_PATIENCE {
                return Err(InfluenceError::CgStalled {
                    best,
                    residual: best_res,
                    iterations: it,
                });
            }
        }
        if res <= tol * bnorm {
            return Ok(CgSolution {
                x,
                residual: res,
                iterations: it,
                converged: true,
            });
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok(CgSolution {
        x: best,
        residual: best_res,
        iterations: max_iters,
        converged: false,
    })
}

/// `(H + λI)⁻¹ v` by conjugate gradient on the training data of `model`.
pub fn inverse_hvp(
    model: &SurrogateModel,
    data: &Dataset,
    v: &[f64],
    cfg: &InfluenceConfig,
) -> Result<CgSolution, InfluenceError> {
    cfg.validate()?;
    let op = HessianOperator {
        model,
        data,
        l2: cfg.l2,
        damping: cfg.damping,
    };
    conjugate_gradient(&op, v, cfg.cg_tolerance, cfg.cg_max_iters)
}

/// Users with `news` in their click history, ascending.
pub fn affected_users(data: &Dataset, news: usize) -> Vec<usize> {
    data.clickers(news).to_vec()
}

fn data_grad(model: &SurrogateModel, data: &Dataset, users: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; model.param_count()];
    for &u in users {
        user_loss_grad(model, data, u, 0.0, &mut g);
    }
    g
}

/// Aggregated gradient `g` of an edit from `before` to `after`.
pub fn edit_gradient(
    model: &SurrogateModel,
    before: &Dataset,
    after: &Dataset,
    form: InfluenceForm,
) -> Vec<f64> {
    let changed = before.changed_news(after);
    match form {
        InfluenceForm::Difference => {
            let users: BTreeSet<usize> = changed
                .iter()
                .flat_map(|&n| before.loss_dependents(n))
                .collect();
            let users: Vec<usize> = users.into_iter().collect();
            let ga = data_grad(model, after, &users);
            let gb = data_grad(model, before, &users);
            ga.iter().zip(&gb).map(|(a, b)| a - b).collect()
        }
        InfluenceForm::Upweight => {
            let users: BTreeSet<usize> = changed
                .iter()
                .flat_map(|&n| before.clickers(n).iter().copied())
                .collect();
            let users: Vec<usize> = users.into_iter().collect();
            data_grad(model, before, &users)
        }
    }
}

enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
    Implicit,
}

/// A trained model with its damped Hessian factored once for repeated
/// solves.
struct Solver {
    model: SurrogateModel,
    factor: Factor,
}

impl Solver {
    fn new(model: SurrogateModel, data: &Dataset, cfg: &InfluenceConfig) -> Result<Self, InfluenceError> {
        let p = model.param_count();
        let factor = if p <= cfg.explicit_hessian_cap {
            let h = loss_hessian(&model, data, cfg.l2, cfg.damping, cfg.explicit_hessian_cap)?;
            let mat = DMatrix::from_row_slice(p, p, &h);
            match mat.clone().cholesky() {
                Some(c) => Factor::Cholesky(c),
                None => Factor::Lu(mat.lu()),
            }
        } else {
            Factor::Implicit
        };
        Ok(Solver { model, factor })
    }

    /// Returns `(x, residual)` with `(H + λI) x = v`.
    fn solve(&self, data: &Dataset, v: &[f64], cfg: &InfluenceConfig) -> Result<(Vec<f64>, f64), InfluenceError> {
        let p = v.len();
        match &self.factor {
            Factor::Cholesky(c) => Ok((c.solve(&DVector::from_column_slice(v)).as_slice().to_vec(), 0.0)),
            Factor::Lu(lu) => lu
                .solve(&DVector::from_column_slice(v))
                .map(|x| (x.as_slice().to_vec(), 0.0))
                .ok_or(InfluenceError::Singular),
            Factor::Implicit => {
                let s = inverse_hvp(&self.model, data, v, cfg)?;
                debug_assert_eq!(s.x.len(), p);
                Ok((s.x, s.residual))
            }
        }
    }
}

/// `Δθ` of one model for the edit `before → after`. `model` must be the
/// minimizer on `before`.
pub fn param_influence(
    model: &SurrogateModel,
    before: &Dataset,
    after: &Dataset,
    cfg: &InfluenceConfig,
) -> Result<Vec<f64>, InfluenceError> {
    cfg.validate()?;
    let solver = Solver::new(model.clone(), before, cfg)?;
    let g = edit_gradient(model, before, after, cfg.form);
    let (x, _) = solver.solve(before, &g, cfg)?;
    let k = cfg.step_scale(before.user_count());
    Ok(x.into_iter().map(|v| -k * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    /// `Δθ` per ensemble member.
    pub delta_theta: Vec<Vec<f64>>,
    /// Estimated minus clean ensemble score of the target, per user.
    pub target_deltas: Vec<f64>,
    pub mrr_before: f64,
    pub mrr_after: f64,
    /// Users who clicked any edited news.
    pub affected: Vec<usize>,
    /// Largest solver residual across members; zero for direct solves.
    pub residual: f64,
    pub damping: f64,
}

impl InfluenceReport {
    pub fn mrr_delta(&self) -> f64 {
        self.mrr_after - self.mrr_before
    }
}

/// Factored influence machinery for one ensemble on one clean dataset,
/// reused across many candidate edits. Clones share the factorizations.
#[derive(Clone)]
pub struct InfluenceEngine {
    ensemble: Ensemble,
    clean: Dataset,
    cfg: InfluenceConfig,
    solvers: Arc<Vec<Solver>>,
    clean_target_scores: Vec<f64>,
    clean_mrr: f64,
}

impl InfluenceEngine {
    pub fn new(ensemble: Ensemble, clean: Dataset, cfg: InfluenceConfig) -> Result<Self, InfluenceError> {
        cfg.validate()?;
        let solvers = ensemble
            .models()
            .iter()
            .map(|m| Solver::new(m.clone(), &clean, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let mut engine = InfluenceEngine {
            ensemble,
            clean,
            cfg,
            solvers: Arc::new(solvers),
            clean_target_scores: Vec::new(),
            clean_mrr: 0.0,
        };
        engine.refresh_clean()?;
        Ok(engine)
    }

    /// Same factorizations, different target news. The training objective
    /// does not depend on the target, so nothing is re-solved.
    pub fn with_target(&self, target: usize) -> Result<Self, InfluenceError> {
        let mut engine = self.clone();
        engine.clean = self.clean.with_target(target);
        engine.refresh_clean()?;
        Ok(engine)
    }

    fn refresh_clean(&mut self) -> Result<(), InfluenceError> {
        let engine = &*self;
        let zero: Vec<Vec<f64>> = engine
            .ensemble
            .models()
            .iter()
            .map(|m| vec![0.0; m.param_count()])
            .collect();
        let (ranks, target_scores) = engine.linearized_ranks(&engine.clean, &zero)?;
        self.clean_mrr = mrr_from_ranks(&ranks);
        self.clean_target_scores = target_scores;
        Ok(())
    }

    pub fn clean(&self) -> &Dataset {
        &self.clean
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn config(&self) -> &InfluenceConfig {
        &self.cfg
    }

    pub fn clean_mrr(&self) -> f64 {
        self.clean_mrr
    }

    /// Ranks of the target under `F(u'; θ̂) + ∇θF · Δθ` and the target's
    /// estimated ensemble score, per user of `data`.
    fn linearized_ranks(&self, data: &Dataset, deltas: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>), InfluenceError> {
        let cands = data.candidates();
        let tpos = cands
            .iter()
            .position(|&c| c == data.target())
            .ok_or(RecommenderError::TargetNotInCandidates)?;
        let models = self.ensemble.models();
        let mut member = vec![0.0; models.len()];
        let mut scores = vec![0.0; cands.len()];
        let mut x = vec![0.0; data.dim()];
        let mut ranks = Vec::with_capacity(data.user_count());
        let mut target_scores = Vec::with_capacity(data.user_count());
        for rec in data.users() {
            for (ci, &c) in cands.iter().enumerate() {
                for ((xi, a), b) in x.iter_mut().zip(&rec.vector).zip(data.news_vector(c)) {
                    *xi = a * b;
                }
                for (q, m) in models.iter().enumerate() {
                    let (z, dz) = m.logit_jvp(&x, &deltas[q]);
                    let s = sigmoid(z);
                    member[q] = s + s * (1.0 - s) * dz;
                }
                scores[ci] = self.ensemble.combine(&member);
            }
            ranks.push(rank_of(&scores, cands, tpos));
            target_scores.push(scores[tpos]);
        }
        Ok((ranks, target_scores))
    }

    pub fn param_deltas(&self, after: &Dataset) -> Result<(Vec<Vec<f64>>, f64), InfluenceError> {
        let k = self.cfg.step_scale(self.clean.user_count());
        let mut out = Vec::with_capacity(self.solvers.len());
        let mut residual = 0.0f64;
        for s in self.solvers.iter() {
            let g = edit_gradient(&s.model, &self.clean, after, self.cfg.form);
            if g.iter().all(|v| *v == 0.0) {
                out.push(g);
                continue;
            }
            let (x, r) = s.solve(&self.clean, &g, &self.cfg)?;
            residual = residual.max(r);
            out.push(x.into_iter().map(|v| -k * v).collect());
        }
        Ok((out, residual))
    }

    /// Full report for the edit `clean → after`.
    pub fn estimate(&self, after: &Dataset) -> Result<InfluenceReport, InfluenceError> {
        let (delta_theta, residual) = self.param_deltas(after)?;
        let (ranks, target_scores) = self.linearized_ranks(after, &delta_theta)?;
        let affected: BTreeSet<usize> = self
            .clean
            .changed_news(after)
            .iter()
            .flat_map(|&n| self.clean.clickers(n).iter().copied())
            .collect();
        Ok(InfluenceReport {
            target_deltas: target_scores
                .iter()
                .zip(&self.clean_target_scores)
                .map(|(a, b)| a - b)
                .collect(),
            delta_theta,
            mrr_before: self.clean_mrr,
            mrr_after: mrr_from_ranks(&ranks),
            affected: affected.into_iter().collect(),
            residual,
            damping: self.cfg.damping,
        })
    }

    /// Estimated MRR after the edit, skipping report assembly.
    pub fn estimated_mrr(&self, after: &Dataset) -> Result<f64, InfluenceError> {
        let (delta_theta, _) = self.param_deltas(after)?;
        Ok(mrr_from_ranks(&self.linearized_ranks(after, &delta_theta)?.0))
    }
}

/// One-shot version of [`InfluenceEngine::estimate`].
pub fn prediction_influence(
    ensemble: &Ensemble,
    before: &Dataset,
    after: &Dataset,
    cfg: &InfluenceConfig,
) -> Result<InfluenceReport, InfluenceError> {
    InfluenceEngine::new(ensemble.clone(), before.clone(), cfg.clone())?.estimate(after)
}

/// Retrains every member from its seeded init on `after` and returns the
/// retrained ensemble with its exact MRR.
pub fn retrain_oracle(spec: &EnsembleSpec, after: &Dataset) -> Result<(Ensemble, f64), RecommenderError> {
    let (ens, _) = spec.fit(after)?;
    let mrr = crate::recommender::mrr(&ens, after)?;
    Ok((ens, mrr))
}
