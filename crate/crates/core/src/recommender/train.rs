use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::Dataset;
use super::model::{ModelKind, SurrogateModel};
use super::objective::{loss_hessian, objective, objective_grad, DEFAULT_HESSIAN_CAP};
use super::rank::Ensemble;
use super::RecommenderError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Newton refinement steps run after ADAM; 0 disables. Needs an explicit
    /// Hessian, so models above `hessian_cap` skip it.
    pub newton_steps: usize,
    pub grad_tol: f64,
    pub hessian_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 0.001,
            l2: 1e-3,
            newton_steps: 50,
            grad_tol: 1e-10,
            hessian_cap: DEFAULT_HESSIAN_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub newton_steps_taken: usize,
}

/// Standard ADAM moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

const SHUFFLE_TAG: u64 = 0x7261_696e;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Full-batch ADAM from `init` (user summation order reshuffled each epoch
/// from the model seed), then damped Newton refinement to the stationary
/// point. Deterministic in `(init, ds, cfg)`.
/// Polishing stops after this many consecutive steps that each improve the
/// loss by less than `STALL_REL` relative.
const STALL_STEPS: usize = 3;
const STALL_REL: f64 = 1e-6;

pub fn train(
    init: &SurrogateModel,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SurrogateModel, TrainReport), RecommenderError> {
    let mut model = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ SHUFFLE_TAG);
    let mut order: Vec<usize> = (0..ds.user_count()).collect();
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let initial_loss = objective(&model, ds, cfg.l2);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (loss, grad) = objective_grad(&model, ds, cfg.l2, &order);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(RecommenderError::DivergedLoss);
        }
        adam.step(&mut model.theta, &grad);
    }
    let natural: Vec<usize> = (0..ds.user_count()).collect();
    let mut steps = 0;
    let mut stalled = 0;
    if model.param_count() <= cfg.hessian_cap {
        for _ in 0..cfg.newton_steps {
            let (loss, grad) = objective_grad(&model, ds, cfg.l2, &natural);
            if inf_norm(&grad) < cfg.grad_tol {
                break;
            }
            let Some(dir) = newton_direction(&model, ds, cfg.l2, &grad) else {
                break;
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial = model.clone();
                for (t, d) in trial.theta.iter_mut().zip(&dir) {
                    *t += alpha * d;
                }
                let tl = objective(&trial, ds, cfg.l2);
                if tl.is_finite() && tl <= loss {
                    stalled = if loss - tl <= STALL_REL * loss.abs() { stalled + 1 } else { 0 };
                    model = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            steps += 1;
            if stalled >= STALL_STEPS {
                break;
            }
        }
    }
    let (final_loss, grad) = objective_grad(&model, ds, cfg.l2, &natural);
    if !final_loss.is_finite() {
        return Err(RecommenderError::DivergedLoss);
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            final_grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            newton_steps_taken: steps,
        },
    ))
}

/// Solves `(H_mean + μI) d = -g` with the smallest `μ` from a doubling
/// schedule that makes the system positive definite.
fn newton_direction(model: &SurrogateModel, ds: &Dataset, l2: f64, grad: &[f64]) -> Option<Vec<f64>> {
    let p = model.param_count();
    let h = loss_hessian(model, ds, l2, 0.0, usize::MAX).ok()?;
    let m = ds.user_count().max(1) as f64;
    let mat = DMatrix::from_row_slice(p, p, &h) / m;
    let rhs = DVector::from_iterator(p, grad.iter().map(|g| -g));
    let scale = (0..p).map(|i| mat[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-12);
    let mut mu = 0.0;
    for _ in 0..60 {
        let mut damped = mat.clone();
        for i in 0..p {
            damped[(i, i)] += mu;
        }
        if let Some(chol) = damped.cholesky() {
            return Some(chol.solve(&rhs).iter().copied().collect());
        }
        mu = if mu == 0.0 { 1e-8 * scale } else { mu * 4.0 };
    }
    None
}

/// Recipe for an ensemble: member kinds with their init seeds, weights and
/// the shared training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<(ModelKind, u64)>,
    pub weights: Vec<f64>,
    pub train: TrainConfig,
}

impl EnsembleSpec {
    /// Trains every member from its seeded init on `ds`. Members train
    /// concurrently; the result does not depend on scheduling.
    pub fn fit(&self, ds: &Dataset) -> Result<(Ensemble, Vec<TrainReport>), RecommenderError> {
        let fitted = self
            .members
            .par_iter()
            .map(|&(kind, seed)| train(&SurrogateModel::init(kind, ds.dim(), seed), ds, &self.train))
            .collect::<Result<Vec<_>, _>>()?;
        let (models, reports): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
        Ok((Ensemble::new(models, self.weights.clone())?, reports))
    }
}
