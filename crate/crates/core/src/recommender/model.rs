use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RecommenderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `sigmoid(w·(u⊙c) + b)`
    MeanpoolLr,
    /// `sigmoid(v·tanh(W(u⊙c) + a) + b)`
    TinyMlp { hidden: usize },
}

impl ModelKind {
    pub fn param_count(self, dim: usize) -> usize {
        match self {
            ModelKind::MeanpoolLr => dim + 1,
            ModelKind::TinyMlp { hidden } => dim * hidden + 2 * hidden + 1,
        }
    }

    pub fn hidden(self) -> usize {
        match self {
            ModelKind::MeanpoolLr => 0,
            ModelKind::TinyMlp { hidden } => hidden,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MeanpoolLr => "meanpool_lr",
            ModelKind::TinyMlp { .. } => "tiny_mlp",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::MeanpoolLr => f.write_str("meanpool_lr"),
            ModelKind::TinyMlp { hidden } => write!(f, "tiny_mlp:{hidden}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    /// `meanpool_lr` or `tiny_mlp:<hidden>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "meanpool_lr" {
            return Ok(ModelKind::MeanpoolLr);
        }
        if let Some(h) = s.strip_prefix("tiny_mlp:") {
            let hidden: usize = h.parse().map_err(|_| format!("bad hidden width {h:?}"))?;
            if hidden == 0 {
                return Err("hidden width must be >= 1".into());
            }
            return Ok(ModelKind::TinyMlp { hidden });
        }
        Err(format!("unknown model kind {s:?}"))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise product of user and candidate vectors.
pub fn interaction(u: &[f64], c: &[f64]) -> Vec<f64> {
    u.iter().zip(c).map(|(a, b)| a * b).collect()
}

/// A click-probability scorer with a flat parameter vector.
///
/// Layout for `TinyMlp`: `W` row-major (`hidden × dim`), then `a`, `v`, `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub seed: u64,
    pub theta: Vec<f64>,
}

impl SurrogateModel {
    pub fn zeros(kind: ModelKind, dim: usize, seed: u64) -> Self {
        SurrogateModel {
            kind,
            dim,
            seed,
            theta: vec![0.0; kind.param_count(dim)],
        }
    }

    /// Seeded initialization; the MLP gets symmetric-breaking random weights.
    pub fn init(kind: ModelKind, dim: usize, seed: u64) -> Self {
        let mut m = Self::zeros(kind, dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0001);
        match kind {
            ModelKind::MeanpoolLr => {
                for w in &mut m.theta[..dim] {
                    *w = rng.random_range(-0.1..0.1);
                }
            }
            ModelKind::TinyMlp { hidden } => {
                let scale = 1.0 / (dim as f64).sqrt();
                let (wa, rest) = m.theta.split_at_mut(hidden * dim);
                for w in wa {
                    *w = rng.random_range(-scale..scale);
                }
                for a in &mut rest[..hidden] {
                    *a = rng.random_range(-0.5..0.5);
                }
                for v in &mut rest[hidden..2 * hidden] {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn check_dims(&self, x: &[f64]) -> Result<(), RecommenderError> {
        if x.len() != self.dim {
            return Err(RecommenderError::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, u: &[f64], c: &[f64]) -> Result<f64, RecommenderError> {
        self.check_dims(u)?;
        self.check_dims(c)?;
        Ok(sigmoid(self.logit(&interaction(u, c))))
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        match self.kind {
            ModelKind::MeanpoolLr => dot(&self.theta[..d], x) + self.theta[d],
            ModelKind::TinyMlp { hidden } => {
                let (w, a, v, b) = self.mlp_parts(hidden);
                let mut z = b;
                for j in 0..hidden {
                    let s = dot(&w[j * d..(j + 1) * d], x) + a[j];
                    z += v[j] * s.tanh();
                }
                z
            }
        }
    }

    fn mlp_parts(&self, hidden: usize) -> (&[f64], &[f64], &[f64], f64) {
        let d = self.dim;
        let (w, rest) = self.theta.split_at(hidden * d);
        (w, &rest[..hidden], &rest[hidden..2 * hidden], rest[2 * hidden])
    }

    /// Adds `scale · ∂z/∂θ` into `grad` and returns the logit `z`.
    pub fn logit_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let d = self.dim;
        match self.kind {
            ModelKind::MeanpoolLr => {
                for (g, xi) in grad[..d].iter_mut().zip(x) {
                    *g += scale * xi;
                }
                grad[d] += scale;
                dot(&self.theta[..d], x) + self.theta[d]
            }
            ModelKind::TinyMlp { hidden } => {
                let (w, a, v, b) = self.mlp_parts(hidden);
                let mut z = b;
                let (gw, grest) = grad.split_at_mut(hidden * d);
                for j in 0..hidden {
                    let t = (dot(&w[j * d..(j + 1) * d], x) + a[j]).tanh();
                    z += v[j] * t;
                    let back = scale * v[j] * (1.0 - t * t);
                    for (g, xi) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += back * xi;
                    }
                    grest[j] += back;
                    grest[hidden + j] += scale * t;
                }
                grest[2 * hidden] += scale;
                z
            }
        }
    }

    /// Logit and its directional derivative along `dir`.
    pub fn logit_jvp(&self, x: &[f64], dir: &[f64]) -> (f64, f64) {
        let d = self.dim;
        match self.kind {
            ModelKind::MeanpoolLr => {
                let z = dot(&self.theta[..d], x) + self.theta[d];
                (z, dot(&dir[..d], x) + dir[d])
            }
            ModelKind::TinyMlp { hidden } => {
                let (w, a, v, b) = self.mlp_parts(hidden);
                let dw = &dir[..hidden * d];
                let da = &dir[hidden * d..hidden * d + hidden];
                let dv = &dir[hidden * d + hidden..hidden * d + 2 * hidden];
                let db = dir[hidden * d + 2 * hidden];
                let (mut z, mut dz) = (b, db);
                for j in 0..hidden {
                    let t = (dot(&w[j * d..(j + 1) * d], x) + a[j]).tanh();
                    let ds = dot(&dw[j * d..(j + 1) * d], x) + da[j];
                    z += v[j] * t;
                    dz += dv[j] * t + v[j] * (1.0 - t * t) * ds;
                }
                (z, dz)
            }
        }
    }

    /// Adds `scale · (∇²z) dir` into `out`. Zero for the linear model.
    pub fn logit_hvp(&self, x: &[f64], dir: &[f64], scale: f64, out: &mut [f64]) {
        let ModelKind::TinyMlp { hidden } = self.kind else {
            return;
        };
        let d = self.dim;
        let (w, a, v, _) = self.mlp_parts(hidden);
        let off_a = hidden * d;
        let off_v = off_a + hidden;
        for j in 0..hidden {
            let t = (dot(&w[j * d..(j + 1) * d], x) + a[j]).tanh();
            let t1 = 1.0 - t * t;
            let t2 = -2.0 * t * t1;
            // direction restricted to (W_j, a_j) dotted with [x; 1]
            let ds = dot(&dir[j * d..(j + 1) * d], x) + dir[off_a + j];
            let dvj = dir[off_v + j];
            out[off_v + j] += scale * t1 * ds;
            let coef = scale * (t1 * dvj + v[j] * t2 * ds);
            for (o, xi) in out[j * d..(j + 1) * d].iter_mut().zip(x) {
                *o += coef * xi;
            }
            out[off_a + j] += coef;
        }
    }

    /// Adds `jj · J Jᵀ + curv · ∇²z` into the row-major `p × p` matrix `h`,
    /// where `J = ∂z/∂θ`.
    pub fn accumulate_hessian(&self, x: &[f64], jj: f64, curv: f64, h: &mut [f64]) {
        let p = self.param_count();
        if jj != 0.0 {
            let mut j = vec![0.0; p];
            self.logit_grad(x, 1.0, &mut j);
            for r in 0..p {
                let jr = j[r];
                if jr == 0.0 {
                    continue;
                }
                let row = &mut h[r * p..(r + 1) * p];
                for (hc, jc) in row.iter_mut().zip(&j) {
                    *hc += jj * (jr * jc);
                }
            }
        }
        if curv != 0.0 {
            let mut acc = CurvatureAcc::new(self);
            acc.add(self, x, curv);
            acc.scatter(self, h);
        }
    }
}

/// `Σ curv · ∇²z` of a tiny MLP kept per hidden unit: a `(d+1)²` block over
/// that unit's input weights and bias, and its cross terms with `v_j`.
pub(crate) struct CurvatureAcc {
    blocks: Vec<f64>,
    cross: Vec<f64>,
    xt: Vec<f64>,
}

impl CurvatureAcc {
    pub(crate) fn new(m: &SurrogateModel) -> Self {
        let hidden = m.kind.hidden();
        let e = m.dim + 1;
        CurvatureAcc {
            blocks: vec![0.0; hidden * e * e],
            cross: vec![0.0; hidden * e],
            xt: vec![1.0; e],
        }
    }

    pub(crate) fn add(&mut self, m: &SurrogateModel, x: &[f64], curv: f64) {
        let ModelKind::TinyMlp { hidden } = m.kind else {
            return;
        };
        if curv == 0.0 {
            return;
        }
        let d = m.dim;
        let e = d + 1;
        self.xt[..d].copy_from_slice(x);
        let (w, a, v, _) = m.mlp_parts(hidden);
        for jh in 0..hidden {
            let t = (dot(&w[jh * d..(jh + 1) * d], x) + a[jh]).tanh();
            let t1 = 1.0 - t * t;
            let c1 = curv * t1;
            let c2 = curv * v[jh] * (-2.0 * t * t1);
            for (c, xk) in self.cross[jh * e..(jh + 1) * e].iter_mut().zip(&self.xt) {
                *c += c1 * xk;
            }
            let block = &mut self.blocks[jh * e * e..(jh + 1) * e * e];
            for (row, xk) in block.chunks_exact_mut(e).zip(&self.xt) {
                for (b, xl) in row.iter_mut().zip(&self.xt) {
                    *b += c2 * (xk * xl);
                }
            }
        }
    }

    pub(crate) fn scatter(&self, m: &SurrogateModel, h: &mut [f64]) {
        let ModelKind::TinyMlp { hidden } = m.kind else {
            return;
        };
        let p = m.param_count();
        let d = m.dim;
        let e = d + 1;
        let off_a = hidden * d;
        let off_v = off_a + hidden;
        let idx = |jh: usize, k: usize| if k < d { jh * d + k } else { off_a + jh };
        for jh in 0..hidden {
            let iv = off_v + jh;
            for k in 0..e {
                let ik = idx(jh, k);
                let c = self.cross[jh * e + k];
                h[ik * p + iv] += c;
                h[iv * p + ik] += c;
                for l in 0..e {
                    h[ik * p + idx(jh, l)] += self.blocks[(jh * e + k) * e + l];
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(m: &SurrogateModel, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..m.param_count())
            .map(|i| {
                let mut a = m.clone();
                let mut b = m.clone();
                a.theta[i] += h;
                b.theta[i] -= h;
                (a.logit(x) - b.logit(x)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn predict_closed_forms() {
        let z = SurrogateModel::zeros(ModelKind::MeanpoolLr, 2, 0);
        assert_eq!(z.predict(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.5);
        let mlp = SurrogateModel::zeros(ModelKind::TinyMlp { hidden: 3 }, 2, 0);
        assert_eq!(mlp.predict(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.5);
        let mut lr = z.clone();
        lr.theta = vec![1.0, 0.0, 0.0];
        let p = lr.predict(&[1.0, 1.0], &[2.0, 5.0]).unwrap();
        assert!((p - 0.880_797_077_977_882_3).abs() < 1e-15);
        let mut hi = lr.clone();
        hi.theta[2] = 0.5;
        assert!(hi.predict(&[1.0, 1.0], &[2.0, 5.0]).unwrap() > p);
        assert!(matches!(
            lr.predict(&[1.0], &[1.0, 2.0]),
            Err(RecommenderError::DimMismatch { .. })
        ));
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelKind::MeanpoolLr.param_count(16), 17);
        assert_eq!(ModelKind::TinyMlp { hidden: 8 }.param_count(16), 145);
        assert_eq!("tiny_mlp:8".parse::<ModelKind>().unwrap(), ModelKind::TinyMlp { hidden: 8 });
        assert!("tiny_mlp:0".parse::<ModelKind>().is_err());
    }

    #[test]
    fn logit_derivatives_match_finite_differences() {
        let x = [0.3, -0.7, 0.2];
        for kind in [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 4 }] {
            let m = SurrogateModel::init(kind, 3, 11);
            let mut g = vec![0.0; m.param_count()];
            m.logit_grad(&x, 1.0, &mut g);
            for (a, b) in g.iter().zip(fd_grad(&m, &x)) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
            let dir: Vec<f64> = (0..m.param_count()).map(|i| (i as f64 * 0.37).sin()).collect();
            let (_, dz) = m.logit_jvp(&x, &dir);
            let expect: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((dz - expect).abs() < 1e-12);

            // Hessian of z: explicit matrix vs hvp vs finite differences of the gradient.
            let p = m.param_count();
            let mut h = vec![0.0; p * p];
            m.accumulate_hessian(&x, 0.0, 1.0, &mut h);
            let mut hv = vec![0.0; p];
            m.logit_hvp(&x, &dir, 1.0, &mut hv);
            let eps = 1e-6;
            let mut plus = m.clone();
            let mut minus = m.clone();
            for i in 0..p {
                plus.theta[i] += eps * dir[i];
                minus.theta[i] -= eps * dir[i];
            }
            let mut gp = vec![0.0; p];
            let mut gm = vec![0.0; p];
            plus.logit_grad(&x, 1.0, &mut gp);
            minus.logit_grad(&x, 1.0, &mut gm);
            for r in 0..p {
                let hr: f64 = (0..p).map(|c| h[r * p + c] * dir[c]).sum();
                let fd = (gp[r] - gm[r]) / (2.0 * eps);
                assert!((hr - hv[r]).abs() < 1e-12);
                assert!((hr - fd).abs() < 1e-7, "{hr} vs {fd}");
                for c in 0..p {
                    assert_eq!(h[r * p + c], h[c * p + r]);
                }
            }
        }
    }
}
