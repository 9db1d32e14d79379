//! Per-user binary cross-entropy with an L2 share, and its derivatives.
//!
//! Each user's objective is `BCE_u(θ) + (l2/2)·|θ|²`; training minimizes the
//! mean over users, the Hessian helpers work with the sum.

use super::dataset::Dataset;
use super::model::{dot, sigmoid, CurvatureAcc, SurrogateModel};
use super::RecommenderError;

pub const DEFAULT_HESSIAN_CAP: usize = 512;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `-y ln σ(z) - (1-y) ln(1-σ(z))`
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

fn feature(ds: &Dataset, u: usize, n: usize, buf: &mut [f64]) {
    let uv = &ds.users()[u].vector;
    let cv = ds.news_vector(n);
    for ((b, a), c) in buf.iter_mut().zip(uv).zip(cv) {
        *b = a * c;
    }
}

pub fn user_loss(model: &SurrogateModel, ds: &Dataset, u: usize, l2: f64) -> f64 {
    let mut x = vec![0.0; ds.dim()];
    let mut loss = 0.0;
    for (n, y) in ds.examples(u) {
        feature(ds, u, n, &mut x);
        loss += bce_from_logit(model.logit(&x), y);
    }
    loss + 0.5 * l2 * dot(&model.theta, &model.theta)
}

/// Adds `∇L_u` into `grad` and returns `L_u`.
pub fn user_loss_grad(
    model: &SurrogateModel,
    ds: &Dataset,
    u: usize,
    l2: f64,
    grad: &mut [f64],
) -> f64 {
    let mut x = vec![0.0; ds.dim()];
    let mut loss = 0.0;
    let mut local = vec![0.0; model.param_count()];
    let mut jz = vec![0.0; model.param_count()];
    for (n, y) in ds.examples(u) {
        feature(ds, u, n, &mut x);
        jz.fill(0.0);
        let z = model.logit_grad(&x, 1.0, &mut jz);
        let r = sigmoid(z) - y;
        for (l, j) in local.iter_mut().zip(&jz) {
            *l += r * j;
        }
        loss += bce_from_logit(z, y);
    }
    for ((g, l), t) in grad.iter_mut().zip(&local).zip(&model.theta) {
        *g += l + l2 * t;
    }
    loss + 0.5 * l2 * dot(&model.theta, &model.theta)
}

/// Mean objective over users and its gradient, summed in `order`.
pub fn objective_grad(
    model: &SurrogateModel,
    ds: &Dataset,
    l2: f64,
    order: &[usize],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for &u in order {
        loss += user_loss_grad(model, ds, u, l2, &mut grad);
    }
    let m = ds.user_count().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    (loss / m, grad)
}

pub fn objective(model: &SurrogateModel, ds: &Dataset, l2: f64) -> f64 {
    let m = ds.user_count().max(1) as f64;
    (0..ds.user_count())
        .map(|u| user_loss(model, ds, u, l2))
        .sum::<f64>()
        / m
}

/// Adds `∇²L_u` (row-major) into `h`.
pub fn user_hessian(model: &SurrogateModel, ds: &Dataset, u: usize, l2: f64, h: &mut [f64]) {
    let p = model.param_count();
    let mut x = vec![0.0; ds.dim()];
    for (n, y) in ds.examples(u) {
        feature(ds, u, n, &mut x);
        let s = sigmoid(model.logit(&x));
        model.accumulate_hessian(&x, s * (1.0 - s), s - y, h);
    }
    for i in 0..p {
        h[i * p + i] += l2;
    }
}

/// `Σ_u ∇²L_u + damping·I` as a dense row-major matrix.
pub fn loss_hessian(
    model: &SurrogateModel,
    ds: &Dataset,
    l2: f64,
    damping: f64,
    cap: usize,
) -> Result<Vec<f64>, RecommenderError> {
    let p = model.param_count();
    if p > cap {
        return Err(RecommenderError::HessianTooLarge { params: p, cap });
    }
    // Outer products go through one GEMM per block of examples; the
    // curvature term is accumulated per hidden unit.
    const BLOCK: usize = 512;
    let mut jac = vec![0.0; BLOCK * p];
    let mut h = vec![0.0; p * p];
    let mut acc = CurvatureAcc::new(model);
    let mut x = vec![0.0; ds.dim()];
    let mut rows = 0;
    let flush = |jac: &[f64], rows: usize, h: &mut [f64]| {
        // h += Jᵀ J with J row-major `rows × p`.
        // SAFETY: `jac` holds at least `rows * p` and `h` exactly `p * p`
        // elements, matching the dimensions and strides passed.
        unsafe {
            matrixmultiply::dgemm(
                p,
                rows,
                p,
                1.0,
                jac.as_ptr(),
                1,
                p as isize,
                jac.as_ptr(),
                p as isize,
                1,
                1.0,
                h.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    };
    for u in 0..ds.user_count() {
        for (n, y) in ds.examples(u) {
            feature(ds, u, n, &mut x);
            let row = &mut jac[rows * p..(rows + 1) * p];
            row.fill(0.0);
            let z = model.logit_grad(&x, 1.0, row);
            let s = sigmoid(z);
            let w = (s * (1.0 - s)).sqrt();
            row.iter_mut().for_each(|r| *r *= w);
            rows += 1;
            if rows == BLOCK {
                flush(&jac, rows, &mut h);
                rows = 0;
            }
            acc.add(model, &x, s - y);
        }
    }
    if rows > 0 {
        flush(&jac, rows, &mut h);
    }
    acc.scatter(model, &mut h);
    for r in 0..p {
        for c in r + 1..p {
            let m = 0.5 * (h[r * p + c] + h[c * p + r]);
            h[r * p + c] = m;
            h[c * p + r] = m;
        }
    }
    let users = ds.user_count() as f64;
    for i in 0..p {
        h[i * p + i] += users * l2;
    }
    for i in 0..p {
        h[i * p + i] += damping;
    }
    Ok(h)
}

/// `(Σ_u ∇²L_u) v` without materializing the Hessian.
pub fn loss_hvp(model: &SurrogateModel, ds: &Dataset, l2: f64, v: &[f64]) -> Vec<f64> {
    let p = model.param_count();
    let mut out = vec![0.0; p];
    let mut x = vec![0.0; ds.dim()];
    let mut jz = vec![0.0; p];
    for u in 0..ds.user_count() {
        for (n, y) in ds.examples(u) {
            feature(ds, u, n, &mut x);
            jz.fill(0.0);
            let z = model.logit_grad(&x, 1.0, &mut jz);
            let s = sigmoid(z);
            let jv = dot(&jz, v) * s * (1.0 - s);
            for (o, j) in out.iter_mut().zip(&jz) {
                *o += jv * j;
            }
            model.logit_hvp(&x, v, s - y, &mut out);
        }
    }
    let m = ds.user_count() as f64;
    for (o, vi) in out.iter_mut().zip(v) {
        *o += m * l2 * vi;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClickHistory, Corpus, NewsArticle, UserId};
    use crate::embeddings::EmbeddingTable;
    use crate::recommender::model::ModelKind;

    /// One user, one click, one frozen negative.
    fn tiny() -> (Dataset, EmbeddingTable) {
        let arts = vec![
            NewsArticle {
                id: "A".into(),
                title: vec!["x".into()],
                category: None,
            },
            NewsArticle {
                id: "B".into(),
                title: vec!["y".into()],
                category: None,
            },
            NewsArticle {
                id: "T".into(),
                title: vec!["x".into(), "y".into()],
                category: None,
            },
        ];
        let hist = vec![
            ClickHistory {
                user: UserId("U1".into()),
                clicked: vec!["A".into()],
                impressions: vec![],
            },
            ClickHistory {
                user: UserId("U2".into()),
                clicked: vec!["B".into()],
                impressions: vec![],
            },
        ];
        let c = Corpus::new(arts, hist, vec!["T".into()], "T".into()).unwrap();
        let t = EmbeddingTable::parse("x 1.0 2.0\ny 3.0 -1.0\n", 2).unwrap();
        (Dataset::build(&c, &t, 1, 0), t)
    }

    #[test]
    fn zero_model_loss_is_ln2_per_example() {
        let (ds, _) = tiny();
        let m = SurrogateModel::zeros(ModelKind::MeanpoolLr, 2, 0);
        let l = user_loss(&m, &ds, 0, 0.0);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_bce() {
        let (ds, _) = tiny();
        // U1 clicked A = (1,2); its only possible negative is B = (3,-1).
        assert_eq!(ds.users()[0].negatives.len(), 1);
        let mut m = SurrogateModel::zeros(ModelKind::MeanpoolLr, 2, 0);
        m.theta = vec![0.5, -0.25, 0.1];
        let zp = 0.5 * 1.0 * 1.0 + (-0.25) * 2.0 * 2.0 + 0.1;
        let zn = 0.5 * 1.0 * 3.0 + (-0.25) * 2.0 * -1.0 + 0.1;
        let sp = 1.0 / (1.0 + (-zp as f64).exp());
        let sn = 1.0 / (1.0 + (-zn as f64).exp());
        let expect = -(sp.ln()) - (1.0 - sn).ln();
        assert!((user_loss(&m, &ds, 0, 0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn confident_predictions_drive_loss_to_zero() {
        assert!(bce_from_logit(40.0, 1.0) < 1e-15);
        assert!(bce_from_logit(-40.0, 0.0) < 1e-15);
        assert!(bce_from_logit(40.0, 0.0) > 39.0);
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let (ds, _) = tiny();
        for kind in [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 3 }] {
            let m = SurrogateModel::init(kind, 2, 5);
            let p = m.param_count();
            let h = loss_hessian(&m, &ds, 0.01, 0.0, DEFAULT_HESSIAN_CAP).unwrap();
            let v: Vec<f64> = (0..p).map(|i| 1.0 - 0.3 * i as f64).collect();
            let hv = loss_hvp(&m, &ds, 0.01, &v);
            for r in 0..p {
                let dense: f64 = (0..p).map(|c| h[r * p + c] * v[c]).sum();
                assert!((dense - hv[r]).abs() < 1e-10, "{kind} {r} {dense} {}", hv[r]);
            }
        }
    }

    #[test]
    fn hessian_cap_enforced() {
        let (ds, _) = tiny();
        let m = SurrogateModel::init(ModelKind::TinyMlp { hidden: 3 }, 2, 5);
        assert!(matches!(
            loss_hessian(&m, &ds, 0.0, 1e-3, 4),
            Err(RecommenderError::HessianTooLarge { .. })
        ));
    }
}
