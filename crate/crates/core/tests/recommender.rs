use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poisonbench::corpus::{synth_corpus, ClickHistory, Corpus, NewsArticle, NewsId, SynthSpec, UserId};
use poisonbench::embeddings::EmbeddingTable;
use poisonbench::influence::{conjugate_gradient, HessianOperator};
use poisonbench::recommender::*;

fn small_spec() -> SynthSpec {
    SynthSpec {
        users: 25,
        news: 40,
        candidates: 6,
        title_len: 5,
        vocab_size: 60,
        topics: 3,
        min_history: 3,
        max_history: 6,
        ..SynthSpec::default()
    }
}

fn small_data(dim: usize) -> Dataset {
    let corpus = synth_corpus(&small_spec()).unwrap();
    Dataset::build(&corpus, &EmbeddingTable::hashed(dim, 1).unwrap(), 3, 2)
}

fn random_model(kind: ModelKind, dim: usize, rng: &mut ChaCha8Rng) -> SurrogateModel {
    let mut m = SurrogateModel::zeros(kind, dim, 0);
    for t in &mut m.theta {
        *t = rng.random_range(-1.0..1.0);
    }
    m
}

#[test]
fn objective_gradient_matches_central_differences() {
    let ds = small_data(6);
    let order: Vec<usize> = (0..ds.user_count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 4 }] {
        for _ in 0..10 {
            let m = random_model(kind, 6, &mut rng);
            let (_, g) = objective_grad(&m, &ds, 1e-2, &order);
            for i in 0..m.param_count() {
                let h = 1e-5;
                let (mut a, mut b) = (m.clone(), m.clone());
                a.theta[i] += h;
                b.theta[i] -= h;
                let fd = (objective(&a, &ds, 1e-2) - objective(&b, &ds, 1e-2)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3);
                assert!(rel <= 1e-5, "{kind} param {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }
}

#[test]
fn hessian_matches_finite_differences_of_gradient() {
    let ds = small_data(5);
    let order: Vec<usize> = (0..ds.user_count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 3 }] {
        let model = random_model(kind, 5, &mut rng);
        let p = model.param_count();
        let h = loss_hessian(&model, &ds, 1e-2, 0.0, 512).unwrap();
        for j in 0..p {
            let eps = 1e-5;
            let (mut a, mut b) = (model.clone(), model.clone());
            a.theta[j] += eps;
            b.theta[j] -= eps;
            let (_, ga) = objective_grad(&a, &ds, 1e-2, &order);
            let (_, gb) = objective_grad(&b, &ds, 1e-2, &order);
            for i in 0..p {
                // objective_grad is a mean over users, the Hessian a sum
                let fd = ds.user_count() as f64 * (ga[i] - gb[i]) / (2.0 * eps);
                let exact = h[i * p + j];
                assert!(
                    (fd - exact).abs() <= 1e-5 * exact.abs().max(1.0),
                    "{kind} H[{i},{j}] {exact} vs {fd}"
                );
            }
        }
    }
}

#[test]
fn meanpool_hessian_is_symmetric_psd() {
    let ds = small_data(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let m = random_model(ModelKind::MeanpoolLr, 8, &mut rng);
        let p = m.param_count();
        let h = DMatrix::from_row_slice(p, p, &loss_hessian(&m, &ds, 0.0, 0.0, 512).unwrap());
        assert_eq!(h, h.transpose());
        let eig = h.symmetric_eigenvalues();
        let scale = eig.amax();
        assert!(eig.iter().all(|&l| l >= -1e-10 * scale), "{eig}");
    }
}

#[test]
fn cg_inverse_hvp_matches_dense_solve() {
    let ds = small_data(8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 8 }] {
        let (trained, _) = train(&SurrogateModel::init(kind, 8, 5), &ds, &TrainConfig::default()).unwrap();
        let p = trained.param_count();
        assert!(p <= 100);
        let l2 = 1e-3;
        let undamped = DMatrix::from_row_slice(p, p, &loss_hessian(&trained, &ds, l2, 0.0, 512).unwrap());
        // CG needs a positive-definite system; the MLP need not be at one
        let damping = 1e-3 + (-1.1 * undamped.clone().symmetric_eigenvalues().min()).max(0.0);
        let h = undamped + DMatrix::identity(p, p) * damping;
        let b: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = h.cholesky().expect("damped Hessian is SPD").solve(&DVector::from_column_slice(&b));
        let op = HessianOperator {
            model: &trained,
            data: &ds,
            l2,
            damping,
        };
        let cg = conjugate_gradient(&op, &b, 1e-10, 10 * p).unwrap();
        let x = DVector::from_column_slice(&cg.x);
        let rel = (&x - &dense).norm() / dense.norm();
        assert!(rel <= 1e-4, "{kind}: rel err {rel}");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_data(8);
    let spec = EnsembleSpec {
        members: vec![(ModelKind::MeanpoolLr, 1), (ModelKind::TinyMlp { hidden: 4 }, 2)],
        weights: vec![0.5, 0.5],
        train: TrainConfig {
            epochs: 60,
            newton_steps: 5,
            ..TrainConfig::default()
        },
    };
    let (a, ra) = spec.fit(&ds).unwrap();
    let (b, rb) = spec.fit(&ds).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let enc: Vec<String> = a.models().iter().map(encode_checkpoint).collect();
    let dec: Vec<SurrogateModel> = enc.iter().map(|t| decode_checkpoint(t).unwrap()).collect();
    assert_eq!(dec.as_slice(), a.models());
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Two topics with orthogonal word vectors; each user clicks every news of
/// one topic, so all negatives come from the other.
fn separable_corpus() -> (Corpus, EmbeddingTable) {
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut entries = Vec::new();
    for i in 0..20 {
        let topic = i % 2;
        let mut v = vec![0.0; dim];
        v[topic] = 1.0;
        v[2] = rng.random_range(-0.2..0.2);
        v[3] = rng.random_range(-0.2..0.2);
        entries.push((word(i), v));
    }
    let table = EmbeddingTable::from_vectors(dim, entries).unwrap();
    let mut articles = Vec::new();
    for n in 0..20 {
        let topic = n % 2;
        let title = (0..3).map(|_| word(2 * rng.random_range(0..10) + topic)).collect();
        articles.push(NewsArticle {
            id: NewsId(format!("N{n:03}")),
            title,
            category: None,
        });
    }
    for c in 0..2 {
        articles.push(NewsArticle {
            id: NewsId(format!("C{c}")),
            title: vec![word(c)],
            category: None,
        });
    }
    let histories = (0..20)
        .map(|u| {
            let topic = u % 2;
            let clicked = (0..10).map(|k| NewsId(format!("N{:03}", 2 * k + topic))).collect();
            ClickHistory {
                user: UserId(format!("U{u}")),
                clicked,
                impressions: Vec::new(),
            }
        })
        .collect();
    let cands = vec![NewsId("C0".into()), NewsId("C1".into())];
    let corpus = Corpus::new(articles, histories, cands, NewsId("C0".into())).unwrap();
    (corpus, table)
}

#[test]
fn separable_clicks_are_learned() {
    let (corpus, table) = separable_corpus();
    let ds = Dataset::build(&corpus, &table, 3, 1);
    for kind in [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 4 }] {
        let (m, _) = train(&SurrogateModel::init(kind, 4, 3), &ds, &TrainConfig::default()).unwrap();
        let (mut right, mut total) = (0, 0);
        for u in 0..ds.user_count() {
            for (n, y) in ds.examples(u) {
                let p = m.predict(&ds.users()[u].vector, ds.news_vector(n)).unwrap();
                right += usize::from((p > 0.5) == (y > 0.5));
                total += 1;
            }
        }
        let acc = right as f64 / total as f64;
        assert!(acc >= 0.95, "{kind}: accuracy {acc}");
    }
}

/// Scores by the first coordinate of the candidate, coarsened so that ties
/// occur.
struct Coarse;

impl Scorer for Coarse {
    fn score(&self, u: &[f64], c: &[f64]) -> f64 {
        ((u[0] + c[0]) * 2.0).round()
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// MRR by scanning every ordering of the candidates for the one that is
/// sorted by descending score with ties to the smaller index.
fn brute_force_mrr<S: Scorer>(s: &S, ds: &Dataset) -> f64 {
    let cands = ds.candidates().to_vec();
    let mut sum = 0.0;
    for u in 0..ds.user_count() {
        let uv = &ds.users()[u].vector;
        let score = |n: usize| s.score(uv, ds.news_vector(n));
        let valid: Vec<Vec<usize>> = permutations(&cands)
            .into_iter()
            .filter(|p| {
                p.windows(2)
                    .all(|w| score(w[0]) > score(w[1]) || (score(w[0]) == score(w[1]) && w[0] < w[1]))
            })
            .collect();
        assert_eq!(valid.len(), 1);
        let k = valid[0].iter().position(|&n| n == ds.target()).unwrap() + 1;
        sum += 1.0 / k as f64;
    }
    sum / ds.user_count() as f64
}

fn five_by_four() -> (Dataset, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let entries: Vec<(String, Vec<f64>)> = (0..12)
        .map(|i| (word(i), (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let table = EmbeddingTable::from_vectors(3, entries).unwrap();
    let mut articles: Vec<NewsArticle> = (0..6)
        .map(|n| NewsArticle {
            id: NewsId(format!("N{n}")),
            title: vec![word(n), word(n + 6)],
            category: None,
        })
        .collect();
    for c in 0..5 {
        articles.push(NewsArticle {
            id: NewsId(format!("C{c}")),
            title: vec![word((c * 5) % 12)],
            category: None,
        });
    }
    let histories = (0..4)
        .map(|u| ClickHistory {
            user: UserId(format!("U{u}")),
            clicked: vec![NewsId(format!("N{u}")), NewsId(format!("N{}", u + 2))],
            impressions: Vec::new(),
        })
        .collect();
    let cands: Vec<NewsId> = (0..5).map(|c| NewsId(format!("C{c}"))).collect();
    let corpus = Corpus::new(articles, histories, cands, NewsId("C2".into())).unwrap();
    (Dataset::build(&corpus, &table, 2, 0), table)
}

#[test]
fn mrr_matches_brute_force_ranking() {
    let (ds, _) = five_by_four();
    assert_eq!((ds.candidates().len(), ds.user_count()), (5, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let lr = random_model(ModelKind::MeanpoolLr, 3, &mut rng);
        assert_eq!(mrr(&lr, &ds).unwrap().to_bits(), brute_force_mrr(&lr, &ds).to_bits());
        let mlp = random_model(ModelKind::TinyMlp { hidden: 2 }, 3, &mut rng);
        assert_eq!(mrr(&mlp, &ds).unwrap().to_bits(), brute_force_mrr(&mlp, &ds).to_bits());
    }
    // all-tied scores rank by index
    let zero = SurrogateModel::zeros(ModelKind::MeanpoolLr, 3, 0);
    assert_eq!(mrr(&zero, &ds).unwrap().to_bits(), brute_force_mrr(&zero, &ds).to_bits());
    assert_eq!(mrr(&Coarse, &ds).unwrap().to_bits(), brute_force_mrr(&Coarse, &ds).to_bits());
}

#[test]
fn target_off_the_candidate_list_is_an_error() {
    let (ds, _) = five_by_four();
    let viewed = ds.viewed()[0];
    assert!(matches!(
        mrr(&Coarse, &ds.with_target(viewed)),
        Err(RecommenderError::TargetNotInCandidates)
    ));
}
