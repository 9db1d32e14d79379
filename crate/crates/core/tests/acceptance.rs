//! End-to-end checks on the reference configuration, one PASS/FAIL line per
//! criterion. Expensive artifacts live under the configured output
//! directory and are reused when `config.txt` there matches; anything
//! missing is produced first.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poisonbench::agent::{baseline_effective, baseline_random, run_episode, Agent, AgentConfig, EnvConfig};
use poisonbench::corpus::{ClickHistory, Corpus, NewsArticle, NewsId, UserId};
use poisonbench::embeddings::EmbeddingTable;
use poisonbench::harness::config::parse_pairs;
use poisonbench::harness::{
    cmd_ablate, cmd_attack, cmd_deviation, cmd_eval, cmd_sweep, cmd_train, parse_eval_rows, read_timings,
    record_timing, run_method, summarize, worker_threads, AblationKind, ExperimentConfig, Method, Models,
    Workspace,
};
use poisonbench::hiertree::{left_probability, word_pairs, EffTree, LeafOrder, SampleMode};
use poisonbench::influence::{conjugate_gradient, retrain_oracle, HessianOperator, InfluenceEngine};
use poisonbench::recommender::{
    encode_checkpoint, loss_hessian, mrr, objective, objective_grad, Dataset, ModelKind, Scorer, SurrogateModel,
    TrainConfig,
};
use poisonbench::risk::{sequence_risk, write_sequence, RiskMode};

type Fallible<T> = Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read(path: &Path) -> Fallible<String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// Runs `f` unless `marker` exists, recording its wall time.
fn stage(ws: &Workspace, name: &str, marker: &str, f: impl FnOnce() -> Fallible<()>) -> Fallible<()> {
    if ws.out(marker).exists() {
        eprintln!("  {name}: reusing {}", ws.out(marker).display());
        return Ok(());
    }
    eprintln!("  {name}: running");
    let start = Instant::now();
    f()?;
    record_timing(&ws.cfg, name, start.elapsed().as_secs_f64())?;
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> Fallible<Workspace> {
    let stamp = cfg.output.join("config.txt");
    if stamp.exists() && read(&stamp)? != cfg.to_text() {
        return Err(format!(
            "{} was produced by a different configuration; remove {} to regenerate",
            stamp.display(),
            cfg.output.display()
        )
        .into());
    }
    let ws = Workspace::load(cfg)?;
    stage(&ws, "train", "config.txt", || Ok(cmd_train(&ws).map(|_| ())?))?;
    for m in Method::ALL {
        stage(&ws, &format!("attack:{m}"), &format!("attack/{m}/summary.csv"), || {
            Ok(cmd_attack(&ws, m).map(|_| ())?)
        })?;
    }
    stage(&ws, "eval", "eval/timing.csv", || Ok(cmd_eval(&ws).map(|_| ())?))?;
    stage(&ws, "deviation", "deviation/deviation.csv", || Ok(cmd_deviation(&ws).map(|_| ())?))?;
    stage(&ws, "ablate:hs", "ablate/hs.csv", || Ok(cmd_ablate(&ws, AblationKind::Hs).map(|_| ())?))?;
    stage(&ws, "ablate:risk", "ablate/risk.csv", || {
        Ok(cmd_ablate(&ws, AblationKind::Risk).map(|_| ())?)
    })?;
    Ok(ws)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

const RUNTIME_LIMIT_SECS: f64 = 30.0 * 60.0;
const REFERENCE_CORES: f64 = 4.0;

fn method_ordering(ws: &Workspace) -> Fallible<Verdict> {
    let rows = parse_eval_rows(&read(&ws.out("eval/per_target.csv"))?)?;
    let s = summarize(&rows);
    let get = |m: Method| s.iter().find(|x| x.method == m).ok_or_else(|| format!("no {m} rows"));
    let (none, random, eff, tdp) = (get(Method::None)?, get(Method::Random)?, get(Method::Effective)?, get(Method::TdpCp)?);
    let ordered = tdp.online_mrr.0 > eff.online_mrr.0
        && eff.online_mrr.0 > none.online_mrr.0
        && tdp.online_mrr.0 > random.online_mrr.0
        && tdp.online_gain >= 1.05 * eff.online_gain;
    let timings = read_timings(&ws.cfg)?;
    let mut secs = 0.0;
    let mut threads = 1;
    for name in ["train", "attack:none", "attack:random", "attack:effective", "attack:tdp-cp", "eval"] {
        let (_, t, th) = timings
            .iter()
            .rev()
            .find(|(s, _, _)| s == name)
            .ok_or_else(|| format!("no timing for {name}"))?;
        secs += t;
        threads = threads.max(*th);
    }
    let at_reference = secs * threads as f64 / REFERENCE_CORES;
    let detail = format!(
        "online MRR none {:.4} random {:.4} effective {:.4} tdp-cp {:.4}; gains tdp-cp {:+.4} vs 1.05 x effective {:+.4} \
         (offline gains: random {:+.4} effective {:+.4} tdp-cp {:+.4}); runtime {:.1} min on {threads} thread(s), \
         {:.1} min at {REFERENCE_CORES} cores",
        none.online_mrr.0,
        random.online_mrr.0,
        eff.online_mrr.0,
        tdp.online_mrr.0,
        tdp.online_gain,
        1.05 * eff.online_gain,
        random.offline_gain,
        eff.offline_gain,
        tdp.offline_gain,
        secs / 60.0,
        at_reference / 60.0
    );
    Ok(verdict(ordered && at_reference <= RUNTIME_LIMIT_SECS, detail))
}

/// -1, 0 or 1.
fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

const FIDELITY_SAMPLES: usize = 50;

/// `(estimated, retrained)` MRR change of random single replacements,
/// cached in `acceptance/fidelity.csv`.
fn fidelity_pairs(ws: &Workspace, models: &Models, engine: &InfluenceEngine) -> Fallible<Vec<(f64, f64)>> {
    let path = ws.out("acceptance/fidelity.csv");
    if path.exists() {
        return csv_rows(&read(&path)?)
            .iter()
            .map(|r| Ok((r[4].parse()?, r[5].parse()?)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let viewed = ws.data.viewed();
    let mut lines = String::from("target,news,old,new,estimated,retrained\n");
    let mut out = Vec::new();
    let start = Instant::now();
    for i in 0..FIDELITY_SAMPLES {
        let n = ws.targets[i % ws.targets.len()];
        let data = ws.data.with_target(n);
        let target = ws.corpus.article(data.news_id(n)).ok_or("target article")?;
        let (news, pair) = loop {
            let v = viewed[rng.random_range(0..viewed.len())];
            let art = ws.corpus.article(data.news_id(v)).ok_or("viewed article")?;
            let pairs = word_pairs(art, target);
            if !pairs.is_empty() {
                break (v, pairs[rng.random_range(0..pairs.len())].clone());
            }
        };
        let mut title = data.title(news).to_vec();
        let pos = title.iter().position(|w| *w == pair.old).ok_or("pair word")?;
        title[pos] = pair.new.clone();
        let after = data.with_titles(&[(news, title)].into_iter().collect(), &ws.table);
        let eng = engine.with_target(n)?;
        let est = eng.estimated_mrr(&after)? - eng.clean_mrr();
        let clean = mrr(&models.offline, &data)?;
        let (_, retrained) = retrain_oracle(&ws.cfg.offline, &after)?;
        let oracle = retrained - clean;
        lines.push_str(&format!(
            "{},{},{},{},{est:?},{oracle:?}\n",
            data.news_id(n).0,
            data.news_id(news).0,
            pair.old,
            pair.new
        ));
        out.push((est, oracle));
    }
    std::fs::create_dir_all(ws.out("acceptance"))?;
    std::fs::write(&path, lines)?;
    record_timing(&ws.cfg, "acceptance:fidelity", start.elapsed().as_secs_f64())?;
    Ok(out)
}

fn influence_fidelity(ws: &Workspace, models: &Models, engine: &InfluenceEngine) -> Fallible<Verdict> {
    let pairs = fidelity_pairs(ws, models, engine)?;
    let agree = pairs.iter().filter(|(e, o)| sign(*e) == sign(*o)).count();
    let share = agree as f64 / pairs.len() as f64;
    let (est, ora): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let r = pearson(&est, &ora);
    let moved = ora.iter().filter(|x| **x != 0.0).count();
    Ok(verdict(
        share >= 0.9 && r >= 0.9,
        format!(
            "{} single replacements: sign agreement {:.1}% (need 90%), Pearson {r:.3} (need 0.9); {moved} moved the retrained MRR",
            pairs.len(),
            100.0 * share
        ),
    ))
}

fn speedup(ws: &Workspace) -> Fallible<Verdict> {
    let rows = csv_rows(&read(&ws.out("eval/timing.csv"))?);
    let r = rows.first().ok_or("empty timing.csv")?;
    let (samples, est, retrain, x): (usize, f64, f64, f64) = (r[0].parse()?, r[1].parse()?, r[2].parse()?, r[3].parse()?);
    let n = samples.max(1) as f64;
    Ok(verdict(
        samples > 0 && x >= 10.0,
        format!(
            "{samples} sequences: estimate {:.1} ms, retrain {:.1} ms, speedup {x:.1}x (need 10x)",
            1e3 * est / n,
            1e3 * retrain / n
        ),
    ))
}

const FUZZ_EPISODES: usize = 1000;

fn budget_soundness(ws: &Workspace, engine: &InfluenceEngine) -> Fallible<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let modes = [RiskMode::Full, RiskMode::NoFrequency, RiskMode::NoSimilarity];
    let per_target = FUZZ_EPISODES.div_ceil(ws.targets.len());
    let (mut episodes, mut violations) = (0, 0);
    for (i, &n) in ws.targets.iter().enumerate() {
        let base = ws.env(engine, n, ws.cfg.env.clone())?;
        let agent_cfg = AgentConfig {
            seed: rng.next_u64(),
            ..ws.agent_config(n)
        };
        let mut agent = Agent::new(&base, &agent_cfg)?;
        for k in 0..per_target {
            if episodes >= FUZZ_EPISODES {
                break;
            }
            let env = base.with_config(EnvConfig {
                budget: rng.random_range(0.0..=ws.cfg.env.budget),
                horizon: rng.random_range(0..=ws.cfg.env.horizon),
                risk_mode: modes[(i + k) % modes.len()],
                ..ws.cfg.env.clone()
            });
            let ep = match k % 3 {
                0 => baseline_random(&env, &mut rng)?,
                1 => baseline_effective(&env)?,
                _ => {
                    let temperature = rng.random_range(0.1..=1.0);
                    run_episode(&mut agent, &env, SampleMode::Boltzmann { temperature }, 1.0, &mut rng)?
                }
            };
            let cfg = env.config();
            let risk = sequence_risk(env.corpus(), env.table(), &ep.perturbations, cfg.risk_mode)?;
            if risk > cfg.budget || ep.perturbations.len() > cfg.horizon {
                violations += 1;
            }
            episodes += 1;
        }
    }
    Ok(verdict(
        episodes == FUZZ_EPISODES && violations == 0,
        format!("{episodes} episodes over random/effective/agent, random budgets and horizons: {violations} violations"),
    ))
}

fn numerical_core(ws: &Workspace) -> Fallible<Verdict> {
    let start = Instant::now();
    let ds = &ws.data;
    let dim = ds.dim();
    let order: Vec<usize> = (0..ds.user_count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let kinds = [ModelKind::MeanpoolLr, ModelKind::TinyMlp { hidden: 4 }];
    let mut fd_worst = 0.0f64;
    for kind in kinds {
        for _ in 0..3 {
            let mut m = SurrogateModel::zeros(kind, dim, 0);
            m.theta.iter_mut().for_each(|t| *t = rng.random_range(-0.5..0.5));
            let (_, g) = objective_grad(&m, ds, 1e-3, &order);
            for i in 0..m.param_count() {
                let h = 1e-5;
                let (mut a, mut b) = (m.clone(), m.clone());
                a.theta[i] += h;
                b.theta[i] -= h;
                let fd = (objective(&a, ds, 1e-3) - objective(&b, ds, 1e-3)) / (2.0 * h);
                fd_worst = fd_worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3));
            }
        }
    }
    let mut psd = true;
    for _ in 0..3 {
        let mut m = SurrogateModel::zeros(ModelKind::MeanpoolLr, dim, 0);
        m.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        let p = m.param_count();
        let h = DMatrix::from_row_slice(p, p, &loss_hessian(&m, ds, 0.0, 0.0, 512)?);
        let eig = h.clone().symmetric_eigenvalues();
        psd &= h == h.transpose() && eig.iter().all(|&l| l >= -1e-10 * eig.amax());
    }
    let mut cg_worst = 0.0f64;
    let params: Vec<usize> = kinds.iter().map(|k| k.param_count(dim)).collect();
    for kind in kinds {
        let (m, _) = poisonbench::recommender::train(&SurrogateModel::init(kind, dim, 1), ds, &TrainConfig::default())?;
        let p = m.param_count();
        let l2 = ws.cfg.offline.train.l2;
        let undamped = DMatrix::from_row_slice(p, p, &loss_hessian(&m, ds, l2, 0.0, 512)?);
        let shift = (-1.1 * undamped.clone().symmetric_eigenvalues().min()).max(0.0);
        let damping = ws.cfg.influence.damping + shift;
        let h = undamped + DMatrix::identity(p, p) * damping;
        let b: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = h.cholesky().ok_or("damped Hessian not SPD")?.solve(&DVector::from_column_slice(&b));
        let op = HessianOperator {
            model: &m,
            data: ds,
            l2,
            damping,
        };
        let cg = conjugate_gradient(&op, &b, 1e-10, 10 * p)?;
        cg_worst = cg_worst.max((DVector::from_column_slice(&cg.x) - &dense).norm() / dense.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        fd_worst <= 1e-5 && psd && cg_worst <= 1e-4 && params.iter().all(|&p| p <= 100) && secs <= 60.0,
        format!(
            "gradient FD rel err {fd_worst:.1e} (need 1e-5), LR Hessian symmetric PSD {psd}, CG vs dense rel err {cg_worst:.1e} \
             (need 1e-4) on {params:?} params, {secs:.1}s"
        ),
    ))
}

/// Replays a left/right script: a left turn draws 0, a right turn the
/// largest draw below 1.
struct Script(Vec<bool>, usize);

impl RngCore for Script {
    fn next_u32(&mut self) -> u32 {
        self.next_u64() as u32
    }
    fn next_u64(&mut self) -> u64 {
        let left = self.0.get(self.1).copied().unwrap_or(true);
        self.1 += 1;
        if left {
            0
        } else {
            u64::MAX
        }
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.iter_mut().for_each(|b| *b = self.next_u64() as u8);
    }
}

fn tree_structure() -> Fallible<Verdict> {
    let mut failures = Vec::new();
    for n in 1..=64usize {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let items = (0..n)
            .map(|i| (i, f64::from(rng.random_range(0..6u8)), vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let t = EffTree::build(2, items, LeafOrder::Effectiveness, n as u64)?;
        let bound = (n as f64).log2().ceil() as usize + 1;
        let sorted = t.effectiveness().windows(2).all(|w| w[0] >= w[1]);
        let short = (0..n).all(|r| (usize::BITS - 1 - t.leaf_heap_index(r).leading_zeros()) as usize <= bound);
        if t.leaf_count() != n || !sorted || !short {
            failures.push(n);
            continue;
        }
        if n <= 16 {
            let score = [0.6, -0.4];
            let mut reached = BTreeSet::new();
            for bits in 0..(1u32 << t.depth()) {
                let turns = (0..t.depth()).map(|k| bits >> k & 1 == 0).collect();
                let s = t.sample_path(&score, SampleMode::Boltzmann { temperature: 1.0 }, &mut Script(turns, 0))?;
                let mut node = 1;
                let mut p = 1.0;
                for &next in &s.nodes {
                    let d = |h: usize| score[0] * t.node_embedding(h)[0] + score[1] * t.node_embedding(h)[1];
                    let pl = left_probability(d(2 * node), d(2 * node + 1), 1.0);
                    p *= if next == 2 * node { pl } else { 1.0 - pl };
                    node = next;
                }
                if p > 0.0 {
                    reached.insert(s.leaf);
                }
            }
            if reached.len() != n {
                failures.push(n);
            }
        }
    }
    Ok(verdict(
        failures.is_empty(),
        format!("n = 1..64 leaf count, order, path bound; exhaustive paths for n <= 16; failing sizes {failures:?}"),
    ))
}

fn hs_ablation(ws: &Workspace) -> Fallible<Verdict> {
    let rows = csv_rows(&read(&ws.out("ablate/hs.csv"))?);
    let get = |v: &str| -> Fallible<f64> {
        Ok(rows.iter().find(|r| r[0] == v).ok_or_else(|| format!("no {v} row"))?[1].parse()?)
    };
    let (hs, non, random) = (get("hs")?, get("non_hs")?, get("random_hs")?);
    Ok(verdict(
        hs >= random && hs >= non,
        format!(
            "final greedy gain at {} episodes: hs {hs:+.4}, random_hs {random:+.4}, non_hs {non:+.4}",
            ws.cfg.agent.episodes
        ),
    ))
}

fn risk_ablation(ws: &Workspace) -> Fallible<Verdict> {
    let rows = csv_rows(&read(&ws.out("ablate/risk.csv"))?);
    let get = |rule: &str, mode: &str| -> Fallible<(f64, f64)> {
        let r = rows.iter().find(|r| r[0] == rule && r[1] == mode).ok_or_else(|| format!("no {rule}/{mode} row"))?;
        Ok((r[3].parse()?, r[7].parse()?))
    };
    let (full, nofreq, nosim) = (get("best", "full")?, get("best", "no_frequency")?, get("best", "no_similarity")?);
    let mut detail = format!(
        "best checkpoints at budget {}: top-popularity share full {:.2} vs no_frequency {:.2}, top-similarity share full {:.2} vs no_similarity {:.2}",
        ws.cfg.risk_budget, full.0, nofreq.0, full.1, nosim.1
    );
    for rule in ["of_full", "over_none"] {
        let (f, a, b) = (get(rule, "full")?, get(rule, "no_frequency")?, get(rule, "no_similarity")?);
        detail.push_str(&format!("; {rule}: {:.2}/{:.2}, {:.2}/{:.2}", f.0, a.0, f.1, b.1));
    }
    Ok(verdict(full.0 < nofreq.0 && full.1 > nosim.1, detail))
}

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
    (0..items.len())
        .flat_map(|i| {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            permutations(&rest).into_iter().map(move |mut p| {
                p.insert(0, head);
                p
            })
        })
        .collect()
}

fn brute_force_mrr<S: Scorer>(s: &S, ds: &Dataset) -> Option<f64> {
    let mut sum = 0.0;
    for u in 0..ds.user_count() {
        let uv = &ds.users()[u].vector;
        let score = |n: usize| s.score(uv, ds.news_vector(n));
        let valid: Vec<Vec<usize>> = permutations(ds.candidates())
            .into_iter()
            .filter(|p| p.windows(2).all(|w| score(w[0]) > score(w[1]) || (score(w[0]) == score(w[1]) && w[0] < w[1])))
            .collect();
        if valid.len() != 1 {
            return None;
        }
        sum += 1.0 / (valid[0].iter().position(|&n| n == ds.target())? + 1) as f64;
    }
    Some(sum / ds.user_count() as f64)
}

fn mrr_oracle() -> Fallible<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let word = |i: usize| format!("w{i}");
    let entries: Vec<(String, Vec<f64>)> =
        (0..12).map(|i| (word(i), (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
    let table = EmbeddingTable::from_vectors(3, entries)?;
    let mut articles: Vec<NewsArticle> = (0..6)
        .map(|n| NewsArticle {
            id: NewsId(format!("N{n}")),
            title: vec![word(n), word(n + 6)],
            category: None,
        })
        .collect();
    articles.extend((0..5).map(|c| NewsArticle {
        id: NewsId(format!("C{c}")),
        title: vec![word((c * 5) % 12)],
        category: None,
    }));
    let histories = (0..4)
        .map(|u| ClickHistory {
            user: UserId(format!("U{u}")),
            clicked: vec![NewsId(format!("N{u}")), NewsId(format!("N{}", u + 2))],
            impressions: Vec::new(),
        })
        .collect();
    let cands: Vec<NewsId> = (0..5).map(|c| NewsId(format!("C{c}"))).collect();
    let corpus = Corpus::new(articles, histories, cands, NewsId("C2".into()))?;
    let ds = Dataset::build(&corpus, &table, 2, 0);
    let mut checked = 0;
    let mut mismatches = 0;
    for target in ds.candidates().to_vec() {
        let d = ds.with_target(target);
        for k in 0..10 {
            let kind = if k % 2 == 0 { ModelKind::MeanpoolLr } else { ModelKind::TinyMlp { hidden: 2 } };
            let mut m = SurrogateModel::zeros(kind, 3, 0);
            if k > 0 {
                m.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
            }
            checked += 1;
            if brute_force_mrr(&m, &d).map(f64::to_bits) != Some(mrr(&m, &d)?.to_bits()) {
                mismatches += 1;
            }
        }
        checked += 1;
        if brute_force_mrr(&Coarse, &d).map(f64::to_bits) != Some(mrr(&Coarse, &d)?.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(verdict(
        mismatches == 0 && ds.candidates().len() == 5 && ds.user_count() == 4,
        format!("5 candidates x 4 users, {checked} scorers including ties: {mismatches} bit mismatches"),
    ))
}

const TINY: &str = "
synth_seed = 4
users = 30
news = 60
candidates = 10
title_len = 6
vocab_size = 80
dim = 8
offline_models = meanpool_lr@1, tiny_mlp:3@2
offline_weights = 0.5, 0.5
online_model = tiny_mlp:4@3
train_epochs = 60
newton_steps = 10
budget = 10
horizon = 6
episodes = 20
checkpoint_every = 5
hidden = 8
head = 16
targets = 3
sweep_budgets = 2, 10
sweep_horizons = 0, 3
risk_budget = 4
timing_samples = 1
";

/// Every file a scaled-down pipeline writes, wall-clock records aside.
fn tiny_pipeline(out: &Path) -> Fallible<Vec<(String, Vec<u8>)>> {
    let mut pairs = parse_pairs(TINY)?;
    pairs.push(("output".into(), out.display().to_string()));
    let cfg = ExperimentConfig::from_pairs(&pairs)?;
    poisonbench::harness::cmd_synth(&cfg)?;
    let ws = Workspace::load(&cfg)?;
    cmd_train(&ws)?;
    for m in Method::ALL {
        cmd_attack(&ws, m)?;
    }
    cmd_eval(&ws)?;
    cmd_deviation(&ws)?;
    cmd_sweep(&ws)?;
    cmd_ablate(&ws, AblationKind::Hs)?;
    cmd_ablate(&ws, AblationKind::Risk)?;
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("eval/timing.csv") {
                files.push((p.strip_prefix(out)?.display().to_string(), std::fs::read(&p)?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn determinism(ws: &Workspace, engine: &InfluenceEngine) -> Fallible<Verdict> {
    let mut differing = Vec::new();
    let refit = ws.fit_models()?;
    for (i, m) in refit.offline.models().iter().enumerate() {
        if read(&ws.out(&format!("models/offline_{i}.model")))? != encode_checkpoint(m) {
            differing.push(format!("offline_{i}.model"));
        }
    }
    if read(&ws.out("models/online.model"))? != encode_checkpoint(&refit.online) {
        differing.push("online.model".into());
    }
    let mut reran = 0;
    for m in [Method::None, Method::Random, Method::Effective, Method::TdpCp] {
        let targets: &[usize] = if m == Method::TdpCp { &ws.targets[..1] } else { &ws.targets };
        for &n in targets {
            let env = ws.env(engine, n, ws.cfg.env.clone())?;
            let run = run_method(&env, m, &ws.agent_config(n), ws.cfg.random_seed, n)?;
            let stored = read(&ws.out(&format!("attack/{m}/{}.seq", ws.target_id(n))))?;
            if stored != write_sequence(&run.episode.perturbations) {
                differing.push(format!("attack/{m}/{}.seq", ws.target_id(n)));
            }
            reran += 1;
        }
    }
    let dir = std::env::temp_dir().join(format!("poisonbench-acceptance-{}", std::process::id()));
    // same output path both times: it is part of config.txt
    let run = dir.join("run");
    let a = tiny_pipeline(&run)?;
    std::fs::remove_dir_all(&run)?;
    let b = tiny_pipeline(&run)?;
    let _ = std::fs::remove_dir_all(&dir);
    let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
    if names != b.iter().map(|(n, _)| n).collect::<Vec<_>>() {
        differing.push("tiny pipeline file set".into());
    }
    for ((n, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            differing.push(format!("tiny/{n}"));
        }
    }
    Ok(verdict(
        differing.is_empty(),
        format!(
            "reference: refit models and {reran} re-run attacks vs stored artifacts; scaled-down full pipeline twice ({} files); differing {differing:?}",
            a.len()
        ),
    ))
}

fn main() -> ExitCode {
    let root = workspace_root();
    if let Err(e) = std::env::set_current_dir(&root) {
        eprintln!("cannot enter {}: {e}", root.display());
        return ExitCode::FAILURE;
    }
    let cfg = match ExperimentConfig::from_file(Path::new("configs/reference.conf"), &[]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("reference config: {e}");
            return ExitCode::FAILURE;
        }
    };
    eprintln!("acceptance on configs/reference.conf, artifacts in {} ({} threads)", cfg.output.display(), worker_threads(cfg.jobs));
    let ws = match prepare(&cfg) {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("preparing artifacts failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let setup = ws.load_models().map_err(|e| e.to_string()).and_then(|m| {
        let e = ws.engine(&m).map_err(|e| e.to_string())?;
        Ok((m, e))
    });
    let (models, engine) = match setup {
        Ok(x) => x,
        Err(e) => {
            eprintln!("loading models failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let checks: Vec<(&str, Box<dyn Fn() -> Fallible<Verdict> + '_>)> = vec![
        ("method ordering", Box::new(|| method_ordering(&ws))),
        ("influence fidelity", Box::new(|| influence_fidelity(&ws, &models, &engine))),
        ("influence speedup", Box::new(|| speedup(&ws))),
        ("budget soundness", Box::new(|| budget_soundness(&ws, &engine))),
        ("numerical core", Box::new(|| numerical_core(&ws))),
        ("tree structure", Box::new(tree_structure)),
        ("hs ablation", Box::new(|| hs_ablation(&ws))),
        ("risk ablation", Box::new(|| risk_ablation(&ws))),
        ("mrr oracle", Box::new(mrr_oracle)),
        ("determinism", Box::new(|| determinism(&ws, &engine))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let v = check().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        failed += usize::from(!v.pass);
        println!("{} {:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
