//! Experiment runner behind the `poisonbench` binary: artifact layout,
//! per-target pipelines, aggregation and reports.
//!
//! Layout under the configured output directory:
//!
//! ```text
//! corpus/                     synthesized MIND files
//! models/offline_<i>.model    offline ensemble members
//! models/online.model         held-out evaluation model
//! train/clean_mrr.csv
//! attack/<method>/<target>.seq, <target>.curve.csv, summary.csv
//! eval/per_target.csv, results.csv, results.md
//! sweep/<method>.csv
//! ablate/hs_curves.csv, hs.csv, hs.md, risk.csv, risk.md
//! deviation/deviation.csv, deviation.md
//! eval/timing.csv             estimate vs retrain wall time
//! timings.csv                 wall time per command, appended
//! ```

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use config::{AblationKind, ConfigError, EmbeddingSource, ExperimentConfig, Method, TargetSpec};
use report::{csv, fmt_mean_std, markdown, mean_std, rank_quartile, shares, value_quartile};

use crate::agent::{
    baseline_effective, baseline_none, baseline_random, edited_titles, train_agent, AgentConfig, AgentError,
    AttackEnv, CurvePoint, EnvConfig, Episode, RewardModel, Variant,
};
use crate::corpus::{synth_corpus, Corpus, CorpusError};
use crate::embeddings::{EmbeddingError, EmbeddingTable};
use crate::hiertree::word_pairs;
use crate::influence::{retrain_oracle, InfluenceEngine, InfluenceError};
use crate::recommender::{
    decode_checkpoint, encode_checkpoint, mrr, CheckpointError, Dataset, Ensemble, RecommenderError, SurrogateModel,
};
use crate::risk::{parse_sequence, write_sequence, Perturbation, RiskMode, SequenceFormatError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Recommender(#[from] RecommenderError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Sequence {
        path: PathBuf,
        #[source]
        source: SequenceFormatError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {0} (run the producing command first)")]
    MissingArtifact(PathBuf),
    #[error("artifact {0} does not match the configuration")]
    StaleArtifact(PathBuf),
    #[error("cannot build a worker pool: {0}")]
    Pool(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_artifact(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Threads a `jobs` setting resolves to.
pub fn worker_threads(jobs: usize) -> usize {
    if jobs == 0 {
        rayon::current_num_threads()
    } else {
        jobs
    }
}

/// Appends `stage,seconds,threads` to `<output>/timings.csv`.
pub fn record_timing(cfg: &ExperimentConfig, stage: &str, secs: f64) -> Result<()> {
    use std::io::Write as _;
    let path = cfg.output.join("timings.csv");
    std::fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    if fresh {
        writeln!(f, "stage,seconds,threads").map_err(io_err(&path))?;
    }
    writeln!(f, "{stage},{secs:?},{}", worker_threads(cfg.jobs)).map_err(io_err(&path))
}

/// `(stage, seconds, threads)` rows of `<output>/timings.csv`, latest last.
pub fn read_timings(cfg: &ExperimentConfig) -> Result<Vec<(String, f64, usize)>> {
    let path = cfg.output.join("timings.csv");
    let text = read_artifact(&path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            match (c.first(), c.get(1).and_then(|x| x.parse().ok()), c.get(2).and_then(|x| x.parse().ok())) {
                (Some(stage), Some(secs), Some(threads)) if c.len() == 3 => Ok((stage.to_string(), secs, threads)),
                _ => Err(HarnessError::StaleArtifact(path.clone())),
            }
        })
        .collect()
}

/// Runs `f` over `items` on at most `jobs` threads (0 = all cores),
/// returning results in input order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Clean data shared by every command.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub corpus: Corpus,
    pub table: EmbeddingTable,
    pub data: Dataset,
    /// Dataset indices of the attacked news.
    pub targets: Vec<usize>,
}

/// Trained offline ensemble and online model.
pub struct Models {
    pub offline: Ensemble,
    pub online: SurrogateModel,
}

impl Workspace {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let corpus = match &cfg.corpus_dir {
            Some(dir) => Corpus::read_mind(dir, None)?,
            None => synth_corpus(&cfg.synth)?,
        };
        let table = match &cfg.embeddings {
            EmbeddingSource::Hashed { oov_seed } => EmbeddingTable::hashed(cfg.dim, *oov_seed)?,
            EmbeddingSource::File(p) => EmbeddingTable::load(p, cfg.dim)?,
        };
        let data = Dataset::build(&corpus, &table, cfg.neg_k, cfg.data_seed);
        let targets = select_targets(cfg, &data)?;
        Ok(Workspace {
            cfg: cfg.clone(),
            corpus,
            table,
            data,
            targets,
        })
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output.join(rel)
    }

    pub fn target_id(&self, n: usize) -> &str {
        &self.data.news_id(n).0
    }

    pub fn fit_models(&self) -> Result<Models> {
        let (offline, _) = self.cfg.offline.fit(&self.data)?;
        let (online, _) = self.cfg.online_spec().fit(&self.data)?;
        Ok(Models {
            offline,
            online: online.models()[0].clone(),
        })
    }

    fn offline_paths(&self) -> Vec<PathBuf> {
        (0..self.cfg.offline.members.len())
            .map(|i| self.out(&format!("models/offline_{i}.model")))
            .collect()
    }

    fn read_model(path: &Path, expect: (crate::recommender::ModelKind, u64), dim: usize) -> Result<SurrogateModel> {
        let text = read_artifact(path)?;
        let m = decode_checkpoint(&text).map_err(|source| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })?;
        if (m.kind, m.seed) != expect || m.dim != dim {
            return Err(HarnessError::StaleArtifact(path.to_path_buf()));
        }
        Ok(m)
    }

    pub fn load_models(&self) -> Result<Models> {
        let members = self
            .offline_paths()
            .iter()
            .zip(&self.cfg.offline.members)
            .map(|(p, &e)| Self::read_model(p, e, self.cfg.dim))
            .collect::<Result<Vec<_>>>()?;
        let online = Self::read_model(&self.out("models/online.model"), self.cfg.online, self.cfg.dim)?;
        Ok(Models {
            offline: Ensemble::new(members, self.cfg.offline.weights.clone())?,
            online,
        })
    }

    pub fn engine(&self, models: &Models) -> Result<InfluenceEngine> {
        Ok(InfluenceEngine::new(
            models.offline.clone(),
            self.data.clone(),
            self.cfg.influence.clone(),
        )?)
    }

    /// Attack environment for target `n`.
    pub fn env(&self, engine: &InfluenceEngine, n: usize, env_cfg: EnvConfig) -> Result<AttackEnv> {
        let corpus = self.corpus.with_target(self.data.news_id(n))?;
        let data = self.data.with_target(n);
        let reward = if self.cfg.oracle_reward {
            RewardModel::Oracle {
                spec: self.cfg.offline.clone(),
                clean_mrr: mrr(engine.ensemble(), &data)?,
            }
        } else {
            RewardModel::Influence(Arc::new(engine.with_target(n)?))
        };
        Ok(AttackEnv::new(corpus, self.table.clone(), data, reward, env_cfg)?)
    }

    pub fn agent_config(&self, n: usize) -> AgentConfig {
        AgentConfig {
            seed: self.cfg.agent.seed.wrapping_add(n as u64),
            ..self.cfg.agent.clone()
        }
    }
}

/// Seeded choice of `count` candidates, or the listed ids in order.
pub fn select_targets(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<usize>> {
    let bad = |value: String, reason: &str| {
        HarnessError::Config(ConfigError::BadValue {
            key: "targets".into(),
            value,
            reason: reason.into(),
        })
    };
    match &cfg.targets {
        TargetSpec::Count(k) => {
            let mut cands = data.candidates().to_vec();
            if *k > cands.len() {
                return Err(bad(k.to_string(), "more targets than candidates"));
            }
            cands.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.target_seed));
            cands.truncate(*k);
            Ok(cands)
        }
        TargetSpec::Ids(ids) => ids
            .iter()
            .map(|id| {
                data.news_index(&crate::corpus::NewsId(id.clone()))
                    .filter(|n| data.candidates().contains(n))
                    .ok_or_else(|| bad(id.clone(), "not a candidate news id"))
            })
            .collect(),
    }
}

/// One method's outcome on one target.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub target: usize,
    pub episode: Episode,
    pub curve: Vec<CurvePoint>,
    pub evaluations: Vec<Episode>,
}

pub fn run_method(env: &AttackEnv, method: Method, agent: &AgentConfig, random_seed: u64, n: usize) -> Result<MethodRun> {
    let (episode, curve, evaluations) = match method {
        Method::None => (baseline_none(env), Vec::new(), Vec::new()),
        Method::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(random_seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            (baseline_random(env, &mut rng)?, Vec::new(), Vec::new())
        }
        Method::Effective => (baseline_effective(env)?, Vec::new(), Vec::new()),
        Method::TdpCp => {
            let t = train_agent(env, agent)?;
            (t.best, t.curve, t.evaluations)
        }
    };
    Ok(MethodRun {
        target: n,
        episode,
        curve,
        evaluations,
    })
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| vec![p.episode.to_string(), format!("{:?}", p.gain)])
        .collect();
    csv(&["episode", "mrr_gain"], &rows)
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let corpus = synth_corpus(&cfg.synth)?;
    let dir = cfg.output.join("corpus");
    corpus.write_mind(&dir)?;
    Ok(dir)
}

pub fn cmd_train(ws: &Workspace) -> Result<Models> {
    let models = ws.fit_models()?;
    for (p, m) in ws.offline_paths().iter().zip(models.offline.models()) {
        write_file(p, &encode_checkpoint(m))?;
    }
    write_file(&ws.out("models/online.model"), &encode_checkpoint(&models.online))?;
    let mut rows = Vec::new();
    for &n in &ws.targets {
        let d = ws.data.with_target(n);
        rows.push(vec![
            ws.target_id(n).to_string(),
            format!("{:?}", mrr(&models.offline, &d)?),
            format!("{:?}", mrr(&models.online, &d)?),
        ]);
    }
    write_file(&ws.out("train/clean_mrr.csv"), &csv(&["target", "offline_mrr", "online_mrr"], &rows))?;
    write_file(&ws.out("config.txt"), &ws.cfg.to_text())?;
    Ok(models)
}

/// Runs `method` on every target and writes its sequences.
pub fn cmd_attack(ws: &Workspace, method: Method) -> Result<Vec<MethodRun>> {
    let models = ws.load_models()?;
    let engine = ws.engine(&models)?;
    let runs = par_map(ws.cfg.jobs, &ws.targets, |&n| {
        let env = ws.env(&engine, n, ws.cfg.env.clone())?;
        run_method(&env, method, &ws.agent_config(n), ws.cfg.random_seed, n)
    })?;
    let dir = ws.out(&format!("attack/{method}"));
    let mut rows = Vec::new();
    for r in &runs {
        let id = ws.target_id(r.target);
        write_file(&dir.join(format!("{id}.seq")), &write_sequence(&r.episode.perturbations))?;
        if method == Method::TdpCp {
            write_file(&dir.join(format!("{id}.curve.csv")), &curve_csv(&r.curve))?;
        }
        rows.push(vec![
            id.to_string(),
            r.episode.perturbations.len().to_string(),
            format!("{:?}", r.episode.spent),
            format!("{:?}", r.episode.gain),
        ]);
    }
    write_file(
        &dir.join("summary.csv"),
        &csv(&["target", "steps", "spent", "estimated_gain"], &rows),
    )?;
    Ok(runs)
}

pub fn read_sequences(ws: &Workspace, method: Method) -> Result<Vec<Vec<Perturbation>>> {
    if method == Method::None {
        return Ok(vec![Vec::new(); ws.targets.len()]);
    }
    ws.targets
        .iter()
        .map(|&n| {
            let path = ws.out(&format!("attack/{method}/{}.seq", ws.target_id(n)));
            let text = read_artifact(&path)?;
            parse_sequence(&text).map_err(|source| HarnessError::Sequence { path, source })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: Method,
    pub target: String,
    pub clean_offline: f64,
    pub offline_mrr: f64,
    pub clean_online: f64,
    pub online_mrr: f64,
    pub estimated_gain: f64,
}

impl EvalRow {
    pub fn offline_gain(&self) -> f64 {
        self.offline_mrr - self.clean_offline
    }

    pub fn online_gain(&self) -> f64 {
        self.online_mrr - self.clean_online
    }
}

const EVAL_HEADER: [&str; 7] = [
    "method",
    "target",
    "clean_offline_mrr",
    "offline_mrr",
    "clean_online_mrr",
    "online_mrr",
    "estimated_gain",
];

fn eval_row_fields(r: &EvalRow) -> Vec<String> {
    vec![
        r.method.to_string(),
        r.target.clone(),
        format!("{:?}", r.clean_offline),
        format!("{:?}", r.offline_mrr),
        format!("{:?}", r.clean_online),
        format!("{:?}", r.online_mrr),
        format!("{:?}", r.estimated_gain),
    ]
}

pub fn parse_eval_rows(text: &str) -> std::result::Result<Vec<EvalRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_HEADER.join(",").as_str()) {
        return Err("unexpected header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != EVAL_HEADER.len() {
                return Err(format!("bad row {l:?}"));
            }
            let f = |i: usize| c[i].parse::<f64>().map_err(|e| format!("{l:?}: {e}"));
            Ok(EvalRow {
                method: c[0].parse()?,
                target: c[1].to_string(),
                clean_offline: f(2)?,
                offline_mrr: f(3)?,
                clean_online: f(4)?,
                online_mrr: f(5)?,
                estimated_gain: f(6)?,
            })
        })
        .collect()
}

/// Retrains on every stored sequence and scores both systems, plus the
/// influence estimate.
pub fn evaluate(ws: &Workspace, models: &Models, methods: &[Method]) -> Result<Vec<EvalRow>> {
    let engine = ws.engine(models)?;
    let online_spec = ws.cfg.online_spec();
    let mut jobs = Vec::new();
    for &m in methods {
        for (n, seq) in ws.targets.iter().zip(read_sequences(ws, m)?) {
            jobs.push((m, *n, seq));
        }
    }
    par_map(ws.cfg.jobs, &jobs, |(method, n, seq)| {
        let data = ws.data.with_target(*n);
        let clean_offline = mrr(&models.offline, &data)?;
        let clean_online = mrr(&models.online, &data)?;
        let titles = edited_titles(&data, seq)?;
        let (offline_mrr, online_mrr, estimated_gain) = if titles.is_empty() {
            (clean_offline, clean_online, 0.0)
        } else {
            let after = data.with_titles(&titles, &ws.table);
            let eng = engine.with_target(*n)?;
            let est = eng.estimated_mrr(&after)? - eng.clean_mrr();
            (retrain_oracle(&ws.cfg.offline, &after)?.1, retrain_oracle(&online_spec, &after)?.1, est)
        };
        Ok(EvalRow {
            method: *method,
            target: ws.target_id(*n).to_string(),
            clean_offline,
            offline_mrr,
            clean_online,
            online_mrr,
            estimated_gain,
        })
    })
}

/// One method's aggregate over targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub offline_mrr: (f64, f64),
    pub online_mrr: (f64, f64),
    pub offline_gain: f64,
    pub online_gain: f64,
    pub estimated_gain: f64,
}

pub fn summarize(rows: &[EvalRow]) -> Vec<MethodSummary> {
    let mut out = Vec::new();
    for m in Method::ALL {
        let rs: Vec<&EvalRow> = rows.iter().filter(|r| r.method == m).collect();
        if rs.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&EvalRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        out.push(MethodSummary {
            method: m,
            offline_mrr: mean_std(&col(&|r| r.offline_mrr)),
            online_mrr: mean_std(&col(&|r| r.online_mrr)),
            offline_gain: mean_std(&col(&|r| r.offline_gain())).0,
            online_gain: mean_std(&col(&|r| r.online_gain())).0,
            estimated_gain: mean_std(&col(&|r| r.estimated_gain)).0,
        });
    }
    out
}

fn results_tables(summary: &[MethodSummary]) -> (String, String) {
    let header = [
        "method",
        "offline_mrr_mean",
        "offline_mrr_std",
        "online_mrr_mean",
        "online_mrr_std",
        "offline_gain",
        "online_gain",
        "estimated_gain",
    ];
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.method.to_string(),
                format!("{:?}", s.offline_mrr.0),
                format!("{:?}", s.offline_mrr.1),
                format!("{:?}", s.online_mrr.0),
                format!("{:?}", s.online_mrr.1),
                format!("{:?}", s.offline_gain),
                format!("{:?}", s.online_gain),
                format!("{:?}", s.estimated_gain),
            ]
        })
        .collect();
    let md_rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.method.to_string(),
                format!("{:.4}±{:.4}", s.offline_mrr.0, s.offline_mrr.1),
                format!("{:.4}±{:.4}", s.online_mrr.0, s.online_mrr.1),
                format!("{:+.4}", s.offline_gain),
                format!("{:+.4}", s.online_gain),
            ]
        })
        .collect();
    (
        csv(&header, &rows),
        markdown(&["method", "offline MRR", "online MRR", "offline gain", "online gain"], &md_rows),
    )
}

/// Wall-clock of the influence estimate against a full retrain on the same
/// edits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub samples: usize,
    pub estimate_secs: f64,
    pub retrain_secs: f64,
}

impl Timing {
    pub fn speedup(&self) -> f64 {
        self.retrain_secs / self.estimate_secs.max(f64::MIN_POSITIVE)
    }
}

/// Times the first `samples` non-empty sequences of `seqs`, one at a time.
pub fn measure_timing(
    ws: &Workspace,
    engine: &InfluenceEngine,
    seqs: &[(usize, Vec<Perturbation>)],
    samples: usize,
) -> Result<Timing> {
    let mut t = Timing {
        samples: 0,
        estimate_secs: 0.0,
        retrain_secs: 0.0,
    };
    for (n, seq) in seqs.iter().filter(|(_, s)| !s.is_empty()).take(samples) {
        let data = ws.data.with_target(*n);
        let after = data.with_titles(&edited_titles(&data, seq)?, &ws.table);
        let eng = engine.with_target(*n)?;
        let start = Instant::now();
        eng.estimated_mrr(&after)?;
        t.estimate_secs += start.elapsed().as_secs_f64();
        let start = Instant::now();
        retrain_oracle(&ws.cfg.offline, &after)?;
        t.retrain_secs += start.elapsed().as_secs_f64();
        t.samples += 1;
    }
    Ok(t)
}

pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MethodSummary>,
    pub timing: Timing,
}

/// Methods with stored sequences, always including `none`.
pub fn stored_methods(ws: &Workspace) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|&m| m == Method::None || ws.out(&format!("attack/{m}")).is_dir())
        .collect()
}

pub fn cmd_eval(ws: &Workspace) -> Result<EvalOutput> {
    let models = ws.load_models()?;
    let methods = stored_methods(ws);
    let rows = evaluate(ws, &models, &methods)?;
    let summary = summarize(&rows);
    let (res_csv, res_md) = results_tables(&summary);
    write_file(
        &ws.out("eval/per_target.csv"),
        &csv(&EVAL_HEADER, &rows.iter().map(eval_row_fields).collect::<Vec<_>>()),
    )?;
    write_file(&ws.out("eval/results.csv"), &res_csv)?;
    write_file(&ws.out("eval/results.md"), &res_md)?;
    let engine = ws.engine(&models)?;
    let mut seqs = Vec::new();
    for &m in methods.iter().rev() {
        seqs.extend(ws.targets.iter().copied().zip(read_sequences(ws, m)?));
    }
    let timing = measure_timing(ws, &engine, &seqs, ws.cfg.timing_samples)?;
    write_file(
        &ws.out("eval/timing.csv"),
        &csv(
            &["samples", "estimate_secs", "retrain_secs", "speedup"],
            &[vec![
                timing.samples.to_string(),
                format!("{:?}", timing.estimate_secs),
                format!("{:?}", timing.retrain_secs),
                format!("{:?}", timing.speedup()),
            ]],
        ),
    )?;
    Ok(EvalOutput { rows, summary, timing })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationRow {
    pub method: Method,
    pub offline_gain: f64,
    pub online_gain: f64,
}

impl DeviationRow {
    pub fn deviation(&self) -> f64 {
        self.online_gain - self.offline_gain
    }
}

pub fn cmd_deviation(ws: &Workspace) -> Result<Vec<DeviationRow>> {
    let path = ws.out("eval/per_target.csv");
    let rows = parse_eval_rows(&read_artifact(&path)?).map_err(|_| HarnessError::StaleArtifact(path))?;
    let out: Vec<DeviationRow> = summarize(&rows)
        .into_iter()
        .map(|s| DeviationRow {
            method: s.method,
            offline_gain: s.offline_gain,
            online_gain: s.online_gain,
        })
        .collect();
    let tdp = out.iter().find(|r| r.method == Method::TdpCp).map(|r| r.offline_gain);
    let rel = |d: f64| tdp.filter(|g| *g != 0.0).map(|g| d.abs() / g.abs());
    let csv_rows: Vec<Vec<String>> = out
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                format!("{:?}", r.offline_gain),
                format!("{:?}", r.online_gain),
                format!("{:?}", r.deviation()),
                rel(r.deviation()).map_or(String::new(), |x| format!("{x:?}")),
            ]
        })
        .collect();
    let md_rows: Vec<Vec<String>> = out
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                format!("{:+.4}", r.offline_gain),
                format!("{:+.4}", r.online_gain),
                format!("{:+.5}", r.deviation()),
                rel(r.deviation()).map_or("n/a".into(), |x| format!("{:.1}%", 100.0 * x)),
            ]
        })
        .collect();
    write_file(
        &ws.out("deviation/deviation.csv"),
        &csv(
            &["method", "offline_gain", "online_gain", "deviation", "relative_to_tdp_cp"],
            &csv_rows,
        ),
    )?;
    write_file(
        &ws.out("deviation/deviation.md"),
        &markdown(
            &["method", "offline gain", "online gain", "deviation", "|deviation| / TDP-CP gain"],
            &md_rows,
        ),
    )?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub budget: f64,
    pub horizon: usize,
    pub mrr_gain: f64,
}

pub fn cmd_sweep(ws: &Workspace) -> Result<Vec<SweepCell>> {
    let models = ws.load_models()?;
    let engine = ws.engine(&models)?;
    let method = ws.cfg.sweep_method;
    let grid: Vec<(f64, usize)> = ws
        .cfg
        .sweep_budgets
        .iter()
        .flat_map(|&b| ws.cfg.sweep_horizons.iter().map(move |&h| (b, h)))
        .collect();
    let per_target = par_map(ws.cfg.jobs, &ws.targets, |&n| {
        let env = ws.env(&engine, n, ws.cfg.env.clone())?;
        grid.iter()
            .map(|&(budget, horizon)| {
                let e = env.with_config(EnvConfig {
                    budget,
                    horizon,
                    ..ws.cfg.env.clone()
                });
                Ok(run_method(&e, method, &ws.agent_config(n), ws.cfg.random_seed, n)?.episode.gain)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let cells: Vec<SweepCell> = grid
        .iter()
        .enumerate()
        .map(|(i, &(budget, horizon))| SweepCell {
            budget,
            horizon,
            mrr_gain: mean_std(&per_target.iter().map(|g| g[i]).collect::<Vec<_>>()).0,
        })
        .collect();
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| vec![format!("{:?}", c.budget), c.horizon.to_string(), format!("{:?}", c.mrr_gain)])
        .collect();
    write_file(
        &ws.out(&format!("sweep/{method}.csv")),
        &csv(&["budget", "horizon", "mrr_gain"], &rows),
    )?;
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsAblation {
    /// `(variant, mean curve over targets)`.
    pub curves: Vec<(Variant, Vec<CurvePoint>)>,
    /// `(variant, gain of the best greedy checkpoint per target)`.
    pub final_gains: Vec<(Variant, Vec<f64>)>,
}

impl HsAblation {
    pub fn mean_final(&self, v: Variant) -> f64 {
        self.final_gains
            .iter()
            .find(|(x, _)| *x == v)
            .map_or(f64::NAN, |(_, g)| mean_std(g).0)
    }
}

pub const VARIANTS: [Variant; 3] = [Variant::Hs, Variant::NonHs, Variant::RandomHs];

pub fn ablate_hs(ws: &Workspace, engine: &InfluenceEngine) -> Result<HsAblation> {
    let jobs: Vec<(Variant, usize)> = VARIANTS
        .iter()
        .flat_map(|&v| ws.targets.iter().map(move |&n| (v, n)))
        .collect();
    let runs = par_map(ws.cfg.jobs, &jobs, |&(variant, n)| {
        let env = ws.env(engine, n, ws.cfg.env.clone())?;
        let cfg = AgentConfig {
            variant,
            ..ws.agent_config(n)
        };
        Ok(train_agent(&env, &cfg)?)
    })?;
    let mut curves = Vec::new();
    let mut final_gains = Vec::new();
    for v in VARIANTS {
        let rs: Vec<_> = jobs.iter().zip(&runs).filter(|((x, _), _)| *x == v).map(|(_, r)| r).collect();
        let len = rs.iter().map(|r| r.curve.len()).min().unwrap_or(0);
        let curve = (0..len)
            .map(|i| CurvePoint {
                episode: rs[0].curve[i].episode,
                gain: mean_std(&rs.iter().map(|r| r.curve[i].gain).collect::<Vec<_>>()).0,
            })
            .collect();
        curves.push((v, curve));
        final_gains.push((v, rs.iter().map(|r| r.best.gain).collect()));
    }
    Ok(HsAblation { curves, final_gains })
}

/// Rule picking the checkpoint whose sequence enters the risk quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRule {
    /// First checkpoint reaching the configured fraction of FULL's gain.
    OfFull,
    /// First checkpoint whose gain reaches the configured fraction of the
    /// clean MRR.
    OverNone,
    /// Best checkpoint.
    Best,
}

impl MatchRule {
    pub fn name(self) -> &'static str {
        match self {
            MatchRule::OfFull => "of_full",
            MatchRule::OverNone => "over_none",
            MatchRule::Best => "best",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub rule: MatchRule,
    pub mode: RiskMode,
    pub perturbations: usize,
    /// Share per popularity quartile, bin 0 = most clicked quarter.
    pub popularity: [f64; 4],
    /// Share per similarity quartile, bin 0 = most similar quarter.
    pub similarity: [f64; 4],
    pub mean_gain: f64,
    /// Targets whose run met the matching threshold.
    pub reached: usize,
}

pub const RISK_MODES: [RiskMode; 3] = [RiskMode::Full, RiskMode::NoFrequency, RiskMode::NoSimilarity];

/// Popularity bin by dataset index for viewed news: descending click
/// count, ties by ascending index.
fn popularity_bins(data: &Dataset) -> BTreeMap<usize, usize> {
    let mut viewed = data.viewed().to_vec();
    viewed.sort_by(|a, b| data.clickers(*b).len().cmp(&data.clickers(*a).len()).then(a.cmp(b)));
    let len = viewed.len();
    viewed.into_iter().enumerate().map(|(r, n)| (n, rank_quartile(r, len))).collect()
}

/// Ascending distances of every valid pair on the clean viewed titles.
fn pair_distances(env: &AttackEnv) -> Vec<f64> {
    let data = env.data();
    let mut out = Vec::new();
    for &n in data.viewed() {
        let art = crate::corpus::NewsArticle {
            id: data.news_id(n).clone(),
            title: data.title(n).to_vec(),
            category: None,
        };
        for p in word_pairs(&art, env.target()) {
            out.push(env.table().word_distance(&p.old, &p.new));
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

pub fn ablate_risk(ws: &Workspace, engine: &InfluenceEngine) -> Result<Vec<RiskRow>> {
    let env_cfg = |mode| EnvConfig {
        budget: ws.cfg.risk_budget,
        risk_mode: mode,
        ..ws.cfg.env.clone()
    };
    let jobs: Vec<(RiskMode, usize)> = RISK_MODES
        .iter()
        .flat_map(|&m| ws.targets.iter().map(move |&n| (m, n)))
        .collect();
    let runs = par_map(ws.cfg.jobs, &jobs, |&(mode, n)| {
        let env = ws.env(engine, n, env_cfg(mode))?;
        let t = train_agent(&env, &ws.agent_config(n))?;
        Ok((t, env.reward_model().clean_mrr(), pair_distances(&env)))
    })?;
    let pop = popularity_bins(&ws.data);
    let full_best: BTreeMap<usize, f64> = jobs
        .iter()
        .zip(&runs)
        .filter(|((m, _), _)| *m == RiskMode::Full)
        .map(|((_, n), (t, _, _))| (*n, t.best.gain))
        .collect();
    let f = ws.cfg.match_fraction;
    let mut out = Vec::new();
    for rule in [MatchRule::OfFull, MatchRule::OverNone, MatchRule::Best] {
        for mode in RISK_MODES {
            let mut pop_bins = Vec::new();
            let mut sim_bins = Vec::new();
            let mut gains = Vec::new();
            let mut reached = 0;
            for ((m, n), (t, clean, dists)) in jobs.iter().zip(&runs) {
                if *m != mode {
                    continue;
                }
                let threshold = match rule {
                    MatchRule::OfFull => Some(f * full_best[n]),
                    MatchRule::OverNone => Some(f * clean),
                    MatchRule::Best => None,
                };
                let hit = threshold.and_then(|th| t.evaluations.iter().find(|e| e.gain > 0.0 && e.gain >= th));
                if hit.is_some() {
                    reached += 1;
                }
                let ep = hit.unwrap_or(&t.best);
                gains.push(ep.gain);
                for p in &ep.perturbations {
                    let idx = ws
                        .data
                        .news_index(&p.news)
                        .ok_or_else(|| CorpusError::UnknownNewsId(p.news.clone()))?;
                    pop_bins.push(pop[&idx]);
                    sim_bins.push(value_quartile(ws.table.word_distance(&p.old_word, &p.new_word), dists));
                }
            }
            out.push(RiskRow {
                rule,
                mode,
                perturbations: pop_bins.len(),
                popularity: shares(&pop_bins),
                similarity: shares(&sim_bins),
                mean_gain: mean_std(&gains).0,
                reached,
            });
        }
    }
    Ok(out)
}

pub enum AblationOutput {
    Hs(HsAblation),
    Risk(Vec<RiskRow>),
}

pub fn cmd_ablate(ws: &Workspace, kind: AblationKind) -> Result<AblationOutput> {
    let models = ws.load_models()?;
    let engine = ws.engine(&models)?;
    match kind {
        AblationKind::Hs => {
            let ab = ablate_hs(ws, &engine)?;
            let len = ab.curves.iter().map(|(_, c)| c.len()).min().unwrap_or(0);
            let rows: Vec<Vec<String>> = (0..len)
                .map(|i| {
                    let mut r = vec![ab.curves[0].1[i].episode.to_string()];
                    r.extend(ab.curves.iter().map(|(_, c)| format!("{:?}", c[i].gain)));
                    r
                })
                .collect();
            let names: Vec<String> = VARIANTS.iter().map(|v| v.to_string()).collect();
            let mut header = vec!["episode"];
            header.extend(names.iter().map(String::as_str));
            write_file(&ws.out("ablate/hs_curves.csv"), &csv(&header, &rows))?;
            let final_rows: Vec<Vec<String>> = ab
                .final_gains
                .iter()
                .map(|(v, g)| {
                    let (m, s) = mean_std(g);
                    vec![v.to_string(), format!("{m:?}"), format!("{s:?}")]
                })
                .collect();
            write_file(
                &ws.out("ablate/hs.csv"),
                &csv(&["variant", "final_gain_mean", "final_gain_std"], &final_rows),
            )?;
            let md: Vec<Vec<String>> = ab
                .final_gains
                .iter()
                .map(|(v, g)| vec![v.to_string(), fmt_mean_std(g)])
                .collect();
            write_file(&ws.out("ablate/hs.md"), &markdown(&["variant", "final gain"], &md))?;
            Ok(AblationOutput::Hs(ab))
        }
        AblationKind::Risk => {
            let rows = ablate_risk(ws, &engine)?;
            let q = |a: &[f64; 4]| a.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>();
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.rule.name().to_string(), r.mode.to_string(), r.perturbations.to_string()];
                    v.extend(q(&r.popularity));
                    v.extend(q(&r.similarity));
                    v.push(format!("{:?}", r.mean_gain));
                    v.push(r.reached.to_string());
                    v
                })
                .collect();
            write_file(
                &ws.out("ablate/risk.csv"),
                &csv(
                    &[
                        "rule",
                        "mode",
                        "perturbations",
                        "pop_0_25",
                        "pop_25_50",
                        "pop_50_75",
                        "pop_75_100",
                        "sim_0_25",
                        "sim_25_50",
                        "sim_50_75",
                        "sim_75_100",
                        "mean_gain",
                        "reached",
                    ],
                    &csv_rows,
                ),
            )?;
            let pct = |a: &[f64; 4]| a.iter().map(|x| format!("{:.0}%", 100.0 * x)).collect::<Vec<_>>().join(" / ");
            let md: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.rule.name().to_string(),
                        r.mode.to_string(),
                        r.perturbations.to_string(),
                        pct(&r.popularity),
                        pct(&r.similarity),
                        format!("{:+.4}", r.mean_gain),
                    ]
                })
                .collect();
            write_file(
                &ws.out("ablate/risk.md"),
                &markdown(
                    &["rule", "mode", "perturbations", "popularity quartiles", "similarity quartiles", "gain"],
                    &md,
                ),
            )?;
            Ok(AblationOutput::Risk(rows))
        }
    }
}
