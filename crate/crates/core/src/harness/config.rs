//! Plain-text `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::agent::{AgentConfig, EnvConfig, Variant};
use crate::corpus::SynthSpec;
use crate::influence::{InfluenceConfig, InfluenceForm};
use crate::recommender::{EnsembleSpec, ModelKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}` ({value:?}): {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("override `--{0}` has no value")]
    MissingValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    None,
    Random,
    Effective,
    TdpCp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Random, Method::Effective, Method::TdpCp];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Random => "random",
            Method::Effective => "effective",
            Method::TdpCp => "tdp-cp",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "none" => Ok(Method::None),
            "random" => Ok(Method::Random),
            "effective" => Ok(Method::Effective),
            "tdp-cp" | "tdpcp" | "agent" => Ok(Method::TdpCp),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Hs,
    Risk,
}

impl FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hs" => Ok(AblationKind::Hs),
            "risk" => Ok(AblationKind::Risk),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationKind::Hs => "hs",
            AblationKind::Risk => "risk",
        })
    }
}

/// Which news the attack promotes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSpec {
    /// This many candidates, drawn by a seeded shuffle.
    Count(usize),
    Ids(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    Hashed { oov_seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// MIND directory; synthesized from `synth` when absent.
    pub corpus_dir: Option<PathBuf>,
    pub synth: SynthSpec,
    pub embeddings: EmbeddingSource,
    pub dim: usize,
    pub neg_k: usize,
    pub data_seed: u64,
    pub offline: EnsembleSpec,
    pub online: (ModelKind, u64),
    pub influence: InfluenceConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub method: Method,
    pub oracle_reward: bool,
    pub targets: TargetSpec,
    pub target_seed: u64,
    pub random_seed: u64,
    pub sweep_budgets: Vec<f64>,
    pub sweep_horizons: Vec<usize>,
    pub sweep_method: Method,
    pub ablate: AblationKind,
    pub risk_budget: f64,
    pub match_fraction: f64,
    pub timing_samples: usize,
    pub output: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            corpus_dir: None,
            synth: SynthSpec::default(),
            embeddings: EmbeddingSource::Hashed { oov_seed: 1 },
            dim: 16,
            neg_k: 4,
            data_seed: 3,
            offline: EnsembleSpec {
                members: vec![(ModelKind::MeanpoolLr, 11), (ModelKind::TinyMlp { hidden: 8 }, 12)],
                weights: vec![0.5, 0.5],
                train,
            },
            online: (ModelKind::TinyMlp { hidden: 12 }, 99),
            influence: InfluenceConfig::default(),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            method: Method::TdpCp,
            oracle_reward: false,
            targets: TargetSpec::Count(20),
            target_seed: 5,
            random_seed: 17,
            sweep_budgets: vec![5.0, 10.0, 20.0, 40.0],
            sweep_horizons: vec![0, 5, 10, 20, 30],
            sweep_method: Method::Effective,
            ablate: AblationKind::Hs,
            risk_budget: 10.0,
            match_fraction: 0.8,
            timing_samples: 5,
            output: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got {other:?}")),
    }
}

/// `kind@seed`, e.g. `tiny_mlp:8@12`.
fn parse_member(s: &str) -> Result<(ModelKind, u64), String> {
    let (kind, seed) = s.split_once('@').ok_or_else(|| format!("{s:?}: expected kind@seed"))?;
    let seed = seed.trim().parse::<u64>().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((kind.parse()?, seed))
}

fn fmt_member((kind, seed): &(ModelKind, u64)) -> String {
    format!("{kind}@{seed}")
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `--key value` pairs; `--key=value` is accepted too.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(ConfigError::Syntax {
                line: 0,
                text: a.clone(),
            });
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let v = it.next().ok_or_else(|| ConfigError::MissingValue(key.to_string()))?;
        out.push((key.replace('-', "_"), v.clone()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_pairs(parse_pairs(&text)?.iter().chain(overrides))
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = &'a (String, String)>,
    {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        let v = value.trim();
        match key {
            "corpus_dir" => self.corpus_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "synth_seed" => self.synth.seed = num(v).map_err(bad)?,
            "users" => self.synth.users = num(v).map_err(bad)?,
            "news" => self.synth.news = num(v).map_err(bad)?,
            "candidates" => self.synth.candidates = num(v).map_err(bad)?,
            "title_len" => self.synth.title_len = num(v).map_err(bad)?,
            "vocab_size" => self.synth.vocab_size = num(v).map_err(bad)?,
            "topics" => self.synth.topics = num(v).map_err(bad)?,
            "min_history" => self.synth.min_history = num(v).map_err(bad)?,
            "max_history" => self.synth.max_history = num(v).map_err(bad)?,
            "popularity_exponent" => self.synth.popularity_exponent = num(v).map_err(bad)?,
            "topic_purity" => self.synth.topic_purity = num(v).map_err(bad)?,
            "embeddings" => {
                self.embeddings = match v {
                    "hashed" => match &self.embeddings {
                        EmbeddingSource::Hashed { oov_seed } => EmbeddingSource::Hashed { oov_seed: *oov_seed },
                        EmbeddingSource::File(_) => EmbeddingSource::Hashed { oov_seed: 1 },
                    },
                    path => EmbeddingSource::File(PathBuf::from(path)),
                }
            }
            "oov_seed" => {
                self.embeddings = EmbeddingSource::Hashed {
                    oov_seed: num(v).map_err(bad)?,
                }
            }
            "dim" => self.dim = num(v).map_err(bad)?,
            "neg_k" => self.neg_k = num(v).map_err(bad)?,
            "data_seed" => self.data_seed = num(v).map_err(bad)?,
            "offline_models" => self.offline.members = list::<String>(v)
                .and_then(|ms| ms.iter().map(|m| parse_member(m)).collect())
                .map_err(bad)?,
            "offline_weights" => self.offline.weights = list(v).map_err(bad)?,
            "online_model" => self.online = parse_member(v).map_err(bad)?,
            "train_epochs" => self.offline.train.epochs = num(v).map_err(bad)?,
            "train_lr" => self.offline.train.lr = num(v).map_err(bad)?,
            "l2" => {
                self.offline.train.l2 = num(v).map_err(bad)?;
                self.influence.l2 = self.offline.train.l2;
            }
            "newton_steps" => self.offline.train.newton_steps = num(v).map_err(bad)?,
            "grad_tol" => self.offline.train.grad_tol = num(v).map_err(bad)?,
            "damping" => self.influence.damping = num(v).map_err(bad)?,
            "cg_tolerance" => self.influence.cg_tolerance = num(v).map_err(bad)?,
            "cg_max_iters" => self.influence.cg_max_iters = num(v).map_err(bad)?,
            "explicit_hessian_cap" => self.influence.explicit_hessian_cap = num(v).map_err(bad)?,
            "influence_form" => {
                self.influence.form = match v {
                    "difference" => InfluenceForm::Difference,
                    "upweight" => InfluenceForm::Upweight,
                    other => return Err(bad(format!("unknown form {other:?}"))),
                }
            }
            "epsilon" => {
                self.influence.epsilon = if v == "auto" {
                    None
                } else {
                    Some(num(v).map_err(bad)?)
                }
            }
            "budget" => self.env.budget = num(v).map_err(bad)?,
            "horizon" => self.env.horizon = num(v).map_err(bad)?,
            "gamma" => self.env.gamma = num(v).map_err(bad)?,
            "risk_mode" => self.env.risk_mode = v.parse().map_err(bad)?,
            "lr" => self.agent.lr = num(v).map_err(bad)?,
            "episodes" => self.agent.episodes = num(v).map_err(bad)?,
            "hidden" => self.agent.hidden = num(v).map_err(bad)?,
            "head" => self.agent.head = num(v).map_err(bad)?,
            "replay_capacity" => self.agent.replay_capacity = num(v).map_err(bad)?,
            "batch" => self.agent.batch = num(v).map_err(bad)?,
            "updates_per_episode" => self.agent.updates_per_episode = num(v).map_err(bad)?,
            "tau_start" => self.agent.tau_start = num(v).map_err(bad)?,
            "tau_end" => self.agent.tau_end = num(v).map_err(bad)?,
            "checkpoint_every" => self.agent.checkpoint_every = num(v).map_err(bad)?,
            "reward_scale" => self.agent.reward_scale = num(v).map_err(bad)?,
            "variant" => self.agent.variant = v.parse::<Variant>().map_err(bad)?,
            "agent_seed" => self.agent.seed = num(v).map_err(bad)?,
            "method" => self.method = v.parse().map_err(bad)?,
            "oracle_reward" => self.oracle_reward = parse_bool(v).map_err(bad)?,
            "targets" => {
                self.targets = match v.parse::<usize>() {
                    Ok(n) => TargetSpec::Count(n),
                    Err(_) => TargetSpec::Ids(list(v).map_err(bad)?),
                }
            }
            "target_seed" => self.target_seed = num(v).map_err(bad)?,
            "random_seed" => self.random_seed = num(v).map_err(bad)?,
            "sweep_budgets" => self.sweep_budgets = list(v).map_err(bad)?,
            "sweep_horizons" => self.sweep_horizons = list(v).map_err(bad)?,
            "sweep_method" => self.sweep_method = v.parse().map_err(bad)?,
            "ablate" => self.ablate = v.parse().map_err(bad)?,
            "risk_budget" => self.risk_budget = num(v).map_err(bad)?,
            "match_fraction" => self.match_fraction = num(v).map_err(bad)?,
            "timing_samples" => self.timing_samples = num(v).map_err(bad)?,
            "output" => self.output = PathBuf::from(v),
            "jobs" => self.jobs = num(v).map_err(bad)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| ConfigError::BadValue {
            key: key.into(),
            value,
            reason: reason.into(),
        };
        if self.dim == 0 {
            return Err(bad("dim", "0".into(), "must be >= 1"));
        }
        if self.offline.members.is_empty() {
            return Err(bad("offline_models", String::new(), "need at least one model"));
        }
        if self.offline.members.len() != self.offline.weights.len() {
            return Err(bad(
                "offline_weights",
                join(&self.offline.weights),
                "one weight per offline model",
            ));
        }
        let total: f64 = self.offline.weights.iter().sum();
        if self.offline.weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(bad(
                "offline_weights",
                join(&self.offline.weights),
                "weights must be non-negative and sum to 1",
            ));
        }
        if !(self.env.budget >= 0.0) {
            return Err(bad("budget", self.env.budget.to_string(), "must be >= 0"));
        }
        if !(self.env.gamma > 0.0 && self.env.gamma <= 1.0) {
            return Err(bad("gamma", self.env.gamma.to_string(), "must be in (0, 1]"));
        }
        if self.agent.episodes == 0 {
            return Err(bad("episodes", "0".into(), "must be >= 1"));
        }
        if !(self.agent.tau_end > 0.0 && self.agent.tau_start > 0.0) {
            return Err(bad("tau_end", self.agent.tau_end.to_string(), "temperatures must be > 0"));
        }
        if self.agent.batch == 0 || self.agent.replay_capacity == 0 {
            return Err(bad("batch", self.agent.batch.to_string(), "batch and replay capacity must be >= 1"));
        }
        if !(self.agent.lr > 0.0) {
            return Err(bad("lr", self.agent.lr.to_string(), "must be > 0"));
        }
        if let TargetSpec::Count(0) = self.targets {
            return Err(bad("targets", "0".into(), "need at least one target"));
        }
        if self.sweep_budgets.is_empty() || self.sweep_horizons.is_empty() {
            return Err(bad("sweep_budgets", join(&self.sweep_budgets), "sweep grids must be non-empty"));
        }
        if !(self.match_fraction > 0.0 && self.match_fraction <= 1.0) {
            return Err(bad("match_fraction", self.match_fraction.to_string(), "must be in (0, 1]"));
        }
        self.influence.validate().map_err(|e| bad("damping", self.influence.damping.to_string(), &e.to_string()))?;
        Ok(())
    }

    pub fn online_spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            members: vec![self.online],
            weights: vec![1.0],
            train: self.offline.train.clone(),
        }
    }

    /// Canonical `key = value` rendering; parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        if let Some(d) = &self.corpus_dir {
            m.insert("corpus_dir", d.display().to_string());
        }
        let s = &self.synth;
        m.insert("synth_seed", s.seed.to_string());
        m.insert("users", s.users.to_string());
        m.insert("news", s.news.to_string());
        m.insert("candidates", s.candidates.to_string());
        m.insert("title_len", s.title_len.to_string());
        m.insert("vocab_size", s.vocab_size.to_string());
        m.insert("topics", s.topics.to_string());
        m.insert("min_history", s.min_history.to_string());
        m.insert("max_history", s.max_history.to_string());
        m.insert("popularity_exponent", format!("{:?}", s.popularity_exponent));
        m.insert("topic_purity", format!("{:?}", s.topic_purity));
        match &self.embeddings {
            EmbeddingSource::Hashed { oov_seed } => {
                m.insert("embeddings", "hashed".into());
                m.insert("oov_seed", oov_seed.to_string());
            }
            EmbeddingSource::File(p) => {
                m.insert("embeddings", p.display().to_string());
            }
        }
        m.insert("dim", self.dim.to_string());
        m.insert("neg_k", self.neg_k.to_string());
        m.insert("data_seed", self.data_seed.to_string());
        m.insert(
            "offline_models",
            self.offline.members.iter().map(fmt_member).collect::<Vec<_>>().join(","),
        );
        m.insert(
            "offline_weights",
            self.offline.weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(","),
        );
        m.insert("online_model", fmt_member(&self.online));
        let t = &self.offline.train;
        m.insert("train_epochs", t.epochs.to_string());
        m.insert("train_lr", format!("{:?}", t.lr));
        m.insert("l2", format!("{:?}", t.l2));
        m.insert("newton_steps", t.newton_steps.to_string());
        m.insert("grad_tol", format!("{:?}", t.grad_tol));
        let i = &self.influence;
        m.insert("damping", format!("{:?}", i.damping));
        m.insert("cg_tolerance", format!("{:?}", i.cg_tolerance));
        m.insert("cg_max_iters", i.cg_max_iters.to_string());
        m.insert("explicit_hessian_cap", i.explicit_hessian_cap.to_string());
        m.insert(
            "influence_form",
            match i.form {
                InfluenceForm::Difference => "difference",
                InfluenceForm::Upweight => "upweight",
            }
            .into(),
        );
        m.insert("epsilon", i.epsilon.map_or("auto".into(), |e| format!("{e:?}")));
        m.insert("budget", format!("{:?}", self.env.budget));
        m.insert("horizon", self.env.horizon.to_string());
        m.insert("gamma", format!("{:?}", self.env.gamma));
        m.insert("risk_mode", self.env.risk_mode.to_string());
        let a = &self.agent;
        m.insert("lr", format!("{:?}", a.lr));
        m.insert("episodes", a.episodes.to_string());
        m.insert("hidden", a.hidden.to_string());
        m.insert("head", a.head.to_string());
        m.insert("replay_capacity", a.replay_capacity.to_string());
        m.insert("batch", a.batch.to_string());
        m.insert("updates_per_episode", a.updates_per_episode.to_string());
        m.insert("tau_start", format!("{:?}", a.tau_start));
        m.insert("tau_end", format!("{:?}", a.tau_end));
        m.insert("checkpoint_every", a.checkpoint_every.to_string());
        m.insert("reward_scale", format!("{:?}", a.reward_scale));
        m.insert("variant", a.variant.to_string());
        m.insert("agent_seed", a.seed.to_string());
        m.insert("method", self.method.to_string());
        m.insert("oracle_reward", self.oracle_reward.to_string());
        m.insert(
            "targets",
            match &self.targets {
                TargetSpec::Count(n) => n.to_string(),
                TargetSpec::Ids(ids) => ids.join(","),
            },
        );
        m.insert("target_seed", self.target_seed.to_string());
        m.insert("random_seed", self.random_seed.to_string());
        m.insert(
            "sweep_budgets",
            self.sweep_budgets.iter().map(|b| format!("{b:?}")).collect::<Vec<_>>().join(","),
        );
        m.insert("sweep_horizons", join(&self.sweep_horizons));
        m.insert("sweep_method", self.sweep_method.to_string());
        m.insert("ablate", self.ablate.to_string());
        m.insert("risk_budget", format!("{:?}", self.risk_budget));
        m.insert("match_fraction", format!("{:?}", self.match_fraction));
        m.insert("timing_samples", self.timing_samples.to_string());
        m.insert("output", self.output.display().to_string());
        m.insert("jobs", self.jobs.to_string());
        let mut out = String::new();
        for (k, v) in m {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.offline.train
    }
}
