//! The attack MDP, the tree-structured Q policy and its training loop, and
//! the baseline attackers.

mod env;
mod policy;
mod replay;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use env::{edited_titles, AttackEnv, AttackState, EnvConfig, RewardModel};
pub use policy::{NodeRef, Policy, PolicyShape, ReplayEntry};
pub use replay::ReplayBuffer;

use crate::corpus::CorpusError;
use crate::hiertree::{
    build_content_tree, build_news_tree, word_pairs, EffTree, HiertreeError, LeafOrder,
    SampleMode, WordPair,
};
use crate::influence::InfluenceError;
use crate::recommender::{Adam, RecommenderError};
use crate::risk::{news_effectiveness, word_effectiveness, Perturbation};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tree(#[from] HiertreeError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Recommender(#[from] RecommenderError),
    #[error("replay loss became non-finite")]
    DivergedLoss,
    #[error("{0}")]
    Mismatch(String),
}

/// Which action structure the policy samples through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Hs,
    /// One flat Boltzmann choice over every (news, pair) action.
    NonHs,
    /// Trees with seeded random leaf order.
    RandomHs,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hs" => Ok(Variant::Hs),
            "non_hs" => Ok(Variant::NonHs),
            "random_hs" => Ok(Variant::RandomHs),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Hs => "hs",
            Variant::NonHs => "non_hs",
            Variant::RandomHs => "random_hs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub episodes: usize,
    pub lr: f64,
    pub hidden: usize,
    pub head: usize,
    pub replay_capacity: usize,
    pub batch: usize,
    pub updates_per_episode: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub checkpoint_every: usize,
    /// Multiplies the MRR gain before it becomes a regression target.
    pub reward_scale: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            episodes: 2000,
            lr: 0.001,
            hidden: 64,
            head: 256,
            replay_capacity: 10_000,
            batch: 32,
            updates_per_episode: 4,
            tau_start: 1.0,
            tau_end: 0.1,
            checkpoint_every: 50,
            reward_scale: 100.0,
            variant: Variant::Hs,
            seed: 0,
        }
    }
}

/// One visited step: the recurrent inputs and every node scored to pick
/// the action.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub nodes: Vec<NodeRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub perturbations: Vec<Perturbation>,
    pub spent: f64,
    /// MRR gain of the whole sequence.
    pub gain: f64,
    pub steps: Vec<StepTrace>,
    /// `G_t = γ^{T_end - t} · r` with `r` the scaled gain, per step.
    pub returns: Vec<f64>,
}

impl Episode {
    fn empty() -> Self {
        Episode {
            perturbations: Vec::new(),
            spent: 0.0,
            gain: 0.0,
            steps: Vec::new(),
            returns: Vec::new(),
        }
    }
}

/// `γ^{L-1-t} · r` for `t = 0..L`.
pub fn discounted_returns(len: usize, reward: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut g = reward;
    for t in (0..len).rev() {
        out[t] = g;
        g *= gamma;
    }
    out
}

fn fnv(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Trees plus the learned policy for one attack.
pub struct Agent {
    pub policy: Policy,
    variant: Variant,
    seed: u64,
    news_tree: EffTree<usize>,
    content: HashMap<(usize, Vec<String>), Option<Arc<EffTree<WordPair>>>>,
}

impl Agent {
    pub fn new(env: &AttackEnv, cfg: &AgentConfig) -> Result<Self, AgentError> {
        let data = env.data();
        let order = match cfg.variant {
            Variant::RandomHs => LeafOrder::Random(cfg.seed ^ 0x6e65_7773),
            _ => LeafOrder::Effectiveness,
        };
        let news_tree = build_news_tree(env.corpus(), env.table(), env.target(), order, cfg.seed)?
            .map_payloads(|id| data.news_index(&id).ok_or(CorpusError::UnknownNewsId(id)))?;
        let max_title = data.viewed().iter().map(|&n| data.title(n).len()).max().unwrap_or(1);
        let target_words: BTreeSet<&String> = env.target().title.iter().collect();
        let shape = PolicyShape {
            dim: env.table().dim(),
            hidden: cfg.hidden,
            head: cfg.head,
            news_rows: news_tree.leaf_count() - 1,
            content_rows: (max_title * target_words.len()).max(1) - 1,
        };
        Ok(Agent {
            policy: Policy::new(shape, cfg.seed),
            variant: cfg.variant,
            seed: cfg.seed,
            news_tree,
            content: HashMap::new(),
        })
    }

    pub fn news_tree(&self) -> &EffTree<usize> {
        &self.news_tree
    }

    /// Content tree of the news' current title, `None` without valid pairs.
    pub fn content_tree(&mut self, state: &AttackState<'_>, news: usize) -> Result<Option<Arc<EffTree<WordPair>>>, AgentError> {
        let key = (news, state.title(news).to_vec());
        if let Some(t) = self.content.get(&key) {
            return Ok(t.clone());
        }
        let order = match self.variant {
            Variant::RandomHs => {
                LeafOrder::Random(self.seed ^ fnv(key.1.iter().flat_map(|w| w.bytes().chain([0]))) ^ news as u64)
            }
            _ => LeafOrder::Effectiveness,
        };
        let built = match build_content_tree(&state.article(news), state.env().target(), state.env().table(), order, 0) {
            Ok(t) => Some(Arc::new(t)),
            Err(HiertreeError::NoValidPairs(_)) => None,
            Err(e) => return Err(e.into()),
        };
        self.content.insert(key, built.clone());
        Ok(built)
    }

    fn tree_nodes<P>(tree: &EffTree<P>, nodes: &[usize], internal: fn(usize) -> NodeRef) -> Vec<NodeRef> {
        nodes
            .iter()
            .map(|&h| {
                if tree.is_leaf(h) {
                    NodeRef::Fixed(tree.leaf_embedding(tree.leaf_rank(h)).to_vec())
                } else {
                    internal(h)
                }
            })
            .collect()
    }

    /// Two-stage choice; `None` when the chosen news has no valid pair on
    /// two consecutive draws.
    pub fn select_action<R: Rng + ?Sized>(
        &mut self,
        state: &AttackState<'_>,
        proj: &[f64],
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<Option<(usize, WordPair, Vec<NodeRef>)>, AgentError> {
        if self.variant == Variant::NonHs {
            return self.select_flat(state, proj, mode, rng);
        }
        for _ in 0..2 {
            let s1 = self.news_tree.sample_path_with(self.policy.news_internal(), proj, mode, rng)?;
            let news = *self.news_tree.payload(s1.leaf);
            let Some(tree) = self.content_tree(state, news)? else {
                continue;
            };
            let s2 = tree.sample_path_with(self.policy.content_internal(), proj, mode, rng)?;
            let mut nodes = Self::tree_nodes(&self.news_tree, &s1.nodes, NodeRef::News);
            nodes.extend(Self::tree_nodes(&tree, &s2.nodes, NodeRef::Content));
            if nodes.is_empty() {
                // Single news with a single pair: nothing was scored, keep
                // one leaf so the step still has a learning target.
                nodes.push(NodeRef::Fixed(tree.leaf_embedding(s2.leaf).to_vec()));
            }
            return Ok(Some((news, tree.payload(s2.leaf).clone(), nodes)));
        }
        Ok(None)
    }

    fn select_flat<R: Rng + ?Sized>(
        &mut self,
        state: &AttackState<'_>,
        proj: &[f64],
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<Option<(usize, WordPair, Vec<NodeRef>)>, AgentError> {
        let dot = |e: &[f64]| e.iter().zip(proj).map(|(a, b)| a * b).sum::<f64>();
        // Action embedding is the mean of the two leaf embeddings, so its
        // score is the mean of the two leaf scores.
        let mut actions: Vec<(usize, usize, f64)> = Vec::new();
        let mut trees = Vec::new();
        for r in 0..self.news_tree.leaf_count() {
            let news = *self.news_tree.payload(r);
            let Some(tree) = self.content_tree(state, news)? else {
                continue;
            };
            let sn = dot(self.news_tree.leaf_embedding(r));
            for k in 0..tree.leaf_count() {
                actions.push((r, k, 0.5 * (sn + dot(tree.leaf_embedding(k)))));
            }
            trees.push((r, tree));
        }
        if actions.is_empty() {
            return Ok(None);
        }
        let pick = match mode {
            SampleMode::Greedy => {
                let mut best = 0;
                for (i, a) in actions.iter().enumerate() {
                    if a.2 > actions[best].2 {
                        best = i;
                    }
                }
                best
            }
            SampleMode::Boltzmann { temperature } => {
                let top = actions.iter().map(|a| a.2).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = actions.iter().map(|a| ((a.2 - top) / temperature).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = w.len() - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                pick
            }
        };
        let (r, k, _) = actions[pick];
        let tree = &trees.iter().find(|(tr, _)| *tr == r).expect("tree kept for every action").1;
        let e = self
            .news_tree
            .leaf_embedding(r)
            .iter()
            .zip(tree.leaf_embedding(k))
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Ok(Some((*self.news_tree.payload(r), tree.payload(k).clone(), vec![NodeRef::Fixed(e)])))
    }
}

/// Rolls out one episode until the horizon, an unaffordable action or a
/// news without valid pairs.
pub fn run_episode<R: Rng + ?Sized>(
    agent: &mut Agent,
    env: &AttackEnv,
    mode: SampleMode,
    reward_scale: f64,
    rng: &mut R,
) -> Result<Episode, AgentError> {
    let mut state = env.start();
    let mut h = agent.policy.zero_hidden();
    let mut steps = Vec::new();
    for _ in 0..env.config().horizon {
        let x = state.input();
        let f = agent.policy.forward(&x, &h);
        let Some((news, pair, nodes)) = agent.select_action(&state, &f.proj, mode, rng)? else {
            break;
        };
        if state.apply(news, &pair).is_err() {
            break;
        }
        steps.push(StepTrace { h_prev: h, x, nodes });
        h = f.h;
    }
    let spent = state.ledger().spent();
    let (perturbations, gain) = state.finish()?;
    Ok(Episode {
        returns: discounted_returns(steps.len(), gain * reward_scale, env.config().gamma),
        perturbations,
        spent,
        gain,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub gain: f64,
}

pub struct TrainedAgent {
    /// Parameters of the best greedy checkpoint.
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    /// Greedy episode at each curve point.
    pub evaluations: Vec<Episode>,
    /// Greedy episode of the best checkpoint: the attack artifact.
    pub best: Episode,
    pub best_checkpoint: usize,
}

/// Monte-Carlo Q learning: every node scored during a step regresses toward
/// that step's discounted return.
pub fn train_agent(env: &AttackEnv, cfg: &AgentConfig) -> Result<TrainedAgent, AgentError> {
    let mut agent = Agent::new(env, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut replay: ReplayBuffer<ReplayEntry> = ReplayBuffer::new(cfg.replay_capacity);
    let mut adam = Adam::new(agent.policy.param_count(), cfg.lr);
    let mut curve = Vec::new();
    let mut evaluations = Vec::new();
    let mut best: Option<(Episode, Policy, usize)> = None;
    for ep in 0..cfg.episodes {
        let frac = if cfg.episodes > 1 {
            ep as f64 / (cfg.episodes - 1) as f64
        } else {
            1.0
        };
        let temperature = cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac;
        let episode = run_episode(&mut agent, env, SampleMode::Boltzmann { temperature }, cfg.reward_scale, &mut rng)?;
        for (step, g) in episode.steps.into_iter().zip(episode.returns) {
            replay.push(ReplayEntry {
                h_prev: step.h_prev,
                x: step.x,
                nodes: step.nodes,
                target: g,
            });
        }
        if !replay.is_empty() {
            for _ in 0..cfg.updates_per_episode {
                let batch = replay.sample(cfg.batch, &mut rng);
                let (loss, grad) = agent.policy.replay_loss_grad(&batch);
                if !loss.is_finite() {
                    return Err(AgentError::DivergedLoss);
                }
                adam.step(&mut agent.policy.params, &grad);
            }
        }
        if (ep + 1) % cfg.checkpoint_every.max(1) == 0 {
            let greedy = run_episode(&mut agent, env, SampleMode::Greedy, cfg.reward_scale, &mut rng)?;
            curve.push(CurvePoint {
                episode: ep + 1,
                gain: greedy.gain,
            });
            if best.as_ref().is_none_or(|(b, _, _)| greedy.gain > b.gain) {
                best = Some((greedy.clone(), agent.policy.clone(), ep + 1));
            }
            evaluations.push(greedy);
        }
    }
    let (best, policy, best_checkpoint) = match best {
        Some(b) => b,
        None => {
            let greedy = run_episode(&mut agent, env, SampleMode::Greedy, cfg.reward_scale, &mut rng)?;
            (greedy, agent.policy.clone(), cfg.episodes)
        }
    };
    Ok(TrainedAgent {
        policy,
        curve,
        evaluations,
        best,
        best_checkpoint,
    })
}

fn finish_baseline(state: AttackState<'_>) -> Result<Episode, AgentError> {
    let spent = state.ledger().spent();
    let (perturbations, gain) = state.finish()?;
    Ok(Episode {
        perturbations,
        spent,
        gain,
        steps: Vec::new(),
        returns: Vec::new(),
    })
}

/// No attack.
pub fn baseline_none(_env: &AttackEnv) -> Episode {
    Episode::empty()
}

/// Uniform news, then a uniform valid pair of its current title.
pub fn baseline_random<R: Rng + ?Sized>(env: &AttackEnv, rng: &mut R) -> Result<Episode, AgentError> {
    let viewed = env.data().viewed();
    let mut state = env.start();
    'steps: for _ in 0..env.config().horizon {
        for _ in 0..2 {
            let news = viewed[rng.random_range(0..viewed.len())];
            let pairs = word_pairs(&state.article(news), env.target());
            if pairs.is_empty() {
                continue;
            }
            let pair = pairs[rng.random_range(0..pairs.len())].clone();
            if state.apply(news, &pair).is_err() {
                break 'steps;
            }
            continue 'steps;
        }
        break;
    }
    finish_baseline(state)
}

/// Viewed news by descending clean effectiveness, ties by ascending id.
pub fn effectiveness_order(env: &AttackEnv) -> Result<Vec<usize>, AgentError> {
    let data = env.data();
    let mut scored = Vec::with_capacity(data.viewed().len());
    for &n in data.viewed() {
        scored.push((n, news_effectiveness(env.corpus(), env.table(), data.news_id(n), env.target())?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(n, _)| n).collect())
}

/// Pairs of `article` by descending word effectiveness, ties in
/// first-occurrence order.
pub fn ranked_pairs(article: &crate::corpus::NewsArticle, env: &AttackEnv) -> Result<Vec<WordPair>, AgentError> {
    let mut scored = Vec::new();
    for p in word_pairs(article, env.target()) {
        let e = word_effectiveness(article, env.table(), &p.old, &p.new)?;
        scored.push((p, e));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored.into_iter().map(|(p, _)| p).collect())
}

/// Most effective news first; on its current title the most effective
/// pair not yet applied to it; the next news once its pairs run out.
pub fn baseline_effective(env: &AttackEnv) -> Result<Episode, AgentError> {
    let order = effectiveness_order(env)?;
    let mut state = env.start();
    let mut used: HashMap<usize, BTreeSet<WordPair>> = HashMap::new();
    let mut k = 0;
    'steps: for _ in 0..env.config().horizon {
        while k < order.len() {
            let news = order[k];
            let done = used.entry(news).or_default();
            let next = ranked_pairs(&state.article(news), env)?
                .into_iter()
                .find(|p| !done.contains(p));
            match next {
                Some(pair) => {
                    if state.apply(news, &pair).is_err() {
                        break 'steps;
                    }
                    used.get_mut(&news).expect("inserted above").insert(pair);
                    continue 'steps;
                }
                None => k += 1,
            }
        }
        break;
    }
    finish_baseline(state)
}
