use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::corpus::{replace_first, Corpus, CorpusError, NewsArticle};
use crate::embeddings::EmbeddingTable;
use crate::hiertree::WordPair;
use crate::influence::{retrain_oracle, InfluenceEngine};
use crate::recommender::{Dataset, EnsembleSpec};
use crate::risk::{InsufficientBudget, Perturbation, RiskLedger, RiskMode};

use super::AgentError;

/// How the terminal attack value is measured.
#[derive(Clone)]
pub enum RewardModel {
    /// Influence estimate on the offline ensemble.
    Influence(Arc<InfluenceEngine>),
    /// Retrain the ensemble from its seeds on the perturbed data.
    Oracle { spec: EnsembleSpec, clean_mrr: f64 },
}

impl RewardModel {
    pub fn clean_mrr(&self) -> f64 {
        match self {
            RewardModel::Influence(e) => e.clean_mrr(),
            RewardModel::Oracle { clean_mrr, .. } => *clean_mrr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub budget: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub risk_mode: RiskMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            budget: 40.0,
            horizon: 30,
            gamma: 0.99,
            risk_mode: RiskMode::Full,
        }
    }
}

/// Clean data, the attacked target and the reward machinery for one
/// attack. Read-only once built.
#[derive(Clone)]
pub struct AttackEnv {
    corpus: Corpus,
    table: EmbeddingTable,
    data: Dataset,
    reward: RewardModel,
    target: NewsArticle,
    target_embedding: Vec<f64>,
    /// Click frequency by dataset news index; zero outside the viewed set.
    frequency: Vec<f64>,
    cfg: EnvConfig,
}

impl AttackEnv {
    /// `corpus` and `data` must describe the same clean data with the same
    /// target.
    pub fn new(
        corpus: Corpus,
        table: EmbeddingTable,
        data: Dataset,
        reward: RewardModel,
        cfg: EnvConfig,
    ) -> Result<Self, AgentError> {
        let target = corpus
            .article(corpus.target())
            .ok_or_else(|| CorpusError::UnknownNewsId(corpus.target().clone()))?
            .clone();
        if data.news_id(data.target()) != &target.id {
            return Err(AgentError::Mismatch("dataset target differs from corpus target".into()));
        }
        let mut frequency = vec![0.0; data.news_count()];
        for &n in data.viewed() {
            frequency[n] = corpus.click_frequency(data.news_id(n))?;
        }
        let target_embedding = table.news_embedding(&target);
        Ok(AttackEnv {
            corpus,
            table,
            data,
            reward,
            target,
            target_embedding,
            frequency,
            cfg,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn target(&self) -> &NewsArticle {
        &self.target
    }

    pub fn target_embedding(&self) -> &[f64] {
        &self.target_embedding
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn reward_model(&self) -> &RewardModel {
        &self.reward
    }

    /// Copy with different budget, horizon, discount or risk mode.
    pub fn with_config(&self, cfg: EnvConfig) -> Self {
        AttackEnv { cfg, ..self.clone() }
    }

    pub fn frequency(&self, news: usize) -> f64 {
        self.frequency[news]
    }

    /// Cost of replacing `pair.old` with `pair.new` in news `news`.
    pub fn price(&self, news: usize, pair: &WordPair) -> Perturbation {
        let dist = self.table.word_distance(&pair.old, &pair.new);
        Perturbation {
            news: self.data.news_id(news).clone(),
            old_word: pair.old.clone(),
            new_word: pair.new.clone(),
            cost: self.cfg.risk_mode.combine(self.frequency[news], dist),
        }
    }

    pub fn start(&self) -> AttackState<'_> {
        AttackState {
            env: self,
            titles: BTreeMap::new(),
            ledger: RiskLedger::new(self.cfg.budget),
            perturbed: BTreeSet::new(),
        }
    }

    /// MRR gain of a set of edited titles; exactly zero for no edits.
    pub fn gain(&self, titles: &BTreeMap<usize, Vec<String>>) -> Result<f64, AgentError> {
        if titles.is_empty() {
            return Ok(0.0);
        }
        let after = self.data.with_titles(titles, &self.table);
        match &self.reward {
            RewardModel::Influence(engine) => Ok(engine.estimated_mrr(&after)? - engine.clean_mrr()),
            RewardModel::Oracle { spec, clean_mrr } => Ok(retrain_oracle(spec, &after)?.1 - clean_mrr),
        }
    }

    /// Edited titles after applying `seq` to the clean data.
    pub fn titles_after(&self, seq: &[Perturbation]) -> Result<BTreeMap<usize, Vec<String>>, AgentError> {
        Ok(edited_titles(&self.data, seq)?)
    }

    pub fn sequence_gain(&self, seq: &[Perturbation]) -> Result<f64, AgentError> {
        self.gain(&self.titles_after(seq)?)
    }
}

/// Titles of `data` changed by applying `seq` in order.
pub fn edited_titles(data: &Dataset, seq: &[Perturbation]) -> Result<BTreeMap<usize, Vec<String>>, CorpusError> {
    let mut titles: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for p in seq {
        let n = data
            .news_index(&p.news)
            .ok_or_else(|| CorpusError::UnknownNewsId(p.news.clone()))?;
        let current = titles.get(&n).map(Vec::as_slice).unwrap_or(data.title(n));
        let next = replace_first(current, &p.old_word, &p.new_word).ok_or_else(|| CorpusError::WordNotInTitle {
            word: p.old_word.clone(),
            news: p.news.clone(),
        })?;
        titles.insert(n, next);
    }
    Ok(titles)
}

/// Mutable per-episode view: current titles and the risk ledger.
pub struct AttackState<'e> {
    env: &'e AttackEnv,
    titles: BTreeMap<usize, Vec<String>>,
    ledger: RiskLedger,
    perturbed: BTreeSet<usize>,
}

impl<'e> AttackState<'e> {
    pub fn env(&self) -> &'e AttackEnv {
        self.env
    }

    pub fn title(&self, news: usize) -> &[String] {
        self.titles
            .get(&news)
            .map(Vec::as_slice)
            .unwrap_or_else(|| self.env.data.title(news))
    }

    /// The news as currently edited.
    pub fn article(&self, news: usize) -> NewsArticle {
        NewsArticle {
            id: self.env.data.news_id(news).clone(),
            title: self.title(news).to_vec(),
            category: None,
        }
    }

    pub fn ledger(&self) -> &RiskLedger {
        &self.ledger
    }

    pub fn steps(&self) -> usize {
        self.ledger.history().len()
    }

    /// Mean current embedding of every news edited so far, zero before the
    /// first edit.
    pub fn digest(&self) -> Vec<f64> {
        let d = self.env.table.dim();
        let mut acc = vec![0.0; d];
        if self.perturbed.is_empty() {
            return acc;
        }
        for &n in &self.perturbed {
            for (a, v) in acc.iter_mut().zip(self.env.table.mean_vector(self.title(n))) {
                *a += v;
            }
        }
        let k = self.perturbed.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    /// `[e_target, digest, C_t / C̄]`.
    pub fn input(&self) -> Vec<f64> {
        let mut x = self.env.target_embedding.clone();
        x.extend(self.digest());
        x.push(self.ledger.remaining_fraction());
        x
    }

    /// Charges and applies one replacement. A rejected charge leaves the
    /// state untouched.
    pub fn apply(&mut self, news: usize, pair: &WordPair) -> Result<(), InsufficientBudget> {
        let p = self.env.price(news, pair);
        let next = replace_first(self.title(news), &pair.old, &pair.new).expect("pair drawn from current title");
        self.ledger.charge(p)?;
        self.titles.insert(news, next);
        self.perturbed.insert(news);
        Ok(())
    }

    /// Perturbations in order and the resulting MRR gain.
    pub fn finish(self) -> Result<(Vec<Perturbation>, f64), AgentError> {
        let gain = self.env.gain(&self.titles)?;
        Ok((self.ledger.into_history(), gain))
    }
}
