//! Exposure-risk accounting and the effectiveness scores that order actions.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, NewsArticle, NewsId};
use crate::embeddings::EmbeddingTable;

/// Lower clamp on distances in effectiveness denominators.
pub const EFFECTIVENESS_EPS: f64 = 1e-6;

/// One word replacement in the title of a viewed news.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub news: NewsId,
    pub old_word: String,
    pub new_word: String,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiskMode {
    #[default]
    Full,
    NoFrequency,
    NoSimilarity,
}

impl FromStr for RiskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(RiskMode::Full),
            "no_frequency" => Ok(RiskMode::NoFrequency),
            "no_similarity" => Ok(RiskMode::NoSimilarity),
            other => Err(format!("unknown risk mode {other:?}")),
        }
    }
}

impl fmt::Display for RiskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskMode::Full => "full",
            RiskMode::NoFrequency => "no_frequency",
            RiskMode::NoSimilarity => "no_similarity",
        })
    }
}

impl RiskMode {
    pub fn combine(self, frequency: f64, distance: f64) -> f64 {
        match self {
            RiskMode::Full => frequency + distance,
            RiskMode::NoFrequency => distance,
            RiskMode::NoSimilarity => frequency,
        }
    }
}

/// `freq(news) + D(old, new)` under the chosen mode.
pub fn perturbation_risk(
    corpus: &Corpus,
    table: &EmbeddingTable,
    p: &Perturbation,
    mode: RiskMode,
) -> Result<f64, CorpusError> {
    let freq = corpus.click_frequency(&p.news)?;
    Ok(mode.combine(freq, table.word_distance(&p.old_word, &p.new_word)))
}

/// Additive risk of a sequence, every term priced on the clean corpus.
pub fn sequence_risk(
    corpus: &Corpus,
    table: &EmbeddingTable,
    seq: &[Perturbation],
    mode: RiskMode,
) -> Result<f64, CorpusError> {
    seq.iter()
        .map(|p| perturbation_risk(corpus, table, p, mode))
        .sum()
}

#[derive(Debug, Error, PartialEq)]
#[error("insufficient budget: cost {cost} exceeds remaining {remaining}")]
pub struct InsufficientBudget {
    pub cost: f64,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskLedger {
    budget: f64,
    spent: f64,
    history: Vec<Perturbation>,
}

impl RiskLedger {
    pub fn new(budget: f64) -> Self {
        RiskLedger {
            budget,
            spent: 0.0,
            history: Vec::new(),
        }
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn remaining(&self) -> f64 {
        (self.budget - self.spent).max(0.0)
    }

    /// `C_t / C̄`, zero when the budget itself is zero.
    pub fn remaining_fraction(&self) -> f64 {
        if self.budget > 0.0 {
            (self.remaining() / self.budget).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn history(&self) -> &[Perturbation] {
        &self.history
    }

    /// Accepts the perturbation iff `spent + cost <= budget`.
    pub fn charge(&mut self, p: Perturbation) -> Result<(), InsufficientBudget> {
        let next = self.spent + p.cost;
        if next > self.budget {
            return Err(InsufficientBudget {
                cost: p.cost,
                remaining: self.remaining(),
            });
        }
        self.spent = next;
        self.history.push(p);
        Ok(())
    }

    pub fn into_history(self) -> Vec<Perturbation> {
        self.history
    }
}

/// `freq(o^r) / max(D(o^r, o^*), ε)`.
pub fn news_effectiveness(
    corpus: &Corpus,
    table: &EmbeddingTable,
    news: &NewsId,
    target: &NewsArticle,
) -> Result<f64, CorpusError> {
    let freq = corpus.click_frequency(news)?;
    let article = corpus
        .article(news)
        .ok_or_else(|| CorpusError::UnknownNewsId(news.clone()))?;
    Ok(effectiveness(freq, table.news_distance(article, target)))
}

pub(crate) fn effectiveness(freq: f64, distance: f64) -> f64 {
    freq / distance.max(EFFECTIVENESS_EPS)
}

/// Share of `word` in the title divided by the clamped word distance.
pub fn word_effectiveness(
    article: &NewsArticle,
    table: &EmbeddingTable,
    word: &str,
    target_word: &str,
) -> Result<f64, CorpusError> {
    let occurrences = article.title.iter().filter(|w| *w == word).count();
    if occurrences == 0 {
        return Err(CorpusError::WordNotInTitle {
            word: word.to_string(),
            news: article.id.clone(),
        });
    }
    let share = occurrences as f64 / article.title.len() as f64;
    Ok(effectiveness(share, table.word_distance(word, target_word)))
}

#[derive(Debug, Error)]
pub enum SequenceFormatError {
    #[error("line {0}: expected 4 tab-separated fields")]
    Fields(usize),
    #[error("line {0}: bad cost")]
    Cost(usize),
}

/// Tab-separated `news, old word, new word, cost` lines.
pub fn write_sequence(seq: &[Perturbation]) -> String {
    let mut out = String::new();
    for p in seq {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.news, p.old_word, p.new_word, p.cost
        ));
    }
    out
}

pub fn parse_sequence(text: &str) -> Result<Vec<Perturbation>, SequenceFormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(SequenceFormatError::Fields(i + 1));
        }
        let cost = cols[3]
            .parse::<f64>()
            .map_err(|_| SequenceFormatError::Cost(i + 1))?;
        out.push(Perturbation {
            news: NewsId(cols[0].to_string()),
            old_word: cols[1].to_string(),
            new_word: cols[2].to_string(),
            cost,
        });
    }
    Ok(out)
}
