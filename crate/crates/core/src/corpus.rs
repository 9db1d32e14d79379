//! Users, news, click histories and the candidate/target split.
//!
//! Files follow the MIND tab-separated layout. A seeded synthetic generator
//! produces desk-scale corpora that serialize back to the same layout.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::risk::Perturbation;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NewsId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub String);

impl fmt::Display for NewsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NewsId {
    fn from(s: &str) -> Self {
        NewsId(s.to_string())
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("duplicate news id {0}")]
    DuplicateId(NewsId),
    #[error("unknown news id {0}")]
    UnknownNewsId(NewsId),
    #[error("malformed impression token {0:?}")]
    MalformedImpression(String),
    #[error("news {0} is not in the viewed set")]
    NotInViewedSet(NewsId),
    #[error("word {word:?} does not occur in the title of {news}")]
    WordNotInTitle { word: String, news: NewsId },
    #[error("news {0} has an empty title")]
    EmptyTitle(NewsId),
    #[error("target {0} is not a candidate")]
    TargetNotInCandidates(NewsId),
    #[error("target {0} is a viewed news")]
    TargetInViewedSet(NewsId),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsArticle {
    pub id: NewsId,
    pub title: Vec<String>,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickHistory {
    pub user: UserId,
    pub clicked: Vec<NewsId>,
    pub impressions: Vec<(NewsId, bool)>,
}

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Parses a MIND-style `news.tsv`.
pub fn load_news(path: &Path) -> Result<Vec<NewsArticle>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_news(&text)
}

pub fn parse_news(text: &str) -> Result<Vec<NewsArticle>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(CorpusError::MalformedLine(i + 1));
        }
        let id = NewsId(cols[0].to_string());
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        let title = tokenize(cols[3]);
        if title.is_empty() {
            return Err(CorpusError::EmptyTitle(id));
        }
        let category = Some(cols[1].to_string()).filter(|c| !c.is_empty());
        out.push(NewsArticle { id, title, category });
    }
    Ok(out)
}

/// Parses a MIND-style `behaviors.tsv`, merging repeated users in first-seen
/// order. When `known` is given every referenced id must resolve against it.
pub fn load_behaviors(
    path: &Path,
    known: Option<&HashSet<NewsId>>,
) -> Result<Vec<ClickHistory>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_behaviors(&text, known)
}

pub fn parse_behaviors(
    text: &str,
    known: Option<&HashSet<NewsId>>,
) -> Result<Vec<ClickHistory>, CorpusError> {
    let check = |id: &NewsId| -> Result<(), CorpusError> {
        match known {
            Some(k) if !k.contains(id) => Err(CorpusError::UnknownNewsId(id.clone())),
            _ => Ok(()),
        }
    };
    let mut order: Vec<UserId> = Vec::new();
    let mut merged: HashMap<UserId, (Vec<NewsId>, HashSet<NewsId>, Vec<(NewsId, bool)>)> =
        HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(CorpusError::MalformedLine(i + 1));
        }
        let user = UserId(cols[1].to_string());
        let entry = merged.entry(user.clone()).or_insert_with(|| {
            order.push(user.clone());
            (Vec::new(), HashSet::new(), Vec::new())
        });
        for tok in cols[3].split_whitespace() {
            let id = NewsId(tok.to_string());
            check(&id)?;
            if entry.1.insert(id.clone()) {
                entry.0.push(id);
            }
        }
        if let Some(imps) = cols.get(4) {
            for tok in imps.split_whitespace() {
                let (id, flag) = tok
                    .rsplit_once('-')
                    .ok_or_else(|| CorpusError::MalformedImpression(tok.to_string()))?;
                let clicked = match flag {
                    "1" => true,
                    "0" => false,
                    _ => return Err(CorpusError::MalformedImpression(tok.to_string())),
                };
                if id.is_empty() {
                    return Err(CorpusError::MalformedImpression(tok.to_string()));
                }
                let id = NewsId(id.to_string());
                check(&id)?;
                entry.2.push((id, clicked));
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|user| {
            let (clicked, _, impressions) = merged.remove(&user).expect("user recorded");
            ClickHistory {
                user,
                clicked,
                impressions,
            }
        })
        .collect())
}

/// Immutable corpus: articles, histories, candidate set and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    articles: BTreeMap<NewsId, NewsArticle>,
    histories: Vec<ClickHistory>,
    candidates: Vec<NewsId>,
    target: NewsId,
    viewed: BTreeSet<NewsId>,
    click_counts: BTreeMap<NewsId, usize>,
}

impl Corpus {
    pub fn new(
        articles: Vec<NewsArticle>,
        histories: Vec<ClickHistory>,
        candidates: Vec<NewsId>,
        target: NewsId,
    ) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for a in articles {
            if a.title.is_empty() {
                return Err(CorpusError::EmptyTitle(a.id));
            }
            if map.contains_key(&a.id) {
                return Err(CorpusError::DuplicateId(a.id));
            }
            map.insert(a.id.clone(), a);
        }
        let mut viewed = BTreeSet::new();
        let mut click_counts = BTreeMap::new();
        for h in &histories {
            let mut uniq = HashSet::new();
            for id in &h.clicked {
                if !map.contains_key(id) {
                    return Err(CorpusError::UnknownNewsId(id.clone()));
                }
                if uniq.insert(id) {
                    *click_counts.entry(id.clone()).or_insert(0) += 1;
                }
                viewed.insert(id.clone());
            }
        }
        let mut cand_seen = HashSet::new();
        let mut cands = Vec::new();
        for c in candidates {
            if !map.contains_key(&c) {
                return Err(CorpusError::UnknownNewsId(c));
            }
            if cand_seen.insert(c.clone()) {
                cands.push(c);
            }
        }
        if !cand_seen.contains(&target) {
            return Err(CorpusError::TargetNotInCandidates(target));
        }
        if viewed.contains(&target) {
            return Err(CorpusError::TargetInViewedSet(target));
        }
        Ok(Corpus {
            articles: map,
            histories,
            candidates: cands,
            target,
            viewed,
            click_counts,
        })
    }

    pub fn articles(&self) -> impl Iterator<Item = &NewsArticle> {
        self.articles.values()
    }

    pub fn article(&self, id: &NewsId) -> Option<&NewsArticle> {
        self.articles.get(id)
    }

    pub fn histories(&self) -> &[ClickHistory] {
        &self.histories
    }

    pub fn candidates(&self) -> &[NewsId] {
        &self.candidates
    }

    pub fn target(&self) -> &NewsId {
        &self.target
    }

    /// A^r: the union of every clicked list, in id order.
    pub fn viewed(&self) -> &BTreeSet<NewsId> {
        &self.viewed
    }

    pub fn user_count(&self) -> usize {
        self.histories.len()
    }

    /// Same corpus with a different target candidate.
    pub fn with_target(&self, target: &NewsId) -> Result<Self, CorpusError> {
        if !self.candidates.contains(target) {
            return Err(CorpusError::TargetNotInCandidates(target.clone()));
        }
        if self.viewed.contains(target) {
            return Err(CorpusError::TargetInViewedSet(target.clone()));
        }
        let mut c = self.clone();
        c.target = target.clone();
        Ok(c)
    }

    /// Number of users whose history contains the news.
    pub fn click_count(&self, id: &NewsId) -> Result<usize, CorpusError> {
        self.click_counts
            .get(id)
            .copied()
            .ok_or_else(|| CorpusError::NotInViewedSet(id.clone()))
    }

    pub fn click_frequency(&self, id: &NewsId) -> Result<f64, CorpusError> {
        let n = self.click_count(id)?;
        Ok(n as f64 / self.histories.len() as f64)
    }

    /// Replaces the first occurrence of the old word in the news title. The
    /// receiver is left untouched.
    pub fn apply_perturbation(&self, p: &Perturbation) -> Result<Self, CorpusError> {
        if !self.viewed.contains(&p.news) {
            return Err(CorpusError::NotInViewedSet(p.news.clone()));
        }
        let article = &self.articles[&p.news];
        let title = replace_first(&article.title, &p.old_word, &p.new_word).ok_or_else(|| {
            CorpusError::WordNotInTitle {
                word: p.old_word.clone(),
                news: p.news.clone(),
            }
        })?;
        let mut out = self.clone();
        out.articles.get_mut(&p.news).expect("viewed news has article").title = title;
        Ok(out)
    }

    pub fn apply_all<'a, I>(&self, seq: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a Perturbation>,
    {
        let mut out = self.clone();
        for p in seq {
            out = out.apply_perturbation(p)?;
        }
        Ok(out)
    }

    /// Writes `news.tsv`, `behaviors.tsv` and `candidates.tsv` into `dir`.
    pub fn write_mind(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let news_path = dir.join("news.tsv");
        let mut news = Vec::new();
        for a in self.articles.values() {
            writeln!(
                news,
                "{}\t{}\t{}\t{}\t",
                a.id,
                a.category.as_deref().unwrap_or(""),
                "",
                a.title.join(" ")
            )
            .expect("write to vec");
        }
        fs::write(&news_path, news).map_err(io_err(&news_path))?;

        let beh_path = dir.join("behaviors.tsv");
        let mut beh = Vec::new();
        for (i, h) in self.histories.iter().enumerate() {
            let hist: Vec<&str> = h.clicked.iter().map(|n| n.0.as_str()).collect();
            let imps: Vec<String> = h
                .impressions
                .iter()
                .map(|(n, c)| format!("{}-{}", n, u8::from(*c)))
                .collect();
            writeln!(
                beh,
                "{}\t{}\t0\t{}\t{}",
                i + 1,
                h.user,
                hist.join(" "),
                imps.join(" ")
            )
            .expect("write to vec");
        }
        fs::write(&beh_path, beh).map_err(io_err(&beh_path))?;

        let cand_path = dir.join("candidates.tsv");
        let mut cand = Vec::new();
        for c in &self.candidates {
            writeln!(cand, "{}\t{}", c, u8::from(*c == self.target)).expect("write to vec");
        }
        fs::write(&cand_path, cand).map_err(io_err(&cand_path))?;
        Ok(())
    }

    /// Reads the three files written by [`Corpus::write_mind`]. A `target`
    /// override replaces the flagged candidate.
    pub fn read_mind(dir: &Path, target: Option<&NewsId>) -> Result<Self, CorpusError> {
        let articles = load_news(&dir.join("news.tsv"))?;
        let known: HashSet<NewsId> = articles.iter().map(|a| a.id.clone()).collect();
        let histories = load_behaviors(&dir.join("behaviors.tsv"), Some(&known))?;
        let cand_path = dir.join("candidates.tsv");
        let text = fs::read_to_string(&cand_path).map_err(io_err(&cand_path))?;
        let mut candidates = Vec::new();
        let mut flagged = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let id = NewsId(cols.next().unwrap_or_default().to_string());
            match cols.next().map(str::trim) {
                Some("1") => flagged = Some(id.clone()),
                Some("0") | None => {}
                Some(_) => return Err(CorpusError::MalformedLine(i + 1)),
            }
            candidates.push(id);
        }
        let target = target
            .cloned()
            .or(flagged)
            .or_else(|| candidates.first().cloned())
            .ok_or_else(|| CorpusError::InvalidSpec("no candidates".into()))?;
        Corpus::new(articles, histories, candidates, target)
    }
}

pub(crate) fn replace_first(title: &[String], old: &str, new: &str) -> Option<Vec<String>> {
    let pos = title.iter().position(|w| w == old)?;
    let mut t = title.to_vec();
    t[pos] = new.to_string();
    Some(t)
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub users: usize,
    pub news: usize,
    pub candidates: usize,
    pub title_len: usize,
    pub vocab_size: usize,
    pub topics: usize,
    pub min_history: usize,
    pub max_history: usize,
    /// Zipf exponent of the popularity skew.
    pub popularity_exponent: f64,
    /// Probability that a title token comes from the article's topic.
    pub topic_purity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            users: 200,
            news: 500,
            candidates: 50,
            title_len: 8,
            vocab_size: 400,
            topics: 8,
            min_history: 5,
            max_history: 15,
            popularity_exponent: 1.0,
            topic_purity: 0.75,
        }
    }
}

/// Deterministic synthetic corpus. History news are `N0…`, candidates `C0…`;
/// the first candidate is the target. Every generated history news is
/// clicked by at least one user, so `viewed().len() == spec.news`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus, CorpusError> {
    let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
    if spec.users == 0 || spec.news == 0 || spec.candidates == 0 {
        return bad("users, news and candidates must be >= 1");
    }
    if spec.title_len == 0 || spec.vocab_size == 0 || spec.topics == 0 {
        return bad("title_len, vocab_size and topics must be >= 1");
    }
    if spec.min_history == 0 || spec.min_history > spec.max_history {
        return bad("history bounds must satisfy 1 <= min <= max");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = spec.topics.min(spec.vocab_size);
    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i:04}")).collect();
    let topic_words: Vec<Vec<usize>> = (0..topics)
        .map(|t| (t..spec.vocab_size).step_by(topics).collect())
        .collect();
    let width = (spec.news + spec.candidates).to_string().len().max(4);

    let make_title = |rng: &mut ChaCha8Rng, topic: usize| -> Vec<String> {
        (0..spec.title_len)
            .map(|_| {
                let idx = if rng.random::<f64>() < spec.topic_purity {
                    *topic_words[topic].choose(rng).expect("topic has words")
                } else {
                    rng.random_range(0..spec.vocab_size)
                };
                vocab[idx].clone()
            })
            .collect()
    };

    let mut articles = Vec::with_capacity(spec.news + spec.candidates);
    let mut news_topic = Vec::with_capacity(spec.news);
    for i in 0..spec.news {
        let topic = rng.random_range(0..topics);
        news_topic.push(topic);
        articles.push(NewsArticle {
            id: NewsId(format!("N{i:0width$}")),
            title: make_title(&mut rng, topic),
            category: Some(format!("t{topic}")),
        });
    }
    let mut cand_topic = Vec::with_capacity(spec.candidates);
    let mut candidates = Vec::with_capacity(spec.candidates);
    for i in 0..spec.candidates {
        let topic = rng.random_range(0..topics);
        cand_topic.push(topic);
        let id = NewsId(format!("C{i:0width$}"));
        candidates.push(id.clone());
        articles.push(NewsArticle {
            id,
            title: make_title(&mut rng, topic),
            category: Some(format!("t{topic}")),
        });
    }

    // Zipf popularity over a random permutation of the history news.
    let mut ranks: Vec<usize> = (0..spec.news).collect();
    ranks.shuffle(&mut rng);
    let popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(spec.popularity_exponent))
        .collect();

    let max_hist = spec.max_history.min(spec.news);
    let min_hist = spec.min_history.min(max_hist);
    let mut clicked: Vec<Vec<usize>> = Vec::with_capacity(spec.users);
    let mut prefs: Vec<usize> = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let primary = rng.random_range(0..topics);
        prefs.push(primary);
        let weights: Vec<f64> = (0..spec.news)
            .map(|n| {
                let affinity = if news_topic[n] == primary { 1.0 } else { 0.15 };
                popularity[n] * affinity
            })
            .collect();
        let len = rng.random_range(min_hist..=max_hist);
        clicked.push(weighted_sample_without_replacement(&mut rng, &weights, len));
    }
    // Guarantee every history news is viewed by someone.
    let mut covered = vec![false; spec.news];
    for c in &clicked {
        for &n in c {
            covered[n] = true;
        }
    }
    for (n, cov) in covered.iter().enumerate() {
        if !cov {
            let u = rng.random_range(0..spec.users);
            clicked[u].push(n);
        }
    }

    let uw = spec.users.to_string().len().max(4);
    let histories = clicked
        .iter()
        .enumerate()
        .map(|(u, c)| {
            let impressions = (0..spec.candidates.min(5))
                .map(|_| {
                    let ci = rng.random_range(0..spec.candidates);
                    (candidates[ci].clone(), cand_topic[ci] == prefs[u])
                })
                .collect();
            ClickHistory {
                user: UserId(format!("U{u:0uw$}")),
                clicked: c.iter().map(|&n| articles[n].id.clone()).collect(),
                impressions,
            }
        })
        .collect();
    let target = candidates[0].clone();
    Corpus::new(articles, histories, candidates, target)
}

fn weighted_sample_without_replacement(
    rng: &mut ChaCha8Rng,
    weights: &[f64],
    k: usize,
) -> Vec<usize> {
    // Efraimidis–Spirakis keys.
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, &w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}
