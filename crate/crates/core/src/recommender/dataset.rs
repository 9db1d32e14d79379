use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, NewsId, UserId};
use crate::embeddings::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub id: UserId,
    /// Unique clicked news, first-seen order.
    pub clicked: Vec<usize>,
    /// `neg_k` frozen negatives per click.
    pub negatives: Vec<usize>,
    pub vector: Vec<f64>,
}

/// Index-based view of a corpus under one embedding table: news and user
/// vectors, frozen negative samples and the candidate list.
///
/// News are indexed in ascending id order, so comparing indices is the same
/// as comparing ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    news_ids: Vec<NewsId>,
    index: HashMap<NewsId, usize>,
    titles: Vec<Vec<String>>,
    news_vectors: Vec<Vec<f64>>,
    viewed: Vec<usize>,
    users: Vec<UserRecord>,
    candidates: Vec<usize>,
    target: usize,
    clickers: Vec<Vec<usize>>,
    negative_holders: Vec<Vec<usize>>,
}

fn user_stream_seed(seed: u64, user: &UserId) -> u64 {
    let h = user
        .0
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    h ^ seed.rotate_left(17)
}

impl Dataset {
    /// Users with an empty history are dropped.
    pub fn build(corpus: &Corpus, table: &EmbeddingTable, neg_k: usize, seed: u64) -> Self {
        let news_ids: Vec<NewsId> = corpus.articles().map(|a| a.id.clone()).collect();
        let index: HashMap<NewsId, usize> = news_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let titles: Vec<Vec<String>> = corpus.articles().map(|a| a.title.clone()).collect();
        let news_vectors: Vec<Vec<f64>> = corpus.articles().map(|a| table.news_embedding(a)).collect();
        let viewed: Vec<usize> = corpus.viewed().iter().map(|id| index[id]).collect();
        let mut users = Vec::new();
        for h in corpus.histories() {
            let mut seen = HashSet::new();
            let clicked: Vec<usize> = h
                .clicked
                .iter()
                .map(|id| index[id])
                .filter(|i| seen.insert(*i))
                .collect();
            if clicked.is_empty() {
                continue;
            }
            let pool: Vec<usize> = viewed.iter().copied().filter(|i| !seen.contains(i)).collect();
            let mut negatives = Vec::new();
            if !pool.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(user_stream_seed(seed, &h.user));
                for _ in 0..clicked.len() * neg_k {
                    negatives.push(pool[rng.random_range(0..pool.len())]);
                }
            }
            users.push(UserRecord {
                id: h.user.clone(),
                vector: vec![0.0; table.dim()],
                clicked,
                negatives,
            });
        }
        let mut clickers = vec![Vec::new(); news_ids.len()];
        let mut negative_holders = vec![Vec::new(); news_ids.len()];
        for (u, rec) in users.iter().enumerate() {
            for &n in &rec.clicked {
                clickers[n].push(u);
            }
            let mut dedup = HashSet::new();
            for &n in &rec.negatives {
                if dedup.insert(n) {
                    negative_holders[n].push(u);
                }
            }
        }
        let candidates = corpus.candidates().iter().map(|id| index[id]).collect();
        let target = index[corpus.target()];
        let mut ds = Dataset {
            dim: table.dim(),
            news_ids,
            index,
            titles,
            news_vectors,
            viewed,
            users,
            candidates,
            target,
            clickers,
            negative_holders,
        };
        for u in 0..ds.users.len() {
            ds.refresh_user(u);
        }
        ds
    }

    fn refresh_user(&mut self, u: usize) {
        let mut acc = vec![0.0; self.dim];
        for &n in &self.users[u].clicked {
            for (a, x) in acc.iter_mut().zip(&self.news_vectors[n]) {
                *a += x;
            }
        }
        let k = self.users[u].clicked.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        self.users[u].vector = acc;
    }

    /// Copy with some titles replaced; only the touched news vectors and the
    /// vectors of users who clicked them are recomputed.
    pub fn with_titles(&self, changes: &BTreeMap<usize, Vec<String>>, table: &EmbeddingTable) -> Self {
        let mut out = self.clone();
        let mut touched = std::collections::BTreeSet::new();
        for (&n, title) in changes {
            out.titles[n] = title.clone();
            out.news_vectors[n] = table.mean_vector(title);
            touched.extend(self.clickers[n].iter().copied());
        }
        for u in touched {
            out.refresh_user(u);
        }
        out
    }

    /// Copy with a different target candidate.
    pub fn with_target(&self, target: usize) -> Self {
        let mut out = self.clone();
        out.target = target;
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn news_count(&self) -> usize {
        self.news_ids.len()
    }

    pub fn news_id(&self, n: usize) -> &NewsId {
        &self.news_ids[n]
    }

    pub fn news_index(&self, id: &NewsId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn title(&self, n: usize) -> &[String] {
        &self.titles[n]
    }

    pub fn news_vector(&self, n: usize) -> &[f64] {
        &self.news_vectors[n]
    }

    pub fn viewed(&self) -> &[usize] {
        &self.viewed
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn user_index(&self, id: &UserId) -> Option<usize> {
        self.users.iter().position(|u| &u.id == id)
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn clickers(&self, n: usize) -> &[usize] {
        &self.clickers[n]
    }

    /// Users whose loss depends on news `n`, as a click or a negative, in
    /// ascending order.
    pub fn loss_dependents(&self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.clickers[n]
            .iter()
            .chain(&self.negative_holders[n])
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// News whose title differs between `self` and `other`, ascending.
    pub fn changed_news(&self, other: &Dataset) -> Vec<usize> {
        (0..self.news_count())
            .filter(|&n| self.titles[n] != other.titles[n])
            .collect()
    }

    /// `(candidate vector index, label)` training pairs of a user.
    pub fn examples(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let rec = &self.users[u];
        rec.clicked
            .iter()
            .map(|&n| (n, 1.0))
            .chain(rec.negatives.iter().map(|&n| (n, 0.0)))
    }
}
