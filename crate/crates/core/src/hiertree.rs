//! Heap-shaped complete binary trees over effectiveness-sorted actions.
//!
//! A tree over `n` actions has `2n - 1` nodes addressed by 1-based heap
//! index; the children of `i` are `2i` and `2i + 1`, the leaves are
//! `n..=2n-1`. Read left to right on the page, the leaves come in the order
//! `2^D..=2n-1` (the deepest, partially filled layer) followed by
//! `n..2^D`, where `D = floor(log2(2n - 1))`. Leaf rank `r` in that visual
//! order holds the `r`-th most effective action.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, NewsArticle, NewsId};
use crate::embeddings::{dot, EmbeddingTable};
use crate::risk::{news_effectiveness, word_effectiveness};

#[derive(Debug, Error)]
pub enum HiertreeError {
    #[error("tree has no leaves")]
    EmptyTree,
    #[error("no valid word pairs between news {0} and the target")]
    NoValidPairs(NewsId),
    #[error("score vector has dimension {got}, tree embeddings have {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shared internal table covers {rows} nodes, tree needs {needed}")]
    InternalTableTooSmall { rows: usize, needed: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    Boltzmann { temperature: f64 },
    Greedy,
}

/// How leaves are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafOrder {
    Effectiveness,
    /// Seeded shuffle, ignoring effectiveness.
    Random(u64),
}

/// A word replacement candidate: `old` from the viewed title, `new` from
/// the target title.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WordPair {
    pub old: String,
    pub new: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffTree<P> {
    dim: usize,
    /// Payloads by visual leaf rank.
    payloads: Vec<P>,
    effectiveness: Vec<f64>,
    /// Leaf embeddings by visual rank, row-major.
    leaf_embeddings: Vec<f64>,
    /// Embeddings of heap nodes `1..n`, row `i - 1`.
    internal: Vec<f64>,
    rank_to_heap: Vec<usize>,
    heap_to_rank: Vec<usize>,
}

/// Result of one root-to-leaf walk.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSample {
    /// Visual rank of the reached leaf.
    pub leaf: usize,
    /// Heap indices of every chosen child, root excluded.
    pub nodes: Vec<usize>,
    /// `score · e_node` for every entry of `nodes`.
    pub scores: Vec<f64>,
}

/// `floor(log2(2n - 1))`, the longest root-to-leaf path.
pub fn tree_depth(n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    (usize::BITS - 1 - (2 * n - 1).leading_zeros()) as usize
}

/// Heap indices of the leaves in visual left-to-right order.
pub fn visual_leaf_order(n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let deep = 1usize << tree_depth(n);
    (deep..2 * n).chain(n..deep).collect()
}

/// Score comparisons needed to pick one (news, pair) action.
pub fn evaluations_per_action(news_count: usize, pair_count: usize) -> usize {
    tree_depth(news_count) + tree_depth(pair_count)
}

/// Internal embeddings drawn i.i.d. from `U[-0.5, 0.5]`.
pub fn random_internal(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * dim).map(|_| rng.random_range(-0.5..=0.5)).collect()
}

impl<P: Clone> EffTree<P> {
    /// `items` are `(payload, effectiveness, leaf embedding)`. The order
    /// among equal effectiveness values follows the input order.
    pub fn build(
        dim: usize,
        items: Vec<(P, f64, Vec<f64>)>,
        order: LeafOrder,
        seed: u64,
    ) -> Result<Self, HiertreeError> {
        let n = items.len();
        if n == 0 {
            return Err(HiertreeError::EmptyTree);
        }
        if let Some((_, _, e)) = items.iter().find(|(_, _, e)| e.len() != dim) {
            return Err(HiertreeError::DimMismatch {
                expected: dim,
                got: e.len(),
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        match order {
            LeafOrder::Effectiveness => {
                idx.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1));
            }
            LeafOrder::Random(s) => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s)),
        }
        let rank_to_heap = visual_leaf_order(n);
        let mut heap_to_rank = vec![usize::MAX; 2 * n];
        for (r, &h) in rank_to_heap.iter().enumerate() {
            heap_to_rank[h] = r;
        }
        let mut payloads = Vec::with_capacity(n);
        let mut effectiveness = Vec::with_capacity(n);
        let mut leaf_embeddings = Vec::with_capacity(n * dim);
        for &i in &idx {
            payloads.push(items[i].0.clone());
            effectiveness.push(items[i].1);
            leaf_embeddings.extend_from_slice(&items[i].2);
        }
        Ok(EffTree {
            dim,
            payloads,
            effectiveness,
            leaf_embeddings,
            internal: random_internal(n - 1, dim, seed),
            rank_to_heap,
            heap_to_rank,
        })
    }
}

impl<P> EffTree<P> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_count(&self) -> usize {
        self.payloads.len()
    }

    pub fn node_count(&self) -> usize {
        2 * self.leaf_count() - 1
    }

    pub fn depth(&self) -> usize {
        tree_depth(self.leaf_count())
    }

    pub fn payload(&self, rank: usize) -> &P {
        &self.payloads[rank]
    }

    pub fn payloads(&self) -> &[P] {
        &self.payloads
    }

    /// Same tree with each payload replaced, leaf order untouched.
    pub fn map_payloads<Q, E>(self, f: impl FnMut(P) -> Result<Q, E>) -> Result<EffTree<Q>, E> {
        Ok(EffTree {
            dim: self.dim,
            payloads: self.payloads.into_iter().map(f).collect::<Result<_, E>>()?,
            effectiveness: self.effectiveness,
            leaf_embeddings: self.leaf_embeddings,
            internal: self.internal,
            rank_to_heap: self.rank_to_heap,
            heap_to_rank: self.heap_to_rank,
        })
    }

    /// Effectiveness by visual rank.
    pub fn effectiveness(&self) -> &[f64] {
        &self.effectiveness
    }

    pub fn is_leaf(&self, heap: usize) -> bool {
        heap >= self.leaf_count()
    }

    pub fn leaf_heap_index(&self, rank: usize) -> usize {
        self.rank_to_heap[rank]
    }

    pub fn leaf_rank(&self, heap: usize) -> usize {
        self.heap_to_rank[heap]
    }

    pub fn leaf_embedding(&self, rank: usize) -> &[f64] {
        &self.leaf_embeddings[rank * self.dim..(rank + 1) * self.dim]
    }

    /// Row-major embeddings of internal nodes `1..n`.
    pub fn internal(&self) -> &[f64] {
        &self.internal
    }

    pub fn internal_mut(&mut self) -> &mut [f64] {
        &mut self.internal
    }

    fn embedding<'a>(&'a self, internal: &'a [f64], heap: usize) -> &'a [f64] {
        if self.is_leaf(heap) {
            self.leaf_embedding(self.heap_to_rank[heap])
        } else {
            &internal[(heap - 1) * self.dim..heap * self.dim]
        }
    }

    /// Embedding of heap node `heap` using the tree's own internal table.
    pub fn node_embedding(&self, heap: usize) -> &[f64] {
        self.embedding(&self.internal, heap)
    }

    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        score: &[f64],
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<TreeSample, HiertreeError> {
        self.sample_path_with(&self.internal, score, mode, rng)
    }

    /// Walks the tree scoring internal nodes from `internal` instead of the
    /// tree's own table; row `i - 1` embeds heap node `i`.
    pub fn sample_path_with<R: Rng + ?Sized>(
        &self,
        internal: &[f64],
        score: &[f64],
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<TreeSample, HiertreeError> {
        if score.len() != self.dim {
            return Err(HiertreeError::DimMismatch {
                expected: self.dim,
                got: score.len(),
            });
        }
        let n = self.leaf_count();
        let needed = (n - 1) * self.dim;
        if internal.len() < needed {
            return Err(HiertreeError::InternalTableTooSmall {
                rows: internal.len() / self.dim.max(1),
                needed: n - 1,
            });
        }
        let mut node = 1;
        let mut nodes = Vec::with_capacity(self.depth());
        let mut scores = Vec::with_capacity(self.depth());
        while !self.is_leaf(node) {
            let (l, r) = (2 * node, 2 * node + 1);
            debug_assert!(r < 2 * n, "internal node without two children");
            let sl = dot(score, self.embedding(internal, l));
            let sr = dot(score, self.embedding(internal, r));
            let go_left = match mode {
                SampleMode::Greedy => sl >= sr,
                SampleMode::Boltzmann { temperature } => {
                    rng.random::<f64>() < left_probability(sl, sr, temperature)
                }
            };
            let (next, s) = if go_left { (l, sl) } else { (r, sr) };
            nodes.push(next);
            scores.push(s);
            node = next;
        }
        Ok(TreeSample {
            leaf: self.heap_to_rank[node],
            nodes,
            scores,
        })
    }

    /// Exact Boltzmann probability of reaching each leaf, by visual rank.
    pub fn leaf_probabilities(&self, internal: &[f64], score: &[f64], temperature: f64) -> Vec<f64> {
        let n = self.leaf_count();
        let mut reach = vec![0.0; 2 * n];
        reach[1] = 1.0;
        for node in 1..n {
            let (l, r) = (2 * node, 2 * node + 1);
            let sl = dot(score, self.embedding(internal, l));
            let sr = dot(score, self.embedding(internal, r));
            let pl = left_probability(sl, sr, temperature);
            reach[l] = reach[node] * pl;
            reach[r] = reach[node] * (1.0 - pl);
        }
        self.rank_to_heap.iter().map(|&h| reach[h]).collect()
    }
}

/// `exp(sl/τ) / (exp(sl/τ) + exp(sr/τ))`, computed without overflow.
pub fn left_probability(sl: f64, sr: f64, temperature: f64) -> f64 {
    let d = (sr - sl) / temperature;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// Stage-1 tree over every viewed news, keyed by news effectiveness toward
/// `target`.
pub fn build_news_tree(
    corpus: &Corpus,
    table: &EmbeddingTable,
    target: &NewsArticle,
    order: LeafOrder,
    seed: u64,
) -> Result<EffTree<NewsId>, HiertreeError> {
    let mut items = Vec::with_capacity(corpus.viewed().len());
    for id in corpus.viewed() {
        let article = corpus
            .article(id)
            .ok_or_else(|| CorpusError::UnknownNewsId(id.clone()))?;
        let eff = news_effectiveness(corpus, table, id, target)?;
        items.push((id.clone(), eff, table.news_embedding(article)));
    }
    EffTree::build(table.dim(), items, order, seed)
}

fn distinct(tokens: &[String]) -> Vec<&String> {
    let mut seen = HashSet::new();
    tokens.iter().filter(|t| seen.insert(*t)).collect()
}

/// Every `(w_i, w_j)` with `w_i` from `article` and `w_j` from `target`,
/// `w_i != w_j`, in first-occurrence order.
pub fn word_pairs(article: &NewsArticle, target: &NewsArticle) -> Vec<WordPair> {
    let news_words = distinct(&article.title);
    let target_words = distinct(&target.title);
    let mut out = Vec::with_capacity(news_words.len() * target_words.len());
    for wi in &news_words {
        for wj in &target_words {
            if wi != wj {
                out.push(WordPair {
                    old: (*wi).clone(),
                    new: (*wj).clone(),
                });
            }
        }
    }
    out
}

/// `(e_old + e_new) / 2`.
pub fn pair_embedding(table: &EmbeddingTable, pair: &WordPair) -> Vec<f64> {
    let a = table.word_vector(&pair.old);
    let b = table.word_vector(&pair.new);
    a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Stage-2 tree over the word pairs of one (possibly already perturbed)
/// news title.
pub fn build_content_tree(
    article: &NewsArticle,
    target: &NewsArticle,
    table: &EmbeddingTable,
    order: LeafOrder,
    seed: u64,
) -> Result<EffTree<WordPair>, HiertreeError> {
    let pairs = word_pairs(article, target);
    if pairs.is_empty() {
        return Err(HiertreeError::NoValidPairs(article.id.clone()));
    }
    let mut items = Vec::with_capacity(pairs.len());
    for p in pairs {
        let eff = word_effectiveness(article, table, &p.old, &p.new)?;
        let e = pair_embedding(table, &p);
        items.push((p, eff, e));
    }
    EffTree::build(table.dim(), items, order, seed)
}
