//! Recurrent state encoder, projection head and the trainable internal-node
//! tables, all living in one flat parameter vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hiertree::random_internal;

fn sigmoid(z: f64) -> f64 {
    crate::recommender::sigmoid(z)
}

/// `out = W x + b`, `W` row-major `rows × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// `out += W x`.
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += w[r * n..(r + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// `gw += d xᵀ`.
fn outer_add(gw: &mut [f64], d: &[f64], x: &[f64]) {
    let n = x.len();
    for (r, dr) in d.iter().enumerate() {
        if *dr == 0.0 {
            continue;
        }
        for (g, xc) in gw[r * n..(r + 1) * n].iter_mut().zip(x) {
            *g += dr * xc;
        }
    }
}

/// `out += Wᵀ d`.
fn matvec_t_add(w: &[f64], d: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (r, dr) in d.iter().enumerate() {
        if *dr == 0.0 {
            continue;
        }
        for (o, wc) in out.iter_mut().zip(&w[r * n..(r + 1) * n]) {
            *o += dr * wc;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    off: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    input: usize,
    hidden: usize,
    head: usize,
    out: usize,
    // GRU: update gate, reset gate, candidate; each (W, U, b)
    wz: Block,
    uz: Block,
    bz: Block,
    wr: Block,
    ur: Block,
    br: Block,
    wn: Block,
    un: Block,
    bn: Block,
    // head: hidden -> head -> head -> out
    w1: Block,
    b1: Block,
    w2: Block,
    b2: Block,
    w3: Block,
    b3: Block,
    news_internal: Block,
    content_internal: Block,
    total: usize,
}

impl Layout {
    fn new(input: usize, hidden: usize, head: usize, out: usize, news_rows: usize, content_rows: usize) -> Self {
        let mut off = 0;
        let mut take = |len: usize| {
            let b = Block { off, len };
            off += len;
            b
        };
        let wz = take(hidden * input);
        let uz = take(hidden * hidden);
        let bz = take(hidden);
        let wr = take(hidden * input);
        let ur = take(hidden * hidden);
        let br = take(hidden);
        let wn = take(hidden * input);
        let un = take(hidden * hidden);
        let bn = take(hidden);
        let w1 = take(head * hidden);
        let b1 = take(head);
        let w2 = take(head * head);
        let b2 = take(head);
        let w3 = take(out * head);
        let b3 = take(out);
        let news_internal = take(news_rows * out);
        let content_internal = take(content_rows * out);
        Layout {
            input,
            hidden,
            head,
            out,
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wn,
            un,
            bn,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            news_internal,
            content_internal,
            total: off,
        }
    }
}

/// Sizes of a [`Policy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    /// Node-embedding (and word-vector) dimension.
    pub dim: usize,
    pub hidden: usize,
    pub head: usize,
    /// Internal nodes of the news tree.
    pub news_rows: usize,
    /// Internal rows shared by every content tree.
    pub content_rows: usize,
}

impl PolicyShape {
    /// `[e_target, digest, remaining_fraction]`.
    pub fn input(&self) -> usize {
        2 * self.dim + 1
    }
}

/// Where a scored node's embedding comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeRef {
    /// A leaf; not trained.
    Fixed(Vec<f64>),
    /// Internal news-tree node, by heap index.
    News(usize),
    /// Internal content-tree node, by heap index.
    Content(usize),
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h: Vec<f64>,
    pub proj: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    uh: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
}

/// One learning target: the step's inputs, every node scored on its path,
/// and the discounted return those scores regress toward.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub nodes: Vec<NodeRef>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    shape: PolicyShape,
    layout: Layout,
    pub params: Vec<f64>,
}

impl Policy {
    pub fn new(shape: PolicyShape, seed: u64) -> Self {
        let layout = Layout::new(
            shape.input(),
            shape.hidden,
            shape.head,
            shape.dim,
            shape.news_rows,
            shape.content_rows,
        );
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |b: Block, bound: f64, rng: &mut ChaCha8Rng| {
            for p in &mut params[b.off..b.off + b.len] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let gru = 1.0 / (shape.hidden as f64).sqrt();
        for b in [layout.wz, layout.uz, layout.bz, layout.wr, layout.ur, layout.br, layout.wn, layout.un, layout.bn] {
            fill(b, gru, &mut rng);
        }
        let h1 = 1.0 / (shape.hidden as f64).sqrt();
        let h2 = 1.0 / (shape.head as f64).sqrt();
        fill(layout.w1, h1, &mut rng);
        fill(layout.b1, h1, &mut rng);
        fill(layout.w2, h2, &mut rng);
        fill(layout.b2, h2, &mut rng);
        fill(layout.w3, h2, &mut rng);
        fill(layout.b3, h2, &mut rng);
        let ni = random_internal(shape.news_rows, shape.dim, rng.random());
        params[layout.news_internal.off..layout.news_internal.off + layout.news_internal.len].copy_from_slice(&ni);
        let ci = random_internal(shape.content_rows, shape.dim, rng.random());
        params[layout.content_internal.off..layout.content_internal.off + layout.content_internal.len]
            .copy_from_slice(&ci);
        Policy { shape, layout, params }
    }

    /// Every parameter zero, for analytic checks.
    pub fn zeros(shape: PolicyShape) -> Self {
        let mut p = Self::new(shape, 0);
        p.params.iter_mut().for_each(|v| *v = 0.0);
        p
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn block(&self, b: Block) -> &[f64] {
        &self.params[b.off..b.off + b.len]
    }

    pub fn news_internal(&self) -> &[f64] {
        self.block(self.layout.news_internal)
    }

    pub fn content_internal(&self) -> &[f64] {
        self.block(self.layout.content_internal)
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.shape.hidden]
    }

    fn node_embedding<'a>(&'a self, node: &'a NodeRef) -> &'a [f64] {
        let d = self.shape.dim;
        match node {
            NodeRef::Fixed(e) => e,
            NodeRef::News(h) => &self.news_internal()[(h - 1) * d..h * d],
            NodeRef::Content(h) => &self.content_internal()[(h - 1) * d..h * d],
        }
    }

    pub fn score(&self, proj: &[f64], node: &NodeRef) -> f64 {
        proj.iter().zip(self.node_embedding(node)).map(|(a, b)| a * b).sum()
    }

    /// One recurrent step followed by the projection head.
    pub fn forward(&self, x: &[f64], h_prev: &[f64]) -> Forward {
        let l = &self.layout;
        let hd = l.hidden;
        let mut z = vec![0.0; hd];
        affine(self.block(l.wz), self.block(l.bz), x, &mut z);
        matvec_add(self.block(l.uz), h_prev, &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = vec![0.0; hd];
        affine(self.block(l.wr), self.block(l.br), x, &mut r);
        matvec_add(self.block(l.ur), h_prev, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut uh = vec![0.0; hd];
        matvec_add(self.block(l.un), h_prev, &mut uh);
        let mut n = vec![0.0; hd];
        affine(self.block(l.wn), self.block(l.bn), x, &mut n);
        for i in 0..hd {
            n[i] = (n[i] + r[i] * uh[i]).tanh();
        }
        let h: Vec<f64> = (0..hd).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
        let mut y1 = vec![0.0; l.head];
        affine(self.block(l.w1), self.block(l.b1), &h, &mut y1);
        y1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut y2 = vec![0.0; l.head];
        affine(self.block(l.w2), self.block(l.b2), &y1, &mut y2);
        y2.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut proj = vec![0.0; l.out];
        affine(self.block(l.w3), self.block(l.b3), &y2, &mut proj);
        Forward {
            h,
            proj,
            z,
            r,
            n,
            uh,
            y1,
            y2,
        }
    }

    /// Adds the gradient of `dproj · proj` w.r.t. encoder and head
    /// parameters into `grad`; `h_prev` and `x` are constants.
    fn backward(&self, x: &[f64], h_prev: &[f64], f: &Forward, dproj: &[f64], grad: &mut [f64]) {
        let l = &self.layout;
        let hd = l.hidden;
        let slot = |b: Block| b.off..b.off + b.len;
        outer_add(&mut grad[slot(l.w3)], dproj, &f.y2);
        for (g, d) in grad[slot(l.b3)].iter_mut().zip(dproj) {
            *g += d;
        }
        let mut dy2 = vec![0.0; l.head];
        matvec_t_add(self.block(l.w3), dproj, &mut dy2);
        for (d, y) in dy2.iter_mut().zip(&f.y2) {
            if *y <= 0.0 {
                *d = 0.0;
            }
        }
        outer_add(&mut grad[slot(l.w2)], &dy2, &f.y1);
        for (g, d) in grad[slot(l.b2)].iter_mut().zip(&dy2) {
            *g += d;
        }
        let mut dy1 = vec![0.0; l.head];
        matvec_t_add(self.block(l.w2), &dy2, &mut dy1);
        for (d, y) in dy1.iter_mut().zip(&f.y1) {
            if *y <= 0.0 {
                *d = 0.0;
            }
        }
        outer_add(&mut grad[slot(l.w1)], &dy1, &f.h);
        for (g, d) in grad[slot(l.b1)].iter_mut().zip(&dy1) {
            *g += d;
        }
        let mut dh = vec![0.0; hd];
        matvec_t_add(self.block(l.w1), &dy1, &mut dh);
        let mut dan = vec![0.0; hd];
        let mut dar = vec![0.0; hd];
        let mut daz = vec![0.0; hd];
        for i in 0..hd {
            let dn = dh[i] * (1.0 - f.z[i]);
            let dz = dh[i] * (h_prev[i] - f.n[i]);
            dan[i] = dn * (1.0 - f.n[i] * f.n[i]);
            let dr = dan[i] * f.uh[i];
            dar[i] = dr * f.r[i] * (1.0 - f.r[i]);
            daz[i] = dz * f.z[i] * (1.0 - f.z[i]);
        }
        let ran: Vec<f64> = (0..hd).map(|i| dan[i] * f.r[i]).collect();
        outer_add(&mut grad[slot(l.wn)], &dan, x);
        outer_add(&mut grad[slot(l.un)], &ran, h_prev);
        for (g, d) in grad[slot(l.bn)].iter_mut().zip(&dan) {
            *g += d;
        }
        outer_add(&mut grad[slot(l.wr)], &dar, x);
        outer_add(&mut grad[slot(l.ur)], &dar, h_prev);
        for (g, d) in grad[slot(l.br)].iter_mut().zip(&dar) {
            *g += d;
        }
        outer_add(&mut grad[slot(l.wz)], &daz, x);
        outer_add(&mut grad[slot(l.uz)], &daz, h_prev);
        for (g, d) in grad[slot(l.bz)].iter_mut().zip(&daz) {
            *g += d;
        }
    }

    fn entry_loss(&self, e: &ReplayEntry, f: &Forward) -> f64 {
        let k = e.nodes.len().max(1) as f64;
        e.nodes
            .iter()
            .map(|nd| (self.score(&f.proj, nd) - e.target).powi(2))
            .sum::<f64>()
            / k
    }

    /// Mean over entries of the mean squared error between each visited
    /// node's score and the entry's return.
    pub fn replay_loss(&self, batch: &[&ReplayEntry]) -> f64 {
        let b = batch.len().max(1) as f64;
        batch
            .iter()
            .map(|e| self.entry_loss(e, &self.forward(&e.x, &e.h_prev)))
            .sum::<f64>()
            / b
    }

    pub fn replay_loss_grad(&self, batch: &[&ReplayEntry]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.param_count()];
        let b = batch.len().max(1) as f64;
        let d = self.shape.dim;
        let (ni, ci) = (self.layout.news_internal.off, self.layout.content_internal.off);
        let mut loss = 0.0;
        for e in batch {
            let f = self.forward(&e.x, &e.h_prev);
            loss += self.entry_loss(e, &f);
            let k = e.nodes.len().max(1) as f64;
            let mut dproj = vec![0.0; d];
            for nd in &e.nodes {
                let emb = self.node_embedding(nd);
                let c = 2.0 * (self.score(&f.proj, nd) - e.target) / (k * b);
                for (dp, v) in dproj.iter_mut().zip(emb) {
                    *dp += c * v;
                }
                let row = match nd {
                    NodeRef::Fixed(_) => None,
                    NodeRef::News(h) => Some(ni + (h - 1) * d),
                    NodeRef::Content(h) => Some(ci + (h - 1) * d),
                };
                if let Some(off) = row {
                    for (g, p) in grad[off..off + d].iter_mut().zip(&f.proj) {
                        *g += c * p;
                    }
                }
            }
            self.backward(&e.x, &e.h_prev, &f, &dproj, &mut grad);
        }
        (loss / b, grad)
    }
}
