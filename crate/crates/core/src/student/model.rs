//! Toy decoder-style transformer used both as the synthetic teacher backbone
//! and as the RoI student built on its first `B + R` blocks.
//!
//! Sequence layout is `[visual tokens (H*W), query token per turn]` with a
//! causal mask, so each query token sees every visual token.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Teacher depth `L`.
    pub depth: usize,
    /// Number of distinct query-marker embeddings (maximum turns).
    pub max_turns: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.depth == 0 || self.max_turns == 0 {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) struct BlockCache {
    a: Array2<f64>,
    ln1: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    m: Array2<f64>,
    ln2: LayerNormCache,
    u: Array2<f64>,
    g: Array2<f64>,
}

impl Block {
    pub fn zeros(dims: &ModelDims) -> Self {
        let d = dims.d_model;
        let f = dims.hidden();
        Self {
            ln1: LayerNorm::zeros(d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, f),
            fc2: Linear::zeros(f, d),
        }
    }

    pub fn random(dims: &ModelDims, rng: &mut RngStream) -> Self {
        let d = dims.d_model;
        let f = dims.hidden();
        let std_in = 1.0 / (d as f64).sqrt();
        let residual = 1.0 / (2.0 * dims.depth as f64).sqrt();
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::random(d, d, std_in, rng),
            wk: Linear::random(d, d, std_in, rng),
            wv: Linear::random(d, d, std_in, rng),
            wo: Linear::random(d, d, std_in * residual, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::random(d, f, std_in, rng),
            fc2: Linear::random(f, d, residual / (f as f64).sqrt(), rng),
        }
    }

    /// Named parameter slices in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("ln1.gamma", self.ln1.gamma.as_slice().unwrap()),
            ("ln1.beta", self.ln1.beta.as_slice().unwrap()),
            ("wq.weight", self.wq.weight.as_slice().unwrap()),
            ("wq.bias", self.wq.bias.as_slice().unwrap()),
            ("wk.weight", self.wk.weight.as_slice().unwrap()),
            ("wk.bias", self.wk.bias.as_slice().unwrap()),
            ("wv.weight", self.wv.weight.as_slice().unwrap()),
            ("wv.bias", self.wv.bias.as_slice().unwrap()),
            ("wo.weight", self.wo.weight.as_slice().unwrap()),
            ("wo.bias", self.wo.bias.as_slice().unwrap()),
            ("ln2.gamma", self.ln2.gamma.as_slice().unwrap()),
            ("ln2.beta", self.ln2.beta.as_slice().unwrap()),
            ("fc1.weight", self.fc1.weight.as_slice().unwrap()),
            ("fc1.bias", self.fc1.bias.as_slice().unwrap()),
            ("fc2.weight", self.fc2.weight.as_slice().unwrap()),
            ("fc2.bias", self.fc2.bias.as_slice().unwrap()),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("ln1.gamma", self.ln1.gamma.as_slice_mut().unwrap()),
            ("ln1.beta", self.ln1.beta.as_slice_mut().unwrap()),
            ("wq.weight", self.wq.weight.as_slice_mut().unwrap()),
            ("wq.bias", self.wq.bias.as_slice_mut().unwrap()),
            ("wk.weight", self.wk.weight.as_slice_mut().unwrap()),
            ("wk.bias", self.wk.bias.as_slice_mut().unwrap()),
            ("wv.weight", self.wv.weight.as_slice_mut().unwrap()),
            ("wv.bias", self.wv.bias.as_slice_mut().unwrap()),
            ("wo.weight", self.wo.weight.as_slice_mut().unwrap()),
            ("wo.bias", self.wo.bias.as_slice_mut().unwrap()),
            ("ln2.gamma", self.ln2.gamma.as_slice_mut().unwrap()),
            ("ln2.beta", self.ln2.beta.as_slice_mut().unwrap()),
            ("fc1.weight", self.fc1.weight.as_slice_mut().unwrap()),
            ("fc1.bias", self.fc1.bias.as_slice_mut().unwrap()),
            ("fc2.weight", self.fc2.weight.as_slice_mut().unwrap()),
            ("fc2.bias", self.fc2.bias.as_slice_mut().unwrap()),
        ]
    }

    pub fn forward(&self, x: &ArrayView2<f64>, heads: usize) -> Array2<f64> {
        self.forward_cached(x, heads).0
    }

    pub(crate) fn forward_cached(&self, x: &ArrayView2<f64>, heads: usize) -> (Array2<f64>, BlockCache) {
        let (a, ln1) = self.ln1.forward(x);
        let q = self.wq.forward(&a.view());
        let k = self.wk.forward(&a.view());
        let v = self.wv.forward(&a.view());
        let (attn, probs) = causal_attention(&q, &k, &v, heads);
        let x1 = x + &self.wo.forward(&attn.view());
        let (m, ln2) = self.ln2.forward(&x1.view());
        let u = self.fc1.forward(&m.view());
        let g = u.mapv(gelu);
        let out = &x1 + &self.fc2.forward(&g.view());
        let cache = BlockCache {
            a,
            ln1,
            q,
            k,
            v,
            probs,
            attn,
            m,
            ln2,
            u,
            g,
        };
        (out, cache)
    }

    /// Reverse pass; accumulates into `grad` and returns `dL/dx`.
    pub(crate) fn backward(&self, cache: &BlockCache, dout: &ArrayView2<f64>, heads: usize, grad: &mut Block) -> Array2<f64> {
        // MLP branch
        let dg = self.fc2.backward(&cache.g.view(), dout, &mut grad.fc2);
        let du = &dg * &cache.u.mapv(gelu_grad);
        let dm = self.fc1.backward(&cache.m.view(), &du.view(), &mut grad.fc1);
        let dx1 = dout + &self.ln2.backward(&cache.ln2, &dm.view(), &mut grad.ln2);
        // attention branch
        let dattn = self.wo.backward(&cache.attn.view(), &dx1.view(), &mut grad.wo);
        let (dq, dk, dv) = causal_attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &dattn, heads);
        let mut da = self.wq.backward(&cache.a.view(), &dq.view(), &mut grad.wq);
        da += &self.wk.backward(&cache.a.view(), &dk.view(), &mut grad.wk);
        da += &self.wv.backward(&cache.a.view(), &dv.view(), &mut grad.wv);
        dx1 + self.ln1.backward(&cache.ln1, &da.view(), &mut grad.ln1)
    }
}

/// Multi-head causal self-attention. Returns the concatenated head outputs
/// and each head's attention probabilities.
fn causal_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let live = row.slice_mut(s![..=i]);
            let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in live {
                *x = ((*x - max) * scale).exp();
                sum += *x;
            }
            row.slice_mut(s![..=i]).mapv_inplace(|x| x / sum);
            row.slice_mut(s![i + 1..]).fill(0.0);
        }
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}

fn causal_attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    dout: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dout.slice(cols);
        let mut ds = dout_h.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Frozen input embedding: a projection of visual features and one learned
/// marker vector per conversation turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub proj: Linear,
    pub queries: Array2<f64>,
}

impl Embedding {
    pub fn random(dims: &ModelDims, rng: &mut RngStream) -> Self {
        Self {
            proj: Linear::random(dims.feature_dim, dims.d_model, 1.0 / (dims.feature_dim as f64).sqrt(), rng),
            queries: Array2::from_shape_simple_fn((dims.max_turns, dims.d_model), || rng.normal()),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("proj.weight", self.proj.weight.as_slice().unwrap()),
            ("proj.bias", self.proj.bias.as_slice().unwrap()),
            ("queries", self.queries.as_slice().unwrap()),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("proj.weight", self.proj.weight.as_slice_mut().unwrap()),
            ("proj.bias", self.proj.bias.as_slice_mut().unwrap()),
            ("queries", self.queries.as_slice_mut().unwrap()),
        ]
    }

    /// `[visual; queries]` as a `(tokens + turns) x d_model` sequence.
    pub fn sequence(&self, features: &ArrayView2<f64>, turns: usize) -> Result<Array2<f64>> {
        if features.ncols() != self.proj.inputs() {
            return Err(Error::shape("feature dim", self.proj.inputs(), features.ncols()));
        }
        if turns == 0 || turns > self.queries.nrows() {
            return Err(Error::Config(format!(
                "turns {turns} outside 1..={}",
                self.queries.nrows()
            )));
        }
        let visual = self.proj.forward(features);
        let mut seq = Array2::zeros((features.nrows() + turns, self.proj.outputs()));
        seq.slice_mut(s![..features.nrows(), ..]).assign(&visual);
        seq.slice_mut(s![features.nrows().., ..]).assign(&self.queries.slice(s![..turns, ..]));
        Ok(seq)
    }
}

/// The full-depth teacher backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub dims: ModelDims,
    pub embed: Embedding,
    pub blocks: Vec<Block>,
}

impl Transformer {
    pub fn random(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let root = RngStream::new(seed, 0x7EAC_4E2);
        let embed = Embedding::random(&dims, &mut root.derive(0));
        let blocks = (0..dims.depth)
            .map(|i| Block::random(&dims, &mut root.derive(1 + i as u64)))
            .collect();
        Ok(Self { dims, embed, blocks })
    }
}

/// Sum of per-head `Q_h K_h^T`, divided by the head count.
pub fn head_logits(q: &ArrayView2<f64>, k: &ArrayView2<f64>, heads: usize) -> Array2<f64> {
    let dh = q.ncols() / heads;
    let mut out = Array2::zeros((q.nrows(), k.nrows()));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        out += &q.slice(cols).dot(&k.slice(cols).t());
    }
    out / heads as f64
}

/// Gradients for the trainable blocks, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads {
    pub blocks: Vec<Block>,
}

impl StudentGrads {
    pub fn zeros(dims: &ModelDims, trainable: usize) -> Self {
        Self {
            blocks: (0..trainable).map(|_| Block::zeros(dims)).collect(),
        }
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        named(&self.blocks, 0)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut().into_iter().map(|(_, p)| p)).collect()
    }

    pub fn add_assign(&mut self, other: &StudentGrads) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|x| *x *= c);
        }
    }
}

fn named(blocks: &[Block], offset: usize) -> Vec<(String, &[f64])> {
    blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            b.params()
                .into_iter()
                .map(move |(n, p)| (format!("block{}.{n}", offset + i + 1), p))
        })
        .collect()
}

/// Frozen embedding and blocks `1..=B`, trainable blocks `B+1..=B+R`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub dims: ModelDims,
    pub frozen: usize,
    pub trainable: usize,
    pub embed: Embedding,
    pub blocks: Vec<Block>,
}

pub(crate) struct HeadCache {
    hq: Array2<f64>,
    hv: Array2<f64>,
    nq: Array2<f64>,
    nv: Array2<f64>,
    lnq: LayerNormCache,
    lnv: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
}

impl StudentModel {
    /// Copies the teacher's embedding and its first `frozen + trainable` blocks.
    pub fn from_teacher(teacher: &Transformer, frozen: usize, trainable: usize) -> Result<Self> {
        if trainable == 0 || frozen + trainable > teacher.dims.depth {
            return Err(Error::Config(format!(
                "need 1 <= R and B + R <= L, got B={frozen} R={trainable} L={}",
                teacher.dims.depth
            )));
        }
        Ok(Self {
            dims: teacher.dims,
            frozen,
            trainable,
            embed: teacher.embed.clone(),
            blocks: teacher.blocks[..frozen + trainable].to_vec(),
        })
    }

    pub fn head_block(&self) -> &Block {
        self.blocks.last().expect("at least one trainable block")
    }

    /// Hidden states after the frozen blocks (depth `B`).
    pub fn frozen_hidden(&self, features: &ArrayView2<f64>, turns: usize) -> Result<Array2<f64>> {
        let mut x = self.embed.sequence(features, turns)?;
        for b in &self.blocks[..self.frozen] {
            x = b.forward(&x.view(), self.dims.heads);
        }
        Ok(x)
    }

    /// Hidden states after block `B + R - 1`; the last block only contributes
    /// its query/key projections to the RoI head.
    pub fn forward_hidden(&self, features: &ArrayView2<f64>, turns: usize) -> Result<Array2<f64>> {
        let mut x = self.frozen_hidden(features, turns)?;
        for b in &self.blocks[self.frozen..self.blocks.len() - 1] {
            x = b.forward(&x.view(), self.dims.heads);
        }
        Ok(x)
    }

    /// RoI logits for every turn: `mean_h LP_q(Norm(H_roi))_h LP_k(Norm(H_v))_h^T`.
    pub fn predict_roi(&self, visual: &ArrayView2<f64>, h_roi: &ArrayView2<f64>) -> Array2<f64> {
        self.head_forward(h_roi, visual).0
    }

    pub fn predict(&self, features: &ArrayView2<f64>, turns: usize) -> Result<Array2<f64>> {
        let hidden = self.forward_hidden(features, turns)?;
        let n = features.nrows();
        let boundaries: Vec<usize> = (0..turns).map(|i| n + i).collect();
        let h_roi = select_query_states(&hidden.view(), &boundaries)?;
        Ok(self.predict_roi(&hidden.slice(s![..n, ..]), &h_roi.view()))
    }

    fn head_forward(&self, hq: &ArrayView2<f64>, hv: &ArrayView2<f64>) -> (Array2<f64>, HeadCache) {
        let head = self.head_block();
        let (nq, lnq) = head.ln1.forward(hq);
        let (nv, lnv) = head.ln1.forward(hv);
        let q = head.wq.forward(&nq.view());
        let k = head.wk.forward(&nv.view());
        let logits = head_logits(&q.view(), &k.view(), self.dims.heads);
        let cache = HeadCache {
            hq: hq.to_owned(),
            hv: hv.to_owned(),
            nq,
            nv,
            lnq,
            lnv,
            q,
            k,
        };
        (logits, cache)
    }

    /// Returns `(dL/dH_roi, dL/dH_v)`.
    fn head_backward(&self, cache: &HeadCache, dlogits: &ArrayView2<f64>, grad: &mut Block) -> (Array2<f64>, Array2<f64>) {
        let head = self.head_block();
        let inv_h = 1.0 / self.dims.heads as f64;
        // mean over heads of per-head products equals the full product / heads
        let dq = dlogits.dot(&cache.k) * inv_h;
        let dk = dlogits.t().dot(&cache.q) * inv_h;
        let dnq = head.wq.backward(&cache.nq.view(), &dq.view(), &mut grad.wq);
        let dnv = head.wk.backward(&cache.nv.view(), &dk.view(), &mut grad.wk);
        let dhq = head.ln1.backward(&cache.lnq, &dnq.view(), &mut grad.ln1);
        let dhv = head.ln1.backward(&cache.lnv, &dnv.view(), &mut grad.ln1);
        debug_assert_eq!(dhq.dim(), cache.hq.dim());
        debug_assert_eq!(dhv.dim(), cache.hv.dim());
        (dhq, dhv)
    }

    /// Forward from depth-`B` states through the trainable blocks and the
    /// head, then back-propagates `loss` (which maps logits to
    /// `(value, dvalue/dlogits)`). Returns the loss value and gradients of
    /// every trainable block.
    pub fn loss_and_grads<F>(&self, frozen_states: &ArrayView2<f64>, visual: usize, loss: F) -> Result<(f64, StudentGrads)>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let heads = self.dims.heads;
        let body = &self.blocks[self.frozen..self.blocks.len() - 1];
        let mut x = frozen_states.to_owned();
        let mut caches = Vec::with_capacity(body.len());
        for b in body {
            let (y, c) = b.forward_cached(&x.view(), heads);
            caches.push(c);
            x = y;
        }
        let turns = x.nrows() - visual;
        let (logits, head_cache) = self.head_forward(&x.slice(s![visual.., ..]), &x.slice(s![..visual, ..]));
        debug_assert_eq!(logits.dim(), (turns, visual));
        let (value, dlogits) = loss(&logits)?;

        let mut grads = StudentGrads::zeros(&self.dims, self.trainable);
        let (dhq, dhv) = {
            let last = grads.blocks.last_mut().unwrap();
            self.head_backward(&head_cache, &dlogits.view(), last)
        };
        let mut dx = Array2::zeros(x.dim());
        dx.slice_mut(s![..visual, ..]).assign(&dhv);
        dx.slice_mut(s![visual.., ..]).assign(&dhq);
        for (i, (b, c)) in body.iter().zip(&caches).enumerate().rev() {
            dx = b.backward(c, &dx.view(), heads, &mut grads.blocks[i]);
        }
        Ok((value, grads))
    }

    pub fn trainable_params(&self) -> Vec<(String, &[f64])> {
        named(&self.blocks[self.frozen..], self.frozen)
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks[self.frozen..]
            .iter_mut()
            .flat_map(|b| b.params_mut().into_iter().map(|(_, p)| p))
            .collect()
    }

    /// Every parameter with its checkpoint name, frozen ones first.
    pub fn all_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .embed
            .params()
            .into_iter()
            .map(|(n, p)| (format!("embed.{n}"), p))
            .collect();
        out.extend(named(&self.blocks, 0));
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = self
            .embed
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("embed.{n}"), p))
            .collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|(n, p)| (format!("block{}.{n}", i + 1), p)));
        }
        out
    }

    /// SHA-256 over the embedding and frozen blocks.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        let frozen = self
            .embed
            .params()
            .into_iter()
            .chain(self.blocks[..self.frozen].iter().flat_map(|b| b.params()));
        for (_, p) in frozen {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gathers the hidden state at each turn's last query token, in turn order.
pub fn select_query_states(hidden: &ArrayView2<f64>, boundaries: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = boundaries.iter().find(|&&b| b >= hidden.nrows()) {
        return Err(Error::OutOfRange {
            index: bad,
            len: hidden.nrows(),
        });
    }
    Ok(hidden.select(Axis(0), boundaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 3,
            d_model: 8,
            heads: 2,
            mlp_ratio: 2,
            depth: 4,
            max_turns: 3,
        }
    }

    fn features(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed, 0);
        Array2::from_shape_simple_fn((n, 3), || rng.normal())
    }

    #[test]
    fn head_logits_examples() {
        let q = array![[1.0, 0.0]];
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(head_logits(&q.view(), &k.view(), 1), array![[1.0, 0.0]]);
        // head 0 -> [2, 0], head 1 -> [0, 2]
        let q = array![[2.0, 2.0]];
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(head_logits(&q.view(), &k.view(), 2), array![[1.0, 1.0]]);
    }

    #[test]
    fn head_logits_match_naive_loops() {
        let mut rng = RngStream::new(5, 5);
        let q = Array2::from_shape_simple_fn((3, 8), || rng.normal());
        let k = Array2::from_shape_simple_fn((5, 8), || rng.normal());
        let got = head_logits(&q.view(), &k.view(), 4);
        for t in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for h in 0..4 {
                    let mut dot = 0.0;
                    for c in h * 2..h * 2 + 2 {
                        dot += q[[t, c]] * k[[j, c]];
                    }
                    acc += dot;
                }
                assert!((got[[t, j]] - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_rows_are_distributions_over_the_past() {
        let mut rng = RngStream::new(1, 1);
        let q = Array2::from_shape_simple_fn((5, 4), || rng.normal());
        let k = Array2::from_shape_simple_fn((5, 4), || rng.normal());
        let v = Array2::from_shape_simple_fn((5, 4), || rng.normal());
        let (_, probs) = causal_attention(&q, &k, &v, 2);
        for p in probs {
            for (i, row) in p.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().skip(i + 1).all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn single_trainable_block_reads_frozen_depth() {
        let t = Transformer::random(dims(), 3).unwrap();
        let s = StudentModel::from_teacher(&t, 2, 1).unwrap();
        let f = features(6, 1);
        assert_eq!(s.forward_hidden(&f.view(), 1).unwrap(), s.frozen_hidden(&f.view(), 1).unwrap());
    }

    #[test]
    fn zeroed_trainable_blocks_preserve_the_residual_stream() {
        let t = Transformer::random(dims(), 3).unwrap();
        let mut s = StudentModel::from_teacher(&t, 1, 3).unwrap();
        for b in &mut s.blocks[1..] {
            *b = Block::zeros(&s.dims);
        }
        let f = features(6, 2);
        assert_eq!(s.forward_hidden(&f.view(), 2).unwrap(), s.frozen_hidden(&f.view(), 2).unwrap());
    }

    #[test]
    fn student_copies_teacher_blocks() {
        let t = Transformer::random(dims(), 9).unwrap();
        let s = StudentModel::from_teacher(&t, 1, 2).unwrap();
        assert_eq!(s.blocks[..], t.blocks[..3]);
        assert!(StudentModel::from_teacher(&t, 3, 2).is_err());
        assert!(StudentModel::from_teacher(&t, 2, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let t = Transformer::random(dims(), 4).unwrap();
        let s = StudentModel::from_teacher(&t, 2, 2).unwrap();
        let f = features(7, 3);
        let a = s.predict(&f.view(), 2).unwrap();
        let b = s.predict(&f.view(), 2).unwrap();
        assert_eq!(a.dim(), (2, 7));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn query_selection() {
        let hidden = Array2::from_shape_fn((5, 2), |(i, j)| (i * 10 + j) as f64);
        let one = select_query_states(&hidden.view(), &[4]).unwrap();
        assert_eq!(one, array![[40.0, 41.0]]);
        let two = select_query_states(&hidden.view(), &[3, 4]).unwrap();
        let swapped = select_query_states(&hidden.view(), &[4, 3]).unwrap();
        assert_eq!(two.row(0), swapped.row(1));
        assert_eq!(two.row(1), swapped.row(0));
        assert!(matches!(
            select_query_states(&hidden.view(), &[5]),
            Err(Error::OutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn feature_dim_mismatch_is_a_shape_error() {
        let t = Transformer::random(dims(), 4).unwrap();
        let s = StudentModel::from_teacher(&t, 2, 2).unwrap();
        let bad = Array2::zeros((4, 5));
        assert!(matches!(s.predict(&bad.view(), 1), Err(Error::ShapeMismatch { .. })));
    }
}
