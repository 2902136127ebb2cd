//! Transformer building blocks: linear maps, layer norm, multi-head
//! attention, and full encoder/decoder layers (post-norm residual wiring).

use crate::graph::{Graph, NodeId};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add_xavier(format!("{name}.w"), d_in, d_out, rng);
        let b = store.add_zeros(format!("{name}.b"), &[d_out]);
        Linear { w, b: Some(b) }
    }

    pub fn new_no_bias(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), d_in, d_out, rng);
        Linear { w, b: None }
    }

    /// Zero-initialized map; useful for output layers that should start at
    /// a known baseline.
    pub fn new_zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), &[d_in, d_out]);
        let b = store.add_zeros(format!("{name}.b"), &[d_out]);
        Linear { w, b: Some(b) }
    }

    /// x [n, d_in] -> [n, d_out].
    pub fn apply(&self, g: &Graph, binder: &Binder, x: NodeId) -> NodeId {
        let y = g.matmul(x, binder.node(g, self.w));
        match self.b {
            Some(b) => g.add_row(y, binder.node(g, b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0));
        let bias = store.add_zeros(format!("{name}.bias"), &[d]);
        LayerNorm { gain, bias }
    }

    pub fn apply(&self, g: &Graph, binder: &Binder, x: NodeId) -> NodeId {
        g.layer_norm_rows(x, binder.node(g, self.gain), binder.node(g, self.bias))
    }
}

#[derive(Clone, Debug)]
struct HeadProj {
    wq: Linear,
    wk: Linear,
    wv: Linear,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: Vec<HeadProj>,
    wo: Linear,
    dk: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, n_heads: usize) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "heads must divide d");
        let dk = d / n_heads;
        let heads = (0..n_heads)
            .map(|h| HeadProj {
                wq: Linear::new_no_bias(store, rng, &format!("{name}.h{h}.wq"), d, dk),
                wk: Linear::new_no_bias(store, rng, &format!("{name}.h{h}.wk"), d, dk),
                wv: Linear::new_no_bias(store, rng, &format!("{name}.h{h}.wv"), d, dk),
            })
            .collect();
        let wo = Linear::new(store, rng, &format!("{name}.wo"), d, d);
        MultiHeadAttention { heads, wo, dk }
    }

    /// Attends queries [T,d] over keys/values [S,d]; `mask` is an additive
    /// constant [T,S] (0 where allowed, MASK_NEG where not).
    pub fn apply(
        &self,
        g: &Graph,
        binder: &Binder,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<NodeId>,
    ) -> NodeId {
        let scale = 1.0 / (self.dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = h.wq.apply(g, binder, q_in);
            let k = h.wk.apply(g, binder, kv_in);
            let v = h.wv.apply(g, binder, kv_in);
            let mut scores = g.scale(g.matmul_nt(q, k), scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, v));
        }
        let cat = g.concat_cols(&outs);
        self.wo.apply(g, binder, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    w1: Linear,
    w2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            w1: Linear::new(store, rng, &format!("{name}.ff1"), d, hidden),
            w2: Linear::new(store, rng, &format!("{name}.ff2"), hidden, d),
        }
    }

    pub fn apply(&self, g: &Graph, binder: &Binder, x: NodeId) -> NodeId {
        self.w2.apply(g, binder, g.relu(self.w1.apply(g, binder, x)))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, heads: usize) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, 4 * d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn apply(&self, g: &Graph, binder: &Binder, x: NodeId, mask: Option<NodeId>) -> NodeId {
        let h = self.ln1.apply(g, binder, g.add(x, self.attn.apply(g, binder, x, x, mask)));
        self.ln2.apply(g, binder, g.add(h, self.ff.apply(g, binder, h)))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, heads: usize) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, 4 * d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    /// x [T,d] with causal self-attention, cross-attending into mem [S,d].
    pub fn apply(
        &self,
        g: &Graph,
        binder: &Binder,
        x: NodeId,
        mem: NodeId,
        causal: NodeId,
    ) -> NodeId {
        let h = self
            .ln1
            .apply(g, binder, g.add(x, self.self_attn.apply(g, binder, x, x, Some(causal))));
        let h = self
            .ln2
            .apply(g, binder, g.add(h, self.cross_attn.apply(g, binder, h, mem, None)));
        self.ln3.apply(g, binder, g.add(h, self.ff.apply(g, binder, h)))
    }
}

/// Sinusoidal position table [t_max, d]; added to token embeddings only,
/// never to bag vectors.
pub fn sinusoidal_positions(t_max: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t_max * d];
    for t in 0..t_max {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 * rate;
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(t_max, d, data)
}

/// Additive causal mask [t, t]: position i may attend to j <= i.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    Tensor::matrix(t, t, data)
}
