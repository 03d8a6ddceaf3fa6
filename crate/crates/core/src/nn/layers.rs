use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng);
        let b = store.zeros(format!("{name}.b"), &[fan_out]);
        Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Square-kernel NHWC convolution with "same"-style padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// He-uniform initialization, suited to a following ReLU.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            w: store.uniform(format!("{name}.w"), &[kernel, kernel, c_in, c_out], bound, rng),
            b: store.zeros(format!("{name}.b"), &[c_out]),
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `query [B, Tq, D]` attends over `context [B, Tk, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, query: Var, context: Var) -> Var {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(context).to_vec();
        let (b, tq, tk) = (qs[0], qs[1], ks[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, context);
        let v = self.v.forward(g, store, context);
        let split = |g: &mut Graph<T>, x: Var, t: usize| {
            let x = g.reshape(x, &[b, t, h, dh]);
            let x = g.permute(x, [0, 2, 1, 3]);
            g.reshape(x, &[b * h, t, dh])
        };
        let q = split(g, q, tq);
        let k = split(g, k, tk);
        let v = split(g, v, tk);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let p = g.softmax(scores);
        let ctx = g.bmm(p, v, false);
        let ctx = g.reshape(ctx, &[b, h, tq, dh]);
        let ctx = g.permute(ctx, [0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, tq, self.dim]);
        self.out.forward(g, store, ctx)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer block; cross-attention is present only when built with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let norm_self = LayerNorm::new(store, &format!("{name}.norm_self"), dim);
        let self_attn = Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
                Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            )
        });
        let norm_ff = LayerNorm::new(store, &format!("{name}.norm_ff"), dim);
        let ff = FeedForward::new(store, &format!("{name}.ff"), dim, 4 * dim, rng);
        Self {
            norm_self,
            self_attn,
            cross,
            norm_ff,
            ff,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, memory: Option<Var>) -> Var {
        let h = self.norm_self.forward(g, store, x);
        let h = self.self_attn.forward(g, store, h, h);
        let mut x = g.add(x, h);
        if let Some((norm, attn)) = &self.cross {
            let mem = memory.expect("cross-attention block needs a memory sequence");
            let h = norm.forward(g, store, x);
            let h = attn.forward(g, store, h, mem);
            x = g.add(x, h);
        }
        let h = self.norm_ff.forward(g, store, x);
        let h = self.ff.forward(g, store, h);
        g.add(x, h)
    }
}
