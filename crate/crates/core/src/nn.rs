//! Parameterized layers shared by the encoder, embedding network and
//! decoders. Layers own only [`ParamId`]s; values live in a [`ParamStore`].

use crate::error::Result;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Masked attention scores are set to this before the softmax.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::new_keyed(store, name, name, d_in, d_out, bias)
    }

    /// Like [`Linear::new`] but seeds initialization from `init_key`.
    pub fn new_keyed(store: &mut ParamStore, name: &str, init_key: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add_keyed(&format!("{name}.w"), &format!("{init_key}.w"), &[d_in, d_out], Init::FanIn(d_in));
        let b = bias.then(|| store.add_keyed(&format!("{name}.b"), &format!("{init_key}.b"), &[d_out], Init::FanIn(d_in)));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.pointwise_conv1d(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), &[d], Init::Ones),
            beta: store.add(&format!("{name}.beta"), &[d], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, Some(gamma), Some(beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
}

/// Two-layer position-wise network `W2 · act(W1 · x)`, no normalization.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
    pub dropout: f64,
    tag: String,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, act: Activation, dropout: f64) -> Self {
        Self::new_keyed(store, name, name, d, d_ff, act, dropout)
    }

    /// Initialization and dropout masks are keyed by `init_key`, so a layer
    /// built under another name can reproduce this one exactly.
    pub fn new_keyed(
        store: &mut ParamStore,
        name: &str,
        init_key: &str,
        d: usize,
        d_ff: usize,
        act: Activation,
        dropout: f64,
    ) -> Self {
        FeedForward {
            up: Linear::new_keyed(store, &format!("{name}.up"), &format!("{init_key}.up"), d, d_ff, true),
            down: Linear::new_keyed(store, &format!("{name}.down"), &format!("{init_key}.down"), d_ff, d, true),
            act,
            dropout,
            tag: init_key.to_string(),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = match self.act {
            Activation::Swish => g.swish(h)?,
            Activation::Relu => g.relu(h)?,
        };
        let h = g.dropout(h, self.dropout, &format!("{}.hidden", self.tag))?;
        self.down.forward(g, s, h)
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.down.num_params()
    }
}

/// Scaled dot-product attention with `heads` heads over a shared width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Attention output together with each head's `[Tq × Tk]` weight matrix.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true),
            // a key bias shifts every score in a row equally: no effect
            k: Linear::new(store, &format!("{name}.k"), d, d, false),
            v: Linear::new(store, &format!("{name}.v"), d, d, true),
            out: Linear::new(store, &format!("{name}.out"), d, d, true),
            heads,
            d,
        }
    }

    /// `mask`, when given, is row-major `[Tq × Tk]`; `true` hides a key.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, query: Var, memory: Var, mask: Option<&[bool]>) -> Result<Attended> {
        let dk = self.d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, memory)?;
        let v = self.v.forward(g, s, memory)?;
        let mut ctx: Option<Var> = None;
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dk, dk)?;
            let kh = g.slice_last(k, h * dk, dk)?;
            let vh = g.slice_last(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.mask_fill(scores, m, MASK_VALUE)?;
            }
            let attn = g.softmax(scores)?;
            weights.push(attn);
            let c = g.matmul(attn, vh)?;
            ctx = Some(match ctx {
                None => c,
                Some(prev) => g.concat_last(prev, c)?,
            });
        }
        let out = self.out.forward(g, s, ctx.expect("at least one head"))?;
        Ok(Attended { out, weights })
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.out.num_params()
    }
}

/// Absolute sinusoidal position table `[t × d]`.
pub fn sinusoid_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape")
}

/// Causal mask `[t × t]`: position `i` may not attend to `j > i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t > k / t).collect()
}
