//! Conformer encoder: convolutional subsampling, Macaron blocks and taps at
//! intermediate depths.
//!
//! Each block computes
//!
//! ```text
//! x̂ = x + ½·FFN₁(x)
//! x̃ = x̂ + MHSA(x̂)
//! x̄ = x̃ + Conv(x̃)
//! y = LN(x̄ + ½·FFN₂(x̄))
//! ```
//!
//! with every sub-module pre-normalized. `FFN₂` is either dense or a top-1
//! MoE layer.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::moe::{ForwardStats, MoeLayer, RoutingRecord};
use crate::nn::{sinusoid_positions, Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

/// Shortest input that survives two unpadded 3×3 stride-2 convolutions.
pub const MIN_FRAMES: usize = 7;

/// Output length of the subsampling front end.
pub fn subsampled_len(t: usize) -> usize {
    if t < MIN_FRAMES {
        return 0;
    }
    ((t - 1) / 2 - 1) / 2
}

fn conv_out(n: usize) -> usize {
    (n - 3) / 2 + 1
}

/// Two 3×3 stride-2 convolutions with ReLU, then a linear map to `d_att`.
#[derive(Clone, Debug)]
pub struct Subsampler {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub proj: Linear,
    pub channels: usize,
    pub feat_dim: usize,
    pub d_out: usize,
}

impl Subsampler {
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, channels: usize, d_out: usize) -> Self {
        let c = channels;
        let f2 = conv_out(conv_out(feat_dim));
        Subsampler {
            conv1_w: store.add(&format!("{name}.conv1.w"), &[c, 1, 3, 3], Init::FanIn(9)),
            conv1_b: store.add(&format!("{name}.conv1.b"), &[c], Init::FanIn(9)),
            conv2_w: store.add(&format!("{name}.conv2.w"), &[c, c, 3, 3], Init::FanIn(9 * c)),
            conv2_b: store.add(&format!("{name}.conv2.b"), &[c], Init::FanIn(9 * c)),
            proj: Linear::new(store, &format!("{name}.proj"), c * f2, d_out, true),
            channels,
            feat_dim,
            d_out,
        }
    }

    /// `feats: [T × D]` → `[T' × d_out]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, feats: Var) -> Result<Var> {
        let (t, d) = match *g.shape(feats) {
            [t, d] => (t, d),
            ref other => return Err(Error::invalid(format!("subsample expects [T × D], got {other:?}"))),
        };
        if t < MIN_FRAMES {
            return Err(Error::TooShort { got: t, min: MIN_FRAMES });
        }
        if d != self.feat_dim {
            return Err(Error::invalid(format!("subsample built for {} dims, got {d}", self.feat_dim)));
        }
        let x = g.reshape(feats, &[t, 1, d])?;
        let (w1, b1) = (g.param(s, self.conv1_w), g.param(s, self.conv1_b));
        let h = g.conv2d(x, w1, b1, 2)?;
        let h = g.relu(h)?;
        let (w2, b2) = (g.param(s, self.conv2_w), g.param(s, self.conv2_b));
        let h = g.conv2d(h, w2, b2, 2)?;
        let h = g.relu(h)?;
        let (t2, c, f2) = match *g.shape(h) {
            [a, b, c] => (a, b, c),
            _ => unreachable!("conv2d returns rank 3"),
        };
        let h = g.reshape(h, &[t2, c * f2])?;
        self.proj.forward(g, s, h)
    }
}

/// Pointwise → GLU → depthwise → LN → swish → pointwise, pre-normalized.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw1: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub dw_norm: LayerNorm,
    pub pw2: Linear,
    pub kernel: usize,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, kernel: usize) -> Self {
        ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            pw1: Linear::new(store, &format!("{name}.pw1"), d, 2 * d, true),
            dw_w: store.add(&format!("{name}.dw.w"), &[d, kernel], Init::FanIn(kernel)),
            dw_b: store.add(&format!("{name}.dw.b"), &[d], Init::FanIn(kernel)),
            dw_norm: LayerNorm::new(store, &format!("{name}.dw_norm"), d),
            pw2: Linear::new(store, &format!("{name}.pw2"), d, d, true),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, s, x)?;
        let h = self.pw1.forward(g, s, h)?;
        let h = g.glu(h)?;
        let (w, b) = (g.param(s, self.dw_w), g.param(s, self.dw_b));
        let h = g.depthwise_conv1d(h, w, Some(b))?;
        let h = self.dw_norm.forward(g, s, h)?;
        let h = g.swish(h)?;
        self.pw2.forward(g, s, h)
    }
}

/// The second Macaron feed-forward path.
#[derive(Clone, Debug)]
pub enum SecondFfn {
    Dense(FeedForward),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub name: String,
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub att_norm: LayerNorm,
    pub att: MultiHeadAttention,
    pub conv: ConvModule,
    pub ffn2_norm: LayerNorm,
    pub ffn2: SecondFfn,
    pub final_norm: LayerNorm,
    pub dropout: f64,
}

/// Intermediate values of one block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub x_hat: Var,
    pub x_tilde: Var,
    pub x_bar: Var,
    pub y: Var,
    pub attention: Vec<Var>,
    pub routing: Option<RoutingRecord>,
}

/// Block width and expert settings; `experts == 0` builds a dense block.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub experts: usize,
    pub d_emb: usize,
}

impl BlockDims {
    pub fn dense(cfg: &ModelConfig) -> Self {
        BlockDims {
            d: cfg.d_att,
            d_ff: cfg.d_ff,
            heads: cfg.heads,
            kernel: cfg.kernel,
            dropout: cfg.dropout,
            experts: 0,
            d_emb: cfg.d_emb(),
        }
    }
}

impl ConformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: BlockDims) -> Self {
        let d = dims.d;
        let ffn1 = FeedForward::new(store, &format!("{name}.ffn1"), d, dims.d_ff, Activation::Swish, dims.dropout);
        let att_norm = LayerNorm::new(store, &format!("{name}.att_norm"), d);
        let att = MultiHeadAttention::new(store, &format!("{name}.att"), d, dims.heads);
        let conv = ConvModule::new(store, &format!("{name}.conv"), d, dims.kernel);
        let ffn2_norm = LayerNorm::new(store, &format!("{name}.ffn2_norm"), d);
        let ffn2_name = format!("{name}.ffn2");
        let ffn2 = if dims.experts == 0 {
            SecondFfn::Dense(FeedForward::new(store, &ffn2_name, d, dims.d_ff, Activation::Swish, dims.dropout))
        } else {
            SecondFfn::Moe(MoeLayer::new(store, &ffn2_name, d, dims.d_emb, dims.d_ff, dims.experts, dims.dropout))
        };
        ConformerBlock {
            name: name.to_string(),
            ffn1_norm: LayerNorm::new(store, &format!("{name}.ffn1_norm"), d),
            ffn1,
            att_norm,
            att,
            conv,
            ffn2_norm,
            ffn2,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
            dropout: dims.dropout,
        }
    }

    pub fn moe(&self) -> Option<&MoeLayer> {
        match &self.ffn2 {
            SecondFfn::Moe(m) => Some(m),
            SecondFfn::Dense(_) => None,
        }
    }

    /// `emb` is the shared embedding `e^c`, required by MoE blocks.
    /// `frozen` overrides the router's top-1 choice per frame.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        emb: Option<Var>,
        frozen: Option<&[usize]>,
        stats: &mut ForwardStats,
    ) -> Result<BlockTrace> {
        let p = self.dropout;
        let n = &self.name;

        let h = self.ffn1_norm.forward(g, s, x)?;
        let h = self.ffn1.forward(g, s, h)?;
        let h = g.dropout(h, p, &format!("{n}.ffn1.out"))?;
        let h = g.scale(h, 0.5)?;
        let x_hat = g.add(x, h)?;

        let h = self.att_norm.forward(g, s, x_hat)?;
        let att = self.att.forward(g, s, h, h, None)?;
        let h = g.dropout(att.out, p, &format!("{n}.att.out"))?;
        let x_tilde = g.add(x_hat, h)?;

        let h = self.conv.forward(g, s, x_tilde)?;
        let h = g.dropout(h, p, &format!("{n}.conv.out"))?;
        let x_bar = g.add(x_tilde, h)?;

        let h = self.ffn2_norm.forward(g, s, x_bar)?;
        let (h, routing) = match &self.ffn2 {
            SecondFfn::Dense(ff) => (ff.forward(g, s, h)?, None),
            SecondFfn::Moe(moe) => {
                let emb = emb.ok_or_else(|| Error::invalid(format!("{n}: MoE block needs the shared embedding")))?;
                let rec = moe.route(g, s, emb, x_bar, frozen)?;
                (moe.moe_ffn(g, s, h, &rec, stats)?, Some(rec))
            }
        };
        let h = g.dropout(h, p, &format!("{n}.ffn2.out"))?;
        let h = g.scale(h, 0.5)?;
        let h = g.add(x_bar, h)?;
        let y = self.final_norm.forward(g, s, h)?;
        Ok(BlockTrace {
            x_hat,
            x_tilde,
            x_bar,
            y,
            attention: att.weights,
            routing,
        })
    }
}

/// Result of [`ConformerEncoder::forward`]. Tap keys count blocks applied.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub final_out: Var,
    pub taps: BTreeMap<usize, Var>,
    pub routing: Vec<RoutingRecord>,
}

#[derive(Clone, Debug)]
pub struct ConformerEncoder {
    pub subsample: Subsampler,
    pub blocks: Vec<ConformerBlock>,
    pub taps: Vec<usize>,
    pub d: usize,
    pub dropout: f64,
    name: String,
}

impl ConformerEncoder {
    /// The main encoder. Blocks selected by [`ModelConfig::block_is_moe`]
    /// carry MoE layers; taps follow [`ModelConfig::tap_blocks`].
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Self {
        let subsample = Subsampler::new(store, &format!("{name}.subsample"), cfg.feat_dim, cfg.subsample_channels, cfg.d_att);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let mut dims = BlockDims::dense(cfg);
                if cfg.block_is_moe(i) {
                    dims.experts = cfg.num_experts;
                }
                ConformerBlock::new(store, &format!("{name}.block{i}"), dims)
            })
            .collect();
        ConformerEncoder {
            subsample,
            blocks,
            taps: cfg.tap_blocks(),
            d: cfg.d_att,
            dropout: cfg.dropout,
            name: name.to_string(),
        }
    }

    /// A dense stack of `num_blocks` blocks at width `d` with no taps.
    pub fn dense(store: &mut ParamStore, name: &str, cfg: &ModelConfig, d: usize, num_blocks: usize) -> Self {
        let subsample = Subsampler::new(store, &format!("{name}.subsample"), cfg.feat_dim, cfg.subsample_channels, d);
        let dims = BlockDims {
            d,
            ..BlockDims::dense(cfg)
        };
        let blocks = (0..num_blocks)
            .map(|i| ConformerBlock::new(store, &format!("{name}.block{i}"), dims))
            .collect();
        ConformerEncoder {
            subsample,
            blocks,
            taps: Vec::new(),
            d,
            dropout: cfg.dropout,
            name: name.to_string(),
        }
    }

    pub fn num_moe_layers(&self) -> usize {
        self.blocks.iter().filter(|b| b.moe().is_some()).count()
    }

    /// Subsampling plus absolute positions, before any block.
    pub fn front(&self, g: &mut Graph, s: &ParamStore, feats: Var) -> Result<Var> {
        let h = self.subsample.forward(g, s, feats)?;
        let t = g.shape(h)[0];
        let pos = g.constant(sinusoid_positions(t, self.d));
        let h = g.add(h, pos)?;
        g.dropout(h, self.dropout, &format!("{}.front", self.name))
    }

    /// `frozen`, when given, holds one route per MoE layer in block order.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        feats: Var,
        emb: Option<Var>,
        frozen: Option<&[Vec<usize>]>,
        stats: &mut ForwardStats,
    ) -> Result<EncoderOutput> {
        let mut x = self.front(g, s, feats)?;
        let mut taps = BTreeMap::new();
        let mut routing = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let route = match (frozen, block.moe()) {
                (Some(f), Some(_)) => Some(
                    f.get(routing.len())
                        .ok_or_else(|| Error::invalid("frozen routes: fewer entries than MoE layers"))?
                        .as_slice(),
                ),
                _ => None,
            };
            let trace = block.forward(g, s, x, emb, route, stats)?;
            x = trace.y;
            routing.extend(trace.routing);
            if self.taps.contains(&(i + 1)) {
                taps.insert(i + 1, x);
            }
        }
        Ok(EncoderOutput { final_out: x, taps, routing })
    }
}
