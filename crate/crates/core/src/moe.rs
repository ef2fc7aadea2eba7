//! Top-1 mixture of experts: the router, gated expert dispatch, the shared
//! embedding network that conditions every router, and the auxiliary
//! routing losses.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::ConformerEncoder;
use crate::error::{Error, Result};
use crate::nn::{Activation, FeedForward, Linear};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Instrumentation counters for one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardStats {
    /// Expert FFN invocations (each on a subset of frames).
    pub expert_calls: usize,
    /// Frames pushed through any expert, summed over MoE layers.
    pub expert_frames: usize,
    /// Frames routed, summed over MoE layers.
    pub routed_frames: usize,
    /// Shared-embedding forward passes.
    pub embedding_forwards: usize,
}

impl ForwardStats {
    pub fn merge(&mut self, other: &ForwardStats) {
        self.expert_calls += other.expert_calls;
        self.expert_frames += other.expert_frames;
        self.routed_frames += other.routed_frames;
        self.embedding_forwards += other.embedding_forwards;
    }
}

/// Router output for one layer over `T` frames.
#[derive(Clone, Debug)]
pub struct RoutingRecord {
    /// `[T × n]` router distribution.
    pub probs: Var,
    pub selected: Vec<usize>,
    /// `[T × 1]`, the selected expert's probability per frame.
    pub gate: Var,
    pub n: usize,
}

impl RoutingRecord {
    /// Frames sent to each expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n];
        for &e in &self.selected {
            c[e] += 1;
        }
        c
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn top1(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Router `W_r: [(d_emb + d) × n]` and `n` expert FFNs of identical shape.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: ParamId,
    pub experts: Vec<FeedForward>,
    pub d: usize,
    pub d_emb: usize,
    pub d_ff: usize,
    pub n: usize,
}

impl MoeLayer {
    /// Expert 0 is initialized (and draws dropout) exactly like a dense FFN
    /// named `name`, so a one-expert layer can reproduce a dense block.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_emb: usize, d_ff: usize, n: usize, dropout: f64) -> Self {
        assert!(n > 0, "MoE layer needs at least one expert");
        let router = store.add(&format!("{name}.router"), &[d_emb + d, n], Init::FanIn(d_emb + d));
        let experts = (0..n)
            .map(|e| {
                let ename = format!("{name}.expert{e}");
                let key = if e == 0 { name.to_string() } else { ename.clone() };
                FeedForward::new_keyed(store, &ename, &key, d, d_ff, Activation::Swish, dropout)
            })
            .collect();
        MoeLayer {
            router,
            experts,
            d,
            d_emb,
            d_ff,
            n,
        }
    }

    /// `p = softmax(W_r · concat(e_c; o_prev))` per frame with top-1
    /// selection, or the given `frozen` selection.
    pub fn route(&self, g: &mut Graph, s: &ParamStore, e_c: Var, o_prev: Var, frozen: Option<&[usize]>) -> Result<RoutingRecord> {
        let (es, os) = (g.shape(e_c).to_vec(), g.shape(o_prev).to_vec());
        if es.len() != 2 || os.len() != 2 || es[0] != os[0] || es[1] != self.d_emb || os[1] != self.d {
            return Err(Error::ShapeMismatch {
                op: "route",
                lhs: es,
                rhs: os,
            });
        }
        let input = g.concat_last(e_c, o_prev)?;
        let w = g.param(s, self.router);
        let logits = g.matmul(input, w)?;
        let probs = g.softmax(logits)?;
        let selected = match frozen {
            Some(f) => {
                if f.len() != es[0] || f.iter().any(|&e| e >= self.n) {
                    return Err(Error::invalid(format!("frozen route invalid for {} frames, {} experts", es[0], self.n)));
                }
                f.to_vec()
            }
            None => {
                let p = g.value(probs);
                (0..p.rows()).map(|r| top1(p.row(r))).collect()
            }
        };
        let gate = g.pick_per_row(probs, &selected)?;
        Ok(RoutingRecord {
            probs,
            selected,
            gate,
            n: self.n,
        })
    }

    /// `y_t = gate_t · E_{selected_t}(x_t)`; each frame visits one expert.
    pub fn moe_ffn(&self, g: &mut Graph, s: &ParamStore, x: Var, rec: &RoutingRecord, stats: &mut ForwardStats) -> Result<Var> {
        let t = g.shape(x)[0];
        if rec.selected.len() != t {
            return Err(Error::invalid(format!("routing covers {} frames, input has {t}", rec.selected.len())));
        }
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..t).filter(|&j| rec.selected[j] == e).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = g.gather_rows(x, &idx)?;
            let y = expert.forward(g, s, sub)?;
            let y = g.scatter_rows(y, &idx, t)?;
            stats.expert_calls += 1;
            stats.expert_frames += idx.len();
            out = Some(match out {
                None => y,
                Some(acc) => g.add(acc, y)?,
            });
        }
        stats.routed_frames += t;
        let out = match out {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[0, self.d])),
        };
        g.mul_col(out, rec.gate)
    }

    pub fn num_params(&self) -> usize {
        (self.d_emb + self.d) * self.n + self.experts.iter().map(FeedForward::num_params).sum::<usize>()
    }
}

fn frames(g: &Graph, p: Var, op: &str) -> Result<usize> {
    match *g.shape(p) {
        [0, _] => Err(Error::invalid(format!("{op}: no frames"))),
        [k, _] => Ok(k),
        ref other => Err(Error::invalid(format!("{op}: expected [k × n], got {other:?}"))),
    }
}

/// `L_s = (1/k) Σ_j ‖p_j / ‖p_j‖₂‖₁`. Lies in `[1, √n]`.
pub fn sparsity_loss(g: &mut Graph, p: Var) -> Result<Var> {
    frames(g, p, "sparsity_loss")?;
    let l1 = g.abs(p)?;
    let l1 = g.sum_last(l1)?;
    let sq = g.mul(p, p)?;
    let sq = g.sum_last(sq)?;
    let l2 = g.sqrt(sq)?;
    let r = g.div(l1, l2)?;
    g.mean(r)
}

/// `L_m = n Σ_i ((1/k) Σ_j p_ij)²`. Lies in `[1, n]`.
pub fn mean_importance_loss(g: &mut Graph, p: Var) -> Result<Var> {
    frames(g, p, "mean_importance_loss")?;
    let n = g.shape(p)[1];
    let m = g.mean_rows(p)?;
    let sq = g.mul(m, m)?;
    let s = g.sum(sq)?;
    g.scale(s, n as f64)
}

/// `L_MoE = α·L_s + β·L_m + γ·L_e`.
pub fn moe_loss(ls: f64, lm: f64, le: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    alpha * ls + beta * lm + gamma * le
}

/// Entropy (nats) of the empirical expert-utilization histogram.
pub fn utilization_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * (1.0 / p).ln()
        })
        .sum()
}

/// A dense Conformer stack mapping features to `e^c: [T' × d_emb]`, with
/// its own CTC head.
#[derive(Clone, Debug)]
pub struct SharedEmbedding {
    pub net: ConformerEncoder,
    pub ctc_head: Linear,
}

/// Embedding and the head's CTC log-posteriors `[T' × (V+1)]`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingOutput {
    pub emb: Var,
    pub ctc_log_probs: Var,
}

impl SharedEmbedding {
    pub const PREFIX: &'static str = "emb";

    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.d_emb();
        let net = ConformerEncoder::dense(store, &format!("{}.net", Self::PREFIX), cfg, d, cfg.emb_blocks());
        let ctc_head = Linear::new(store, &format!("{}.ctc", Self::PREFIX), d, cfg.ctc_classes(), true);
        SharedEmbedding { net, ctc_head }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, feats: Var, stats: &mut ForwardStats) -> Result<EmbeddingOutput> {
        stats.embedding_forwards += 1;
        let out = self.net.forward(g, s, feats, None, None, stats)?;
        let logits = self.ctc_head.forward(g, s, out.final_out)?;
        let ctc_log_probs = g.log_softmax(logits)?;
        Ok(EmbeddingOutput {
            emb: out.final_out,
            ctc_log_probs,
        })
    }
}
