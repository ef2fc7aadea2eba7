//! Attention decoders: the main decoder on the final encoder output and
//! train-only auxiliary decoders on intermediate taps.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoid_positions, Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub name: String,
    pub self_norm: LayerNorm,
    pub self_att: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_att: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, heads: usize, dropout: f64) -> Self {
        DecoderBlock {
            name: name.to_string(),
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            self_att: MultiHeadAttention::new(store, &format!("{name}.self_att"), d, heads),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            cross_att: MultiHeadAttention::new(store, &format!("{name}.cross_att"), d, heads),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, Activation::Relu, dropout),
            dropout,
        }
    }

    /// `x: [L × d]` decoder states, `enc: [T' × d]`, `mask`: causal `[L × L]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, enc: Var, mask: &[bool]) -> Result<Var> {
        let (p, n) = (self.dropout, &self.name);
        let h = self.self_norm.forward(g, s, x)?;
        let h = self.self_att.forward(g, s, h, h, Some(mask))?.out;
        let h = g.dropout(h, p, &format!("{n}.self.out"))?;
        let x = g.add(x, h)?;
        let h = self.cross_norm.forward(g, s, x)?;
        let h = self.cross_att.forward(g, s, h, enc, None)?.out;
        let h = g.dropout(h, p, &format!("{n}.cross.out"))?;
        let x = g.add(x, h)?;
        let h = self.ffn_norm.forward(g, s, x)?;
        let h = self.ffn.forward(g, s, h)?;
        let h = g.dropout(h, p, &format!("{n}.ffn.out"))?;
        g.add(x, h)
    }
}

/// Pre-norm Transformer decoder over `V` = tokens + ⟨sos/eos⟩.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub name: String,
    pub embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub out: Linear,
    pub vocab: usize,
    pub sos_eos: usize,
    pub d: usize,
    pub dropout: f64,
}

impl TransformerDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Self {
        let (d, v) = (cfg.d_att, cfg.dec_vocab());
        TransformerDecoder {
            name: name.to_string(),
            embed: store.add(&format!("{name}.embed"), &[v, d], Init::Normal(1.0)),
            blocks: (0..cfg.dec_blocks)
                .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), d, cfg.dec_d_ff, cfg.dec_heads, cfg.dropout))
                .collect(),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
            out: Linear::new(store, &format!("{name}.out"), d, v, true),
            vocab: v,
            sos_eos: cfg.sos_eos(),
            d,
            dropout: cfg.dropout,
        }
    }

    /// Row `t` of the `[(L+1) × V]` result is `log P(· | ⟨sos⟩ y_<t, enc)`.
    pub fn decode_teacher_forced(&self, g: &mut Graph, s: &ParamStore, enc: Var, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::invalid(format!("token id {bad} ≥ decoder vocabulary {}", self.vocab)));
        }
        if g.shape(enc).len() != 2 || g.shape(enc)[1] != self.d {
            return Err(Error::invalid(format!("{}: encoder output {:?} does not match width {}", self.name, g.shape(enc), self.d)));
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.sos_eos);
        ids.extend_from_slice(tokens);
        let l = ids.len();
        let table = g.param(s, self.embed);
        let x = g.embedding(table, &ids)?;
        let pos = g.constant(sinusoid_positions(l, self.d));
        let x = g.add(x, pos)?;
        let mut x = g.dropout(x, self.dropout, &format!("{}.input", self.name))?;
        let mask = causal_mask(l);
        for block in &self.blocks {
            x = block.forward(g, s, x, enc, &mask)?;
        }
        let x = self.final_norm.forward(g, s, x)?;
        let logits = self.out.forward(g, s, x)?;
        g.log_softmax(logits)
    }

    /// Target sequence `tokens + ⟨eos⟩`.
    pub fn targets(&self, tokens: &[usize]) -> Vec<usize> {
        let mut t = tokens.to_vec();
        t.push(self.sos_eos);
        t
    }

    /// Teacher-forced, label-smoothed cross-entropy for one utterance.
    pub fn loss(&self, g: &mut Graph, s: &ParamStore, enc: Var, tokens: &[usize], smoothing: f64) -> Result<Var> {
        let lp = self.decode_teacher_forced(g, s, enc, tokens)?;
        aed_loss(g, lp, &self.targets(tokens), smoothing)
    }

    /// `Σ_t log P(target_t)` over the hypothesis followed by ⟨eos⟩.
    pub fn rescore(&self, g: &mut Graph, s: &ParamStore, enc: Var, hyp: &[usize]) -> Result<f64> {
        let lp = self.decode_teacher_forced(g, s, enc, hyp)?;
        let lp = g.value(lp);
        Ok(self.targets(hyp).iter().enumerate().map(|(t, &y)| lp.at(t, y)).sum())
    }
}

/// Mean over positions of the cross-entropy against a target distribution
/// with `1 − ε` on the target and `ε / (V − 1)` on every other class.
pub fn aed_loss(g: &mut Graph, log_probs: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let (rows, v) = match *g.shape(log_probs) {
        [r, v] => (r, v),
        ref other => return Err(Error::invalid(format!("aed_loss expects [L × V], got {other:?}"))),
    };
    if rows != targets.len() {
        return Err(Error::invalid(format!("aed_loss: {rows} positions but {} targets", targets.len())));
    }
    let picked = g.pick_per_row(log_probs, targets)?;
    let per_row = if smoothing > 0.0 && v > 1 {
        let total = g.sum_last(log_probs)?;
        let others = g.sub(total, picked)?;
        let a = g.scale(picked, 1.0 - smoothing)?;
        let b = g.scale(others, smoothing / (v - 1) as f64)?;
        g.add(a, b)?
    } else {
        picked
    };
    let m = g.mean(per_row)?;
    g.scale(m, -1.0)
}

/// Where a decoder reads the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Final,
    /// Output after this many blocks.
    Tap(usize),
}

/// The main decoder plus auxiliary decoders bound to encoder taps.
#[derive(Clone, Debug)]
pub struct MultiLevelSet {
    pub main: TransformerDecoder,
    pub aux: Vec<(usize, TransformerDecoder)>,
}

impl MultiLevelSet {
    pub const MAIN_PREFIX: &'static str = "dec";
    pub const AUX_PREFIX: &'static str = "aux_dec";

    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let main = TransformerDecoder::new(store, Self::MAIN_PREFIX, cfg);
        let aux = cfg
            .tap_blocks()
            .into_iter()
            .enumerate()
            .map(|(j, tap)| (tap, TransformerDecoder::new(store, &format!("{}.{j}", Self::AUX_PREFIX), cfg)))
            .collect();
        MultiLevelSet { main, aux }
    }

    pub fn levels(&self) -> usize {
        1 + self.aux.len()
    }

    /// Per-level losses, auxiliary levels first (shallowest to deepest),
    /// final level last. The sum over levels is the AED term.
    pub fn losses(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        final_out: Var,
        taps: &BTreeMap<usize, Var>,
        tokens: &[usize],
        smoothing: f64,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.levels());
        for (tap, dec) in &self.aux {
            let enc = *taps
                .get(tap)
                .ok_or_else(|| Error::invalid(format!("no encoder tap after block {tap} for {}", dec.name)))?;
            out.push(dec.loss(g, s, enc, tokens, smoothing)?);
        }
        out.push(self.main.loss(g, s, final_out, tokens, smoothing)?);
        Ok(out)
    }
}

/// `Σ_j L_{a_j}`.
pub fn multi_level_aed(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let mut it = losses.iter();
    let first = *it.next().ok_or_else(|| Error::invalid("no decoder levels"))?;
    it.try_fold(first, |acc, &l| g.add(acc, l))
}
