use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters. Defaults are the desk-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Number of output tokens, excluding the CTC blank and ⟨sos/eos⟩.
    pub vocab_size: usize,
    pub d_att: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub kernel: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    /// Channels of the two stride-2 subsampling convolutions.
    pub subsample_channels: usize,
    /// Experts per MoE layer; 0 builds a dense Conformer without an
    /// embedding network.
    pub num_experts: usize,
    /// Every `moe_every`-th block (counting from 1) carries the MoE layer.
    pub moe_every: usize,
    /// Shared embedding width; defaults to `d_att`.
    pub d_emb: Option<usize>,
    /// Embedding network depth; defaults to half the encoder depth.
    pub emb_blocks: Option<usize>,
    pub dec_blocks: usize,
    pub dec_d_ff: usize,
    pub dec_heads: usize,
    /// Number of attention decoders `K`, the final-output decoder included.
    pub levels: usize,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 80,
            vocab_size: 10,
            d_att: 64,
            d_ff: 128,
            heads: 4,
            kernel: 7,
            num_blocks: 6,
            dropout: 0.1,
            subsample_channels: 16,
            num_experts: 4,
            moe_every: 1,
            d_emb: None,
            emb_blocks: None,
            dec_blocks: 2,
            dec_d_ff: 128,
            dec_heads: 4,
            levels: 3,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    /// The large-corpus configuration: 18 Conformer blocks at width 512 with
    /// MoE on every second block, a 7-block embedding network, 2-block
    /// decoders and 5561 output units.
    pub fn full_scale(num_experts: usize, levels: usize) -> Self {
        ModelConfig {
            feat_dim: 80,
            vocab_size: 5561,
            d_att: 512,
            d_ff: 2048,
            heads: 8,
            kernel: 15,
            num_blocks: 18,
            dropout: 0.1,
            subsample_channels: 512,
            num_experts,
            moe_every: 2,
            d_emb: None,
            emb_blocks: Some(7),
            dec_blocks: 2,
            dec_d_ff: 2048,
            dec_heads: 8,
            levels,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.heads == 0 || self.d_att % self.heads != 0 {
            return bad(format!("d_att {} not divisible by {} heads", self.d_att, self.heads));
        }
        if self.dec_heads == 0 || self.d_att % self.dec_heads != 0 {
            return bad(format!("d_att {} not divisible by {} decoder heads", self.d_att, self.dec_heads));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("conv kernel {} must be odd", self.kernel));
        }
        if self.num_blocks == 0 || self.levels == 0 || self.levels > self.num_blocks {
            return bad(format!("{} levels over {} blocks", self.levels, self.num_blocks));
        }
        if self.moe_every == 0 {
            return bad("moe_every must be ≥ 1".into());
        }
        if self.feat_dim < 7 {
            return bad(format!("feature dim {} below subsampling minimum 7", self.feat_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("dropout and label smoothing must lie in [0, 1)".into());
        }
        if self.vocab_size == 0 {
            return bad("empty vocabulary".into());
        }
        Ok(())
    }

    pub fn is_moe(&self) -> bool {
        self.num_experts > 0
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb.unwrap_or(self.d_att)
    }

    pub fn emb_blocks(&self) -> usize {
        self.emb_blocks.unwrap_or(self.num_blocks / 2).max(1)
    }

    /// Whether block `i` (0-based) replaces its second FFN with MoE.
    pub fn block_is_moe(&self, i: usize) -> bool {
        self.is_moe() && (i + 1) % self.moe_every == 0
    }

    /// CTC output classes: blank plus every token.
    pub fn ctc_classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Decoder vocabulary: every token plus the shared ⟨sos/eos⟩ id.
    pub fn dec_vocab(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn sos_eos(&self) -> usize {
        self.vocab_size
    }

    /// Encoder depths (blocks applied) whose outputs feed auxiliary
    /// decoders: `floor(j·N/K)` for `j = 1..K`.
    pub fn tap_blocks(&self) -> Vec<usize> {
        (1..self.levels).map(|j| j * self.num_blocks / self.levels).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_at_thirds() {
        let mut c = ModelConfig::default();
        assert_eq!(c.tap_blocks(), vec![2, 4]);
        c.num_blocks = 12;
        assert_eq!(c.tap_blocks(), vec![4, 8]);
        c.levels = 1;
        assert!(c.tap_blocks().is_empty());
    }

    #[test]
    fn every_tap_follows_at_least_one_block() {
        let mut c = ModelConfig { num_blocks: 2, levels: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.num_blocks = 3;
        c.validate().unwrap();
        assert_eq!(c.tap_blocks(), vec![1, 2]);
    }

    #[test]
    fn json_defaults_fill_missing_keys() {
        let c: ModelConfig = serde_json::from_str(r#"{"num_experts": 16}"#).unwrap();
        assert_eq!(c.num_experts, 16);
        assert_eq!(c.d_att, 64);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_even_kernel() {
        let c = ModelConfig {
            kernel: 8,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
