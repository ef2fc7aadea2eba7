//! The complete network: shared embedding, Conformer(-MoE) encoder, CTC head
//! and attention decoders.

use crate::config::ModelConfig;
use crate::ctc;
use crate::decoder::MultiLevelSet;
use crate::encoder::{ConformerEncoder, EncoderOutput};
use crate::error::Result;
use crate::moe::{EmbeddingOutput, ForwardStats, SharedEmbedding};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embedding: Option<SharedEmbedding>,
    pub encoder: ConformerEncoder,
    pub ctc_head: Linear,
    pub decoders: MultiLevelSet,
}

/// Everything one utterance's forward pass produces.
#[derive(Clone, Debug)]
pub struct UttForward {
    pub enc: EncoderOutput,
    pub emb: Option<EmbeddingOutput>,
    /// `[T' × (V+1)]`, column 0 is blank.
    pub ctc_log_probs: Var,
}

/// Token `k` is CTC class `k + 1`.
pub fn ctc_labels(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().map(|&t| t + 1).collect()
}

/// Inverse of [`ctc_labels`]; blanks are dropped.
pub fn tokens_from_ctc(labels: &[usize]) -> Vec<usize> {
    labels.iter().filter(|&&c| c != ctc::BLANK).map(|&c| c - 1).collect()
}

impl Model {
    /// Registers every parameter in `store`. The embedding network exists
    /// only when the config has experts.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embedding = cfg.is_moe().then(|| SharedEmbedding::new(store, cfg));
        let encoder = ConformerEncoder::new(store, "enc", cfg);
        let ctc_head = Linear::new(store, "ctc", cfg.d_att, cfg.ctc_classes(), true);
        let decoders = MultiLevelSet::new(store, cfg);
        Ok(Model {
            cfg: cfg.clone(),
            embedding,
            encoder,
            ctc_head,
            decoders,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        feats: &Tensor,
        frozen: Option<&[Vec<usize>]>,
        stats: &mut ForwardStats,
    ) -> Result<UttForward> {
        let x = g.constant(feats.clone());
        let emb = match &self.embedding {
            Some(e) => Some(e.forward(g, s, x, stats)?),
            None => None,
        };
        let enc = self.encoder.forward(g, s, x, emb.map(|e| e.emb), frozen, stats)?;
        let logits = self.ctc_head.forward(g, s, enc.final_out)?;
        let ctc_log_probs = g.log_softmax(logits)?;
        Ok(UttForward { enc, emb, ctc_log_probs })
    }

    pub fn num_moe_layers(&self) -> usize {
        self.encoder.num_moe_layers()
    }
}
