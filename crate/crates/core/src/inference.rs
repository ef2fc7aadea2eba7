//! Decoding (CTC N-best plus attention rescoring), CER scoring and the
//! parameter / FLOPs accountant.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::ctc::{prefix_beam_search, Hypothesis};
use crate::decoder::MultiLevelSet;
use crate::encoder::subsampled_len;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::model::{tokens_from_ctc, Model};
use crate::moe::ForwardStats;
use crate::tensor::{Graph, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam: usize,
    pub nbest: usize,
    /// Weight of the CTC score in `combined = aed + μ·ctc`.
    pub mu: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 8, nbest: 8, mu: 0.5 }
    }
}

/// The rescored N-best list and the index of the winner.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub nbest: Vec<Hypothesis>,
    pub best: usize,
}

impl Decoded {
    pub fn best(&self) -> &Hypothesis {
        &self.nbest[self.best]
    }
}

/// Builds the model described by `ckpt` and loads every one of its
/// weights.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new(0);
    let model = Model::new(&mut store, &ckpt.header.config)?;
    if let Some(name) = ckpt.restore_into(&mut store)?.first() {
        return Err(Error::Format(format!("checkpoint lacks parameter {name}")));
    }
    Ok((model, store))
}

/// Encoder once, CTC prefix beam search, then every hypothesis rescored by
/// the main attention decoder. Hypothesis tokens are model token ids. Ties
/// in the combined score go to the earlier N-best entry.
pub fn decode_utterance(model: &Model, store: &ParamStore, feats: &crate::tensor::Tensor, opts: &DecodeOptions) -> Result<Decoded> {
    let mut g = Graph::new();
    let mut stats = ForwardStats::default();
    let f = model.forward(&mut g, store, feats, None, &mut stats)?;
    let post = g.value(f.ctc_log_probs).clone();
    let mut nbest = prefix_beam_search(&post, opts.beam, opts.nbest)?;
    for h in nbest.iter_mut() {
        h.tokens = tokens_from_ctc(&h.tokens);
        h.aed_score = model.decoders.main.rescore(&mut g, store, f.enc.final_out, &h.tokens)?;
        h.combined = h.aed_score + opts.mu * h.ctc_score;
    }
    let mut best = 0;
    for i in 1..nbest.len() {
        if nbest[i].combined > nbest[best].combined {
            best = i;
        }
    }
    Ok(Decoded { nbest, best })
}

/// Decodes every utterance, splitting the list across `workers` threads.
/// Output order follows `data`.
pub fn decode_corpus(model: &Model, store: &ParamStore, data: &[FeatureSequence], opts: &DecodeOptions, workers: usize) -> Result<Vec<Decoded>> {
    let workers = workers.max(1).min(data.len().max(1));
    if workers == 1 {
        return data.iter().map(|s| decode_utterance(model, store, &s.feats, opts)).collect();
    }
    let chunk = data.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| decode_utterance(model, store, &s.feats, opts)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

/// Minimum substitutions + deletions + insertions turning `reference`
/// into `hyp`.
pub fn edit_distance(reference: &[usize], hyp: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub utt_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub errors: usize,
    pub ref_len: usize,
}

impl ScoredResult {
    pub fn new(utt_id: &str, reference: &[usize], hypothesis: &[usize]) -> Self {
        ScoredResult {
            utt_id: utt_id.to_string(),
            reference: reference.to_vec(),
            hypothesis: hypothesis.to_vec(),
            errors: edit_distance(reference, hypothesis),
            ref_len: reference.len(),
        }
    }

    pub fn cer(&self) -> f64 {
        self.errors as f64 / self.ref_len as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub cer: f64,
    pub errors: usize,
    pub ref_len: usize,
    pub utterances: Vec<ScoredResult>,
    /// Utterances skipped for an empty reference.
    pub excluded: Vec<String>,
}

/// `Σ errors / Σ reference length`, skipping empty references.
pub fn score_corpus(results: &[ScoredResult]) -> Result<CorpusScore> {
    let (kept, dropped): (Vec<_>, Vec<_>) = results.iter().partition(|r| r.ref_len > 0);
    if kept.is_empty() {
        return Err(Error::invalid("no utterance with a non-empty reference"));
    }
    let errors: usize = kept.iter().map(|r| r.errors).sum();
    let ref_len: usize = kept.iter().map(|r| r.ref_len).sum();
    Ok(CorpusScore {
        cer: errors as f64 / ref_len as f64,
        errors,
        ref_len,
        utterances: kept.into_iter().cloned().collect(),
        excluded: dropped.into_iter().map(|r| r.utt_id.clone()).collect(),
    })
}

/// Input frames in one second of audio at a 10 ms shift.
pub const FRAMES_PER_SECOND: usize = 100;

pub const FLOPS_CONVENTION: &str =
    "1 s input (100 frames); multiply-add = 2 FLOPs; softmax and normalization = 5 FLOPs per element; elementwise activations and residual adds not counted";

/// Closed-form inference cost of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    /// Every parameter, auxiliary decoders included.
    pub params: usize,
    /// Parameters evaluated or stored for inference (no auxiliary decoders).
    pub inference_params: usize,
    /// Parameters added per extra expert: one FFN plus one router column in
    /// every MoE layer.
    pub params_per_expert: usize,
    pub moe_layers: usize,
    pub frames: usize,
    pub subsampled_frames: usize,
    /// Sum of the n-independent components below.
    pub flops: u64,
    /// Router projections and softmaxes; grows with n.
    pub router_flops: u64,
    pub components: BTreeMap<String, u64>,
}

fn ln_flops(t: u64, d: u64) -> u64 {
    5 * t * d
}

struct BlockCost {
    attention: u64,
    conv: u64,
    ffn1: u64,
    ffn2: u64,
}

fn block_cost(cfg: &ModelConfig, t: u64, d: u64) -> BlockCost {
    let (ff, h, k) = (cfg.d_ff as u64, cfg.heads as u64, cfg.kernel as u64);
    let ffn = 2 * t * 2 * d * ff + ln_flops(t, d);
    BlockCost {
        attention: 2 * t * 4 * d * d + 2 * 2 * t * t * d + 5 * h * t * t + ln_flops(t, d),
        conv: 2 * t * d * 2 * d + 2 * t * d * k + 2 * t * d * d + 2 * ln_flops(t, d),
        ffn1: ffn,
        ffn2: ffn + ln_flops(t, d),
    }
}

fn subsample_cost(cfg: &ModelConfig, d: u64) -> u64 {
    let c = cfg.subsample_channels as u64;
    let out = |n: u64| (n - 3) / 2 + 1;
    let (h1, w1) = (out(FRAMES_PER_SECOND as u64), out(cfg.feat_dim as u64));
    let (h2, w2) = (out(h1), out(w1));
    2 * h1 * w1 * c * 9 + 2 * h2 * w2 * c * c * 9 + 2 * h2 * c * w2 * d
}

/// Parameter and FLOPs accounting from shapes alone.
pub fn cost_report(cfg: &ModelConfig) -> Result<CostReport> {
    let mut shapes = ParamStore::shapes_only();
    let model = Model::new(&mut shapes, cfg)?;
    let params = shapes.num_scalars();
    let aux = shapes.num_scalars_with_prefix(&format!("{}.", MultiLevelSet::AUX_PREFIX));
    let moe_layers = model.num_moe_layers();
    let expert_ffn = 2 * cfg.d_att * cfg.d_ff + cfg.d_ff + cfg.d_att;
    let params_per_expert = if cfg.is_moe() { moe_layers * (expert_ffn + cfg.d_emb() + cfg.d_att) } else { 0 };

    let t = subsampled_len(FRAMES_PER_SECOND) as u64;
    let d = cfg.d_att as u64;
    let mut c: BTreeMap<String, u64> = BTreeMap::new();
    let mut add = |name: &str, v: u64| *c.entry(name.to_string()).or_insert(0) += v;
    add("subsample", subsample_cost(cfg, d));
    let mut router = 0;
    for i in 0..cfg.num_blocks {
        let b = block_cost(cfg, t, d);
        add("attention", b.attention);
        add("conv", b.conv);
        add("dense_ffn", b.ffn1 + ln_flops(t, d));
        if cfg.block_is_moe(i) {
            add("moe_expert", b.ffn2 - ln_flops(t, d));
            let n = cfg.num_experts as u64;
            router += 2 * t * (cfg.d_emb() as u64 + d) * n + 5 * t * n;
        } else {
            add("dense_ffn", b.ffn2 - ln_flops(t, d));
        }
    }
    let v = cfg.ctc_classes() as u64;
    add("ctc_head", 2 * t * d * v + 5 * t * v);
    if cfg.is_moe() {
        let de = cfg.d_emb() as u64;
        let mut emb = subsample_cost(cfg, de);
        for _ in 0..cfg.emb_blocks() {
            let b = block_cost(cfg, t, de);
            emb += b.attention + b.conv + b.ffn1 + b.ffn2;
        }
        add("embedding_network", emb);
    }
    let flops = c.values().sum();
    Ok(CostReport {
        convention: FLOPS_CONVENTION.to_string(),
        params,
        inference_params: params - aux,
        params_per_expert,
        moe_layers,
        frames: FRAMES_PER_SECOND,
        subsampled_frames: t as usize,
        flops,
        router_flops: router,
        components: c,
    })
}

fn human(v: f64) -> String {
    if v >= 1e9 {
        format!("{:.1}B", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.1}K", v / 1e3)
    } else {
        format!("{v}")
    }
}

/// Aligned `model | params | FLOPs` table.
pub fn cost_table(rows: &[(String, CostReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "# {FLOPS_CONVENTION}");
    let _ = writeln!(s, "{:<w$}  {:>10}  {:>10}  {:>12}", "model", "params", "FLOPs", "router FLOPs");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>10}  {:>12}",
            name,
            human(r.params as f64),
            human(r.flops as f64),
            human(r.router_flops as f64)
        );
    }
    s
}
