//! Objective assembly, optimization and checkpoint selection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::ctc;
use crate::decoder::multi_level_aed;
use crate::error::{Error, Result};
use crate::features::{utterance_rng, FeatureSequence, SpecAugment};
use crate::model::{ctc_labels, Model};
use crate::moe::{mean_importance_loss, sparsity_loss, utilization_entropy, ForwardStats, SharedEmbedding};
use crate::tensor::{mix, Graph, ParamStore, Tensor, Var};

/// Optimization and loss-weight settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate and checkpoint every this many epochs (and after the last).
    pub eval_every: usize,
    /// `None` disables SpecAugment.
    pub spec_augment: Option<SpecAugment>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.15,
            beta: 0.15,
            gamma: 0.01,
            eta: 0.3,
            max_epochs: 26,
            max_steps: usize::MAX,
            lr: 2e-3,
            warmup_steps: 1000,
            clip: 5.0,
            seed: 1,
            batch_size: 4,
            eval_every: 1,
            spec_augment: Some(SpecAugment::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::invalid("alpha, beta and gamma must be non-negative"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.lr < 0.0 || self.clip <= 0.0 {
            return Err(Error::invalid("batch_size and eval_every must be ≥ 1, lr ≥ 0 and clip > 0"));
        }
        Ok(())
    }
}

/// `η·L_c + (1 − η)·Σ_j L_{a_j}`.
pub fn joint_loss(l_c: f64, l_a: &[f64], eta: f64) -> f64 {
    eta * l_c + (1.0 - eta) * l_a.iter().sum::<f64>()
}

/// `L_MoE + L_Joint`.
pub fn total_loss(l_moe: f64, l_joint: f64) -> f64 {
    l_moe + l_joint
}

/// Inverse-square-root schedule with linear warmup:
/// `peak · min(step / warmup, √(warmup / step))` for `step ≥ 1`.
pub fn learning_rate(peak: f64, warmup: usize, step: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak / s.sqrt();
    }
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads[i]` belongs to parameter `i` of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// What is being trained: the full model, or the embedding network alone
/// under its CTC head.
#[derive(Clone, Debug)]
pub enum Net {
    Full(Model),
    Embedding { net: SharedEmbedding, cfg: ModelConfig },
}

impl Net {
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, embedding_only: bool) -> Result<Self> {
        if embedding_only {
            cfg.validate()?;
            Ok(Net::Embedding {
                net: SharedEmbedding::new(store, cfg),
                cfg: cfg.clone(),
            })
        } else {
            Ok(Net::Full(Model::new(store, cfg)?))
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Net::Full(m) => &m.cfg,
            Net::Embedding { cfg, .. } => cfg,
        }
    }
}

/// Batch-level loss components; `losses.total` is the optimized scalar.
#[derive(Clone, Debug)]
struct BatchGraph {
    total: Var,
    l_c: f64,
    l_a: Vec<f64>,
    l_s: f64,
    l_m: f64,
    l_e: f64,
    utilization: Vec<Vec<usize>>,
    stats: ForwardStats,
}

/// One step's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub l_ctc: f64,
    pub l_aed_sum: f64,
    pub l_aed: Vec<f64>,
    pub l_s: f64,
    pub l_m: f64,
    pub l_e: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Frames per expert, per MoE layer.
    pub utilization: Vec<Vec<usize>>,
    /// Mean over MoE layers of the utilization entropy (nats).
    pub utilization_entropy: f64,
    pub forward: ForwardStats,
}

fn mean_vars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut it = xs.iter();
    let first = *it.next().ok_or_else(|| Error::invalid("empty batch"))?;
    let s = it.try_fold(first, |acc, &x| g.add(acc, x))?;
    g.scale(s, 1.0 / xs.len() as f64)
}

/// Owns parameters, optimizer state and the network definition.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Net,
    pub store: ParamStore,
    pub opt: Adam,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, embedding_only: bool) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let net = Net::build(&mut store, model_cfg, embedding_only)?;
        let opt = Adam::new(&store);
        Ok(Trainer {
            net,
            store,
            opt,
            cfg: cfg.clone(),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.steps()
    }

    /// Builds the batch objective in `g`. `augment_round` enables
    /// SpecAugment with the given rng round.
    fn batch_graph(&self, g: &mut Graph, batch: &[FeatureSequence], augment_round: Option<u64>) -> Result<BatchGraph> {
        let c = &self.cfg;
        let mut stats = ForwardStats::default();
        let mut l_c = Vec::new();
        let mut l_e = Vec::new();
        let mut l_a: Vec<Vec<Var>> = Vec::new();
        let mut probs: Vec<Vec<Var>> = Vec::new();
        let mut utilization: Vec<Vec<usize>> = Vec::new();
        for (u, seq) in batch.iter().enumerate() {
            g.set_stream(u as u64);
            let feats = match (augment_round, &c.spec_augment) {
                (Some(round), Some(sa)) => {
                    let mut f = seq.feats.clone();
                    sa.apply(&mut f, &mut utterance_rng(c.seed, &seq.utt_id, round))?;
                    f
                }
                _ => seq.feats.clone(),
            };
            let labels = ctc_labels(&seq.tokens);
            match &self.net {
                Net::Embedding { net, .. } => {
                    let x = g.constant(feats);
                    let out = net.forward(g, &self.store, x, &mut stats)?;
                    l_e.push(ctc::ctc_loss(g, out.ctc_log_probs, &labels)?);
                }
                Net::Full(model) => {
                    let f = model.forward(g, &self.store, &feats, None, &mut stats)?;
                    l_c.push(ctc::ctc_loss(g, f.ctc_log_probs, &labels)?);
                    if let Some(e) = f.emb {
                        l_e.push(ctc::ctc_loss(g, e.ctc_log_probs, &labels)?);
                    }
                    let la = model.decoders.losses(g, &self.store, f.enc.final_out, &f.enc.taps, &seq.tokens, model.cfg.label_smoothing)?;
                    l_a.push(la);
                    if probs.is_empty() {
                        probs = vec![Vec::new(); f.enc.routing.len()];
                        utilization = f.enc.routing.iter().map(|r| vec![0; r.n]).collect();
                    }
                    for (l, rec) in f.enc.routing.iter().enumerate() {
                        probs[l].push(rec.probs);
                        for (acc, n) in utilization[l].iter_mut().zip(rec.counts()) {
                            *acc += n;
                        }
                    }
                }
            }
        }
        g.set_stream(0);

        if let Net::Embedding { .. } = self.net {
            let le = mean_vars(g, &l_e)?;
            let v = g.value(le).item();
            return Ok(BatchGraph {
                total: le,
                l_c: 0.0,
                l_a: Vec::new(),
                l_s: 0.0,
                l_m: 0.0,
                l_e: v,
                utilization,
                stats,
            });
        }

        let lc = mean_vars(g, &l_c)?;
        let levels = l_a[0].len();
        let mut la_batch = Vec::with_capacity(levels);
        for j in 0..levels {
            let per_utt: Vec<Var> = l_a.iter().map(|v| v[j]).collect();
            la_batch.push(mean_vars(g, &per_utt)?);
        }
        let la_sum = multi_level_aed(g, &la_batch)?;
        let a = g.scale(lc, c.eta)?;
        let b = g.scale(la_sum, 1.0 - c.eta)?;
        let joint = g.add(a, b)?;

        let (total, l_s, l_m, l_e_val) = if probs.is_empty() {
            (joint, 0.0, 0.0, 0.0)
        } else {
            let mut ls = Vec::with_capacity(probs.len());
            let mut lm = Vec::with_capacity(probs.len());
            for layer in &probs {
                let p = g.concat_rows(layer)?;
                ls.push(sparsity_loss(g, p)?);
                lm.push(mean_importance_loss(g, p)?);
            }
            let ls = mean_vars(g, &ls)?;
            let lm = mean_vars(g, &lm)?;
            let le = mean_vars(g, &l_e)?;
            let x = g.scale(ls, c.alpha)?;
            let y = g.scale(lm, c.beta)?;
            let z = g.scale(le, c.gamma)?;
            let moe = g.add(x, y)?;
            let moe = g.add(moe, z)?;
            let total = g.add(moe, joint)?;
            (total, g.value(ls).item(), g.value(lm).item(), g.value(le).item())
        };
        Ok(BatchGraph {
            total,
            l_c: g.value(lc).item(),
            l_a: la_batch.iter().map(|&v| g.value(v).item()).collect(),
            l_s,
            l_m,
            l_e: l_e_val,
            utilization,
            stats,
        })
    }

    /// Forward with SpecAugment and dropout, backward, clip, Adam update.
    pub fn train_step(&mut self, batch: &[FeatureSequence]) -> Result<StepMetrics> {
        let step = self.opt.steps() + 1;
        let mut g = Graph::training(mix(self.cfg.seed, step));
        let bg = self.batch_graph(&mut g, batch, Some(step))?;
        let loss = g.value(bg.total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss = {loss}"),
            });
        }
        g.backward(bg.total)?;
        let mut grads: Vec<Vec<f64>> = self
            .store
            .ids()
            .map(|id| match g.bound_param(id).and_then(|v| g.grad(v)) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; self.store.get(id).len()],
            })
            .collect();
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("gradient norm = {grad_norm}"),
            });
        }
        let lr = learning_rate(self.cfg.lr, self.cfg.warmup_steps, step);
        self.opt.update(&mut self.store, &grads, lr);
        let entropy = mean_entropy(&bg.utilization);
        Ok(StepMetrics {
            step,
            loss,
            l_ctc: bg.l_c,
            l_aed_sum: bg.l_a.iter().sum(),
            l_aed: bg.l_a,
            l_s: bg.l_s,
            l_m: bg.l_m,
            l_e: bg.l_e,
            grad_norm,
            lr,
            utilization: bg.utilization,
            utilization_entropy: entropy,
            forward: bg.stats,
        })
    }

    /// Mean per-utterance CTC loss in evaluation mode: the main CTC head for
    /// the full model, the embedding head otherwise.
    pub fn eval_ctc(&self, data: &[FeatureSequence]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let mut total = 0.0;
        for seq in data {
            let mut g = Graph::new();
            let bg = self.batch_graph(&mut g, std::slice::from_ref(seq), None)?;
            total += match self.net {
                Net::Full(_) => bg.l_c,
                Net::Embedding { .. } => bg.l_e,
            };
        }
        Ok(total / data.len() as f64)
    }

    /// Expert utilization over `data` in evaluation mode, per MoE layer.
    pub fn eval_utilization(&self, data: &[FeatureSequence]) -> Result<Vec<Vec<usize>>> {
        let mut acc: Vec<Vec<usize>> = Vec::new();
        for seq in data {
            let mut g = Graph::new();
            let bg = self.batch_graph(&mut g, std::slice::from_ref(seq), None)?;
            if acc.is_empty() {
                acc = bg.utilization;
            } else {
                for (a, b) in acc.iter_mut().zip(&bg.utilization) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
        Ok(acc)
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint::full(self.net.config(), &self.store, meta)
    }

    /// Loads parameters by name; returns names left at initialization.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<Vec<String>> {
        ckpt.restore_into(&mut self.store)
    }
}

/// Mean over layers of the utilization entropy.
pub fn mean_entropy(utilization: &[Vec<usize>]) -> f64 {
    if utilization.is_empty() {
        return 0.0;
    }
    utilization.iter().map(|c| utilization_entropy(c)).sum::<f64>() / utilization.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub step: u64,
    pub eval_ctc: f64,
    pub path: PathBuf,
}

/// Lowest eval CTC loss; ties go to the earliest epoch.
pub fn select_final(records: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        best = match best {
            Some(b) if r.eval_ctc > b.eval_ctc || (r.eval_ctc == b.eval_ctc && r.epoch >= b.epoch) => Some(b),
            _ => Some(r),
        };
    }
    best.ok_or_else(|| Error::invalid("no checkpoint records"))
}

/// Per-step routing statistics line.
#[derive(Serialize)]
struct RoutingLine<'a> {
    step: u64,
    utilization: &'a [Vec<usize>],
    entropy: Vec<f64>,
    l_s: f64,
    l_m: f64,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub records: Vec<CheckpointRecord>,
    pub best: CheckpointRecord,
    /// Copy of the best checkpoint.
    pub final_path: PathBuf,
    pub steps: u64,
    pub last: Option<StepMetrics>,
}

fn jsonl(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Epoch loop with periodic evaluation and checkpointing under `run_dir`:
/// `metrics.jsonl`, `routing.jsonl`, `checkpoints/epochNNNN.ckpt` and
/// `checkpoints/final.ckpt` (the record with the lowest eval CTC loss).
pub fn fit(trainer: &mut Trainer, train: &[FeatureSequence], dev: &[FeatureSequence], run_dir: &Path) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let routing_path = run_dir.join("routing.jsonl");
    let mut metrics = jsonl(&metrics_path)?;
    let mut routing = jsonl(&routing_path)?;
    let eval_set = if dev.is_empty() { train } else { dev };
    let mut records = Vec::new();
    let mut last = None;
    let cfg = trainer.cfg.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut stop = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FeatureSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let m = trainer.train_step(&batch)?;
            write_line(&mut metrics, &metrics_path, &m)?;
            if !m.utilization.is_empty() {
                let line = RoutingLine {
                    step: m.step,
                    utilization: &m.utilization,
                    entropy: m.utilization.iter().map(|c| utilization_entropy(c)).collect(),
                    l_s: m.l_s,
                    l_m: m.l_m,
                };
                write_line(&mut routing, &routing_path, &line)?;
            }
            last = Some(m);
            if trainer.step() as usize >= cfg.max_steps {
                stop = true;
                break;
            }
        }
        if stop || epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let eval_ctc = trainer.eval_ctc(eval_set)?;
            let path = ckpt_dir.join(format!("epoch{epoch:04}.ckpt"));
            let meta = serde_json::json!({ "epoch": epoch, "step": trainer.step(), "eval_ctc": eval_ctc });
            trainer.checkpoint(meta).save(&path)?;
            records.push(CheckpointRecord {
                epoch,
                step: trainer.step(),
                eval_ctc,
                path,
            });
        }
        if stop {
            break 'epochs;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    routing.flush().map_err(|e| Error::io(&routing_path, e))?;
    let best = select_final(&records)?.clone();
    let final_path = ckpt_dir.join("final.ckpt");
    fs::copy(&best.path, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(FitSummary {
        records,
        best,
        final_path,
        steps: trainer.step(),
        last,
    })
}

/// Trains the embedding network alone under its CTC head.
pub fn pretrain_embedding(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[FeatureSequence],
    dev: &[FeatureSequence],
    run_dir: &Path,
) -> Result<(Trainer, FitSummary)> {
    let mut trainer = Trainer::new(model_cfg, cfg, true)?;
    let summary = fit(&mut trainer, train, dev, run_dir)?;
    let best = Checkpoint::load(&summary.best.path)?;
    trainer.restore(&best)?;
    Ok((trainer, summary))
}

/// Gradient of every parameter, in store order, for a single batch in
/// evaluation mode. Unreached parameters get zeros.
pub fn batch_gradients(trainer: &Trainer, batch: &[FeatureSequence]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bg = trainer.batch_graph(&mut g, batch, None)?;
    g.backward(bg.total)?;
    let loss = g.value(bg.total).item();
    let grads = trainer
        .store
        .ids()
        .map(|id| match g.bound_param(id).and_then(|v| g.grad(v)) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&trainer.store.spec(id).shape),
        })
        .collect();
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert_eq!(learning_rate(1.0, 100, 100), 1.0);
        assert!((learning_rate(1.0, 100, 50) - 0.5).abs() < 1e-15);
        assert!((learning_rate(1.0, 100, 400) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
