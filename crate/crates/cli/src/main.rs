use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use threem::checkpoint::Checkpoint;
use threem::features::{apply_cmvn, load_manifest, prepare_corpus, CmvnStats, FeatureSequence, SyntheticSpec};
use threem::inference::{cost_report, cost_table, decode_corpus, load_model, score_corpus, DecodeOptions, ScoredResult};
use threem::training::{fit, pretrain_embedding, FitSummary, Trainer};
use threem::{ModelConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "threem", version, about = "Conformer-MoE speech recognition: data, training, decoding and cost reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: features, train/dev manifests, CMVN stats.
    Prepare(PrepareArgs),
    /// Train the shared embedding network under its own CTC head.
    PretrainEmbedding(TrainArgs),
    /// Joint CTC/attention training of the full model.
    Train(TrainArgs),
    /// CTC N-best decoding with attention rescoring.
    Decode(DecodeArgs),
    /// Character error rate of decoded hypotheses.
    Score(ScoreArgs),
    /// Parameter and FLOPs report.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    num_utts: usize,
    #[arg(long, default_value_t = 10)]
    vocab_size: usize,
    #[arg(long, default_value_t = 80)]
    feat_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Architecture overrides; each replaces the config-file value when given.
#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_att: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    subsample_channels: Option<usize>,
    #[arg(long)]
    num_experts: Option<usize>,
    #[arg(long)]
    moe_every: Option<usize>,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    emb_blocks: Option<usize>,
    #[arg(long)]
    dec_blocks: Option<usize>,
    #[arg(long)]
    dec_d_ff: Option<usize>,
    #[arg(long)]
    dec_heads: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Maximum SpecAugment time-mask width.
    #[arg(long)]
    spec_max_time: Option<usize>,
    /// Maximum SpecAugment frequency-mask width.
    #[arg(long)]
    spec_max_freq: Option<usize>,
    #[arg(long)]
    no_spec_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// JSON with optional `model` and `train` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretrained embedding checkpoint to start from (`train` only).
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    nbest: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// `train` or `dev`.
    #[arg(long, default_value = "dev")]
    split: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    /// Run directory; hypotheses are read from its nbest.jsonl unless
    /// `--hyps` is given, and report.json is written there.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    hyps: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-scale architecture instead of the desk model.
    #[arg(long)]
    full_scale: bool,
    /// One report row per expert count, e.g. `0,16,32,64`.
    #[arg(long, value_delimiter = ',')]
    experts: Vec<usize>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

/// Resolved settings, as stored in `config.json`.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    decode: DecodeOptions,
}

macro_rules! set {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $(if let Some(v) = $src.$f { $dst.$f = v; })+
    };
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelConfig) {
        set!(m, self, feat_dim, vocab_size, d_att, d_ff, heads, kernel, num_blocks, dropout, subsample_channels);
        set!(m, self, num_experts, moe_every, dec_blocks, dec_d_ff, dec_heads, levels, label_smoothing);
        if self.d_emb.is_some() {
            m.d_emb = self.d_emb;
        }
        if self.emb_blocks.is_some() {
            m.emb_blocks = self.emb_blocks;
        }
    }
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        set!(t, self, alpha, beta, gamma, eta, max_epochs, max_steps, lr, warmup_steps, clip, seed, batch_size, eval_every);
        if self.no_spec_augment {
            t.spec_augment = None;
        } else if self.spec_max_time.is_some() || self.spec_max_freq.is_some() {
            let mut sa = t.spec_augment.clone().unwrap_or_default();
            if let Some(v) = self.spec_max_time {
                sa.max_time = v;
            }
            if let Some(v) = self.spec_max_freq {
                sa.max_freq = v;
            }
            t.spec_augment = Some(sa);
        }
    }
}

impl DecodeFlags {
    fn apply(&self, d: &mut DecodeOptions) {
        set!(d, self, beam, nbest, mu);
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `config.json`: the command, its resolved settings and the run layout.
/// A later command sharing the run directory writes `config.<command>.json`.
fn write_run_manifest(run: &Path, command: &str, resolved: Value, started: u64, outputs: &[&str]) -> Result<()> {
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    let mut path = run.join("config.json");
    if let Ok(text) = fs::read_to_string(&path) {
        let owner: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        if owner["command"] != command {
            path = run.join(format!("config.{command}.json"));
        }
    }
    let manifest = json!({
        "command": command,
        "config": resolved,
        "started_unix": started,
        "finished_unix": unix_time(),
        "outputs": outputs,
    });
    write_json(&path, &manifest)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(data: &Path, split: &str) -> Result<Vec<FeatureSequence>> {
    if split != "train" && split != "dev" {
        bail!(threem::Error::InvalidArgument(format!("split must be train or dev, got {split}")));
    }
    let cmvn = CmvnStats::load(&data.join("cmvn.json"))?;
    load_manifest(&data.join(format!("{split}.jsonl")))?
        .iter()
        .map(|e| Ok(apply_cmvn(&e.load()?, &cmvn)?))
        .collect()
}

fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let started = unix_time();
    let spec = SyntheticSpec {
        feat_dim: a.feat_dim,
        ..SyntheticSpec::new(a.num_utts, a.vocab_size, a.seed)
    };
    let out = prepare_corpus(&a.out, &spec)?;
    write_run_manifest(
        &a.out,
        "prepare",
        json!({ "num_utts": a.num_utts, "vocab_size": a.vocab_size, "feat_dim": a.feat_dim, "seed": a.seed }),
        started,
        &["feats/", "train.jsonl", "dev.jsonl", "cmvn.json"],
    )?;
    println!("prepared {} train / {} dev utterances in {}", out.num_train, out.num_dev, a.out.display());
    Ok(())
}

fn summary_json(s: &FitSummary) -> Value {
    json!({
        "steps": s.steps,
        "records": s.records,
        "best": s.best,
        "final_checkpoint": s.final_path,
        "last_step": s.last,
    })
}

fn cmd_train(a: &TrainArgs, embedding_only: bool) -> Result<()> {
    let started = unix_time();
    let mut cfg = read_config(a.config.as_deref())?;
    a.model.apply(&mut cfg.model);
    a.train.apply(&mut cfg.train);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let train = load_split(&a.data, "train")?;
    let dev = load_split(&a.data, "dev")?;
    let command = if embedding_only { "pretrain-embedding" } else { "train" };
    let summary = if embedding_only {
        if a.embedding.is_some() {
            bail!(threem::Error::InvalidArgument("--embedding applies to train only".into()));
        }
        pretrain_embedding(&cfg.model, &cfg.train, &train, &dev, &a.run)?.1
    } else {
        let mut trainer = Trainer::new(&cfg.model, &cfg.train, false)?;
        if let Some(path) = &a.embedding {
            let ckpt = Checkpoint::load(path)?;
            if let Some(bad) = ckpt.header.params.iter().find(|p| !p.name.starts_with("emb.")) {
                bail!(threem::Error::Format(format!("{} is not an embedding checkpoint ({})", path.display(), bad.name)));
            }
            trainer.restore(&ckpt)?;
        }
        fit(&mut trainer, &train, &dev, &a.run)?
    };
    let mut resolved = serde_json::to_value(&cfg)?;
    resolved["embedding"] = json!(a.embedding);
    resolved["data"] = json!(a.data);
    write_run_manifest(
        &a.run,
        command,
        resolved,
        started,
        &["metrics.jsonl", "routing.jsonl", "checkpoints/", "report.json"],
    )?;
    write_json(&a.run.join("report.json"), &summary_json(&summary))?;
    println!(
        "{command}: {} steps, best epoch {} (eval CTC {:.4}), final checkpoint {}",
        summary.steps,
        summary.best.epoch,
        summary.best.eval_ctc,
        summary.final_path.display()
    );
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let started = unix_time();
    let mut cfg = read_config(a.config.as_deref())?;
    a.decode.apply(&mut cfg.decode);
    let opts = cfg.decode;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, store) = load_model(&ckpt)?;
    let data = load_split(&a.data, &a.split)?;
    let decoded = decode_corpus(&model, &store, &data, &opts, a.workers)?;
    fs::create_dir_all(&a.run).with_context(|| format!("creating {}", a.run.display()))?;
    let path = a.run.join("nbest.jsonl");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for (seq, d) in data.iter().zip(&decoded) {
        let best = d.best();
        let line = json!({
            "utt_id": seq.utt_id,
            "tokens": best.tokens,
            "ctc_score": best.ctc_score,
            "aed_score": best.aed_score,
            "combined": best.combined,
            "nbest": d.nbest,
        });
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_run_manifest(
        &a.run,
        "decode",
        json!({ "decode": opts, "checkpoint": a.checkpoint, "data": a.data, "split": a.split, "workers": a.workers, "model": ckpt.header.config }),
        started,
        &["nbest.jsonl"],
    )?;
    println!("decoded {} utterances into {}", decoded.len(), path.display());
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let started = unix_time();
    let hyps_path = a.hyps.clone().unwrap_or_else(|| a.run.join("nbest.jsonl"));
    let file = File::open(&hyps_path).with_context(|| format!("opening {}", hyps_path.display()))?;
    let mut hyps = std::collections::HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", hyps_path.display(), i + 1))?;
        let id = v["utt_id"].as_str().with_context(|| format!("{}:{}: missing utt_id", hyps_path.display(), i + 1))?;
        let tokens: Vec<usize> = serde_json::from_value(v["tokens"].clone()).with_context(|| format!("{}:{}: bad tokens", hyps_path.display(), i + 1))?;
        hyps.insert(id.to_string(), tokens);
    }
    let refs = load_manifest(&a.data.join(format!("{}.jsonl", a.split)))?;
    let mut results = Vec::with_capacity(refs.len());
    for r in &refs {
        let Some(h) = hyps.get(&r.utt_id) else {
            bail!(threem::Error::InvalidArgument(format!("no hypothesis for {}", r.utt_id)));
        };
        results.push(ScoredResult::new(&r.utt_id, &r.tokens, h));
    }
    let score = score_corpus(&results)?;
    for id in &score.excluded {
        eprintln!("warning: {id} has an empty reference and is excluded");
    }
    for u in &score.utterances {
        println!("{:<12} {:>3}/{:<3} {:.4}", u.utt_id, u.errors, u.ref_len, u.cer());
    }
    println!("CER {:.4} ({} / {})", score.cer, score.errors, score.ref_len);
    fs::create_dir_all(&a.run)?;
    write_json(&a.run.join("report.json"), &serde_json::to_value(&score)?)?;
    write_run_manifest(
        &a.run,
        "score",
        json!({ "data": a.data, "split": a.split, "hyps": hyps_path }),
        started,
        &["report.json"],
    )?;
    Ok(())
}

fn cmd_flops(a: &FlopsArgs) -> Result<()> {
    let started = unix_time();
    let mut base = if a.full_scale {
        ModelConfig::full_scale(16, 3)
    } else {
        read_config(a.config.as_deref())?.model
    };
    a.model.apply(&mut base);
    let counts = if a.experts.is_empty() { vec![base.num_experts] } else { a.experts.clone() };
    let mut rows = Vec::with_capacity(counts.len());
    for n in counts {
        let cfg = ModelConfig { num_experts: n, ..base.clone() };
        let name = match n {
            0 => format!("Conformer (K={})", cfg.levels),
            n => format!("Conformer-MoE ({n}e, K={})", cfg.levels),
        };
        rows.push((name, cost_report(&cfg)?));
    }
    print!("{}", cost_table(&rows));
    if let Some(run) = &a.run {
        let reports: Vec<Value> = rows.iter().map(|(n, r)| json!({ "model": n, "report": r })).collect();
        fs::create_dir_all(run)?;
        write_json(&run.join("report.json"), &json!(reports))?;
        write_run_manifest(run, "flops", json!({ "model": base, "experts": a.experts }), started, &["report.json"])?;
    }
    Ok(())
}

/// One line on stderr: `{"error": kind, "message": text}`.
fn report_error(e: &anyhow::Error) {
    let kind = e.chain().find_map(|c| c.downcast_ref::<threem::Error>()).map_or("other", threem::Error::kind);
    // causes already spelled out by their parent's message are skipped
    let mut message = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Prepare(a) => cmd_prepare(a),
        Command::PretrainEmbedding(a) => cmd_train(a, true),
        Command::Train(a) => cmd_train(a, false),
        Command::Decode(a) => cmd_decode(a),
        Command::Score(a) => cmd_score(a),
        Command::Flops(a) => cmd_flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
