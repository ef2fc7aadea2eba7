//! Feature ingestion: JSON-lines manifests, the `FB01` binary matrix format,
//! global CMVN, SpecAugment masking and a synthetic corpus generator.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fnv1a, mix, Tensor};

pub const FEATS_MAGIC: &[u8; 4] = b"FB01";
const CMVN_EPS: f64 = 1e-9;

/// One utterance: `[frames × dims]` features plus its token transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub utt_id: String,
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

impl FeatureSequence {
    pub fn frames(&self) -> usize {
        self.feats.rows()
    }

    pub fn dims(&self) -> usize {
        self.feats.cols()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.feats.shape().len() != 2 || self.frames() == 0 {
            return Err(Error::invalid(format!("{}: empty feature matrix", self.utt_id)));
        }
        if !self.feats.is_finite() {
            return Err(Error::invalid(format!("{}: non-finite feature value", self.utt_id)));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::invalid(format!("{}: token {t} outside vocabulary of {vocab_size}", self.utt_id)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    utt_id: String,
    feats_path: String,
    tokens: Vec<i64>,
}

/// Lazy reference to an utterance listed in a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Resolved against the manifest's directory when relative.
    pub feats_path: PathBuf,
    pub tokens: Vec<usize>,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<FeatureSequence> {
        let feats = read_feats(&self.feats_path).map_err(|e| Error::MissingFeatures {
            utt_id: self.utt_id.clone(),
            msg: e.to_string(),
        })?;
        Ok(FeatureSequence {
            utt_id: self.utt_id.clone(),
            feats,
            tokens: self.tokens.clone(),
        })
    }
}

/// Parses a JSON-lines manifest with keys `utt_id`, `feats_path`, `tokens`.
/// Blank lines are skipped; feature files are only checked for existence.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let tokens = parsed
            .tokens
            .iter()
            .map(|&t| usize::try_from(t).map_err(|_| bad(format!("negative token id {t}"))))
            .collect::<Result<Vec<_>>>()?;
        let feats_path = base.join(&parsed.feats_path);
        if !feats_path.is_file() {
            return Err(Error::MissingFeatures {
                utt_id: parsed.utt_id,
                msg: format!("{} does not exist", feats_path.display()),
            });
        }
        out.push(ManifestEntry {
            utt_id: parsed.utt_id,
            feats_path,
            tokens,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        let rel = e.feats_path.strip_prefix(base).unwrap_or(&e.feats_path);
        let line = ManifestLine {
            utt_id: e.utt_id.clone(),
            feats_path: rel.to_string_lossy().into_owned(),
            tokens: e.tokens.iter().map(|&t| t as i64).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an `FB01` file: magic, `u32` frames, `u32` dims (little endian),
/// then row-major little-endian `f32` values.
pub fn read_feats(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feats(&bytes)
}

pub fn decode_feats(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FEATS_MAGIC {
        return Err(Error::Format("missing FB01 header".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != t * d * 4 {
        return Err(Error::Format(format!("FB01 body has {} bytes, expected {}", body.len(), t * d * 4)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::matrix(t, d, data)
}

pub fn encode_feats(feats: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + feats.len() * 4);
    out.extend_from_slice(FEATS_MAGIC);
    out.extend_from_slice(&(feats.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(feats.cols() as u32).to_le_bytes());
    for &v in feats.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_feats(path: &Path, feats: &Tensor) -> Result<()> {
    fs::write(path, encode_feats(feats)).map_err(|e| Error::io(path, e))
}

/// Global per-dimension mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frames: u64,
}

impl CmvnStats {
    /// Accumulates first and second moments over every frame.
    pub fn compute<'a>(seqs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut frames = 0u64;
        for feats in seqs {
            if sum.is_empty() {
                sum = vec![0.0; feats.cols()];
                sq = vec![0.0; feats.cols()];
            } else if feats.cols() != sum.len() {
                return Err(Error::ShapeMismatch {
                    op: "cmvn_compute",
                    lhs: vec![sum.len()],
                    rhs: feats.shape().to_vec(),
                });
            }
            for row in feats.data().chunks_exact(feats.cols()) {
                for (d, &v) in row.iter().enumerate() {
                    sum[d] += v;
                    sq[d] += v * v;
                }
            }
            frames += feats.rows() as u64;
        }
        if frames == 0 {
            return Err(Error::invalid("CMVN statistics need at least one frame"));
        }
        let n = frames as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
        Ok(CmvnStats { mean, var, frames })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, feats: &Tensor) -> Result<()> {
        if feats.cols() != self.dims() || self.var.len() != self.dims() {
            return Err(Error::ShapeMismatch {
                op: "cmvn",
                lhs: vec![self.dims()],
                rhs: feats.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `(x − mean) / sqrt(var + 1e-9)` per dimension.
    pub fn apply(&self, feats: &Tensor) -> Result<Tensor> {
        self.check(feats)?;
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + CMVN_EPS).sqrt()).collect();
        let mut out = feats.clone();
        let d = self.dims();
        for row in out.data_mut().chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) * scale[j];
            }
        }
        Ok(out)
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn invert(&self, normed: &Tensor) -> Result<Tensor> {
        self.check(normed)?;
        let mut out = normed.clone();
        let d = self.dims();
        for row in out.data_mut().chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = row[j] * (self.var[j] + CMVN_EPS).sqrt() + self.mean[j];
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let stats: CmvnStats = serde_json::from_slice(&bytes)?;
        if stats.var.len() != stats.mean.len() || stats.frames == 0 || stats.var.iter().any(|&v| v < 0.0) {
            return Err(Error::Format(format!("{}: inconsistent CMVN statistics", path.display())));
        }
        Ok(stats)
    }
}

pub fn apply_cmvn(seq: &FeatureSequence, stats: &CmvnStats) -> Result<FeatureSequence> {
    Ok(FeatureSequence {
        feats: stats.apply(&seq.feats)?,
        ..seq.clone()
    })
}

/// Frequency and time masking parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugment {
    /// Maximum frequency-mask width `F`.
    pub max_freq: usize,
    /// Maximum time-mask width.
    pub max_time: usize,
    pub n_freq: usize,
    pub n_time: usize,
}

impl Default for SpecAugment {
    fn default() -> Self {
        SpecAugment {
            max_freq: 30,
            max_time: 50,
            n_freq: 2,
            n_time: 2,
        }
    }
}

/// Bands chosen by one SpecAugment draw, as `(start, width)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskDraw {
    pub freq: Vec<(usize, usize)>,
    pub time: Vec<(usize, usize)>,
}

impl MaskDraw {
    pub fn covers(&self, t: usize, d: usize) -> bool {
        self.freq.iter().any(|&(s, w)| d >= s && d < s + w) || self.time.iter().any(|&(s, w)| t >= s && t < s + w)
    }
}

impl SpecAugment {
    /// Zeroes the drawn bands in place. Widths are uniform over `0..=max`,
    /// starts uniform over valid offsets; time widths are clipped to the
    /// sequence length.
    pub fn apply<R: Rng>(&self, feats: &mut Tensor, rng: &mut R) -> Result<MaskDraw> {
        let (t, d) = (feats.rows(), feats.cols());
        if self.max_freq > d {
            return Err(Error::invalid(format!("frequency mask width {} exceeds {d} dims", self.max_freq)));
        }
        let mut draw = MaskDraw::default();
        for _ in 0..self.n_freq {
            let w = rng.random_range(0..=self.max_freq);
            let s = rng.random_range(0..=d - w);
            draw.freq.push((s, w));
        }
        for _ in 0..self.n_time {
            let w = rng.random_range(0..=self.max_time).min(t);
            let s = rng.random_range(0..=t - w);
            draw.time.push((s, w));
        }
        let data = feats.data_mut();
        for &(s, w) in &draw.freq {
            for row in data.chunks_exact_mut(d) {
                row[s..s + w].fill(0.0);
            }
        }
        for &(s, w) in &draw.time {
            data[s * d..(s + w) * d].fill(0.0);
        }
        Ok(draw)
    }
}

pub fn spec_augment<R: Rng>(seq: &FeatureSequence, rng: &mut R, cfg: &SpecAugment) -> Result<FeatureSequence> {
    let mut out = seq.clone();
    cfg.apply(&mut out.feats, rng)?;
    Ok(out)
}

/// Rng stream for one utterance, independent of processing order.
pub fn utterance_rng(seed: u64, utt_id: &str, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, fnv1a(utt_id)), round))
}

/// Shape of the synthetic corpus: token-conditioned feature prototypes with
/// silence gaps and additive Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_utts: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub seed: u64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Inclusive frame-count range of one token.
    pub token_frames: (usize, usize),
    pub gap_frames: (usize, usize),
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(num_utts: usize, vocab_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_utts,
            vocab_size,
            feat_dim: 80,
            seed,
            min_tokens: 3,
            max_tokens: 6,
            token_frames: (10, 16),
            gap_frames: (2, 5),
            noise: 0.3,
        }
    }

    fn prototypes(&self) -> Vec<Vec<f64>> {
        (0..self.vocab_size)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, fnv1a(&format!("token-{k}"))));
                (0..self.feat_dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect()
    }

    pub fn generate(&self) -> Vec<FeatureSequence> {
        let protos = self.prototypes();
        (0..self.num_utts)
            .map(|u| {
                let utt_id = format!("utt{u:05}");
                let mut rng = utterance_rng(self.seed, &utt_id, 0);
                let len = rng.random_range(self.min_tokens..=self.max_tokens);
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..self.vocab_size)).collect();
                let mut rows: Vec<Vec<f64>> = Vec::new();
                let silence = vec![0.0; self.feat_dim];
                let mut push = |rng: &mut ChaCha8Rng, proto: &[f64], n: usize| {
                    for _ in 0..n {
                        rows.push(proto.iter().map(|p| p + self.noise * rng.sample::<f64, _>(StandardNormal)).collect());
                    }
                };
                let gap = |rng: &mut ChaCha8Rng| rng.random_range(self.gap_frames.0..=self.gap_frames.1);
                let n = gap(&mut rng);
                push(&mut rng, &silence, n);
                for &tok in &tokens {
                    let n = rng.random_range(self.token_frames.0..=self.token_frames.1);
                    push(&mut rng, &protos[tok], n);
                    let n = gap(&mut rng);
                    push(&mut rng, &silence, n);
                }
                // round-trip through f32 so in-memory corpora equal loaded ones
                let feats = Tensor::from_rows(&rows);
                let data = feats.data().iter().map(|&v| f64::from(v as f32)).collect();
                FeatureSequence {
                    utt_id,
                    feats: Tensor::matrix(rows.len(), self.feat_dim, data).expect("shape"),
                    tokens,
                }
            })
            .collect()
    }
}

/// Locations written by [`prepare_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCorpus {
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub cmvn: PathBuf,
    pub num_train: usize,
    pub num_dev: usize,
}

/// Writes a synthetic corpus under `out_dir`: `feats/*.fb`, `train.jsonl`
/// and `dev.jsonl` (last 10% of utterances), and `cmvn.json` from the
/// training split.
pub fn prepare_corpus(out_dir: &Path, spec: &SyntheticSpec) -> Result<PreparedCorpus> {
    let feats_dir = out_dir.join("feats");
    fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;
    let seqs = spec.generate();
    let num_dev = (seqs.len() as f64 * 0.1).round() as usize;
    let num_train = seqs.len() - num_dev;
    let mut entries = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let path = feats_dir.join(format!("{}.fb", s.utt_id));
        write_feats(&path, &s.feats)?;
        entries.push(ManifestEntry {
            utt_id: s.utt_id.clone(),
            feats_path: path,
            tokens: s.tokens.clone(),
        });
    }
    let out = PreparedCorpus {
        train_manifest: out_dir.join("train.jsonl"),
        dev_manifest: out_dir.join("dev.jsonl"),
        cmvn: out_dir.join("cmvn.json"),
        num_train,
        num_dev,
    };
    write_manifest(&out.train_manifest, &entries[..num_train])?;
    write_manifest(&out.dev_manifest, &entries[num_train..])?;
    CmvnStats::compute(seqs[..num_train].iter().map(|s| &s.feats))?.save(&out.cmvn)?;
    Ok(out)
}
