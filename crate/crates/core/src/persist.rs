//! Run configuration, binary checkpoints, fingerprints and the prompt
//! embedding stub.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowfm_tensor::{AdamState, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{NormStats, SynthSpec, NUM_CHANNELS};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, MaskPolicy, ModelBundle, VelocityNetConfig};
use crate::sampler::OdeConfig;

pub const MAGIC: &[u8; 7] = b"FLOWFM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated in section {section}")]
    Truncated { section: String },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint section {section}: {msg}")]
    Malformed { section: String, msg: String },
}

/// Every tunable of a run. Parsed from flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// CSV dataset; the synthetic generator is used when absent.
    pub data_csv: Option<PathBuf>,
    pub synth: SynthSpec,
    pub split_train_frac: f64,
    pub split_seed: u64,
    pub encoder: EncoderConfig,
    pub velocity: VelocityNetConfig,
    pub mask_prob: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sampler: OdeConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    pub text_steps: usize,
    pub text_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_csv: None,
            synth: SynthSpec::standard(0),
            split_train_frac: 0.5,
            split_seed: 0,
            encoder: EncoderConfig::default(),
            velocity: VelocityNetConfig::default(),
            mask_prob: 0.5,
            train_steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            sampler: OdeConfig::default(),
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            probe_epochs: 500,
            probe_lr: 0.1,
            finetune_epochs: 10,
            finetune_lr: 1e-3,
            finetune_batch_size: 16,
            text_steps: 500,
            text_lr: 1e-3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Recognized keys, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "data.csv",
        "synth.num_classes",
        "synth.subjects_per_class",
        "synth.windows_per_subject",
        "synth.base_freqs",
        "synth.noise_std",
        "synth.seed",
        "split.train_frac",
        "split.seed",
        "encoder.patch_size",
        "encoder.embed_dim",
        "encoder.depth",
        "encoder.heads",
        "encoder.rep_dim",
        "encoder.mlp_ratio",
        "velocity.patch_size",
        "velocity.embed_dim",
        "velocity.depth",
        "velocity.heads",
        "velocity.mlp_ratio",
        "mask_prob",
        "train.steps",
        "train.batch_size",
        "train.lr",
        "sampler.method",
        "sampler.steps",
        "diffusion.steps",
        "diffusion.beta_start",
        "diffusion.beta_end",
        "probe.epochs",
        "probe.lr",
        "finetune.epochs",
        "finetune.lr",
        "finetune.batch_size",
        "text.steps",
        "text.lr",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data.csv" => self.data_csv = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth.num_classes" => self.synth.num_classes = parse_num(key, v)?,
            "synth.subjects_per_class" => self.synth.subjects_per_class = parse_num(key, v)?,
            "synth.windows_per_subject" => self.synth.windows_per_subject = parse_num(key, v)?,
            "synth.base_freqs" => {
                self.synth.base_freqs = v
                    .split(',')
                    .map(|f| parse_num(key, f.trim()))
                    .collect::<Result<_>>()?
            }
            "synth.noise_std" => self.synth.noise_std = parse_num(key, v)?,
            "synth.seed" => self.synth.seed = parse_num(key, v)?,
            "split.train_frac" => self.split_train_frac = parse_num(key, v)?,
            "split.seed" => self.split_seed = parse_num(key, v)?,
            "encoder.patch_size" => self.encoder.patch_size = parse_num(key, v)?,
            "encoder.embed_dim" => self.encoder.embed_dim = parse_num(key, v)?,
            "encoder.depth" => self.encoder.depth = parse_num(key, v)?,
            "encoder.heads" => self.encoder.heads = parse_num(key, v)?,
            "encoder.rep_dim" => self.encoder.rep_dim = parse_num(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse_num(key, v)?,
            "velocity.patch_size" => self.velocity.patch_size = parse_num(key, v)?,
            "velocity.embed_dim" => self.velocity.embed_dim = parse_num(key, v)?,
            "velocity.depth" => self.velocity.depth = parse_num(key, v)?,
            "velocity.heads" => self.velocity.heads = parse_num(key, v)?,
            "velocity.mlp_ratio" => self.velocity.mlp_ratio = parse_num(key, v)?,
            "mask_prob" => self.mask_prob = parse_num(key, v)?,
            "train.steps" => self.train_steps = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.lr" => self.lr = parse_num(key, v)?,
            "sampler.method" => self.sampler.method = v.parse()?,
            "sampler.steps" => self.sampler.num_steps = parse_num(key, v)?,
            "diffusion.steps" => self.diffusion_steps = parse_num(key, v)?,
            "diffusion.beta_start" => self.beta_start = parse_num(key, v)?,
            "diffusion.beta_end" => self.beta_end = parse_num(key, v)?,
            "probe.epochs" => self.probe_epochs = parse_num(key, v)?,
            "probe.lr" => self.probe_lr = parse_num(key, v)?,
            "finetune.epochs" => self.finetune_epochs = parse_num(key, v)?,
            "finetune.lr" => self.finetune_lr = parse_num(key, v)?,
            "finetune.batch_size" => self.finetune_batch_size = parse_num(key, v)?,
            "text.steps" => self.text_steps = parse_num(key, v)?,
            "text.lr" => self.text_lr = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data.csv" => self
                .data_csv
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "synth.num_classes" => self.synth.num_classes.to_string(),
            "synth.subjects_per_class" => self.synth.subjects_per_class.to_string(),
            "synth.windows_per_subject" => self.synth.windows_per_subject.to_string(),
            "synth.base_freqs" => join_f64(&self.synth.base_freqs),
            "synth.noise_std" => self.synth.noise_std.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            "split.train_frac" => self.split_train_frac.to_string(),
            "split.seed" => self.split_seed.to_string(),
            "encoder.patch_size" => self.encoder.patch_size.to_string(),
            "encoder.embed_dim" => self.encoder.embed_dim.to_string(),
            "encoder.depth" => self.encoder.depth.to_string(),
            "encoder.heads" => self.encoder.heads.to_string(),
            "encoder.rep_dim" => self.encoder.rep_dim.to_string(),
            "encoder.mlp_ratio" => self.encoder.mlp_ratio.to_string(),
            "velocity.patch_size" => self.velocity.patch_size.to_string(),
            "velocity.embed_dim" => self.velocity.embed_dim.to_string(),
            "velocity.depth" => self.velocity.depth.to_string(),
            "velocity.heads" => self.velocity.heads.to_string(),
            "velocity.mlp_ratio" => self.velocity.mlp_ratio.to_string(),
            "mask_prob" => self.mask_prob.to_string(),
            "train.steps" => self.train_steps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr" => self.lr.to_string(),
            "sampler.method" => self.sampler.method.to_string(),
            "sampler.steps" => self.sampler.num_steps.to_string(),
            "diffusion.steps" => self.diffusion_steps.to_string(),
            "diffusion.beta_start" => self.beta_start.to_string(),
            "diffusion.beta_end" => self.beta_end.to_string(),
            "probe.epochs" => self.probe_epochs.to_string(),
            "probe.lr" => self.probe_lr.to_string(),
            "finetune.epochs" => self.finetune_epochs.to_string(),
            "finetune.lr" => self.finetune_lr.to_string(),
            "finetune.batch_size" => self.finetune_batch_size.to_string(),
            "text.steps" => self.text_steps.to_string(),
            "text.lr" => self.text_lr.to_string(),
            _ => unreachable!("every listed key is handled"),
        }
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", i + 1)));
            };
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_csv.is_none() {
            self.synth.validate().map_err(|e| match e {
                Error::Data(msg) => Error::Config(msg),
                other => other,
            })?;
        }
        self.encoder.validate()?;
        self.velocity.validate()?;
        MaskPolicy::new(self.mask_prob)?;
        self.sampler.validate()?;
        self.schedule()?;
        if !(self.split_train_frac > 0.0 && self.split_train_frac < 1.0) {
            return Err(Error::Config(format!(
                "split.train_frac {} must lie in (0, 1)",
                self.split_train_frac
            )));
        }
        if self.batch_size == 0 || self.finetune_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, lr) in [("train.lr", self.lr), ("finetune.lr", self.finetune_lr), ("probe.lr", self.probe_lr), ("text.lr", self.text_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn mask_policy(&self) -> Result<MaskPolicy> {
        MaskPolicy::new(self.mask_prob)
    }

    /// Short hash of the canonical text.
    pub fn fingerprint(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Hash over parameter names, shapes and exact values.
pub fn params_fingerprint(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Hash of an encoder architecture: the config plus parameter names and shapes.
pub fn architecture_fingerprint(bundle: &ModelBundle) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}", bundle.encoder.config()).as_bytes());
    for (name, t) in bundle.encoder_params.iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.shape()).as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub fn file_fingerprint(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(short_hash(&bytes))
}

/// Lower-cases, trims and collapses internal whitespace.
pub fn normalize_prompt(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Seed of the fixed projection used by [`prompt_embed`].
const PROMPT_PROJECTION_SEED: u64 = 0x5eed_7e47;
const PROMPT_BITS: usize = 256;

/// Deterministic stand-in for a text encoder: the SHA-256 bits of the
/// normalized prompt, as ±1, mapped to `dim` values by a fixed Gaussian
/// projection.
pub fn prompt_embed(text: &str, dim: usize) -> Tensor {
    let digest = Sha256::digest(normalize_prompt(text).as_bytes());
    let bits: Vec<f64> = (0..PROMPT_BITS)
        .map(|i| if digest[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { -1.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(PROMPT_PROJECTION_SEED);
    let scale = 1.0 / (PROMPT_BITS as f64).sqrt();
    let mut out = vec![0.0; dim];
    for &b in &bits {
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o += b * z * scale;
        }
    }
    Tensor::from_vec(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Flow,
    Diffusion,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Flow => "flow",
            Self::Diffusion => "diffusion",
        }
    }
}

/// Conditioning used when the velocity network was tuned on prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextArm {
    TextOnly,
    TextRep,
}

impl TextArm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TextOnly => "text_only",
            Self::TextRep => "text_rep",
        }
    }

    pub fn uses_rep(self) -> bool {
        self == Self::TextRep
    }
}

impl std::str::FromStr for TextArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_only" | "text-only" => Ok(Self::TextOnly),
            "text_rep" | "text-rep" | "text+rep" => Ok(Self::TextRep),
            other => Err(Error::Config(format!("unknown text arm {other:?}"))),
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: RunConfig,
    pub bundle: ModelBundle,
    pub encoder_opt: AdamState,
    pub velocity_opt: AdamState,
    pub norm: NormStats,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Prompt per class, set by text tuning.
    pub prompts: Vec<(usize, String)>,
    pub text_arm: Option<TextArm>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn section(&mut self, name: &str, payload: Writer) {
        self.str(name);
        self.u64(payload.buf.len() as u64);
        self.buf.extend_from_slice(&payload.buf);
    }
}

fn w() -> Writer {
    Writer { buf: Vec::new() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &str) -> Self {
        Self {
            buf,
            pos: 0,
            section: section.to_string(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                section: self.section.clone(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.malformed("invalid UTF-8"))
    }
    fn malformed(&self, msg: &str) -> CheckpointError {
        CheckpointError::Malformed {
            section: self.section.clone(),
            msg: msg.to_string(),
        }
    }
    fn finish(&self) -> Result<(), CheckpointError> {
        if self.pos != self.buf.len() {
            return Err(self.malformed("trailing bytes"));
        }
        Ok(())
    }
}

fn write_params(params: &ParamSet) -> Writer {
    let mut out = w();
    out.u32(params.len() as u32);
    for (name, t) in params.iter() {
        out.str(name);
        out.u32(t.rank() as u32);
        for &d in t.shape() {
            out.u64(d as u64);
        }
        out.f64s(t.data());
    }
    out
}

fn read_params(r: &mut Reader, into: &mut ParamSet) -> Result<(), CheckpointError> {
    let n = r.u32()? as usize;
    if n != into.len() {
        return Err(r.malformed(&format!("{n} tensors, model has {}", into.len())));
    }
    let mut values = Vec::with_capacity(n);
    for id in into.ids().collect::<Vec<_>>() {
        let name = r.str()?;
        if name != into.name(id) {
            return Err(r.malformed(&format!("expected tensor {}, found {name}", into.name(id))));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let data = r.f64s()?;
        let t = Tensor::new(shape, data).map_err(|e| r.malformed(&e.to_string()))?;
        values.push(t);
    }
    into.assign(values).map_err(|e| r.malformed(&e.to_string()))
}

fn write_adam(state: &AdamState) -> Writer {
    let mut out = w();
    out.u64(state.step);
    out.u32(state.m.len() as u32);
    for (m, v) in state.m.iter().zip(&state.v) {
        out.f64s(m);
        out.f64s(v);
    }
    out
}

fn read_adam(r: &mut Reader) -> Result<AdamState, CheckpointError> {
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.f64s()?);
        v.push(r.f64s()?);
    }
    Ok(AdamState { step, m, v })
}

const SECTIONS: [&str; 9] = [
    "meta",
    "config",
    "norm",
    "encoder",
    "velocity",
    "encoder_opt",
    "velocity_opt",
    "rng",
    "prompts",
];

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = w();
        out.buf.extend_from_slice(MAGIC);
        out.u32(FORMAT_VERSION);
        out.u32(SECTIONS.len() as u32);

        let mut meta = w();
        meta.str(self.kind.as_str());
        meta.u64(self.step);
        meta.str(self.text_arm.map_or("", TextArm::as_str));
        out.section("meta", meta);

        let mut config = w();
        config.str(&self.config.to_text());
        out.section("config", config);

        let mut norm = w();
        norm.f64s(&self.norm.mean);
        norm.f64s(&self.norm.std);
        out.section("norm", norm);

        out.section("encoder", write_params(&self.bundle.encoder_params));
        out.section("velocity", write_params(&self.bundle.velocity_params));
        out.section("encoder_opt", write_adam(&self.encoder_opt));
        out.section("velocity_opt", write_adam(&self.velocity_opt));

        let mut rng = w();
        rng.buf.extend_from_slice(&self.rng.get_seed());
        rng.u64(self.rng.get_stream());
        rng.buf.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.section("rng", rng);

        let mut prompts = w();
        prompts.u32(self.prompts.len() as u32);
        for (class, text) in &self.prompts {
            prompts.u64(*class as u64);
            prompts.str(text);
        }
        out.section("prompts", prompts);

        let digest = Sha256::digest(&out.buf);
        out.buf.extend_from_slice(&digest);
        out.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "header");
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic.into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let count = r.u32()? as usize;
        if count != SECTIONS.len() {
            return Err(r.malformed(&format!("{count} sections, expected {}", SECTIONS.len())).into());
        }
        let mut payloads = Vec::with_capacity(count);
        for expected in SECTIONS {
            r.section = expected.to_string();
            let name = r.str()?;
            if name != expected {
                return Err(r.malformed(&format!("found section {name}")).into());
            }
            let len = r.u64()? as usize;
            payloads.push(r.take(len)?);
        }
        r.section = "checksum".into();
        let body_len = r.pos;
        let digest = r.take(32)?;
        r.finish()?;
        if Sha256::digest(&bytes[..body_len]).as_slice() != digest {
            return Err(CheckpointError::Checksum.into());
        }

        let mut meta = Reader::new(payloads[0], "meta");
        let kind = match meta.str()?.as_str() {
            "flow" => ModelKind::Flow,
            "diffusion" => ModelKind::Diffusion,
            other => return Err(meta.malformed(&format!("unknown model kind {other}")).into()),
        };
        let step = meta.u64()?;
        let arm = meta.str()?;
        let text_arm = if arm.is_empty() { None } else { Some(arm.parse()?) };
        meta.finish()?;

        let mut cr = Reader::new(payloads[1], "config");
        let config = RunConfig::parse(&cr.str()?)?;
        cr.finish()?;

        let mut nr = Reader::new(payloads[2], "norm");
        let (mean, std) = (nr.f64s()?, nr.f64s()?);
        nr.finish()?;
        let to_arr = |v: Vec<f64>| -> Result<[f64; NUM_CHANNELS], CheckpointError> {
            v.try_into().map_err(|_| CheckpointError::Malformed {
                section: "norm".into(),
                msg: "wrong channel count".into(),
            })
        };
        let norm = NormStats {
            mean: to_arr(mean)?,
            std: to_arr(std)?,
        };

        let mut bundle = ModelBundle::new(&config.encoder, &config.velocity, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut er = Reader::new(payloads[3], "encoder");
        read_params(&mut er, &mut bundle.encoder_params)?;
        er.finish()?;
        let mut vr = Reader::new(payloads[4], "velocity");
        read_params(&mut vr, &mut bundle.velocity_params)?;
        vr.finish()?;

        let mut eo = Reader::new(payloads[5], "encoder_opt");
        let encoder_opt = read_adam(&mut eo)?;
        eo.finish()?;
        let mut vo = Reader::new(payloads[6], "velocity_opt");
        let velocity_opt = read_adam(&mut vo)?;
        vo.finish()?;

        let mut rr = Reader::new(payloads[7], "rng");
        let seed: [u8; 32] = rr.take(32)?.try_into().expect("32 bytes");
        let stream = rr.u64()?;
        let word_pos = u128::from_le_bytes(rr.take(16)?.try_into().expect("16 bytes"));
        rr.finish()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut pr = Reader::new(payloads[8], "prompts");
        let n = pr.u32()? as usize;
        let mut prompts = Vec::with_capacity(n);
        for _ in 0..n {
            let class = pr.u64()? as usize;
            prompts.push((class, pr.str()?));
        }
        pr.finish()?;

        Ok(Self {
            kind,
            config,
            bundle,
            encoder_opt,
            velocity_opt,
            norm,
            rng,
            step,
            prompts,
            text_arm,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Prompt text for `class`, if any.
    pub fn prompt_for(&self, class: usize) -> Option<&str> {
        self.prompts.iter().find(|(c, _)| *c == class).map(|(_, t)| t.as_str())
    }
}

/// Header line recording where an output came from.
pub fn provenance_header(config: &RunConfig, checkpoint_hash: Option<&str>) -> String {
    format!(
        "# flowfm config={} checkpoint={}",
        config.fingerprint(),
        checkpoint_hash.unwrap_or("none")
    )
}
