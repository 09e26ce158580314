//! File-level workflows behind the command-line tool. Every command reads
//! its inputs from paths, writes CSV or checkpoint files into an output
//! directory, and is a pure function of its inputs and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flowfm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_stats, load_csv, normalize, read_without_comments, save_csv, split, synthesize, SignalBatch};
use crate::error::{Error, Result};
use crate::eval::{fine_tune, gen_report, linear_probe, pca_project, FineTuneConfig, ProbeConfig, ProbeResult};
use crate::persist::{
    file_fingerprint, normalize_prompt, prompt_embed, provenance_header, Checkpoint, ModelKind, RunConfig, TextArm,
};
use crate::sampler::{bench, generate, BenchCase, GenCondition, OdeConfig, BENCH_HEADER};
use crate::train::{text_tune, LogRow, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ffm";
pub const TEXT_CHECKPOINT_FILE: &str = "checkpoint_text.ffm";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Feature network named in generation reports.
const FEATURE_SPACE: &str = "frozen flowfm encoder";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes a provenance comment, a header row and the data rows.
fn write_table(path: &Path, provenance: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut out = create(path)?;
    writeln!(out, "{provenance}").map_err(io)?;
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The raw dataset named by the config.
pub fn load_dataset(cfg: &RunConfig) -> Result<SignalBatch> {
    match &cfg.data_csv {
        Some(path) => load_csv(path),
        None => synthesize(&cfg.synth),
    }
}

/// Train and eval splits of the configured dataset, unnormalized.
pub fn dataset_splits(cfg: &RunConfig, split_seed: u64) -> Result<(SignalBatch, SignalBatch)> {
    let data = load_dataset(cfg)?;
    split(&data, cfg.split_train_frac, split_seed)
}

/// Appends log rows to `loss_log.csv` and `timing.csv`, creating both with
/// headers when absent.
struct LogFiles {
    loss: BufWriter<File>,
    timing: BufWriter<File>,
    loss_path: PathBuf,
    timing_path: PathBuf,
}

impl LogFiles {
    fn open(dir: &Path, provenance: &str, loss_name: &str, timing_name: &str) -> Result<Self> {
        let open = |path: &Path, header: &str| -> Result<BufWriter<File>> {
            let fresh = !path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{provenance}\n{header}").map_err(|e| Error::io(path, e))?;
            }
            Ok(w)
        };
        let loss_path = dir.join(loss_name);
        let timing_path = dir.join(timing_name);
        Ok(Self {
            loss: open(&loss_path, "step,loss,masked_fraction")?,
            timing: open(&timing_path, "step,step_time_s")?,
            loss_path,
            timing_path,
        })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.loss, "{},{},{}", row.step, row.loss, row.masked_fraction)
            .map_err(|e| Error::io(&self.loss_path, e))?;
        writeln!(self.timing, "{},{}", row.step, row.step_time_s).map_err(|e| Error::io(&self.timing_path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.loss.flush().map_err(|e| Error::io(&self.loss_path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.timing_path, e))
    }
}

/// Joint pretraining of the flow (or diffusion) model on the training split.
///
/// With `resume`, training continues from that checkpoint (its config and
/// random state) up to `cfg.train_steps` total steps, appending to any
/// existing logs in `out`.
pub fn cmd_pretrain(cfg: &RunConfig, kind: ModelKind, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    ensure_dir(out)?;
    let (mut trainer, train) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.kind != kind {
                return Err(Error::Invalid(format!(
                    "cannot resume {} training from a {} checkpoint",
                    kind.as_str(),
                    ck.kind.as_str()
                )));
            }
            let (train, _) = dataset_splits(&ck.config, ck.config.split_seed)?;
            let train = apply_stats(&train, &ck.norm);
            let mut trainer = Trainer::from_checkpoint(ck)?;
            trainer.config.train_steps = cfg.train_steps;
            (trainer, train)
        }
        None => {
            cfg.validate()?;
            let (train, _) = dataset_splits(cfg, cfg.split_seed)?;
            let (train, stats) = normalize(&train)?;
            (Trainer::new(kind, cfg.clone(), stats)?, train)
        }
    };
    let provenance = provenance_header(&trainer.config, None);
    let mut logs = LogFiles::open(out, &provenance, LOSS_LOG_FILE, TIMING_FILE)?;
    let mut write_err = None;
    let result = trainer.run_until(&train, cfg.train_steps as u64, |row| {
        if write_err.is_none() {
            write_err = logs.write(row).err();
        }
    });
    logs.finish()?;
    result?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let path = out.join(CHECKPOINT_FILE);
    trainer.to_checkpoint().save(&path)?;
    Ok(path)
}

fn require_labels(batch: &SignalBatch) -> Result<()> {
    if batch.num_classes() < 2 {
        return Err(Error::Data(
            "data carries fewer than two class labels; nothing to classify".into(),
        ));
    }
    Ok(())
}

/// Loads a checkpoint and the train/eval splits normalized with its stats.
fn checkpoint_splits(
    checkpoint: &Path,
    data: Option<&Path>,
    split_seed: Option<u64>,
) -> Result<(Checkpoint, SignalBatch, SignalBatch)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(d) = data {
        cfg.data_csv = Some(d.to_path_buf());
    }
    let (train, eval) = dataset_splits(&cfg, split_seed.unwrap_or(cfg.split_seed))?;
    require_labels(&train)?;
    let (train, eval) = (apply_stats(&train, &ck.norm), apply_stats(&eval, &ck.norm));
    Ok((ck, train, eval))
}

fn write_probe(out: &Path, name: &str, provenance: &str, result: &ProbeResult, n_train: usize, n_eval: usize) -> Result<()> {
    write_table(
        &out.join(format!("{name}.csv")),
        provenance,
        &["method", "accuracy", "macro_f1", "n_train", "n_eval"],
        &[vec![
            name.to_string(),
            result.accuracy.to_string(),
            result.macro_f1.to_string(),
            n_train.to_string(),
            n_eval.to_string(),
        ]],
    )?;
    let classes = result.confusion.len();
    let mut header = vec!["true_class".to_string()];
    header.extend((0..classes).map(|c| format!("pred_{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = result
        .confusion
        .iter()
        .enumerate()
        .map(|(c, row)| std::iter::once(c.to_string()).chain(row.iter().map(usize::to_string)).collect())
        .collect();
    write_table(&out.join(format!("{name}_confusion.csv")), provenance, &header, &rows)
}

/// Linear probe on the frozen encoder of a checkpoint.
pub fn cmd_probe(checkpoint: &Path, data: Option<&Path>, split_seed: Option<u64>, out: &Path) -> Result<ProbeResult> {
    ensure_dir(out)?;
    let (ck, train, eval) = checkpoint_splits(checkpoint, data, split_seed)?;
    let cfg = ProbeConfig {
        epochs: ck.config.probe_epochs,
        lr: ck.config.probe_lr,
    };
    let result = linear_probe(&ck.bundle, &train, &eval, &cfg)?;
    let provenance = provenance_header(&ck.config, Some(&file_fingerprint(checkpoint)?));
    write_probe(out, "probe", &provenance, &result, train.len(), eval.len())?;
    Ok(result)
}

/// Fine-tunes the checkpoint's encoder with a linear head.
pub fn cmd_finetune(
    checkpoint: &Path,
    data: Option<&Path>,
    split_seed: Option<u64>,
    out: &Path,
) -> Result<ProbeResult> {
    ensure_dir(out)?;
    let (ck, train, eval) = checkpoint_splits(checkpoint, data, split_seed)?;
    let cfg = FineTuneConfig {
        epochs: ck.config.finetune_epochs,
        lr: ck.config.finetune_lr,
        batch_size: ck.config.finetune_batch_size,
        seed: ck.config.seed,
    };
    let result = fine_tune(&ck.bundle, &train, &eval, &cfg)?;
    let provenance = provenance_header(&ck.config, Some(&file_fingerprint(checkpoint)?));
    write_probe(out, "finetune", &provenance, &result, train.len(), eval.len())?;
    Ok(result)
}

/// Reads a `class_id,text` prompt table.
pub fn load_prompts(path: &Path) -> Result<Vec<(usize, String)>> {
    let (kept, file_lines) = read_without_comments(path)?;
    let csv_err = |line: u64, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line: match line {
            0 => 0,
            l => file_lines.get(l as usize - 1).copied().unwrap_or(l),
        },
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(kept.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["class_id", "text"] {
        return Err(csv_err(1, format!("expected header class_id,text, found {header:?}")));
    }
    let mut prompts = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let class = record[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(line, format!("bad class id {:?}", &record[0])))?;
        prompts.push((class, record[1].to_string()));
    }
    Ok(prompts)
}

/// Tunes the velocity network on prompts with the encoder frozen.
pub fn cmd_text_tune(
    checkpoint: &Path,
    prompts: &[(usize, String)],
    arm: TextArm,
    steps: Option<usize>,
    out: &Path,
) -> Result<PathBuf> {
    ensure_dir(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.kind != ModelKind::Flow {
        return Err(Error::Invalid("text tuning needs a flow checkpoint".into()));
    }
    let (train, _) = dataset_splits(&ck.config, ck.config.split_seed)?;
    let train = apply_stats(&train, &ck.norm);
    let steps = steps.unwrap_or(ck.config.text_steps);
    let (tuned, log) = text_tune(&ck, &train, prompts, arm, steps, ck.config.text_lr)?;
    let provenance = provenance_header(&ck.config, Some(&file_fingerprint(checkpoint)?));
    let mut logs = LogFiles::open(out, &provenance, "text_loss_log.csv", "text_timing.csv")?;
    for row in &log {
        logs.write(row)?;
    }
    logs.finish()?;
    let path = out.join(TEXT_CHECKPOINT_FILE);
    tuned.save(&path)?;
    Ok(path)
}

/// What a generation run is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum GenTarget {
    /// A class: representations of that class's training windows, plus its
    /// prompt when the checkpoint was text-tuned.
    Class(usize),
    /// Free text alone.
    Prompt(String),
    Unconditional,
}

/// Condition rows and class labels for `n` samples of `target`.
pub fn build_condition<R: Rng + ?Sized>(
    ck: &Checkpoint,
    train: &SignalBatch,
    target: &GenTarget,
    n: usize,
    rng: &mut R,
) -> Result<(GenCondition, Vec<usize>)> {
    let dim = ck.bundle.velocity.aux_dim();
    match target {
        GenTarget::Unconditional => Ok((GenCondition::default(), vec![0; n])),
        GenTarget::Prompt(text) => {
            let class = ck
                .prompts
                .iter()
                .find(|(_, t)| normalize_prompt(t) == normalize_prompt(text))
                .map_or(0, |(c, _)| *c);
            let row = prompt_embed(text, dim);
            let aux = Tensor::stack(&vec![row; n])?;
            Ok((
                GenCondition {
                    rep: None,
                    aux: (n > 0).then_some(aux),
                },
                vec![class; n],
            ))
        }
        GenTarget::Class(k) => {
            let pool: Vec<usize> = (0..train.len()).filter(|&i| train.windows[i].class_id == *k).collect();
            if pool.is_empty() {
                return Err(Error::Data(format!("class {k} has no training windows")));
            }
            let use_rep = ck.text_arm.is_none_or(TextArm::uses_rep);
            let rep = if use_rep && n > 0 {
                let idx: Vec<usize> = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
                Some(ck.bundle.encode(&train.tensor(&idx))?)
            } else {
                None
            };
            let aux = match (ck.text_arm, n) {
                (Some(_), 1..) => {
                    let text = ck
                        .prompt_for(*k)
                        .ok_or_else(|| Error::Data(format!("class {k} has no prompt")))?;
                    Some(Tensor::stack(&vec![prompt_embed(text, dim); n])?)
                }
                _ => None,
            };
            Ok((GenCondition { rep, aux }, vec![*k; n]))
        }
    }
}

/// Generates `n` windows and writes them, denormalized, in the data schema
/// with an `origin` column.
pub fn cmd_generate(
    checkpoint: &Path,
    target: &GenTarget,
    n: usize,
    sampler: Option<OdeConfig>,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    ensure_dir(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (train, _) = dataset_splits(&ck.config, ck.config.split_seed)?;
    let train = apply_stats(&train, &ck.norm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cond, labels) = build_condition(&ck, &train, target, n, &mut rng)?;
    let sampler = sampler.unwrap_or(ck.config.sampler);
    let (x, stats) = generate(&ck.bundle, &cond, &sampler, &mut rng, n)?;
    let mut data = x.into_data();
    ck.norm.denormalize(&mut data);
    let x = Tensor::new([n, crate::data::NUM_CHANNELS, crate::data::WINDOW_LEN], data)?;
    let batch = SignalBatch::from_tensor(&x, &labels, &vec![0; n])?;
    let path = out.join("generated.csv");
    let provenance = provenance_header(&ck.config, Some(&file_fingerprint(checkpoint)?));
    let comments = vec![
        provenance.trim_start_matches("# ").to_string(),
        format!(
            "sampler={} steps={} net_evals_per_sample={}",
            sampler.method, stats.steps, stats.net_evals_per_sample
        ),
    ];
    save_csv(&batch, &path, &comments, Some("generated"))?;
    Ok(path)
}

/// Speed and quality comparison of flow and diffusion samplers. FID is
/// measured in the flow checkpoint's encoder space against its eval split.
pub fn cmd_bench(
    flow_ckpt: &Path,
    diff_ckpt: &Path,
    cases: &[BenchCase],
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    ensure_dir(out)?;
    let flow = Checkpoint::load(flow_ckpt)?;
    let diff = Checkpoint::load(diff_ckpt)?;
    let (_, eval) = dataset_splits(&flow.config, flow.config.split_seed)?;
    let eval = apply_stats(&eval, &flow.norm);
    let reference = flow.bundle.encode(&eval.all_tensor())?;
    let schedule = diff.config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = bench(&flow.bundle, &diff.bundle, &schedule, cases, &flow.bundle, &reference, n, &mut rng)?;
    let provenance = format!(
        "{} diffusion_checkpoint={} feature_space={FEATURE_SPACE}",
        provenance_header(&flow.config, Some(&file_fingerprint(flow_ckpt)?)),
        file_fingerprint(diff_ckpt)?
    );
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.sampler.clone(),
                r.steps.to_string(),
                r.net_evals.to_string(),
                r.time_per_sample_s.to_string(),
                r.fid.to_string(),
                r.eval_ratio.to_string(),
            ]
        })
        .collect();
    let path = out.join("bench.csv");
    write_table(&path, &provenance, &BENCH_HEADER, &table)?;
    Ok(path)
}

/// FID and kNN precision/recall of generated against real windows.
pub fn cmd_eval_gen(checkpoint: &Path, real: &Path, gen: &Path, out: &Path) -> Result<crate::eval::GenReport> {
    ensure_dir(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let real = apply_stats(&load_csv(real)?, &ck.norm);
    let gen = apply_stats(&load_csv(gen)?, &ck.norm);
    let fr = ck.bundle.encode(&real.all_tensor())?;
    let fg = ck.bundle.encode(&gen.all_tensor())?;
    let report = gen_report(&fr, &fg, 3, FEATURE_SPACE)?;
    let provenance = provenance_header(&ck.config, Some(&file_fingerprint(checkpoint)?));
    write_table(
        &out.join("gen_report.csv"),
        &provenance,
        &["fid", "precision", "recall", "n_real", "n_gen", "feature_space"],
        &[vec![
            report.fid.to_string(),
            report.precision.to_string(),
            report.recall.to_string(),
            report.n_real.to_string(),
            report.n_gen.to_string(),
            report.feature_space.clone(),
        ]],
    )?;
    Ok(report)
}

/// Two-component PCA of encoder features of real and, optionally,
/// generated windows.
pub fn cmd_export_proj(checkpoint: &Path, real: &Path, gen: Option<&Path>, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut sets = vec![("real", apply_stats(&load_csv(real)?, &ck.norm))];
    if let Some(g) = gen {
        sets.push(("generated", apply_stats(&load_csv(g)?, &ck.norm)));
    }
    let mut feats = Vec::new();
    let mut meta = Vec::new();
    for (origin, batch) in &sets {
        feats.push(ck.bundle.encode(&batch.all_tensor())?);
        meta.extend(batch.windows.iter().map(|w| (w.class_id, w.subject_id, *origin)));
    }
    let all = crate::model::concat_rows(&feats, &[0, ck.config.encoder.rep_dim])?;
    let proj = pca_project(&all, 2)?;
    let rows: Vec<Vec<String>> = proj
        .data()
        .chunks(2)
        .zip(&meta)
        .map(|(p, (c, s, o))| vec![p[0].to_string(), p[1].to_string(), c.to_string(), s.to_string(), o.to_string()])
        .collect();
    let path = out.join("projection.csv");
    let provenance = provenance_header(&ck.config, Some(&file_fingerprint(checkpoint)?));
    write_table(&path, &provenance, &["x", "y", "class_id", "subject_id", "origin"], &rows)?;
    Ok(path)
}
