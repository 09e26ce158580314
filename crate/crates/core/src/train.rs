//! Training loops: joint pretraining (flow or diffusion) and prompt tuning.

use std::time::Instant;

use flowfm_tensor::{Adam, AdamState, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{NormStats, SignalBatch};
use crate::diffusion::{ddpm_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::flow::{conditional_cfm_loss, flowfm_loss, Condition};
use crate::model::{Bind, MaskPolicy, ModelBundle};
use crate::persist::{prompt_embed, Checkpoint, ModelKind, RunConfig, TextArm};

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub masked_fraction: f64,
    pub step_time_s: f64,
}

fn draw_batch<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

/// Joint pretraining state. All randomness after construction comes from
/// `rng`, so a trainer rebuilt from a checkpoint continues the exact run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub kind: ModelKind,
    pub config: RunConfig,
    pub bundle: ModelBundle,
    pub encoder_opt: AdamState,
    pub velocity_opt: AdamState,
    pub norm: NormStats,
    pub rng: ChaCha8Rng,
    pub step: u64,
    schedule: NoiseSchedule,
    policy: MaskPolicy,
}

impl Trainer {
    pub fn new(kind: ModelKind, config: RunConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bundle = ModelBundle::new(&config.encoder, &config.velocity, &mut rng)?;
        Ok(Self {
            kind,
            encoder_opt: AdamState::for_params(bundle.encoder_params.values()),
            velocity_opt: AdamState::for_params(bundle.velocity_params.values()),
            bundle,
            norm,
            rng,
            step: 0,
            schedule: config.schedule()?,
            policy: config.mask_policy()?,
            config,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Ok(Self {
            kind: ck.kind,
            schedule: ck.config.schedule()?,
            policy: ck.config.mask_policy()?,
            config: ck.config,
            bundle: ck.bundle,
            encoder_opt: ck.encoder_opt,
            velocity_opt: ck.velocity_opt,
            norm: ck.norm,
            rng: ck.rng,
            step: ck.step,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: self.kind,
            config: self.config.clone(),
            bundle: self.bundle.clone(),
            encoder_opt: self.encoder_opt.clone(),
            velocity_opt: self.velocity_opt.clone(),
            norm: self.norm,
            rng: self.rng.clone(),
            step: self.step,
            prompts: Vec::new(),
            text_arm: None,
        }
    }

    /// One optimization step on a minibatch drawn with replacement.
    pub fn train_step(&mut self, data: &SignalBatch) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let start = Instant::now();
        let idx = draw_batch(data.len(), self.config.batch_size, &mut self.rng);
        let x = data.tensor(&idx);
        let mut tape = Tape::new();
        let pe = self.bundle.encoder_params.bind(&mut tape, true);
        let pv = self.bundle.velocity_params.bind(&mut tape, true);
        let net = Bind {
            net: &self.bundle.velocity,
            params: &pv,
        };
        let enc = Bind {
            net: &self.bundle.encoder,
            params: &pe,
        };
        let out = match self.kind {
            ModelKind::Flow => flowfm_loss(&mut tape, &net, &enc, &x, &self.policy, None, &mut self.rng)?,
            ModelKind::Diffusion => ddpm_loss(
                &mut tape,
                &net,
                &enc,
                &x,
                &self.policy,
                &self.schedule,
                None,
                &mut self.rng,
            )?,
        };
        let loss = tape.value(out.loss).item().unwrap_or(f64::NAN);
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                step: self.step as usize,
            });
        }
        tape.backward(out.loss)?;
        let ge = self.bundle.encoder_params.grads(&tape, &pe);
        let gv = self.bundle.velocity_params.grads(&tape, &pv);
        let adam = Adam::with_lr(self.config.lr);
        adam.step(self.bundle.encoder_params.values_mut(), &ge, &mut self.encoder_opt)?;
        adam.step(self.bundle.velocity_params.values_mut(), &gv, &mut self.velocity_opt)?;
        Ok(LogRow {
            step: self.step,
            loss,
            masked_fraction: out.masked_fraction(),
            step_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `self.step == until`, reporting each row.
    pub fn run_until(&mut self, data: &SignalBatch, until: u64, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.step < until {
            let row = self.train_step(data)?;
            if row.step % 100 == 0 {
                log::info!("step {} loss {:.5}", row.step, row.loss);
            }
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Prompt for every class in `classes`, embedded at `dim`.
pub fn prompt_table(prompts: &[(usize, String)], classes: usize, dim: usize) -> Result<Vec<Tensor>> {
    (0..classes)
        .map(|c| {
            prompts
                .iter()
                .find(|(k, _)| *k == c)
                .map(|(_, text)| prompt_embed(text, dim))
                .ok_or_else(|| Error::Data(format!("class {c} has no prompt")))
        })
        .collect()
}

/// Rows of per-sample prompt embeddings for `labels`.
pub fn prompt_rows(table: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    let rows: Vec<Tensor> = labels.iter().map(|&c| table[c].clone()).collect();
    Ok(Tensor::stack(&rows)?)
}

/// Tunes the velocity network on prompt conditions with the encoder frozen.
///
/// The `TextRep` arm also conditions on frozen representations, masked per
/// sample like in pretraining; prompts are never masked.
pub fn text_tune(
    ck: &Checkpoint,
    data: &SignalBatch,
    prompts: &[(usize, String)],
    arm: TextArm,
    steps: usize,
    lr: f64,
) -> Result<(Checkpoint, Vec<LogRow>)> {
    let labels = data.labels();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let dim = ck.bundle.velocity.aux_dim();
    let table = prompt_table(prompts, classes, dim)?;
    let reps = if arm.uses_rep() {
        Some(ck.bundle.encode(&data.all_tensor())?)
    } else {
        None
    };
    let policy = ck.config.mask_policy()?;
    let mut rng = ck.rng.clone();
    let mut params = ck.bundle.velocity_params.clone();
    let mut opt = AdamState::for_params(params.values());
    let adam = Adam::with_lr(lr);
    let mut log = Vec::with_capacity(steps);
    for step in 1..=steps {
        let start = Instant::now();
        let idx = draw_batch(data.len(), ck.config.batch_size, &mut rng);
        let x = data.tensor(&idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let aux = prompt_rows(&table, &batch_labels)?;
        let (rep, masked) = match &reps {
            Some(r) => {
                let mask = policy.draw(idx.len(), &mut rng);
                let d = r.shape()[1];
                let mut values = Vec::with_capacity(idx.len() * d);
                for (&i, &m) in idx.iter().zip(&mask) {
                    if m {
                        values.extend(std::iter::repeat_n(0.0, d));
                    } else {
                        values.extend_from_slice(&r.data()[i * d..(i + 1) * d]);
                    }
                }
                let rows = Tensor::new([idx.len(), d], values)?;
                let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
                (Some(rows), frac)
            }
            None => (None, 0.0),
        };
        let cond = Condition { rep, aux: Some(aux) };
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, true);
        let net = Bind {
            net: &ck.bundle.velocity,
            params: &pv,
        };
        let loss = conditional_cfm_loss(&mut tape, &net, &x, &cond, &mut rng)?;
        let value = tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "loss", step });
        }
        tape.backward(loss)?;
        let g = params.grads(&tape, &pv);
        adam.step(params.values_mut(), &g, &mut opt)?;
        log.push(LogRow {
            step: step as u64,
            loss: value,
            masked_fraction: masked,
            step_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let mut out = ck.clone();
    out.bundle.velocity_params = params;
    out.velocity_opt = opt;
    out.rng = rng;
    out.prompts = prompts.to_vec();
    out.text_arm = Some(arm);
    Ok((out, log))
}
