//! Denoising-diffusion baseline: linear noise schedule, noise-prediction
//! loss, and the ancestral and deterministic (DDIM) samplers.

use std::time::{Duration, Instant};

use flowfm_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{mask_rows, JointLoss};
use crate::model::{MaskPolicy, RepresentationModel, VelocityModel};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Betas spaced evenly from `beta_start` to `beta_end`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha(&self, s: usize) -> f64 {
        1.0 - self.betas[s]
    }

    /// Variance of `q(x_{s-1} | x_s, x_0)`; zero at the first step.
    pub fn posterior_variance(&self, s: usize) -> f64 {
        if s == 0 {
            return 0.0;
        }
        self.betas[s] * (1.0 - self.alpha_bars[s - 1]) / (1.0 - self.alpha_bars[s])
    }

    /// Network time input for step `s`.
    pub fn time_input(&self, s: usize) -> f64 {
        s as f64 / self.num_steps() as f64
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s >= self.num_steps() {
            return Err(Error::Invalid(format!(
                "diffusion step {s} out of range 0..{}",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// `x_s = sqrt(ᾱ_s)·x0 + sqrt(1 - ᾱ_s)·ε` with fresh `ε`; returns `(x_s, ε)`.
pub fn forward_noise<R: Rng + ?Sized>(
    x0: &Tensor,
    s: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    schedule.check_step(s)?;
    let eps = Tensor::randn(x0.shape().to_vec(), 1.0, rng);
    let x_s = noised(x0, &eps, &[s], schedule);
    Ok((x_s, eps))
}

/// Noises each leading row `i` of `x0` to step `steps[i]` (or `steps[0]`
/// for every row when only one step is given).
fn noised(x0: &Tensor, eps: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Tensor {
    let rows = if steps.len() == 1 { 1 } else { steps.len() };
    let inner = x0.numel() / rows;
    let mut out = x0.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ab = schedule.alpha_bars[steps[i / inner]];
        *v = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
    }
    out
}

/// Noise-prediction loss with per-row steps and noise supplied.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss_with<V, E>(
    tape: &mut Tape,
    net: &V,
    encoder: &E,
    x1: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    mask: &[bool],
    schedule: &NoiseSchedule,
    aux: Option<Var>,
) -> Result<Var>
where
    V: VelocityModel + ?Sized,
    E: RepresentationModel + ?Sized,
{
    let rows = x1.shape()[0];
    if steps.len() != rows || eps.shape() != x1.shape() {
        return Err(Error::Invalid("steps and noise must match the batch".into()));
    }
    for &s in steps {
        schedule.check_step(s)?;
    }
    let x_s = noised(x1, eps, steps, schedule);
    let x1v = tape.constant(x1.clone());
    let rep = encoder.encode(tape, x1v)?;
    let rep = mask_rows(tape, rep, mask)?;
    let t: Vec<f64> = steps.iter().map(|&s| schedule.time_input(s)).collect();
    let xv = tape.constant(x_s);
    let pred = net.velocity(tape, xv, &t, Some(rep), aux)?;
    let target = tape.constant(eps.clone());
    Ok(tape.mse(pred, target)?)
}

/// Noise-prediction loss at uniformly drawn steps. Randomness order: mask,
/// steps, noise.
pub fn ddpm_loss<V, E, R>(
    tape: &mut Tape,
    net: &V,
    encoder: &E,
    x1: &Tensor,
    dgs: &MaskPolicy,
    schedule: &NoiseSchedule,
    aux: Option<Var>,
    rng: &mut R,
) -> Result<JointLoss>
where
    V: VelocityModel + ?Sized,
    E: RepresentationModel + ?Sized,
    R: Rng + ?Sized,
{
    let rows = x1.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mask = dgs.draw(rows, rng);
    let steps: Vec<usize> = (0..rows).map(|_| rng.random_range(0..schedule.num_steps())).collect();
    let eps = Tensor::randn(x1.shape().to_vec(), 1.0, rng);
    let loss = ddpm_loss_with(tape, net, encoder, x1, &steps, &eps, &mask, schedule, aux)?;
    Ok(JointLoss { loss, mask })
}

/// Bookkeeping of one reverse run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStats {
    pub steps: usize,
    pub net_evals: usize,
    pub wall_time: Duration,
}

/// Full reverse chain from `x_T ~ N(0, I)` using the posterior variance.
/// `eps_fn(x, s)` predicts the noise in `x` at step `s`.
pub fn ancestral_sample<F, R>(
    mut eps_fn: F,
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, SampleStats)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let mut x = Tensor::randn(shape.to_vec(), 1.0, rng);
    let start = Instant::now();
    let mut evals = 0;
    for s in (0..schedule.num_steps()).rev() {
        let eps = eps_fn(&x, s)?;
        evals += 1;
        let beta = schedule.betas[s];
        let coef = beta / (1.0 - schedule.alpha_bars[s]).sqrt();
        let inv = 1.0 / schedule.alpha(s).sqrt();
        let sigma = schedule.posterior_variance(s).sqrt();
        let noise = (s > 0).then(|| Tensor::randn(shape.to_vec(), 1.0, rng));
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let mean = inv * (*v - coef * eps.data()[i]);
            *v = match &noise {
                Some(z) => mean + sigma * z.data()[i],
                None => mean,
            };
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: "diffusion state",
                step: schedule.num_steps() - s,
            });
        }
    }
    Ok((
        x,
        SampleStats {
            steps: schedule.num_steps(),
            net_evals: evals,
            wall_time: start.elapsed(),
        },
    ))
}

/// Evenly spaced DDIM step subsequence `floor(i·T/n)`, ascending.
pub fn ddim_steps(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * total / n).collect()
}

/// Deterministic (η = 0) reverse run over `num_steps` evenly spaced steps,
/// starting from the given noise.
pub fn ddim_sample<F>(
    mut eps_fn: F,
    x_init: Tensor,
    schedule: &NoiseSchedule,
    num_steps: usize,
) -> Result<(Tensor, SampleStats)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if num_steps == 0 || num_steps > schedule.num_steps() {
        return Err(Error::Invalid(format!(
            "DDIM steps {num_steps} must lie in 1..={}",
            schedule.num_steps()
        )));
    }
    let seq = ddim_steps(schedule.num_steps(), num_steps);
    let mut x = x_init;
    let start = Instant::now();
    let mut evals = 0;
    for i in (0..seq.len()).rev() {
        let s = seq[i];
        let eps = eps_fn(&x, s)?;
        evals += 1;
        let ab = schedule.alpha_bars[s];
        let ab_prev = if i > 0 { schedule.alpha_bars[seq[i - 1]] } else { 1.0 };
        for (v, e) in x.data_mut().iter_mut().zip(eps.data()) {
            let x0 = (*v - (1.0 - ab).sqrt() * e) / ab.sqrt();
            *v = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: "diffusion state",
                step: seq.len() - i,
            });
        }
    }
    Ok((
        x,
        SampleStats {
            steps: num_steps,
            net_evals: evals,
            wall_time: start.elapsed(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.num_steps(), 1000);
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 2e-2).abs() < 1e-15);
        assert_eq!(s.posterior_variance(0), 0.0);
    }

    #[test]
    fn ddim_subsequence() {
        assert_eq!(ddim_steps(1000, 4), vec![0, 250, 500, 750]);
        assert_eq!(ddim_steps(10, 10), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 2e-2, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }
}
