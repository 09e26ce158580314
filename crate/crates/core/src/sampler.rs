//! Fixed-step ODE integration of a velocity field from `t = 0` to `t = 1`.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use flowfm_tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::diffusion::{ancestral_sample, ddim_sample, NoiseSchedule};
use crate::model::{concat_rows, ModelBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OdeMethod {
    Euler,
    Midpoint,
    Rk4,
}

impl OdeMethod {
    /// Field evaluations per step.
    pub fn evals_per_step(self) -> usize {
        match self {
            Self::Euler => 1,
            Self::Midpoint => 2,
            Self::Rk4 => 4,
        }
    }
}

impl fmt::Display for OdeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Midpoint => "midpoint",
            Self::Rk4 => "rk4",
        })
    }
}

impl FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "midpoint" => Ok(Self::Midpoint),
            "rk4" => Ok(Self::Rk4),
            other => Err(Error::Config(format!("unknown ODE method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub num_steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            method: OdeMethod::Rk4,
            num_steps: 20,
        }
    }
}

impl FromStr for OdeConfig {
    type Err = Error;

    /// `method:steps`, e.g. `rk4:20`.
    fn from_str(s: &str) -> Result<Self> {
        let (method, steps) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected method:steps, got {s:?}")))?;
        let steps = steps
            .parse()
            .map_err(|_| Error::Config(format!("bad step count in {s:?}")))?;
        let cfg = Self::new(method.parse()?, steps);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl OdeConfig {
    pub fn new(method: OdeMethod, num_steps: usize) -> Self {
        Self { method, num_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("ODE integration needs at least one step".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.num_steps as f64
    }

    pub fn net_evals(&self) -> usize {
        self.num_steps * self.method.evals_per_step()
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// States at `t = 0, h, …, 1` when requested.
    pub states: Option<Vec<Tensor>>,
    pub final_state: Tensor,
    pub steps_taken: usize,
    pub net_evals: usize,
    pub wall_time: Duration,
}

fn axpy(x: &Tensor, a: f64, d: &Tensor) -> Result<Tensor> {
    Ok(x.zip_map(d, |x, d| x + a * d)?)
}

/// Integrates `dx/dt = v(x, t)` over `[0, 1]` with `num_steps` uniform steps.
pub fn integrate<F>(mut v: F, x0: &Tensor, cfg: &OdeConfig, keep_states: bool) -> Result<Trajectory>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    cfg.validate()?;
    let h = cfg.step_size();
    let mut x = x0.clone();
    let mut states = keep_states.then(|| vec![x.clone()]);
    let mut evals = 0;
    let start = Instant::now();
    for k in 0..cfg.num_steps {
        let t = k as f64 * h;
        x = match cfg.method {
            OdeMethod::Euler => {
                let k1 = v(&x, t)?;
                axpy(&x, h, &k1)?
            }
            OdeMethod::Midpoint => {
                let k1 = v(&x, t)?;
                let mid = axpy(&x, 0.5 * h, &k1)?;
                let k2 = v(&mid, t + 0.5 * h)?;
                axpy(&x, h, &k2)?
            }
            OdeMethod::Rk4 => {
                let t_half = t + 0.5 * h;
                let t_end = ((k + 1) as f64 * h).min(1.0);
                let k1 = v(&x, t)?;
                let k2 = v(&axpy(&x, 0.5 * h, &k1)?, t_half)?;
                let k3 = v(&axpy(&x, 0.5 * h, &k2)?, t_half)?;
                let k4 = v(&axpy(&x, h, &k3)?, t_end)?;
                let mut next = x.clone();
                for (i, out) in next.data_mut().iter_mut().enumerate() {
                    let d = k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i];
                    *out += h / 6.0 * d;
                }
                next
            }
        };
        evals += cfg.method.evals_per_step();
        if !x.is_finite() {
            return Err(Error::NonFinite { what: "ODE state", step: k });
        }
        if let Some(s) = states.as_mut() {
            s.push(x.clone());
        }
    }
    Ok(Trajectory {
        states,
        final_state: x,
        steps_taken: cfg.num_steps,
        net_evals: evals,
        wall_time: start.elapsed(),
    })
}

/// Per-sample condition inputs for generation; each is `[n, ·]` when present.
#[derive(Clone, Debug, Default)]
pub struct GenCondition {
    pub rep: Option<Tensor>,
    pub aux: Option<Tensor>,
}

/// Aggregate statistics of a generation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenStats {
    pub samples: usize,
    pub steps: usize,
    pub net_evals_per_sample: usize,
    pub wall_time: Duration,
}

impl GenStats {
    pub fn time_per_sample(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.wall_time.as_secs_f64() / self.samples as f64
        }
    }
}

/// Rows integrated together in one batched trajectory.
pub const GEN_CHUNK: usize = 64;

/// Draws `n` prior samples and integrates each under its condition.
/// Returns `[n, 3, 300]` in the model's normalized space.
pub fn generate<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    cond: &GenCondition,
    cfg: &OdeConfig,
    rng: &mut R,
    n: usize,
) -> Result<(Tensor, GenStats)> {
    cfg.validate()?;
    for part in [&cond.rep, &cond.aux].into_iter().flatten() {
        if part.shape()[0] != n {
            return Err(Error::Invalid(format!(
                "condition has {} rows for {n} samples",
                part.shape()[0]
            )));
        }
    }
    let shape = [crate::data::NUM_CHANNELS, crate::data::WINDOW_LEN];
    let mut parts = Vec::new();
    let mut wall = Duration::ZERO;
    let mut start = 0;
    while start < n {
        let len = GEN_CHUNK.min(n - start);
        let x0 = Tensor::randn([len, shape[0], shape[1]], 1.0, rng);
        let rep = cond.rep.as_ref().map(|r| r.rows(start, len)).transpose()?;
        let aux = cond.aux.as_ref().map(|a| a.rows(start, len)).transpose()?;
        let traj = integrate(
            |x, t| bundle.velocity_eval(x, &vec![t; len], rep.as_ref(), aux.as_ref()),
            &x0,
            cfg,
            false,
        )?;
        wall += traj.wall_time;
        parts.push(traj.final_state);
        start += len;
    }
    let out = concat_rows(&parts, &[0, shape[0], shape[1]])?;
    Ok((
        out,
        GenStats {
            samples: n,
            steps: cfg.num_steps,
            net_evals_per_sample: cfg.net_evals(),
            wall_time: wall,
        },
    ))
}

/// One sampler configuration in a speed/quality comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchCase {
    Flow(OdeConfig),
    Ancestral,
    Ddim(usize),
}

impl fmt::Display for BenchCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Flow(cfg) => write!(f, "flow-{}", cfg.method),
            Self::Ancestral => f.write_str("ddpm-ancestral"),
            Self::Ddim(_) => f.write_str("ddim"),
        }
    }
}

impl FromStr for BenchCase {
    type Err = Error;

    /// `euler:20`, `rk4:20`, `ancestral`, `ddim:50`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, steps) = match s.split_once(':') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad step count in {s:?}")))?,
                ),
            ),
            None => (s, None),
        };
        match (name, steps) {
            ("ancestral", None) => Ok(Self::Ancestral),
            ("ddim", Some(n)) => Ok(Self::Ddim(n)),
            (method, Some(n)) => Ok(Self::Flow(OdeConfig::new(method.parse()?, n))),
            _ => Err(Error::Config(format!("bad bench case {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub sampler: String,
    pub steps: usize,
    pub net_evals: usize,
    pub time_per_sample_s: f64,
    pub fid: f64,
    /// Network evaluations of the most expensive row divided by this row's.
    pub eval_ratio: f64,
}

pub const BENCH_HEADER: [&str; 6] = ["sampler", "steps", "net_evals", "time_per_sample_s", "fid", "eval_ratio"];

/// Runs each case for `n` unconditional samples and scores them by FID
/// against `reference` features in the space of `features`.
#[allow(clippy::too_many_arguments)]
pub fn bench<R: Rng + ?Sized>(
    flow: &ModelBundle,
    diffusion: &ModelBundle,
    schedule: &NoiseSchedule,
    cases: &[BenchCase],
    features: &ModelBundle,
    reference: &Tensor,
    n: usize,
    rng: &mut R,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let (samples, steps, evals, wall) = match *case {
            BenchCase::Flow(cfg) => {
                let (x, stats) = generate(flow, &GenCondition::default(), &cfg, rng, n)?;
                (x, stats.steps, stats.net_evals_per_sample, stats.wall_time)
            }
            BenchCase::Ancestral | BenchCase::Ddim(_) => {
                let mut parts = Vec::new();
                let mut wall = Duration::ZERO;
                let mut last = None;
                let mut start = 0;
                while start < n {
                    let len = GEN_CHUNK.min(n - start);
                    let shape = [len, crate::data::NUM_CHANNELS, crate::data::WINDOW_LEN];
                    let eps_fn = |x: &Tensor, s: usize| {
                        diffusion.velocity_eval(x, &vec![schedule.time_input(s); len], None, None)
                    };
                    let (x, stats) = match *case {
                        BenchCase::Ancestral => ancestral_sample(eps_fn, &shape, schedule, rng)?,
                        BenchCase::Ddim(k) => {
                            let init = Tensor::randn(shape.to_vec(), 1.0, rng);
                            ddim_sample(eps_fn, init, schedule, k)?
                        }
                        BenchCase::Flow(_) => unreachable!(),
                    };
                    wall += stats.wall_time;
                    last = Some(stats);
                    parts.push(x);
                    start += len;
                }
                let (steps, evals) = match (last, *case) {
                    (Some(s), _) => (s.steps, s.net_evals),
                    (None, BenchCase::Ddim(k)) => (k, k),
                    (None, _) => (schedule.num_steps(), schedule.num_steps()),
                };
                let x = concat_rows(&parts, &[0, crate::data::NUM_CHANNELS, crate::data::WINDOW_LEN])?;
                (x, steps, evals, wall)
            }
        };
        let fid = if n > 1 {
            crate::eval::fid(reference, &features.encode(&samples)?)?
        } else {
            f64::NAN
        };
        rows.push(BenchRow {
            sampler: case.to_string(),
            steps,
            net_evals: evals,
            time_per_sample_s: if n == 0 { 0.0 } else { wall.as_secs_f64() / n as f64 },
            fid,
            eval_ratio: 0.0,
        });
    }
    let max = rows.iter().map(|r| r.net_evals).max().unwrap_or(0);
    for r in &mut rows {
        r.eval_ratio = max as f64 / r.net_evals as f64;
    }
    Ok(rows)
}
