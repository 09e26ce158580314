//! Linear probability paths and the flow-matching objectives.

use flowfm_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{MaskPolicy, RepresentationModel, VelocityModel};

/// One draw of the linear path `x_t = (1 - t)·x0 + t·x1` per batch row,
/// with its target velocity `x1 - x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub u_target: Tensor,
}

impl PathSample {
    /// Builds the path for fixed endpoints and one time per leading row.
    pub fn new(x0: Tensor, x1: Tensor, t: Vec<f64>) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::Invalid(format!(
                "path endpoints differ in shape: {:?} vs {:?}",
                x0.shape(),
                x1.shape()
            )));
        }
        let rows = x1.shape().first().copied().unwrap_or(1);
        if t.len() != rows {
            return Err(Error::Invalid(format!("{} times for {rows} rows", t.len())));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Invalid(format!("path time {bad} outside [0, 1]")));
        }
        let x_t = interpolate(&x0, &x1, &t);
        let u_target = x1.zip_map(&x0, |a, b| a - b)?;
        Ok(Self { x0, x1, t, x_t, u_target })
    }
}

/// `(1 - t_i)·x0 + t_i·x1` for each leading row `i`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Tensor {
    let inner = x1.numel() / t.len().max(1);
    let mut out = x1.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ti = t[i / inner.max(1)];
        *v = (1.0 - ti) * x0.data()[i] + ti * x1.data()[i];
    }
    out
}

/// Uniform times on `[0, 1)`.
pub fn sample_times<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Draws `x0 ~ N(0, I)` and then one time per row.
pub fn sample_path<R: Rng + ?Sized>(x1: &Tensor, rng: &mut R) -> Result<PathSample> {
    if !x1.is_finite() {
        return Err(Error::Invalid("path endpoint contains non-finite values".into()));
    }
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, rng);
    let rows = x1.shape().first().copied().unwrap_or(1);
    let t = sample_times(rows, rng);
    PathSample::new(x0, x1.clone(), t)
}

/// Mean squared error between the predicted field and the path target.
pub fn cfm_loss(tape: &mut Tape, v_pred: Var, path: &PathSample) -> Result<Var> {
    let target = tape.constant(path.u_target.clone());
    Ok(tape.mse(v_pred, target)?)
}

/// Loss node of a joint step together with the representation mask drawn.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub loss: Var,
    pub mask: Vec<bool>,
}

impl JointLoss {
    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Joint loss: encode the batch, mask representations, draw a path and
/// regress the conditioned field onto its target.
///
/// The representation stays on the tape so the gradient reaches the encoder.
/// Randomness is consumed in a fixed order: mask, then prior noise, then times.
pub fn flowfm_loss<V, E, R>(
    tape: &mut Tape,
    net: &V,
    encoder: &E,
    x1: &Tensor,
    dgs: &MaskPolicy,
    aux: Option<Var>,
    rng: &mut R,
) -> Result<JointLoss>
where
    V: VelocityModel + ?Sized,
    E: RepresentationModel + ?Sized,
    R: Rng + ?Sized,
{
    if x1.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mask = dgs.draw(x1.shape()[0], rng);
    let path = sample_path(x1, rng)?;
    let loss = flowfm_loss_on_path(tape, net, encoder, &path, &mask, aux)?;
    Ok(JointLoss { loss, mask })
}

/// Joint loss for a given path and mask.
pub fn flowfm_loss_on_path<V, E>(
    tape: &mut Tape,
    net: &V,
    encoder: &E,
    path: &PathSample,
    mask: &[bool],
    aux: Option<Var>,
) -> Result<Var>
where
    V: VelocityModel + ?Sized,
    E: RepresentationModel + ?Sized,
{
    let x1 = tape.constant(path.x1.clone());
    let rep = encoder.encode(tape, x1)?;
    let rep = mask_rows(tape, rep, mask)?;
    let x_t = tape.constant(path.x_t.clone());
    let v = net.velocity(tape, x_t, &path.t, Some(rep), aux)?;
    cfm_loss(tape, v, path)
}

/// Zeroes the rows of `x` flagged in `mask`.
pub fn mask_rows(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if rows != mask.len() {
        return Err(Error::Invalid(format!("mask of {} rows for {rows} rows", mask.len())));
    }
    let keep = Tensor::new([rows, 1], mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect())?;
    let keep = tape.constant(keep);
    Ok(tape.mul(x, keep)?)
}

/// Fixed condition inputs; neither receives gradient.
#[derive(Clone, Debug, Default)]
pub struct Condition {
    pub rep: Option<Tensor>,
    pub aux: Option<Tensor>,
}

/// Flow-matching loss under a fixed condition.
pub fn conditional_cfm_loss<V, R>(tape: &mut Tape, net: &V, x1: &Tensor, cond: &Condition, rng: &mut R) -> Result<Var>
where
    V: VelocityModel + ?Sized,
    R: Rng + ?Sized,
{
    let path = sample_path(x1, rng)?;
    conditional_cfm_loss_on_path(tape, net, &path, cond)
}

pub fn conditional_cfm_loss_on_path<V>(tape: &mut Tape, net: &V, path: &PathSample, cond: &Condition) -> Result<Var>
where
    V: VelocityModel + ?Sized,
{
    let rep = cond.rep.as_ref().map(|r| tape.constant(r.clone()));
    let aux = cond.aux.as_ref().map(|a| tape.constant(a.clone()));
    let x_t = tape.constant(path.x_t.clone());
    let v = net.velocity(tape, x_t, &path.t, rep, aux)?;
    cfm_loss(tape, v, path)
}
