//! Representation encoder, velocity network and the conditioning stack.

pub mod conditioning;
mod encoder;
pub mod layers;
mod velocity;

use flowfm_tensor::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;

pub use conditioning::{apply_dgs, fuse_condition, timestep_embed, ConditionVector, MaskPolicy};
pub use encoder::Encoder;
pub use velocity::{DitBlock, VelocityNet};

use crate::data::WINDOW_LEN;
use crate::error::{Error, Result};

/// Rows per forward pass when running inference over large batches.
const INFER_CHUNK: usize = 128;

fn validate_common(patch: usize, dim: usize, heads: usize, depth: usize, mlp_ratio: f64) -> Result<()> {
    if patch == 0 || WINDOW_LEN % patch != 0 {
        return Err(Error::Config(format!("patch_size {patch} must divide {WINDOW_LEN}")));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("embed_dim {dim} is not divisible by heads {heads}")));
    }
    if dim % 2 != 0 {
        return Err(Error::Config(format!("embed_dim {dim} must be even")));
    }
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    if !(mlp_ratio > 0.0) {
        return Err(Error::Config(format!("mlp_ratio {mlp_ratio} must be positive")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub rep_dim: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 15,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            rep_dim: 64,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(self.patch_size, self.embed_dim, self.heads, self.depth, self.mlp_ratio)?;
        if self.rep_dim == 0 {
            return Err(Error::Config("rep_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        WINDOW_LEN / self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNetConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        Self {
            patch_size: 15,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl VelocityNetConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(self.patch_size, self.embed_dim, self.heads, self.depth, self.mlp_ratio)
    }

    pub fn num_tokens(&self) -> usize {
        WINDOW_LEN / self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// A network predicting a `[B, 3, 300]` field from a noisy input.
///
/// The flow model reads the output as a velocity; the diffusion baseline
/// reads it as predicted noise.
pub trait VelocityModel {
    fn velocity(&self, tape: &mut Tape, x_t: Var, t: &[f64], rep: Option<Var>, aux: Option<Var>) -> Result<Var>;
}

pub trait RepresentationModel {
    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// A network paired with its parameters bound on a tape.
#[derive(Clone, Copy)]
pub struct Bind<'a, N> {
    pub net: &'a N,
    pub params: &'a Bound,
}

impl VelocityModel for Bind<'_, VelocityNet> {
    fn velocity(&self, tape: &mut Tape, x_t: Var, t: &[f64], rep: Option<Var>, aux: Option<Var>) -> Result<Var> {
        self.net.forward(tape, self.params, x_t, t, rep, aux)
    }
}

impl RepresentationModel for Bind<'_, Encoder> {
    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.net.forward(tape, self.params, x)
    }
}

/// Encoder and velocity network with their parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub encoder_params: ParamSet,
    pub velocity: VelocityNet,
    pub velocity_params: ParamSet,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(enc: &EncoderConfig, vel: &VelocityNetConfig, rng: &mut R) -> Result<Self> {
        let (encoder, encoder_params) = Encoder::new(enc, rng)?;
        let (velocity, velocity_params) = VelocityNet::new(vel, enc.rep_dim, rng)?;
        Ok(Self {
            encoder,
            encoder_params,
            velocity,
            velocity_params,
        })
    }

    /// Representations of a `[N, 3, 300]` tensor, computed without gradients.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = INFER_CHUNK.min(n - start);
            let mut tape = Tape::new();
            let p = self.encoder_params.bind(&mut tape, false);
            let xv = tape.constant(x.rows(start, len)?);
            let r = self.encoder.forward(&mut tape, &p, xv)?;
            parts.push(tape.value(r).clone());
            start += len;
        }
        concat_rows(&parts, &[0, self.encoder.config().rep_dim])
    }

    /// One evaluation of the velocity network without gradients.
    pub fn velocity_eval(&self, x: &Tensor, t: &[f64], rep: Option<&Tensor>, aux: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.velocity_params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let rv = rep.map(|r| tape.constant(r.clone()));
        let av = aux.map(|a| tape.constant(a.clone()));
        let v = self.velocity.forward(&mut tape, &p, xv, t, rv, av)?;
        Ok(tape.value(v).clone())
    }
}

/// Concatenates tensors along the leading axis; `empty` is the shape used
/// when there are no parts.
pub(crate) fn concat_rows(parts: &[Tensor], empty: &[usize]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Ok(Tensor::zeros(empty.to_vec()));
    };
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Adds `N(0, std²)` noise to every parameter. Used to move a freshly
/// initialized network away from its zero-initialized heads.
pub fn perturb<R: Rng + ?Sized>(params: &mut ParamSet, std: f64, rng: &mut R) {
    for value in params.values_mut() {
        let noise = Tensor::randn(value.shape().to_vec(), std, rng);
        for (v, n) in value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}
