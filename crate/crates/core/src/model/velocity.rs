use flowfm_tensor::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use super::conditioning::{fuse_condition, timestep_embed_batch, ConditionVector};
use super::layers::{sincos_positions, Attention, Init, Linear, Mlp, PatchEmbed, LN_EPS};
use super::VelocityNetConfig;
use crate::data::NUM_CHANNELS;
use crate::error::{Error, Result};

fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = tape.add_scalar(scale, 1.0);
    let y = tape.mul(x, s)?;
    Ok(tape.add(y, shift)?)
}

/// `count` equal slices of a `[B, count·D]` modulation vector, each shaped
/// `[B, 1, D]` to broadcast over tokens.
fn chunks(tape: &mut Tape, m: Var, count: usize, dim: usize) -> Result<Vec<Var>> {
    let b = tape.shape(m)[0];
    let m = tape.reshape(m, &[b, 1, count * dim])?;
    (0..count)
        .map(|i| Ok(tape.narrow(m, 2, i * dim, dim)?))
        .collect()
}

/// Transformer block conditioned through adaLN-Zero: the condition produces
/// shift, scale and gate for each sub-layer from a zero-initialized head.
#[derive(Clone, Debug)]
pub struct DitBlock {
    attn: Attention,
    mlp: Mlp,
    modulation: Linear,
    dim: usize,
}

impl DitBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden, rng),
            modulation: Linear::new(ps, &format!("{name}.adaln"), dim, 6 * dim, true, Init::Zeros, rng),
            dim,
        }
    }

    /// Tokens `[B, T, D]` to tokens under condition `[B, D]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, cond: &ConditionVector) -> Result<Var> {
        let c = tape.silu(cond.values);
        let m = self.modulation.forward(tape, p, c)?;
        let parts = chunks(tape, m, 6, self.dim)?;
        let [shift_a, scale_a, gate_a, shift_m, scale_m, gate_m] = parts[..] else {
            unreachable!()
        };
        let h = tape.layer_norm(x, LN_EPS)?;
        let h = modulate(tape, h, shift_a, scale_a)?;
        let h = self.attn.forward(tape, p, h)?;
        let h = tape.mul(h, gate_a)?;
        let x = tape.add(x, h)?;
        let h = tape.layer_norm(x, LN_EPS)?;
        let h = modulate(tape, h, shift_m, scale_m)?;
        let h = self.mlp.forward(tape, p, h)?;
        let h = tape.mul(h, gate_m)?;
        Ok(tape.add(x, h)?)
    }

    /// Parameter ids of the modulation head (weight, bias).
    pub fn modulation_params(&self) -> (flowfm_tensor::ParamId, Option<flowfm_tensor::ParamId>) {
        (self.modulation.w, self.modulation.b)
    }
}

/// 1-D diffusion transformer predicting a `[B, 3, 300]` field from a noisy
/// input, the time, and optional representation / auxiliary conditions.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    cfg: VelocityNetConfig,
    rep_dim: usize,
    patch: PatchEmbed,
    pos: Tensor,
    t_fc1: Linear,
    t_fc2: Linear,
    rep_proj: Linear,
    aux_proj: Linear,
    blocks: Vec<DitBlock>,
    final_modulation: Linear,
    final_out: Linear,
}

impl VelocityNet {
    pub fn new<R: Rng + ?Sized>(cfg: &VelocityNetConfig, rep_dim: usize, rng: &mut R) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let d = cfg.embed_dim;
        let patch = PatchEmbed::new(&mut ps, "velocity.patch", NUM_CHANNELS, cfg.patch_size, d, rng);
        let t_fc1 = Linear::new(&mut ps, "velocity.t_embed.fc1", d, d, true, Init::TruncNormal, rng);
        let t_fc2 = Linear::new(&mut ps, "velocity.t_embed.fc2", d, d, true, Init::TruncNormal, rng);
        let rep_proj = Linear::new(&mut ps, "velocity.rep_proj", rep_dim, d, false, Init::TruncNormal, rng);
        let aux_proj = Linear::new(&mut ps, "velocity.aux_proj", d, d, false, Init::TruncNormal, rng);
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(&mut ps, &format!("velocity.blocks.{i}"), d, cfg.heads, cfg.hidden_dim(), rng))
            .collect();
        let final_modulation = Linear::new(&mut ps, "velocity.final.adaln", d, 2 * d, true, Init::Zeros, rng);
        let final_out = Linear::new(
            &mut ps,
            "velocity.final.out",
            d,
            cfg.patch_size * NUM_CHANNELS,
            true,
            Init::Zeros,
            rng,
        );
        Ok((
            Self {
                cfg: cfg.clone(),
                rep_dim,
                pos: sincos_positions(cfg.num_tokens(), d),
                patch,
                t_fc1,
                t_fc2,
                rep_proj,
                aux_proj,
                blocks,
                final_modulation,
                final_out,
            },
            ps,
        ))
    }

    pub fn config(&self) -> &VelocityNetConfig {
        &self.cfg
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    /// Width of the auxiliary condition slot.
    pub fn aux_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    pub fn patchify(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.patch.forward(tape, p, x)
    }

    /// Builds the fused condition for a batch.
    pub fn condition(
        &self,
        tape: &mut Tape,
        p: &Bound,
        t: &[f64],
        rep: Option<Var>,
        aux: Option<Var>,
    ) -> Result<ConditionVector> {
        let temb = tape.constant(timestep_embed_batch(t, self.cfg.embed_dim)?);
        let h = self.t_fc1.forward(tape, p, temb)?;
        let h = tape.silu(h);
        let temb = self.t_fc2.forward(tape, p, h)?;
        let rep = rep.map(|r| self.rep_proj.forward(tape, p, r)).transpose()?;
        let aux = aux.map(|a| self.aux_proj.forward(tape, p, a)).transpose()?;
        fuse_condition(tape, temb, rep, aux)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: Var,
        t: &[f64],
        rep: Option<Var>,
        aux: Option<Var>,
    ) -> Result<Var> {
        let shape = tape.shape(x_t).to_vec();
        let [b, c, len] = shape[..] else {
            return Err(Error::Invalid(format!("velocity input must be [B, C, L], got {shape:?}")));
        };
        if t.len() != b {
            return Err(Error::Invalid(format!("{} timesteps for batch of {b}", t.len())));
        }
        let cond = self.condition(tape, p, t, rep, aux)?;
        let tokens = self.patchify(tape, p, x_t)?;
        let pos = tape.constant(self.pos.clone());
        let mut h = tape.add(tokens, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h, &cond)?;
        }
        let ca = tape.silu(cond.values);
        let m = self.final_modulation.forward(tape, p, ca)?;
        let parts = chunks(tape, m, 2, self.cfg.embed_dim)?;
        let h = tape.layer_norm(h, LN_EPS)?;
        let h = modulate(tape, h, parts[0], parts[1])?;
        let out = self.final_out.forward(tape, p, h)?;
        // [B, T, C·P] -> [B, C, T·P]
        let tokens = len / self.cfg.patch_size;
        let out = tape.reshape(out, &[b, tokens, c, self.cfg.patch_size])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        Ok(tape.reshape(out, &[b, c, len])?)
    }
}
