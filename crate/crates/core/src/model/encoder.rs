use flowfm_tensor::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use super::layers::{AffineNorm, Attention, Init, Linear, Mlp, PatchEmbed};
use super::EncoderConfig;
use crate::data::NUM_CHANNELS;
use crate::error::Result;

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
struct VitBlock {
    norm1: AffineNorm,
    attn: Attention,
    norm2: AffineNorm,
    mlp: Mlp,
}

impl VitBlock {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// 1-D vision transformer mapping a window to one representation vector.
///
/// Patchify by strided convolution, add learned positions, run the blocks,
/// mean-pool the tokens and project to `rep_dim`.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch: PatchEmbed,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    norm: AffineNorm,
    head: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let d = cfg.embed_dim;
        let patch = PatchEmbed::new(&mut ps, "encoder.patch", NUM_CHANNELS, cfg.patch_size, d, rng);
        let pos = ps.add(
            "encoder.pos",
            Tensor::trunc_normal([cfg.num_tokens(), d], super::layers::INIT_STD, rng),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("encoder.blocks.{i}");
                VitBlock {
                    norm1: AffineNorm::new(&mut ps, &format!("{name}.norm1"), d),
                    attn: Attention::new(&mut ps, &format!("{name}.attn"), d, cfg.heads, rng),
                    norm2: AffineNorm::new(&mut ps, &format!("{name}.norm2"), d),
                    mlp: Mlp::new(&mut ps, &format!("{name}.mlp"), d, cfg.hidden_dim(), rng),
                }
            })
            .collect();
        let norm = AffineNorm::new(&mut ps, "encoder.norm", d);
        let head = Linear::new(&mut ps, "encoder.head", d, cfg.rep_dim, true, Init::TruncNormal, rng);
        Ok((
            Self {
                cfg: cfg.clone(),
                patch,
                pos,
                blocks,
                norm,
                head,
            },
            ps,
        ))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Token embeddings `[B, T, D]` of a `[B, 3, L]` batch.
    pub fn patchify(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.patch.forward(tape, p, x)
    }

    /// Representations `[B, rep_dim]` of a `[B, 3, 300]` batch.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let tokens = self.patchify(tape, p, x)?;
        let mut h = tape.add(tokens, p[self.pos])?;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        let h = self.norm.forward(tape, p, h)?;
        let pooled = tape.mean_axis(h, 1)?;
        self.head.forward(tape, p, pooled)
    }
}
