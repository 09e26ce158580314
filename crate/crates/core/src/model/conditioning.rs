use flowfm_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Sinusoidal embedding of `t ∈ [0, 1]`, scaled by 1000 and laid out as
/// interleaved `(sin, cos)` pairs at frequencies `10000^(-i / (dim/2))`.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("timestep {t} outside [0, 1]")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("timestep embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let scaled = 1000.0 * t;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        data[2 * i] = (scaled * freq).sin();
        data[2 * i + 1] = (scaled * freq).cos();
    }
    Ok(Tensor::from_vec(data))
}

/// Embeddings of each `t` stacked into `[B, dim]`.
pub fn timestep_embed_batch(ts: &[f64], dim: usize) -> Result<Tensor> {
    let rows = ts.iter().map(|&t| timestep_embed(t, dim)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConditionSources {
    pub representation: bool,
    pub timestep: bool,
    pub aux: bool,
}

/// Fused per-sample condition `[B, embed_dim]` fed to every block.
#[derive(Clone, Copy, Debug)]
pub struct ConditionVector {
    pub values: Var,
    pub sources: ConditionSources,
}

/// Element-wise sum of the condition components that are present.
pub fn fuse_condition(tape: &mut Tape, t_emb: Var, rep: Option<Var>, aux: Option<Var>) -> Result<ConditionVector> {
    let mut values = t_emb;
    let shape = tape.shape(t_emb).to_vec();
    for part in [rep, aux].into_iter().flatten() {
        if tape.shape(part) != shape.as_slice() {
            return Err(Error::Invalid(format!(
                "condition component {:?} does not match timestep embedding {shape:?}",
                tape.shape(part)
            )));
        }
        values = tape.add(values, part)?;
    }
    Ok(ConditionVector {
        values,
        sources: ConditionSources {
            representation: rep.is_some(),
            timestep: true,
            aux: aux.is_some(),
        },
    })
}

/// Per-sample masking of the representation condition during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPolicy {
    pub mask_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { mask_prob: 0.5 }
    }
}

impl MaskPolicy {
    pub fn new(mask_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_prob) {
            return Err(Error::Config(format!("mask probability {mask_prob} outside [0, 1]")));
        }
        Ok(Self { mask_prob })
    }

    /// Independent Bernoulli draw per row; `true` means masked.
    pub fn draw<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Vec<bool> {
        (0..rows).map(|_| rng.random::<f64>() < self.mask_prob).collect()
    }
}

/// Replaces masked rows of `rep` (`[B, d]`) with zeros.
pub fn apply_dgs<R: Rng + ?Sized>(
    tape: &mut Tape,
    rep: Var,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<(Var, Vec<bool>)> {
    let rows = tape.shape(rep).first().copied().unwrap_or(0);
    let mask = policy.draw(rows, rng);
    let keep = Tensor::new([rows, 1], mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect())?;
    let keep = tape.constant(keep);
    let masked = tape.mul(rep, keep)?;
    Ok((masked, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embed(0.0, 16).unwrap();
        for pair in e.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn embedding_dim_and_range() {
        assert_eq!(timestep_embed(0.3, 64).unwrap().numel(), 64);
        assert!(timestep_embed(1.5, 8).is_err());
        assert!(timestep_embed(-0.1, 8).is_err());
        assert!(timestep_embed(0.5, 7).is_err());
    }

    #[test]
    fn embeddings_are_distinct_on_grid() {
        let embs: Vec<Tensor> = (0..100).map(|i| timestep_embed(i as f64 / 99.0, 64).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in 0..i {
                let d: f64 = embs[i].data().iter().zip(embs[j].data()).map(|(a, b)| (a - b) * (a - b)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0, "{min}");
    }

    #[test]
    fn fusion_without_rep_is_timestep() {
        let mut tape = Tape::new();
        let t = tape.constant(timestep_embed(0.4, 8).unwrap().reshape([1, 8]).unwrap());
        let zeros = tape.constant(Tensor::zeros([1, 8]));
        let f = fuse_condition(&mut tape, t, None, None).unwrap();
        assert_eq!(tape.value(f.values), tape.value(t));
        let g = fuse_condition(&mut tape, t, None, Some(zeros)).unwrap();
        assert_eq!(tape.value(g.values), tape.value(t));
        assert!(g.sources.aux && !g.sources.representation);
    }

    #[test]
    fn fusion_is_commutative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn([2, 6], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn([2, 6], 1.0, &mut rng));
        let c = tape.constant(Tensor::randn([2, 6], 1.0, &mut rng));
        let x = fuse_condition(&mut tape, a, Some(b), Some(c)).unwrap();
        let y = fuse_condition(&mut tape, c, Some(a), Some(b)).unwrap();
        let diff = tape.value(x.values).max_abs_diff(tape.value(y.values)).unwrap();
        assert!(diff < 1e-15);
    }

    #[test]
    fn fusion_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 6]));
        let b = tape.constant(Tensor::zeros([2, 4]));
        assert!(fuse_condition(&mut tape, a, Some(b), None).is_err());
    }

    #[test]
    fn dgs_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::randn([5, 3], 1.0, &mut rng));
        let (kept, m) = apply_dgs(&mut tape, r, &MaskPolicy::new(0.0).unwrap(), &mut rng).unwrap();
        assert!(m.iter().all(|&x| !x));
        assert_eq!(tape.value(kept), tape.value(r));
        let (gone, m) = apply_dgs(&mut tape, r, &MaskPolicy::new(1.0).unwrap(), &mut rng).unwrap();
        assert!(m.iter().all(|&x| x));
        assert!(tape.value(gone).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dgs_rate_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MaskPolicy::new(0.5).unwrap().draw(10_000, &mut rng);
        let frac = m.iter().filter(|&&x| x).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
        assert!(MaskPolicy::new(1.2).is_err());
    }
}
