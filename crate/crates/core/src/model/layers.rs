use flowfm_tensor::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Weight standard deviation for truncated-normal initialization.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
}

fn weight<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::TruncNormal => Tensor::trunc_normal(shape.to_vec(), INIT_STD, rng),
        Init::Zeros => Tensor::zeros(shape.to_vec()),
    }
}

/// `y = x·W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), weight(&[fan_in, fan_out], init, rng));
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => tape.add(y, p[b])?,
            None => y,
        })
    }
}

/// Layer norm with learned scale and shift.
#[derive(Clone, Debug)]
pub struct AffineNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl AffineNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.weight"), Tensor::full([dim], 1.0)),
            beta: ps.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let s = tape.mul(n, p[self.gamma])?;
        Ok(tape.add(s, p[self.beta])?)
    }
}

/// Multi-head self-attention over `[B, T, D]` tokens. The query/key/value
/// projection has no bias: a key bias shifts every score in a row equally and
/// cancels in the softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, false, Init::TruncNormal, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, true, Init::TruncNormal, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let [b, t, d] = *tape.shape(x) else {
            unreachable!("attention input is [B, T, D]")
        };
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(tape, p, x)?;
        // [B, T, 3, H, dh] -> [3, B, H, T, dh]
        let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, b * h, t, dh])?;
        let q = tape.narrow(qkv, 0, 0, 1)?;
        let k = tape.narrow(qkv, 0, 1, 1)?;
        let v = tape.narrow(qkv, 0, 2, 1)?;
        let q = tape.reshape(q, &[b * h, t, dh])?;
        let k = tape.reshape(k, &[b * h, t, dh])?;
        let v = tape.reshape(v, &[b * h, t, dh])?;
        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let out = tape.matmul(attn, v)?;
        let out = tape.reshape(out, &[b, h, t, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, d])?;
        self.proj.forward(tape, p, out)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true, Init::TruncNormal, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true, Init::TruncNormal, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Strided 1-D convolution turning `[B, C, L]` into `[B, L / P, D]` tokens.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    w: ParamId,
    b: ParamId,
    patch: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: ps.add(format!("{name}.weight"), weight(&[dim, channels, patch], Init::TruncNormal, rng)),
            b: ps.add(format!("{name}.bias"), Tensor::zeros([dim])),
            patch,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let len = tape.shape(x).last().copied().unwrap_or(0);
        if len % self.patch != 0 {
            return Err(crate::error::Error::Invalid(format!(
                "signal length {len} is not divisible by patch size {}",
                self.patch
            )));
        }
        let y = tape.conv1d(x, p[self.w], Some(p[self.b]), self.patch, 0)?;
        Ok(tape.transpose(y, 1, 2)?)
    }
}

/// Fixed sine/cosine position table `[tokens, dim]`.
pub fn sincos_positions(tokens: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; tokens * dim];
    for pos in 0..tokens {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::new([tokens, dim], data).expect("table extents")
}
