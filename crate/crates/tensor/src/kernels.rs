//! Raw loops shared by the forward and backward passes.

use crate::error::{mismatch, Result};

/// `c = a·b + beta·c` for row/column-strided views of `a` (m×k) and `b` (k×n),
/// writing a contiguous m×n block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return mismatch(op, a, b),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to the trailing axes of `out`, zero on
/// broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = crate::tensor::strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out` in
/// row-major order.
pub(crate) fn for_each2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    if inner == 0 || outer == 0 {
        return;
    }
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Source index for each element of a permuted tensor.
pub(crate) fn permute_indices(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src = crate::tensor::strides(shape);
    let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
    let zeros = vec![0; out.len()];
    let mut map = Vec::with_capacity(out.iter().product());
    for_each2(&out, &perm_strides, &zeros, |_, i, _| map.push(i));
    map
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    pub fn col_width(&self) -> usize {
        self.c_in * self.kernel
    }

    /// Source offset within one batch item for column entry (l, ci, kk).
    fn source(&self, l: usize, kk: usize) -> Option<usize> {
        let pos = (l * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }

    /// Unfolds the input into a `[batch·out_len, c_in·kernel]` matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let w = self.col_width();
        let mut cols = vec![0.0; self.batch * self.out_len * w];
        for b in 0..self.batch {
            for l in 0..self.out_len {
                let row = &mut cols[(b * self.out_len + l) * w..][..w];
                for ci in 0..self.c_in {
                    let base = (b * self.c_in + ci) * self.len;
                    for kk in 0..self.kernel {
                        if let Some(p) = self.source(l, kk) {
                            row[ci * self.kernel + kk] = x[base + p];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`].
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let w = self.col_width();
        for b in 0..self.batch {
            for l in 0..self.out_len {
                let row = &cols[(b * self.out_len + l) * w..][..w];
                for ci in 0..self.c_in {
                    let base = (b * self.c_in + ci) * self.len;
                    for kk in 0..self.kernel {
                        if let Some(p) = self.source(l, kk) {
                            dx[base + p] += row[ci * self.kernel + kk];
                        }
                    }
                }
            }
        }
    }
}

/// Compensated (Neumaier) sum; keeps full-tensor reductions accurate enough
/// for finite-difference checks on large inputs.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, accurate to a few ulps in absolute terms.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
