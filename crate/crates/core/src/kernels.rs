//! Raw compute kernels shared by the graph ops and the inference paths.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        if weight.h != weight.w {
            return Err(shape_err("conv2d", "kernel must be square"));
        }
        if weight.c != input.c {
            return Err(shape_err(
                "conv2d",
                alloc::format!(
                    "kernel expects {} input channels, input has {}",
                    weight.c,
                    input.c
                ),
            ));
        }
        let k = weight.h;
        if k == 0 || input.h + 2 * pad < k || input.w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                alloc::format!(
                    "kernel {k} does not fit padded input {}x{} (pad {pad})",
                    input.h,
                    input.w
                ),
            ));
        }
        Ok(ConvGeom {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_c: weight.n,
            k,
            stride,
            pad,
            out_h: (input.h + 2 * pad - k) / stride + 1,
            out_w: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    #[inline]
    pub fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    #[inline]
    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one sample (`in_c × in_h × in_w`) into `patch × out_plane` columns.
pub fn im2col<S: Scalar>(g: &ConvGeom, input: &[S], cols: &mut [S]) {
    let p = g.out_plane();
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input-shaped buffer.
pub fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], grad_input: &mut [S]) {
    let p = g.out_plane();
    for c in 0..g.in_c {
        let plane = &mut grad_input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols`, the unfolded
/// input of every sample (needed for the weight gradient).
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor<S>, Vec<S>)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape().numel() != g.out_c {
            return Err(shape_err(
                "conv2d",
                alloc::format!(
                    "bias has {} values for {} filters",
                    b.shape().numel(),
                    g.out_c
                ),
            ));
        }
    }
    let n = input.shape().n;
    let out_shape = Shape::new(n, g.out_c, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let patch = g.patch();
    let p = g.out_plane();
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut saved = if keep_cols && !g.is_pointwise() {
        vec![S::zero(); n * patch * p]
    } else {
        Vec::new()
    };
    let mut scratch = if !keep_cols && !g.is_pointwise() {
        vec![S::zero(); patch * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let cols: &[S] = if g.is_pointwise() {
            x
        } else if keep_cols {
            let buf = &mut saved[s * patch * p..(s + 1) * patch * p];
            im2col(&g, x, buf);
            buf
        } else {
            im2col(&g, x, &mut scratch);
            &scratch
        };
        let y = &mut out.data_mut()[s * g.out_c * p..(s + 1) * g.out_c * p];
        if let Some(b) = bias {
            for (k, row) in y.chunks_exact_mut(p).enumerate() {
                row.fill(b.data()[k]);
            }
        }
        S::gemm(
            g.out_c,
            patch,
            p,
            weight.data(),
            (patch as isize, 1),
            cols,
            (p as isize, 1),
            y,
            bias.is_some(),
        );
    }
    Ok((out, saved))
}

/// Per-axis interpolation taps: `(low index, high index, weight of high)`.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            if in_len == out_len {
                return (d, d, 0.0);
            }
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = Float::floor(src) as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Nearest source index under the half-pixel mapping, ties rounded to the lower index.
fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let idx = Float::ceil(src - 0.5);
            idx.clamp(0.0, (in_len - 1) as f64) as usize
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping. Interpolates
/// along x first, then along y.
pub fn bilinear<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let s = input.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return input.clone();
    }
    let ty = linear_taps(s.h, out_h);
    let tx = linear_taps(s.w, out_w);
    let fxs: Vec<S> = tx.iter().map(|t| S::of(t.2)).collect();
    let mut rows = vec![S::zero(); s.h * out_w];
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for (iy, row) in rows.chunks_exact_mut(out_w).enumerate() {
                let r = &src[iy * s.w..(iy + 1) * s.w];
                for ((v, &(x0, x1, _)), &fx) in row.iter_mut().zip(&tx).zip(&fxs) {
                    *v = r[x0] + (r[x1] - r[x0]) * fx;
                }
            }
            let dst = out.plane_mut(n, c);
            for (line, &(y0, y1, fy)) in dst.chunks_exact_mut(out_w).zip(&ty) {
                let fy = S::of(fy);
                let top = &rows[y0 * out_w..(y0 + 1) * out_w];
                let bot = &rows[y1 * out_w..(y1 + 1) * out_w];
                for ((v, &a), &b) in line.iter_mut().zip(top).zip(bot) {
                    *v = a + (b - a) * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear`].
pub fn bilinear_backward<S: Scalar>(grad_out: &Tensor<S>, in_h: usize, in_w: usize) -> Tensor<S> {
    let s = grad_out.shape();
    if (s.h, s.w) == (in_h, in_w) {
        return grad_out.clone();
    }
    let ty = linear_taps(in_h, s.h);
    let tx = linear_taps(in_w, s.w);
    let fxs: Vec<S> = tx.iter().map(|t| S::of(t.2)).collect();
    let one = S::one();
    let mut rows = vec![S::zero(); in_h * s.w];
    let mut gin = Tensor::zeros(Shape::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            rows.fill(S::zero());
            let go = grad_out.plane(n, c);
            for (line, &(y0, y1, fy)) in go.chunks_exact(s.w).zip(&ty) {
                let fy = S::of(fy);
                let top = &mut rows[y0 * s.w..(y0 + 1) * s.w];
                for (t, &g) in top.iter_mut().zip(line) {
                    *t = *t + g * (one - fy);
                }
                let bot = &mut rows[y1 * s.w..(y1 + 1) * s.w];
                for (b, &g) in bot.iter_mut().zip(line) {
                    *b = *b + g * fy;
                }
            }
            let gi = gin.plane_mut(n, c);
            for (iy, row) in rows.chunks_exact(s.w).enumerate() {
                let dst = &mut gi[iy * in_w..(iy + 1) * in_w];
                for ((&g, &(x0, x1, _)), &fx) in row.iter().zip(&tx).zip(&fxs) {
                    dst[x0] = dst[x0] + g * (one - fx);
                    dst[x1] = dst[x1] + g * fx;
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour resize with the same coordinate mapping as [`bilinear`].
pub fn nearest<T: Copy>(
    input: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = nearest_taps(in_h, out_h);
    let tx = nearest_taps(in_w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &input[p * in_h * in_w..(p + 1) * in_h * in_w];
        for &y in &ty {
            for &x in &tx {
                out.push(src[y * in_w + x]);
            }
        }
    }
    out
}

/// [`nearest`] over a whole tensor.
pub fn nearest_resize<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let s = input.shape();
    let data = nearest(input.data(), s.n * s.c, s.h, s.w, out_h, out_w);
    Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), data).expect("sized by construction")
}
