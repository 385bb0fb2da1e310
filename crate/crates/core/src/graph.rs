//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! A [`Graph`] records every op in creation order, so the node list is already
//! topologically sorted; [`Graph::backward`] walks it once in reverse. Values are
//! immutable once recorded. Leaves flagged `requires_grad` accumulate their
//! gradient across `backward` calls until [`Graph::zero_grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, col2im, ConvGeom};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<S>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Abs(Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Clamp {
        input: Var,
        lo: S,
        hi: S,
    },
    Bilinear(Var),
    Reduce {
        input: Var,
        kind: Reduction,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    BinnedMean {
        input: Var,
        bins: Vec<i32>,
        counts: Vec<u64>,
    },
    Contrast {
        input: Var,
        present: Vec<bool>,
        targets: Vec<Option<usize>>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-unit selection for [`Graph::contrast`].
pub type ContrastTargets = Vec<Option<usize>>;

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        let value = value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let keep = self.rg(weight);
        let (out, cols) = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            keep,
        )?;
        let out = out.check_finite("conv2d")?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa.dims(), sb.dims())));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)?.check_finite(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = S::of(factor);
        let out = self.value(a).map(|x| x * f).check_finite("scale")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, f), rg))
    }

    fn unary(&mut self, a: Var, op: Op<S>, name: &'static str, f: impl Fn(S) -> S) -> Result<Var> {
        let out = self.value(a).map(f).check_finite(name)?;
        let rg = self.rg(a);
        Ok(self.push(out, op, rg))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), "abs", |x| x.abs())
    }

    /// `x` for `x ≥ 0`, `eˣ − 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Elu(a), "elu", elu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(S::zero()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", |x| x.exp())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (S::of(lo), S::of(hi));
        self.unary(a, Op::Clamp { input: a, lo, hi }, "clamp", |x| {
            x.max(lo).min(hi)
        })
    }

    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(shape_err(
                "bilinear_resize",
                "output size must be at least 1x1",
            ));
        }
        let out = kernels::bilinear(self.value(a), out_h, out_w).check_finite("bilinear_resize")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Bilinear(a), rg))
    }

    /// Sum or mean over all elements, optionally restricted to a binary mask
    /// (nonzero entries are selected).
    pub fn reduce(&mut self, a: Var, kind: Reduction, mask: Option<&Tensor<S>>) -> Result<Var> {
        let t = self.value(a);
        let mask = match mask {
            Some(m) => {
                if m.shape() != t.shape() {
                    return Err(shape_err(
                        "reduce",
                        format!(
                            "mask {:?} vs input {:?}",
                            m.shape().dims(),
                            t.shape().dims()
                        ),
                    ));
                }
                Some(m.data().iter().map(|&v| v != S::zero()).collect::<Vec<_>>())
            }
            None => None,
        };
        let (sum, count) = match &mask {
            Some(m) => t
                .data()
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .fold((0.0f64, 0usize), |(s, c), (v, _)| (s + v.as_f64(), c + 1)),
            None => (t.sum_f64(), t.data().len()),
        };
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let v = match kind {
            Reduction::Sum => sum,
            Reduction::Mean => sum / count as f64,
        };
        let out = Tensor::scalar(S::of(v)).check_finite("reduce")?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Reduce {
                input: a,
                kind,
                mask,
                count,
            },
            rg,
        ))
    }

    /// Per-(unit, bin) mean of `a` (shape `N×K×H×W`) over the pixels whose bin
    /// index equals that bin. `bins` holds `N·H·W` indices, negative for pixels to
    /// skip. Output has shape `1×1×K×n_bins`; bins without pixels read 0. Also
    /// returns the per-bin pixel counts.
    pub fn binned_mean(&mut self, a: Var, bins: &[i32], n_bins: usize) -> Result<(Var, Vec<u64>)> {
        let t = self.value(a);
        let s = t.shape();
        if bins.len() != s.n * s.plane() {
            return Err(shape_err(
                "binned_mean",
                format!(
                    "{} bin indices for {}x{}x{} pixels",
                    bins.len(),
                    s.n,
                    s.h,
                    s.w
                ),
            ));
        }
        let mut counts = vec![0u64; n_bins];
        for &b in bins {
            if b >= 0 {
                let b = b as usize;
                if b >= n_bins {
                    return Err(shape_err(
                        "binned_mean",
                        format!("bin {b} out of range {n_bins}"),
                    ));
                }
                counts[b] += 1;
            }
        }
        let mut sums = vec![0.0f64; s.c * n_bins];
        for n in 0..s.n {
            let bmap = &bins[n * s.plane()..(n + 1) * s.plane()];
            for k in 0..s.c {
                let row = &mut sums[k * n_bins..(k + 1) * n_bins];
                for (&v, &b) in t.plane(n, k).iter().zip(bmap) {
                    if b >= 0 {
                        row[b as usize] += v.as_f64();
                    }
                }
            }
        }
        let data = sums
            .iter()
            .enumerate()
            .map(|(i, &sum)| {
                let c = counts[i % n_bins];
                if c == 0 {
                    S::zero()
                } else {
                    S::of(sum / c as f64)
                }
            })
            .collect();
        let out =
            Tensor::from_vec(Shape::new(1, 1, s.c, n_bins), data)?.check_finite("binned_mean")?;
        let rg = self.rg(a);
        let v = self.push(
            out,
            Op::BinnedMean {
                input: a,
                bins: bins.to_vec(),
                counts: counts.clone(),
            },
            rg,
        );
        Ok((v, counts))
    }

    /// Normalized contrast per unit over a `1×1×K×B` table of magnitudes:
    /// `(r_t − m)/(r_t + m)` where `r_t` is the entry at the unit's target bin and
    /// `m` the mean over the other present bins. Units without a target, or whose
    /// target is absent, yield 0 and receive no gradient. Output is `1×1×1×K`.
    pub fn contrast(&mut self, a: Var, present: &[bool], targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        let (k_units, n_bins) = (s.h, s.w);
        if s.n != 1 || s.c != 1 || present.len() != n_bins || targets.len() != k_units {
            return Err(shape_err(
                "contrast",
                format!(
                    "table {:?} with {} presence flags and {} targets",
                    s.dims(),
                    present.len(),
                    targets.len()
                ),
            ));
        }
        let n_present = present.iter().filter(|&&p| p).count();
        if n_present < 2 {
            return Err(Error::InsufficientBins(n_present));
        }
        let out: Vec<S> = (0..k_units)
            .map(|k| {
                let row = &t.data()[k * n_bins..(k + 1) * n_bins];
                match targets[k] {
                    Some(d) if d < n_bins && present[d] => {
                        let (r, m) = target_and_rest(row, present, d, n_present);
                        let den = r + m;
                        if den == 0.0 {
                            S::zero()
                        } else {
                            S::of((r - m) / den)
                        }
                    }
                    _ => S::zero(),
                }
            })
            .collect();
        let out = Tensor::from_vec(Shape::new(1, 1, 1, k_units), out)?.check_finite("contrast")?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Contrast {
                input: a,
                present: present.to_vec(),
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagate from a scalar node, accumulating into every
    /// `requires_grad` leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(Error::NotScalar(shape.dims()));
        }
        let mut local: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(shape, S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                accumulate(&mut self.grads[i], g);
                continue;
            }
            self.backprop_node(i, &g, &mut local)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<S>,
        local: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let send = |v: Var, t: Tensor<S>, local: &mut [Option<Tensor<S>>]| {
            if self.rg(v) {
                accumulate(&mut local[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let geom = ConvGeom::new(x.shape(), w.shape(), *stride, *pad)?;
                let n = x.shape().n;
                let p = geom.out_plane();
                let patch = geom.patch();
                let kc = geom.out_c;
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut gb = vec![S::zero(); kc];
                        for s in 0..n {
                            for (k, acc) in gb.iter_mut().enumerate() {
                                let row = &g.data()[(s * kc + k) * p..(s * kc + k + 1) * p];
                                *acc = *acc + sum_s(row);
                            }
                        }
                        send(*b, Tensor::from_vec(self.value(*b).shape(), gb)?, local);
                    }
                }
                if self.rg(*weight) {
                    let mut gw = vec![S::zero(); kc * patch];
                    let in_len = geom.in_c * geom.in_h * geom.in_w;
                    for s in 0..n {
                        let go = &g.data()[s * kc * p..(s + 1) * kc * p];
                        let c: &[S] = if cols.is_empty() {
                            &x.data()[s * in_len..(s + 1) * in_len]
                        } else {
                            &cols[s * patch * p..(s + 1) * patch * p]
                        };
                        // gw (kc×patch) += go (kc×p) · cᵀ (p×patch)
                        S::gemm(
                            kc,
                            p,
                            patch,
                            go,
                            (p as isize, 1),
                            c,
                            (1, p as isize),
                            &mut gw,
                            true,
                        );
                    }
                    send(*weight, Tensor::from_vec(w.shape(), gw)?, local);
                }
                if self.rg(*input) {
                    let mut gx = Tensor::zeros(x.shape());
                    let in_len = geom.in_c * geom.in_h * geom.in_w;
                    let pointwise = geom.k == 1 && geom.stride == 1 && geom.pad == 0;
                    let mut dcols = vec![S::zero(); patch * p];
                    for s in 0..n {
                        let go = &g.data()[s * kc * p..(s + 1) * kc * p];
                        let dst = &mut gx.data_mut()[s * in_len..(s + 1) * in_len];
                        // dcols (patch×p) = wᵀ (patch×kc) · go (kc×p)
                        if pointwise {
                            S::gemm(
                                patch,
                                kc,
                                p,
                                w.data(),
                                (1, patch as isize),
                                go,
                                (p as isize, 1),
                                dst,
                                false,
                            );
                        } else {
                            S::gemm(
                                patch,
                                kc,
                                p,
                                w.data(),
                                (1, patch as isize),
                                go,
                                (p as isize, 1),
                                &mut dcols,
                                false,
                            );
                            col2im(&geom, &dcols, dst);
                        }
                    }
                    send(*input, gx, local);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), local);
                send(*b, g.clone(), local);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), local);
                send(*b, g.map(|v| -v), local);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, hadamard(g, tb), local);
                send(*b, hadamard(g, ta), local);
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * *f), local),
            Op::Abs(a) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| gv * sign(xv)), local);
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    zip_map(
                        g,
                        x,
                        |gv, xv| if xv >= S::zero() { gv } else { gv * xv.exp() },
                    ),
                    local,
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    zip_map(g, x, |gv, xv| if xv > S::zero() { gv } else { S::zero() }),
                    local,
                );
            }
            Op::Exp(a) => send(*a, hadamard(g, &node.value), local),
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                send(
                    *input,
                    zip_map(
                        g,
                        x,
                        |gv, xv| if xv < *lo || xv > *hi { S::zero() } else { gv },
                    ),
                    local,
                );
            }
            Op::Bilinear(a) => {
                let s = self.value(*a).shape();
                send(*a, kernels::bilinear_backward(g, s.h, s.w), local);
            }
            Op::Reduce {
                input,
                kind,
                mask,
                count,
            } => {
                let s = self.value(*input).shape();
                let scale = match kind {
                    Reduction::Sum => g.data()[0],
                    Reduction::Mean => g.data()[0] / S::of(*count as f64),
                };
                let gi = match mask {
                    Some(m) => {
                        let data = m
                            .iter()
                            .map(|&k| if k { scale } else { S::zero() })
                            .collect();
                        Tensor::from_vec(s, data)?
                    }
                    None => Tensor::full(s, scale),
                };
                send(*input, gi, local);
            }
            Op::BinnedMean {
                input,
                bins,
                counts,
            } => {
                let s = self.value(*input).shape();
                let n_bins = counts.len();
                let per_bin: Vec<S> = (0..s.c * n_bins)
                    .map(|i| {
                        let c = counts[i % n_bins];
                        if c == 0 {
                            S::zero()
                        } else {
                            g.data()[i] / S::of(c as f64)
                        }
                    })
                    .collect();
                let mut gi = Tensor::zeros(s);
                for n in 0..s.n {
                    let bmap = &bins[n * s.plane()..(n + 1) * s.plane()];
                    for k in 0..s.c {
                        let row = &per_bin[k * n_bins..(k + 1) * n_bins];
                        for (dst, &b) in gi.plane_mut(n, k).iter_mut().zip(bmap) {
                            if b >= 0 {
                                *dst = row[b as usize];
                            }
                        }
                    }
                }
                send(*input, gi, local);
            }
            Op::Contrast {
                input,
                present,
                targets,
            } => {
                let t = self.value(*input);
                let n_bins = present.len();
                let n_present = present.iter().filter(|&&p| p).count();
                let mut gi = Tensor::zeros(t.shape());
                for (k, target) in targets.iter().enumerate() {
                    let Some(d) = *target else { continue };
                    if d >= n_bins || !present[d] {
                        continue;
                    }
                    let row = &t.data()[k * n_bins..(k + 1) * n_bins];
                    let (r, m) = target_and_rest(row, present, d, n_present);
                    let den = r + m;
                    if den == 0.0 {
                        continue;
                    }
                    let gk = g.data()[k].as_f64();
                    let d_r = 2.0 * m / (den * den);
                    let d_m = -2.0 * r / (den * den) / (n_present - 1) as f64;
                    let dst = &mut gi.data_mut()[k * n_bins..(k + 1) * n_bins];
                    for (b, v) in dst.iter_mut().enumerate() {
                        if !present[b] {
                            continue;
                        }
                        *v = S::of(gk * if b == d { d_r } else { d_m });
                    }
                }
                send(*input, gi, local);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn elu<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        x
    } else {
        x.exp() - S::one()
    }
}

fn target_and_rest<S: Scalar>(
    row: &[S],
    present: &[bool],
    d: usize,
    n_present: usize,
) -> (f64, f64) {
    let r = row[d].as_f64();
    let rest: f64 = row
        .iter()
        .zip(present)
        .enumerate()
        .filter(|&(b, (_, &p))| p && b != d)
        .map(|(_, (v, _))| v.as_f64())
        .sum();
    (r, rest / (n_present - 1) as f64)
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn sum_s<S: Scalar>(xs: &[S]) -> S {
    xs.iter().fold(S::zero(), |a, &b| a + b)
}

fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}
