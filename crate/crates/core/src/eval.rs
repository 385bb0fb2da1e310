//! Depth accuracy metrics and the unit-level experiments built on them:
//! ordered ablation, response correction and adversarial error attribution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bins::BinningScheme;
use crate::dissect::{ResponseTable, SelectivityReport};
use crate::error::{shape_err, Error, Result};
use crate::graph::Graph;
use crate::kernels;
use crate::net::Network;
use crate::scene::Sample;
use crate::tensor::{Scalar, Tensor};
use crate::train::{base_depth_loss, stack_batch};

/// Threshold of the first accuracy bucket.
pub const DELTA: f64 = 1.25;

const EVAL_BATCH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rms: f64,
    pub rel: f64,
    pub log10: f64,
    pub pixels: u64,
}

/// Running sums for [`DepthMetrics`] over any number of maps.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    within: [u64; 3],
    sq: f64,
    rel: f64,
    log10: f64,
    pixels: u64,
}

impl MetricsAccumulator {
    pub fn add<S: Scalar>(
        &mut self,
        pred: &Tensor<S>,
        gt: &Tensor<S>,
        valid: &Tensor<S>,
    ) -> Result<()> {
        if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
            return Err(shape_err(
                "depth_metrics",
                format!(
                    "prediction {:?}, ground truth {:?}, mask {:?}",
                    pred.shape().dims(),
                    gt.shape().dims(),
                    valid.shape().dims()
                ),
            ));
        }
        let thresholds = [DELTA, DELTA * DELTA, DELTA * DELTA * DELTA];
        for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
            if m == S::zero() {
                continue;
            }
            let (p, g) = (p.as_f64(), g.as_f64());
            if g.is_nan() || g <= 0.0 {
                return Err(Error::Config(format!(
                    "ground truth depth must be positive, got {g}"
                )));
            }
            let ratio = (p / g).max(g / p);
            for (c, t) in self.within.iter_mut().zip(thresholds) {
                if ratio < t {
                    *c += 1;
                }
            }
            self.sq += (p - g) * (p - g);
            self.rel += (p - g).abs() / g;
            self.log10 += (Float::log10(p) - Float::log10(g)).abs();
            self.pixels += 1;
        }
        Ok(())
    }

    /// Fold in another accumulator, e.g. one filled on a different thread.
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
        self.sq += other.sq;
        self.rel += other.rel;
        self.log10 += other.log10;
        self.pixels += other.pixels;
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.pixels == 0 {
            return Err(Error::EmptyMask);
        }
        let n = self.pixels as f64;
        Ok(DepthMetrics {
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            rms: Float::sqrt(self.sq / n),
            rel: self.rel / n,
            log10: self.log10 / n,
            pixels: self.pixels,
        })
    }
}

/// Metrics over the valid pixels of one prediction.
pub fn depth_metrics<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    valid: &Tensor<S>,
) -> Result<DepthMetrics> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, valid)?;
    acc.finish()
}

fn batches(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_BATCH)
        .map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Accuracy of `net` over `samples`.
pub fn evaluate(net: &Network<f32>, samples: &[Sample]) -> Result<DepthMetrics> {
    accumulate_metrics(net, samples)?.finish()
}

/// Unfinished metric sums of `net` over `samples`.
pub fn accumulate_metrics(net: &Network<f32>, samples: &[Sample]) -> Result<MetricsAccumulator> {
    let mut acc = MetricsAccumulator::default();
    for idx in batches(samples.len()) {
        let (image, depth, valid) = stack_batch(samples, &idx)?;
        let (pred, _) = net.forward(&image, &[])?;
        acc.add(&pred, &depth, &valid)?;
    }
    Ok(acc)
}

/// Dissect `layer` of `net` over `samples`.
pub fn dissect_network(
    net: &Network<f32>,
    samples: &[Sample],
    layer: &str,
    scheme: &BinningScheme,
) -> Result<ResponseTable> {
    let mut table = ResponseTable::new(layer, net.units(layer)?, scheme.n_bins());
    for idx in batches(samples.len()) {
        let (image, depth, valid) = stack_batch(samples, &idx)?;
        let (_, acts) = net.forward(&image, &[layer])?;
        table.accumulate(&acts[layer], &scheme.discretize(&depth, Some(&valid))?)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationOrder {
    /// Most selective units first.
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStep {
    pub ablated: usize,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub layer: alloc::string::String,
    pub order: AblationOrder,
    /// Units in ablation order.
    pub units: Vec<usize>,
    pub steps: Vec<AblationStep>,
}

impl AblationCurve {
    /// Trapezoidal area under δ₁ over the step index.
    pub fn area(&self) -> f64 {
        self.steps
            .windows(2)
            .map(|w| 0.5 * (w[0].delta1 + w[1].delta1))
            .sum()
    }
}

/// Zero units one at a time in selectivity order and record δ₁ after each step.
/// Step 0 is the intact network.
pub fn ablation_curve(
    net: &Network<f32>,
    samples: &[Sample],
    layer: &str,
    report: &SelectivityReport,
    order: AblationOrder,
) -> Result<AblationCurve> {
    let li = net.layer_index(layer)?;
    let k = net.units(layer)?;
    if report.layer != layer || report.units.len() != k {
        return Err(shape_err(
            "ablation_curve",
            format!("report does not cover layer `{layer}`"),
        ));
    }
    let units = report.order_by_ds(order == AblationOrder::Descending);
    let mut accs = vec![MetricsAccumulator::default(); k + 1];
    for idx in batches(samples.len()) {
        let (image, depth, valid) = stack_batch(samples, &idx)?;
        let (pred, trace) = net.trace(&image)?;
        accs[0].add(&pred, &depth, &valid)?;
        let mut act = trace[li].clone();
        for (t, &u) in units.iter().enumerate() {
            for n in 0..act.shape().n {
                act.plane_mut(n, u).fill(0.0);
            }
            let pred = net.resume(&image, &trace, li, &act)?;
            accs[t + 1].add(&pred, &depth, &valid)?;
        }
    }
    let steps = accs
        .iter()
        .enumerate()
        .map(|(t, a)| {
            Ok(AblationStep {
                ablated: t,
                delta1: a.finish()?.delta1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationCurve {
        layer: layer.into(),
        order,
        units,
        steps,
    })
}

/// Replace every pixel of every unit's map by the unit's average response at
/// that pixel's ground-truth bin. `bins` is the ground-truth bin map already
/// resized to the activation's resolution; bins the table never saw keep the
/// original value.
pub fn correct_activation(
    activation: &Tensor<f32>,
    bins: &[i32],
    table: &ResponseTable,
) -> Result<Tensor<f32>> {
    let s = activation.shape();
    if bins.len() != s.n * s.plane() || table.n_units != s.c {
        return Err(shape_err(
            "correct",
            format!(
                "activation {:?}, {} bin indices, table of {} units",
                s.dims(),
                bins.len(),
                table.n_units
            ),
        ));
    }
    let mut out = activation.clone();
    for n in 0..s.n {
        let bmap = &bins[n * s.plane()..(n + 1) * s.plane()];
        for k in 0..s.c {
            let resp = table.responses(k);
            for (v, &b) in out.plane_mut(n, k).iter_mut().zip(bmap) {
                if b >= 0 {
                    if let Some(r) = resp.get(b as usize).copied().flatten() {
                        *v = r as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub before: DepthMetrics,
    pub after: DepthMetrics,
}

/// Accuracy before and after correcting `layer` with a response table
/// (normally dissected on the training split).
pub fn correct_responses(
    net: &Network<f32>,
    samples: &[Sample],
    layer: &str,
    table: &ResponseTable,
    scheme: &BinningScheme,
) -> Result<CorrectionResult> {
    let li = net.layer_index(layer)?;
    if table.n_bins != scheme.n_bins() {
        return Err(shape_err(
            "correct",
            format!(
                "table has {} bins, scheme {}",
                table.n_bins,
                scheme.n_bins()
            ),
        ));
    }
    let (mut before, mut after) = (MetricsAccumulator::default(), MetricsAccumulator::default());
    for idx in batches(samples.len()) {
        let (image, depth, valid) = stack_batch(samples, &idx)?;
        let (pred, trace) = net.trace(&image)?;
        before.add(&pred, &depth, &valid)?;
        let act = &trace[li];
        let bins = scheme
            .discretize(&depth, Some(&valid))?
            .resize_nearest(act.shape().h, act.shape().w);
        let corrected = correct_activation(act, &bins.data, table)?;
        after.add(&net.resume(&image, &trace, li, &corrected)?, &depth, &valid)?;
    }
    Ok(CorrectionResult {
        before: before.finish()?,
        after: after.finish()?,
    })
}

/// One-step sign attack on the depth loss: `clip(x + ε·sign(∇ₓL), 0, 1)`.
pub fn fgsm_attack<S: Scalar>(
    net: &Network<S>,
    image: &Tensor<S>,
    gt: &Tensor<S>,
    valid: &Tensor<S>,
    epsilon: f64,
) -> Result<Tensor<S>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let mut g = Graph::new();
    let params = net.param_leaves(&mut g, false)?;
    let x = g.leaf(image.clone(), true)?;
    let out = net.forward_graph(&mut g, &params, x, Vec::new())?;
    let loss = base_depth_loss(&mut g, out.depth, gt, valid)?;
    g.backward(loss)?;
    let eps = S::of(epsilon);
    let data = match g.grad(x) {
        Some(grad) => image
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &d)| {
                let step = if d > S::zero() {
                    eps
                } else if d < S::zero() {
                    -eps
                } else {
                    S::zero()
                };
                let mut out = (v + step).max(S::zero()).min(S::one());
                // Rounding in `v + step` can overshoot the budget by an ulp.
                for _ in 0..4 {
                    if (out - v).abs() <= eps {
                        break;
                    }
                    out = out.step_toward(v);
                }
                out
            })
            .collect(),
        None => image.data().to_vec(),
    };
    Tensor::from_vec(image.shape(), data)
}

/// Errors of one predicted-depth bin traced back to the units assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionEntry {
    pub bin: usize,
    pub error_share: f64,
    pub units: Vec<usize>,
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    /// A unit assigned elsewhere, drawn at random, and its IoU with the same mask.
    pub control_unit: Option<usize>,
    pub control_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub error_pixels: u64,
    /// Share of erroneous pixels per predicted-depth bin.
    pub bin_shares: Vec<f64>,
    pub entries: Vec<AttributionEntry>,
}

/// Magnitude threshold on a unit's normalized map.
pub const ATTRIBUTION_THRESHOLD: f64 = 0.5;

/// Binary support of a unit map after resizing to `h×w` and normalizing its
/// magnitude to `[0, 1]`.
pub fn unit_support(act: &Tensor<f32>, unit: usize, h: usize, w: usize) -> Vec<bool> {
    let one = Tensor::from_vec(
        crate::tensor::Shape::new(1, 1, act.shape().h, act.shape().w),
        act.plane(0, unit).to_vec(),
    )
    .expect("plane sized");
    let up = kernels::bilinear(&one, h, w);
    let peak = up.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    up.data()
        .iter()
        .map(|v| peak > 0.0 && (v.abs() / peak) as f64 >= ATTRIBUTION_THRESHOLD)
        .collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Find where a (typically adversarial) prediction is wrong, group the errors by
/// predicted-depth bin and compare, for the `top_bins` largest groups, the
/// error region with the support of the units assigned to that bin.
#[allow(clippy::too_many_arguments)]
pub fn error_unit_attribution(
    net: &Network<f32>,
    image: &Tensor<f32>,
    gt: &Tensor<f32>,
    valid: &Tensor<f32>,
    layer: &str,
    assignments: &[usize],
    scheme: &BinningScheme,
    top_bins: usize,
    control_seed: u64,
) -> Result<AttributionReport> {
    let k = net.units(layer)?;
    if assignments.len() != k {
        return Err(shape_err(
            "attribution",
            format!("{} assignments for {k} units", assignments.len()),
        ));
    }
    if assignments.iter().any(|&d| d >= scheme.n_bins()) {
        return Err(shape_err(
            "attribution",
            "assignment outside the binning scheme",
        ));
    }
    if image.shape().n != 1 {
        return Err(shape_err("attribution", "expects a single sample"));
    }
    let (pred, acts) = net.forward(image, &[layer])?;
    let act = &acts[layer];
    let (h, w) = (gt.shape().h, gt.shape().w);
    let pred_bins = scheme.discretize(&pred, None)?;
    let errors: Vec<bool> = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(valid.data())
        .map(|((&p, &g), &m)| {
            let (p, g) = (p as f64, g as f64);
            m != 0.0 && g > 0.0 && (p / g).max(g / p) >= DELTA
        })
        .collect();
    let n_err = errors.iter().filter(|&&e| e).count();
    let mut counts = vec![0usize; scheme.n_bins()];
    for (&e, &b) in errors.iter().zip(&pred_bins.data) {
        if e {
            counts[b as usize] += 1;
        }
    }
    if n_err == 0 {
        return Ok(AttributionReport {
            error_pixels: 0,
            bin_shares: vec![0.0; scheme.n_bins()],
            entries: Vec::new(),
        });
    }
    let bin_shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n_err as f64).collect();
    let mut ranked: Vec<usize> = (0..scheme.n_bins()).filter(|&d| counts[d] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(control_seed);
    let mut entries = Vec::new();
    for &d in ranked.iter().take(top_bins) {
        let target: Vec<bool> = errors
            .iter()
            .zip(&pred_bins.data)
            .map(|(&e, &b)| e && b as usize == d)
            .collect();
        let units: Vec<usize> = (0..k).filter(|&u| assignments[u] == d).collect();
        let ious: Vec<f64> = units
            .iter()
            .map(|&u| iou(&unit_support(act, u, h, w), &target))
            .collect();
        let mean_iou = if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        };
        let others: Vec<usize> = (0..k).filter(|&u| assignments[u] != d).collect();
        let control_unit = (!others.is_empty()).then(|| others[rng.random_range(0..others.len())]);
        let control_iou = control_unit.map(|u| iou(&unit_support(act, u, h, w), &target));
        entries.push(AttributionEntry {
            bin: d,
            error_share: bin_shares[d],
            units,
            ious,
            mean_iou,
            control_unit,
            control_iou,
        });
    }
    Ok(AttributionReport {
        error_pixels: n_err as u64,
        bin_shares,
        entries,
    })
}
