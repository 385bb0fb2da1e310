//! Training with the plain depth loss, direct selectivity regularization, or
//! depth-to-unit assignment.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bins::{BinIndexMap, BinningKind, BinningScheme, DEFAULT_BINS};
use crate::dissect::{build_report, ResponseTable};
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::net::Network;
use crate::scene::Sample;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Regularize,
    Assign,
}

impl core::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "regularize" => Ok(TrainMode::Regularize),
            "assign" => Ok(TrainMode::Assign),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    /// Layers the interpretability term applies to.
    pub layers: Vec<String>,
    pub n_bins: usize,
    pub binning: BinningKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Assign,
            lambda: 0.1,
            layers: vec!["mff".to_string(), "d".to_string()],
            n_bins: DEFAULT_BINS,
            binning: BinningKind::Sid,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.n_bins < 2 {
            return bad(format!("need at least 2 bins, got {}", self.n_bins));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.mode != TrainMode::Baseline && self.layers.is_empty() {
            return bad("interpretability modes need at least one layer".into());
        }
        Ok(())
    }
}

/// Bin assigned to each of `units` units: `floor(k · n'/units)` with
/// `n' = min(n_bins, units)`, which is `floor(k / (units/n'))` whenever
/// `units` is a multiple of `n'`.
pub fn assign_bins(units: usize, n_bins: usize) -> Vec<usize> {
    let eff = n_bins.min(units).max(1);
    (0..units).map(|k| k * eff / units).collect()
}

/// Bins actually used for a layer with `units` units.
pub fn effective_bins(units: usize, n_bins: usize) -> usize {
    n_bins.min(units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub layer: String,
    pub effective_bins: usize,
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTable {
    pub rows: Vec<AssignmentRow>,
}

impl AssignmentTable {
    pub fn for_network<S: Scalar>(
        net: &Network<S>,
        layers: &[String],
        n_bins: usize,
    ) -> Result<Self> {
        let rows = layers
            .iter()
            .map(|l| {
                let k = net.units(l)?;
                Ok(AssignmentRow {
                    layer: l.clone(),
                    effective_bins: effective_bins(k, n_bins),
                    bins: assign_bins(k, n_bins),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AssignmentTable { rows })
    }

    pub fn get(&self, layer: &str) -> Option<&AssignmentRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

/// Per-batch average responses of one layer.
#[derive(Debug, Clone)]
pub struct BatchResponses {
    /// `1×1×K×B` table of per-bin means.
    pub table: Var,
    pub present: Vec<bool>,
}

/// Average responses over the current batch only: the activation is resized
/// to the bin map's resolution and averaged per bin. Differentiable.
pub fn batch_responses<S: Scalar>(
    g: &mut Graph<S>,
    activation: Var,
    bins: &BinIndexMap,
) -> Result<BatchResponses> {
    let up = g.bilinear_resize(activation, bins.h, bins.w)?;
    let (table, counts) = g.binned_mean(up, &bins.data, bins.n_bins)?;
    Ok(BatchResponses {
        table,
        present: counts.iter().map(|&c| c > 0).collect(),
    })
}

fn mean_term<S: Scalar>(g: &mut Graph<S>, terms: Var, eligible: &[bool]) -> Result<Option<Var>> {
    if !eligible.iter().any(|&e| e) {
        return Ok(None);
    }
    let mask = Tensor::from_vec(
        g.value(terms).shape(),
        eligible
            .iter()
            .map(|&e| if e { S::one() } else { S::zero() })
            .collect(),
    )?;
    g.reduce(terms, Reduction::Mean, Some(&mask)).map(Some)
}

fn combine_layers<S: Scalar>(
    g: &mut Graph<S>,
    per_layer: Vec<Option<Var>>,
    lambda: f64,
) -> Result<Option<Var>> {
    let n = per_layer.len();
    let mut acc: Option<Var> = None;
    for v in per_layer.into_iter().flatten() {
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    match acc {
        None => Ok(None),
        Some(a) => g.scale(a, -lambda / n as f64).map(Some),
    }
}

/// Direct selectivity regularization: `−λ` times the mean over layers of the
/// mean batch-wise selectivity, with the maximum taken over bins present in
/// the batch. Layers with fewer than two present bins contribute 0.
pub fn reg_loss<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[BatchResponses],
    lambda: f64,
) -> Result<Option<Var>> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for r in layers {
        if r.present.iter().filter(|&&p| p).count() < 2 {
            per_layer.push(None);
            continue;
        }
        let mag = g.abs(r.table)?;
        let t = g.value(mag);
        let (k, nb) = (t.shape().h, t.shape().w);
        let targets: Vec<Option<usize>> = (0..k)
            .map(|u| {
                let row = &t.data()[u * nb..(u + 1) * nb];
                let mut best: Option<usize> = None;
                for (d, &v) in row.iter().enumerate() {
                    if r.present[d] && best.is_none_or(|b| v > row[b]) {
                        best = Some(d);
                    }
                }
                best
            })
            .collect();
        let terms = g.contrast(mag, &r.present, &targets)?;
        per_layer.push(mean_term(g, terms, &vec![true; k])?);
    }
    combine_layers(g, per_layer, lambda)
}

/// Assignment loss: each unit's contrast is taken at its assigned bin. Units
/// whose bin is absent from the batch are left out; "other" bins are the
/// present ones.
pub fn assign_loss<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[(BatchResponses, &[usize])],
    lambda: f64,
) -> Result<Option<Var>> {
    let mut per_layer = Vec::with_capacity(layers.len());
    for (r, assigned) in layers {
        let n_present = r.present.iter().filter(|&&p| p).count();
        let targets: Vec<Option<usize>> = assigned
            .iter()
            .map(|&d| (d < r.present.len() && r.present[d]).then_some(d))
            .collect();
        let eligible: Vec<bool> = targets.iter().map(Option::is_some).collect();
        if n_present < 2 || !eligible.iter().any(|&e| e) {
            per_layer.push(None);
            continue;
        }
        let mag = g.abs(r.table)?;
        let terms = g.contrast(mag, &r.present, &targets)?;
        per_layer.push(mean_term(g, terms, &eligible)?);
    }
    combine_layers(g, per_layer, lambda)
}

/// Mean absolute error over valid pixels.
pub fn base_depth_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    gt: &Tensor<S>,
    valid: &Tensor<S>,
) -> Result<Var> {
    let target = g.leaf(gt.clone(), false)?;
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    g.reduce(abs, Reduction::Mean, Some(valid))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, params: &[Tensor<S>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .iter()
                .map(|p| vec![S::zero(); p.data().len()])
                .collect(),
            v: params
                .iter()
                .map(|p| vec![S::zero(); p.data().len()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<Tensor<S>>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Float::powi(self.beta1, t);
        let c2 = 1.0 - Float::powi(self.beta2, t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (ob1, ob2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let lr = S::of(self.lr / c1);
        let c2s = S::of(c2);
        let eps = S::of(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            for ((w, &gv), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
            {
                *m = b1 * *m + ob1 * gv;
                *v = b2 * *v + ob2 * gv * gv;
                *w = *w - lr * *m / ((*v / c2s).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub base_loss: f64,
    pub lambda_term: f64,
    /// Mean selectivity over the interpretability layers, dissected from the
    /// activations seen during the epoch.
    pub train_mean_ds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub assignments: AssignmentTable,
}

/// Stack samples `idx` into image, depth and mask batches.
pub fn stack_batch(
    samples: &[Sample],
    idx: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
    let deps: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].depth).collect();
    let vals: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].valid).collect();
    Ok((
        Tensor::stack(&imgs)?,
        Tensor::stack(&deps)?,
        Tensor::stack(&vals)?,
    ))
}

/// Everything one optimisation step needs besides the network.
pub struct StepInput<'a> {
    pub image: &'a Tensor<f32>,
    pub depth: &'a Tensor<f32>,
    pub valid: &'a Tensor<f32>,
    /// Bin maps per interpretability layer, same order as the config's layers.
    pub bins: &'a [BinIndexMap],
}

/// Losses of one step, plus the recorded graph and handles into it.
pub struct StepLoss<S: Scalar> {
    pub graph: Graph<S>,
    pub params: Vec<Var>,
    pub total: Var,
    pub base: f64,
    pub lambda_term: f64,
    /// Output of every network layer.
    pub layers: Vec<Var>,
}

/// Build the full training objective for one batch.
pub fn step_loss<S: Scalar>(
    net: &Network<S>,
    config: &TrainConfig,
    assignments: &AssignmentTable,
    input: &StepInput<'_>,
) -> Result<StepLoss<S>> {
    let mut g = Graph::new();
    let params = net.param_leaves(&mut g, true)?;
    let x = g.leaf(input.image.cast(), false)?;
    let out = net.forward_graph(&mut g, &params, x, Vec::new())?;
    let base = base_depth_loss(&mut g, out.depth, &input.depth.cast(), &input.valid.cast())?;
    let base_value = g.value(base).data()[0].as_f64();
    let term = match config.mode {
        TrainMode::Baseline => None,
        TrainMode::Regularize | TrainMode::Assign => {
            let mut resp = Vec::with_capacity(config.layers.len());
            for (l, bins) in config.layers.iter().zip(input.bins) {
                let act = out.layers[net.layer_index(l)?];
                resp.push(batch_responses(&mut g, act, bins)?);
            }
            if config.mode == TrainMode::Regularize {
                reg_loss(&mut g, &resp, config.lambda)?
            } else {
                let rows = config
                    .layers
                    .iter()
                    .map(|l| {
                        assignments
                            .get(l)
                            .map(|r| r.bins.as_slice())
                            .ok_or_else(|| Error::UnknownLayer(l.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pairs: Vec<(BatchResponses, &[usize])> = resp.into_iter().zip(rows).collect();
                assign_loss(&mut g, &pairs, config.lambda)?
            }
        }
    };
    let (total, lambda_term) = match term {
        Some(t) => {
            let v = g.value(t).data()[0].as_f64();
            (g.add(base, t)?, v)
        }
        None => (base, 0.0),
    };
    Ok(StepLoss {
        graph: g,
        params,
        total,
        base: base_value,
        lambda_term,
        layers: out.layers,
    })
}

/// Per-layer binning schemes (bin count reduced to the unit count where needed).
pub fn layer_schemes<S: Scalar>(
    net: &Network<S>,
    config: &TrainConfig,
    d_min: f64,
    d_max: f64,
) -> Result<Vec<BinningScheme>> {
    config
        .layers
        .iter()
        .map(|l| {
            let k = net.units(l)?;
            BinningScheme::new(
                config.binning,
                d_min,
                d_max,
                effective_bins(k, config.n_bins),
            )
        })
        .collect()
}

/// Train `net` in place. Deterministic for a given seed.
pub fn fit(
    net: &mut Network<f32>,
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    fit_with(net, samples, config, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    net: &mut Network<f32>,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (d_min, d_max) = (net.config().d_min, net.config().d_max);
    let assignments = AssignmentTable::for_network(net, &config.layers, config.n_bins)?;
    let schemes = layer_schemes(net, config, d_min, d_max)?;
    let per_sample_bins: Vec<Vec<BinIndexMap>> = samples
        .iter()
        .map(|s| {
            schemes
                .iter()
                .map(|sc| sc.discretize(&s.depth, Some(&s.valid)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, net.params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut tables: Vec<ResponseTable> = config
            .layers
            .iter()
            .zip(&schemes)
            .map(|(l, sc)| Ok(ResponseTable::new(l.clone(), net.units(l)?, sc.n_bins())))
            .collect::<Result<_>>()?;
        let (mut base_sum, mut term_sum, mut batches) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let (image, depth, valid) = stack_batch(samples, idx)?;
            let bins = (0..schemes.len())
                .map(|j| {
                    let maps: Vec<&BinIndexMap> =
                        idx.iter().map(|&i| &per_sample_bins[i][j]).collect();
                    BinIndexMap::stack(&maps)
                })
                .collect::<Result<Vec<_>>>()?;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step,
                detail,
            };
            let mut loss = step_loss(
                net,
                config,
                &assignments,
                &StepInput {
                    image: &image,
                    depth: &depth,
                    valid: &valid,
                    bins: &bins,
                },
            )
            .map_err(|e| diverged(e.to_string()))?;
            let total = loss.graph.value(loss.total).data()[0];
            if !total.is_finite() {
                return Err(diverged(format!("loss is {total}")));
            }
            loss.graph.backward(loss.total)?;
            let grads: Vec<Option<Tensor<f32>>> = loss
                .params
                .iter()
                .map(|&p| loss.graph.take_grad(p))
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            for ((l, table), b) in config.layers.iter().zip(tables.iter_mut()).zip(&bins) {
                let act = loss.graph.value(loss.layers[net.layer_index(l)?]);
                table.accumulate(act, b)?;
            }
            adam.step(net.params_mut(), &grads);
            base_sum += loss.base;
            term_sum += loss.lambda_term;
            batches += 1;
        }
        let train_mean_ds = if tables.is_empty() {
            0.0
        } else {
            let mut acc = 0.0;
            for (t, row) in tables.iter().zip(&config.layers) {
                let a = assignments.get(row).map(|r| r.bins.as_slice());
                acc += build_report(t, a, "train")?.mean_ds;
            }
            acc / tables.len() as f64
        };
        let entry = EpochLog {
            epoch,
            base_loss: base_sum / batches as f64,
            lambda_term: term_sum / batches as f64,
            train_mean_ds,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { log, assignments })
}
