//! Small encoder-decoder depth network with named layers.
//!
//! Every layer is `act(conv3x3(upsample(x)) [+ conv3x3(skip)])`; a 1-channel
//! head follows the last layer, is resized to the input resolution and mapped
//! to depth by `exp(clamp(·, ln d_min, ln d_max))`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
}

/// Captured activations keyed by layer name.
pub type Activations<S> = BTreeMap<String, Tensor<S>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Integer bilinear upsampling factor applied before the convolution.
    #[serde(default = "one")]
    pub upsample: usize,
    /// Earlier layer fused in through its own (strided) convolution.
    #[serde(default)]
    pub skip_from: Option<String>,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn new(name: &str, channels: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            channels,
            stride: 1,
            upsample: 1,
            skip_from: None,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn upsample(mut self, u: usize) -> Self {
        self.upsample = u;
        self
    }

    pub fn skip_from(mut self, name: &str) -> Self {
        self.skip_from = Some(name.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    /// Layers whose channels are studied as units.
    pub interpretable_layers: Vec<String>,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for NetConfig {
    /// Three stride-2 encoder blocks, a fusion layer (`mff`) mixing the last two
    /// encoder scales, an upsampling decoder layer (`d`) and two refinement
    /// layers (`rconv0`, `rconv1`).
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            height: 64,
            width: 64,
            layers: alloc::vec![
                LayerSpec::new("enc1", 16).stride(2),
                LayerSpec::new("enc2", 32).stride(2),
                LayerSpec::new("enc3", 64).stride(2),
                LayerSpec::new("mff", 64).skip_from("enc2"),
                LayerSpec::new("d", 64).upsample(2),
                LayerSpec::new("rconv0", 32),
                LayerSpec::new("rconv1", 32),
            ],
            activation: Activation::Elu,
            interpretable_layers: alloc::vec!["mff".to_string(), "d".to_string()],
            d_min: 1.0,
            d_max: 10.0,
        }
    }
}

/// Resolved geometry of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// `(source layer index, source channels, conv stride)`.
    pub skip: Option<(usize, usize, usize)>,
}

fn conv_out(len: usize, stride: usize) -> usize {
    (len + 2 - KERNEL) / stride + 1
}

impl NetConfig {
    /// Tiny variant used for gradient checks.
    pub fn tiny(height: usize, width: usize) -> Self {
        NetConfig {
            in_channels: 3,
            height,
            width,
            layers: alloc::vec![
                LayerSpec::new("enc1", 3).stride(2),
                LayerSpec::new("enc2", 4).stride(2),
                LayerSpec::new("mff", 4).skip_from("enc1"),
                LayerSpec::new("d", 4).upsample(2),
            ],
            activation: Activation::Elu,
            interpretable_layers: alloc::vec!["d".to_string()],
            d_min: 1.0,
            d_max: 10.0,
        }
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return bad("network needs at least one layer".into());
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return bad("input dimensions must be positive".into());
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return bad(format!(
                "need 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            ));
        }
        let mut plans: Vec<LayerPlan> = Vec::with_capacity(self.layers.len());
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|p| p.name == l.name) {
                return bad(format!("duplicate layer name `{}`", l.name));
            }
            if l.channels == 0 || l.stride == 0 || l.upsample == 0 {
                return bad(format!(
                    "layer `{}` has a zero channel count, stride or upsample",
                    l.name
                ));
            }
            let (ih, iw) = (h * l.upsample, w * l.upsample);
            let (oh, ow) = (conv_out(ih, l.stride), conv_out(iw, l.stride));
            let skip = match &l.skip_from {
                None => None,
                Some(src) => {
                    let j = self.layers[..i]
                        .iter()
                        .position(|p| &p.name == src)
                        .ok_or_else(|| {
                            Error::Config(format!("skip source `{src}` must precede `{}`", l.name))
                        })?;
                    let sp = &plans[j];
                    let stride = (sp.out_h / oh).max(1);
                    if conv_out(sp.out_h, stride) != oh || conv_out(sp.out_w, stride) != ow {
                        return bad(format!(
                            "skip `{src}` ({}x{}) cannot be strided onto `{}` ({oh}x{ow})",
                            sp.out_h, sp.out_w, l.name
                        ));
                    }
                    Some((j, self.layers[j].channels, stride))
                }
            };
            plans.push(LayerPlan {
                in_c: c,
                in_h: ih,
                in_w: iw,
                out_h: oh,
                out_w: ow,
                skip,
            });
            c = l.channels;
            h = oh;
            w = ow;
        }
        for name in &self.interpretable_layers {
            let i = self.layer_index(name)?;
            if self.layers[i].channels < 2 {
                return bad(format!(
                    "interpretable layer `{name}` needs at least 2 units"
                ));
            }
        }
        if self
            .interpretable_layers
            .iter()
            .enumerate()
            .any(|(i, n)| self.interpretable_layers[..i].contains(n))
        {
            return bad("interpretable layer names must be unique".into());
        }
        Ok(plans)
    }

    /// Parameter tensor shapes in storage order: per layer weight, bias and
    /// optional skip weight, then head weight and bias.
    pub fn param_shapes(&self) -> Result<Vec<(String, Shape)>> {
        let plans = self.plan()?;
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().zip(&plans) {
            out.push((
                format!("{}.weight", l.name),
                Shape::new(l.channels, p.in_c, KERNEL, KERNEL),
            ));
            out.push((format!("{}.bias", l.name), Shape::new(1, 1, 1, l.channels)));
            if let Some((_, sc, _)) = p.skip {
                out.push((
                    format!("{}.skip", l.name),
                    Shape::new(l.channels, sc, KERNEL, KERNEL),
                ));
            }
        }
        let last = self.layers.last().expect("validated non-empty").channels;
        out.push((
            "head.weight".to_string(),
            Shape::new(1, last, KERNEL, KERNEL),
        ));
        out.push(("head.bias".to_string(), Shape::new(1, 1, 1, 1)));
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|(_, s)| s.numel()).sum())
    }
}

/// A configured network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S: Scalar = f32> {
    config: NetConfig,
    plans: Vec<LayerPlan>,
    params: Vec<Tensor<S>>,
    /// Index of each layer's first parameter.
    offsets: Vec<usize>,
}

/// Result of a forward pass on a graph.
pub struct GraphForward {
    pub depth: Var,
    /// Output of every layer, in order.
    pub layers: Vec<Var>,
}

impl<S: Scalar> Network<S> {
    /// Fan-in scaled uniform init: weights in `±sqrt(3 / fan_in)`, zero biases,
    /// head bias at the middle of the log-depth range.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        let shapes = config.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = 0.5 * (Float::ln(config.d_min) + Float::ln(config.d_max));
        let params = shapes
            .iter()
            .map(|(name, s)| {
                if name.ends_with(".bias") {
                    let v = if name == "head.bias" { mid } else { 0.0 };
                    Tensor::full(*s, S::of(v))
                } else {
                    let fan_in = (s.c * s.h * s.w) as f64;
                    let bound = Float::sqrt(3.0 / fan_in);
                    Tensor::from_fn(*s, |_, _, _, _| S::of(rng.random_range(-bound..bound)))
                }
            })
            .collect();
        Self::from_params(config, params)
    }

    pub fn from_params(config: NetConfig, params: Vec<Tensor<S>>) -> Result<Self> {
        let plans = config.plan()?;
        let shapes = config.param_shapes()?;
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|((_, s), p)| *s != p.shape())
        {
            return Err(Error::Config(
                "parameters do not match the network configuration".into(),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        let mut offsets = Vec::with_capacity(plans.len());
        let mut at = 0;
        for p in &plans {
            offsets.push(at);
            at += if p.skip.is_some() { 3 } else { 2 };
        }
        Ok(Network {
            config,
            plans,
            params,
            offsets,
        })
    }

    /// Rebuild from a flat parameter vector in [`NetConfig::param_shapes`] order.
    pub fn from_flat(config: NetConfig, flat: &[S]) -> Result<Self> {
        let shapes = config.param_shapes()?;
        let total: usize = shapes.iter().map(|(_, s)| s.numel()).sum();
        if flat.len() != total {
            return Err(Error::Config(format!(
                "weight blob has {} values, configuration needs {total}",
                flat.len()
            )));
        }
        let mut at = 0;
        let params = shapes
            .iter()
            .map(|(_, s)| {
                let t = Tensor::from_vec(*s, flat[at..at + s.numel()].to_vec());
                at += s.numel();
                t
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, params)
    }

    pub fn flat_params(&self) -> Vec<S> {
        self.params
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            config: self.config.clone(),
            plans: self.plans.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            offsets: self.offsets.clone(),
        }
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.config.layer_index(name)
    }

    pub fn units(&self, layer: &str) -> Result<usize> {
        Ok(self.config.layers[self.layer_index(layer)?].channels)
    }

    /// Activation shape of `layer` for a batch of `n`.
    pub fn layer_shape(&self, layer: &str, n: usize) -> Result<Shape> {
        let i = self.layer_index(layer)?;
        let p = &self.plans[i];
        Ok(Shape::new(
            n,
            self.config.layers[i].channels,
            p.out_h,
            p.out_w,
        ))
    }

    fn check_image(&self, image: &Tensor<S>) -> Result<()> {
        let s = image.shape();
        let c = &self.config;
        if (s.c, s.h, s.w) != (c.in_channels, c.height, c.width) {
            return Err(shape_err(
                "forward",
                format!(
                    "network expects {}x{}x{} input, got {:?}",
                    c.in_channels,
                    c.height,
                    c.width,
                    s.dims()
                ),
            ));
        }
        Ok(())
    }

    /// Put every parameter on `g` as a leaf.
    pub fn param_leaves(&self, g: &mut Graph<S>, requires_grad: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Run the network on a graph. `layers` holds outputs already known (index
    /// `i` = layer `i`); computation resumes at `layers.len()`. This is how
    /// overrides are injected: push the replacement as layer `i`'s output.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        params: &[Var],
        image: Var,
        mut layers: Vec<Var>,
    ) -> Result<GraphForward> {
        self.check_image(g.value(image))?;
        for i in layers.len()..self.plans.len() {
            let spec = &self.config.layers[i];
            let plan = &self.plans[i];
            let mut x = if i == 0 { image } else { layers[i - 1] };
            if spec.upsample > 1 {
                x = g.bilinear_resize(x, plan.in_h, plan.in_w)?;
            }
            let o = self.offsets[i];
            let mut y = g.conv2d(x, params[o], Some(params[o + 1]), spec.stride, 1)?;
            if let Some((j, _, stride)) = plan.skip {
                let s = g.conv2d(layers[j], params[o + 2], None, stride, 1)?;
                y = g.add(y, s)?;
            }
            y = match self.config.activation {
                Activation::Elu => g.elu(y)?,
                Activation::Relu => g.relu(y)?,
            };
            layers.push(y);
        }
        let h = self.params.len() - 2;
        let last = *layers.last().expect("at least one layer");
        let mut y = g.conv2d(last, params[h], Some(params[h + 1]), 1, 1)?;
        y = g.bilinear_resize(y, self.config.height, self.config.width)?;
        y = g.clamp(
            y,
            Float::ln(self.config.d_min),
            Float::ln(self.config.d_max),
        )?;
        let depth = g.exp(y)?;
        Ok(GraphForward { depth, layers })
    }

    /// Inference: predicted depth plus the activations of the `capture` layers.
    pub fn forward(
        &self,
        image: &Tensor<S>,
        capture: &[&str],
    ) -> Result<(Tensor<S>, Activations<S>)> {
        let idx = capture
            .iter()
            .map(|n| self.layer_index(n))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let params = self.param_leaves(&mut g, false)?;
        let x = g.leaf(image.clone(), false)?;
        let out = self.forward_graph(&mut g, &params, x, Vec::new())?;
        let acts = capture
            .iter()
            .zip(idx)
            .map(|(n, i)| (n.to_string(), g.value(out.layers[i]).clone()))
            .collect();
        Ok((g.value(out.depth).clone(), acts))
    }

    /// All layer outputs for `image` (no gradient bookkeeping).
    pub fn trace(&self, image: &Tensor<S>) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let mut g = Graph::new();
        let params = self.param_leaves(&mut g, false)?;
        let x = g.leaf(image.clone(), false)?;
        let out = self.forward_graph(&mut g, &params, x, Vec::new())?;
        let layers = out.layers.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(out.depth).clone(), layers))
    }

    /// Prediction with layer `layer`'s output replaced by `replacement`,
    /// reusing an earlier [`trace`](Self::trace) of the same image.
    pub fn resume(
        &self,
        image: &Tensor<S>,
        trace: &[Tensor<S>],
        layer: usize,
        replacement: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let expected = trace
            .get(layer)
            .ok_or_else(|| shape_err("override", format!("trace has no layer {layer}")))?
            .shape();
        if replacement.shape() != expected {
            return Err(shape_err(
                "override",
                format!(
                    "replacement {:?} does not match activation {:?}",
                    replacement.shape().dims(),
                    expected.dims()
                ),
            ));
        }
        let mut g = Graph::new();
        let params = self.param_leaves(&mut g, false)?;
        let x = g.leaf(image.clone(), false)?;
        let mut known = Vec::with_capacity(layer + 1);
        for t in &trace[..layer] {
            known.push(g.leaf(t.clone(), false)?);
        }
        known.push(g.leaf(replacement.clone(), false)?);
        let out = self.forward_graph(&mut g, &params, x, known)?;
        Ok(g.value(out.depth).clone())
    }

    /// Prediction with `layer`'s activation replaced by `replacement`.
    pub fn forward_with_override(
        &self,
        image: &Tensor<S>,
        layer: &str,
        replacement: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let i = self.layer_index(layer)?;
        let expected = self.layer_shape(layer, image.shape().n)?;
        if replacement.shape() != expected {
            return Err(shape_err(
                "override",
                format!(
                    "replacement {:?} does not match activation {:?}",
                    replacement.shape().dims(),
                    expected.dims()
                ),
            ));
        }
        let (_, trace) = self.trace(image)?;
        self.resume(image, &trace, i, replacement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_matches_closed_form() {
        // weights 9·C_in·C_out, biases C_out, skip 9·C_src·C_out
        let expected = 9 * 3 * 16
            + 16
            + 9 * 16 * 32
            + 32
            + 9 * 32 * 64
            + 64
            + 9 * 64 * 64
            + 64
            + 9 * 32 * 64
            + 9 * 64 * 64
            + 64
            + 9 * 64 * 32
            + 32
            + 9 * 32 * 32
            + 32
            + 9 * 32
            + 1;
        assert_eq!(NetConfig::default().param_count().unwrap(), expected);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::<f32>::build(NetConfig::default(), 3).unwrap();
        let b = Network::<f32>::build(NetConfig::default(), 3).unwrap();
        let c = Network::<f32>::build(NetConfig::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shapes_and_positivity() {
        let net = Network::<f32>::build(NetConfig::default(), 1).unwrap();
        let img = Tensor::zeros(Shape::new(2, 3, 64, 64));
        let (depth, acts) = net.forward(&img, &["mff", "d"]).unwrap();
        assert_eq!(depth.shape(), Shape::new(2, 1, 64, 64));
        assert!(depth.data().iter().all(|&d| d > 0.0 && d.is_finite()));
        assert_eq!(acts["mff"].shape(), Shape::new(2, 64, 8, 8));
        assert_eq!(acts["d"].shape(), Shape::new(2, 64, 16, 16));
        let (plain, none) = net.forward(&img, &[]).unwrap();
        assert!(none.is_empty());
        assert_eq!(plain, depth);
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let net = Network::<f32>::build(NetConfig::default(), 1).unwrap();
        let img = Tensor::zeros(Shape::new(1, 3, 64, 64));
        assert!(matches!(
            net.forward(&img, &["nope"]),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn override_identity_and_mismatch() {
        let net = Network::<f32>::build(NetConfig::default(), 2).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, c, y, x| {
            ((c + y * x) % 7) as f32 / 7.0
        });
        let (pred, acts) = net.forward(&img, &["d"]).unwrap();
        let same = net.forward_with_override(&img, "d", &acts["d"]).unwrap();
        assert_eq!(pred, same);
        let wrong = Tensor::zeros(Shape::new(1, 3, 16, 16));
        assert!(net.forward_with_override(&img, "d", &wrong).is_err());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = NetConfig::default();
        c.layers[1].name = "enc1".into();
        assert!(c.plan().is_err());
        let mut c = NetConfig::default();
        c.interpretable_layers.push("missing".into());
        assert!(c.plan().is_err());
        let mut c = NetConfig::default();
        c.layers[3].skip_from = Some("rconv1".into());
        assert!(c.plan().is_err());
    }

    #[test]
    fn flat_round_trip() {
        let net = Network::<f32>::build(NetConfig::default(), 9).unwrap();
        let back = Network::from_flat(NetConfig::default(), &net.flat_params()).unwrap();
        assert_eq!(net, back);
        assert!(Network::<f32>::from_flat(NetConfig::default(), &[0.0; 5]).is_err());
    }
}
