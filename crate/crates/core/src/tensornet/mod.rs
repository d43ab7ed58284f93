//! Dense layer stacks with a float forward pass, presumed-gradient
//! back-propagation and plain SGD.
//!
//! Tensors are flat `Vec<f64>` in NCHW order. Fully-connected layers see
//! their input flattened. Layers are indexed from 0 (bottom) to `L - 1`
//! (top); the top layer's output are the logits fed to softmax
//! cross-entropy.

mod checkpoint;
pub(crate) mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::Precision;

pub use checkpoint::{Checkpoint, TensorData, TensorEntry};

/// Channel-major image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn flat(features: usize) -> Self {
        Self::new(features, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Convolution {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default = "yes")]
    pub relu: bool,
    /// 2x2 max-pool (stride 2) applied after the activation.
    #[serde(default)]
    pub max_pool: bool,
    #[serde(default = "float")]
    pub weight_bits: Precision,
    #[serde(default = "float")]
    pub act_bits: Precision,
}

fn float() -> Precision {
    Precision::Float
}

impl LayerSpec {
    pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Convolution {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding: kernel / 2,
            },
            relu: true,
            max_pool: false,
            weight_bits: Precision::Float,
            act_bits: Precision::Float,
        }
    }

    pub fn fc(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::FullyConnected {
                in_features,
                out_features,
            },
            relu: true,
            max_pool: false,
            weight_bits: Precision::Float,
            act_bits: Precision::Float,
        }
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }

    pub fn with_pool(mut self) -> Self {
        self.max_pool = true;
        self
    }
}

/// Resolved sizes of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kind: LayerKind,
    pub input: Shape,
    /// Output before pooling; pre-activations and activations have this shape.
    pub output: Shape,
    /// Output after optional pooling; the next layer's input.
    pub pooled: Shape,
    pub fan_in: usize,
    pub weight_len: usize,
    pub bias_len: usize,
    pub relu: bool,
    pub max_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self { input, layers };
        net.geometry()?;
        Ok(net)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.geometry()
            .ok()
            .and_then(|g| g.last().map(|l| l.pooled.len()))
            .unwrap_or(0)
    }

    /// Validates shape compatibility and resolves per-layer sizes.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if self.input.is_empty() {
            return Err(Error::Shape("empty input shape".into()));
        }
        let mut input = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let (output, fan_in, weight_len, bias_len) = match layer.kind {
                LayerKind::Convolution {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if in_channels != input.channels {
                        return Err(Error::Shape(format!(
                            "layer {idx} ({}) expects {in_channels} input channels, got {}",
                            layer.name, input.channels
                        )));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::Shape(format!(
                            "layer {idx} ({}) has a zero-sized kernel, stride or channel count",
                            layer.name
                        )));
                    }
                    let padded_h = input.height + 2 * padding;
                    let padded_w = input.width + 2 * padding;
                    if padded_h < kernel || padded_w < kernel {
                        return Err(Error::Shape(format!(
                            "layer {idx} ({}) kernel {kernel} larger than padded input {padded_h}x{padded_w}",
                            layer.name
                        )));
                    }
                    let output = Shape::new(
                        out_channels,
                        (padded_h - kernel) / stride + 1,
                        (padded_w - kernel) / stride + 1,
                    );
                    let fan_in = in_channels * kernel * kernel;
                    (output, fan_in, out_channels * fan_in, out_channels)
                }
                LayerKind::FullyConnected {
                    in_features,
                    out_features,
                } => {
                    if in_features != input.len() {
                        return Err(Error::Shape(format!(
                            "layer {idx} ({}) expects {in_features} input features, got {}",
                            layer.name,
                            input.len()
                        )));
                    }
                    if out_features == 0 {
                        return Err(Error::Shape(format!(
                            "layer {idx} ({}) has no outputs",
                            layer.name
                        )));
                    }
                    (
                        Shape::flat(out_features),
                        in_features,
                        out_features * in_features,
                        out_features,
                    )
                }
            };
            let pooled = if layer.max_pool {
                if output.height < 2 || output.width < 2 {
                    return Err(Error::Shape(format!(
                        "layer {idx} ({}) cannot max-pool a {}x{} map",
                        layer.name, output.height, output.width
                    )));
                }
                Shape::new(output.channels, output.height / 2, output.width / 2)
            } else {
                output
            };
            out.push(LayerGeometry {
                kind: layer.kind,
                input,
                output,
                pooled,
                fan_in,
                weight_len,
                bias_len,
                relu: layer.relu,
                max_pool: layer.max_pool,
            });
            input = pooled;
        }
        Ok(out)
    }

    /// Sets every layer to `weights` / `acts`; the final layer's activations
    /// stay at 16 bits whenever any quantization is active.
    pub fn with_precision(&self, weights: Precision, acts: Precision) -> Self {
        let mut net = self.clone();
        let any_fixed = !weights.is_float() || !acts.is_float();
        let last = net.layers.len().saturating_sub(1);
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            layer.weight_bits = weights;
            layer.act_bits = if idx == last {
                if any_fixed {
                    Precision::Fixed(16)
                } else {
                    Precision::Float
                }
            } else {
                acts
            };
        }
        net
    }

    pub fn is_all_float(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight_bits.is_float() && l.act_bits.is_float())
    }
}

/// Full-precision master weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    pub fn zeros(net: &NetworkSpec) -> Result<Self> {
        let layers = net
            .geometry()?
            .iter()
            .map(|g| LayerParams {
                weights: vec![0.0; g.weight_len],
                bias: vec![0.0; g.bias_len],
            })
            .collect();
        Ok(Self { layers })
    }

    /// Uniform fan-in scaled initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// with zero biases.
    pub fn init_he<R: Rng + ?Sized>(net: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let layers = net
            .geometry()?
            .iter()
            .map(|g| {
                let limit = (6.0 / g.fan_in as f64).sqrt();
                LayerParams {
                    weights: (0..g.weight_len)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect(),
                    bias: vec![0.0; g.bias_len],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn check_shapes(&self, net: &NetworkSpec) -> Result<()> {
        let geom = net.geometry()?;
        if geom.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "network has {} layers, parameters have {}",
                geom.len(),
                self.layers.len()
            )));
        }
        for (idx, (g, p)) in geom.iter().zip(&self.layers).enumerate() {
            if g.weight_len != p.weights.len() || g.bias_len != p.bias.len() {
                return Err(Error::Shape(format!(
                    "layer {idx}: expected {}+{} parameters, got {}+{}",
                    g.weight_len,
                    g.bias_len,
                    p.weights.len(),
                    p.bias.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

/// Anything that can supply the weights a forward pass multiplies by.
pub trait WeightSource {
    fn num_layers(&self) -> usize;
    fn weights(&self, layer: usize) -> &[f64];
    fn bias(&self, layer: usize) -> &[f64];
}

impl WeightSource for Parameters {
    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn weights(&self, layer: usize) -> &[f64] {
        &self.layers[layer].weights
    }

    fn bias(&self, layer: usize) -> &[f64] {
        &self.layers[layer].bias
    }
}

/// A batch of flattened images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check(&self, net: &NetworkSpec) -> Result<()> {
        let per = net.input.len();
        if self.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if self.images.len() != per * self.len() {
            return Err(Error::Shape(format!(
                "batch of {} samples needs {} input values, got {}",
                self.len(),
                per * self.len(),
                self.images.len()
            )));
        }
        let classes = net.num_classes();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Per-layer values retained by a forward pass. All buffers are
/// `batch_size` consecutive samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// What the layer multiplied by its weights.
    pub input: Vec<f64>,
    /// `a = W x + b`.
    pub pre_activation: Vec<f64>,
    /// Effective activation `g(a)`, before pooling.
    pub activation: Vec<f64>,
    /// Per pooled output, the index of the winning pre-pool element.
    pub pool_argmax: Option<Vec<u32>>,
}

impl LayerCache {
    /// Layer output as seen by the next layer.
    pub fn output(&self, geom: &LayerGeometry) -> Vec<f64> {
        match &self.pool_argmax {
            Some(idx) => {
                let (pooled, full) = (geom.pooled.len(), geom.output.len());
                idx.iter()
                    .enumerate()
                    .map(|(i, &j)| self.activation[(i / pooled) * full + j as usize])
                    .collect()
            }
            None => self.activation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub batch_size: usize,
    pub layers: Vec<LayerCache>,
    pub logits: Vec<f64>,
    pub labels: Vec<usize>,
    /// Mean softmax cross-entropy.
    pub loss: f64,
}

/// `∂C/∂w`, `∂C/∂b` and the error signals `∂C/∂a` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub error_signals: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
            error_signals: vec![Vec::new(); params.layers.len()],
        }
    }
}

pub(crate) fn relu(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

/// Mean softmax cross-entropy over the batch.
pub(crate) fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        total += sum.ln() + max - row[label];
    }
    total / labels.len() as f64
}

/// Float forward pass with exact ReLU.
pub fn forward_float(
    net: &NetworkSpec,
    weights: &impl WeightSource,
    batch: &Batch,
) -> Result<ForwardPass> {
    let geom = net.geometry()?;
    check_weights(&geom, weights)?;
    batch.check(net)?;
    let n = batch.len();
    let mut input = batch.images.clone();
    let mut layers = Vec::with_capacity(geom.len());
    for (l, g) in geom.iter().enumerate() {
        let pre = kernels::layer_forward_f64(g, weights.weights(l), weights.bias(l), &input, n);
        let activation = if g.relu {
            pre.iter().map(|&a| relu(a)).collect()
        } else {
            pre.clone()
        };
        let cache = finish_layer(g, input, pre, activation, n);
        input = cache.output(g);
        layers.push(cache);
    }
    let classes = geom.last().map(|g| g.pooled.len()).unwrap_or(0);
    let loss = softmax_cross_entropy(&input, &batch.labels, classes);
    Ok(ForwardPass {
        batch_size: n,
        layers,
        logits: input,
        labels: batch.labels.clone(),
        loss,
    })
}

/// Applies pooling bookkeeping and packages a layer's cache.
pub(crate) fn finish_layer(
    g: &LayerGeometry,
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    activation: Vec<f64>,
    n: usize,
) -> LayerCache {
    let pool_argmax = g
        .max_pool
        .then(|| kernels::max_pool_argmax(&activation, g.output, n));
    LayerCache {
        input,
        pre_activation,
        activation,
        pool_argmax,
    }
}

pub(crate) fn check_weights(geom: &[LayerGeometry], weights: &impl WeightSource) -> Result<()> {
    if weights.num_layers() != geom.len() {
        return Err(Error::Shape(format!(
            "network has {} layers, weights have {}",
            geom.len(),
            weights.num_layers()
        )));
    }
    for (l, g) in geom.iter().enumerate() {
        if weights.weights(l).len() != g.weight_len || weights.bias(l).len() != g.bias_len {
            return Err(Error::Shape(format!(
                "layer {l}: expected {}+{} parameters, got {}+{}",
                g.weight_len,
                g.bias_len,
                weights.weights(l).len(),
                weights.bias(l).len()
            )));
        }
    }
    Ok(())
}

/// Back-propagation with the presumed ReLU derivative `1{a > 0}`, evaluated
/// at whatever pre-activations the forward pass produced. Quantization steps
/// in the forward pass are treated as identity.
pub fn backward_presumed(
    net: &NetworkSpec,
    weights: &impl WeightSource,
    pass: &ForwardPass,
) -> Result<GradientSet> {
    let geom = net.geometry()?;
    check_weights(&geom, weights)?;
    if pass.layers.len() != geom.len() {
        return Err(Error::Shape(format!(
            "forward cache has {} layers, network has {}",
            pass.layers.len(),
            geom.len()
        )));
    }
    let n = pass.batch_size;
    let classes = geom.last().map(|g| g.pooled.len()).unwrap_or(0);
    if pass.logits.len() != n * classes || pass.labels.len() != n {
        return Err(Error::Shape("forward cache does not match the batch".into()));
    }

    let mut d_out = vec![0.0; n * classes];
    for ((row, d), &label) in pass
        .logits
        .chunks_exact(classes)
        .zip(d_out.chunks_exact_mut(classes))
        .zip(&pass.labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        for (dk, &z) in d.iter_mut().zip(row) {
            *dk = (z - max).exp() / sum / n as f64;
        }
        d[label] -= 1.0 / n as f64;
    }

    let mut grads = GradientSet {
        weights: Vec::with_capacity(geom.len()),
        biases: Vec::with_capacity(geom.len()),
        error_signals: Vec::with_capacity(geom.len()),
    };
    let mut rev_w = Vec::new();
    let mut rev_b = Vec::new();
    let mut rev_e = Vec::new();
    for l in (0..geom.len()).rev() {
        let g = &geom[l];
        let cache = &pass.layers[l];
        let mut d_a = match &cache.pool_argmax {
            Some(idx) => kernels::unpool(&d_out, idx, g.output.len(), g.pooled.len(), n),
            None => d_out,
        };
        if g.relu {
            for (d, &a) in d_a.iter_mut().zip(&cache.pre_activation) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let (dw, db, d_in) =
            kernels::layer_backward_f64(g, weights.weights(l), &cache.input, &d_a, n, l > 0);
        rev_w.push(dw);
        rev_b.push(db);
        rev_e.push(d_a);
        d_out = d_in;
    }
    rev_w.reverse();
    rev_b.reverse();
    rev_e.reverse();
    grads.weights = rev_w;
    grads.biases = rev_b;
    grads.error_signals = rev_e;
    Ok(grads)
}

/// `w <- w - lr * dC/dw` (and biases) for layers in `mask`; every other layer
/// is left untouched.
pub fn sgd_step(
    params: &mut Parameters,
    grads: &GradientSet,
    lr: f64,
    mask: &[usize],
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if mask.is_empty() {
        return Err(Error::Config("trainable mask is empty".into()));
    }
    if let Some(&bad) = mask.iter().find(|&&l| l >= params.layers.len()) {
        return Err(Error::Config(format!(
            "trainable layer {bad} out of range for {} layers",
            params.layers.len()
        )));
    }
    for &l in mask {
        let layer = &mut params.layers[l];
        if grads.weights[l].len() != layer.weights.len() || grads.biases[l].len() != layer.bias.len() {
            return Err(Error::Shape(format!("gradient shape mismatch at layer {l}")));
        }
        for (w, g) in layer.weights.iter_mut().zip(&grads.weights[l]) {
            *w -= lr * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grads.biases[l]) {
            *b -= lr * g;
        }
    }
    Ok(())
}
