//! Emulated fixed-point forward pass.
//!
//! Each layer whose inputs and weights are both fixed point is evaluated as
//! exact widening products summed into a wide integer accumulator, followed
//! by a single requantization into the layer's activation format. Combined
//! with ReLU this gives the effective staircase activation: zero for
//! negative inputs, steps of one LSB, flat at the format maximum.
//!
//! Layers with a float operand are computed in `f64` on the dequantized
//! values, and their outputs quantized if the layer's activations are fixed.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, choose_format, quantize, requantize, Accumulator, Precision, QFormat, QTensor};
use crate::tensornet::{
    self, check_weights, finish_layer, kernels, relu, Batch, ForwardPass, NetworkSpec, Parameters,
    WeightSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrecision {
    pub weight_bits: Precision,
    /// Activation format; `None` keeps the layer's output in full precision.
    pub act: Option<QFormat>,
}

/// Resolved per-layer formats. Activation formats are calibrated once and
/// then frozen; weight formats follow the weights each time a view is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionAssignment {
    /// Format of the network input (a virtual layer below layer 0).
    pub input: Option<QFormat>,
    pub layers: Vec<LayerPrecision>,
}

impl PrecisionAssignment {
    pub fn float(num_layers: usize) -> Self {
        Self {
            input: None,
            layers: vec![
                LayerPrecision {
                    weight_bits: Precision::Float,
                    act: None,
                };
                num_layers
            ],
        }
    }

    pub fn is_float(&self) -> bool {
        self.input.is_none()
            && self
                .layers
                .iter()
                .all(|l| l.weight_bits.is_float() && l.act.is_none())
    }

    /// Copy with float activations on every layer outside `fixed_layers`.
    /// Weight precision and the input format are unchanged.
    pub fn with_fixed_activations_only(&self, fixed_layers: &[usize]) -> Self {
        let mut out = self.clone();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            if !fixed_layers.contains(&l) {
                layer.act = None;
            }
        }
        out
    }

    /// Copy with every activation, including the input, in full precision.
    pub fn with_float_activations(&self) -> Self {
        let mut out = self.with_fixed_activations_only(&[]);
        out.input = None;
        out
    }

    /// Weight and non-final activation bit-widths when they are uniform
    /// across layers, as the grid protocol requires.
    pub fn uniform_bits(&self) -> Option<(Precision, Precision)> {
        let (last, body) = self.layers.split_last()?;
        let w = last.weight_bits;
        let act_bits = |l: &LayerPrecision| {
            l.act
                .map(|f| Precision::Fixed(f.total_bits()))
                .unwrap_or(Precision::Float)
        };
        let a = body.first().map(act_bits).unwrap_or(Precision::Float);
        body.iter()
            .all(|l| l.weight_bits == w && act_bits(l) == a)
            .then_some((w, a))
    }

    /// Smallest activation LSB across fixed layers, if any.
    pub fn min_act_lsb(&self) -> Option<f64> {
        self.layers
            .iter()
            .filter_map(|l| l.act.map(|f| f.lsb()))
            .chain(self.input.map(|f| f.lsb()))
            .reduce(f64::min)
    }
}

/// Chooses activation formats from the float-pass statistics of `calib`,
/// using the bit-widths recorded in `net`. The input is quantized at layer
/// 0's activation bit-width.
pub fn calibrate(
    net: &NetworkSpec,
    params: &Parameters,
    calib: &Batch,
) -> Result<PrecisionAssignment> {
    let needs_stats = net.layers.iter().any(|l| !l.act_bits.is_float());
    let pass = if needs_stats {
        Some(tensornet::forward_float(net, params, calib)?)
    } else {
        None
    };
    let input = match (net.layers.first().map(|l| l.act_bits), &pass) {
        (Some(Precision::Fixed(bits)), Some(_)) => Some(choose_format(&calib.images, bits, true)?),
        _ => None,
    };
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let act = match (spec.act_bits, &pass) {
                (Precision::Fixed(bits), Some(pass)) => {
                    Some(choose_format(&pass.layers[l].activation, bits, true)?)
                }
                _ => None,
            };
            Ok(LayerPrecision {
                weight_bits: spec.weight_bits,
                act,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrecisionAssignment { input, layers })
}

#[derive(Debug, Clone)]
pub struct ViewLayer<'a> {
    /// Weight values the forward pass multiplies by (dequantized if fixed).
    pub values: Cow<'a, [f64]>,
    pub quantized: Option<QTensor>,
    pub bias: &'a [f64],
}

/// Weights as a forward pass sees them. The master parameters are never
/// modified.
#[derive(Debug, Clone)]
pub struct WeightView<'a> {
    pub layers: Vec<ViewLayer<'a>>,
}

impl WeightView<'_> {
    /// Overrides a layer with arbitrary full-precision weights.
    pub fn set_float_weights(&mut self, layer: usize, values: Vec<f64>) {
        let slot = &mut self.layers[layer];
        slot.values = Cow::Owned(values);
        slot.quantized = None;
    }

    pub fn to_params(&self) -> Parameters {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| tensornet::LayerParams {
                    weights: l.values.to_vec(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl WeightSource for WeightView<'_> {
    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn weights(&self, layer: usize) -> &[f64] {
        &self.layers[layer].values
    }

    fn bias(&self, layer: usize) -> &[f64] {
        self.layers[layer].bias
    }
}

/// Quantizes each fixed-precision layer's weights with a per-tensor format
/// chosen from the weights themselves. Float layers borrow the master copy.
pub fn quantize_weights<'a>(
    params: &'a Parameters,
    assign: &PrecisionAssignment,
) -> Result<WeightView<'a>> {
    if params.layers.len() != assign.layers.len() {
        return Err(Error::Shape(format!(
            "assignment has {} layers, parameters {}",
            assign.layers.len(),
            params.layers.len()
        )));
    }
    let layers = params
        .layers
        .iter()
        .zip(&assign.layers)
        .map(|(p, a)| match a.weight_bits {
            Precision::Float => Ok(ViewLayer {
                values: Cow::Borrowed(p.weights.as_slice()),
                quantized: None,
                bias: &p.bias,
            }),
            Precision::Fixed(bits) => {
                let fmt = choose_format(&p.weights, bits, true)?;
                let q = QTensor::quantize(&p.weights, fmt)?;
                Ok(ViewLayer {
                    values: Cow::Owned(q.dequantize()),
                    quantized: Some(q),
                    bias: &p.bias,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightView { layers })
}

/// ReLU followed by requantization into `act`; plain ReLU when `act` is
/// `None`.
pub fn effective_relu(acc: Accumulator, act: Option<QFormat>) -> f64 {
    match act {
        None => relu(acc.to_f64()),
        Some(fmt) => {
            let clipped = Accumulator::from_raw(acc.raw().max(0), acc.frac_bits());
            requantize(clipped, fmt).to_f64()
        }
    }
}

/// `raw * 2^-frac` brought to `target`, for accumulators wider than 64 bits.
fn requantize_wide(raw: i128, frac: i32, target: QFormat) -> i64 {
    let shift = frac - target.frac_bits();
    let scaled = if shift >= 0 {
        fixedpoint::round_shift_right(raw, shift as u32)
    } else {
        raw.checked_shl((-shift) as u32)
            .filter(|v| v >> ((-shift) as u32) == raw)
            .unwrap_or(raw.signum() * i128::MAX)
    };
    scaled.clamp(i128::from(target.raw_min()), i128::from(target.raw_max())) as i64
}

fn to_raw(values: &[f64], fmt: QFormat) -> Vec<i64> {
    let scale = fixedpoint::pow2(fmt.frac_bits());
    values
        .iter()
        .map(|&v| {
            let r = v * scale;
            debug_assert_eq!(r, r.round(), "value {v} is not on the {fmt} grid");
            r as i64
        })
        .collect()
}

struct IntegerLayerOut {
    pre_activation: Vec<f64>,
    activation: Vec<f64>,
}

/// Steps 1 and 2 exactly in integers, then one requantization per output.
#[allow(clippy::too_many_arguments)]
fn integer_layer(
    g: &tensornet::LayerGeometry,
    w: &QTensor,
    bias: &[f64],
    input: &[f64],
    in_fmt: QFormat,
    act: Option<QFormat>,
    n: usize,
) -> Result<IntegerLayerOut> {
    let acc_frac = w.format().frac_bits() + in_fmt.frac_bits();
    let x_raw = to_raw(input, in_fmt);
    let b_raw = bias
        .iter()
        .map(|&b| Accumulator::from_real(b, acc_frac).map(|a| a.raw()))
        .collect::<Result<Vec<_>>>()?;

    let max_w = i128::from(w.max_abs_raw());
    let max_x = i128::from(x_raw.iter().map(|r| r.abs()).max().unwrap_or(0));
    let max_b = i128::from(b_raw.iter().map(|r| r.abs()).max().unwrap_or(0));
    let bound = max_b + g.fan_in as i128 * max_w * max_x;

    let (in_len, out_len) = (g.input.len(), g.output.len());
    let lsb = fixedpoint::pow2(-acc_frac);
    let mut pre_activation = vec![0.0; n * out_len];
    let mut activation = vec![0.0; n * out_len];

    let mut emit = |idx: usize, raw: i128| {
        pre_activation[idx] = raw as f64 * lsb;
        let clipped = if g.relu { raw.max(0) } else { raw };
        activation[idx] = match act {
            Some(fmt) => requantize_wide(clipped, acc_frac, fmt) as f64 * fmt.lsb(),
            None => clipped as f64 * lsb,
        };
    };

    if bound <= i128::from(i64::MAX) {
        let mut out = vec![0i64; out_len];
        for s in 0..n {
            let x = &x_raw[s * in_len..(s + 1) * in_len];
            kernels::layer_forward_sample(g, w.raw(), &b_raw, x, &mut out);
            for (j, &r) in out.iter().enumerate() {
                emit(s * out_len + j, i128::from(r));
            }
        }
    } else if bound < i128::MAX / 2 {
        // 32-bit operands: products alone can need 64 bits
        let w128: Vec<i128> = w.raw().iter().map(|&r| i128::from(r)).collect();
        let b128: Vec<i128> = b_raw.iter().map(|&r| i128::from(r)).collect();
        let x128: Vec<i128> = x_raw.iter().map(|&r| i128::from(r)).collect();
        let mut out = vec![0i128; out_len];
        for s in 0..n {
            let x = &x128[s * in_len..(s + 1) * in_len];
            kernels::layer_forward_sample(g, &w128, &b128, x, &mut out);
            for (j, &r) in out.iter().enumerate() {
                emit(s * out_len + j, r);
            }
        }
    } else {
        return Err(Error::AccumulatorOverflow(format!(
            "worst-case sum {bound} for fan-in {} cannot be held",
            g.fan_in
        )));
    }
    Ok(IntegerLayerOut {
        pre_activation,
        activation,
    })
}

/// Forward pass under `assign`, multiplying by the weights in `view`.
pub fn forward_quantized(
    net: &NetworkSpec,
    view: &WeightView<'_>,
    assign: &PrecisionAssignment,
    batch: &Batch,
) -> Result<ForwardPass> {
    let geom = net.geometry()?;
    check_weights(&geom, view)?;
    batch.check(net)?;
    if assign.layers.len() != geom.len() {
        return Err(Error::Shape(format!(
            "assignment has {} layers, network {}",
            assign.layers.len(),
            geom.len()
        )));
    }
    let n = batch.len();
    let mut input = match assign.input {
        Some(fmt) => batch
            .images
            .iter()
            .map(|&x| quantize(x, fmt).map(|q| q.to_f64()))
            .collect::<Result<Vec<_>>>()?,
        None => batch.images.clone(),
    };
    let mut in_fmt = assign.input;
    let mut layers = Vec::with_capacity(geom.len());
    for (l, g) in geom.iter().enumerate() {
        let act = assign.layers[l].act;
        let vl = &view.layers[l];
        let (pre, activation) = match (&vl.quantized, in_fmt) {
            (Some(wq), Some(xf)) => {
                let out = integer_layer(g, wq, vl.bias, &input, xf, act, n)?;
                (out.pre_activation, out.activation)
            }
            _ => {
                let pre = kernels::layer_forward_f64(g, &vl.values, vl.bias, &input, n);
                let activation = pre
                    .iter()
                    .map(|&a| {
                        let y = if g.relu { relu(a) } else { a };
                        match act {
                            Some(fmt) => quantize(y, fmt).map(|q| q.to_f64()),
                            None => Ok(y),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                (pre, activation)
            }
        };
        let cache = finish_layer(g, input, pre, activation, n);
        input = cache.output(g);
        layers.push(cache);
        in_fmt = act;
    }
    let classes = geom.last().map(|g| g.pooled.len()).unwrap_or(0);
    let loss = tensornet::softmax_cross_entropy(&input, &batch.labels, classes);
    Ok(ForwardPass {
        batch_size: n,
        layers,
        logits: input,
        labels: batch.labels.clone(),
        loss,
    })
}

/// Convenience wrapper: builds the weight view from master parameters.
pub fn forward_quantized_params(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    batch: &Batch,
) -> Result<ForwardPass> {
    let view = quantize_weights(params, assign)?;
    forward_quantized(net, &view, assign, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::{forward_float, LayerParams, LayerSpec, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(bits: u8, frac: i32) -> QFormat {
        QFormat::signed(bits, frac).unwrap()
    }

    fn small_net() -> NetworkSpec {
        NetworkSpec::new(
            Shape::new(1, 8, 8),
            vec![
                LayerSpec::conv("c1", 1, 4, 3).with_pool(),
                LayerSpec::conv("c2", 4, 4, 3).with_pool(),
                LayerSpec::fc("f1", 16, 8),
                LayerSpec::fc("f2", 8, 3).with_relu(false),
            ],
        )
        .unwrap()
    }

    fn batch(net: &NetworkSpec, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            images: (0..n * net.input.len()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            labels: (0..n).map(|_| rng.gen_range(0..net.num_classes())).collect(),
        }
    }

    #[test]
    fn effective_relu_examples() {
        let neg = Accumulator::from_real(-0.5, 12).unwrap();
        assert_eq!(effective_relu(neg, Some(q(8, 6))), 0.0);
        assert_eq!(effective_relu(neg, Some(q(4, 0))), 0.0);
        assert_eq!(effective_relu(neg, None), 0.0);
        let a = Accumulator::from_real(0.3, 12).unwrap();
        assert_eq!(effective_relu(a, Some(q(8, 6))), 0.296875);
        let big = Accumulator::from_real(300.0, 12).unwrap();
        assert_eq!(effective_relu(big, Some(q(8, 6))), 1.984375);
        assert_eq!(effective_relu(big, None), 300.0);
    }

    #[test]
    fn staircase_is_monotone_with_lsb_steps() {
        let fmt = q(4, 2);
        let mut prev = 0.0;
        for raw in -400..400 {
            let y = effective_relu(Accumulator::from_raw(raw, 6), Some(fmt));
            assert!(y >= prev || raw <= 0);
            let step = y - prev;
            assert!(step == 0.0 || step == fmt.lsb() || raw <= -399);
            prev = y;
        }
        assert_eq!(prev, fmt.max_value());
    }

    #[test]
    fn single_layer_integer_pipeline() {
        let net = NetworkSpec::new(
            Shape::flat(2),
            vec![LayerSpec::fc("fc", 2, 1).with_relu(false)],
        )
        .unwrap();
        let params = Parameters {
            layers: vec![LayerParams {
                weights: vec![0.5, 0.25],
                bias: vec![0.0],
            }],
        };
        let assign = PrecisionAssignment {
            input: Some(q(8, 6)),
            layers: vec![LayerPrecision {
                weight_bits: Precision::Fixed(8),
                act: Some(q(8, 6)),
            }],
        };
        let b = Batch {
            images: vec![0.5, 0.5],
            labels: vec![0],
        };
        let pass = forward_quantized_params(&net, &params, &assign, &b).unwrap();
        assert_eq!(pass.logits, vec![0.375]);
        assert_eq!(pass.layers[0].pre_activation, vec![0.375]);
    }

    #[test]
    fn weight_view_example() {
        let params = Parameters {
            layers: vec![LayerParams {
                weights: vec![0.3],
                bias: vec![0.0],
            }],
        };
        let assign = PrecisionAssignment {
            input: None,
            layers: vec![LayerPrecision {
                weight_bits: Precision::Fixed(8),
                act: None,
            }],
        };
        let view = quantize_weights(&params, &assign).unwrap();
        let qt = view.layers[0].quantized.as_ref().unwrap();
        assert_eq!(qt.format(), q(8, 7));
        assert_eq!(qt.raw(), &[38]);
        assert_eq!(view.layers[0].values[0], 0.296875);
        assert_eq!(params.layers[0].weights, vec![0.3]);
    }

    #[test]
    fn float_view_is_the_master_copy() {
        let net = small_net();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let view = quantize_weights(&params, &PrecisionAssignment::float(4)).unwrap();
        assert_eq!(view.to_params(), params);
        assert!(view.layers.iter().all(|l| matches!(l.values, Cow::Borrowed(_))));
    }

    #[test]
    fn saturated_weights_error_bounded_by_clipping() {
        // a fixed format narrower than the tensor's range clips the outliers
        let w = vec![3.0, -0.2, 0.1];
        let fmt = q(4, 3);
        let qt = QTensor::quantize(&w, fmt).unwrap();
        let back = qt.dequantize();
        assert_eq!(back[0], fmt.max_value());
        for (x, y) in w.iter().zip(&back) {
            let clip = (x - x.clamp(fmt.min_value(), fmt.max_value())).abs();
            assert!((x - y).abs() <= clip + fmt.lsb() / 2.0);
        }
    }

    #[test]
    fn float_assignment_matches_float_pass() {
        let net = small_net();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = batch(&net, 5, 11);
        let a = forward_float(&net, &params, &b).unwrap();
        let q = forward_quantized_params(&net, &params, &PrecisionAssignment::float(4), &b).unwrap();
        assert_eq!(a, q);
    }

    #[test]
    fn calibration_uses_net_bit_widths() {
        let net = small_net().with_precision(Precision::Fixed(8), Precision::Fixed(4));
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let assign = calibrate(&net, &params, &batch(&net, 16, 1)).unwrap();
        assert_eq!(assign.input.unwrap().total_bits(), 4);
        assert_eq!(assign.layers[0].act.unwrap().total_bits(), 4);
        assert_eq!(assign.layers[3].act.unwrap().total_bits(), 16);
        assert_eq!(
            assign.uniform_bits(),
            Some((Precision::Fixed(8), Precision::Fixed(4)))
        );
        let float = calibrate(&small_net(), &params, &batch(&net, 4, 1)).unwrap();
        assert!(float.is_float());
    }

    #[test]
    fn integer_steps_are_exact() {
        // pre-activations equal a real-arithmetic recomputation from the
        // quantized operands
        let net = small_net().with_precision(Precision::Fixed(8), Precision::Fixed(8));
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = batch(&net, 3, 5);
        let assign = calibrate(&net, &params, &b).unwrap();
        let view = quantize_weights(&params, &assign).unwrap();
        let pass = forward_quantized(&net, &view, &assign, &b).unwrap();
        let geom = net.geometry().unwrap();
        for (l, g) in geom.iter().enumerate() {
            let cache = &pass.layers[l];
            let acc_frac = view.layers[l].quantized.as_ref().unwrap().format().frac_bits()
                + if l == 0 { assign.input } else { assign.layers[l - 1].act }
                    .unwrap()
                    .frac_bits();
            let bias: Vec<f64> = params.layers[l]
                .bias
                .iter()
                .map(|&x| Accumulator::from_real(x, acc_frac).unwrap().to_f64())
                .collect();
            let real = kernels::layer_forward_f64(g, &view.layers[l].values, &bias, &cache.input, 3);
            for (x, y) in real.iter().zip(&cache.pre_activation) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            let fmt = assign.layers[l].act.unwrap();
            for (&a, &y) in cache.pre_activation.iter().zip(&cache.activation) {
                let want = if g.relu { a.max(0.0) } else { a };
                assert_eq!(y, quantize(want, fmt).unwrap().to_f64());
            }
        }
    }

    #[test]
    fn wide_operands_approach_the_float_pass() {
        let net = small_net();
        for seed in 0..3 {
            let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = batch(&net, 4, seed + 100);
            let float = forward_float(&net, &params, &b).unwrap();
            let wide = net.with_precision(Precision::Fixed(32), Precision::Fixed(32));
            let assign = calibrate(&wide, &params, &b).unwrap();
            let pass = forward_quantized_params(&net, &params, &assign, &b).unwrap();
            let scale = float.logits.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (x, y) in float.logits.iter().zip(&pass.logits) {
                assert!((x - y).abs() <= 1e-4 * scale, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn deviation_shrinks_with_bit_width() {
        let net = small_net();
        let params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = batch(&net, 8, 70);
        let float = forward_float(&net, &params, &b).unwrap();
        let mut last = f64::INFINITY;
        for bits in [4, 8, 16, 32] {
            let wide = net.with_precision(Precision::Fixed(bits), Precision::Fixed(bits));
            let assign = calibrate(&wide, &params, &b).unwrap();
            let pass = forward_quantized_params(&net, &params, &assign, &b).unwrap();
            let dev = float
                .layers
                .iter()
                .zip(&pass.layers)
                .flat_map(|(f, q)| f.activation.iter().zip(&q.activation))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(dev <= last, "{bits} bits: {dev} > {last}");
            last = dev;
        }
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let net = small_net();
        let mut params = Parameters::init_he(&net, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        params.layers[1].weights[0] = f64::NAN;
        let assign = PrecisionAssignment {
            input: None,
            layers: vec![
                LayerPrecision {
                    weight_bits: Precision::Fixed(8),
                    act: None
                };
                4
            ],
        };
        assert!(matches!(
            quantize_weights(&params, &assign),
            Err(Error::NonFinite(_))
        ));
    }
}
