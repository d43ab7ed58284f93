//! Gradient-mismatch measurements.
//!
//! [`mismatch_per_layer`] compares the presumed gradients computed over a
//! quantized forward pass against float-network gradients at the same master
//! weights. [`descent_check`] asks whether the presumed direction still goes
//! downhill on the quantized loss, using steps large enough to cross
//! activation staircase steps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qforward::{forward_quantized, quantize_weights, PrecisionAssignment, WeightView};
use crate::tensornet::{backward_presumed, forward_float, Batch, GradientSet, NetworkSpec, Parameters};

/// Activation LSB assumed when every activation is full precision.
pub const FLOAT_REFERENCE_LSB: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMismatch {
    pub layer: String,
    /// Mean over batches where both gradients were nonzero.
    pub cosine_mean: Option<f64>,
    /// Mean of `|G_q - G_f| / |G_f|` over the same batches.
    pub rel_err_mean: Option<f64>,
    pub defined_batches: usize,
    /// `"undefined"` when no batch gave two nonzero gradients.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub batches: usize,
    pub assignment: PrecisionAssignment,
    /// Bottom layer first.
    pub layers: Vec<LayerMismatch>,
}

impl MismatchReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "cosine_mean", "rel_err_mean", "flag"])?;
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for l in &self.layers {
            w.write_record([
                l.layer.clone(),
                num(l.cosine_mean),
                num(l.rel_err_mean),
                l.flag.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `mismatch.csv` and `mismatch.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("mismatch.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(file)?;
        let json_path = dir.join("mismatch.json");
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }

    /// Spearman correlation between depth below the top layer and relative
    /// error, over layers with a defined error. `None` with fewer than two
    /// such layers or constant ranks.
    pub fn depth_trend(&self) -> Option<f64> {
        let top = self.layers.len().checked_sub(1)?;
        let (depth, err): (Vec<f64>, Vec<f64>) = self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(l, m)| m.rel_err_mean.map(|e| ((top - l) as f64, e)))
            .unzip();
        spearman(&depth, &err)
    }
}

fn layer_gradient(g: &GradientSet, l: usize) -> impl Iterator<Item = f64> + '_ {
    g.weights[l].iter().chain(&g.biases[l]).copied()
}

/// Per-layer agreement between presumed gradients under `assign` and the
/// float-network gradients at the same master weights.
pub fn mismatch_per_layer(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    batches: &[Batch],
) -> Result<MismatchReport> {
    if batches.is_empty() {
        return Err(Error::Empty("mismatch batches"));
    }
    let view = quantize_weights(params, assign)?;
    let num_layers = net.num_layers();
    let mut cos_sum = vec![0.0; num_layers];
    let mut err_sum = vec![0.0; num_layers];
    let mut defined = vec![0usize; num_layers];
    for batch in batches {
        let q_pass = forward_quantized(net, &view, assign, batch)?;
        let g_q = backward_presumed(net, &view, &q_pass)?;
        let f_pass = forward_float(net, params, batch)?;
        let g_f = backward_presumed(net, params, &f_pass)?;
        for l in 0..num_layers {
            let (mut dot, mut qq, mut ff, mut dd) = (0.0, 0.0, 0.0, 0.0);
            for (q, f) in layer_gradient(&g_q, l).zip(layer_gradient(&g_f, l)) {
                dot += q * f;
                qq += q * q;
                ff += f * f;
                dd += (q - f) * (q - f);
            }
            if qq == 0.0 || ff == 0.0 {
                continue;
            }
            cos_sum[l] += (dot / (qq.sqrt() * ff.sqrt())).clamp(-1.0, 1.0);
            err_sum[l] += (dd / ff).sqrt();
            defined[l] += 1;
        }
    }
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let n = defined[l];
            let mean = |s: f64| (n > 0).then(|| s / n as f64);
            LayerMismatch {
                layer: spec.name.clone(),
                cosine_mean: mean(cos_sum[l]),
                rel_err_mean: mean(err_sum[l]),
                defined_batches: n,
                flag: (n == 0).then(|| "undefined".to_string()),
            }
        })
        .collect();
    Ok(MismatchReport {
        batches: batches.len(),
        assignment: assign.clone(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// `[C(w + eta d) - C(w - eta d)] / (2 eta |d|)`, where `d` is the
    /// presumed gradient; positive when stepping against `d` lowers the
    /// quantized loss.
    pub directional_derivative: f64,
    /// Norm of the presumed gradient `d`.
    pub gradient_norm: f64,
    pub eta: f64,
    pub loss_minus: f64,
    pub loss_plus: f64,
    /// The quantized loss took the same value on both sides.
    pub flat: bool,
}

impl DescentReport {
    pub fn is_descent(&self) -> bool {
        !self.flat && self.directional_derivative > 0.0
    }
}

fn shifted_view<'a>(base: &WeightView<'a>, d: &GradientSet, t: f64) -> WeightView<'a> {
    let mut view = base.clone();
    for (l, layer) in view.layers.iter_mut().enumerate() {
        let moved: Vec<f64> = layer
            .values
            .iter()
            .zip(&d.weights[l])
            .map(|(w, g)| w + t * g)
            .collect();
        layer.values = moved.into();
        layer.quantized = None;
    }
    view
}

fn pass_activations(pass: &crate::tensornet::ForwardPass) -> impl Iterator<Item = f64> + '_ {
    pass.layers
        .iter()
        .flat_map(|c| c.pre_activation.iter().copied())
}

/// Central difference of the quantized loss along the presumed gradient.
///
/// The step moves the effective (already quantized) weights by `eta * d`,
/// with `eta` chosen so that the largest pre-activation moves by about
/// `step_scale` activation LSBs in a linearized float pass.
///
/// With fixed-point weights and inputs, pre-activations are exact grid sums
/// and can sit on a rounding tie, so even a vanishing step may not be flat.
pub fn descent_check(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    batch: &Batch,
    step_scale: f64,
) -> Result<DescentReport> {
    if !(step_scale > 0.0 && step_scale.is_finite()) {
        return Err(Error::Config(format!("step_scale must be > 0, got {step_scale}")));
    }
    let view = quantize_weights(params, assign)?;
    let pass = forward_quantized(net, &view, assign, batch)?;
    let d = backward_presumed(net, &view, &pass)?;
    let norm = d.weights.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let flat_report = |loss: f64| DescentReport {
        directional_derivative: 0.0,
        gradient_norm: norm,
        eta: 0.0,
        loss_minus: loss,
        loss_plus: loss,
        flat: true,
    };
    if norm == 0.0 {
        return Ok(flat_report(pass.loss));
    }

    // Sensitivity of pre-activations along d, from a small float probe.
    let float_assign = assign.with_float_activations();
    let probe = 1e-6 / norm;
    let base = forward_quantized(net, &shifted_view(&view, &d, 0.0), &float_assign, batch)?;
    let moved = forward_quantized(net, &shifted_view(&view, &d, probe), &float_assign, batch)?;
    let sensitivity = pass_activations(&base)
        .zip(pass_activations(&moved))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / probe;
    if sensitivity == 0.0 || !sensitivity.is_finite() {
        return Ok(flat_report(pass.loss));
    }
    let lsb = assign.min_act_lsb().unwrap_or(FLOAT_REFERENCE_LSB);
    let eta = step_scale * lsb / sensitivity;

    let loss_minus = forward_quantized(net, &shifted_view(&view, &d, -eta), assign, batch)?.loss;
    let loss_plus = forward_quantized(net, &shifted_view(&view, &d, eta), assign, batch)?.loss;
    if !loss_minus.is_finite() || !loss_plus.is_finite() {
        return Err(Error::NonFinite(if loss_minus.is_finite() { loss_plus } else { loss_minus }));
    }
    Ok(DescentReport {
        directional_derivative: (loss_plus - loss_minus) / (2.0 * eta * norm),
        gradient_norm: norm,
        eta,
        loss_minus,
        loss_plus,
        flat: loss_minus == loss_plus,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the average of their 1-based positions
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
