//! Convolution, fully-connected and pooling kernels.
//!
//! Forward kernels are generic over the element type so the float pass and
//! the integer accumulation pass share one loop structure. Everything runs
//! sequentially in a fixed order, so results are reproducible bit for bit.

use std::ops::{AddAssign, Mul};

use super::{LayerGeometry, LayerKind, Shape};

/// Output indices `o` in `[lo, hi)` for which `o * stride + offset` lands in
/// `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

/// One sample through a convolution or fully-connected layer:
/// `out = b + W x`, bias first, then products in weight order.
pub(crate) fn layer_forward_sample<T>(g: &LayerGeometry, w: &[T], b: &[T], x: &[T], out: &mut [T])
where
    T: Copy + AddAssign + Mul<Output = T>,
{
    match g.kind {
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            for o in 0..out_features {
                let row = &w[o * in_features..(o + 1) * in_features];
                let mut acc = b[o];
                for (&wv, &xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                out[o] = acc;
            }
        }
        LayerKind::Convolution {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let Shape { height, width, .. } = g.input;
            let (oh, ow) = (g.output.height, g.output.width);
            let plane = oh * ow;
            for o in 0..out_channels {
                let out_o = &mut out[o * plane..(o + 1) * plane];
                out_o.fill(b[o]);
                for c in 0..in_channels {
                    let x_c = &x[c * height * width..(c + 1) * height * width];
                    for ky in 0..kernel {
                        let (y_lo, y_hi) =
                            valid_range(oh, height, stride, ky as isize - padding as isize);
                        for kx in 0..kernel {
                            let wv = w[((o * in_channels + c) * kernel + ky) * kernel + kx];
                            let off_x = kx as isize - padding as isize;
                            let (x_lo, x_hi) = valid_range(ow, width, stride, off_x);
                            for oy in y_lo..y_hi {
                                let iy = (oy * stride + ky) - padding;
                                let x_row = &x_c[iy * width..(iy + 1) * width];
                                let out_row = &mut out_o[oy * ow..(oy + 1) * ow];
                                for ox in x_lo..x_hi {
                                    let ix = (ox as isize * stride as isize + off_x) as usize;
                                    out_row[ox] += wv * x_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn layer_forward_f64(
    g: &LayerGeometry,
    w: &[f64],
    b: &[f64],
    input: &[f64],
    n: usize,
) -> Vec<f64> {
    let (in_len, out_len) = (g.input.len(), g.output.len());
    let mut out = vec![0.0; n * out_len];
    for (x, y) in input.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
        layer_forward_sample(g, w, b, x, y);
    }
    out
}

/// Gradients of one layer for a batch. Returns `(dW, db, dx)`; `dx` is empty
/// unless `want_input_grad`.
pub(crate) fn layer_backward_f64(
    g: &LayerGeometry,
    w: &[f64],
    input: &[f64],
    d_a: &[f64],
    n: usize,
    want_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (in_len, out_len) = (g.input.len(), g.output.len());
    let mut dw = vec![0.0; g.weight_len];
    let mut db = vec![0.0; g.bias_len];
    let mut dx = if want_input_grad {
        vec![0.0; n * in_len]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let x = &input[s * in_len..(s + 1) * in_len];
        let d = &d_a[s * out_len..(s + 1) * out_len];
        let dx_s = if want_input_grad {
            Some(&mut dx[s * in_len..(s + 1) * in_len])
        } else {
            None
        };
        backward_sample(g, w, x, d, &mut dw, &mut db, dx_s);
    }
    (dw, db, dx)
}

fn backward_sample(
    g: &LayerGeometry,
    w: &[f64],
    x: &[f64],
    d: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    match g.kind {
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            for o in 0..out_features {
                let dv = d[o];
                db[o] += dv;
                if dv == 0.0 {
                    continue;
                }
                let row = o * in_features..(o + 1) * in_features;
                for (gw, &xv) in dw[row.clone()].iter_mut().zip(x) {
                    *gw += dv * xv;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    for (gx, &wv) in dx.iter_mut().zip(&w[row]) {
                        *gx += wv * dv;
                    }
                }
            }
        }
        LayerKind::Convolution {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let Shape { height, width, .. } = g.input;
            let (oh, ow) = (g.output.height, g.output.width);
            let plane = oh * ow;
            for o in 0..out_channels {
                let d_o = &d[o * plane..(o + 1) * plane];
                db[o] += d_o.iter().sum::<f64>();
                for c in 0..in_channels {
                    let x_c = &x[c * height * width..(c + 1) * height * width];
                    for ky in 0..kernel {
                        let (y_lo, y_hi) =
                            valid_range(oh, height, stride, ky as isize - padding as isize);
                        for kx in 0..kernel {
                            let widx = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                            let wv = w[widx];
                            let off_x = kx as isize - padding as isize;
                            let (x_lo, x_hi) = valid_range(ow, width, stride, off_x);
                            let mut acc = 0.0;
                            for oy in y_lo..y_hi {
                                let iy = (oy * stride + ky) - padding;
                                let d_row = &d_o[oy * ow..(oy + 1) * ow];
                                let x_row = &x_c[iy * width..(iy + 1) * width];
                                for ox in x_lo..x_hi {
                                    let ix = (ox as isize * stride as isize + off_x) as usize;
                                    acc += d_row[ox] * x_row[ix];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    let base = c * height * width + iy * width;
                                    for ox in x_lo..x_hi {
                                        let ix = (ox as isize * stride as isize + off_x) as usize;
                                        dx[base + ix] += wv * d_row[ox];
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max-pool winners, first maximum in scan order on ties.
/// Indices are relative to each sample's pre-pool buffer.
pub(crate) fn max_pool_argmax(act: &[f64], shape: Shape, n: usize) -> Vec<u32> {
    let (ph, pw) = (shape.height / 2, shape.width / 2);
    let per = shape.len();
    let mut idx = Vec::with_capacity(n * shape.channels * ph * pw);
    for s in 0..n {
        let a = &act[s * per..(s + 1) * per];
        for c in 0..shape.channels {
            let base = c * shape.height * shape.width;
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = base + 2 * py * shape.width + 2 * px;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * py + dy) * shape.width + 2 * px + dx;
                        if a[j] > a[best] {
                            best = j;
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
    }
    idx
}

/// Routes pooled gradients back to the winning positions.
pub(crate) fn unpool(d_pooled: &[f64], argmax: &[u32], full: usize, pooled: usize, n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * full];
    for (i, (&j, &g)) in argmax.iter().zip(d_pooled).enumerate() {
        d[(i / pooled) * full + j as usize] += g;
    }
    d
}
