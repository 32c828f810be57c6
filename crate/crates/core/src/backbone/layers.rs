//! Layer primitives with matching forward and backward passes. Every
//! backward here is exact for the forward above it, up to the stated
//! subgradient conventions (ReLU at 0, argmax ties).

use super::tensor::{FeatureMap, Tensor};

pub(crate) fn conv_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

/// Output rows with an in-bounds source row: 0 <= o*stride + off < extent_in,
/// clipped to [0, extent_out). Returned as a half-open range.
#[inline]
fn valid_range(extent_in: usize, extent_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_num = extent_in as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = hi_num as usize / stride + 1;
    (lo.min(extent_out), hi.min(extent_out))
}

/// Direct convolution, kernel-stationary: for each kernel tap the inner loop
/// is a row-slice axpy, which keeps the hot path vectorizable. `kernel` is
/// [out_c, in_c, kh, kw]; zero padding.
pub(crate) fn conv2d_forward(
    input: &FeatureMap,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> FeatureMap {
    let [out_c, in_c, kh, kw] = kernel_dims(kernel);
    debug_assert_eq!(in_c, input.channels);
    let (ih, iw) = (input.height, input.width);
    let oh = conv_out_size(ih, kh, stride, pad);
    let ow = conv_out_size(iw, kw, stride, pad);
    let mut out = FeatureMap::zeros(out_c, oh, ow);
    let kdata = kernel.data();
    for oc in 0..out_c {
        let out_ch = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            out_ch.fill(b.data()[oc]);
        }
        for ic in 0..in_c {
            let in_ch = &input.data[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..kh {
                let off_y = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = valid_range(ih, oh, stride, off_y);
                for kx in 0..kw {
                    let w = kdata[((oc * in_c + ic) * kh + ky) * kw + kx];
                    let off_x = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = valid_range(iw, ow, stride, off_x);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + off_y;
                        let in_row = &in_ch[iy as usize * iw..][..iw];
                        let out_row = &mut out_ch[oy * ow..][..ow];
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + off_x) as usize;
                            let n = ox_hi - ox_lo;
                            for (d, s) in out_row[ox_lo..ox_hi].iter_mut().zip(&in_row[ix0..ix0 + n])
                            {
                                *d += w * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as isize + off_x;
                                out_row[ox] += w * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the input gradient. Same
/// kernel-stationary structure as the forward pass, with the kernel-gradient
/// dot product and the input-gradient axpy fused per tap.
pub(crate) fn conv2d_backward(
    input: &FeatureMap,
    kernel: &Tensor,
    grad_out: &FeatureMap,
    stride: usize,
    pad: usize,
    grad_kernel: &mut Tensor,
    mut grad_bias: Option<&mut Tensor>,
) -> FeatureMap {
    let [out_c, in_c, kh, kw] = kernel_dims(kernel);
    let (ih, iw) = (input.height, input.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let mut grad_in = FeatureMap::zeros(input.channels, ih, iw);
    let kdata = kernel.data();
    let gkdata = grad_kernel.data_mut();
    for oc in 0..out_c {
        let g_ch = &grad_out.data[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = grad_bias.as_deref_mut() {
            b.data_mut()[oc] += g_ch.iter().sum::<f64>();
        }
        for ic in 0..in_c {
            let in_ch = &input.data[ic * ih * iw..(ic + 1) * ih * iw];
            let gi_ch_start = ic * ih * iw;
            for ky in 0..kh {
                let off_y = ky as isize - pad as isize;
                let (oy_lo, oy_hi) = valid_range(ih, oh, stride, off_y);
                for kx in 0..kw {
                    let kidx = ((oc * in_c + ic) * kh + ky) * kw + kx;
                    let w = kdata[kidx];
                    let off_x = kx as isize - pad as isize;
                    let (ox_lo, ox_hi) = valid_range(iw, ow, stride, off_x);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut gw = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride) as isize + off_y) as usize;
                        let g_row = &g_ch[oy * ow..][..ow];
                        let in_row = &in_ch[iy * iw..][..iw];
                        let gi_row = &mut grad_in.data[gi_ch_start + iy * iw..][..iw];
                        if stride == 1 {
                            let ix0 = (ox_lo as isize + off_x) as usize;
                            let n = ox_hi - ox_lo;
                            let g_slice = &g_row[ox_lo..ox_hi];
                            let in_slice = &in_row[ix0..ix0 + n];
                            let gi_slice = &mut gi_row[ix0..ix0 + n];
                            for ((g, x), gi) in g_slice.iter().zip(in_slice).zip(gi_slice) {
                                gw += g * x;
                                *gi += g * w;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + off_x) as usize;
                                let g = g_row[ox];
                                gw += g * in_row[ix];
                                gi_row[ix] += g * w;
                            }
                        }
                    }
                    gkdata[kidx] += gw;
                }
            }
        }
    }
    grad_in
}

fn kernel_dims(kernel: &Tensor) -> [usize; 4] {
    let s = kernel.shape();
    debug_assert_eq!(s.len(), 4);
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn relu_forward(input: &FeatureMap) -> FeatureMap {
    let mut out = input.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Derivative 0 at exactly 0.
pub(crate) fn relu_backward(pre: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    debug_assert!(pre.same_shape(grad_out));
    let mut grad_in = grad_out.clone();
    for (g, &p) in grad_in.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    grad_in
}

/// 3x3 max pool, stride 2, pad 1. Out-of-bounds taps are ignored (never
/// selected); the first maximal element in row-major window order wins ties.
/// Returns the output and the flat input index chosen per output cell.
pub(crate) fn maxpool3_forward(input: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let oh = conv_out_size(input.height, 3, 2, 1);
    let ow = conv_out_size(input.width, 3, 2, 1);
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    let mut argmax = vec![0usize; input.channels * oh * ow];
    for c in 0..input.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..3usize {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let idx = input.idx(c, iy as usize, ix as usize);
                        let v = input.data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.set(c, oy, ox, best);
                argmax[out.idx(c, oy, ox)] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool3_backward(
    argmax: &[usize],
    input_shape: (usize, usize, usize),
    grad_out: &FeatureMap,
) -> FeatureMap {
    let (c, h, w) = input_shape;
    let mut grad_in = FeatureMap::zeros(c, h, w);
    for (cell, &src) in argmax.iter().enumerate() {
        grad_in.data[src] += grad_out.data[cell];
    }
    grad_in
}

/// Global average pool: one mean per channel.
pub(crate) fn gap_forward(input: &FeatureMap) -> Vec<f64> {
    let area = (input.height * input.width) as f64;
    (0..input.channels)
        .map(|c| {
            let start = c * input.height * input.width;
            let end = start + input.height * input.width;
            input.data[start..end].iter().sum::<f64>() / area
        })
        .collect()
}

pub(crate) fn gap_backward(grad_out: &[f64], shape: (usize, usize, usize)) -> FeatureMap {
    let (c, h, w) = shape;
    let area = (h * w) as f64;
    let mut grad_in = FeatureMap::zeros(c, h, w);
    for (ci, &g) in grad_out.iter().enumerate() {
        let v = g / area;
        let start = ci * h * w;
        for cell in &mut grad_in.data[start..start + h * w] {
            *cell = v;
        }
    }
    grad_in
}

/// Fully connected: out = W x + b with W as [out, in].
pub(crate) fn linear_forward(weight: &Tensor, bias: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
    debug_assert_eq!(in_n, x.len());
    let wdata = weight.data();
    (0..out_n)
        .map(|o| {
            let row = o * in_n;
            bias.data()[o]
                + wdata[row..row + in_n]
                    .iter()
                    .zip(x)
                    .map(|(w, xi)| w * xi)
                    .sum::<f64>()
        })
        .collect()
}

pub(crate) fn linear_backward(
    weight: &Tensor,
    x: &[f64],
    grad_out: &[f64],
    grad_weight: &mut Tensor,
    grad_bias: &mut Tensor,
) -> Vec<f64> {
    let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
    let wdata = weight.data();
    let gw = grad_weight.data_mut();
    let mut grad_x = vec![0.0; in_n];
    for (o, &g) in grad_out.iter().enumerate().take(out_n) {
        grad_bias.data_mut()[o] += g;
        let row = o * in_n;
        for i in 0..in_n {
            gw[row + i] += g * x[i];
            grad_x[i] += g * wdata[row + i];
        }
    }
    grad_x
}
