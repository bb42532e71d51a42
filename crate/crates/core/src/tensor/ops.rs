//! Forward/backward kernel pairs for every differentiable operation.
//!
//! Convolution is plain cross-correlation (no kernel flip) with zero padding.
//! Bilinear resizing samples half-pixel centers. All kernels are exact f64 and
//! deterministic: parallel loops only ever split over disjoint output slices,
//! and each element is reduced in a fixed sequential order.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

// H' = (H + 2·padding − kh)/stride + 1, integer division (floor), the
// standard convolution arithmetic. Input rows beyond the last window start
// are ignored by the forward pass and receive zero gradient.
fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if span < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} larger than padded input {span}"),
        ));
    }
    Ok((span - kernel) / stride + 1)
}

fn conv_check(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<()> {
    let (_, cin, _, _) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {cin} != weight input channels {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel dims must be odd, got {kh}x{kw}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} != [{cout}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
    }
    Ok(())
}

/// Direct cross-correlation with zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv_check(input, weight, bias, stride)?;
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;

    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(chunk, out_c)| {
            let (ni, oc) = (chunk / cout, chunk % cout);
            out_c.fill(bd[oc]);
            for ic in 0..cin {
                let x_c = &x[(ni * cin + ic) * h * w..(ni * cin + ic + 1) * h * w];
                let w_c = &wd[(oc * cin + ic) * kh * kw..(oc * cin + ic + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w_c[ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                            let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                            // valid ox range: 0 <= ox*stride + kx - padding < w
                            let (lo, hi) = valid_range(ow, w, stride, kx, padding);
                            if hi <= lo {
                                continue;
                            }
                            if stride == 1 {
                                let base = lo + kx - padding;
                                for (o, xv) in out_row[lo..hi]
                                    .iter_mut()
                                    .zip(&x_row[base..base + (hi - lo)])
                                {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    out_row[ox] += wv * x_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Output-coordinate interval whose source column lands in-bounds.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, padding: usize) -> (usize, usize) {
    // need ox*stride + k - padding in [0, in_len)
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi_excl = if in_len + padding > k {
        ((in_len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Gradients for input, weight and bias given the output gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    out_grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let (gn, gc, oh, ow) = out_grad.dims4()?;
    if gn != n || gc != cout {
        return Err(Error::shape(
            "conv2d_backward",
            format!("out_grad batch/channels {gn}x{gc} != {n}x{cout}"),
        ));
    }
    let x = input.data();
    let wd = weight.data();
    let g = out_grad.data();

    let mut grad_bias = Tensor::zeros(&[cout]);
    for oc in 0..cout {
        let mut acc = 0.0;
        for ni in 0..n {
            let g_c = &g[(ni * cout + oc) * oh * ow..(ni * cout + oc + 1) * oh * ow];
            for v in g_c {
                acc += v;
            }
        }
        grad_bias.data_mut()[oc] = acc;
    }

    let mut grad_weight = Tensor::zeros(&[cout, cin, kh, kw]);
    grad_weight
        .data_mut()
        .par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(oc, gw_oc)| {
            for ic in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            let g_c = &g[(ni * cout + oc) * oh * ow..(ni * cout + oc + 1) * oh * ow];
                            let x_c = &x[(ni * cin + ic) * h * w..(ni * cin + ic + 1) * h * w];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                                let g_row = &g_c[oy * ow..(oy + 1) * ow];
                                let (lo, hi) = valid_range(ow, w, stride, kx, padding);
                                for ox in lo..hi {
                                    acc += g_row[ox] * x_row[ox * stride + kx - padding];
                                }
                            }
                        }
                        gw_oc[(ic * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });

    let mut grad_input = Tensor::zeros(&[n, cin, h, w]);
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(chunk, gi_c)| {
            let (ni, ic) = (chunk / cin, chunk % cin);
            for oc in 0..cout {
                let g_c = &g[(ni * cout + oc) * oh * ow..(ni * cout + oc + 1) * oh * ow];
                let w_c = &wd[(oc * cin + ic) * kh * kw..(oc * cin + ic + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w_c[ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let gi_row = &mut gi_c[iy as usize * w..(iy as usize + 1) * w];
                            let g_row = &g_c[oy * ow..(oy + 1) * ow];
                            let (lo, hi) = valid_range(ow, w, stride, kx, padding);
                            for ox in lo..hi {
                                gi_row[ox * stride + kx - padding] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        });

    Ok((grad_input, grad_weight, grad_bias))
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Statistics actually used for normalization, saved for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

pub fn batch_norm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut BnRunning,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} must both be [{c}] for {c}-channel input",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if running.mean.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("running stats have {} channels, input has {c}", running.mean.len()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::shape("batch_norm", "eps must be > 0".to_string()));
    }

    let count = (n * h * w) as f64;
    let x = input.data();
    let plane = h * w;

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (ci, m) in mean.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &x[base..base + plane] {
                        acc += v;
                    }
                }
                *m = acc / count;
            }
            for (ci, vv) in var.iter_mut().enumerate() {
                let m = mean[ci];
                let mut acc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &x[base..base + plane] {
                        let d = v - m;
                        acc += d * d;
                    }
                }
                *vv = acc / count;
            }
            for ci in 0..c {
                running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                running.var[ci] = (1.0 - momentum) * running.var[ci] + momentum * var[ci];
            }
            (mean, var)
        }
        BnMode::Eval => (running.mean.clone(), running.var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    let o = out.data_mut();
    let gd = gamma.data();
    let bd = beta.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (m, s, gm, bt) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
            for i in base..base + plane {
                o[i] = gm * (x[i] - m) * s + bt;
            }
        }
    }
    Ok((
        out,
        BnCache {
            mean,
            inv_std,
            mode,
        },
    ))
}

pub fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
    out_grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let count = (n * h * w) as f64;
    let x = input.data();
    let g = out_grad.data();
    let gd = gamma.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);

    for ci in 0..c {
        let m = cache.mean[ci];
        let s = cache.inv_std[ci];
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let xhat = (x[i] - m) * s;
                sum_g += g[i];
                sum_g_xhat += g[i] * xhat;
            }
        }
        grad_beta.data_mut()[ci] = sum_g;
        grad_gamma.data_mut()[ci] = sum_g_xhat;

        let gi = grad_input.data_mut();
        match cache.mode {
            BnMode::Train => {
                let k = gd[ci] * s / count;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        let xhat = (x[i] - m) * s;
                        gi[i] = k * (count * g[i] - sum_g - xhat * sum_g_xhat);
                    }
                }
            }
            BnMode::Eval => {
                let k = gd[ci] * s;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        gi[i] = k * g[i];
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(input: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(out_grad)
        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.data_mut() {
        *v = sigmoid(*v);
    }
    out
}

/// Uses the saved output: dσ/dx = σ(x)·(1−σ(x)).
pub fn sigmoid_backward(output: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    output
        .data()
        .iter()
        .zip(out_grad)
        .map(|(y, g)| g * y * (1.0 - y))
        .collect()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.data_mut() {
        *v = softplus(*v);
    }
    out
}

pub fn softplus_backward(input: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(out_grad)
        .map(|(x, g)| g * sigmoid(*x))
        .collect()
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

/// Per-axis source taps for half-pixel-center sampling.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear_forward(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("output dims must be >= 1, got {out_h}x{out_w}"),
        ));
    }
    if out_h == h && out_w == w {
        let mut out = input.clone();
        out.clear_grad();
        return Ok(out);
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let x = input.data();
    let o = out.data_mut();
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut o[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst_row[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward(
    in_shape: &[usize],
    out_grad: &Tensor,
) -> Result<Tensor> {
    let (n, c, oh, ow) = out_grad.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut grad_input = Tensor::zeros(in_shape);
    if oh == h && ow == w {
        grad_input.data_mut().copy_from_slice(out_grad.data());
        return Ok(grad_input);
    }
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    let g = out_grad.data();
    let gi = grad_input.data_mut();
    for nc in 0..n * c {
        let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gi[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = src[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Ok(grad_input)
}

// ---------------------------------------------------------------------------
// global average pooling
// ---------------------------------------------------------------------------

pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, 1, 1]);
    let x = input.data();
    let o = out.data_mut();
    for nc in 0..n * c {
        let mut acc = 0.0;
        for v in &x[nc * plane..(nc + 1) * plane] {
            acc += v;
        }
        o[nc] = acc / plane as f64;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(in_shape: &[usize], out_grad: &Tensor) -> Result<Tensor> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let plane = h * w;
    let mut grad_input = Tensor::zeros(in_shape);
    let g = out_grad.data();
    let gi = grad_input.data_mut();
    for (nc, gv) in g.iter().enumerate() {
        let share = gv / plane as f64;
        for v in &mut gi[nc * plane..(nc + 1) * plane] {
            *v = share;
        }
    }
    Ok(grad_input)
}

// ---------------------------------------------------------------------------
// weighted feature merge (normalized per-sample scalar weights)
// ---------------------------------------------------------------------------

/// `out[n] = Σ_b w_b[n]·f_b[n] / (Σ_b w_b[n] + eps)`.
///
/// Weights carry one scalar per sample (any shape with N elements).
pub fn weighted_merge_forward(
    features: [&Tensor; 3],
    weights: [&Tensor; 3],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = features[0].dims4()?;
    for f in &features[1..] {
        if f.shape() != features[0].shape() {
            return Err(Error::shape(
                "weighted_merge",
                format!("feature shapes differ: {:?} vs {:?}", features[0].shape(), f.shape()),
            ));
        }
    }
    for wt in &weights {
        if wt.numel() != n {
            return Err(Error::shape(
                "weighted_merge",
                format!("weights must hold one scalar per sample ({n}), got {}", wt.numel()),
            ));
        }
    }
    let plane = c * h * w;
    let mut out = Tensor::zeros(features[0].shape());
    let o = out.data_mut();
    for ni in 0..n {
        let ws = [weights[0].data()[ni], weights[1].data()[ni], weights[2].data()[ni]];
        let denom = ws[0] + ws[1] + ws[2] + eps;
        let base = ni * plane;
        for b in 0..3 {
            let coef = ws[b] / denom;
            if coef == 0.0 {
                continue;
            }
            let fb = &features[b].data()[base..base + plane];
            for (ov, fv) in o[base..base + plane].iter_mut().zip(fb) {
                *ov += coef * fv;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
pub fn weighted_merge_backward(
    features: [&Tensor; 3],
    weights: [&Tensor; 3],
    eps: f64,
    output: &Tensor,
    out_grad: &Tensor,
) -> Result<([Tensor; 3], [Tensor; 3])> {
    let (n, c, h, w) = features[0].dims4()?;
    let plane = c * h * w;
    let g = out_grad.data();
    let o = output.data();

    let mut grad_f = [
        Tensor::zeros(features[0].shape()),
        Tensor::zeros(features[0].shape()),
        Tensor::zeros(features[0].shape()),
    ];
    let mut grad_w = [
        Tensor::zeros(weights[0].shape()),
        Tensor::zeros(weights[1].shape()),
        Tensor::zeros(weights[2].shape()),
    ];

    for ni in 0..n {
        let ws = [weights[0].data()[ni], weights[1].data()[ni], weights[2].data()[ni]];
        let denom = ws[0] + ws[1] + ws[2] + eps;
        let base = ni * plane;
        for b in 0..3 {
            let coef = ws[b] / denom;
            let fb = &features[b].data()[base..base + plane];
            let gf = &mut grad_f[b].data_mut()[base..base + plane];
            let mut wacc = 0.0;
            for i in 0..plane {
                let gv = g[base + i];
                gf[i] = coef * gv;
                wacc += gv * (fb[i] - o[base + i]);
            }
            grad_w[b].data_mut()[ni] = wacc / denom;
        }
    }
    Ok((grad_f, grad_w))
}
