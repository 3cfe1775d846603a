//! Primitive operations: forward evaluation and vector-Jacobian products.
//!
//! Every primitive is a pure function of its input tensors, so replaying a
//! recorded graph reproduces forward values bit-exactly. Each op's analytic
//! gradient is covered by the finite-difference harness in
//! [`super::gradcheck`].

use std::sync::Arc;

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// A primitive application. Constant payloads (pooling extents, targets,
/// fixed weight vectors) ride along with the op; differentiable data comes
/// in through the node's inputs.
#[derive(Debug, Clone)]
pub enum Op {
    /// Graph input; holds no computation.
    Leaf,
    /// 2-D cross-correlation over (C,H,W) with square odd kernel.
    /// Inputs: `[x, kernel, bias]`.
    Conv2d { stride: usize, padding: usize },
    /// Fully-connected layer `W x + b`. `x` is flattened row-major.
    /// Inputs: `[x, weight, bias]`.
    Linear,
    Relu,
    Sigmoid,
    /// Elementwise sqrt of max(x, 0); derivative at 0 is taken as 0.
    Sqrt,
    Add,
    Sub,
    Mul,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Add a compile-time constant.
    AddConst(f64),
    /// Inputs `[x, s]` with `s` scalar: `x / s`.
    DivScalar,
    /// Inputs `[x, s]` with `s` scalar: `x * s`.
    MulScalar,
    /// Pixel-wise softmax over the channel axis of (C,H,W), C >= 2.
    SoftmaxChannels,
    /// Mean over the spec'd input window per output cell.
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    /// Nearest-neighbor 2x upsampling of (C,H,W).
    Upsample2x,
    /// `-log softmax(x)[target]` for a logit vector.
    CrossEntropy { target: usize },
    /// Inputs `[p_logits, q_logits]`: KL(softmax(p) || softmax(q)).
    KlDivergence,
    /// Mean over pixels of per-pixel channel cross-entropy against the
    /// target channel index raster (row-major H*W).
    PixelwiseCrossEntropy { targets: Arc<Vec<u8>> },
    Sum,
    Mean,
    /// (C,H,W) -> (H,W), summing over channels.
    SumChannelAxis,
    /// (H,W) -> (H,): per-row sums.
    SumRows,
    /// (H,W) -> (W,): per-column sums.
    SumCols,
    /// Weighted sum against a fixed tensor of identical shape.
    DotConst { weights: Arc<Tensor> },
    /// (C,H,W) -> (H,W) copy of channel `c`.
    SliceChannel { channel: usize },
    /// (C,H,W) -> (end-start,H,W) copy of a channel range.
    SliceChannels { start: usize, end: usize },
    /// Inputs `[a, b]`, both (Ci,H,W): channel concatenation.
    ConcatChannels,
    /// n scalar inputs -> vector of length n.
    StackScalars,
    /// Flat element `index` of the input as a scalar.
    IndexElement { index: usize },
    /// (C,H,W) -> (C,): global spatial mean per channel.
    MeanChannels,
}

impl Op {
    /// Human-readable name for diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear => "linear",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::DivScalar => "div_scalar",
            Op::MulScalar => "mul_scalar",
            Op::SoftmaxChannels => "softmax_channels",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::Upsample2x => "upsample2x",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDivergence => "kl_divergence",
            Op::PixelwiseCrossEntropy { .. } => "pixelwise_cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumChannelAxis => "sum_channel_axis",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::DotConst { .. } => "dot_const",
            Op::SliceChannel { .. } => "slice_channel",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels => "concat_channels",
            Op::StackScalars => "stack_scalars",
            Op::IndexElement { .. } => "index_element",
            Op::MeanChannels => "mean_channels",
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::config(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_scalar(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_scalar() {
        return Err(Error::usage(format!(
            "{what}: expected scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::config(format!(
            "conv2d: kernel {k} larger than padded input {padded}"
        )));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::config(format!(
            "conv2d: output extent not exact: ({input} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Valid output-index range `[lo, hi)` such that `o*stride + k_off - padding`
/// stays inside `[0, input_extent)`.
fn conv_valid_range(
    out_extent: usize,
    input_extent: usize,
    stride: usize,
    k_off: usize,
    padding: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let shift = k_off as i64 - padding as i64;
    // o*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    // o*s + shift <= input_extent - 1
    let hi_incl = (input_extent as i64 - 1 - shift).div_euclid(s);
    let lo = lo.clamp(0, out_extent as i64);
    let hi = (hi_incl + 1).clamp(lo, out_extent as i64);
    (lo as usize, hi as usize)
}

/// Copies an (h,w) plane into the interior of a zeroed (h+2p, w+2p) buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, p: usize, dst: &mut [f64]) {
    let pw = w + 2 * p;
    for r in 0..h {
        dst[(r + p) * pw + p..(r + p) * pw + p + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

/// 3x3 stride-1 forward over pre-padded input planes. The nine fused taps
/// per output element keep the inner loop vectorizable.
fn conv3x3_s1_forward(
    padded: &[f64],
    kd: &[f64],
    bd: &[f64],
    cin: usize,
    cout: usize,
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let (oh, ow) = (ph - 2, pw - 2);
    let mut out = vec![0.0f64; cout * oh * ow];
    for co in 0..cout {
        out[co * oh * ow..(co + 1) * oh * ow].fill(bd[co]);
        for ci in 0..cin {
            let kb = (co * cin + ci) * 9;
            let (k00, k01, k02) = (kd[kb], kd[kb + 1], kd[kb + 2]);
            let (k10, k11, k12) = (kd[kb + 3], kd[kb + 4], kd[kb + 5]);
            let (k20, k21, k22) = (kd[kb + 6], kd[kb + 7], kd[kb + 8]);
            let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            for r in 0..oh {
                let row0 = &plane[r * pw..r * pw + ow + 2];
                let row1 = &plane[(r + 1) * pw..(r + 1) * pw + ow + 2];
                let row2 = &plane[(r + 2) * pw..(r + 2) * pw + ow + 2];
                let orow = &mut out[co * oh * ow + r * ow..co * oh * ow + (r + 1) * ow];
                for j in 0..ow {
                    orow[j] += k00 * row0[j]
                        + k01 * row0[j + 1]
                        + k02 * row0[j + 2]
                        + k10 * row1[j]
                        + k11 * row1[j + 1]
                        + k12 * row1[j + 2]
                        + k20 * row2[j]
                        + k21 * row2[j + 1]
                        + k22 * row2[j + 2];
                }
            }
        }
    }
    out
}

fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    expect_rank(x, 3, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    expect_rank(bias, 1, "conv2d bias")?;
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kcin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(Error::config(format!(
            "conv2d: kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::config(format!(
            "conv2d: kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if bias.shape()[0] != cout {
        return Err(Error::config("conv2d: bias length != output channels"));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be positive"));
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;

    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();

    if kh == 3 && stride == 1 {
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        let mut padded = vec![0.0; cin * ph * pw];
        for ci in 0..cin {
            pad_plane(
                &xd[ci * h * w..(ci + 1) * h * w],
                h,
                w,
                padding,
                &mut padded[ci * ph * pw..(ci + 1) * ph * pw],
            );
        }
        let out = conv3x3_s1_forward(&padded, kd, bd, cin, cout, ph, pw);
        return Tensor::new(vec![cout, oh, ow], out);
    }

    let mut out = vec![0.0f64; cout * oh * ow];
    for co in 0..cout {
        out[co * oh * ow..(co + 1) * oh * ow].fill(bd[co]);
    }
    for co in 0..cout {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
            for dkh in 0..kh {
                let (rlo, rhi) = conv_valid_range(oh, h, stride, dkh, padding);
                for dkw in 0..kw {
                    let wgt = kd[((co * cin + ci) * kh + dkh) * kw + dkw];
                    let (clo, chi) = conv_valid_range(ow, w, stride, dkw, padding);
                    if clo >= chi {
                        continue;
                    }
                    let shift_w = dkw as i64 - padding as i64;
                    for r in rlo..rhi {
                        let ir = (r * stride) as i64 + dkh as i64 - padding as i64;
                        let xrow = &xplane[(ir as usize) * w..(ir as usize) * w + w];
                        let orow = &mut oplane[r * ow + clo..r * ow + chi];
                        if stride == 1 {
                            let start = (clo as i64 + shift_w) as usize;
                            let xin = &xrow[start..start + (chi - clo)];
                            for (o, &xv) in orow.iter_mut().zip(xin) {
                                *o += wgt * xv;
                            }
                        } else {
                            for (idx, o) in orow.iter_mut().enumerate() {
                                let ic = ((clo + idx) * stride) as i64 + shift_w;
                                *o += wgt * xrow[ic as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// 3x3 stride-1 input gradient: correlate the padded upstream gradient with
/// the flipped kernel. `gp` is grad_out padded by `2 - padding`.
fn conv3x3_s1_grad_input(
    gp: &[f64],
    kd: &[f64],
    cin: usize,
    cout: usize,
    gph: usize,
    gpw: usize,
) -> Vec<f64> {
    let (h, w) = (gph - 2, gpw - 2);
    let mut gx = vec![0.0f64; cin * h * w];
    for ci in 0..cin {
        for co in 0..cout {
            let kb = (co * cin + ci) * 9;
            // Flipped taps: position (dkh, dkw) reads kernel (2-dkh, 2-dkw).
            let (k00, k01, k02) = (kd[kb + 8], kd[kb + 7], kd[kb + 6]);
            let (k10, k11, k12) = (kd[kb + 5], kd[kb + 4], kd[kb + 3]);
            let (k20, k21, k22) = (kd[kb + 2], kd[kb + 1], kd[kb]);
            let plane = &gp[co * gph * gpw..(co + 1) * gph * gpw];
            for r in 0..h {
                let row0 = &plane[r * gpw..r * gpw + w + 2];
                let row1 = &plane[(r + 1) * gpw..(r + 1) * gpw + w + 2];
                let row2 = &plane[(r + 2) * gpw..(r + 2) * gpw + w + 2];
                let orow = &mut gx[ci * h * w + r * w..ci * h * w + (r + 1) * w];
                for j in 0..w {
                    orow[j] += k00 * row0[j]
                        + k01 * row0[j + 1]
                        + k02 * row0[j + 2]
                        + k10 * row1[j]
                        + k11 * row1[j + 1]
                        + k12 * row1[j + 2]
                        + k20 * row2[j]
                        + k21 * row2[j + 1]
                        + k22 * row2[j + 2];
                }
            }
        }
    }
    gx
}

/// 3x3 stride-1 kernel gradient from padded input planes.
fn conv3x3_s1_grad_kernel(
    padded: &[f64],
    gd: &[f64],
    cin: usize,
    cout: usize,
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let (oh, ow) = (ph - 2, pw - 2);
    let mut gk = vec![0.0f64; cout * cin * 9];
    for co in 0..cout {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let mut acc = [0.0f64; 9];
            for r in 0..oh {
                let grow = &gplane[r * ow..(r + 1) * ow];
                let row0 = &plane[r * pw..r * pw + ow + 2];
                let row1 = &plane[(r + 1) * pw..(r + 1) * pw + ow + 2];
                let row2 = &plane[(r + 2) * pw..(r + 2) * pw + ow + 2];
                let mut a = [0.0f64; 9];
                for j in 0..ow {
                    let g = grow[j];
                    a[0] += g * row0[j];
                    a[1] += g * row0[j + 1];
                    a[2] += g * row0[j + 2];
                    a[3] += g * row1[j];
                    a[4] += g * row1[j + 1];
                    a[5] += g * row1[j + 2];
                    a[6] += g * row2[j];
                    a[7] += g * row2[j + 1];
                    a[8] += g * row2[j + 2];
                }
                for t in 0..9 {
                    acc[t] += a[t];
                }
            }
            gk[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9].copy_from_slice(&acc);
        }
    }
    gk
}

/// Gradients of conv2d w.r.t. (input, kernel, bias); each side is computed
/// only when requested so attack-time graphs skip parameter buffers.
#[allow(clippy::too_many_arguments)]
fn conv2d_vjp(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_x: bool,
    need_k: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let gd = grad_out.data();
    let xd = x.data();
    let kd = kernel.data();

    let grad_bias = need_b.then(|| {
        let mut gb = vec![0.0; cout];
        for co in 0..cout {
            gb[co] = gd[co * oh * ow..(co + 1) * oh * ow].iter().sum();
        }
        Tensor::new(vec![cout], gb).expect("bias grad shape")
    });

    if kh == 3 && stride == 1 && padding <= 2 {
        let gx = need_x.then(|| {
            let e = 2 - padding;
            let (gph, gpw) = (oh + 2 * e, ow + 2 * e);
            let mut gp = vec![0.0; cout * gph * gpw];
            for co in 0..cout {
                pad_plane(
                    &gd[co * oh * ow..(co + 1) * oh * ow],
                    oh,
                    ow,
                    e,
                    &mut gp[co * gph * gpw..(co + 1) * gph * gpw],
                );
            }
            let v = conv3x3_s1_grad_input(&gp, kd, cin, cout, gph, gpw);
            Tensor::new(vec![cin, h, w], v).expect("input grad shape")
        });
        let gk = need_k.then(|| {
            let (ph, pw) = (h + 2 * padding, w + 2 * padding);
            let mut padded = vec![0.0; cin * ph * pw];
            for ci in 0..cin {
                pad_plane(
                    &xd[ci * h * w..(ci + 1) * h * w],
                    h,
                    w,
                    padding,
                    &mut padded[ci * ph * pw..(ci + 1) * ph * pw],
                );
            }
            let v = conv3x3_s1_grad_kernel(&padded, gd, cin, cout, ph, pw);
            Tensor::new(vec![cout, cin, 3, 3], v).expect("kernel grad shape")
        });
        return (gx, gk, grad_bias);
    }

    let mut gx = if need_x { vec![0.0; cin * h * w] } else { Vec::new() };
    let mut gk = if need_k { vec![0.0; cout * cin * kh * kw] } else { Vec::new() };

    for co in 0..cout {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
            for dkh in 0..kh {
                let (rlo, rhi) = conv_valid_range(oh, h, stride, dkh, padding);
                for dkw in 0..kw {
                    let (clo, chi) = conv_valid_range(ow, w, stride, dkw, padding);
                    if clo >= chi {
                        continue;
                    }
                    let shift_w = dkw as i64 - padding as i64;
                    let wgt = kd[((co * cin + ci) * kh + dkh) * kw + dkw];
                    let mut wacc = 0.0;
                    for r in rlo..rhi {
                        let ir = ((r * stride) as i64 + dkh as i64 - padding as i64) as usize;
                        let grow = &gplane[r * ow + clo..r * ow + chi];
                        if stride == 1 {
                            let start = (clo as i64 + shift_w) as usize;
                            if need_k {
                                let xin = &xplane[ir * w + start..ir * w + start + (chi - clo)];
                                for (&g, &xv) in grow.iter().zip(xin) {
                                    wacc += g * xv;
                                }
                            }
                            if need_x {
                                let xrow = &mut gx[ci * h * w + ir * w + start
                                    ..ci * h * w + ir * w + start + (chi - clo)];
                                for (xg, &g) in xrow.iter_mut().zip(grow) {
                                    *xg += wgt * g;
                                }
                            }
                        } else {
                            for (idx, &g) in grow.iter().enumerate() {
                                let ic = (((clo + idx) * stride) as i64 + shift_w) as usize;
                                if need_k {
                                    wacc += g * xplane[ir * w + ic];
                                }
                                if need_x {
                                    gx[ci * h * w + ir * w + ic] += wgt * g;
                                }
                            }
                        }
                    }
                    if need_k {
                        gk[((co * cin + ci) * kh + dkh) * kw + dkw] += wacc;
                    }
                }
            }
        }
    }

    (
        need_x.then(|| Tensor::new(vec![cin, h, w], gx).expect("input grad shape")),
        need_k.then(|| Tensor::new(vec![cout, cin, kh, kw], gk).expect("kernel grad shape")),
        grad_bias,
    )
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log-softmax of a logit slice, max-subtracted for stability.
fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Pooling window `[lo, hi)` for output cell `i` of `out` cells over `extent`.
pub fn pool_window(i: usize, out: usize, extent: usize) -> (usize, usize) {
    let lo = i * extent / out;
    let hi = ((i + 1) * extent).div_ceil(out);
    (lo, hi)
}

/// Evaluates `op` on `inputs`. Pure: identical inputs give identical bits.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => Err(Error::usage("leaf nodes are not evaluated")),
        Op::Conv2d { stride, padding } => {
            conv2d_forward(inputs[0], inputs[1], inputs[2], *stride, *padding)
        }
        Op::Linear => {
            let (x, wgt, b) = (inputs[0], inputs[1], inputs[2]);
            expect_rank(wgt, 2, "linear weight")?;
            expect_rank(b, 1, "linear bias")?;
            let (nout, nin) = (wgt.shape()[0], wgt.shape()[1]);
            if x.numel() != nin {
                return Err(Error::config(format!(
                    "linear: input numel {} != in_features {}",
                    x.numel(),
                    nin
                )));
            }
            if b.shape()[0] != nout {
                return Err(Error::config("linear: bias length != out_features"));
            }
            let xd = x.data();
            let wd = wgt.data();
            let mut out = b.data().to_vec();
            for (o, row) in out.iter_mut().zip(wd.chunks_exact(nin)) {
                let mut acc = 0.0;
                for (&wv, &xv) in row.iter().zip(xd) {
                    acc += wv * xv;
                }
                *o += acc;
            }
            Tensor::new(vec![nout], out)
        }
        Op::Relu => {
            let x = inputs[0];
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.max(0.0)).collect(),
            )
        }
        Op::Sigmoid => {
            let x = inputs[0];
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| stable_sigmoid(v)).collect(),
            )
        }
        Op::Sqrt => {
            let x = inputs[0];
            for &v in x.data() {
                if v < -1e-9 {
                    return Err(Error::numeric(format!("sqrt of negative value {v}")));
                }
            }
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.max(0.0).sqrt()).collect(),
            )
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            expect_same_shape(a, b, op.name())?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(c) => {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect())
        }
        Op::AddConst(c) => {
            let x = inputs[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v + c).collect())
        }
        Op::DivScalar | Op::MulScalar => {
            let (x, s) = (inputs[0], inputs[1]);
            expect_scalar(s, op.name())?;
            let sv = s.item();
            if matches!(op, Op::DivScalar) && sv == 0.0 {
                return Err(Error::numeric("division by zero scalar"));
            }
            let data = x
                .data()
                .iter()
                .map(|&v| match op {
                    Op::DivScalar => v / sv,
                    _ => v * sv,
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::SoftmaxChannels => {
            let x = inputs[0];
            expect_rank(x, 3, "softmax_channels")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if c < 2 {
                return Err(Error::config("softmax_channels: needs C >= 2"));
            }
            if !x.all_finite() {
                return Err(Error::numeric("softmax_channels: non-finite input"));
            }
            let hw = h * w;
            let xd = x.data();
            let mut out = vec![0.0; c * hw];
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(xd[ch * hw + p]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    let e = (xd[ch * hw + p] - m).exp();
                    out[ch * hw + p] = e;
                    denom += e;
                }
                for ch in 0..c {
                    out[ch * hw + p] /= denom;
                }
            }
            Tensor::new(vec![c, h, w], out)
        }
        Op::AdaptiveAvgPool { out_h, out_w } => {
            let x = inputs[0];
            expect_rank(x, 3, "adaptive_avg_pool")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if *out_h == 0 || *out_w == 0 || *out_h > h || *out_w > w {
                return Err(Error::config(format!(
                    "adaptive_avg_pool: output {out_h}x{out_w} invalid for input {h}x{w}"
                )));
            }
            let xd = x.data();
            let mut out = vec![0.0; c * out_h * out_w];
            for ch in 0..c {
                for i in 0..*out_h {
                    let (rlo, rhi) = pool_window(i, *out_h, h);
                    for j in 0..*out_w {
                        let (clo, chi) = pool_window(j, *out_w, w);
                        let mut acc = 0.0;
                        for r in rlo..rhi {
                            for cc in clo..chi {
                                acc += xd[ch * h * w + r * w + cc];
                            }
                        }
                        out[ch * out_h * out_w + i * out_w + j] =
                            acc / ((rhi - rlo) * (chi - clo)) as f64;
                    }
                }
            }
            Tensor::new(vec![c, *out_h, *out_w], out)
        }
        Op::Upsample2x => {
            let x = inputs[0];
            expect_rank(x, 3, "upsample2x")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (2 * h, 2 * w);
            let xd = x.data();
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for r in 0..h {
                    for cc in 0..w {
                        let v = xd[ch * h * w + r * w + cc];
                        let base = ch * oh * ow + 2 * r * ow + 2 * cc;
                        out[base] = v;
                        out[base + 1] = v;
                        out[base + ow] = v;
                        out[base + ow + 1] = v;
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        }
        Op::CrossEntropy { target } => {
            let z = inputs[0];
            expect_rank(z, 1, "cross_entropy logits")?;
            if *target >= z.numel() {
                return Err(Error::usage(format!(
                    "cross_entropy: target {} out of range for {} classes",
                    target,
                    z.numel()
                )));
            }
            let ls = log_softmax(z.data());
            Ok(Tensor::scalar(-ls[*target]))
        }
        Op::KlDivergence => {
            let (p, q) = (inputs[0], inputs[1]);
            expect_same_shape(p, q, "kl_divergence")?;
            if !p.all_finite() || !q.all_finite() {
                return Err(Error::numeric("kl_divergence: non-finite input"));
            }
            let lp = log_softmax(p.data());
            let lq = log_softmax(q.data());
            let kl = lp
                .iter()
                .zip(&lq)
                .map(|(&a, &b)| a.exp() * (a - b))
                .sum::<f64>();
            Ok(Tensor::scalar(kl))
        }
        Op::PixelwiseCrossEntropy { targets } => {
            let z = inputs[0];
            expect_rank(z, 3, "pixelwise_cross_entropy")?;
            let (c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let hw = h * w;
            if targets.len() != hw {
                return Err(Error::data(format!(
                    "pixelwise_cross_entropy: {} targets for {} pixels",
                    targets.len(),
                    hw
                )));
            }
            let zd = z.data();
            let mut total = 0.0;
            let mut logits = vec![0.0; c];
            for p in 0..hw {
                let t = targets[p] as usize;
                if t >= c {
                    return Err(Error::data(format!(
                        "pixelwise_cross_entropy: target channel {t} out of range {c}"
                    )));
                }
                for (ch, dst) in logits.iter_mut().enumerate() {
                    *dst = zd[ch * hw + p];
                }
                let ls = log_softmax(&logits);
                total -= ls[t];
            }
            Ok(Tensor::scalar(total / hw as f64))
        }
        Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(
                x.data().iter().sum::<f64>() / x.numel() as f64,
            ))
        }
        Op::SumChannelAxis => {
            let x = inputs[0];
            expect_rank(x, 3, "sum_channel_axis")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let hw = h * w;
            let xd = x.data();
            let mut out = vec![0.0; hw];
            for ch in 0..c {
                for (o, &v) in out.iter_mut().zip(&xd[ch * hw..(ch + 1) * hw]) {
                    *o += v;
                }
            }
            Tensor::new(vec![h, w], out)
        }
        Op::SumRows => {
            let x = inputs[0];
            expect_rank(x, 2, "sum_rows")?;
            let (h, w) = (x.shape()[0], x.shape()[1]);
            let out = x.data().chunks_exact(w).map(|row| row.iter().sum()).collect();
            Tensor::new(vec![h], out)
        }
        Op::SumCols => {
            let x = inputs[0];
            expect_rank(x, 2, "sum_cols")?;
            let (h, w) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let mut out = vec![0.0; w];
            for r in 0..h {
                for (o, &v) in out.iter_mut().zip(&xd[r * w..(r + 1) * w]) {
                    *o += v;
                }
            }
            Tensor::new(vec![w], out)
        }
        Op::DotConst { weights } => {
            let x = inputs[0];
            expect_same_shape(x, weights, "dot_const")?;
            Ok(Tensor::scalar(
                x.data()
                    .iter()
                    .zip(weights.data())
                    .map(|(&a, &b)| a * b)
                    .sum(),
            ))
        }
        Op::SliceChannel { channel } => {
            let x = inputs[0];
            expect_rank(x, 3, "slice_channel")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if *channel >= c {
                return Err(Error::usage(format!(
                    "slice_channel: channel {channel} out of range {c}"
                )));
            }
            Tensor::new(
                vec![h, w],
                x.data()[channel * h * w..(channel + 1) * h * w].to_vec(),
            )
        }
        Op::SliceChannels { start, end } => {
            let x = inputs[0];
            expect_rank(x, 3, "slice_channels")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if *start >= *end || *end > c {
                return Err(Error::usage(format!(
                    "slice_channels: range {start}..{end} invalid for {c} channels"
                )));
            }
            Tensor::new(
                vec![end - start, h, w],
                x.data()[start * h * w..end * h * w].to_vec(),
            )
        }
        Op::ConcatChannels => {
            let (a, b) = (inputs[0], inputs[1]);
            expect_rank(a, 3, "concat_channels lhs")?;
            expect_rank(b, 3, "concat_channels rhs")?;
            if a.shape()[1..] != b.shape()[1..] {
                return Err(Error::config(format!(
                    "concat_channels: spatial mismatch {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
            Tensor::new(
                vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]],
                data,
            )
        }
        Op::StackScalars => {
            let mut data = Vec::with_capacity(inputs.len());
            for t in inputs {
                expect_scalar(t, "stack_scalars")?;
                data.push(t.item());
            }
            Ok(Tensor::from_vec(data))
        }
        Op::IndexElement { index } => {
            let x = inputs[0];
            if *index >= x.numel() {
                return Err(Error::usage(format!(
                    "index_element: index {} out of range {}",
                    index,
                    x.numel()
                )));
            }
            Ok(Tensor::scalar(x.data()[*index]))
        }
        Op::MeanChannels => {
            let x = inputs[0];
            expect_rank(x, 3, "mean_channels")?;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let hw = (h * w) as f64;
            let out = x
                .data()
                .chunks_exact(h * w)
                .map(|pl| pl.iter().sum::<f64>() / hw)
                .collect();
            let _ = c;
            Tensor::new(vec![x.shape()[0]], out)
        }
    }
}

/// Vector-Jacobian product. `needs[i]` marks which input slots want a
/// gradient; slots with `needs[i] == false` come back as `None`.
pub fn vjp(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad_out: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let g = grad_out;
    Ok(match op {
        Op::Leaf => vec![],
        Op::Conv2d { stride, padding } => {
            let (gx, gk, gb) = conv2d_vjp(
                inputs[0], inputs[1], g, *stride, *padding, needs[0], needs[1], needs[2],
            );
            vec![gx, gk, gb]
        }
        Op::Linear => {
            let (x, wgt) = (inputs[0], inputs[1]);
            let (nout, nin) = (wgt.shape()[0], wgt.shape()[1]);
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut v = vec![0.0; nin];
                for (o, row) in gd.iter().zip(wgt.data().chunks_exact(nin)) {
                    for (dst, &wv) in v.iter_mut().zip(row) {
                        *dst += o * wv;
                    }
                }
                Tensor::new(x.shape().to_vec(), v).expect("linear gx")
            });
            let gw = needs[1].then(|| {
                let mut v = vec![0.0; nout * nin];
                for (o, row) in gd.iter().zip(v.chunks_exact_mut(nin)) {
                    for (dst, &xv) in row.iter_mut().zip(x.data()) {
                        *dst = o * xv;
                    }
                }
                Tensor::new(vec![nout, nin], v).expect("linear gw")
            });
            let gb = needs[2].then(|| Tensor::new(vec![nout], gd.to_vec()).expect("linear gb"));
            vec![gx, gw, gb]
        }
        Op::Relu => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let v = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().to_vec(), v).expect("relu gx")
            })]
        }
        Op::Sigmoid => {
            vec![needs[0].then(|| {
                let v = output
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                Tensor::new(output.shape().to_vec(), v).expect("sigmoid gx")
            })]
        }
        Op::Sqrt => {
            vec![needs[0].then(|| {
                let v = output
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| if y > 0.0 { gv * 0.5 / y } else { 0.0 })
                    .collect();
                Tensor::new(output.shape().to_vec(), v).expect("sqrt gx")
            })]
        }
        Op::Add => vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.clone()),
        ],
        Op::Sub => vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| {
                let mut t = g.clone();
                t.scale_in_place(-1.0);
                t
            }),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![
                needs[0].then(|| {
                    let v = b.data().iter().zip(g.data()).map(|(&bv, &gv)| bv * gv).collect();
                    Tensor::new(a.shape().to_vec(), v).expect("mul ga")
                }),
                needs[1].then(|| {
                    let v = a.data().iter().zip(g.data()).map(|(&av, &gv)| av * gv).collect();
                    Tensor::new(b.shape().to_vec(), v).expect("mul gb")
                }),
            ]
        }
        Op::Scale(c) => vec![needs[0].then(|| {
            let mut t = g.clone();
            t.scale_in_place(*c);
            t
        })],
        Op::AddConst(_) => vec![needs[0].then(|| g.clone())],
        Op::DivScalar => {
            let (x, s) = (inputs[0], inputs[1]);
            let sv = s.item();
            vec![
                needs[0].then(|| {
                    let mut t = g.clone();
                    t.scale_in_place(1.0 / sv);
                    t
                }),
                needs[1].then(|| {
                    let acc: f64 = x.data().iter().zip(g.data()).map(|(&xv, &gv)| xv * gv).sum();
                    Tensor::scalar(-acc / (sv * sv))
                }),
            ]
        }
        Op::MulScalar => {
            let (x, s) = (inputs[0], inputs[1]);
            let sv = s.item();
            vec![
                needs[0].then(|| {
                    let mut t = g.clone();
                    t.scale_in_place(sv);
                    t
                }),
                needs[1].then(|| {
                    let acc: f64 = x.data().iter().zip(g.data()).map(|(&xv, &gv)| xv * gv).sum();
                    Tensor::scalar(acc)
                }),
            ]
        }
        Op::SoftmaxChannels => {
            vec![needs[0].then(|| {
                let y = output;
                let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let hw = h * w;
                let yd = y.data();
                let gd = g.data();
                let mut out = vec![0.0; c * hw];
                for p in 0..hw {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += gd[ch * hw + p] * yd[ch * hw + p];
                    }
                    for ch in 0..c {
                        out[ch * hw + p] = yd[ch * hw + p] * (gd[ch * hw + p] - dot);
                    }
                }
                Tensor::new(y.shape().to_vec(), out).expect("softmax gx")
            })]
        }
        Op::AdaptiveAvgPool { out_h, out_w } => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let gd = g.data();
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..*out_h {
                        let (rlo, rhi) = pool_window(i, *out_h, h);
                        for j in 0..*out_w {
                            let (clo, chi) = pool_window(j, *out_w, w);
                            let share = gd[ch * out_h * out_w + i * out_w + j]
                                / ((rhi - rlo) * (chi - clo)) as f64;
                            for r in rlo..rhi {
                                for cc in clo..chi {
                                    out[ch * h * w + r * w + cc] += share;
                                }
                            }
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out).expect("pool gx")
            })]
        }
        Op::Upsample2x => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let gd = g.data();
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for cc in 0..w {
                            let base = ch * oh * ow + 2 * r * ow + 2 * cc;
                            out[ch * h * w + r * w + cc] =
                                gd[base] + gd[base + 1] + gd[base + ow] + gd[base + ow + 1];
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out).expect("upsample gx")
            })]
        }
        Op::CrossEntropy { target } => {
            let z = inputs[0];
            vec![needs[0].then(|| {
                let gs = g.item();
                let ls = log_softmax(z.data());
                let mut v: Vec<f64> = ls.iter().map(|&l| gs * l.exp()).collect();
                v[*target] -= gs;
                Tensor::new(z.shape().to_vec(), v).expect("ce gx")
            })]
        }
        Op::KlDivergence => {
            let (p, q) = (inputs[0], inputs[1]);
            let gs = g.item();
            let lp = log_softmax(p.data());
            let lq = log_softmax(q.data());
            let kl = output.item();
            vec![
                needs[0].then(|| {
                    let v = lp
                        .iter()
                        .zip(&lq)
                        .map(|(&a, &b)| gs * a.exp() * (a - b - kl))
                        .collect();
                    Tensor::new(p.shape().to_vec(), v).expect("kl gp")
                }),
                needs[1].then(|| {
                    let v = lp
                        .iter()
                        .zip(&lq)
                        .map(|(&a, &b)| gs * (b.exp() - a.exp()))
                        .collect();
                    Tensor::new(q.shape().to_vec(), v).expect("kl gq")
                }),
            ]
        }
        Op::PixelwiseCrossEntropy { targets } => {
            let z = inputs[0];
            vec![needs[0].then(|| {
                let (c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                let hw = h * w;
                let zd = z.data();
                let gs = g.item() / hw as f64;
                let mut out = vec![0.0; c * hw];
                let mut logits = vec![0.0; c];
                for p in 0..hw {
                    for (ch, dst) in logits.iter_mut().enumerate() {
                        *dst = zd[ch * hw + p];
                    }
                    let ls = log_softmax(&logits);
                    for ch in 0..c {
                        out[ch * hw + p] = gs * ls[ch].exp();
                    }
                    out[targets[p] as usize * hw + p] -= gs;
                }
                Tensor::new(z.shape().to_vec(), out).expect("pce gx")
            })]
        }
        Op::Sum => {
            let x = inputs[0];
            vec![needs[0].then(|| Tensor::full(x.shape().to_vec(), g.item()))]
        }
        Op::Mean => {
            let x = inputs[0];
            vec![needs[0].then(|| Tensor::full(x.shape().to_vec(), g.item() / x.numel() as f64))]
        }
        Op::SumChannelAxis => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    out.extend_from_slice(g.data());
                }
                Tensor::new(x.shape().to_vec(), out).expect("sum_channel gx")
            })]
        }
        Op::SumRows => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let gd = g.data();
                let mut out = vec![0.0; h * w];
                for r in 0..h {
                    out[r * w..(r + 1) * w].fill(gd[r]);
                }
                Tensor::new(x.shape().to_vec(), out).expect("sum_rows gx")
            })]
        }
        Op::SumCols => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let gd = g.data();
                let mut out = vec![0.0; h * w];
                for r in 0..h {
                    out[r * w..(r + 1) * w].copy_from_slice(gd);
                }
                Tensor::new(x.shape().to_vec(), out).expect("sum_cols gx")
            })]
        }
        Op::DotConst { weights } => {
            vec![needs[0].then(|| {
                let gs = g.item();
                let v = weights.data().iter().map(|&wv| gs * wv).collect();
                Tensor::new(weights.shape().to_vec(), v).expect("dot_const gx")
            })]
        }
        Op::SliceChannel { channel } => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = Tensor::zeros(x.shape().to_vec());
                out.data_mut()[channel * h * w..(channel + 1) * h * w].copy_from_slice(g.data());
                out
            })]
        }
        Op::SliceChannels { start, end } => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = Tensor::zeros(x.shape().to_vec());
                out.data_mut()[start * h * w..end * h * w].copy_from_slice(g.data());
                out
            })]
        }
        Op::ConcatChannels => {
            let (a, b) = (inputs[0], inputs[1]);
            let na = a.numel();
            vec![
                needs[0].then(|| {
                    Tensor::new(a.shape().to_vec(), g.data()[..na].to_vec()).expect("concat ga")
                }),
                needs[1].then(|| {
                    Tensor::new(b.shape().to_vec(), g.data()[na..].to_vec()).expect("concat gb")
                }),
            ]
        }
        Op::StackScalars => {
            let gd = g.data();
            needs
                .iter()
                .enumerate()
                .map(|(i, &need)| need.then(|| Tensor::scalar(gd[i])))
                .collect()
        }
        Op::IndexElement { index } => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let mut out = Tensor::zeros(x.shape().to_vec());
                out.data_mut()[*index] = g.item();
                out
            })]
        }
        Op::MeanChannels => {
            let x = inputs[0];
            vec![needs[0].then(|| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let hw = h * w;
                let gd = g.data();
                let mut out = vec![0.0; c * hw];
                for ch in 0..c {
                    out[ch * hw..(ch + 1) * hw].fill(gd[ch] / hw as f64);
                }
                Tensor::new(x.shape().to_vec(), out).expect("mean_channels gx")
            })]
        }
    })
}
