//! Forward kernels and vector-Jacobian products for every [`OpKind`].
//!
//! All kernels compute in `f64`; outputs are quantized to the graph
//! precision by the [`Tensor`] constructor. Batch loops use rayon with
//! per-sample disjoint output slices, so results are independent of the
//! worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::OpKind;
use crate::tensor::{Precision, Tensor};

/// Auxiliary forward data consumed by the backward pass.
pub(crate) enum Aux {
    None,
    /// Flat input index of the max per output element (max pooling).
    Argmax(Vec<u32>),
    /// Per-channel batch statistics (batch-norm training mode).
    Stats { mean: Vec<f64>, var: Vec<f64> },
}

/// The four orthonormal 2x2 Haar kernels, in band order LL, LH, HL, HH.
/// Rows of each kernel follow image rows; LH carries vertical detail.
pub const HAAR_KERNELS: [[[f64; 2]; 2]; 4] = [
    [[0.5, 0.5], [0.5, 0.5]],
    [[-0.5, -0.5], [0.5, 0.5]],
    [[-0.5, 0.5], [-0.5, 0.5]],
    [[0.5, -0.5], [-0.5, 0.5]],
];

fn expect_arity(kind: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} expects {} inputs, got {}",
            kind.name(),
            n,
            inputs.len()
        )));
    }
    Ok(())
}

fn dims4(kind: &OpKind, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            kind.name(),
            format!("expected rank-4 NCHW tensor, got shape {:?}", s),
        ));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn same_shape(kind: &OpKind, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            kind.name(),
            format!("operand shapes {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// ── Forward dispatch ─────────────────────────────────────────────────────

pub(crate) fn forward(
    kind: &OpKind,
    inputs: &[&Tensor],
    precision: Precision,
) -> Result<(Tensor, Aux)> {
    match kind {
        OpKind::Input => Err(Error::InvalidArgument(
            "input nodes are created via Graph::input".into(),
        )),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            expect_arity(kind, inputs, 2)?;
            same_shape(kind, inputs[0], inputs[1])?;
            let a = inputs[0].data();
            let b = inputs[1].data();
            let out: Vec<f64> = match kind {
                OpKind::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                OpKind::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
                OpKind::Mul => a.iter().zip(b).map(|(x, y)| x * y).collect(),
                _ => a.iter().zip(b).map(|(x, y)| x / y).collect(),
            };
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::Scale(f) => {
            expect_arity(kind, inputs, 1)?;
            let out = inputs[0].data().iter().map(|x| x * f).collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::AddScalar(c) => {
            expect_arity(kind, inputs, 1)?;
            let out = inputs[0].data().iter().map(|x| x + c).collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::Log => {
            expect_arity(kind, inputs, 1)?;
            let mut out = Vec::with_capacity(inputs[0].numel());
            for &x in inputs[0].data() {
                if x <= 0.0 {
                    return Err(Error::NumericFailure(format!(
                        "log of non-positive value {}",
                        x
                    )));
                }
                out.push(x.ln());
            }
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::Relu => {
            expect_arity(kind, inputs, 1)?;
            let out = inputs[0].data().iter().map(|&x| x.max(0.0)).collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::ClampMin(c) => {
            expect_arity(kind, inputs, 1)?;
            let out = inputs[0].data().iter().map(|&x| x.max(*c)).collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::Clamp(lo, hi) => {
            expect_arity(kind, inputs, 1)?;
            let out = inputs[0]
                .data()
                .iter()
                .map(|&x| x.clamp(*lo, *hi))
                .collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::Softmax => {
            expect_arity(kind, inputs, 1)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            let x = inputs[0].data();
            let hw = h * w;
            let mut out = vec![0.0; x.len()];
            for ni in 0..n {
                for p in 0..hw {
                    let idx = |ci: usize| (ni * c + ci) * hw + p;
                    let mut m = f64::NEG_INFINITY;
                    for ci in 0..c {
                        m = m.max(x[idx(ci)]);
                    }
                    let mut z = 0.0;
                    for ci in 0..c {
                        let e = (x[idx(ci)] - m).exp();
                        out[idx(ci)] = e;
                        z += e;
                    }
                    for ci in 0..c {
                        out[idx(ci)] /= z;
                    }
                }
            }
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::MatMul => {
            expect_arity(kind, inputs, 2)?;
            let (sa, sb) = (inputs[0].shape(), inputs[1].shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape(
                    kind.name(),
                    format!("cannot multiply {:?} by {:?}", sa, sb),
                ));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(m, k, n, inputs[0].data(), inputs[1].data(), &mut out);
            Ok((Tensor::from_parts(vec![m, n], out, precision), Aux::None))
        }
        OpKind::Conv2d { stride, padding } => conv2d_forward(kind, inputs, *stride, *padding, precision),
        OpKind::MaxPool2x2 => {
            expect_arity(kind, inputs, 1)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    kind.name(),
                    format!("requires even extents, got {}x{}", h, w),
                ));
            }
            let x = inputs[0].data();
            let (ho, wo) = (h / 2, w / 2);
            let mut out = vec![0.0; n * c * ho * wo];
            let mut arg = vec![0u32; out.len()];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + (2 * oi + di) * w + 2 * oj + dj;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (nc * ho + oi) * wo + oj;
                        out[o] = best;
                        arg[o] = best_idx as u32;
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c, ho, wo], out, precision),
                Aux::Argmax(arg),
            ))
        }
        OpKind::UpsampleNearest(f) => {
            expect_arity(kind, inputs, 1)?;
            if *f < 1 {
                return Err(Error::InvalidArgument(
                    "upsample_nearest factor must be >= 1".into(),
                ));
            }
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            let x = inputs[0].data();
            let (ho, wo) = (h * f, w * f);
            let mut out = vec![0.0; n * c * ho * wo];
            for nc in 0..n * c {
                for oi in 0..ho {
                    let src_row = nc * h * w + (oi / f) * w;
                    let dst_row = nc * ho * wo + oi * wo;
                    for oj in 0..wo {
                        out[dst_row + oj] = x[src_row + oj / f];
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c, ho, wo], out, precision),
                Aux::None,
            ))
        }
        OpKind::UpsampleBilinear(f) => {
            expect_arity(kind, inputs, 1)?;
            if *f < 1 {
                return Err(Error::InvalidArgument(
                    "upsample_bilinear factor must be >= 1".into(),
                ));
            }
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            let x = inputs[0].data();
            let (ho, wo) = (h * f, w * f);
            let rows = bilinear_taps(h, ho);
            let cols = bilinear_taps(w, wo);
            let mut out = vec![0.0; n * c * ho * wo];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    let (i0, i1, fi) = rows[oi];
                    let dst_row = nc * ho * wo + oi * wo;
                    for oj in 0..wo {
                        let (j0, j1, fj) = cols[oj];
                        let v = x[base + i0 * w + j0] * (1.0 - fi) * (1.0 - fj)
                            + x[base + i0 * w + j1] * (1.0 - fi) * fj
                            + x[base + i1 * w + j0] * fi * (1.0 - fj)
                            + x[base + i1 * w + j1] * fi * fj;
                        out[dst_row + oj] = v;
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c, ho, wo], out, precision),
                Aux::None,
            ))
        }
        OpKind::AvgPool(f) => {
            expect_arity(kind, inputs, 1)?;
            if *f < 1 {
                return Err(Error::InvalidArgument("avg_pool factor must be >= 1".into()));
            }
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            if h % f != 0 || w % f != 0 {
                return Err(Error::shape(
                    kind.name(),
                    format!("extents {}x{} not divisible by factor {}", h, w, f),
                ));
            }
            let x = inputs[0].data();
            let (ho, wo) = (h / f, w / f);
            let inv = 1.0 / ((f * f) as f64);
            let mut out = vec![0.0; n * c * ho * wo];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut s = 0.0;
                        for di in 0..*f {
                            for dj in 0..*f {
                                s += x[base + (oi * f + di) * w + oj * f + dj];
                            }
                        }
                        out[(nc * ho + oi) * wo + oj] = s * inv;
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c, ho, wo], out, precision),
                Aux::None,
            ))
        }
        OpKind::ConcatChannels => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument("concat of zero inputs".into()));
            }
            let (n, _, h, w) = dims4(kind, inputs[0])?;
            let mut c_total = 0;
            for t in inputs {
                let (ni, ci, hi, wi) = dims4(kind, t)?;
                if ni != n || hi != h || wi != w {
                    return Err(Error::shape(
                        kind.name(),
                        format!("inputs disagree: {:?} vs {:?}", inputs[0].shape(), t.shape()),
                    ));
                }
                c_total += ci;
            }
            let hw = h * w;
            let mut out = vec![0.0; n * c_total * hw];
            for ni in 0..n {
                let mut c_off = 0;
                for t in inputs {
                    let ci = t.shape()[1];
                    let src = &t.data()[ni * ci * hw..(ni + 1) * ci * hw];
                    let dst_start = (ni * c_total + c_off) * hw;
                    out[dst_start..dst_start + ci * hw].copy_from_slice(src);
                    c_off += ci;
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c_total, h, w], out, precision),
                Aux::None,
            ))
        }
        OpKind::HaarBand(b) => {
            expect_arity(kind, inputs, 1)?;
            if *b >= 4 {
                return Err(Error::InvalidArgument(format!("haar band index {} out of range", b)));
            }
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    kind.name(),
                    format!("requires even extents, got {}x{}", h, w),
                ));
            }
            let k = &HAAR_KERNELS[*b];
            let x = inputs[0].data();
            let (ho, wo) = (h / 2, w / 2);
            let mut out = vec![0.0; n * c * ho * wo];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let i = 2 * oi;
                        let j = 2 * oj;
                        out[(nc * ho + oi) * wo + oj] = k[0][0] * x[base + i * w + j]
                            + k[0][1] * x[base + i * w + j + 1]
                            + k[1][0] * x[base + (i + 1) * w + j]
                            + k[1][1] * x[base + (i + 1) * w + j + 1];
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c, ho, wo], out, precision),
                Aux::None,
            ))
        }
        OpKind::HaarUnpool => {
            expect_arity(kind, inputs, 4)?;
            let (n, c, hb, wb) = dims4(kind, inputs[0])?;
            for t in &inputs[1..] {
                if t.shape() != inputs[0].shape() {
                    return Err(Error::shape(
                        kind.name(),
                        format!("band shape mismatch: {:?} vs {:?}", inputs[0].shape(), t.shape()),
                    ));
                }
            }
            let (h, w) = (hb * 2, wb * 2);
            let mut out = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                let bbase = nc * hb * wb;
                let obase = nc * h * w;
                for oi in 0..hb {
                    for oj in 0..wb {
                        let coeffs = [
                            inputs[0].data()[bbase + oi * wb + oj],
                            inputs[1].data()[bbase + oi * wb + oj],
                            inputs[2].data()[bbase + oi * wb + oj],
                            inputs[3].data()[bbase + oi * wb + oj],
                        ];
                        for di in 0..2 {
                            for dj in 0..2 {
                                let mut v = 0.0;
                                for (b, coeff) in coeffs.iter().enumerate() {
                                    v += HAAR_KERNELS[b][di][dj] * coeff;
                                }
                                out[obase + (2 * oi + di) * w + 2 * oj + dj] = v;
                            }
                        }
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![n, c, h, w], out, precision),
                Aux::None,
            ))
        }
        OpKind::BatchNormTrain { eps } => {
            expect_arity(kind, inputs, 3)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            check_affine_params(kind, inputs[1], inputs[2], c)?;
            let x = inputs[0].data();
            let hw = h * w;
            let m = (n * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        s += x[base + p];
                    }
                }
                let mu = s / m;
                let mut v = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let d = x[base + p] - mu;
                        v += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = v / m;
            }
            let out = normalize_per_channel(x, n, c, hw, &mean, &var, inputs[1].data(), inputs[2].data(), *eps);
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::Stats { mean, var },
            ))
        }
        OpKind::BatchNormEval { eps, mean, var } => {
            expect_arity(kind, inputs, 3)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            check_affine_params(kind, inputs[1], inputs[2], c)?;
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    kind.name(),
                    format!("running stats length {} vs {} channels", mean.len(), c),
                ));
            }
            let out = normalize_per_channel(
                inputs[0].data(),
                n,
                c,
                h * w,
                mean,
                var,
                inputs[1].data(),
                inputs[2].data(),
                *eps,
            );
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::InstanceNorm { eps } => {
            expect_arity(kind, inputs, 3)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            check_affine_params(kind, inputs[1], inputs[2], c)?;
            if h * w < 2 {
                return Err(Error::InvalidArgument(format!(
                    "instance_norm on degenerate {}x{} plane",
                    h, w
                )));
            }
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let beta = inputs[2].data();
            let hw = h * w;
            let mut out = vec![0.0; x.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (mu, v) = plane_stats(&x[base..base + hw]);
                    let inv = 1.0 / (v + eps).sqrt();
                    for p in 0..hw {
                        out[base + p] = gamma[ci] * (x[base + p] - mu) * inv + beta[ci];
                    }
                }
            }
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::AdaIn { eps } => {
            expect_arity(kind, inputs, 2)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            let (ns, cs, hs, ws) = dims4(kind, inputs[1])?;
            if ns != n || cs != c {
                return Err(Error::shape(
                    kind.name(),
                    format!(
                        "content {:?} and style {:?} must share batch and channel extents",
                        inputs[0].shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            if h * w < 2 || hs * ws < 2 {
                return Err(Error::InvalidArgument(
                    "adain requires at least 2 pixels per plane".into(),
                ));
            }
            let x = inputs[0].data();
            let s = inputs[1].data();
            let (hw, hws) = (h * w, hs * ws);
            let mut out = vec![0.0; x.len()];
            for plane in 0..n * c {
                let cb = plane * hw;
                let sb = plane * hws;
                let (mc, vc) = plane_stats(&x[cb..cb + hw]);
                let (ms, vs) = plane_stats(&s[sb..sb + hws]);
                let scale = ((vs + eps) / (vc + eps)).sqrt();
                for p in 0..hw {
                    out[cb + p] = scale * (x[cb + p] - mc) + ms;
                }
            }
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out, precision),
                Aux::None,
            ))
        }
        OpKind::Sum => {
            expect_arity(kind, inputs, 1)?;
            let s: f64 = inputs[0].data().iter().sum();
            Ok((Tensor::from_parts(vec![1], vec![s], precision), Aux::None))
        }
        OpKind::Mean => {
            expect_arity(kind, inputs, 1)?;
            let n = inputs[0].numel().max(1);
            let s: f64 = inputs[0].data().iter().sum::<f64>() / n as f64;
            Ok((Tensor::from_parts(vec![1], vec![s], precision), Aux::None))
        }
        OpKind::ChannelSum => {
            expect_arity(kind, inputs, 1)?;
            let (n, c, h, w) = dims4(kind, inputs[0])?;
            let x = inputs[0].data();
            let hw = h * w;
            let mut out = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    out[ci] += x[base..base + hw].iter().sum::<f64>();
                }
            }
            Ok((Tensor::from_parts(vec![c], out, precision), Aux::None))
        }
    }
}

// ── Backward dispatch ────────────────────────────────────────────────────

/// Per-input gradients for one node, as raw f64 buffers.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    aux: &Aux,
    grad: &[f64],
) -> Result<Vec<Vec<f64>>> {
    match kind {
        OpKind::Input => Ok(Vec::new()),
        OpKind::Add => Ok(vec![grad.to_vec(), grad.to_vec()]),
        OpKind::Sub => Ok(vec![grad.to_vec(), grad.iter().map(|g| -g).collect()]),
        OpKind::Mul => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            Ok(vec![
                grad.iter().zip(b).map(|(g, y)| g * y).collect(),
                grad.iter().zip(a).map(|(g, x)| g * x).collect(),
            ])
        }
        OpKind::Div => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let da: Vec<f64> = grad.iter().zip(b).map(|(g, y)| g / y).collect();
            let db: Vec<f64> = grad
                .iter()
                .zip(a.iter().zip(b))
                .map(|(g, (x, y))| -g * x / (y * y))
                .collect();
            Ok(vec![da, db])
        }
        OpKind::Scale(f) => Ok(vec![grad.iter().map(|g| g * f).collect()]),
        OpKind::AddScalar(_) => Ok(vec![grad.to_vec()]),
        OpKind::Log => {
            let x = inputs[0].data();
            Ok(vec![grad.iter().zip(x).map(|(g, v)| g / v).collect()])
        }
        OpKind::Relu => {
            let x = inputs[0].data();
            Ok(vec![grad
                .iter()
                .zip(x)
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect()])
        }
        OpKind::ClampMin(c) => {
            let x = inputs[0].data();
            Ok(vec![grad
                .iter()
                .zip(x)
                .map(|(g, v)| if *v > *c { *g } else { 0.0 })
                .collect()])
        }
        OpKind::Clamp(lo, hi) => {
            let x = inputs[0].data();
            Ok(vec![grad
                .iter()
                .zip(x)
                .map(|(g, v)| if *v > *lo && *v < *hi { *g } else { 0.0 })
                .collect()])
        }
        OpKind::Softmax => {
            let y = output.data();
            let (n, c, h, w) = inputs[0].dims4();
            let hw = h * w;
            let mut dx = vec![0.0; y.len()];
            for ni in 0..n {
                for p in 0..hw {
                    let idx = |ci: usize| (ni * c + ci) * hw + p;
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += grad[idx(ci)] * y[idx(ci)];
                    }
                    for ci in 0..c {
                        dx[idx(ci)] = y[idx(ci)] * (grad[idx(ci)] - dot);
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            let a = inputs[0].data();
            let b = inputs[1].data();
            // dA = G * B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    let grow = &grad[i * n..(i + 1) * n];
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        s += grow[j] * brow[j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = A^T * G
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let grow = &grad[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let drow = &mut db[p * n..(p + 1) * n];
                    for j in 0..n {
                        drow[j] += aip * grow[j];
                    }
                }
            }
            Ok(vec![da, db])
        }
        OpKind::Conv2d { stride, padding } => conv2d_backward(inputs, output, *stride, *padding, grad),
        OpKind::MaxPool2x2 => {
            let arg = match aux {
                Aux::Argmax(a) => a,
                _ => unreachable!("max_pool node without argmax aux"),
            };
            let mut dx = vec![0.0; inputs[0].numel()];
            for (o, &src) in arg.iter().enumerate() {
                dx[src as usize] += grad[o];
            }
            Ok(vec![dx])
        }
        OpKind::UpsampleNearest(f) => {
            let (n, c, h, w) = inputs[0].dims4();
            let (ho, wo) = (h * f, w * f);
            let mut dx = vec![0.0; inputs[0].numel()];
            for nc in 0..n * c {
                for oi in 0..ho {
                    let src_row = nc * h * w + (oi / f) * w;
                    let g_row = nc * ho * wo + oi * wo;
                    for oj in 0..wo {
                        dx[src_row + oj / f] += grad[g_row + oj];
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::UpsampleBilinear(f) => {
            let (n, c, h, w) = inputs[0].dims4();
            let (ho, wo) = (h * f, w * f);
            let rows = bilinear_taps(h, ho);
            let cols = bilinear_taps(w, wo);
            let mut dx = vec![0.0; inputs[0].numel()];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    let (i0, i1, fi) = rows[oi];
                    let g_row = nc * ho * wo + oi * wo;
                    for oj in 0..wo {
                        let (j0, j1, fj) = cols[oj];
                        let g = grad[g_row + oj];
                        dx[base + i0 * w + j0] += g * (1.0 - fi) * (1.0 - fj);
                        dx[base + i0 * w + j1] += g * (1.0 - fi) * fj;
                        dx[base + i1 * w + j0] += g * fi * (1.0 - fj);
                        dx[base + i1 * w + j1] += g * fi * fj;
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::AvgPool(f) => {
            let (n, c, h, w) = inputs[0].dims4();
            let (ho, wo) = (h / f, w / f);
            let inv = 1.0 / ((f * f) as f64);
            let mut dx = vec![0.0; inputs[0].numel()];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let g = grad[(nc * ho + oi) * wo + oj] * inv;
                        for di in 0..*f {
                            for dj in 0..*f {
                                dx[base + (oi * f + di) * w + oj * f + dj] += g;
                            }
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::ConcatChannels => {
            let (n, c_total, h, w) = output.dims4();
            let hw = h * w;
            let mut grads = Vec::with_capacity(inputs.len());
            let mut c_off = 0;
            for t in inputs {
                let ci = t.shape()[1];
                let mut dx = vec![0.0; t.numel()];
                for ni in 0..n {
                    let src_start = (ni * c_total + c_off) * hw;
                    let dst_start = ni * ci * hw;
                    dx[dst_start..dst_start + ci * hw]
                        .copy_from_slice(&grad[src_start..src_start + ci * hw]);
                }
                grads.push(dx);
                c_off += ci;
            }
            Ok(grads)
        }
        OpKind::HaarBand(b) => {
            let (n, c, h, w) = inputs[0].dims4();
            let (ho, wo) = (h / 2, w / 2);
            let k = &HAAR_KERNELS[*b];
            let mut dx = vec![0.0; inputs[0].numel()];
            for nc in 0..n * c {
                let base = nc * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let g = grad[(nc * ho + oi) * wo + oj];
                        for di in 0..2 {
                            for dj in 0..2 {
                                dx[base + (2 * oi + di) * w + 2 * oj + dj] += k[di][dj] * g;
                            }
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::HaarUnpool => {
            // Adjoint of the orthonormal synthesis is the analysis transform.
            let (n, c, hb, wb) = inputs[0].dims4();
            let (h, w) = (hb * 2, wb * 2);
            let mut grads = vec![vec![0.0; inputs[0].numel()]; 4];
            for nc in 0..n * c {
                let gbase = nc * h * w;
                let bbase = nc * hb * wb;
                for oi in 0..hb {
                    for oj in 0..wb {
                        for (b, gb) in grads.iter_mut().enumerate() {
                            let k = &HAAR_KERNELS[b];
                            let mut v = 0.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    v += k[di][dj] * grad[gbase + (2 * oi + di) * w + 2 * oj + dj];
                                }
                            }
                            gb[bbase + oi * wb + oj] = v;
                        }
                    }
                }
            }
            Ok(grads)
        }
        OpKind::BatchNormTrain { eps } => {
            let (mean, var) = match aux {
                Aux::Stats { mean, var } => (mean, var),
                _ => unreachable!("batch_norm_train node without stats aux"),
            };
            let (n, c, h, w) = inputs[0].dims4();
            let hw = h * w;
            let m = (n * hw) as f64;
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (x[base + p] - mean[ci]) * inv;
                        sum_g += grad[base + p];
                        sum_gx += grad[base + p] * xhat;
                    }
                }
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                let mg = sum_g / m;
                let mgx = sum_gx / m;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (x[base + p] - mean[ci]) * inv;
                        dx[base + p] = gamma[ci] * inv * (grad[base + p] - mg - xhat * mgx);
                    }
                }
            }
            Ok(vec![dx, dgamma, dbeta])
        }
        OpKind::BatchNormEval { eps, mean, var } => {
            let (n, c, h, w) = inputs[0].dims4();
            let hw = h * w;
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (x[base + p] - mean[ci]) * inv;
                        dgamma[ci] += grad[base + p] * xhat;
                        dbeta[ci] += grad[base + p];
                        dx[base + p] = gamma[ci] * inv * grad[base + p];
                    }
                }
            }
            Ok(vec![dx, dgamma, dbeta])
        }
        OpKind::InstanceNorm { eps } => {
            let (n, c, h, w) = inputs[0].dims4();
            let hw = h * w;
            let m = hw as f64;
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (mu, v) = plane_stats(&x[base..base + hw]);
                    let inv = 1.0 / (v + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for p in 0..hw {
                        let xhat = (x[base + p] - mu) * inv;
                        sum_g += grad[base + p];
                        sum_gx += grad[base + p] * xhat;
                    }
                    dgamma[ci] += sum_gx;
                    dbeta[ci] += sum_g;
                    let mg = sum_g / m;
                    let mgx = sum_gx / m;
                    for p in 0..hw {
                        let xhat = (x[base + p] - mu) * inv;
                        dx[base + p] = gamma[ci] * inv * (grad[base + p] - mg - xhat * mgx);
                    }
                }
            }
            Ok(vec![dx, dgamma, dbeta])
        }
        OpKind::AdaIn { eps } => {
            let (n, c, h, w) = inputs[0].dims4();
            let (_, _, hs, ws) = inputs[1].dims4();
            let (hw, hws) = (h * w, hs * ws);
            let (mc_count, ms_count) = (hw as f64, hws as f64);
            let x = inputs[0].data();
            let s = inputs[1].data();
            let mut dx = vec![0.0; x.len()];
            let mut ds = vec![0.0; s.len()];
            for plane in 0..n * c {
                let cb = plane * hw;
                let sb = plane * hws;
                let (mc, vc) = plane_stats(&x[cb..cb + hw]);
                let (ms, vs) = plane_stats(&s[sb..sb + hws]);
                let sigma_c = (vc + eps).sqrt();
                let sigma_s = (vs + eps).sqrt();
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for p in 0..hw {
                    let xhat = (x[cb + p] - mc) / sigma_c;
                    sum_g += grad[cb + p];
                    sum_gx += grad[cb + p] * xhat;
                }
                let mg = sum_g / mc_count;
                let mgx = sum_gx / mc_count;
                let ratio = sigma_s / sigma_c;
                for p in 0..hw {
                    let xhat = (x[cb + p] - mc) / sigma_c;
                    dx[cb + p] = ratio * (grad[cb + p] - mg - xhat * mgx);
                }
                // d(loss)/d(mu_s) = sum g; d(loss)/d(sigma_s) = sum g*xhat
                for q in 0..hws {
                    ds[sb + q] = sum_g / ms_count
                        + sum_gx * (s[sb + q] - ms) / (ms_count * sigma_s);
                }
            }
            Ok(vec![dx, ds])
        }
        OpKind::Sum => Ok(vec![vec![grad[0]; inputs[0].numel()]]),
        OpKind::Mean => {
            let n = inputs[0].numel().max(1) as f64;
            Ok(vec![vec![grad[0] / n; inputs[0].numel()]])
        }
        OpKind::ChannelSum => {
            let (n, c, h, w) = inputs[0].dims4();
            let hw = h * w;
            let mut dx = vec![0.0; inputs[0].numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        dx[base + p] = grad[ci];
                    }
                }
            }
            Ok(vec![dx])
        }
    }
}

// ── Shared kernels ───────────────────────────────────────────────────────

/// c[m x n] += a[m x k] * b[k x n], row-major.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn plane_stats(plane: &[f64]) -> (f64, f64) {
    let m = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / m;
    let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, var)
}

fn check_affine_params(kind: &OpKind, gamma: &Tensor, beta: &Tensor, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            kind.name(),
            format!(
                "gamma {:?} / beta {:?} must both have shape [{}]",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    Ok(())
}

fn normalize_per_channel(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                out[base + p] = gamma[ci] * (x[base + p] - mean[ci]) * inv + beta[ci];
            }
        }
    }
    out
}

/// Source taps for bilinear resampling by an integer factor, half-pixel
/// aligned: (low index, high index, fractional weight of the high tap).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0f = src.floor();
            let frac = src - i0f;
            let i0 = i0f.max(0.0) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let i0 = i0.min(n_in - 1);
            if src < 0.0 {
                (0, 0, 0.0)
            } else {
                (i0, i1, frac)
            }
        })
        .collect()
}

// ── Convolution ──────────────────────────────────────────────────────────

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(
    kind: &OpKind,
    inputs: &[&Tensor],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<ConvDims> {
    expect_arity(kind, inputs, 3)?;
    let (n, cin, h, w) = dims4(kind, inputs[0])?;
    let (cout, cin_w, kh, kw) = dims4(kind, inputs[1])?;
    if cin != cin_w {
        return Err(Error::shape(
            kind.name(),
            format!("input has {} channels but weights expect {}", cin, cin_w),
        ));
    }
    if inputs[2].shape() != [cout] {
        return Err(Error::shape(
            kind.name(),
            format!("bias shape {:?}, expected [{}]", inputs[2].shape(), cout),
        ));
    }
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if sh == 0 || sw == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::shape(
            kind.name(),
            format!(
                "non-positive output extent: input {}x{}, kernel {}x{}, padding {}x{}",
                h, w, kh, kw, ph, pw
            ),
        ));
    }
    let ho = (h + 2 * ph - kh) / sh + 1;
    let wo = (w + 2 * pw - kw) / sw + 1;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        ho,
        wo,
    })
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let mut p = 0;
    for ci in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                for oi in 0..d.ho {
                    let ii = (oi * d.sh + ki) as isize - d.ph as isize;
                    let in_row = ii >= 0 && (ii as usize) < d.h;
                    for oj in 0..d.wo {
                        let jj = (oj * d.sw + kj) as isize - d.pw as isize;
                        cols[p] = if in_row && jj >= 0 && (jj as usize) < d.w {
                            x[(ci * d.h + ii as usize) * d.w + jj as usize]
                        } else {
                            0.0
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let mut p = 0;
    for ci in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                for oi in 0..d.ho {
                    let ii = (oi * d.sh + ki) as isize - d.ph as isize;
                    let in_row = ii >= 0 && (ii as usize) < d.h;
                    for oj in 0..d.wo {
                        let jj = (oj * d.sw + kj) as isize - d.pw as isize;
                        if in_row && jj >= 0 && (jj as usize) < d.w {
                            x[(ci * d.h + ii as usize) * d.w + jj as usize] += cols[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(
    kind: &OpKind,
    inputs: &[&Tensor],
    stride: (usize, usize),
    padding: (usize, usize),
    precision: Precision,
) -> Result<(Tensor, Aux)> {
    let d = conv_dims(kind, inputs, stride, padding)?;
    let x = inputs[0].data();
    let w = inputs[1].data();
    let b = inputs[2].data();
    let k_rows = d.cin * d.kh * d.kw;
    let out_hw = d.ho * d.wo;
    let mut out = vec![0.0; d.n * d.cout * out_hw];

    out.par_chunks_mut(d.cout * out_hw)
        .enumerate()
        .for_each(|(ni, dst)| {
            let mut cols = vec![0.0; k_rows * out_hw];
            im2col(&x[ni * d.cin * d.h * d.w..(ni + 1) * d.cin * d.h * d.w], &d, &mut cols);
            for co in 0..d.cout {
                let row = &mut dst[co * out_hw..(co + 1) * out_hw];
                row.fill(b[co]);
            }
            gemm_acc(d.cout, k_rows, out_hw, w, &cols, dst);
        });

    Ok((
        Tensor::from_parts(vec![d.n, d.cout, d.ho, d.wo], out, precision),
        Aux::None,
    ))
}

fn conv2d_backward(
    inputs: &[&Tensor],
    _output: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    grad: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let kind = OpKind::Conv2d { stride, padding };
    let d = conv_dims(&kind, inputs, stride, padding)?;
    let x = inputs[0].data();
    let w = inputs[1].data();
    let k_rows = d.cin * d.kh * d.kw;
    let out_hw = d.ho * d.wo;
    let sample_x = d.cin * d.h * d.w;
    let sample_y = d.cout * out_hw;

    // Per-sample partials computed in parallel, then summed in sample order
    // so the result is independent of scheduling.
    let mut dx = vec![0.0; x.len()];
    let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
        .par_chunks_mut(sample_x)
        .enumerate()
        .map(|(ni, dx_s)| {
            let gy = &grad[ni * sample_y..(ni + 1) * sample_y];
            let mut cols = vec![0.0; k_rows * out_hw];
            im2col(&x[ni * sample_x..(ni + 1) * sample_x], &d, &mut cols);

            // dW[co][p] = sum_j gy[co][j] * cols[p][j]
            let mut dw = vec![0.0; d.cout * k_rows];
            for co in 0..d.cout {
                let gyr = &gy[co * out_hw..(co + 1) * out_hw];
                let dwr = &mut dw[co * k_rows..(co + 1) * k_rows];
                for p in 0..k_rows {
                    let colr = &cols[p * out_hw..(p + 1) * out_hw];
                    let mut s = 0.0;
                    for j in 0..out_hw {
                        s += gyr[j] * colr[j];
                    }
                    dwr[p] = s;
                }
            }
            // db[co] = sum_j gy[co][j]
            let mut db = vec![0.0; d.cout];
            for co in 0..d.cout {
                db[co] = gy[co * out_hw..(co + 1) * out_hw].iter().sum();
            }
            // dcols = W^T * gy, then scattered back to the input image.
            let mut dcols = vec![0.0; k_rows * out_hw];
            for co in 0..d.cout {
                let gyr = &gy[co * out_hw..(co + 1) * out_hw];
                let wrow = &w[co * k_rows..(co + 1) * k_rows];
                for (p, &wcp) in wrow.iter().enumerate() {
                    if wcp == 0.0 {
                        continue;
                    }
                    let dcr = &mut dcols[p * out_hw..(p + 1) * out_hw];
                    for j in 0..out_hw {
                        dcr[j] += wcp * gyr[j];
                    }
                }
            }
            col2im_add(&dcols, &d, dx_s);
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0; d.cout * k_rows];
    let mut db = vec![0.0; d.cout];
    for (pw_, pb) in partials {
        for (a, v) in dw.iter_mut().zip(pw_) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(pb) {
            *a += v;
        }
    }
    Ok(vec![dx, dw, db])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), Precision::Double).unwrap()
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t(shape, &data)
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = rand_t(&[2, 3], &mut rng);
        let b = rand_t(&[3, 1], &mut rng);
        let mut g = Graph::new(Precision::Double);
        let ia = g.input(a.clone());
        let ib = g.input(b.clone());
        let out = g.op(OpKind::MatMul, &[ia, ib]).unwrap();

        // independent triple-loop oracle
        let mut expect = vec![0.0; 2];
        for i in 0..2 {
            for j in 0..1 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a.data()[i * 3 + p] * b.data()[p * 1 + j];
                }
                expect[i * 1 + j] = s;
            }
        }
        for (got, want) in g.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_naive_six_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = rand_t(&[2, 3, 8, 8], &mut rng);
        let w = rand_t(&[4, 3, 3, 3], &mut rng);
        let b = rand_t(&[4], &mut rng);
        let (sh, sw, ph, pw) = (1usize, 1usize, 1usize, 1usize);

        let mut g = Graph::new(Precision::Single);
        let ix = g.input(x.clone());
        let iw = g.input(w.clone());
        let ib = g.input(b.clone());
        let out = g
            .op(
                OpKind::Conv2d {
                    stride: (sh, sw),
                    padding: (ph, pw),
                },
                &[ix, iw, ib],
            )
            .unwrap();

        // naive 6-loop oracle in f64
        let (ho, wo) = (8, 8);
        for ni in 0..2 {
            for co in 0..4 {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut s = b.data()[co];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = oi * sh + ki;
                                    let jj = oj * sw + kj;
                                    if ii >= ph && jj >= pw && ii - ph < 8 && jj - pw < 8 {
                                        s += x.at4(ni, ci, ii - ph, jj - pw)
                                            * w.at4(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        let got = g.value(out).at4(ni, co, oi, oj);
                        assert!(
                            (got - s).abs() < 1e-6,
                            "mismatch at ({ni},{co},{oi},{oj}): {got} vs {s}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let mut g = Graph::new(Precision::Double);
        let ids = [g.input(x.clone()), g.input(w), g.input(b)];
        let out = g
            .op(
                OpKind::Conv2d {
                    stride: (1, 1),
                    padding: (0, 0),
                },
                &ids,
            )
            .unwrap();
        assert_eq!(g.value(out).data(), x.data());
    }

    #[test]
    fn conv2d_box_kernel_on_constant() {
        let c = 0.7;
        let x = Tensor::full(&[1, 1, 5, 5], c, Precision::Double);
        let w = Tensor::ones(&[1, 1, 3, 3], Precision::Double);
        let b = Tensor::zeros(&[1], Precision::Double);
        let mut g = Graph::new(Precision::Double);
        let ids = [g.input(x), g.input(w), g.input(b)];
        let out = g
            .op(
                OpKind::Conv2d {
                    stride: (1, 1),
                    padding: (0, 0),
                },
                &ids,
            )
            .unwrap();
        for &v in g.value(out).data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4], Precision::Double);
        let w = Tensor::zeros(&[1, 3, 3, 3], Precision::Double);
        let b = Tensor::zeros(&[1], Precision::Double);
        let mut g = Graph::new(Precision::Double);
        let ids = [g.input(x), g.input(w), g.input(b)];
        let err = g
            .op(
                OpKind::Conv2d {
                    stride: (1, 1),
                    padding: (1, 1),
                },
                &ids,
            )
            .unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn upsample_nearest_replicates() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x);
        let out = g.op(OpKind::UpsampleNearest(2), &[ix]).unwrap();
        assert_eq!(
            g.value(out).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_t(&[1, 2, 3, 3], &mut rng);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x.clone());
        let out = g.op(OpKind::UpsampleNearest(1), &[ix]).unwrap();
        assert_eq!(g.value(out).data(), x.data());
    }

    #[test]
    fn avg_downsample_inverts_nearest_upsample() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_t(&[2, 3, 4, 4], &mut rng);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x.clone());
        let up = g.op(OpKind::UpsampleNearest(2), &[ix]).unwrap();
        let down = g.op(OpKind::AvgPool(2), &[up]).unwrap();
        assert!(g.value(down).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn max_pool_basics() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x);
        let out = g.op(OpKind::MaxPool2x2, &[ix]).unwrap();
        assert_eq!(g.value(out).data(), &[4.0]);

        let odd = Tensor::zeros(&[1, 1, 3, 3], Precision::Double);
        let io = g.input(odd);
        assert!(g.op(OpKind::MaxPool2x2, &[io]).is_err());
    }

    #[test]
    fn relu_and_softmax_basics() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x);
        let out = g.op(OpKind::Relu, &[ix]).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 2.0]);

        let logits = Tensor::full(&[1, 4, 1, 1], 3.0, Precision::Double);
        let il = g.input(logits);
        let sm = g.op(OpKind::Softmax, &[il]).unwrap();
        for &v in g.value(sm).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let data: Vec<f64> = (0..4 * 6 * 2 * 2).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = t(&[4, 6, 2, 2], &data);
        let mut g = Graph::new(Precision::Single);
        let ix = g.input(x);
        let sm = g.op(OpKind::Softmax, &[ix]).unwrap();
        let y = g.value(sm);
        let (n, c, h, w) = y.dims4();
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut s = 0.0;
                    for ci in 0..c {
                        let v = y.at4(ni, ci, hi, wi);
                        assert!(v > 0.0 && v <= 1.0);
                        s += v;
                    }
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn softmax_is_strictly_inside_unit_interval_at_moderate_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..2 * 4 * 2 * 2).map(|_| rng.gen_range(-15.0..15.0)).collect();
        let x = t(&[2, 4, 2, 2], &data);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x);
        let sm = g.op(OpKind::Softmax, &[ix]).unwrap();
        for &v in g.value(sm).data() {
            assert!(v > 0.0 && v < 1.0, "v = {v}");
        }
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.3, Precision::Double);
        let mut g = Graph::new(Precision::Double);
        let ix = g.input(x);
        let out = g.op(OpKind::UpsampleBilinear(2), &[ix]).unwrap();
        for &v in g.value(out).data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }
}
