//! Neural building blocks shared by the segmenter and the style-transfer
//! network: convolution, upsampling, pooling, activations, and the three
//! normalization variants (batch, instance, adaptive instance).
//!
//! Two surfaces are provided. The eager functions operate on plain tensors
//! and back the unit-testable layer contracts; the `*Layer` structs hold
//! parameter indices into a [`ModelParams`] and record onto a [`Graph`] for
//! training.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind};
use crate::params::{Initializer, ModelParams};
use crate::tensor::{Precision, Tensor};

/// Shared epsilon for every normalization variant.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics update rate for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

// ── Eager surface ────────────────────────────────────────────────────────

fn eager(kind: OpKind, xs: &[&Tensor]) -> Result<Tensor> {
    let mut g = Graph::new(xs[0].precision());
    let ids: Vec<NodeId> = xs.iter().map(|t| g.input((*t).clone())).collect();
    let out = g.op(kind, &ids)?;
    Ok(g.value(out).clone())
}

/// Convolution descriptor plus its parameters.
#[derive(Clone)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        weights: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        if weights.shape() != [out_channels, in_channels, kernel.0, kernel.1] {
            return Err(Error::shape(
                "conv_spec",
                format!(
                    "weights {:?}, expected [{},{},{},{}]",
                    weights.shape(),
                    out_channels,
                    in_channels,
                    kernel.0,
                    kernel.1
                ),
            ));
        }
        if bias.shape() != [out_channels] {
            return Err(Error::shape(
                "conv_spec",
                format!("bias {:?}, expected [{}]", bias.shape(), out_channels),
            ));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias,
        })
    }
}

/// Direct 2D convolution per the descriptor.
pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    eager(
        OpKind::Conv2d {
            stride: spec.stride,
            padding: spec.padding,
        },
        &[x, &spec.weights, &spec.bias],
    )
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    eager(OpKind::UpsampleNearest(factor), &[x])
}

/// Bilinear upsampling; the configurable alternative to nearest.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    eager(OpKind::UpsampleBilinear(factor), &[x])
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    eager(OpKind::Relu, &[x])
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    eager(OpKind::Softmax, &[x])
}

pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    eager(OpKind::MaxPool2x2, &[x])
}

/// Which statistics a [`NormState`] normalizes by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
}

/// Normalization state: affine parameters plus, for the batch kind,
/// running statistics updated in training mode.
#[derive(Clone)]
pub struct NormState {
    pub kind: NormKind,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl NormState {
    pub fn new(kind: NormKind, channels: usize, precision: Precision) -> Self {
        NormState {
            kind,
            gamma: Tensor::ones(&[channels], precision),
            beta: Tensor::zeros(&[channels], precision),
            running_mean: Tensor::zeros(&[channels], precision),
            running_var: Tensor::ones(&[channels], precision),
            momentum: BN_MOMENTUM,
            epsilon: NORM_EPS,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "running variance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Train or eval behaviour for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch normalization over (N, H, W) per channel. Train mode normalizes by
/// batch statistics and updates the running statistics in `state`.
pub fn batch_norm(x: &Tensor, state: &mut NormState, mode: NormMode) -> Result<Tensor> {
    if state.kind != NormKind::Batch {
        return Err(Error::InvalidArgument(
            "batch_norm requires a batch-kind NormState".into(),
        ));
    }
    state.validate()?;
    let mut g = Graph::new(x.precision());
    let ix = g.input(x.clone());
    let ig = g.input(state.gamma.clone());
    let ib = g.input(state.beta.clone());
    match mode {
        NormMode::Train => {
            let y = g.op(
                OpKind::BatchNormTrain {
                    eps: state.epsilon,
                },
                &[ix, ig, ib],
            )?;
            let (bm, bv) = g.batch_stats(y).expect("train node records stats");
            let precision = x.precision();
            let update = |old: &Tensor, batch: &[f64]| {
                let data: Vec<f64> = old
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(o, b)| (1.0 - state.momentum) * o + state.momentum * b)
                    .collect();
                Tensor::from_parts(old.shape().to_vec(), data, precision)
            };
            state.running_mean = update(&state.running_mean, bm);
            state.running_var = update(&state.running_var, bv);
            Ok(g.value(y).clone())
        }
        NormMode::Eval => {
            let y = g.op(
                OpKind::BatchNormEval {
                    eps: state.epsilon,
                    mean: Arc::new(state.running_mean.data().to_vec()),
                    var: Arc::new(state.running_var.data().to_vec()),
                },
                &[ix, ig, ib],
            )?;
            Ok(g.value(y).clone())
        }
    }
}

/// Instance normalization: each (sample, channel) plane to mean 0 and unit
/// population variance before the affine transform.
pub fn instance_norm(x: &Tensor, state: &NormState) -> Result<Tensor> {
    if state.kind != NormKind::Instance {
        return Err(Error::InvalidArgument(
            "instance_norm requires an instance-kind NormState".into(),
        ));
    }
    state.validate()?;
    let mut g = Graph::new(x.precision());
    let ix = g.input(x.clone());
    let ig = g.input(state.gamma.clone());
    let ib = g.input(state.beta.clone());
    let y = g.op(
        OpKind::InstanceNorm {
            eps: state.epsilon,
        },
        &[ix, ig, ib],
    )?;
    Ok(g.value(y).clone())
}

/// Adaptive instance normalization: content features re-scaled and shifted
/// to the per-channel statistics of the style features.
pub fn adain(content_feat: &Tensor, style_feat: &Tensor) -> Result<Tensor> {
    eager(OpKind::AdaIn { eps: NORM_EPS }, &[content_feat, style_feat])
}

// ── Graph layers ─────────────────────────────────────────────────────────

/// Registers parameters and buffers for a network under construction.
pub struct NetBuilder {
    pub params: ModelParams,
    pub buffers: ModelParams,
    init: Initializer,
    precision: Precision,
}

impl NetBuilder {
    pub fn new(seed: u64, precision: Precision) -> Self {
        NetBuilder {
            params: ModelParams::new(),
            buffers: ModelParams::new(),
            init: Initializer::new(seed, precision),
            precision,
        }
    }

    /// He-initialized convolution with zero bias.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Conv2dLayer {
        self.conv_biased(name, cin, cout, k, stride, padding, 0.0)
    }

    pub fn conv_biased(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: (usize, usize),
        padding: (usize, usize),
        bias: f64,
    ) -> Conv2dLayer {
        let w = self
            .params
            .push(format!("{name}.weight"), self.init.he_conv(cout, cin, k, k));
        let b = self
            .params
            .push(format!("{name}.bias"), self.init.constant(&[cout], bias));
        Conv2dLayer {
            w,
            b,
            stride,
            padding,
        }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm2dLayer {
        let gamma = self
            .params
            .push(format!("{name}.gamma"), self.init.constant(&[c], 1.0));
        let beta = self.params.push(format!("{name}.beta"), self.init.zeros(&[c]));
        let rm = self
            .buffers
            .push(format!("{name}.running_mean"), self.init.zeros(&[c]));
        let rv = self
            .buffers
            .push(format!("{name}.running_var"), self.init.constant(&[c], 1.0));
        BatchNorm2dLayer {
            gamma,
            beta,
            rm,
            rv,
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn instance_norm(&mut self, name: &str, c: usize) -> InstanceNorm2dLayer {
        let gamma = self
            .params
            .push(format!("{name}.gamma"), self.init.constant(&[c], 1.0));
        let beta = self.params.push(format!("{name}.beta"), self.init.zeros(&[c]));
        InstanceNorm2dLayer {
            gamma,
            beta,
            eps: NORM_EPS,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }
}

/// Convolution layer over graph nodes; `w`/`b` index into the network params.
#[derive(Clone, Copy)]
pub struct Conv2dLayer {
    pub w: usize,
    pub b: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dLayer {
    pub fn forward(&self, g: &mut Graph, pids: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.op(
            OpKind::Conv2d {
                stride: self.stride,
                padding: self.padding,
            },
            &[x, pids[self.w], pids[self.b]],
        )
    }
}

/// Batch-norm layer; running statistics live in the network buffer set and
/// are updated on train-mode forwards.
#[derive(Clone, Copy)]
pub struct BatchNorm2dLayer {
    pub gamma: usize,
    pub beta: usize,
    pub rm: usize,
    pub rv: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2dLayer {
    pub fn forward(
        &self,
        g: &mut Graph,
        pids: &[NodeId],
        buffers: &mut ModelParams,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        if training {
            let y = g.op(
                OpKind::BatchNormTrain { eps: self.eps },
                &[x, pids[self.gamma], pids[self.beta]],
            )?;
            let (bm, bv) = g.batch_stats(y).expect("train node records stats");
            let precision = buffers.get(self.rm).precision();
            let blend = |old: &Tensor, batch: &[f64]| {
                let data: Vec<f64> = old
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(o, b)| (1.0 - self.momentum) * o + self.momentum * b)
                    .collect();
                Tensor::from_parts(old.shape().to_vec(), data, precision)
            };
            let new_rm = blend(buffers.get(self.rm), bm);
            let new_rv = blend(buffers.get(self.rv), bv);
            buffers.set(self.rm, new_rm);
            buffers.set(self.rv, new_rv);
            Ok(y)
        } else {
            g.op(
                OpKind::BatchNormEval {
                    eps: self.eps,
                    mean: Arc::new(buffers.get(self.rm).data().to_vec()),
                    var: Arc::new(buffers.get(self.rv).data().to_vec()),
                },
                &[x, pids[self.gamma], pids[self.beta]],
            )
        }
    }
}

/// Instance-norm layer with learned affine.
#[derive(Clone, Copy)]
pub struct InstanceNorm2dLayer {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl InstanceNorm2dLayer {
    pub fn forward(&self, g: &mut Graph, pids: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.op(
            OpKind::InstanceNorm { eps: self.eps },
            &[x, pids[self.gamma], pids[self.beta]],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn conv_spec_identity_kernel() {
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let spec = ConvSpec::new(1, 1, (1, 1), (1, 1), (0, 0), w, b).unwrap();
        let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = rand_t(&[4, 3, 5, 5], &mut rng);
        let mut state = NormState::new(NormKind::Batch, 3, Precision::Double);
        let y = batch_norm(&x, &mut state, NormMode::Train).unwrap();
        let (n, c, h, w) = y.dims4();
        for ci in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        vals.push(y.at4(ni, ci, hi, wi));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
        // running stats moved away from their init
        assert!(state.running_mean.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_norm_affine_on_normalized_input() {
        // gamma=2, beta=5 on an already-normalized channel: mean 5, std 2.
        let data = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = t(&[2, 1, 2, 2], &data);
        let mut state = NormState::new(NormKind::Batch, 1, Precision::Double);
        state.gamma = t(&[1], &[2.0]);
        state.beta = t(&[1], &[5.0]);
        let y = batch_norm(&x, &mut state, NormMode::Train).unwrap();
        let m = y.mean_all();
        let s = y.std_all();
        assert!((m - 5.0).abs() < 1e-9);
        assert!((s - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_matches_hand_formula() {
        let x = t(&[1, 1, 2, 2], &[0.2, 0.4, 0.6, 0.8]);
        let mut state = NormState::new(NormKind::Batch, 1, Precision::Double);
        state.gamma = t(&[1], &[1.5]);
        state.beta = t(&[1], &[-0.25]);
        state.running_mean = t(&[1], &[0.3]);
        state.running_var = t(&[1], &[0.04]);
        let y = batch_norm(&x, &mut state, NormMode::Eval).unwrap();
        for (yi, xi) in y.data().iter().zip(x.data()) {
            let want = (xi - 0.3) / (0.04f64 + NORM_EPS).sqrt() * 1.5 - 0.25;
            assert!((yi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_zeroes_constant_planes() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7, Precision::Double);
        let state = NormState::new(NormKind::Instance, 2, Precision::Double);
        let y = instance_norm(&x, &state).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9, "v = {v}");
        }
    }

    #[test]
    fn instance_norm_two_pixel_plane_by_hand() {
        // plane [0, 2]: mu = 1, population sigma = 1 -> [-1, 1] as eps -> 0.
        let x = t(&[1, 1, 1, 2], &[0.0, 2.0]);
        let state = NormState::new(NormKind::Instance, 1, Precision::Double);
        let y = instance_norm(&x, &state).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn instance_norm_statistics_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..2 * 4 * 36).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = t(&[2, 4, 6, 6], &data);
        let state = NormState::new(NormKind::Instance, 4, Precision::Double);
        let y = instance_norm(&x, &state).unwrap();
        let (n, c, h, w) = y.dims4();
        for ni in 0..n {
            for ci in 0..c {
                let mut vals = Vec::new();
                for hi in 0..h {
                    for wi in 0..w {
                        vals.push(y.at4(ni, ci, hi, wi));
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                assert!(m.abs() < 1e-6);
                assert!((v - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn instance_norm_rejects_single_pixel_plane() {
        let x = Tensor::zeros(&[1, 1, 1, 1], Precision::Double);
        let state = NormState::new(NormKind::Instance, 1, Precision::Double);
        assert!(instance_norm(&x, &state).is_err());
    }

    #[test]
    fn adain_self_transfer_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let x = rand_t(&[1, 3, 4, 4], &mut rng);
        let y = adain(&x, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn adain_two_pixel_hand_case() {
        // content [0,2] (mu 1, sigma 1), style [10,14] (mu 12, sigma 2) -> [10,14]
        let c = t(&[1, 1, 1, 2], &[0.0, 2.0]);
        let s = t(&[1, 1, 1, 2], &[10.0, 14.0]);
        let y = adain(&c, &s).unwrap();
        assert!((y.data()[0] - 10.0).abs() < 1e-4);
        assert!((y.data()[1] - 14.0).abs() < 1e-4);
    }

    #[test]
    fn adain_output_statistics_match_style() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let c_data: Vec<f64> = (0..4 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c = t(&[1, 4, 8, 8], &c_data);
        let mut s_data: Vec<f64> = Vec::new();
        for _ in 0..4 * 64 {
            s_data.push(rng.gen_range(-3.0..5.0));
        }
        let s = t(&[1, 4, 8, 8], &s_data);
        let y = adain(&c, &s).unwrap();
        for ci in 0..4 {
            let plane = |t: &Tensor| {
                let mut v = Vec::new();
                for hi in 0..8 {
                    for wi in 0..8 {
                        v.push(t.at4(0, ci, hi, wi));
                    }
                }
                v
            };
            let stats = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
                (m, var.sqrt())
            };
            let (my, sy) = stats(&plane(&y));
            let (ms, ss) = stats(&plane(&s));
            assert!((my - ms).abs() < 1e-5, "mean {my} vs {ms}");
            assert!((sy - ss).abs() < 1e-5, "std {sy} vs {ss}");
        }
    }

    #[test]
    fn adain_is_idempotent_in_statistics() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let x = rand_t(&[1, 3, 8, 8], &mut rng);
        let y = rand_t(&[1, 3, 8, 8], &mut rng);
        let once = adain(&x, &y).unwrap();
        let twice = adain(&once, &y).unwrap();
        for ci in 0..3 {
            let stats = |t: &Tensor| {
                let mut v = Vec::new();
                for hi in 0..8 {
                    for wi in 0..8 {
                        v.push(t.at4(0, ci, hi, wi));
                    }
                }
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
                (m, var.sqrt())
            };
            let (m1, s1) = stats(&once);
            let (m2, s2) = stats(&twice);
            assert!((m1 - m2).abs() < 1e-5);
            assert!((s1 - s2).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let c = Tensor::zeros(&[1, 3, 4, 4], Precision::Double);
        let s = Tensor::zeros(&[1, 2, 4, 4], Precision::Double);
        assert!(adain(&c, &s).is_err());
    }
}
