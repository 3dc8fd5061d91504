//! Named, ordered parameter collections and their initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Precision, Tensor};

/// Named, ordered collection of tensors. Order is the registration order and
/// is part of the checkpoint contract.
#[derive(Clone, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams {
            entries: Vec::new(),
        }
    }

    /// Register a tensor under a unique name, returning its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn set(&mut self, idx: usize, t: Tensor) {
        self.entries[idx].1 = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Insert every entry as a graph leaf, in order. The returned ids align
    /// with the entry indices.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| g.input(t.clone()))
            .collect()
    }
}

/// Deterministic parameter initializer seeded once per network build.
pub struct Initializer {
    rng: ChaCha12Rng,
    precision: Precision,
}

impl Initializer {
    pub fn new(seed: u64, precision: Precision) -> Self {
        Initializer {
            rng: ChaCha12Rng::seed_from_u64(seed),
            precision,
        }
    }

    /// He-normal weights for a conv kernel: std = sqrt(2 / fan_in).
    pub fn he_conv(&mut self, cout: usize, cin: usize, kh: usize, kw: usize) -> Tensor {
        let fan_in = (cin * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let n = cout * cin * kh * kw;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_parts(vec![cout, cin, kh, kw], data, self.precision)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape, self.precision)
    }

    pub fn constant(&self, shape: &[usize], v: f64) -> Tensor {
        Tensor::full(shape, v, self.precision)
    }
}

/// Adam optimizer state: first/second moments per parameter plus step count.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over all parameters. `grads[i]` is the gradient for
/// parameter `i`; a missing gradient is an error.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("missing gradient for parameter {}", params.name(i)))
        })?;
        let p = params.get(i);
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient {:?} vs parameter {:?} for {}",
                    g.shape(),
                    p.shape(),
                    params.name(i)
                ),
            ));
        }
        let precision = p.precision();
        let mut new = p.data().to_vec();
        let gd = g.data();
        for (j, val) in new.iter_mut().enumerate() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = state.beta1 * *m + (1.0 - state.beta1) * gd[j];
            *v = state.beta2 * *v + (1.0 - state.beta2) * gd[j] * gd[j];
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *val -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        let shape = p.shape().to_vec();
        params.set(i, Tensor::from_parts(shape, new, precision));
    }
    Ok(())
}
