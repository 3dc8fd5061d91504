//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker re-runs the forward pass at perturbed inputs, so it exercises
//! only the forward path and is independent of every backward kernel it
//! verifies. Checks should run in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Precision, Tensor};

/// Builds a scalar loss from leaf nodes bound in input order.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<NodeId> {
        self(g, inputs)
    }
}

fn eval(builder: &impl LossBuilder, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new(Precision::Double);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = builder.build(&mut g, &ids)?;
    Ok(g.value(loss).data()[0])
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub checked_coords: usize,
}

/// Compare analytic gradients against central differences.
///
/// For each input tensor, up to `coords_per_input` coordinates are probed
/// (all coordinates when the tensor is small). Relative error per coordinate
/// is `|a - n| / max(|a| + |n|, 1)`; the report carries the maximum.
pub fn check_gradients(
    builder: &impl LossBuilder,
    inputs: &[Tensor],
    step: f64,
    coords_per_input: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut g = Graph::new(Precision::Double);
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.input(t.to_precision(Precision::Double)))
        .collect();
    let loss = builder.build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], input.shape(), Precision::Double);
        let n = input.numel();
        let coords: Vec<usize> = if n <= coords_per_input {
            (0..n).collect()
        } else {
            (0..coords_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in coords {
            let mut plus = input.data().to_vec();
            let mut minus = plus.clone();
            plus[idx] += step;
            minus[idx] -= step;
            let mut inputs_p = inputs.to_vec();
            let mut inputs_m = inputs.to_vec();
            inputs_p[k] = Tensor::from_parts(input.shape().to_vec(), plus, Precision::Double);
            inputs_m[k] = Tensor::from_parts(input.shape().to_vec(), minus, Precision::Double);
            let fp = eval(builder, &inputs_p)?;
            let fm = eval(builder, &inputs_m)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(CheckReport {
        max_rel_error: max_rel,
        checked_coords: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OpKind;

    #[test]
    fn quadratic_gradient_verifies() {
        let builder = |g: &mut Graph, ids: &[NodeId]| {
            let sq = g.op(OpKind::Mul, &[ids[0], ids[0]])?;
            g.op(OpKind::Sum, &[sq])
        };
        let x = Tensor::new(vec![3], vec![0.4, -1.1, 2.2], Precision::Double).unwrap();
        let report = check_gradients(&builder, &[x], 1e-5, 16, 0).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn linear_ops_verify_essentially_exactly() {
        let builder = |g: &mut Graph, ids: &[NodeId]| {
            let tri = g.op(OpKind::Scale(3.0), &[ids[0]])?;
            g.op(OpKind::Sum, &[tri])
        };
        let x = Tensor::new(vec![2], vec![1.0, 2.0], Precision::Double).unwrap();
        let report = check_gradients(&builder, &[x], 1e-5, 8, 0).unwrap();
        assert!(report.max_rel_error < 1e-10);
    }
}
