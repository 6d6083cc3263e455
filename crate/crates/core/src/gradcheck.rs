//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the reverse pass: it re-runs the forward
//! closure at perturbed inputs, so it stays an independent oracle for the
//! analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst elementwise relative error between analytic and central-difference
/// gradients, over all checked parameters.
///
/// `build` must construct the forward pass up to a scalar loss, binding each
/// parameter in order and reporting the bound node ids.
pub fn max_relative_error(
    params: &mut [Tensor],
    step: f64,
    build: &mut dyn FnMut(&mut Graph, &[Tensor]) -> Result<(NodeId, Vec<NodeId>)>,
) -> Result<f64> {
    for p in params.iter_mut() {
        if !p.requires_grad() {
            *p = std::mem::replace(p, Tensor::scalar(0.0)).with_grad();
        }
    }
    let mut g = Graph::new();
    let (loss, bound) = build(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .iter()
        .map(|&id| g.grad(id).expect("parameter must track gradients").to_vec())
        .collect();

    let eval = |params: &[Tensor], build: &mut dyn FnMut(&mut Graph, &[Tensor]) -> Result<(NodeId, Vec<NodeId>)>| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, params)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0_f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for ei in 0..grads.len() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + step;
            let up = eval(params, build)?;
            params[pi].data_mut()[ei] = orig - step;
            let down = eval(params, build)?;
            params[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = grads[ei].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grads[ei] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
