//! Central finite differences over every parameter, as numerical hygiene
//! for the hand-coded adjoints.

use super::layers::Params;
use super::serial::{backward_serial, loss_value, LossSpec};
use super::tensor::Tensor;
use super::ExecError;
use crate::graph::ModelGraph;

/// Worst relative deviation between reverse-mode gradients and central
/// differences with the given step. Relu kinks are not smoothed: inputs
/// with pre-activations at exactly zero are outside this check's contract.
pub fn check_grad_finite_difference(
    graph: &ModelGraph,
    params: &Params,
    input: &Tensor,
    loss: &LossSpec,
    epsilon: f64,
) -> Result<f64, ExecError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let analytic = backward_serial(graph, params, input, loss)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (&lid, w) in params {
        for i in 0..w.data.len() {
            let original = w.data[i];
            set(&mut probe, lid, i, original + epsilon);
            let up = loss_value(graph, &probe, input, loss)?;
            set(&mut probe, lid, i, original - epsilon);
            let down = loss_value(graph, &probe, input, loss)?;
            set(&mut probe, lid, i, original);
            let fd = (up - down) / (2.0 * epsilon);
            let an = analytic.grads.get(&lid).map(|g| g.data[i]).unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn set(params: &mut Params, lid: usize, i: usize, v: f64) {
    params.get_mut(&lid).expect("probed layer exists").data[i] = v;
}
