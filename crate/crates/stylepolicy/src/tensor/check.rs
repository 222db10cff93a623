//! Finite-difference gradient checking.
//!
//! Checks run on the `f64` instantiation of the tape: analytic gradients and
//! central differences are both accumulated at 64-bit precision, so a failure
//! indicates wrong calculus rather than rounding noise.

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Builds the scalar function under test on a fresh tape. Called repeatedly
/// with perturbed copies of the input leaves.
pub trait ScalarGraph: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>> ScalarGraph for F {}

fn eval_at(build: &impl ScalarGraph, points: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<NodeId> = points
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect();
    let loss = build(&mut tape, &leaves)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Per-coordinate relative errors |analytic − central difference| /
/// (|analytic| + 1e-8), one tensor of errors per input.
pub fn grad_check_errors(
    build: impl ScalarGraph,
    points: &[Tensor<f64>],
    epsilon: f64,
) -> Result<Vec<Tensor<f64>>> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!(
            "grad_check epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<NodeId> = points
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect();
    let loss = build(&mut tape, &leaves)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    let grads = tape.gradients(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|&id| grads.get_or_zero(&tape, id))
        .collect();
    drop(tape);

    let mut errors = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let mut errs = Tensor::zeros(point.shape());
        for ci in 0..point.numel() {
            let x = point.data()[ci];
            work[pi].data_mut()[ci] = x + epsilon;
            let fp = eval_at(&build, &work)?;
            work[pi].data_mut()[ci] = x - epsilon;
            let fm = eval_at(&build, &work)?;
            work[pi].data_mut()[ci] = x;
            let fd = (fp - fm) / (2.0 * epsilon);
            let an = analytic[pi].data()[ci];
            errs.data_mut()[ci] = (an - fd).abs() / (an.abs() + 1e-8);
        }
        errors.push(errs);
    }
    Ok(errors)
}

/// Maximum relative error over all coordinates of all inputs.
pub fn grad_check(
    build: impl ScalarGraph,
    points: &[Tensor<f64>],
    epsilon: f64,
) -> Result<f64> {
    let errors = grad_check_errors(build, points, epsilon)?;
    Ok(errors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .fold(0.0, f64::max))
}

/// Convenience: cast `f32` points to the checker's `f64` domain (exact).
pub fn to_check_points(points: &[Tensor<f32>]) -> Vec<Tensor<f64>> {
    points.iter().map(|p| p.cast::<f64>()).collect()
}
