//! The dictionary of candidate image operations.
//!
//! Each operation acts on RGB tensors with values in [0, 1], shaped
//! (3, H, W) or (B, 3, H, W). The smooth variant is built on the tape and is
//! differentiable in both the pixels and the normalized parameter; the hard
//! variant is plain tensor arithmetic used at inference time and by the
//! hand-crafted baselines. Parameters are normalized to [0, 1] and mapped to
//! per-operation physical ranges, linearly or logarithmically.

use crate::error::{Error, Result};
use crate::tensor::{channel_mean_values, NodeId, Real, Tape, Tensor};

/// Smooth-solarize sharpness: the logistic mixing weight is
/// sigmoid(BETA * (x - threshold)).
pub const SOLARIZE_BETA: f64 = 50.0;
/// Offset added before exponentiation so gamma has a finite gradient at
/// zero-valued pixels.
pub const GAMMA_EPS: f64 = 1e-6;
/// Fixed spatial extent of the blur kernel.
pub const BLUR_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScale {
    Linear,
    Logarithmic,
}

/// One analytic image operation with its parameter range.
#[derive(Clone, Debug)]
pub struct OpDescriptor {
    pub id: usize,
    pub name: String,
    pub has_param: bool,
    pub param_lo: f64,
    pub param_hi: f64,
    pub scale: ParamScale,
}

impl OpDescriptor {
    fn new(name: &str, param: Option<(f64, f64, ParamScale)>) -> Self {
        let (param_lo, param_hi, scale) = param.unwrap_or((0.0, 0.0, ParamScale::Linear));
        OpDescriptor {
            id: 0,
            name: name.to_string(),
            has_param: param.is_some(),
            param_lo,
            param_hi,
            scale,
        }
    }
}

/// Ordered dictionary of operations; ids are assigned 0..N-1 in order.
#[derive(Clone, Debug)]
pub struct OpRegistry {
    ops: Vec<OpDescriptor>,
}

impl OpRegistry {
    pub fn new(mut ops: Vec<OpDescriptor>) -> Result<Self> {
        for (i, op) in ops.iter_mut().enumerate() {
            op.id = i;
        }
        for op in &ops {
            if op.has_param {
                if !(op.param_lo < op.param_hi) {
                    return Err(Error::invalid(format!(
                        "operation {}: parameter bounds [{}, {}] are empty",
                        op.name, op.param_lo, op.param_hi
                    )));
                }
                if op.scale == ParamScale::Logarithmic && op.param_lo <= 0.0 {
                    return Err(Error::invalid(format!(
                        "operation {}: logarithmic scale needs positive bounds",
                        op.name
                    )));
                }
            }
        }
        let mut names: Vec<&str> = ops.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != ops.len() {
            return Err(Error::invalid("duplicate operation name in registry"));
        }
        Ok(OpRegistry { ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&OpDescriptor> {
        self.ops
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown op id {id}")))
    }

    pub fn by_name(&self, name: &str) -> Result<&OpDescriptor> {
        self.ops
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown operation {name:?}")))
    }

    pub fn ops(&self) -> &[OpDescriptor] {
        &self.ops
    }

    pub fn names(&self) -> Vec<String> {
        self.ops.iter().map(|o| o.name.clone()).collect()
    }
}

/// The eight stock operations, in fixed order. Geometry-changing or
/// physically implausible transforms (channel shuffles, warps) are excluded.
pub fn default_registry() -> OpRegistry {
    OpRegistry::new(vec![
        OpDescriptor::new("identity", None),
        OpDescriptor::new("invert", None),
        OpDescriptor::new("grayscale", None),
        OpDescriptor::new("brightness", Some((-0.5, 0.5, ParamScale::Linear))),
        OpDescriptor::new("contrast", Some((0.25, 2.0, ParamScale::Logarithmic))),
        OpDescriptor::new("gamma", Some((0.25, 4.0, ParamScale::Logarithmic))),
        OpDescriptor::new("solarize", Some((0.0, 1.0, ParamScale::Linear))),
        OpDescriptor::new("gaussian-blur", Some((0.1, 2.0, ParamScale::Linear))),
    ])
    .expect("stock registry is valid")
}

// ── Parameter mapping ────────────────────────────────────────────────

fn check_mu01(mu01: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu01) || !mu01.is_finite() {
        return Err(Error::invalid(format!(
            "normalized parameter {mu01} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Normalized parameter in [0, 1] to the op's physical range.
pub fn param_map<T: Real>(op: &OpDescriptor, mu01: T) -> Result<T> {
    check_mu01(mu01.as_f64())?;
    let lo = T::of_f64(op.param_lo);
    let hi = T::of_f64(op.param_hi);
    Ok(match op.scale {
        ParamScale::Linear => lo + mu01 * (hi - lo),
        ParamScale::Logarithmic => lo * (hi / lo).powf(mu01),
    })
}

/// Physical parameter back to its normalized coordinate.
pub fn param_unmap(op: &OpDescriptor, physical: f64) -> Result<f64> {
    if !op.has_param {
        return Ok(0.0);
    }
    if !(op.param_lo..=op.param_hi).contains(&physical) {
        return Err(Error::invalid(format!(
            "parameter {physical} outside [{}, {}] for {}",
            op.param_lo, op.param_hi, op.name
        )));
    }
    Ok(match op.scale {
        ParamScale::Linear => (physical - op.param_lo) / (op.param_hi - op.param_lo),
        ParamScale::Logarithmic => (physical / op.param_lo).ln() / (op.param_hi / op.param_lo).ln(),
    })
}

/// Tape version of [`param_map`], differentiable in `mu01` (a scalar node).
pub fn param_map_node<T: Real>(
    tape: &mut Tape<T>,
    op: &OpDescriptor,
    mu01: NodeId,
) -> Result<NodeId> {
    let v = tape.value(mu01);
    if !v.is_scalar() {
        return Err(Error::invalid("parameter node must be scalar"));
    }
    check_mu01(v.item().as_f64())?;
    let lo = T::of_f64(op.param_lo);
    let hi = T::of_f64(op.param_hi);
    match op.scale {
        ParamScale::Linear => {
            let scaled = tape.mul_scalar(mu01, hi - lo)?;
            tape.add_scalar(scaled, lo)
        }
        ParamScale::Logarithmic => {
            let ratio = tape.scalar(hi / lo);
            let p = tape.pow(ratio, mu01)?;
            tape.mul_scalar(p, lo)
        }
    }
}

fn ensure_rgb(shape: &[usize]) -> Result<()> {
    let ok = (shape.len() == 3 || shape.len() == 4) && shape[shape.len() - 3] == 3;
    if !ok {
        return Err(Error::invalid(format!(
            "image ops expect (3, H, W) or (B, 3, H, W), got {shape:?}"
        )));
    }
    Ok(())
}

fn require_param(op: &OpDescriptor, mu01: Option<NodeId>) -> Result<NodeId> {
    mu01.ok_or_else(|| Error::invalid(format!("operation {} needs a parameter", op.name)))
}

/// Squared distances from the kernel center on the 5x5 blur grid.
fn blur_offsets<T: Real>() -> Tensor<T> {
    let half = (BLUR_KERNEL / 2) as isize;
    let mut d = Vec::with_capacity(BLUR_KERNEL * BLUR_KERNEL);
    for i in -half..=half {
        for j in -half..=half {
            d.push(T::of_f64((i * i + j * j) as f64));
        }
    }
    Tensor::new(vec![BLUR_KERNEL * BLUR_KERNEL], d).unwrap()
}

/// Normalized Gaussian kernel as a tape subgraph, differentiable in sigma.
fn blur_kernel_node<T: Real>(tape: &mut Tape<T>, sigma: NodeId) -> Result<NodeId> {
    let d = blur_offsets::<T>();
    let d = tape.constant(d);
    let s2 = tape.mul(sigma, sigma)?;
    let neg_half_inv = {
        let c = tape.scalar(T::of_f64(-0.5));
        tape.div(c, s2)?
    };
    let scaled = tape.mul(d, neg_half_inv)?;
    let e = tape.exp(scaled);
    let total = tape.sum_all(e);
    let normalized = tape.div(e, total)?;
    tape.reshape(normalized, vec![BLUR_KERNEL, BLUR_KERNEL])
}

/// Smooth (training) variant: differentiable w.r.t. pixels and parameter.
/// `mu01` is ignored for parameterless operations.
pub fn apply_smooth<T: Real>(
    tape: &mut Tape<T>,
    op: &OpDescriptor,
    x: NodeId,
    mu01: Option<NodeId>,
) -> Result<NodeId> {
    ensure_rgb(tape.value(x).shape())?;
    let one = T::one();
    match op.name.as_str() {
        "identity" => Ok(x),
        "invert" => {
            let one = tape.scalar(one);
            tape.sub(one, x)
        }
        "grayscale" => tape.channel_mean(x),
        "brightness" => {
            let mu = require_param(op, mu01)?;
            let b = param_map_node(tape, op, mu)?;
            let shifted = tape.add(x, b)?;
            tape.clamp(shifted, T::zero(), one)
        }
        "contrast" => {
            let mu = require_param(op, mu01)?;
            let c = param_map_node(tape, op, mu)?;
            let centered = tape.add_scalar(x, T::of_f64(-0.5))?;
            let scaled = tape.mul(centered, c)?;
            let out = tape.add_scalar(scaled, T::of_f64(0.5))?;
            tape.clamp(out, T::zero(), one)
        }
        "gamma" => {
            let mu = require_param(op, mu01)?;
            let g = param_map_node(tape, op, mu)?;
            let base = tape.add_scalar(x, T::of_f64(GAMMA_EPS))?;
            let powed = tape.pow(base, g)?;
            tape.clamp(powed, T::zero(), one)
        }
        "solarize" => {
            let mu = require_param(op, mu01)?;
            let t = param_map_node(tape, op, mu)?;
            let centered = tape.sub(x, t)?;
            let sharp = tape.mul_scalar(centered, T::of_f64(SOLARIZE_BETA))?;
            let s = tape.sigmoid(sharp);
            let one_node = tape.scalar(one);
            let inv_x = tape.sub(one_node, x)?;
            let keep = tape.sub(one_node, s)?;
            let a = tape.mul(keep, x)?;
            let b = tape.mul(s, inv_x)?;
            let out = tape.add(a, b)?;
            tape.clamp(out, T::zero(), one)
        }
        "gaussian-blur" => {
            let mu = require_param(op, mu01)?;
            let sigma = param_map_node(tape, op, mu)?;
            let kernel = blur_kernel_node(tape, sigma)?;
            let out = tape.depthwise_conv2d(x, kernel)?;
            tape.clamp(out, T::zero(), one)
        }
        other => Err(Error::invalid(format!("unknown operation {other:?}"))),
    }
}

/// Hard (inference) variant. Identical to the smooth variant except that
/// solarize uses the exact threshold rule. `mu01` is ignored for
/// parameterless operations.
pub fn apply_hard<T: Real>(op: &OpDescriptor, x: &Tensor<T>, mu01: T) -> Result<Tensor<T>> {
    ensure_rgb(x.shape())?;
    if op.name == "solarize" {
        let t = param_map(op, mu01)?;
        return Ok(x.map(|v| if v < t { v } else { T::one() - v }));
    }
    if op.name == "grayscale" {
        return channel_mean_values(x);
    }
    // Remaining ops reuse the smooth builders on a throwaway tape, so the
    // two variants agree by construction.
    let mut tape = Tape::<T>::new();
    let xid = tape.constant(x.clone());
    let mu = if op.has_param {
        Some(tape.leaf(Tensor::scalar(mu01), false))
    } else {
        None
    };
    let out = apply_smooth(&mut tape, op, xid, mu)?;
    Ok(tape.value(out).clone())
}

/// The normalized 5x5 Gaussian kernel for a given sigma, as values.
pub fn blur_kernel_values<T: Real>(sigma: T) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::new();
    let s = tape.constant(Tensor::scalar(sigma));
    let k = blur_kernel_node(&mut tape, s)?;
    Ok(tape.value(k).clone())
}
