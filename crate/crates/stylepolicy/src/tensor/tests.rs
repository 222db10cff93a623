use super::*;
use crate::rng::{stream, uniform};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor with every coordinate at least `margin` away from the
/// listed kink locations (clamp bounds, |x| kinks).
fn rand_tensor_away(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = uniform(rng, lo, hi);
        if kinks.iter().all(|k| (v - k).abs() >= margin) {
            data.push(v);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn evaluate_basic_values() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let sum = tape.add(a, b).unwrap();
    assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);

    let z = tape.scalar(0.0);
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
    let m = tape.mean_all(x);
    assert_eq!(tape.value(m).item(), 2.5);
}

#[test]
fn gradient_of_square_at_three() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    let grads = tape.gradients(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn clamp_zero_subgradient_outside_range() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let c = tape.clamp(x, 0.0, 1.0).unwrap();
    let s = tape.sum_all(c);
    let grads = tape.gradients(s).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.0);
}

#[test]
fn clamp_identity_gradient_at_exact_boundary() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0, 0.5]), true);
    let c = tape.clamp(x, 0.0, 1.0).unwrap();
    let s = tape.sum_all(c);
    let grads = tape.gradients(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradient_wrt_exponent_matches_central_difference() {
    // d/dg mean(x^g) at x=0.5, g=2 is 0.25*ln(0.5) ≈ -0.1733, frozen from
    // the central-difference oracle with h=1e-4.
    let build = |tape: &mut Tape<f64>, leaves: &[NodeId]| {
        let x = tape.constant(Tensor::from_vec(vec![0.5]));
        let p = tape.pow(x, leaves[0])?;
        Ok(tape.mean_all(p))
    };
    let gamma = Tensor::scalar(2.0);

    let mut tape = Tape::<f64>::new();
    let g = tape.leaf(gamma.clone(), true);
    let loss = build(&mut tape, &[g]).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let analytic = grads.get(g).unwrap().item();
    assert!((analytic - 0.25 * 0.5f64.ln()).abs() < 1e-12);
    assert!((analytic + 0.173286795).abs() < 1e-4);

    let err = grad_check(build, &[gamma], 1e-4).unwrap();
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn grad_check_spec_cases() {
    let mut rng = stream(11, "grad-check-cases", 0);
    let x = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);

    let sq = |tape: &mut Tape<f64>, l: &[NodeId]| {
        let m = tape.mul(l[0], l[0])?;
        Ok(tape.sum_all(m))
    };
    assert!(grad_check(sq, &[x.clone()], 1e-4).unwrap() <= 1e-3);

    let sig = |tape: &mut Tape<f64>, l: &[NodeId]| {
        let s = tape.sigmoid(l[0]);
        Ok(tape.sum_all(s))
    };
    assert!(grad_check(sig, &[x.clone()], 1e-4).unwrap() <= 1e-3);

    // Linear functions are exact up to f64 rounding.
    let lin = |tape: &mut Tape<f64>, l: &[NodeId]| Ok(tape.sum_all(l[0]));
    assert!(grad_check(lin, &[x], 1e-4).unwrap() <= 1e-6);
}

#[test]
fn grad_check_rejects_bad_epsilon_and_nonscalar() {
    let lin = |tape: &mut Tape<f64>, l: &[NodeId]| Ok(tape.sum_all(l[0]));
    let x = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
    assert!(grad_check(lin, &[x.clone()], 0.0).is_err());
    assert!(grad_check(lin, &[x.clone()], 0.5).is_err());
    let ident = |_: &mut Tape<f64>, l: &[NodeId]| Ok(l[0]);
    assert!(matches!(
        grad_check(ident, &[x], 1e-4),
        Err(crate::error::Error::NonScalarLoss { .. })
    ));
}

#[test]
fn reevaluation_is_bit_identical() {
    let build = |seed: u64| {
        let mut rng = stream(seed, "determinism", 0);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).cast(), true);
        let k = tape.leaf(rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5).cast(), true);
        let c = tape.conv2d(x, k).unwrap();
        let a = tape.leaky_relu(c, 0.2);
        let p = tape.mean_pool2(a).unwrap();
        let s = tape.softmax_last(p).unwrap();
        let m = tape.mean_all(s);
        tape.value(m).clone()
    };
    assert_eq!(build(5).data(), build(5).data());
}

#[test]
fn gradient_of_sum_of_losses_adds() {
    let mut rng = stream(3, "additivity", 0);
    let xv = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let av = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let bv = rand_tensor(&mut rng, &[4], -1.0, 1.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xv, true);
    let a = tape.constant(av);
    let b = tape.constant(bv);
    let pa = tape.mul(x, a).unwrap();
    let l1 = tape.sum_all(pa);
    let pb = tape.mul(x, b).unwrap();
    let l2 = tape.sum_all(pb);
    let l = tape.add(l1, l2).unwrap();

    let g1 = tape.gradients(l1).unwrap();
    let g2 = tape.gradients(l2).unwrap();
    let g = tape.gradients(l).unwrap();
    let summed: Vec<f64> = g1
        .get(x)
        .unwrap()
        .data()
        .iter()
        .zip(g2.get(x).unwrap().data())
        .map(|(u, v)| u + v)
        .collect();
    assert_eq!(g.get(x).unwrap().data(), summed.as_slice());
}

#[test]
fn shape_mismatch_error_names_node_and_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    match tape.add(a, b) {
        Err(crate::error::Error::ShapeMismatch { op, node, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(node, 2);
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(1.0), true);
    let unused = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let y = tape.mul(x, x).unwrap();
    let grads = tape.gradients(y).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get_or_zero(&tape, unused).data(), &[0.0, 0.0]);
}

// ── Required primitive set: 100 seeded random points each ────────────

const POINTS: u64 = 100;
const TOL: f64 = 1e-3;

fn check_many(
    tag: &str,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> crate::error::Result<NodeId> + Copy,
    mk_points: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
) {
    for i in 0..POINTS {
        let mut rng = stream(0xC0FFEE, tag, i);
        let points = mk_points(&mut rng);
        let err = grad_check(build, &points, 1e-4).unwrap();
        assert!(err <= TOL, "{tag} point {i}: relative error {err}");
    }
}

/// Weighted scalar readout so gradients are non-uniform.
fn weighted_sum(
    tape: &mut Tape<f64>,
    y: NodeId,
    rng: &mut ChaCha8Rng,
) -> crate::error::Result<NodeId> {
    let w = rand_tensor(rng, tape.value(y).shape(), -1.0, 1.0);
    let wc = tape.constant(w);
    let p = tape.mul(y, wc)?;
    Ok(tape.sum_all(p))
}

#[test]
fn primitive_elementwise_binary_grads() {
    check_many(
        "add",
        |tape, l| {
            let y = tape.add(l[0], l[1])?;
            Ok(tape.sum_all(y))
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
            ]
        },
    );
    check_many(
        "sub-mul",
        |tape, l| {
            let d = tape.sub(l[0], l[1])?;
            let y = tape.mul(d, l[1])?;
            Ok(tape.sum_all(y))
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
            ]
        },
    );
    check_many(
        "div",
        |tape, l| {
            let y = tape.div(l[0], l[1])?;
            Ok(tape.sum_all(y))
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
                rand_tensor(rng, &[2, 3], 0.5, 2.0),
            ]
        },
    );
}

#[test]
fn primitive_scalar_broadcast_grads() {
    check_many(
        "scalar-broadcast",
        |tape, l| {
            let shifted = tape.add(l[0], l[1])?;
            let scaled = tape.mul(shifted, l[2])?;
            Ok(tape.sum_all(scaled))
        },
        |rng| {
            vec![
                rand_tensor(rng, &[3, 4], -1.0, 1.0),
                rand_tensor(rng, &[1], -1.0, 1.0),
                rand_tensor(rng, &[1], 0.5, 1.5),
            ]
        },
    );
}

#[test]
fn primitive_pow_exp_log_grads() {
    check_many(
        "pow",
        |tape, l| {
            let y = tape.pow(l[0], l[1])?;
            Ok(tape.sum_all(y))
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3], 0.1, 3.0),
                rand_tensor(rng, &[1], 0.25, 3.0),
            ]
        },
    );
    check_many(
        "exp",
        |tape, l| {
            let y = tape.exp(l[0]);
            Ok(tape.sum_all(y))
        },
        |rng| vec![rand_tensor(rng, &[2, 3], -2.0, 2.0)],
    );
    check_many(
        "log",
        |tape, l| {
            let y = tape.log(l[0])?;
            Ok(tape.sum_all(y))
        },
        |rng| vec![rand_tensor(rng, &[2, 3], 0.1, 5.0)],
    );
}

#[test]
fn primitive_sigmoid_clamp_leaky_abs_grads() {
    check_many(
        "sigmoid",
        |tape, l| {
            let y = tape.sigmoid(l[0]);
            Ok(tape.sum_all(y))
        },
        |rng| vec![rand_tensor(rng, &[2, 3], -4.0, 4.0)],
    );
    check_many(
        "clamp",
        |tape, l| {
            let c = tape.clamp(l[0], 0.0, 1.0)?;
            let y = tape.mul(c, c)?;
            Ok(tape.sum_all(y))
        },
        |rng| vec![rand_tensor_away(rng, &[2, 3], -1.0, 2.0, &[0.0, 1.0], 5e-3)],
    );
    check_many(
        "leaky-relu",
        |tape, l| {
            let y = tape.leaky_relu(l[0], 0.2);
            Ok(tape.sum_all(y))
        },
        |rng| vec![rand_tensor_away(rng, &[2, 3], -2.0, 2.0, &[0.0], 5e-3)],
    );
    check_many(
        "abs",
        |tape, l| {
            let y = tape.abs(l[0]);
            Ok(tape.sum_all(y))
        },
        |rng| vec![rand_tensor_away(rng, &[2, 3], -2.0, 2.0, &[0.0], 5e-3)],
    );
}

#[test]
fn primitive_reduction_grads() {
    check_many(
        "mean-all",
        |tape, l| {
            let sq = tape.mul(l[0], l[0])?;
            Ok(tape.mean_all(sq))
        },
        |rng| vec![rand_tensor(rng, &[2, 3, 2], -1.0, 1.0)],
    );
    check_many(
        "sum-axis",
        |tape, l| {
            let r = tape.sum_axis(l[0], 1)?;
            let mut rng = stream(1, "sum-axis-w", 0);
            weighted_sum(tape, r, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[2, 3, 2], -1.0, 1.0)],
    );
    check_many(
        "mean-axis",
        |tape, l| {
            let r = tape.mean_axis(l[0], 0)?;
            let mut rng = stream(2, "mean-axis-w", 0);
            weighted_sum(tape, r, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[2, 3, 2], -1.0, 1.0)],
    );
}

#[test]
fn primitive_matmul_grads() {
    check_many(
        "matmul",
        |tape, l| {
            let y = tape.matmul(l[0], l[1])?;
            let mut rng = stream(3, "matmul-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
                rand_tensor(rng, &[3, 4], -1.0, 1.0),
            ]
        },
    );
    check_many(
        "add-rowvec",
        |tape, l| {
            let y = tape.add_rowvec(l[0], l[1])?;
            let mut rng = stream(4, "rowvec-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| {
            vec![
                rand_tensor(rng, &[3, 4], -1.0, 1.0),
                rand_tensor(rng, &[4], -1.0, 1.0),
            ]
        },
    );
    check_many(
        "mul-batch-scalar",
        |tape, l| {
            let y = tape.mul_batch_scalar(l[0], l[1])?;
            let mut rng = stream(5, "mbs-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| {
            vec![
                rand_tensor(rng, &[3, 2, 2], -1.0, 1.0),
                rand_tensor(rng, &[3], -1.0, 1.0),
            ]
        },
    );
}

#[test]
fn primitive_conv_grads() {
    check_many(
        "conv2d",
        |tape, l| {
            let y = tape.conv2d(l[0], l[1])?;
            let mut rng = stream(6, "conv-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| {
            vec![
                rand_tensor(rng, &[1, 2, 4, 4], -1.0, 1.0),
                rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5),
            ]
        },
    );
    check_many(
        "depthwise-conv2d",
        |tape, l| {
            let y = tape.depthwise_conv2d(l[0], l[1])?;
            let mut rng = stream(7, "dw-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 6, 6], -1.0, 1.0),
                rand_tensor(rng, &[5, 5], -0.5, 0.5),
            ]
        },
    );
}

#[test]
fn primitive_pool_and_mean_grads() {
    check_many(
        "mean-pool2",
        |tape, l| {
            let y = tape.mean_pool2(l[0])?;
            let mut rng = stream(8, "pool-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[1, 2, 4, 4], -1.0, 1.0)],
    );
    check_many(
        "global-spatial-mean",
        |tape, l| {
            let y = tape.global_spatial_mean(l[0])?;
            let mut rng = stream(9, "gsm-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0)],
    );
    check_many(
        "channel-mean",
        |tape, l| {
            let y = tape.channel_mean(l[0])?;
            let mut rng = stream(10, "cm-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[3, 4, 4], -1.0, 1.0)],
    );
}

#[test]
fn primitive_softmax_grads() {
    check_many(
        "softmax-last",
        |tape, l| {
            let y = tape.softmax_last(l[0])?;
            let mut rng = stream(11, "softmax-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[2, 4], -3.0, 3.0)],
    );
    check_many(
        "log-softmax-nll",
        |tape, l| {
            let y = tape.log_softmax_last(l[0])?;
            tape.nll(y, &[2, 0, 3])
        },
        |rng| vec![rand_tensor(rng, &[3, 4], -3.0, 3.0)],
    );
}

#[test]
fn primitive_shape_op_grads() {
    check_many(
        "gather",
        |tape, l| {
            let y = tape.gather(l[0], vec![0, 3, 3, 7, 2])?;
            let mut rng = stream(12, "gather-w", 0);
            weighted_sum(tape, y, &mut rng)
        },
        |rng| vec![rand_tensor(rng, &[8], -1.0, 1.0)],
    );
    check_many(
        "concat-stack-reshape",
        |tape, l| {
            let c = tape.concat0(&[l[0], l[1]])?;
            let s = tape.stack0(&[c, c])?;
            let r = tape.reshape(s, vec![4, 6])?;
            let mut rng = stream(13, "csr-w", 0);
            weighted_sum(tape, r, &mut rng)
        },
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
            ]
        },
    );
}

#[test]
fn pow_rejects_nonpositive_base() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![1.0, -0.5]));
    let e = tape.scalar(2.0);
    assert!(tape.pow(x, e).is_err());
    let z = tape.constant(Tensor::from_vec(vec![0.0]));
    assert!(tape.log(z).is_err());
}

#[test]
fn mean_pool2_requires_even_dims() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 5, 4]));
    assert!(tape.mean_pool2(x).is_err());
}

#[test]
fn reflect_index_is_edge_inclusive() {
    use super::tape::reflect_index;
    assert_eq!(reflect_index(-1, 5), 0);
    assert_eq!(reflect_index(-2, 5), 1);
    assert_eq!(reflect_index(5, 5), 4);
    assert_eq!(reflect_index(6, 5), 3);
    assert_eq!(reflect_index(2, 5), 2);
}
