//! The adversarial critic and the classification task head.
//!
//! Both share the same convolutional body: three 3x3 blocks (3 -> 16 -> 32
//! -> 64 channels, leaky rectifier, factor-2 mean pool after each) followed
//! by a global spatial mean and a two-layer fully connected head (64 -> 32
//! -> out). The critic scores one scalar per image; the task head emits one
//! logit per class. They are independent networks with independent weights.

use crate::distance::DomainBatch;
use crate::error::{Error, Result};
use crate::rng::{stream, uniform};
use crate::tensor::{NodeId, Real, Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
const BODY_CHANNELS: [usize; 4] = [3, 16, 32, 64];
const HEAD_HIDDEN: usize = 32;

/// Uniform fan-in init for the shared body plus a two-layer head with
/// `out_dim` outputs, optionally capped (a weight-clipped critic must start
/// inside the clip box or the first update destroys the init). Parameter
/// order: conv1, conv2, conv3, fc1_w, fc1_b, fc2_w, fc2_b.
pub fn init_convnet<T: Real>(out_dim: usize, seed: u64, bound_cap: Option<f64>) -> Vec<Tensor<T>> {
    let mut rng = stream(seed, "convnet-init", 0);
    let cap = |b: f64| bound_cap.map_or(b, |c| b.min(c));
    let mut params = Vec::new();
    for i in 0..3 {
        let (cin, cout) = (BODY_CHANNELS[i], BODY_CHANNELS[i + 1]);
        let bound = cap(1.0 / ((cin * 9) as f64).sqrt());
        let data: Vec<T> = (0..cout * cin * 9)
            .map(|_| T::of_f64(uniform(&mut rng, -bound, bound)))
            .collect();
        params.push(Tensor::new(vec![cout, cin, 3, 3], data).unwrap());
    }
    let bound = cap(1.0 / (BODY_CHANNELS[3] as f64).sqrt());
    let fc1: Vec<T> = (0..BODY_CHANNELS[3] * HEAD_HIDDEN)
        .map(|_| T::of_f64(uniform(&mut rng, -bound, bound)))
        .collect();
    params.push(Tensor::new(vec![BODY_CHANNELS[3], HEAD_HIDDEN], fc1).unwrap());
    params.push(Tensor::zeros(&[HEAD_HIDDEN]));
    let bound = cap(1.0 / (HEAD_HIDDEN as f64).sqrt());
    let fc2: Vec<T> = (0..HEAD_HIDDEN * out_dim)
        .map(|_| T::of_f64(uniform(&mut rng, -bound, bound)))
        .collect();
    params.push(Tensor::new(vec![HEAD_HIDDEN, out_dim], fc2).unwrap());
    params.push(Tensor::zeros(&[out_dim]));
    params
}

/// Forward pass over planted parameter nodes; input (B, 3, H, W) with H and
/// W divisible by 8. Returns (B, out_dim) scores.
pub fn convnet_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
        return Err(Error::invalid(format!(
            "convnet expects (B, 3, 8k, 8k) input, got {shape:?}"
        )));
    }
    let slope = T::of_f64(LEAKY_SLOPE);
    let mut cur = x;
    for conv in &params[..3] {
        let c = tape.conv2d(cur, *conv)?;
        let a = tape.leaky_relu(c, slope);
        cur = tape.mean_pool2(a)?;
    }
    let feat = tape.global_spatial_mean(cur)?;
    let h = tape.matmul(feat, params[3])?;
    let h = tape.add_rowvec(h, params[4])?;
    let h = tape.leaky_relu(h, slope);
    let out = tape.matmul(h, params[5])?;
    tape.add_rowvec(out, params[6])
}

fn plant_params<T: Real>(
    tape: &mut Tape<T>,
    params: &[Tensor<f32>],
    requires_grad: bool,
) -> Vec<NodeId> {
    params
        .iter()
        .map(|p| tape.leaf(p.cast::<T>(), requires_grad))
        .collect()
}

fn clip_params(params: &mut [Tensor<f32>], c: f32) {
    for p in params {
        for v in p.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

/// Wasserstein-style critic scoring images as real-target versus stylized.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub params: Vec<Tensor<f32>>,
}

impl CriticNet {
    pub fn new(seed: u64) -> Self {
        CriticNet {
            params: init_convnet(1, seed, Some(crate::train::WEIGHT_CLIP as f64)),
        }
    }

    pub fn zeroed() -> Self {
        let mut net = CriticNet::new(0);
        for p in &mut net.params {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        net
    }

    pub fn plant(&self, tape: &mut Tape<f32>, requires_grad: bool) -> Vec<NodeId> {
        plant_params(tape, &self.params, requires_grad)
    }

    /// Per-image scalar scores (B, 1).
    pub fn scores(&self, tape: &mut Tape<f32>, x: NodeId) -> Result<NodeId> {
        let ids = self.plant(tape, false);
        convnet_forward(tape, &ids, x)
    }

    pub fn clip_weights(&mut self, c: f32) {
        clip_params(&mut self.params, c);
    }

    pub fn max_abs_weight(&self) -> f32 {
        self.params
            .iter()
            .flat_map(|p| p.data().iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Wasserstein surrogate losses for the current critic:
/// `loss_for_critic = mean(critic(fake)) - mean(critic(real))` and
/// `loss_for_policy = -mean(critic(fake))`. The trainer alternates clipped
/// critic steps with policy steps.
pub fn critic_distance(
    critic: &CriticNet,
    real: &DomainBatch,
    fake: &DomainBatch,
) -> Result<(f32, f32)> {
    if real.len() != fake.len() {
        return Err(Error::invalid(format!(
            "critic_distance batch sizes differ: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let r = tape.constant(real.images.clone());
    let f = tape.constant(fake.images.clone());
    let ids = critic.plant(&mut tape, false);
    let sr = convnet_forward(&mut tape, &ids, r)?;
    let sf = convnet_forward(&mut tape, &ids, f)?;
    let mr = tape.mean_all(sr);
    let mf = tape.mean_all(sf);
    let loss_critic = tape.value(mf).item() - tape.value(mr).item();
    let loss_policy = -tape.value(mf).item();
    Ok((loss_critic, loss_policy))
}

/// Classifier keeping stylized images consistent with their source labels.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub params: Vec<Tensor<f32>>,
    pub num_classes: usize,
}

impl TaskHead {
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("task head needs at least two classes"));
        }
        Ok(TaskHead {
            params: init_convnet(num_classes, seed, None),
            num_classes,
        })
    }

    pub fn plant(&self, tape: &mut Tape<f32>, requires_grad: bool) -> Vec<NodeId> {
        plant_params(tape, &self.params, requires_grad)
    }
}

/// Cross-entropy task loss on the planted tape: log-softmax of head logits
/// against the labels.
pub fn task_loss_node<T: Real>(
    tape: &mut Tape<T>,
    head_params: &[NodeId],
    images: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = convnet_forward(tape, head_params, images)?;
    let logp = tape.log_softmax_last(logits)?;
    tape.nll(logp, labels)
}

/// Mean cross-entropy of the head on a labeled batch (the caller passes the
/// concatenation of the real-target batch and the stylized batch).
pub fn task_loss(head: &TaskHead, batch: &DomainBatch) -> Result<f32> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("task loss requires labels"))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= head.num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            head.num_classes
        )));
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(batch.images.clone());
    let ids = head.plant(&mut tape, false);
    let loss = task_loss_node(&mut tape, &ids, x, labels)?;
    Ok(tape.value(loss).item())
}
