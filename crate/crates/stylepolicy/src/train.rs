//! The policy optimization loop.
//!
//! Per step: sample a source and a target batch (without replacement per
//! epoch), stylize the source batch with the relaxed forward pass, compute
//! `L = L_d + epsilon * L_task`, and update the stage parameters with Adam.
//! The critic backend interleaves clipped critic updates before each policy
//! step; supervised mode also updates the task head each step.
//!
//! Every random draw comes from a stream derived from (seed, purpose, index),
//! so runs are bit-deterministic and a checkpoint only needs positions, not
//! generator state.

use crate::data::{resize_mean, DomainDataset};
use crate::distance::swd_node;
use crate::error::{CheckpointError, Error, Result};
use crate::nets::{convnet_forward, task_loss_node, CriticNet, TaskHead};
use crate::ops::default_registry;
use crate::policy::{init_policy, plant_policy, relaxed_forward_batch, Policy, PolicySummary};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const N_CRITIC_STEPS: usize = 5;
pub const WEIGHT_CLIP: f32 = 0.01;
/// Images are mean-pooled to this square resolution before training and
/// distance computation.
pub const WORKING_RES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceBackend {
    Sliced,
    Critic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_policy: f32,
    pub lr_critic: f32,
    pub lr_task: f32,
    pub epsilon: f32,
    pub backend: DistanceBackend,
    pub projections: usize,
    pub tau_select_schedule: (f32, f32),
    pub tau_gate_schedule: (f32, f32),
    pub seed: u64,
    pub supervised: bool,
    pub mix_ratio: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            steps: 2000,
            batch_size: 16,
            lr_policy: 1e-2,
            lr_critic: 1e-4,
            lr_task: 1e-3,
            epsilon: 0.1,
            backend: DistanceBackend::Sliced,
            projections: 64,
            tau_select_schedule: (1.0, 0.1),
            tau_gate_schedule: (1.0, 0.1),
            seed: 7,
            supervised: false,
            mix_ratio: (1, 7),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.steps < 1 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch-size must be at least 2"));
        }
        for (name, lr) in [
            ("lr-policy", self.lr_policy),
            ("lr-critic", self.lr_critic),
            ("lr-task", self.lr_task),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be non-negative"));
        }
        if self.projections < 1 {
            return Err(Error::invalid("projections must be at least 1"));
        }
        for (name, (a, b)) in [
            ("tau-select", self.tau_select_schedule),
            ("tau-gate", self.tau_gate_schedule),
        ] {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::invalid(format!("{name} schedule must stay positive")));
            }
        }
        Ok(())
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected adaptive update on a flat parameter slice.
pub fn adam_step(param: &mut [f32], grad: &[f32], state: &mut AdamState, lr: f32) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), state.m.len());
    state.t += 1;
    let b1c = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2c = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = ADAM_BETA1 * state.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * state.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = lr as f64 * (m / b1c) / ((v / b2c).sqrt() + ADAM_EPS);
        param[i] = (param[i] as f64 - update) as f32;
    }
}

/// One Adam state per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSet {
    pub states: Vec<AdamState>,
}

impl AdamSet {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        AdamSet {
            states: params.iter().map(|p| AdamState::new(p.numel())).collect(),
        }
    }

    pub fn from_lens(lens: &[usize]) -> Self {
        AdamSet {
            states: lens.iter().map(|&l| AdamState::new(l)).collect(),
        }
    }
}

/// Linear schedule: start at step 0, end at the final step; constant for a
/// single-step run.
pub fn anneal(schedule: (f32, f32), step: usize, total_steps: usize) -> f32 {
    let (start, end) = schedule;
    if total_steps <= 1 {
        return start;
    }
    let frac = step as f64 / (total_steps - 1) as f64;
    (start as f64 + (end as f64 - start as f64) * frac) as f32
}

/// One clipped critic update on fixed batches; returns the critic loss
/// `mean(critic(fake)) - mean(critic(real))` before the update.
pub fn critic_step(
    critic: &mut CriticNet,
    adam: &mut AdamSet,
    real_images: &Tensor<f32>,
    fake_images: &Tensor<f32>,
    lr: f32,
    clip: f32,
) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let r = tape.leaf(real_images.clone(), false);
    let f = tape.leaf(fake_images.clone(), false);
    let ids = critic.plant(&mut tape, true);
    let sr = convnet_forward(&mut tape, &ids, r)?;
    let sf = convnet_forward(&mut tape, &ids, f)?;
    let mr = tape.mean_all(sr);
    let mf = tape.mean_all(sf);
    let loss = tape.sub(mf, mr)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.gradients(loss)?;
    for (i, id) in ids.iter().enumerate() {
        let g = grads.get_or_zero(&tape, *id);
        adam_step(
            critic.params[i].data_mut(),
            g.data(),
            &mut adam.states[i],
            lr,
        );
    }
    critic.clip_weights(clip);
    Ok(loss_value)
}

// ── Reporting ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_d: f32,
    pub l_task: f32,
    pub l_total: f32,
    pub tau_select: f32,
    pub tau_gate: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_summary: PolicySummary,
    pub wall_time_secs: f64,
    /// Task-head evaluations; stays 0 in unsupervised runs.
    pub task_evals: u64,
    pub critic_updates: u64,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.records {
            let line = serde_json::to_string(rec)?;
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(|e| Error::io("report stream", e))?;
        }
        Ok(())
    }
}

// ── Samplers ─────────────────────────────────────────────────────────

/// Without-replacement batch sampler; the order is reshuffled per epoch from
/// (seed, tag, epoch), so position (epoch, cursor) fully captures its state.
struct DomainSampler {
    len: usize,
    batch: usize,
    seed: u64,
    tag: &'static str,
    epoch: u64,
    cursor: usize,
    order: Vec<u32>,
}

impl DomainSampler {
    fn shuffled(len: usize, seed: u64, tag: &'static str, epoch: u64) -> Vec<u32> {
        let mut order: Vec<u32> = (0..len as u32).collect();
        order.shuffle(&mut stream(seed, tag, epoch));
        order
    }

    fn new(len: usize, batch: usize, seed: u64, tag: &'static str) -> Self {
        DomainSampler {
            len,
            batch,
            seed,
            tag,
            epoch: 0,
            cursor: 0,
            order: Self::shuffled(len, seed, tag, 0),
        }
    }

    fn restore(len: usize, batch: usize, seed: u64, tag: &'static str, epoch: u64, cursor: usize) -> Self {
        DomainSampler {
            len,
            batch,
            seed,
            tag,
            epoch,
            cursor,
            order: Self::shuffled(len, seed, tag, epoch),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.len {
            self.epoch += 1;
            self.order = Self::shuffled(self.len, self.seed, self.tag, self.epoch);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch]
            .iter()
            .map(|&i| i as usize)
            .collect();
        self.cursor += self.batch;
        out
    }
}

// ── Trainer ──────────────────────────────────────────────────────────

struct PreparedDomain {
    images: Vec<Tensor<f32>>,
    labels: Option<Vec<usize>>,
}

fn prepare(dataset: &DomainDataset) -> Result<PreparedDomain> {
    let mut images = Vec::with_capacity(dataset.len());
    for rec in &dataset.records {
        images.push(resize_mean(&rec.image, WORKING_RES, WORKING_RES)?);
    }
    let labels = if dataset.is_labeled() {
        Some(dataset.records.iter().map(|r| r.label.unwrap()).collect())
    } else {
        None
    };
    Ok(PreparedDomain { images, labels })
}

pub struct Trainer {
    cfg: TrainConfig,
    src: PreparedDomain,
    tgt: PreparedDomain,
    pub(crate) policy: Policy,
    policy_adam: AdamSet,
    critic: Option<(CriticNet, AdamSet)>,
    task: Option<(TaskHead, AdamSet)>,
    src_sampler: DomainSampler,
    tgt_sampler: DomainSampler,
    completed: usize,
    records: Vec<StepRecord>,
    task_evals: u64,
    critic_updates: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, source: &DomainDataset, target: &DomainDataset) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::dataset("source and target datasets must be non-empty"));
        }
        if cfg.supervised && (!source.is_labeled() || !target.is_labeled()) {
            return Err(Error::dataset(
                "supervised training requires labels in both domains",
            ));
        }
        if cfg.batch_size > source.len() || cfg.batch_size > target.len() {
            return Err(Error::dataset(format!(
                "batch size {} exceeds dataset sizes ({} source, {} target)",
                cfg.batch_size,
                source.len(),
                target.len()
            )));
        }
        let src = prepare(source)?;
        let tgt = prepare(target)?;
        let num_classes = source.class_names.len().max(target.class_names.len()).max(2);
        let policy = init_policy(cfg.k, default_registry(), cfg.seed)?;
        let policy_adam = AdamSet::from_lens(&param_lens(&policy));
        let critic = match cfg.backend {
            DistanceBackend::Critic => {
                let net = CriticNet::new(derive_seed(cfg.seed, "critic-init"));
                let adam = AdamSet::new(&net.params);
                Some((net, adam))
            }
            DistanceBackend::Sliced => None,
        };
        let task = if cfg.supervised {
            let head = TaskHead::new(num_classes, derive_seed(cfg.seed, "task-init"))?;
            let adam = AdamSet::new(&head.params);
            Some((head, adam))
        } else {
            None
        };
        let src_sampler = DomainSampler::new(src.images.len(), cfg.batch_size, cfg.seed, "shuffle-source");
        let tgt_sampler = DomainSampler::new(tgt.images.len(), cfg.batch_size, cfg.seed, "shuffle-target");
        Ok(Trainer {
            cfg,
            src,
            tgt,
            policy,
            policy_adam,
            critic,
            task,
            src_sampler,
            tgt_sampler,
            completed: 0,
            records: Vec::new(),
            task_evals: 0,
            critic_updates: 0,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn completed_steps(&self) -> usize {
        self.completed
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    fn gather_batch(domain: &PreparedDomain, indices: &[usize]) -> (Tensor<f32>, Option<Vec<usize>>) {
        let per = domain.images[0].numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(domain.images[i].data());
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(domain.images[0].shape());
        let images = Tensor::new(shape, data).expect("batch assembly");
        let labels = domain
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        (images, labels)
    }

    /// Run one optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step_idx = self.completed;
        let tau_select = anneal(self.cfg.tau_select_schedule, step_idx, self.cfg.steps);
        let tau_gate = anneal(self.cfg.tau_gate_schedule, step_idx, self.cfg.steps);
        self.policy.tau_select = tau_select;
        self.policy.tau_gate = tau_gate;

        let src_idx = self.src_sampler.next();
        let tgt_idx = self.tgt_sampler.next();
        let (src_images, src_labels) = Self::gather_batch(&self.src, &src_idx);
        let (tgt_images, tgt_labels) = Self::gather_batch(&self.tgt, &tgt_idx);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(src_images, false);
        let vars = plant_policy(&mut tape, &self.policy);
        let mut gate_rng = stream(self.cfg.seed, "gate-noise", step_idx as u64);
        let stylized = relaxed_forward_batch(&mut tape, &self.policy, &vars, x, &mut gate_rng)?;
        let tgt_node = tape.leaf(tgt_images.clone(), false);

        let l_d_node = match self.cfg.backend {
            DistanceBackend::Sliced => {
                let mut proj_rng = stream(self.cfg.seed, "swd-proj", step_idx as u64);
                swd_node(&mut tape, stylized, tgt_node, self.cfg.projections, &mut proj_rng)?
            }
            DistanceBackend::Critic => {
                let fake_values = tape.value(stylized).clone();
                let (critic, adam) = self.critic.as_mut().expect("critic backend state");
                for _ in 0..N_CRITIC_STEPS {
                    critic_step(
                        critic,
                        adam,
                        &tgt_images,
                        &fake_values,
                        self.cfg.lr_critic,
                        WEIGHT_CLIP,
                    )?;
                    self.critic_updates += 1;
                }
                let ids = critic.plant(&mut tape, false);
                let scores = convnet_forward(&mut tape, &ids, stylized)?;
                let mean = tape.mean_all(scores);
                tape.neg(mean)
            }
        };

        let mut l_task_value = 0.0f32;
        let mut task_ids = Vec::new();
        let (l_total_node, l_task_node) = if let Some((head, _)) = &self.task {
            let labels: Vec<usize> = tgt_labels
                .clone()
                .into_iter()
                .flatten()
                .chain(src_labels.clone().into_iter().flatten())
                .collect();
            let cat = tape.concat0(&[tgt_node, stylized])?;
            task_ids = head.plant(&mut tape, true);
            let lt = task_loss_node(&mut tape, &task_ids, cat, &labels)?;
            self.task_evals += 1;
            l_task_value = tape.value(lt).item();
            let scaled = tape.mul_scalar(lt, self.cfg.epsilon)?;
            (tape.add(l_d_node, scaled)?, Some(lt))
        } else {
            (l_d_node, None)
        };

        let l_d_value = tape.value(l_d_node).item();
        let l_total_value = tape.value(l_total_node).item();
        if !l_d_value.is_finite() || !l_task_value.is_finite() || !l_total_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", step_idx + 1)));
        }

        let grads = tape.gradients(l_total_node)?;
        let lr = self.cfg.lr_policy;
        for (k, sv) in vars.stages.iter().enumerate() {
            let stage = &mut self.policy.stages[k];
            let gw = grads.get_or_zero(&tape, sv.w);
            adam_step(&mut stage.w, gw.data(), &mut self.policy_adam.states[3 * k], lr);
            let gm = grads.get_or_zero(&tape, sv.mu01);
            adam_step(
                &mut stage.mu01,
                gm.data(),
                &mut self.policy_adam.states[3 * k + 1],
                lr,
            );
            let gp = grads.get_or_zero(&tape, sv.p_logit);
            adam_step(
                &mut stage.p_logit,
                gp.data(),
                &mut self.policy_adam.states[3 * k + 2],
                lr,
            );
            for m in &mut stage.mu01 {
                *m = m.clamp(0.0, 1.0);
            }
        }

        if let Some(lt_node) = l_task_node {
            let task_grads = tape.gradients(lt_node)?;
            let (head, adam) = self.task.as_mut().expect("task state");
            for (i, id) in task_ids.iter().enumerate() {
                let g = task_grads.get_or_zero(&tape, *id);
                adam_step(
                    head.params[i].data_mut(),
                    g.data(),
                    &mut adam.states[i],
                    self.cfg.lr_task,
                );
            }
        }

        let record = StepRecord {
            step: step_idx + 1,
            l_d: l_d_value,
            l_task: l_task_value,
            l_total: l_total_value,
            tau_select,
            tau_gate,
        };
        self.records.push(record.clone());
        self.completed += 1;
        Ok(record)
    }

    pub fn finish(self) -> (Policy, TrainReport) {
        let report = TrainReport {
            final_summary: self.policy.summary(),
            records: self.records,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            task_evals: self.task_evals,
            critic_updates: self.critic_updates,
        };
        (self.policy, report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.completed as u64,
            src_state: (self.src_sampler.epoch, self.src_sampler.cursor as u64),
            tgt_state: (self.tgt_sampler.epoch, self.tgt_sampler.cursor as u64),
            policy: self.policy.clone(),
            policy_adam: self.policy_adam.clone(),
            critic: self.critic.clone(),
            task: self.task.clone(),
        }
    }

    /// Resume training; reproduces the uninterrupted trajectory bit-exactly
    /// because all randomness derives from (seed, purpose, index).
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        source: &DomainDataset,
        target: &DomainDataset,
    ) -> Result<Self> {
        let mut trainer = Trainer::new(ckpt.config, source, target)?;
        trainer.policy = ckpt.policy;
        trainer.policy_adam = ckpt.policy_adam;
        trainer.critic = ckpt.critic;
        trainer.task = ckpt.task;
        trainer.completed = ckpt.step as usize;
        trainer.src_sampler = DomainSampler::restore(
            trainer.src.images.len(),
            trainer.cfg.batch_size,
            trainer.cfg.seed,
            "shuffle-source",
            ckpt.src_state.0,
            ckpt.src_state.1 as usize,
        );
        trainer.tgt_sampler = DomainSampler::restore(
            trainer.tgt.images.len(),
            trainer.cfg.batch_size,
            trainer.cfg.seed,
            "shuffle-target",
            ckpt.tgt_state.0,
            ckpt.tgt_state.1 as usize,
        );
        Ok(trainer)
    }
}

fn param_lens(policy: &Policy) -> Vec<usize> {
    let n = policy.n_ops();
    vec![n; 3 * policy.k()]
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed ^ crate::rng::fnv1a64(tag.as_bytes())
}

/// Run the full configured loop.
pub fn train(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<(Policy, TrainReport)> {
    let mut trainer = Trainer::new(cfg.clone(), source, target)?;
    while trainer.completed_steps() < cfg.steps {
        trainer.step()?;
    }
    Ok(trainer.finish())
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"SPLYCKPT";
const CKPT_VERSION: u32 = 1;

/// Full training state: config, step position, sampler positions, policy,
/// and every optimizer moment.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub src_state: (u64, u64),
    pub tgt_state: (u64, u64),
    pub policy: Policy,
    pub policy_adam: AdamSet,
    pub critic: Option<(CriticNet, AdamSet)>,
    pub task: Option<(TaskHead, AdamSet)>,
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f32(v);
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
    fn adam(&mut self, s: &AdamState) {
        self.u64(s.t);
        self.f32s(&s.m);
        self.f32s(&s.v);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("unexpected end of data".into()).into());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn len(&mut self, max: usize, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(CheckpointError::Corrupt(format!("{what} length {n} too large")).into());
        }
        Ok(n)
    }
    fn bytes(&mut self, max: usize, what: &str) -> Result<&'a [u8]> {
        let n = self.len(max, what)?;
        self.take(n)
    }
    fn f32s(&mut self, what: &str) -> Result<Vec<f32>> {
        let n = self.len(1 << 24, what)?;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor<f32>> {
        let ndim = self.len(8, "tensor rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 24) {
            return Err(CheckpointError::Corrupt(format!("{what} tensor too large")).into());
        }
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()).into())
    }
    fn adam(&mut self, what: &str) -> Result<AdamState> {
        let t = self.u64()?;
        let m = self.f32s(what)?;
        let v = self.f32s(what)?;
        if m.len() != v.len() {
            return Err(CheckpointError::Corrupt(format!("{what} moment sizes differ")).into());
        }
        Ok(AdamState { m, v, t })
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc { buf: Vec::new() };
        e.buf.extend_from_slice(CKPT_MAGIC);
        e.u32(CKPT_VERSION);
        e.bytes(&serde_json::to_vec(&self.config).expect("config serialization"));
        let names = self.policy.registry.names();
        e.u32(names.len() as u32);
        for name in &names {
            e.bytes(name.as_bytes());
        }
        e.u64(self.step);
        e.u64(self.src_state.0);
        e.u64(self.src_state.1);
        e.u64(self.tgt_state.0);
        e.u64(self.tgt_state.1);
        e.f32(self.policy.tau_select);
        e.f32(self.policy.tau_gate);
        e.u32(self.policy.k() as u32);
        for stage in &self.policy.stages {
            e.f32s(&stage.w);
            e.f32s(&stage.mu01);
            e.f32s(&stage.p_logit);
        }
        e.u32(self.policy_adam.states.len() as u32);
        for s in &self.policy_adam.states {
            e.adam(s);
        }
        match &self.critic {
            None => e.buf.push(0),
            Some((net, adam)) => {
                e.buf.push(1);
                e.u32(net.params.len() as u32);
                for p in &net.params {
                    e.tensor(p);
                }
                for s in &adam.states {
                    e.adam(s);
                }
            }
        }
        match &self.task {
            None => e.buf.push(0),
            Some((head, adam)) => {
                e.buf.push(1);
                e.u32(head.num_classes as u32);
                e.u32(head.params.len() as u32);
                for p in &head.params {
                    e.tensor(p);
                }
                for s in &adam.states {
                    e.adam(s);
                }
            }
        }
        e.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut d = Dec { buf: bytes, pos: 0 };
        if d.take(8)? != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = d.u32()?;
        if version != CKPT_VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let config_json = d.bytes(1 << 16, "config")?;
        let config: TrainConfig = serde_json::from_slice(config_json)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        config
            .validate()
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let n_names = d.len(256, "registry")?;
        let mut names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            let raw = d.bytes(256, "registry name")?;
            names.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| CheckpointError::Corrupt("registry name not UTF-8".into()))?,
            );
        }
        let registry = default_registry();
        if names != registry.names() {
            return Err(CheckpointError::RegistryMismatch(format!(
                "expected {:?}, got {:?}",
                registry.names(),
                names
            ))
            .into());
        }
        let step = d.u64()?;
        let src_state = (d.u64()?, d.u64()?);
        let tgt_state = (d.u64()?, d.u64()?);
        let tau_select = d.f32()?;
        let tau_gate = d.f32()?;
        let k = d.len(4096, "stage count")?;
        let mut stages = Vec::with_capacity(k);
        for _ in 0..k {
            stages.push(crate::policy::Stage {
                w: d.f32s("stage w")?,
                mu01: d.f32s("stage mu01")?,
                p_logit: d.f32s("stage p_logit")?,
            });
        }
        let policy = Policy {
            stages,
            registry,
            tau_select,
            tau_gate,
        };
        policy
            .validate_for_checkpoint()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let n_adam = d.len(3 * 4096, "adam states")?;
        let mut states = Vec::with_capacity(n_adam);
        for _ in 0..n_adam {
            states.push(d.adam("policy adam")?);
        }
        if n_adam != 3 * policy.k() {
            return Err(CheckpointError::Corrupt("policy adam state count".into()).into());
        }
        let policy_adam = AdamSet { states };
        let critic = match d.take(1)?[0] {
            0 => None,
            1 => {
                let n = d.len(64, "critic params")?;
                let mut params = Vec::with_capacity(n);
                for _ in 0..n {
                    params.push(d.tensor("critic")?);
                }
                let mut states = Vec::with_capacity(n);
                for _ in 0..n {
                    states.push(d.adam("critic adam")?);
                }
                Some((CriticNet { params }, AdamSet { states }))
            }
            _ => return Err(CheckpointError::Corrupt("critic flag".into()).into()),
        };
        let task = match d.take(1)?[0] {
            0 => None,
            1 => {
                let num_classes = d.len(4096, "classes")?;
                let n = d.len(64, "task params")?;
                let mut params = Vec::with_capacity(n);
                for _ in 0..n {
                    params.push(d.tensor("task")?);
                }
                let mut states = Vec::with_capacity(n);
                for _ in 0..n {
                    states.push(d.adam("task adam")?);
                }
                Some((TaskHead { params, num_classes }, AdamSet { states }))
            }
            _ => return Err(CheckpointError::Corrupt("task flag".into()).into()),
        };
        if d.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - d.pos
            ))
            .into());
        }
        Ok(Checkpoint {
            config,
            step,
            src_state,
            tgt_state,
            policy,
            policy_adam,
            critic,
            task,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::decode(&bytes)
    }
}
