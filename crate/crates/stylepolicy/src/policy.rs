//! The K-stage stylization policy.
//!
//! Each stage holds free parameters per dictionary operation: selection
//! logits `w` (softmax over operations), normalized parameters `mu01`, and
//! application-probability logits `p_logit`. Training uses a relaxed forward
//! pass: the categorical choice becomes a softmax mixture and the Bernoulli
//! gate becomes a logistic-noise sigmoid, so gradients reach all three
//! parameter blocks. Inference samples one operation and one gate per stage
//! and applies the hard variant.

use crate::error::{Error, PolicyFileError, Result};
use crate::ops::{apply_smooth, default_registry, OpRegistry};
use crate::rng::logistic;
use crate::tensor::{NodeId, Real, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Free parameters of one composition step.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub w: Vec<f32>,
    pub mu01: Vec<f32>,
    pub p_logit: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub stages: Vec<Stage>,
    pub registry: OpRegistry,
    pub tau_select: f32,
    pub tau_gate: f32,
}

/// Expected application count and expected normalized parameter per
/// operation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicySummary {
    pub expected_count: Vec<f64>,
    pub expected_param: Vec<f64>,
}

/// Per-stage most likely operation with its gate probability and parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageMode {
    pub op: String,
    pub p: f64,
    pub mu01: f64,
    pub physical_param: Option<f64>,
}

pub fn init_policy(k: usize, registry: OpRegistry, seed: u64) -> Result<Policy> {
    if k < 1 {
        return Err(Error::invalid("policy needs at least one stage"));
    }
    let n = registry.len();
    if n == 0 {
        return Err(Error::invalid("registry is empty"));
    }
    let mut rng = crate::rng::stream(seed, "policy-init", 0);
    let stages = (0..k)
        .map(|_| Stage {
            w: (0..n)
                .map(|_| crate::rng::uniform(&mut rng, -0.01, 0.01) as f32)
                .collect(),
            mu01: vec![0.5; n],
            p_logit: vec![0.0; n],
        })
        .collect();
    Ok(Policy {
        stages,
        registry,
        tau_select: 1.0,
        tau_gate: 1.0,
    })
}

fn softmax_f64(logits: &[f32], tau: f32) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 / tau as f64).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tape leaves for one stage's parameters.
pub struct StageVars {
    pub w: NodeId,
    pub mu01: NodeId,
    pub p_logit: NodeId,
}

pub struct PolicyVars {
    pub stages: Vec<StageVars>,
}

/// Plant every stage parameter as a requires-grad leaf.
pub fn plant_policy<T: Real>(tape: &mut Tape<T>, policy: &Policy) -> PolicyVars {
    let stages = policy
        .stages
        .iter()
        .map(|s| StageVars {
            w: tape.leaf(Tensor::from_vec(s.w.iter().map(|&v| T::of_f64(v as f64)).collect()), true),
            mu01: tape.leaf(
                Tensor::from_vec(s.mu01.iter().map(|&v| T::of_f64(v as f64)).collect()),
                true,
            ),
            p_logit: tape.leaf(
                Tensor::from_vec(s.p_logit.iter().map(|&v| T::of_f64(v as f64)).collect()),
                true,
            ),
        })
        .collect();
    PolicyVars { stages }
}

/// Relaxed stylization of a whole batch (B, 3, H, W). Per stage, every
/// operation's gated output is mixed by the selection softmax:
///
///   g_n = b_n * op_n(x) + (1 - b_n) * x,
///   b_n = sigmoid((p_logit_n + L)/tau_gate),  L ~ Logistic(0, 1) per image,
///   x  <- sum_n softmax(w/tau_select)_n * g_n.
pub fn relaxed_forward_batch<T: Real>(
    tape: &mut Tape<T>,
    policy: &Policy,
    vars: &PolicyVars,
    x: NodeId,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "relaxed_forward_batch expects (B, 3, H, W), got {shape:?}"
        )));
    }
    let batch = shape[0];
    let n = policy.registry.len();
    let inv_tau_sel = T::of_f64(1.0 / policy.tau_select as f64);
    let inv_tau_gate = T::of_f64(1.0 / policy.tau_gate as f64);

    let mut cur = x;
    for stage in &vars.stages {
        let scaled_w = tape.mul_scalar(stage.w, inv_tau_sel)?;
        let select = tape.softmax_last(scaled_w)?;
        let mut mixed: Option<NodeId> = None;
        for op_id in 0..n {
            let op = policy.registry.get(op_id)?.clone();
            let mu = if op.has_param {
                Some(tape.gather(stage.mu01, vec![op_id])?)
            } else {
                None
            };
            let out = apply_smooth(tape, &op, cur, mu)?;

            // Gate: per-image logistic noise on the application logit.
            let noise: Vec<T> = (0..batch).map(|_| T::of_f64(logistic(rng))).collect();
            let noise = tape.constant(Tensor::from_vec(noise));
            let p_n = tape.gather(stage.p_logit, vec![op_id])?;
            let pre = tape.add(p_n, noise)?;
            let pre = tape.mul_scalar(pre, inv_tau_gate)?;
            let gate = tape.sigmoid(pre);

            let diff = tape.sub(out, cur)?;
            let gated_diff = tape.mul_batch_scalar(diff, gate)?;
            let gated = tape.add(cur, gated_diff)?;

            let s_n = tape.gather(select, vec![op_id])?;
            let contrib = tape.mul(gated, s_n)?;
            mixed = Some(match mixed {
                None => contrib,
                Some(acc) => tape.add(acc, contrib)?,
            });
        }
        cur = mixed.expect("registry is non-empty");
    }
    Ok(cur)
}

impl Policy {
    pub fn k(&self) -> usize {
        self.stages.len()
    }

    pub fn n_ops(&self) -> usize {
        self.registry.len()
    }

    pub(crate) fn validate_for_checkpoint(&self) -> Result<()> {
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(PolicyFileError::Invalid("policy must have at least one stage (K >= 1)".into()).into());
        }
        if !(self.tau_select > 0.0) || !(self.tau_gate > 0.0) {
            return Err(PolicyFileError::Invalid("temperatures must be positive".into()).into());
        }
        let n = self.registry.len();
        for (k, s) in self.stages.iter().enumerate() {
            if s.w.len() != n || s.mu01.len() != n || s.p_logit.len() != n {
                return Err(PolicyFileError::Invalid(format!(
                    "stage {k}: parameter vectors must have length {n}"
                ))
                .into());
            }
            let finite = s.w.iter().chain(&s.mu01).chain(&s.p_logit).all(|v| v.is_finite());
            if !finite {
                return Err(PolicyFileError::Invalid(format!("stage {k}: non-finite value")).into());
            }
            if s.mu01.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
                return Err(PolicyFileError::Invalid(format!(
                    "stage {k}: mu01 outside [0, 1]"
                ))
                .into());
            }
        }
        Ok(())
    }

    /// Relaxed forward for a single image (3, H, W); builds a throwaway
    /// graph internally.
    pub fn relaxed_forward(&self, x: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let mut tape = Tape::<f32>::new();
        let xid = tape.leaf(x.reshaped(shape)?, false);
        let vars = plant_policy(&mut tape, self);
        let out = relaxed_forward_batch(&mut tape, self, &vars, xid, rng)?;
        let mut out = tape.value(out).clone();
        let n = out.numel();
        out = out.reshaped(x.shape().to_vec())?;
        debug_assert_eq!(n, x.numel());
        Ok(out)
    }

    /// Hard stylization per the sampled composition: draw one operation per
    /// stage from the selection softmax, then a Bernoulli gate.
    pub fn stylize(&self, x: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let mut cur = x.clone();
        for stage in &self.stages {
            let probs = softmax_f64(&stage.w, self.tau_select);
            let u: f64 = rng.gen();
            let mut chosen = probs.len() - 1;
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            let gate: f64 = rng.gen();
            let p_apply = sigmoid_f64(stage.p_logit[chosen] as f64);
            if gate < p_apply {
                let op = self.registry.get(chosen)?;
                cur = crate::ops::apply_hard(op, &cur, stage.mu01[chosen])?;
            }
        }
        Ok(cur)
    }

    /// Expected application counts (sums of selection softmax rows) and
    /// expected normalized parameters; parameterless operations report 0.
    pub fn summary(&self) -> PolicySummary {
        let n = self.registry.len();
        let mut expected_count = vec![0.0f64; n];
        let mut expected_param = vec![0.0f64; n];
        for stage in &self.stages {
            let probs = softmax_f64(&stage.w, self.tau_select);
            for i in 0..n {
                expected_count[i] += probs[i];
                expected_param[i] += probs[i] * stage.mu01[i] as f64;
            }
        }
        for (i, op) in self.registry.ops().iter().enumerate() {
            if !op.has_param {
                expected_param[i] = 0.0;
            }
        }
        PolicySummary {
            expected_count,
            expected_param,
        }
    }

    /// Per-stage argmax operation with its gate probability and parameter.
    pub fn stage_modes(&self) -> Vec<StageMode> {
        self.stages
            .iter()
            .map(|stage| {
                let probs = softmax_f64(&stage.w, self.tau_select);
                let best = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let op = &self.registry.ops()[best];
                StageMode {
                    op: op.name.clone(),
                    p: sigmoid_f64(stage.p_logit[best] as f64),
                    mu01: stage.mu01[best] as f64,
                    physical_param: op
                        .has_param
                        .then(|| crate::ops::param_map(op, stage.mu01[best] as f64).unwrap()),
                }
            })
            .collect()
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let doc = PolicyDoc {
            version: POLICY_FORMAT_VERSION,
            registry: self.registry.names(),
            tau_select: self.tau_select,
            tau_gate: self.tau_gate,
            stages: self
                .stages
                .iter()
                .map(|s| StageDoc {
                    w: s.w.clone(),
                    mu01: s.mu01.clone(),
                    p_logit: s.p_logit.clone(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("policy serialization");
        bytes.push(b'\n');
        bytes
    }

    /// Parse and validate against the stock registry.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Policy> {
        Self::from_json_bytes_with_registry(bytes, default_registry())
    }

    pub fn from_json_bytes_with_registry(bytes: &[u8], registry: OpRegistry) -> Result<Policy> {
        let doc: PolicyDoc = serde_json::from_slice(bytes)?;
        if doc.version != POLICY_FORMAT_VERSION {
            return Err(PolicyFileError::Version(doc.version).into());
        }
        let expected = registry.names();
        if doc.registry != expected {
            return Err(PolicyFileError::RegistryMismatch(format!(
                "expected {:?}, got {:?}",
                expected, doc.registry
            ))
            .into());
        }
        let policy = Policy {
            stages: doc
                .stages
                .into_iter()
                .map(|s| Stage {
                    w: s.w,
                    mu01: s.mu01,
                    p_logit: s.p_logit,
                })
                .collect(),
            registry,
            tau_select: doc.tau_select,
            tau_gate: doc.tau_gate,
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    version: u32,
    registry: Vec<String>,
    tau_select: f32,
    tau_gate: f32,
    stages: Vec<StageDoc>,
}

#[derive(Serialize, Deserialize)]
struct StageDoc {
    w: Vec<f32>,
    mu01: Vec<f32>,
    p_logit: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::apply_hard;
    use crate::rng::stream;
    use crate::tensor::max_abs_diff;

    fn one_hot_stage(n: usize, chosen: usize, p_logit: f32, mu: f32) -> Stage {
        let mut w = vec![-20.0f32; n];
        w[chosen] = 20.0;
        Stage {
            w,
            mu01: vec![mu; n],
            p_logit: vec![p_logit; n],
        }
    }

    fn saturated_policy(choices: &[(&str, f32)], p_logit: f32) -> Policy {
        let registry = default_registry();
        let stages = choices
            .iter()
            .map(|&(name, mu)| {
                let id = registry.by_name(name).unwrap().id;
                one_hot_stage(registry.len(), id, p_logit, mu)
            })
            .collect();
        Policy {
            stages,
            registry,
            tau_select: 1.0,
            tau_gate: 1.0,
        }
    }

    fn image(data: &[f32], h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(vec![3, h, w], data.to_vec()).unwrap()
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = stream(seed, "policy-test-image", 0);
        let data: Vec<f32> = (0..3 * h * w)
            .map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0) as f32)
            .collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn init_policy_contract() {
        let p = init_policy(4, default_registry(), 9).unwrap();
        let s = p.summary();
        for c in &s.expected_count {
            assert!((c - 4.0 / 8.0).abs() < 2e-2, "near-uniform init: {c}");
        }
        for stage in &p.stages {
            for &pl in &stage.p_logit {
                assert_eq!(sigmoid_f64(pl as f64), 0.5);
            }
            for &m in &stage.mu01 {
                assert_eq!(m, 0.5);
            }
            for &w in &stage.w {
                assert!(w.abs() <= 0.01);
            }
        }
        let p2 = init_policy(4, default_registry(), 9).unwrap();
        assert_eq!(p.to_json_bytes(), p2.to_json_bytes());
        assert!(init_policy(0, default_registry(), 9).is_err());
    }

    #[test]
    fn relaxed_identity_dominates() {
        let policy = saturated_policy(&[("identity", 0.5), ("identity", 0.5)], 0.0);
        let x = rand_image(1, 6, 6);
        let mut rng = stream(2, "gates", 0);
        let out = policy.relaxed_forward(&x, &mut rng).unwrap();
        assert!(max_abs_diff(&out, &x) <= 1e-6);
    }

    #[test]
    fn relaxed_closed_gates_pass_input_through() {
        let registry = default_registry();
        let mut rng_w = stream(3, "wrand", 0);
        let stages = (0..3)
            .map(|_| Stage {
                w: (0..8)
                    .map(|_| crate::rng::uniform(&mut rng_w, -2.0, 2.0) as f32)
                    .collect(),
                mu01: vec![0.3; 8],
                p_logit: vec![-40.0; 8],
            })
            .collect();
        let policy = Policy {
            stages,
            registry,
            tau_select: 1.0,
            tau_gate: 1.0,
        };
        let x = rand_image(4, 5, 7);
        let mut rng = stream(5, "gates", 1);
        let out = policy.relaxed_forward(&x, &mut rng).unwrap();
        assert!(max_abs_diff(&out, &x) <= 1e-6);
    }

    #[test]
    fn relaxed_open_invert_gate() {
        let policy = saturated_policy(&[("invert", 0.5)], 40.0);
        let x = image(&[0.25; 3], 1, 1);
        let mut rng = stream(6, "gates", 2);
        let out = policy.relaxed_forward(&x, &mut rng).unwrap();
        for &v in out.data() {
            assert!((v - 0.75).abs() <= 1e-6);
        }
    }

    #[test]
    fn mixture_consistency_under_saturation() {
        // One-hot saturated relaxed pass equals the deterministic
        // composition of smooth ops within 1e-5.
        let registry = default_registry();
        let mut rng_pick = stream(7, "pick", 0);
        for trial in 0..10 {
            let k = 1 + (rng_pick.gen::<u64>() % 4) as usize;
            let choices: Vec<(String, f32)> = (0..k)
                .map(|_| {
                    let id = (rng_pick.gen::<u64>() % 8) as usize;
                    let mu = crate::rng::uniform(&mut rng_pick, 0.1, 0.9) as f32;
                    (registry.ops()[id].name.clone(), mu)
                })
                .collect();
            let named: Vec<(&str, f32)> = choices.iter().map(|(n, m)| (n.as_str(), *m)).collect();
            let policy = saturated_policy(&named, 40.0);
            let x = rand_image(100 + trial, 6, 6);
            let mut rng = stream(8, "gates", trial);
            let relaxed = policy.relaxed_forward(&x, &mut rng).unwrap();

            let mut tape = Tape::<f32>::new();
            let mut cur = tape.constant(x.clone());
            for (name, mu) in &named {
                let op = registry.by_name(name).unwrap();
                let mu_node = op
                    .has_param
                    .then(|| tape.leaf(Tensor::scalar(*mu), false));
                cur = apply_smooth(&mut tape, op, cur, mu_node).unwrap();
            }
            let expected = tape.value(cur).clone();
            assert!(
                max_abs_diff(&relaxed, &expected) <= 1e-5,
                "trial {trial}: {}",
                max_abs_diff(&relaxed, &expected)
            );
        }
    }

    #[test]
    fn hard_relaxed_agreement_excluding_solarize() {
        let registry = default_registry();
        let names = registry.names();
        let non_solarize: Vec<&str> = names
            .iter()
            .map(|n| n.as_str())
            .filter(|n| *n != "solarize")
            .collect();
        let mut rng_pick = stream(9, "pick", 1);
        for trial in 0..10 {
            let k = 1 + (rng_pick.gen::<u64>() % 3) as usize;
            let named: Vec<(&str, f32)> = (0..k)
                .map(|_| {
                    let idx = (rng_pick.gen::<u64>() % non_solarize.len() as u64) as usize;
                    (
                        non_solarize[idx],
                        crate::rng::uniform(&mut rng_pick, 0.1, 0.9) as f32,
                    )
                })
                .collect();
            let policy = saturated_policy(&named, 40.0);
            let x = rand_image(200 + trial, 5, 6);
            let mut rng_a = stream(10, "gates", trial);
            let relaxed = policy.relaxed_forward(&x, &mut rng_a).unwrap();
            let mut rng_b = stream(11, "stylize", trial);
            let hard = policy.stylize(&x, &mut rng_b).unwrap();
            assert!(max_abs_diff(&relaxed, &hard) <= 1e-5);
        }
    }

    #[test]
    fn stylize_identity_exact_and_deterministic() {
        let policy = saturated_policy(&[("identity", 0.5); 3], 40.0);
        let x = rand_image(12, 7, 5);
        let mut rng = stream(13, "stylize", 0);
        let out = policy.stylize(&x, &mut rng).unwrap();
        assert_eq!(out.data(), x.data());

        let policy = saturated_policy(&[("solarize", 0.33), ("gamma", 0.7)], 0.3);
        let mut r1 = stream(14, "stylize", 1);
        let mut r2 = stream(14, "stylize", 1);
        let a = policy.stylize(&x, &mut r1).unwrap();
        let b = policy.stylize(&x, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), x.shape());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stylize_invert_and_grayscale_composition() {
        let policy = saturated_policy(&[("invert", 0.5)], 40.0);
        let x = image(&[0.25; 3], 1, 1);
        let mut rng = stream(15, "stylize", 2);
        let out = policy.stylize(&x, &mut rng).unwrap();
        assert_eq!(out.data(), &[0.75, 0.75, 0.75]);

        // grayscale then invert: (0.2, 0.4, 0.6) -> 0.4 -> 0.6 exactly.
        let policy = saturated_policy(&[("grayscale", 0.5), ("invert", 0.5)], 40.0);
        let x = image(&[0.2, 0.4, 0.6], 1, 1);
        let mut rng = stream(16, "stylize", 3);
        let out = policy.stylize(&x, &mut rng).unwrap();
        assert_eq!(out.data(), &[0.6, 0.6, 0.6]);
    }

    #[test]
    fn summary_one_hot_and_uniform() {
        let registry = default_registry();
        let n = registry.len();
        let invert = registry.by_name("invert").unwrap().id;
        let gamma = registry.by_name("gamma").unwrap().id;
        let mut stages = vec![
            one_hot_stage(n, invert, 0.0, 0.2),
            one_hot_stage(n, invert, 0.0, 0.2),
            one_hot_stage(n, gamma, 0.0, 0.75),
        ];
        stages[2].mu01 = vec![0.75; n];
        let policy = Policy {
            stages,
            registry: default_registry(),
            tau_select: 1.0,
            tau_gate: 1.0,
        };
        let s = policy.summary();
        assert!((s.expected_count[invert] - 2.0).abs() <= 1e-6);
        assert!((s.expected_count[gamma] - 1.0).abs() <= 1e-6);
        for (i, c) in s.expected_count.iter().enumerate() {
            if i != invert && i != gamma {
                assert!(c.abs() <= 1e-6);
            }
        }
        assert!((s.expected_param[gamma] - 0.75).abs() <= 1e-6);
        assert_eq!(s.expected_param[invert], 0.0, "no-param op reports zero");
        let total: f64 = s.expected_count.iter().sum();
        assert!((total - 3.0).abs() <= 1e-5);

        let uniform = Policy {
            stages: (0..4)
                .map(|_| Stage {
                    w: vec![0.0; n],
                    mu01: vec![0.5; n],
                    p_logit: vec![0.0; n],
                })
                .collect(),
            registry: default_registry(),
            tau_select: 1.0,
            tau_gate: 1.0,
        };
        let s = uniform.summary();
        for c in &s.expected_count {
            assert!((c - 0.5).abs() <= 1e-5);
        }
    }

    #[test]
    fn summary_is_stagewise_additive() {
        let mut rng = stream(17, "summary-lin", 0);
        let registry = default_registry();
        let n = registry.len();
        let stages: Vec<Stage> = (0..4)
            .map(|_| Stage {
                w: (0..n)
                    .map(|_| crate::rng::uniform(&mut rng, -3.0, 3.0) as f32)
                    .collect(),
                mu01: (0..n)
                    .map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0) as f32)
                    .collect(),
                p_logit: vec![0.0; n],
            })
            .collect();
        let policy = Policy {
            stages: stages.clone(),
            registry: default_registry(),
            tau_select: 0.7,
            tau_gate: 1.0,
        };
        let full = policy.summary();
        let mut count = vec![0.0f64; n];
        let mut param = vec![0.0f64; n];
        for stage in stages {
            let sub = Policy {
                stages: vec![stage],
                registry: default_registry(),
                tau_select: 0.7,
                tau_gate: 1.0,
            };
            let s = sub.summary();
            for i in 0..n {
                count[i] += s.expected_count[i];
                param[i] += s.expected_param[i];
            }
        }
        for i in 0..n {
            assert!((full.expected_count[i] - count[i]).abs() <= 1e-12);
            assert!((full.expected_param[i] - param[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let policy = init_policy(3, default_registry(), 42).unwrap();
        let bytes = policy.to_json_bytes();
        let parsed = Policy::from_json_bytes(&bytes).unwrap();
        assert_eq!(parsed.to_json_bytes(), bytes);

        let tampered = String::from_utf8(bytes.clone())
            .unwrap()
            .replace("\"invert\"", "\"evert\"");
        match Policy::from_json_bytes(tampered.as_bytes()) {
            Err(Error::PolicyFile(PolicyFileError::RegistryMismatch(_))) => {}
            other => panic!("expected registry mismatch, got {other:?}"),
        }

        let empty = serde_json::json!({
            "version": 1,
            "registry": default_registry().names(),
            "tau_select": 1.0,
            "tau_gate": 1.0,
            "stages": []
        });
        match Policy::from_json_bytes(empty.to_string().as_bytes()) {
            Err(Error::PolicyFile(PolicyFileError::Invalid(_))) => {}
            other => panic!("expected invalid-document error, got {other:?}"),
        }

        let wrong_version = String::from_utf8(bytes).unwrap().replacen(
            "\"version\": 1",
            "\"version\": 9",
            1,
        );
        match Policy::from_json_bytes(wrong_version.as_bytes()) {
            Err(Error::PolicyFile(PolicyFileError::Version(9))) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn relaxed_batch_matches_single_image_path() {
        let policy = init_policy(2, default_registry(), 5).unwrap();
        let x = rand_image(18, 6, 6);
        let mut rng_a = stream(19, "gates", 7);
        let single = policy.relaxed_forward(&x, &mut rng_a).unwrap();

        let mut tape = Tape::<f32>::new();
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let xid = tape.leaf(x.reshaped(shape).unwrap(), false);
        let vars = plant_policy(&mut tape, &policy);
        let mut rng_b = stream(19, "gates", 7);
        let out = relaxed_forward_batch(&mut tape, &policy, &vars, xid, &mut rng_b).unwrap();
        let batch = tape.value(out);
        assert_eq!(batch.data(), single.data());
    }
}
