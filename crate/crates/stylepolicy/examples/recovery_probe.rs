// probe: policy-recovery experiment dynamics
use std::time::Instant;
use stylepolicy::data::synth::{synth_generate, HiddenOp, SynthSpec};
use stylepolicy::distance::{sliced_wasserstein, DomainBatch};
use stylepolicy::policy::Policy;
use stylepolicy::rng::stream;
use stylepolicy::tensor::Tensor;
use stylepolicy::train::{train, TrainConfig};

fn batch_of(records: &[stylepolicy::data::ImageRecord], n: usize) -> DomainBatch {
    let images: Vec<Tensor<f32>> = records[..n].iter().map(|r| r.image.clone()).collect();
    DomainBatch::from_images(&images, None).unwrap()
}

fn stylized_batch(policy: &Policy, records: &[stylepolicy::data::ImageRecord], n: usize, eval_seed: u64) -> DomainBatch {
    let images: Vec<Tensor<f32>> = records[..n]
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = stream(eval_seed, "eval-stylize", i as u64);
            policy.stylize(&r.image, &mut rng).unwrap()
        })
        .collect();
    DomainBatch::from_images(&images, None).unwrap()
}

fn main() {
    // Identity noise floor.
    let spec = SynthSpec {
        image_size: 32,
        num_images: 512,
        num_classes: 2,
        hidden_policy: vec![HiddenOp::parameterless("identity")],
        noise_sigma: 0.0,
    };
    let (src, tgt) = synth_generate(&spec, 123).unwrap();
    let a = batch_of(&src.records, 256);
    let b = batch_of(&tgt.records, 256);
    let mut rng = stream(777, "eval-proj", 0);
    let floor = sliced_wasserstein(&a, &b, 64, &mut rng).unwrap();
    println!("identity noise floor (512 imgs, 64 proj): {floor:.5}  (bound 0.02)");

    // Recovery run per the acceptance protocol.
    let spec = SynthSpec {
        image_size: 32,
        num_images: 512,
        num_classes: 2,
        hidden_policy: vec![
            HiddenOp::parameterless("grayscale"),
            HiddenOp::parameterless("invert"),
        ],
        noise_sigma: 0.01,
    };
    let (src, tgt) = synth_generate(&spec, 7).unwrap();
    let cfg = TrainConfig { epsilon: 0.0, seed: 7, ..TrainConfig::default() };
    let t0 = Instant::now();
    let (policy, report) = train(&cfg, &src, &tgt).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    
    
    let eval_seed = 99u64;
    let target_batch = batch_of(&tgt.records, 256);
    let source_batch = batch_of(&src.records, 256);
    let mut rng = stream(eval_seed, "eval-proj", 0);
    let d_identity = sliced_wasserstein(&source_batch, &target_batch, 64, &mut rng).unwrap();
    let styl = stylized_batch(&policy, &src.records, 256, eval_seed);
    let mut rng = stream(eval_seed, "eval-proj", 0);
    let d_trained = sliced_wasserstein(&styl, &target_batch, 64, &mut rng).unwrap();

    println!("train time: {train_secs:.1}s  ({} steps)", report.records.len());
    println!("first step L_d {:.4}, last step L_d {:.4}", report.records[0].l_d, report.records.last().unwrap().l_d);
    println!("identity-policy distance: {d_identity:.5}");
    println!("trained-policy distance:  {d_trained:.5}");
    println!("ratio: {:.3}  (gate 0.5)", d_trained / d_identity);

    let summary = policy.summary();
    let names = policy.registry.names();
    let mut ranked: Vec<(String, f64, f64)> = names
        .iter()
        .cloned()
        .zip(summary.expected_count.iter().cloned())
        .zip(summary.expected_param.iter().cloned())
        .map(|((n, c), p)| (n, c, p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("expected counts (desc):");
    for (n, c, p) in &ranked {
        println!("  {n:<14} E[T]={c:.3}  E[mu]={p:.3}");
    }
    for (k, mode) in policy.stage_modes().iter().enumerate() {
        println!("stage {k}: {} p={:.3} mu={:.3}", mode.op, mode.p, mode.mu01);
    }
}
