// probe: sweep training variations on the recovery task
use stylepolicy::data::synth::{synth_generate, HiddenOp, SynthSpec};
use stylepolicy::data::ImageRecord;
use stylepolicy::distance::{sliced_wasserstein, DomainBatch};
use stylepolicy::policy::Policy;
use stylepolicy::rng::stream;
use stylepolicy::tensor::Tensor;
use stylepolicy::train::{train, TrainConfig};

fn batch_of(records: &[ImageRecord], n: usize) -> DomainBatch {
    let images: Vec<Tensor<f32>> = records[..n].iter().map(|r| r.image.clone()).collect();
    DomainBatch::from_images(&images, None).unwrap()
}

fn hard_eval(policy: &Policy, src: &[ImageRecord], tgt: &DomainBatch, seed: u64) -> f32 {
    let images: Vec<Tensor<f32>> = src[..256]
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = stream(seed, "eval-stylize", i as u64);
            policy.stylize(&r.image, &mut rng).unwrap()
        })
        .collect();
    let b = DomainBatch::from_images(&images, None).unwrap();
    let mut rng = stream(seed, "eval-proj", 0);
    sliced_wasserstein(&b, tgt, 64, &mut rng).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
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
    let target = batch_of(&tgt.records, 256);
    let source = batch_of(&src.records, 256);
    let mut rng = stream(99, "eval-proj", 0);
    let d_id = sliced_wasserstein(&source, &target, 64, &mut rng).unwrap();
    println!("identity distance {d_id:.5}, steps {steps}");

    let variants: Vec<(&str, TrainConfig)> = vec![
        ("gate 1.0->0.1 lr 1e-2", TrainConfig { steps, epsilon: 0.0, ..TrainConfig::default() }),
        ("gate 0.5->0.1 lr 1e-2", TrainConfig { steps, epsilon: 0.0, tau_gate_schedule: (0.5, 0.1), ..TrainConfig::default() }),
        ("gate 1.0->0.1 lr 3e-3", TrainConfig { steps, epsilon: 0.0, lr_policy: 3e-3, ..TrainConfig::default() }),
        ("gate 0.5->0.1 lr 3e-3", TrainConfig { steps, epsilon: 0.0, tau_gate_schedule: (0.5, 0.1), lr_policy: 3e-3, ..TrainConfig::default() }),
        ("gate 0.3->0.1 lr 1e-2", TrainConfig { steps, epsilon: 0.0, tau_gate_schedule: (0.3, 0.1), ..TrainConfig::default() }),
    ];
    for (name, cfg) in variants {
        let t0 = std::time::Instant::now();
        let (policy, report) = train(&cfg, &src, &tgt).unwrap();
        let d_hard = hard_eval(&policy, &src.records, &target, 99);
        let s = policy.summary();
        let names = policy.registry.names();
        let mut ranked: Vec<(String, f64)> = names.into_iter().zip(s.expected_count).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<String> = ranked.iter().take(3).map(|(n, c)| format!("{n}:{c:.2}")).collect();
        println!(
            "{name:<24} relaxed {:.4} hard {:.4} ratio {:.3} [{}] {:.0}s",
            report.records.last().unwrap().l_d,
            d_hard,
            d_hard / d_id,
            top.join(" "),
            t0.elapsed().as_secs_f64()
        );
    }
}
