// probe: distance landscape of hand-built policies
use stylepolicy::data::synth::{synth_generate, HiddenOp, SynthSpec};
use stylepolicy::data::{baseline_stylize, BaselineKind, ImageRecord};
use stylepolicy::distance::{sliced_wasserstein, DomainBatch};
use stylepolicy::ops::{apply_hard, default_registry};
use stylepolicy::rng::stream;
use stylepolicy::tensor::Tensor;

fn batch_of(records: &[ImageRecord], n: usize) -> DomainBatch {
    let images: Vec<Tensor<f32>> = records[..n].iter().map(|r| r.image.clone()).collect();
    DomainBatch::from_images(&images, None).unwrap()
}

fn main() {
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
    let reg = default_registry();

    let eval = |name: &str, records: Vec<ImageRecord>| {
        let b = batch_of(&records, 256);
        let mut rng = stream(99, "eval-proj", 0);
        let d = sliced_wasserstein(&b, &target, 64, &mut rng).unwrap();
        println!("{name:<28} {d:.5}");
    };

    eval("identity", src.records.clone());
    let gray: Vec<ImageRecord> = src.records.iter().map(|r| baseline_stylize(BaselineKind::Grayscale, r).unwrap()).collect();
    eval("grayscale", gray.clone());
    let inv: Vec<ImageRecord> = src.records.iter().map(|r| ImageRecord { image: apply_hard(reg.by_name("invert").unwrap(), &r.image, 0.0).unwrap(), label: r.label, source_path: String::new() }).collect();
    eval("invert", inv);
    let gi: Vec<ImageRecord> = src.records.iter().map(|r| baseline_stylize(BaselineKind::GrayscaleInvert, r).unwrap()).collect();
    eval("grayscale+invert (true)", gi);
    // the found local optimum: grayscale, gamma 0.5 (p.49), contrast 1.8 (p.77), grayscale
    let found: Vec<ImageRecord> = src.records.iter().enumerate().map(|(i, r)| {
        let mut x = apply_hard(reg.by_name("grayscale").unwrap(), &r.image, 0.0).unwrap();
        let mut rng = stream(42, "p", i as u64);
        use rand::Rng;
        if rng.gen::<f64>() < 0.49 { x = apply_hard(reg.by_name("gamma").unwrap(), &x, 0.251).unwrap(); }
        if rng.gen::<f64>() < 0.77 { x = apply_hard(reg.by_name("contrast").unwrap(), &x, 0.951).unwrap(); }
        ImageRecord { image: x, label: r.label, source_path: String::new() }
    }).collect();
    eval("found local optimum (hard)", found);
    // solarize at low threshold == invert-ish
    let sol: Vec<ImageRecord> = src.records.iter().map(|r| {
        let g = apply_hard(reg.by_name("grayscale").unwrap(), &r.image, 0.0).unwrap();
        let s = apply_hard(reg.by_name("solarize").unwrap(), &g, 0.02).unwrap();
        ImageRecord { image: s, label: r.label, source_path: String::new() }
    }).collect();
    eval("grayscale+solarize(t=.066)", sol);
}
