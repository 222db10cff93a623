//! Synthetic two-domain generator with a hidden ground-truth policy.
//!
//! Source images are procedural scenes: a tinted background plus one class
//! shape (class determines shape and base color, with distinct base
//! intensities so a task loss has signal). Target images are an independent
//! draw of the same process passed through the hidden policy and optional
//! pixel noise — the two domains are unpaired.

use super::{DomainDataset, DomainTag, ImageRecord};
use crate::error::{Error, Result};
use crate::ops::{apply_hard, default_registry, param_unmap, OpRegistry};
use crate::rng::{stream, uniform};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SHAPE_CLASSES: [&str; 4] = ["disk", "square", "ring", "bar"];

/// Base colors per class; intensities are deliberately distinct.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.90, 0.75, 0.60],
    [0.25, 0.35, 0.45],
    [0.50, 0.65, 0.50],
    [0.75, 0.60, 0.60],
];

/// One step of the hidden ground-truth policy: an operation name and its
/// physical (not normalized) parameter.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HiddenOp {
    pub name: String,
    pub param: Option<f64>,
}

impl HiddenOp {
    pub fn parameterless(name: &str) -> Self {
        HiddenOp {
            name: name.to_string(),
            param: None,
        }
    }

    pub fn with_param(name: &str, param: f64) -> Self {
        HiddenOp {
            name: name.to_string(),
            param: Some(param),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub num_classes: usize,
    pub hidden_policy: Vec<HiddenOp>,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 32,
            num_images: 512,
            num_classes: 2,
            hidden_policy: vec![
                HiddenOp::parameterless("grayscale"),
                HiddenOp::parameterless("invert"),
            ],
            noise_sigma: 0.01,
        }
    }
}

impl SynthSpec {
    fn validate(&self, registry: &OpRegistry) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("image-size must be at least 8"));
        }
        if self.num_images == 0 {
            return Err(Error::invalid("num-images must be positive"));
        }
        if self.num_classes == 0 || self.num_classes > SHAPE_CLASSES.len() {
            return Err(Error::invalid(format!(
                "num-classes must be in 1..={}",
                SHAPE_CLASSES.len()
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise-sigma must be non-negative"));
        }
        for op in &self.hidden_policy {
            let desc = registry.by_name(&op.name)?;
            match (desc.has_param, op.param) {
                (true, None) => {
                    return Err(Error::invalid(format!(
                        "hidden op {} needs a physical parameter",
                        op.name
                    )))
                }
                (true, Some(p)) => {
                    param_unmap(desc, p)?;
                }
                (false, _) => {}
            }
        }
        Ok(())
    }
}

/// Apply a hidden policy (physical parameters) with the hard op variants.
pub fn apply_hidden_policy(ops: &[HiddenOp], image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let registry = default_registry();
    let mut cur = image.clone();
    for op in ops {
        let desc = registry.by_name(&op.name)?;
        let mu01 = match op.param {
            Some(p) => param_unmap(desc, p)? as f32,
            None => 0.0,
        };
        cur = apply_hard(desc, &cur, mu01)?;
    }
    Ok(cur)
}

fn draw_scene(spec: &SynthSpec, seed: u64, tag: &str, index: usize) -> (Tensor<f32>, usize) {
    let mut rng = stream(seed, tag, index as u64);
    let s = spec.image_size;
    let label = index % spec.num_classes;

    let base = uniform(&mut rng, 0.35, 0.55);
    let bg: Vec<f64> = (0..3)
        .map(|_| (base + uniform(&mut rng, -0.03, 0.03)).clamp(0.0, 1.0))
        .collect();
    let color: Vec<f64> = CLASS_COLORS[label]
        .iter()
        .map(|&c| (c + uniform(&mut rng, -0.05, 0.05)).clamp(0.0, 1.0))
        .collect();
    let cx = uniform(&mut rng, 0.3, 0.7) * s as f64;
    let cy = uniform(&mut rng, 0.3, 0.7) * s as f64;
    let r = uniform(&mut rng, 0.15, 0.28) * s as f64;

    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match label {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r && dy.abs() <= r,
            2 => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)
            }
            _ => dx.abs() <= r && dy.abs() <= r / 3.0,
        }
    };

    let mut data = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let hit = inside(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                data[c * s * s + y * s + x] = if hit { color[c] } else { bg[c] } as f32;
            }
        }
    }
    (Tensor::new(vec![3, s, s], data).unwrap(), label)
}

fn add_noise(image: &mut Tensor<f32>, sigma: f64, rng: &mut rand_chacha::ChaCha8Rng) {
    for v in image.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + sigma * n).clamp(0.0, 1.0) as f32;
    }
}

/// Generate unpaired (source, target) datasets; deterministic given `seed`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let registry = default_registry();
    spec.validate(&registry)?;
    let class_names: Vec<String> = SHAPE_CLASSES[..spec.num_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let mut source = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let (image, label) = draw_scene(spec, seed, "synth-source", i);
        source.push(ImageRecord {
            image,
            label: Some(label),
            source_path: format!("{}/img_{i:05}.ppm", class_names[label]),
        });
    }

    let mut target = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let (image, label) = draw_scene(spec, seed, "synth-target", i);
        let mut image = apply_hidden_policy(&spec.hidden_policy, &image)?;
        if spec.noise_sigma > 0.0 {
            let mut nrng = stream(seed, "synth-noise", i as u64);
            add_noise(&mut image, spec.noise_sigma, &mut nrng);
        }
        target.push(ImageRecord {
            image,
            label: Some(label),
            source_path: format!("{}/img_{i:05}.ppm", class_names[label]),
        });
    }

    Ok((
        DomainDataset {
            records: source,
            domain: DomainTag::Source,
            class_names: class_names.clone(),
        },
        DomainDataset {
            records: target,
            domain: DomainTag::Target,
            class_names,
        },
    ))
}

/// Write a dataset as PPM files under `root`, one directory per class.
pub fn export_dataset(dataset: &DomainDataset, root: &Path) -> Result<()> {
    for class in &dataset.class_names {
        std::fs::create_dir_all(root.join(class))
            .map_err(|e| Error::io(root.join(class).display().to_string(), e))?;
    }
    if dataset.class_names.is_empty() {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    }
    for record in &dataset.records {
        super::ppm::save_ppm(record, &root.join(&record.source_path))?;
    }
    Ok(())
}

/// Export source and target datasets plus a manifest describing the records
/// and the hidden policy.
pub fn export_synth(
    spec: &SynthSpec,
    seed: u64,
    source: &DomainDataset,
    target: &DomainDataset,
    root: &Path,
) -> Result<()> {
    export_dataset(source, &root.join("source"))?;
    export_dataset(target, &root.join("target"))?;
    let records: Vec<serde_json::Value> = source
        .records
        .iter()
        .map(|r| (r, "source"))
        .chain(target.records.iter().map(|r| (r, "target")))
        .map(|(r, domain)| {
            serde_json::json!({
                "domain": domain,
                "path": format!("{domain}/{}", r.source_path),
                "label": r.label,
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "seed": seed,
        "spec": spec,
        "class_names": source.class_names,
        "records": records,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(root.join("manifest.json"), bytes)
        .map_err(|e| Error::io(root.join("manifest.json").display().to_string(), e))
}
