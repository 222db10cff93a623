//! Image and dataset ingestion, hand-crafted baseline stylizers, the
//! stylized/real batch mixer, and a synthetic two-domain generator.

pub mod mix;
pub mod ppm;
pub mod synth;

pub use mix::{mix_batches, BatchMixer};
pub use ppm::{decode_ppm, dequantize_u8, encode_ppm, load_ppm, quantize_u8, save_ppm};
pub use synth::{synth_generate, HiddenOp, SynthSpec};

use crate::error::{Error, Result};
use crate::ops::{apply_hard, default_registry};
use crate::tensor::Tensor;
use std::path::Path;

/// One image with an optional class label.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    /// Planar (3, H, W) pixels in [0, 1].
    pub image: Tensor<f32>,
    pub label: Option<usize>,
    pub source_path: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub records: Vec<ImageRecord>,
    pub domain: DomainTag,
    pub class_names: Vec<String>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }
}

/// Block-mean downsampling to (th, tw); block boundaries are
/// floor(i*H/th), so any source at least as large as the target works.
pub fn resize_mean(image: &Tensor<f32>, th: usize, tw: usize) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "resize_mean expects (C, H, W), got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < th || w < tw {
        return Err(Error::dataset(format!(
            "image {h}x{w} is smaller than the {th}x{tw} working resolution"
        )));
    }
    if (h, w) == (th, tw) {
        return Ok(image.clone());
    }
    let mut out = vec![0.0f32; c * th * tw];
    let data = image.data();
    for ch in 0..c {
        for oy in 0..th {
            let y0 = oy * h / th;
            let y1 = (oy + 1) * h / th;
            for ox in 0..tw {
                let x0 = ox * w / tw;
                let x1 = (ox + 1) * w / tw;
                let mut acc = 0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += data[ch * h * w + y * w + x] as f64;
                    }
                }
                out[ch * th * tw + oy * tw + ox] =
                    (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// Load a dataset root: one subdirectory per class (labeled), or a flat
/// directory of PPM files (unlabeled). Ordering is lexicographic regardless
/// of filesystem enumeration order.
pub fn load_folder(root: &Path, domain: DomainTag) -> Result<DomainDataset> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut dirs: Vec<String> = Vec::new();
    let mut files: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
        let name = entry
            .file_name()
            .into_string()
            .map_err(|n| Error::dataset(format!("non-UTF-8 file name {n:?}")))?;
        let ty = entry
            .file_type()
            .map_err(|e| Error::io(entry.path().display().to_string(), e))?;
        if ty.is_dir() {
            dirs.push(name);
        } else {
            files.push(name);
        }
    }
    dirs.sort_unstable();
    files.sort_unstable();

    let mut offenders: Vec<String> = Vec::new();
    let mut records: Vec<ImageRecord> = Vec::new();

    if !dirs.is_empty() {
        if !files.is_empty() {
            return Err(Error::dataset(format!(
                "class-structured root {} contains stray files: {}",
                root.display(),
                files.join(", ")
            )));
        }
        for (label, class) in dirs.iter().enumerate() {
            let class_dir = root.join(class);
            let mut names: Vec<String> = Vec::new();
            for entry in std::fs::read_dir(&class_dir)
                .map_err(|e| Error::io(class_dir.display().to_string(), e))?
            {
                let entry = entry.map_err(|e| Error::io(class_dir.display().to_string(), e))?;
                let name = entry
                    .file_name()
                    .into_string()
                    .map_err(|n| Error::dataset(format!("non-UTF-8 file name {n:?}")))?;
                names.push(name);
            }
            names.sort_unstable();
            for name in names {
                let rel = format!("{class}/{name}");
                match load_ppm(&class_dir.join(&name)) {
                    Ok(mut record) => {
                        record.label = Some(label);
                        record.source_path = rel;
                        records.push(record);
                    }
                    Err(e) => offenders.push(format!("{rel}: {e}")),
                }
            }
        }
    } else {
        for name in files {
            match load_ppm(&root.join(&name)) {
                Ok(mut record) => {
                    record.source_path = name;
                    records.push(record);
                }
                Err(e) => offenders.push(format!("{name}: {e}")),
            }
        }
    }

    if !offenders.is_empty() {
        return Err(Error::dataset(format!(
            "unreadable files under {}: {}",
            root.display(),
            offenders.join("; ")
        )));
    }
    if records.is_empty() {
        return Err(Error::dataset(format!(
            "no images found under {}",
            root.display()
        )));
    }
    Ok(DomainDataset {
        records,
        domain,
        class_names: dirs,
    })
}

/// The hand-crafted baseline stylizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Identity,
    Grayscale,
    GrayscaleInvert,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BaselineKind::Identity),
            "grayscale" => Ok(BaselineKind::Grayscale),
            "grayscale-invert" => Ok(BaselineKind::GrayscaleInvert),
            other => Err(Error::invalid(format!("unknown baseline kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineKind::Identity => "identity",
            BaselineKind::Grayscale => "grayscale",
            BaselineKind::GrayscaleInvert => "grayscale-invert",
        })
    }
}

/// Apply a hand-crafted baseline. Goes through the dictionary's hard ops so
/// baseline outputs and hidden-policy outputs are bit-identical.
pub fn baseline_stylize(kind: BaselineKind, record: &ImageRecord) -> Result<ImageRecord> {
    let registry = default_registry();
    let image = match kind {
        BaselineKind::Identity => record.image.clone(),
        BaselineKind::Grayscale => apply_hard(registry.by_name("grayscale")?, &record.image, 0.0)?,
        BaselineKind::GrayscaleInvert => {
            let gray = apply_hard(registry.by_name("grayscale")?, &record.image, 0.0)?;
            apply_hard(registry.by_name("invert")?, &gray, 0.0)?
        }
    };
    Ok(ImageRecord {
        image,
        label: record.label,
        source_path: record.source_path.clone(),
    })
}
