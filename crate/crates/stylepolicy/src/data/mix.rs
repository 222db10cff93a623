//! Stylized/real batch mixing.
//!
//! Emits batches of `s + r` records containing exactly `s` stylized and `r`
//! real records, positions shuffled; within an epoch every pool record is
//! used exactly once.

use crate::distance::DomainBatch;
use crate::error::{Error, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// One mixed batch plus provenance: which positions hold stylized records
/// and which pool indices they came from.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub batch: DomainBatch,
    pub stylized_mask: Vec<bool>,
    pub pool_indices: Vec<usize>,
}

pub struct BatchMixer {
    stylized: DomainBatch,
    real: DomainBatch,
    ratio: (usize, usize),
    stylized_order: Vec<usize>,
    real_order: Vec<usize>,
    stylized_cursor: usize,
    real_cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchMixer {
    pub fn new(
        stylized: DomainBatch,
        real: DomainBatch,
        ratio: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let (s, r) = ratio;
        if s + r == 0 {
            return Err(Error::invalid("mix ratio (0, 0) emits nothing"));
        }
        if s > 0 && r > 0 {
            if stylized.images.shape()[1..] != real.images.shape()[1..] {
                return Err(Error::invalid(format!(
                    "stylized {:?} and real {:?} image shapes differ",
                    stylized.images.shape(),
                    real.images.shape()
                )));
            }
            if stylized.labels.is_some() != real.labels.is_some() {
                return Err(Error::invalid(
                    "stylized and real pools must agree on labeling",
                ));
            }
        }
        let mut rng = stream(seed, "mix", 0);
        let mut stylized_order: Vec<usize> = (0..stylized.len()).collect();
        stylized_order.shuffle(&mut rng);
        let mut real_order: Vec<usize> = (0..real.len()).collect();
        real_order.shuffle(&mut rng);
        Ok(BatchMixer {
            stylized,
            real,
            ratio,
            stylized_order,
            real_order,
            stylized_cursor: 0,
            real_cursor: 0,
            rng,
        })
    }

    fn stylized_left(&self) -> usize {
        self.stylized_order.len() - self.stylized_cursor
    }

    fn real_left(&self) -> usize {
        self.real_order.len() - self.real_cursor
    }

    /// Whether another full batch can be emitted.
    pub fn can_emit(&self) -> bool {
        self.stylized_left() >= self.ratio.0 && self.real_left() >= self.ratio.1
    }

    pub fn next_batch(&mut self) -> Result<MixedBatch> {
        let (s, r) = self.ratio;
        if self.stylized_left() < s {
            return Err(Error::PoolExhausted { pool: "stylized" });
        }
        if self.real_left() < r {
            return Err(Error::PoolExhausted { pool: "real" });
        }
        let take_s = &self.stylized_order[self.stylized_cursor..self.stylized_cursor + s];
        let take_r = &self.real_order[self.real_cursor..self.real_cursor + r];

        // (is_stylized, pool index) per slot, then shuffle positions.
        let mut slots: Vec<(bool, usize)> = take_s
            .iter()
            .map(|&i| (true, i))
            .chain(take_r.iter().map(|&i| (false, i)))
            .collect();
        slots.shuffle(&mut self.rng);
        self.stylized_cursor += s;
        self.real_cursor += r;

        let mut parts: Vec<DomainBatch> = Vec::with_capacity(slots.len());
        for &(is_stylized, idx) in &slots {
            let pool = if is_stylized { &self.stylized } else { &self.real };
            parts.push(pool.select(&[idx])?);
        }
        let mut batch = parts[0].clone();
        for part in &parts[1..] {
            batch = batch.concat(part)?;
        }
        Ok(MixedBatch {
            batch,
            stylized_mask: slots.iter().map(|&(m, _)| m).collect(),
            pool_indices: slots.iter().map(|&(_, i)| i).collect(),
        })
    }
}

/// Emit one full epoch: every pool record in exactly one batch. Errors name
/// the pool that runs out while records remain elsewhere.
pub fn mix_batches(
    stylized: DomainBatch,
    real: DomainBatch,
    ratio: (usize, usize),
    seed: u64,
) -> Result<Vec<MixedBatch>> {
    let mut mixer = BatchMixer::new(stylized, real, ratio, seed)?;
    let mut out = Vec::new();
    while mixer.can_emit() {
        out.push(mixer.next_batch()?);
    }
    let stylized_leftover = ratio.0 > 0 && mixer.stylized_left() > 0;
    let real_leftover = ratio.1 > 0 && mixer.real_left() > 0;
    if stylized_leftover || real_leftover {
        // Some pool still has records but no further full batch is possible:
        // the *other* pool ran out first.
        let pool = if stylized_leftover && mixer.real_left() < ratio.1 {
            "real"
        } else {
            "stylized"
        };
        return Err(Error::PoolExhausted { pool });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;
    use crate::tensor::Tensor;

    fn pool(seed: u64, n: usize, labeled: bool) -> DomainBatch {
        let mut rng = stream(seed, "mix-test", 0);
        let data: Vec<f32> = (0..n * 3 * 4 * 4)
            .map(|_| uniform(&mut rng, 0.0, 1.0) as f32)
            .collect();
        DomainBatch::new(
            Tensor::new(vec![n, 3, 4, 4], data).unwrap(),
            labeled.then(|| (0..n).map(|i| i % 2).collect()),
        )
        .unwrap()
    }

    #[test]
    fn one_to_seven_ratio_uses_every_record_once() {
        let stylized = pool(1, 8, false);
        let real = pool(2, 56, false);
        let batches = mix_batches(stylized, real, (1, 7), 11).unwrap();
        assert_eq!(batches.len(), 8);
        let mut seen_stylized = vec![false; 8];
        let mut seen_real = vec![false; 56];
        for mixed in &batches {
            assert_eq!(mixed.batch.len(), 8);
            let count = mixed.stylized_mask.iter().filter(|&&m| m).count();
            assert_eq!(count, 1, "exactly one stylized record per batch");
            for (slot, &idx) in mixed.pool_indices.iter().enumerate() {
                let seen = if mixed.stylized_mask[slot] {
                    &mut seen_stylized[idx]
                } else {
                    &mut seen_real[idx]
                };
                assert!(!*seen, "record used twice");
                *seen = true;
            }
        }
        assert!(seen_stylized.iter().all(|&s| s));
        assert!(seen_real.iter().all(|&s| s));
    }

    #[test]
    fn degenerate_ratios() {
        let stylized = pool(3, 4, false);
        let real = pool(4, 8, false);
        let batches = mix_batches(stylized.clone(), real.clone(), (0, 4), 5).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.stylized_mask.iter().all(|&m| !m)));

        let batches = mix_batches(stylized.clone(), real.clone(), (4, 0), 5).unwrap();
        assert_eq!(batches.len(), 1);
        assert!(batches[0].stylized_mask.iter().all(|&m| m));

        assert!(mix_batches(stylized, real, (0, 0), 5).is_err());
    }

    #[test]
    fn exhaustion_names_the_limiting_pool() {
        // 8 stylized can seed 8 batches, but 60 real leaves 4 unused:
        // the stylized pool ran out first.
        let err = mix_batches(pool(6, 8, false), pool(7, 60, false), (1, 7), 9).unwrap_err();
        match err {
            Error::PoolExhausted { pool } => assert_eq!(pool, "stylized"),
            other => panic!("unexpected error {other:?}"),
        }
        // 9 stylized, 56 real: real runs out with one stylized record left.
        let err = mix_batches(pool(8, 9, false), pool(9, 56, false), (1, 7), 9).unwrap_err();
        match err {
            Error::PoolExhausted { pool } => assert_eq!(pool, "real"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mixer_is_deterministic_and_streams() {
        let a = mix_batches(pool(10, 4, true), pool(11, 8, true), (2, 4), 33).unwrap();
        let b = mix_batches(pool(10, 4, true), pool(11, 8, true), (2, 4), 33).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pool_indices, y.pool_indices);
            assert_eq!(x.stylized_mask, y.stylized_mask);
            assert_eq!(x.batch.images.data(), y.batch.images.data());
            assert_eq!(x.batch.labels, y.batch.labels);
        }

        let mut mixer = BatchMixer::new(pool(10, 4, true), pool(11, 8, true), (2, 4), 33).unwrap();
        let first = mixer.next_batch().unwrap();
        assert_eq!(first.pool_indices, a[0].pool_indices);
        let _ = mixer.next_batch().unwrap();
        assert!(matches!(
            mixer.next_batch(),
            Err(Error::PoolExhausted { .. })
        ));
    }

    #[test]
    fn label_agreement_is_enforced() {
        assert!(BatchMixer::new(pool(12, 2, true), pool(13, 2, false), (1, 1), 0).is_err());
    }
}
