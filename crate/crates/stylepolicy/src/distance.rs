//! Domain distance: a deterministic sliced Wasserstein estimator.
//!
//! Images are flattened, projected onto shared random unit directions, and
//! each projection's sorted values are matched; the distance is the mean
//! absolute difference of the sorted projections averaged over directions.
//! Sorting is differentiated through as a fixed permutation (a gather chosen
//! from forward values).

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Real, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A batch of images (B, C, H, W) with optional class labels.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

impl DomainBatch {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "batch images must be (B, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::invalid(format!(
                    "{} labels for batch of {}",
                    l.len(),
                    images.shape()[0]
                )));
            }
        }
        Ok(DomainBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stack per-image tensors (C, H, W) along a new batch axis.
    pub fn from_images(images: &[Tensor<f32>], labels: Option<Vec<usize>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("cannot build an empty batch"));
        }
        let first = images[0].shape().to_vec();
        let mut data = Vec::with_capacity(images.len() * images[0].numel());
        for img in images {
            if img.shape() != first.as_slice() {
                return Err(Error::invalid(format!(
                    "inconsistent image shapes in batch: {:?} vs {:?}",
                    first,
                    img.shape()
                )));
            }
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&first);
        DomainBatch::new(Tensor::new(shape, data)?, labels)
    }

    /// Pick a subset of images (repeats allowed) by batch index.
    pub fn select(&self, indices: &[usize]) -> Result<DomainBatch> {
        let b = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
            return Err(Error::invalid(format!(
                "batch index {bad} out of range for {b} images"
            )));
        }
        let stride = self.images.numel() / b.max(1);
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        DomainBatch::new(Tensor::new(shape, data)?, labels)
    }

    /// Concatenate along the batch axis; labels must be present on both
    /// sides or neither.
    pub fn concat(&self, other: &DomainBatch) -> Result<DomainBatch> {
        if self.images.shape()[1..] != other.images.shape()[1..] {
            return Err(Error::invalid(format!(
                "cannot concat batches of shapes {:?} and {:?}",
                self.images.shape(),
                other.images.shape()
            )));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.images.shape()[0];
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => {
                let mut l = a.clone();
                l.extend_from_slice(b);
                Some(l)
            }
            (None, None) => None,
            _ => {
                return Err(Error::invalid(
                    "cannot concat a labeled batch with an unlabeled one",
                ))
            }
        };
        Ok(DomainBatch {
            images: Tensor::new(shape, data)?,
            labels,
        })
    }
}

/// Shared random unit projection directions, one column per projection.
fn unit_directions<T: Real>(dim: usize, projections: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut data = vec![T::zero(); dim * projections];
    for p in 0..projections {
        let mut col: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (d, v) in col.iter_mut().enumerate() {
            *v /= norm;
            data[d * projections + p] = T::of_f64(*v);
        }
    }
    Tensor::new(vec![dim, projections], data).unwrap()
}

/// Flat gather indices that sort each projection column of a (B, P) matrix.
fn sorted_column_indices<T: Real>(vals: &Tensor<T>) -> Vec<usize> {
    let b = vals.shape()[0];
    let p = vals.shape()[1];
    let data = vals.data();
    let mut out = Vec::with_capacity(b * p);
    let mut col: Vec<usize> = Vec::with_capacity(b);
    for proj in 0..p {
        col.clear();
        col.extend((0..b).map(|i| i * p + proj));
        col.sort_by(|&x, &y| data[x].partial_cmp(&data[y]).expect("finite projections"));
        out.extend_from_slice(&col);
    }
    out
}

/// Sliced Wasserstein distance between two equally-shaped batches, built on
/// the tape (differentiable w.r.t. both batches).
pub fn swd_node<T: Real>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
    projections: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa.is_empty() || sb.is_empty() || sa[0] != sb[0] {
        return Err(Error::invalid(format!(
            "batch size mismatch: {:?} vs {:?}",
            sa, sb
        )));
    }
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "sliced_wasserstein",
            node: tape.len(),
            lhs: sa,
            rhs: sb,
        });
    }
    if projections == 0 {
        return Err(Error::invalid("at least one projection is required"));
    }
    let batch = sa[0];
    let dim: usize = sa[1..].iter().product();
    let dirs = unit_directions::<T>(dim, projections, rng);
    let dirs = tape.constant(dirs);
    let fa = tape.reshape(a, vec![batch, dim])?;
    let fb = tape.reshape(b, vec![batch, dim])?;
    let pa = tape.matmul(fa, dirs)?;
    let pb = tape.matmul(fb, dirs)?;
    let ia = sorted_column_indices(tape.value(pa));
    let ib = sorted_column_indices(tape.value(pb));
    let ga = tape.gather(pa, ia)?;
    let gb = tape.gather(pb, ib)?;
    let diff = tape.sub(ga, gb)?;
    let dist = tape.abs(diff);
    Ok(tape.mean_all(dist))
}

/// Value-level sliced Wasserstein between two batches.
pub fn sliced_wasserstein(
    a: &DomainBatch,
    b: &DomainBatch,
    projections: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let na = tape.constant(a.images.clone());
    let nb = tape.constant(b.images.clone());
    let d = swd_node(&mut tape, na, nb, projections, rng)?;
    Ok(tape.value(d).item())
}

/// Total training loss `L = L_d + epsilon * L_task`; `epsilon = 0` is the
/// unsupervised mode.
pub fn total_loss(l_d: f64, l_task: f64, epsilon: f64) -> Result<f64> {
    if epsilon < 0.0 {
        return Err(Error::invalid("epsilon must be non-negative"));
    }
    Ok(l_d + epsilon * l_task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform};
    use crate::tensor::grad_check;

    fn batch(shape: &[usize], data: Vec<f32>) -> DomainBatch {
        DomainBatch::new(Tensor::new(shape.to_vec(), data).unwrap(), None).unwrap()
    }

    fn rand_batch(seed: u64, b: usize, c: usize, h: usize, w: usize) -> DomainBatch {
        let mut rng = stream(seed, "dist-batch", 0);
        let data: Vec<f32> = (0..b * c * h * w)
            .map(|_| uniform(&mut rng, 0.0, 1.0) as f32)
            .collect();
        batch(&[b, c, h, w], data)
    }

    #[test]
    fn identical_batches_have_zero_distance() {
        let a = rand_batch(1, 6, 3, 4, 4);
        let mut rng = stream(2, "proj", 0);
        let d = sliced_wasserstein(&a, &a.clone(), 16, &mut rng).unwrap();
        assert!(d.abs() <= 1e-6, "distance {d}");
    }

    #[test]
    fn one_dimensional_oracle() {
        // Two one-pixel, one-channel images per batch: a = {0, 1}, b = {1, 2}.
        // The 1-D W1 via sorted matching is (|0-1| + |1-2|)/2 = 1.
        let a = batch(&[2, 1, 1, 1], vec![0.0, 1.0]);
        let b = batch(&[2, 1, 1, 1], vec![1.0, 2.0]);
        let mut rng = stream(3, "proj", 0);
        let d = sliced_wasserstein(&a, &b, 1, &mut rng).unwrap();
        assert!((d - 1.0).abs() <= 1e-6, "distance {d}");
    }

    #[test]
    fn shared_projection_symmetry_is_exact() {
        let a = rand_batch(4, 5, 3, 4, 4);
        let b = rand_batch(5, 5, 3, 4, 4);
        let mut r1 = stream(6, "proj", 1);
        let mut r2 = stream(6, "proj", 1);
        let dab = sliced_wasserstein(&a, &b, 32, &mut r1).unwrap();
        let dba = sliced_wasserstein(&b, &a, 32, &mut r2).unwrap();
        assert_eq!(dab, dba);
        assert!(dab >= 0.0);
    }

    #[test]
    fn nonnegative_on_random_batches() {
        for seed in 0..10 {
            let a = rand_batch(100 + seed, 4, 3, 2, 2);
            let b = rand_batch(200 + seed, 4, 3, 2, 2);
            let mut rng = stream(seed, "proj", 2);
            let d = sliced_wasserstein(&a, &b, 8, &mut rng).unwrap();
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn batch_size_mismatch_errors() {
        let a = rand_batch(7, 4, 3, 2, 2);
        let b = rand_batch(8, 5, 3, 2, 2);
        let mut rng = stream(9, "proj", 3);
        assert!(sliced_wasserstein(&a, &b, 4, &mut rng).is_err());
        let c = rand_batch(9, 4, 3, 4, 4);
        assert!(sliced_wasserstein(&a, &c, 4, &mut rng).is_err());
        assert!(sliced_wasserstein(&a, &a.clone(), 0, &mut rng).is_err());
    }

    /// Smallest gap between consecutive sorted values in any projection
    /// column; gradient checks need points away from sort ties.
    fn min_column_gap(vals: &Tensor<f64>) -> f64 {
        let (b, p) = (vals.shape()[0], vals.shape()[1]);
        let mut min_gap = f64::INFINITY;
        for proj in 0..p {
            let mut col: Vec<f64> = (0..b).map(|i| vals.data()[i * p + proj]).collect();
            col.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for w in col.windows(2) {
                min_gap = min_gap.min(w[1] - w[0]);
            }
        }
        min_gap
    }

    #[test]
    fn gradient_wrt_fake_pixels_away_from_ties() {
        let mut accepted = 0;
        let mut attempt = 0u64;
        while accepted < 20 {
            let mut rng = stream(0xD15C, "swd-grad", attempt);
            attempt += 1;
            let fake = Tensor::new(
                vec![3, 1, 2, 2],
                (0..12).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
            )
            .unwrap();
            let real = Tensor::new(
                vec![3, 1, 2, 2],
                (0..12).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
            )
            .unwrap();
            // Pre-compute projections to reject near-tie layouts (both sort
            // ties within the fake batch and kinks of |a - b| at matched
            // sorted pairs).
            let mut proj_rng = stream(0xD15C, "swd-proj", attempt);
            let check_rng = proj_rng.clone();
            let mut probe = Tape::<f64>::new();
            let fa = probe.leaf(fake.clone(), false);
            let fb = probe.leaf(real.clone(), false);
            let dirs = unit_directions::<f64>(4, 4, &mut proj_rng);
            let dirs_id = probe.constant(dirs);
            let flat_a = probe.reshape(fa, vec![3, 4]).unwrap();
            let flat_b = probe.reshape(fb, vec![3, 4]).unwrap();
            let pa = probe.matmul(flat_a, dirs_id).unwrap();
            let pb = probe.matmul(flat_b, dirs_id).unwrap();
            if min_column_gap(probe.value(pa)) < 2e-2 {
                continue;
            }
            let ia = sorted_column_indices(probe.value(pa));
            let ib = sorted_column_indices(probe.value(pb));
            let matched_gap = ia
                .iter()
                .zip(&ib)
                .map(|(&x, &y)| (probe.value(pa).data()[x] - probe.value(pb).data()[y]).abs())
                .fold(f64::INFINITY, f64::min);
            if matched_gap < 2e-2 {
                continue;
            }
            accepted += 1;

            let real_c = real.clone();
            let rng_template = check_rng;
            let build = move |tape: &mut Tape<f64>, leaves: &[NodeId]| {
                let rb = tape.constant(real_c.clone());
                let mut r = rng_template.clone();
                swd_node(tape, leaves[0], rb, 4, &mut r)
            };
            let err = grad_check(build, &[fake], 1e-4).unwrap();
            assert!(err <= 1e-3, "attempt {attempt}: error {err}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.5, 1.0, 0.1).unwrap(), 0.6);
        assert_eq!(total_loss(0.37, 123.0, 0.0).unwrap(), 0.37);
        assert_eq!(total_loss(0.0, 0.0, 7.5).unwrap(), 0.0);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn concat_and_label_validation() {
        let a = rand_batch(10, 3, 3, 2, 2);
        let b = rand_batch(11, 2, 3, 2, 2);
        let ab = a.concat(&b).unwrap();
        assert_eq!(ab.len(), 5);
        let labeled = DomainBatch::new(b.images.clone(), Some(vec![0, 1])).unwrap();
        assert!(a.concat(&labeled).is_err());
        assert!(DomainBatch::new(b.images.clone(), Some(vec![0])).is_err());
    }
}
