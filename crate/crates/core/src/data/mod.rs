//! Datasets: IDX ingestion, synthetic 2D mixtures, and seeded minibatching.

pub mod idx;
pub mod synth;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub use idx::{load_idx, write_idx};
pub use synth::{synth, SynthKind, SynthSpec};

/// Immutable collection of samples, `n x C x H x W`, with optional class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    /// Image data; every value must lie in `[0, 1]`. Labels are `0..=max`.
    pub fn new(images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        let num_classes = labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1);
        Self::checked(images, labels, num_classes)
    }

    /// Real-valued points (no range restriction), e.g. synthetic mixtures.
    pub fn points(images: Tensor, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        images.ensure_finite("synthetic points")?;
        Self::checked(images, labels, num_classes)
    }

    fn checked(images: Tensor, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!("dataset tensor must be n x C x H x W, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return Err(Error::invalid("label count differs from sample count"));
            }
            if l.iter().any(|&c| c >= num_classes) {
                return Err(Error::invalid("label out of range"));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Contiguous slice of the dataset in file order.
    pub fn subset(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::invalid(format!("subset {range:?} out of bounds for {} samples", self.len())));
        }
        Ok(Self {
            images: self.images.slice_batch(range.start, range.end)?,
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
            num_classes: self.num_classes,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.images.select(indices)?,
            y: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        })
    }

    /// `n` distinct samples chosen uniformly at random.
    pub fn random_batch(&self, n: usize, rng: &mut impl Rng) -> Result<Batch> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("batch of {n} from {} samples", self.len())));
        }
        let idx = rand::seq::index::sample(rng, self.len(), n).into_vec();
        self.batch(&idx)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
}

/// One shuffled pass over `0..n` in chunks of `size`; the short tail is dropped.
pub fn epoch_order(n: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > n {
        return Err(Error::invalid(format!("batch size {size} invalid for {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks_exact(size).map(<[usize]>::to_vec).collect())
}

/// Iterator over one epoch of shuffled minibatches.
pub fn minibatches<'a>(
    dataset: &'a Dataset,
    size: usize,
    rng: &mut impl Rng,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let order = epoch_order(dataset.len(), size, rng)?;
    Ok(order.into_iter().map(move |idx| dataset.batch(&idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f64 / n as f64);
        Dataset::new(images, Some((0..n).map(|i| i % 3).collect())).unwrap()
    }

    #[test]
    fn drop_last_batching() {
        let d = toy(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches: Vec<_> = minibatches(&d, 3, &mut rng).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 3);
        let mut seen = HashSet::new();
        for b in &batches {
            for v in b.x.data() {
                assert!(seen.insert(v.to_bits()), "duplicate within epoch");
            }
        }
    }

    #[test]
    fn same_seed_same_order() {
        let a = epoch_order(50, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = epoch_order(50, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(epoch_order(5, 6, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let images = Tensor::full(&[1, 1, 1, 1], 1.5);
        assert!(Dataset::new(images, None).is_err());
    }

    #[test]
    fn subset_keeps_labels_aligned() {
        let d = toy(9).subset(3..6).unwrap();
        assert_eq!(d.labels.unwrap(), vec![0, 1, 2]);
        assert_eq!(d.num_classes, 3);
    }
}
