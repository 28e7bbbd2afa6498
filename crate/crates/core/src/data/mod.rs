//! In-memory datasets, CIFAR-10 ingestion, splitting and batching.

mod cifar;
mod synthetic;

pub use cifar::{
    cifar10_layout, load_cifar10, CifarRecords, CIFAR10_FILES, CIFAR10_MEAN, CIFAR10_STD,
    RECORD_BYTES,
};
pub use synthetic::{synthetic_dataset, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with one class index per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 || n == 0 {
            return Err(Error::Data(format!(
                "images must be [N, C, H, W] with N >= 1, got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("dataset images".into()));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.image_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!(
                "index {i} out of range for {} images",
                self.len()
            )));
        }
        let (images, labels) = self.gather(indices);
        Dataset::new(images, labels, self.class_count)
    }

    /// Images and labels in order, `batch_size` at a time, shuffled by
    /// `shuffle_seed` when given.
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        batch_indices(self.len(), batch_size, shuffle_seed)
            .into_iter()
            .map(move |idx| self.gather(&idx))
    }
}

/// Index batches covering `0..n` exactly once; the last batch may be
/// shorter. A zero batch size is treated as one.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(val_fraction: f64, seed: u64) -> Self {
        SplitSpec { val_fraction, seed }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Disjoint `(train, val)` index sets covering `0..n`, each ascending,
/// with `|val| = round(n · val_fraction)` chosen by a seeded permutation.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let f = spec.val_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {f} is not in (0, 1)"
        )));
    }
    let n_val = (n as f64 * f).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "splitting {n} samples at fraction {f} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val(data: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(data.len(), spec)?;
    Ok((data.subset(&train)?, data.subset(&val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| (i / 4) as f32);
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn batches_of_250_by_100() {
        let sizes: Vec<usize> = batch_indices(250, 100, Some(3))
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, [100, 100, 50]);
    }

    #[test]
    fn gather_preserves_pairs() {
        let d = toy(6);
        let (x, y) = d.gather(&[4, 1]);
        assert_eq!(x.data(), &[4.0, 4.0, 4.0, 4.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(y, [1, 1]);
    }

    #[test]
    fn construction_checks() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(images.clone(), vec![0], 3).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 3], 3).is_err());
        let mut bad = images;
        bad.data_mut()[0] = f32::NAN;
        assert!(Dataset::new(bad, vec![0, 1], 3).is_err());
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split_indices(50_000, SplitSpec::new(0.1, 0)).unwrap();
        assert_eq!((t.len(), v.len()), (45_000, 5_000));
        assert!(split_indices(5, SplitSpec::new(0.05, 0)).is_err());
        assert!(split_indices(5, SplitSpec::new(1.0, 0)).is_err());
        let (t, v) = split_train_val(&toy(20), SplitSpec::new(0.25, 1)).unwrap();
        assert_eq!((t.len(), v.len()), (15, 5));
    }
}
