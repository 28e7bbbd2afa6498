//! Class-conditional Gaussian images: every class has a fixed mean
//! pattern and each sample adds independent pixel noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    /// Pixel noise standard deviation.
    pub sigma: f64,
    /// Peak amplitude of each grating in a class pattern.
    pub amplitude: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub const DEFAULT_SIGMA: f64 = 0.5;
    pub const DEFAULT_AMPLITUDE: f64 = 0.25;

    pub fn new(n: usize, classes: usize, shape: [usize; 3], seed: u64) -> Self {
        SyntheticSpec {
            n,
            classes,
            shape,
            sigma: Self::DEFAULT_SIGMA,
            amplitude: Self::DEFAULT_AMPLITUDE,
            seed,
        }
    }

    /// Mean image of every class, `[classes, C, H, W]`. Each channel is a
    /// sum of two plane-wave gratings with small integer frequencies and
    /// random phase, drawn from the seed alone.
    pub fn class_means(&self) -> Tensor {
        let [c, h, w] = self.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_616e);
        let mut data = Vec::with_capacity(self.classes * c * h * w);
        for _ in 0..self.classes * c {
            let waves: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    let (u, v) = loop {
                        let u = rng.random_range(-3i32..=3);
                        let v = rng.random_range(-3i32..=3);
                        if u != 0 || v != 0 {
                            break (u as f64, v as f64);
                        }
                    };
                    (u, v, rng.random_range(0.0..TAU))
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = waves
                        .iter()
                        .map(|&(u, v, phase)| {
                            (TAU * (u * x as f64 / w as f64 + v * y as f64 / h as f64) + phase)
                                .cos()
                        })
                        .sum();
                    data.push((self.amplitude * s) as f32);
                }
            }
        }
        Tensor::new(vec![self.classes, c, h, w], data).expect("class mean shape")
    }
}

/// `n` images of `shape` with the default noise and amplitude.
pub fn synthetic_dataset(
    n: usize,
    classes: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    SyntheticSpec::new(n, classes, shape, seed).generate()
}

impl SyntheticSpec {
    /// `n` images, labels assigned round-robin (`i mod classes`), drawn
    /// around the class means of [`class_means`](Self::class_means) with
    /// noise `sigma`.
    pub fn generate(&self) -> Result<Dataset> {
        let spec = self;
        if spec.classes == 0 || spec.n < spec.classes || spec.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
            "synthetic data needs n >= classes >= 1 and a positive shape, got n {}, classes {}, shape {:?}",
            spec.n, spec.classes, spec.shape
        )));
        }
        if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma {} must be finite and >= 0",
                spec.sigma
            )));
        }
        let means = spec.class_means();
        let per: usize = spec.shape.iter().product();
        let noise = Normal::new(0.0, spec.sigma).expect("validated sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut data = Vec::with_capacity(spec.n * per);
        let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
        for &label in &labels {
            let mean = &means.data()[label * per..(label + 1) * per];
            data.extend(mean.iter().map(|&m| m + noise.sample(&mut rng) as f32));
        }
        let [c, h, w] = spec.shape;
        Dataset::new(
            Tensor::new(vec![spec.n, c, h, w], data)?,
            labels,
            spec.classes,
        )
    }
}
