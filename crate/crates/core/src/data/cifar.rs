//! CIFAR-10 binary format: each record is one label byte followed by
//! 3072 pixel bytes, the red, green and blue 32×32 planes in row-major
//! order.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 1 + PIXELS;
const PIXELS: usize = 3 * 32 * 32;
const CLASSES: usize = 10;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Training files followed by the test file.
pub const CIFAR10_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

/// Human-readable description of the directory `load_cifar10` expects.
pub fn cifar10_layout() -> String {
    let mut s = String::from("expected the CIFAR-10 binary distribution in one directory:\n");
    for f in CIFAR10_FILES {
        s.push_str(&format!("  {f:<18} 10000 records x {RECORD_BYTES} bytes\n"));
    }
    s.push_str("each record: 1 label byte (0-9), then 1024 red, 1024 green, 1024 blue bytes (32x32 row-major)");
    s
}

/// Raw records exactly as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    /// `len × 3072` bytes, record-major.
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        if !bytes.len().is_multiple_of(RECORD_BYTES) {
            return Err(Error::Data(format!(
                "{source}: length {} is not a multiple of the {RECORD_BYTES}-byte record size",
                bytes.len()
            )));
        }
        let n = bytes.len() / RECORD_BYTES;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * PIXELS);
        for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            if record[0] as usize >= CLASSES {
                return Err(Error::Data(format!(
                    "{source}: record {i} has label byte {}",
                    record[0]
                )));
            }
            labels.push(record[0]);
            pixels.extend_from_slice(&record[1..]);
        }
        Ok(CifarRecords { labels, pixels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// The on-disk byte encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for (label, px) in self.labels.iter().zip(self.pixels.chunks_exact(PIXELS)) {
            out.push(*label);
            out.extend_from_slice(px);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(byte / 255 − mean_c) / std_c` per channel.
    pub fn normalize(byte: u8, channel: usize) -> f32 {
        ((byte as f64 / 255.0 - CIFAR10_MEAN[channel]) / CIFAR10_STD[channel]) as f32
    }

    /// Inverse of [`normalize`](Self::normalize) on the pixel scale `[0, 255]`.
    pub fn denormalize(value: f32, channel: usize) -> f64 {
        (value as f64 * CIFAR10_STD[channel] + CIFAR10_MEAN[channel]) * 255.0
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let data = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &b)| Self::normalize(b, (i % PIXELS) / 1024))
            .collect();
        let images = Tensor::new(vec![self.len(), 3, 32, 32], data)?;
        Dataset::new(
            images,
            self.labels.iter().map(|&l| l as usize).collect(),
            CLASSES,
        )
    }
}

fn read_all(dir: &Path, files: &[&str]) -> Result<CifarRecords> {
    let mut all = CifarRecords {
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for f in files {
        let path = dir.join(f);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "missing {}\n{}",
                path.display(),
                cifar10_layout()
            )));
        }
        let part = CifarRecords::read(&path)?;
        all.labels.extend(part.labels);
        all.pixels.extend(part.pixels);
    }
    if all.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no records",
            dir.display()
        )));
    }
    Ok(all)
}

/// Normalized `(train, test)` sets from the CIFAR-10 binary files in `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "{} is not a directory\n{}",
            dir.display(),
            cifar10_layout()
        )));
    }
    let train = read_all(dir, &CIFAR10_FILES[..5])?;
    let test = read_all(dir, &CIFAR10_FILES[5..])?;
    Ok((train.to_dataset()?, test.to_dataset()?))
}
