//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32×32 planes, each row-major.

use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD: usize = PIXELS + 1;
pub const CLASSES: usize = 10;

/// Per-channel statistics of the CIFAR-10 training set on the [0, 1] scale.
pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Undecoded records, kept as bytes so they can be written back unchanged.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RawBatch {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `origin` only labels errors.
    pub fn parse(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::CorruptData {
            path: origin.to_string(),
            offset: offset as u64,
            reason,
        };
        let whole = bytes.len() / RECORD * RECORD;
        if whole != bytes.len() {
            return Err(corrupt(
                whole,
                format!("short record: {} bytes left, a record is {RECORD}", bytes.len() - whole),
            ));
        }
        let mut batch = RawBatch::default();
        for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if rec[0] as usize >= CLASSES {
                return Err(corrupt(i * RECORD, format!("label {} is not below {CLASSES}", rec[0])));
            }
            batch.labels.push(rec[0]);
            batch.pixels.extend_from_slice(&rec[1..]);
        }
        Ok(batch)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&super::read(path)?, &path.display().to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD);
        for (i, &y) in self.labels.iter().enumerate() {
            out.push(y);
            out.extend_from_slice(&self.pixels[i * PIXELS..(i + 1) * PIXELS]);
        }
        out
    }

    pub fn extend(&mut self, other: RawBatch) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }

    /// Pixels scaled to [0, 1], then standardized per channel.
    pub fn to_dataset(&self, mean: [f32; 3], std: [f32; 3]) -> Result<Dataset> {
        let plane = SIDE * SIDE;
        let images = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i % PIXELS) / plane;
                (p as f32 / 255.0 - mean[c]) / std[c]
            })
            .collect();
        let labels = self.labels.iter().map(|&y| y as usize).collect();
        Dataset::new([3, SIDE, SIDE], CLASSES, images, labels)
    }
}

/// Accepts the extracted `cifar-10-batches-bin` directory or its parent.
fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Raw training records from `data_batch_1.bin` onward and the records of `test_batch.bin`.
pub fn read_cifar10(dir: &Path) -> Result<(RawBatch, RawBatch)> {
    let dir = batch_dir(dir);
    let first = dir.join("data_batch_1.bin");
    if !first.is_file() {
        return Err(Error::Data(format!("{} not found", first.display())));
    }
    let mut train = RawBatch::default();
    for k in 1..=5 {
        let path = dir.join(format!("data_batch_{k}.bin"));
        if !path.is_file() {
            break;
        }
        train.extend(RawBatch::read(&path)?);
    }
    let test = RawBatch::read(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Normalized train and test sets. `subset` keeps the first `k` per class of
/// each split (train `k`, test `k`).
pub fn load_cifar10(
    dir: &Path,
    mean: [f32; 3],
    std: [f32; 3],
    subset: (Option<usize>, Option<usize>),
) -> Result<(Dataset, Dataset)> {
    let (train, test) = read_cifar10(dir)?;
    let cut = |d: Dataset, k: Option<usize>| match k {
        Some(k) => d.subset_per_class(k),
        None => d,
    };
    Ok((
        cut(train.to_dataset(mean, std)?, subset.0),
        cut(test.to_dataset(mean, std)?, subset.1),
    ))
}
