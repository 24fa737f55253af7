//! The CIFAR binary formats: one label byte (two for CIFAR-100) followed by
//! 3072 channel-major pixel bytes per record.

use std::path::Path;
use std::sync::Arc;

use super::{Dataset, SplitDataset};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;
const CIFAR10_RECORD: usize = PIXELS + 1;
const CIFAR100_RECORD: usize = PIXELS + 2;

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";

/// Which CIFAR-100 label byte to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cifar100Labels {
    Coarse,
    Fine,
}

fn parse(bytes: &[u8], record: usize, label_at: usize, classes: u8, name: &str) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "{name}: {} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_at];
        if label >= classes {
            return Err(Error::Format(format!(
                "{name}: record {i} has label {label}, expected 0..{}",
                classes - 1
            )));
        }
        labels.push(label as u32);
        features.extend(rec[record - PIXELS..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(vec![3, 32, 32], features, labels)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    parse(bytes, CIFAR10_RECORD, 0, 10, "cifar-10")
}

pub fn parse_cifar100(bytes: &[u8], labels: Cifar100Labels) -> Result<Dataset> {
    match labels {
        Cifar100Labels::Coarse => parse(bytes, CIFAR100_RECORD, 0, 20, "cifar-100"),
        Cifar100Labels::Fine => parse(bytes, CIFAR100_RECORD, 1, 100, "cifar-100"),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        labels.extend_from_slice(p.labels());
        features.extend_from_slice(&p.features);
    }
    Dataset::new(vec![3, 32, 32], features, labels)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<SplitDataset> {
    let train = CIFAR10_TRAIN_FILES
        .iter()
        .map(|f| read(&dir.join(f)).and_then(|b| parse_cifar10(&b)))
        .collect::<Result<Vec<_>>>()?;
    let test = parse_cifar10(&read(&dir.join(CIFAR10_TEST_FILE))?)?;
    Ok(SplitDataset {
        train: Arc::new(concat(train)?),
        test: Arc::new(test),
    })
}

/// Loads `train.bin` and `test.bin` from `dir`.
pub fn load_cifar100(dir: &Path, labels: Cifar100Labels) -> Result<SplitDataset> {
    let train = parse_cifar100(&read(&dir.join("train.bin"))?, labels)?;
    let test = parse_cifar100(&read(&dir.join("test.bin"))?, labels)?;
    Ok(SplitDataset {
        train: Arc::new(train),
        test: Arc::new(test),
    })
}
