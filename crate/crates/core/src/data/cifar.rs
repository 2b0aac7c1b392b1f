//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes.

use std::path::{Path, PathBuf};

use super::idx::read_maybe_gz;
use super::{Dataset, Split};
use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub fn load_cifar10_files(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
            return Err(SvaeError::format(
                path.display().to_string(),
                whole as u64,
                format!(
                    "length {} is not a positive multiple of the {CIFAR_RECORD_LEN}-byte record",
                    bytes.len()
                ),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(SvaeError::contract("no CIFAR-10 batch files given"));
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], pixels)?, Some(labels), "cifar10", split)
}

/// Reads `data_batch_{1..5}.bin` or `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    load_cifar10_files(&paths, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_are_channel_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test_batch.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255, 1024));
        rec.extend(std::iter::repeat_n(0, 1024));
        rec.extend(std::iter::repeat_n(51, 1024));
        std::fs::write(&p, &rec).unwrap();
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.labels.as_deref(), Some(&[7u8][..]));
        assert_eq!(ds.images.at(&[0, 0, 5, 5]), 1.0);
        assert_eq!(ds.images.at(&[0, 1, 31, 0]), 0.0);
        assert!((ds.images.at(&[0, 2, 0, 31]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn partial_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, vec![0u8; CIFAR_RECORD_LEN + 10]).unwrap();
        match load_cifar10_files(&[p], Split::Train) {
            Err(SvaeError::Format { offset, message, .. }) => {
                assert_eq!(offset, CIFAR_RECORD_LEN as u64);
                assert!(message.contains("3083"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_cifar10(dir.path(), Split::Train),
            Err(SvaeError::Io { .. })
        ));
    }
}
