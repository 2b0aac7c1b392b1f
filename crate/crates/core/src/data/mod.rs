//! Dataset ingestion, seeded batching and sample-grid output.
//!
//! All loaders scale 8-bit pixels by `1/255` into `[0, 1]` and return images
//! as `[n, C, H, W]`.

mod batch;
mod cifar;
mod folder;
mod idx;
mod png;

use std::fmt;

pub use batch::BatchIterator;
pub use cifar::{load_cifar10, load_cifar10_files, CIFAR_RECORD_LEN};
pub use folder::load_image_folder;
pub use idx::{
    load_mnist_idx, read_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use png::{encode_png_grid, read_png, save_png_grid, GRID_SEPARATOR};

use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>, name: impl Into<String>, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(SvaeError::contract(format!(
                "dataset images must be [n, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] == 0 {
            return Err(SvaeError::contract("dataset is empty"));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(SvaeError::contract(format!(
                "pixel {i} = {} outside [0, 1]",
                images.data()[i]
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(SvaeError::dim(
                    "Dataset::new",
                    "label count",
                    images.shape()[0],
                    l.len(),
                ));
            }
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_numel(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// One image as a flat slice.
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_numel();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.images.gather_rows(indices)
    }

    /// The records in `range`, in order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Dataset> {
        if range.start >= range.end || range.end > self.len() {
            return Err(SvaeError::contract(format!(
                "slice {range:?} out of bounds for {} records",
                self.len()
            )));
        }
        let idx: Vec<usize> = range.clone().collect();
        Ok(Dataset {
            images: self.batch(&idx),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
            name: self.name.clone(),
            split: self.split,
        })
    }

    /// Splits off the last `fraction` of records as a validation set.
    pub fn split_validation(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let n_valid = ((self.len() as f64) * fraction).round() as usize;
        if n_valid == 0 || n_valid >= self.len() {
            return Err(SvaeError::contract(format!(
                "validation fraction {fraction} leaves an empty split of {} records",
                self.len()
            )));
        }
        let cut = self.len() - n_valid;
        Ok((self.slice(0..cut)?, self.slice(cut..self.len())?))
    }
}
