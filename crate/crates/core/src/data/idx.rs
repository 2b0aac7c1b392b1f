//! MNIST IDX files (big-endian). Files ending in `.gz` or starting with the
//! gzip magic are decompressed first.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Split};
use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| SvaeError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| SvaeError::format(path.display().to_string(), 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            SvaeError::format(
                name,
                offset as u64,
                format!("truncated header: file has {} bytes", bytes.len()),
            )
        })
}

/// Parses an IDX3 image file into `[n, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SvaeError::format(
            name,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, name)? as usize;
    let rows = be_u32(bytes, 8, name)? as usize;
    let cols = be_u32(bytes, 12, name)? as usize;
    let body = n * rows * cols;
    if bytes.len() != 16 + body {
        let offset = bytes.len().min(16 + body) as u64;
        return Err(SvaeError::format(
            name,
            offset,
            format!(
                "expected {} bytes for {n}x{rows}x{cols} images, file has {}",
                16 + body,
                bytes.len()
            ),
        ));
    }
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[n, 1, rows, cols], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let name = path.display().to_string();
    let magic = be_u32(&bytes, 0, &name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(SvaeError::format(
            name,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, &name)? as usize;
    if bytes.len() != 8 + n {
        return Err(SvaeError::format(
            name,
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes for {n} labels, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads MNIST images (and optionally labels) from IDX files.
pub fn load_mnist_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = read_maybe_gz(images_path)?;
    let images = parse_idx_images(&bytes, &images_path.display().to_string())?;
    let labels = labels_path.map(read_idx_labels).transpose()?;
    let file = images_path.file_name().and_then(|f| f.to_str()).unwrap_or("");
    let split = if file.starts_with("t10k") || file.contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    Dataset::new(images, labels, "mnist", split)
}

pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(SvaeError::dim(
            "write_idx_images",
            "pixel count",
            n * rows * cols,
            pixels.len(),
        ));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| SvaeError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| SvaeError::io(path, e))
}
