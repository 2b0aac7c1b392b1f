//! A directory of PNG/JPEG photos, center-cropped to a square and resized
//! bilinearly.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use super::{Dataset, Split};
use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads every image in `dir` (sorted by file name) as `[n, 3, size, size]`.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(SvaeError::contract("target image size must be positive"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SvaeError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SvaeError::contract(format!("no .png/.jpg files in {}", dir.display())));
    }
    let plane = size * size;
    let mut data = Vec::with_capacity(files.len() * 3 * plane);
    for path in &files {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let side = w.min(h);
        let crop = imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let resized = imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
        let raw = resized.as_raw();
        for c in 0..3 {
            data.extend((0..plane).map(|p| f64::from(raw[p * 3 + c]) / 255.0));
        }
    }
    Dataset::new(
        Tensor::new(&[files.len(), 3, size, size], data)?,
        None,
        "folder",
        Split::Train,
    )
}
