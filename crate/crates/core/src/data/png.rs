//! Sample grids as 8-bit PNG (grayscale for one channel, RGB for three).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

/// Width in pixels of the black gutter between tiles.
pub const GRID_SEPARATOR: usize = 2;

/// Tiles `[k, C, H, W]` row-major into `rows` rows and encodes a PNG.
pub fn encode_png_grid(images: &Tensor, rows: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(SvaeError::contract(format!(
            "grid input must be [k, C, H, W], got {s:?}"
        )));
    }
    let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != 1 && c != 3 {
        return Err(SvaeError::dim("encode_png_grid", "channels (1 or 3)", 1, c));
    }
    if rows == 0 || k == 0 {
        return Err(SvaeError::contract(format!("cannot tile {k} images into {rows} rows")));
    }
    if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(SvaeError::contract(format!(
            "pixel {i} = {} outside [0, 1]; clamp before saving",
            images.data()[i]
        )));
    }
    let cols = k.div_ceil(rows);
    let gw = cols * w + (cols - 1) * GRID_SEPARATOR;
    let gh = rows * h + (rows - 1) * GRID_SEPARATOR;
    let mut canvas = vec![0u8; gw * gh * c];
    for t in 0..k {
        let (r0, c0) = ((t / cols) * (h + GRID_SEPARATOR), (t % cols) * (w + GRID_SEPARATOR));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = images.at(&[t, ch, y, x]);
                    canvas[((r0 + y) * gw + c0 + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let color = if c == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(&canvas, gw as u32, gh as u32, color)?;
    Ok(out)
}

pub fn save_png_grid(images: &Tensor, rows: usize, path: &Path) -> Result<()> {
    let bytes = encode_png_grid(images, rows)?;
    fs::write(path, bytes).map_err(|e| SvaeError::io(path, e))
}

/// Decodes a PNG into `[1, C, H, W]` (C = 1 for grayscale, else 3).
pub fn read_png(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| SvaeError::io(path, e))?;
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| SvaeError::io(path, e))?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = if img.color().channel_count() <= 2 {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = f64::from(raw[p * c + ch]) / 255.0;
        }
    }
    Tensor::new(&[1, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_tile() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        save_png_grid(&Tensor::full(&[1, 1, 2, 2], 1.0), 1, &p).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2, 2]);
        assert!(back.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grid_layout_and_gutters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let mut data = Vec::new();
        for t in 0..10 {
            data.extend(std::iter::repeat_n(f64::from(t as u8 + 1) / 10.0, 3 * 4 * 4));
        }
        let imgs = Tensor::new(&[10, 3, 4, 4], data).unwrap();
        save_png_grid(&imgs, 2, &p).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), &[1, 3, 2 * 4 + 2, 5 * 4 + 4 * 2]);
        // tile 7 sits at row 1, column 2
        let (y, x) = (6 + 1, 2 * 6 + 1);
        assert!((back.at(&[0, 1, y, x]) - (204.0 / 255.0)).abs() < 1e-12);
        assert_eq!(back.at(&[0, 0, 4, 0]), 0.0);
        assert_eq!(back.at(&[0, 2, 0, 5]), 0.0);
    }

    #[test]
    fn out_of_range_is_contract_error() {
        for bad in [1.5, -0.1, f64::NAN] {
            let t = Tensor::full(&[1, 1, 2, 2], bad);
            assert!(matches!(encode_png_grid(&t, 1), Err(SvaeError::Contract(_))));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let t = Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        assert_eq!(encode_png_grid(&t, 1).unwrap(), encode_png_grid(&t, 1).unwrap());
    }
}
