//! Frame I/O. Frames live on disk as 8-bit RGB PNG; in memory they are
//! `3 x H x W` float tensors in `[0, 1]`. Conversion is `v / 255` on load and
//! round-to-nearest on save, which round-trips untouched frames bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

pub fn load_frame_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set3(c, y as usize, x as usize, f32::from(px.0[c]) / 255.0);
        }
    }
    Ok(t)
}

pub fn save_frame_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(Error::Shape {
            op: "save_frame_png",
            detail: format!("expected a 3-channel frame, got {c}"),
        });
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = frame.at3(ch, y, x).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// All `.png` files directly inside a directory, sorted by file name.
pub fn list_pngs_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}
