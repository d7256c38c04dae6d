//! PNG ingestion and emission for label maps, masks, and images.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| dataset_err(path, e.to_string()))?
        .decode()
        .map_err(|e| dataset_err(path, format!("corrupt image: {e}")))
}

/// Single-channel integer label raster (8- or 16-bit).
pub fn read_label_png(path: &Path) -> Result<Array2<i32>> {
    let img = open(path)?;
    let out = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as i32
            })
        }
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as i32
            })
        }
        other => {
            // Tolerate RGB-encoded label maps as long as channels agree.
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for y in 0..h {
                for x in 0..w {
                    let p = rgb.get_pixel(x, y);
                    if p[0] != p[1] || p[1] != p[2] {
                        return Err(dataset_err(
                            path,
                            "label PNG must be single-channel (or gray RGB)",
                        ));
                    }
                    out[(y as usize, x as usize)] = p[0] as i32;
                }
            }
            out
        }
    };
    Ok(out)
}

pub fn write_label_png(path: &Path, labels: &Array2<i32>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = labels[(y, x)];
            if !(0..=255).contains(&v) {
                return Err(dataset_err(path, format!("label value {v} exceeds u8")));
            }
            img.get_pixel_mut(x as u32, y as u32)[0] = v as u8;
        }
    }
    img.save(path)?;
    Ok(())
}

/// Binary mask written as 0/255.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.get_pixel_mut(x as u32, y as u32)[0] = if mask[(y, x)] != 0 { 255 } else { 0 };
        }
    }
    img.save(path)?;
    Ok(())
}

/// RGB image as `[3, H, W]` floats in [0, 1].
pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

pub fn write_rgb_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(dataset_err(path, format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                (image[(0, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(1, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(2, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Image dimensions without a full decode, for cheap pairing validation.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| dataset_err(path, e.to_string()))?;
    Ok((h as usize, w as usize))
}
