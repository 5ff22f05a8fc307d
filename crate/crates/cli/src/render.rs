//! PNG rendering of images, surface overlays and factor maps.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use layerseg::SurfaceCurveSet;

use crate::error::{CliError, Result};

/// Linear map of `[lo, hi]` to `0..=255`, clamped.
pub fn to_gray(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn value_range(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

pub fn save_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).expect("pixel count");
    img.save(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Binary factor map: 0 stays black, anything at or above ½ is white.
pub fn binary_pixels(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect()
}

const PREDICTED: Rgb<u8> = Rgb([255, 64, 64]);
const REFERENCE: Rgb<u8> = Rgb([64, 255, 64]);

/// Grayscale image with reference surfaces in green and predictions in red.
pub fn save_overlay(
    path: &Path,
    image: &[f32],
    width: usize,
    height: usize,
    predicted: &SurfaceCurveSet<f32>,
    reference: Option<&SurfaceCurveSet<f32>>,
) -> Result<()> {
    let (lo, hi) = value_range(image);
    let gray = to_gray(image, lo, hi);
    let mut rgb = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let g = gray[y as usize * width + x as usize];
        Rgb([g, g, g])
    });
    let mut draw = |curves: &SurfaceCurveSet<f32>, color: Rgb<u8>| {
        for s in 0..curves.surfaces() {
            for (i, &y) in curves.surface(s).iter().enumerate() {
                let row = y.round().clamp(0.0, (height - 1) as f32) as u32;
                rgb.put_pixel(i as u32, row, color);
            }
        }
    };
    if let Some(r) = reference {
        draw(r, REFERENCE);
    }
    draw(predicted, PREDICTED);
    rgb.save(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads back a grayscale PNG as `(width, height, pixels)`.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}
