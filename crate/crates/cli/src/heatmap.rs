use std::path::Path;

use anyhow::{ensure, Result};
use image::{Rgb, RgbImage};

use biguide::pipeline::normalize01;
use biguide::synthworld::Image;

/// Output pixels per scene pixel.
const SCALE: u32 = 4;
const ALPHA: f64 = 0.6;

/// Jet-like ramp from dark blue (0) through green to red (1).
fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// `values` is a row-major `rows × cols` map over the image; it is scaled to
/// `[0, 1]`, spread over the cells it covers and blended onto the scene.
pub fn overlay(scene: &Image, values: &[f64], rows: usize, cols: usize) -> Result<RgbImage> {
    ensure!(values.len() == rows * cols, "map has {} values for a {rows}x{cols} grid", values.len());
    ensure!(rows > 0 && cols > 0, "empty grid");
    let heat = normalize01(values);
    let (h, w) = (scene.height, scene.width);
    let mut out = RgbImage::new(w as u32 * SCALE, h as u32 * SCALE);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (sx, sy) = ((x / SCALE) as usize, (y / SCALE) as usize);
        let cell = (sy * rows / h) * cols + sx * cols / w;
        let hc = ramp(heat[cell]);
        let base = scene.pixel(sy, sx);
        let mix = |i: usize| ((1.0 - ALPHA) * base[i] + ALPHA * hc[i]).clamp(0.0, 1.0) * 255.0;
        *px = Rgb([mix(0).round() as u8, mix(1).round() as u8, mix(2).round() as u8]);
    }
    Ok(out)
}

pub fn save_overlay(path: &Path, scene: &Image, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    overlay(scene, values, rows, cols)?.save(path)?;
    Ok(())
}
