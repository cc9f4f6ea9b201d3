//! Artifact writers.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView3, ArrayViewD};
use pyramidat::arrays;

use crate::CliError;

pub fn write_array(path: &Path, view: ArrayViewD<f32>) -> Result<(), CliError> {
    arrays::write(path, &view.to_owned())?;
    Ok(())
}

/// `H x W x C` image in `[0, 1]` as 8-bit RGB (one channel is shown as gray).
pub fn write_png(path: &Path, img: ArrayView3<f32>) -> Result<(), CliError> {
    let (h, w, c) = img.dim();
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let px = |ch: usize| byte(img[[i, j, ch.min(c - 1)]]);
        Rgb([px(0), px(1), px(2)])
    });
    out.save(path)?;
    Ok(())
}

/// Perturbation preview: zero maps to mid-gray, `+-max|d|` to the extremes.
pub fn write_perturbation_png(path: &Path, d: ArrayView3<f32>) -> Result<(), CliError> {
    let m = d.iter().fold(0f32, |a, v| a.max(v.abs()));
    let scaled = if m > 0.0 { d.mapv(|v| 0.5 + 0.5 * v / m) } else { d.mapv(|_| 0.5) };
    write_png(path, scaled.view())
}

/// Plain-text grid: one row per line, values in `{:e}` separated by spaces.
pub fn write_grid(path: &Path, grid: &Array2<f64>) -> Result<(), CliError> {
    let mut s = String::new();
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
