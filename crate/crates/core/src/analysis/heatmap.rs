//! Binary PPM heatmaps of category matrices.
//!
//! Each matrix gets its own min-max scale: `t = (v - min) / (max - min)`,
//! or `t = 0.5` for a constant matrix. `t` goes through the "hot" ramp
//! (black, red, yellow, white): `r = 3t`, `g = 3t - 1`, `b = 3t - 2`, each
//! clamped to `[0, 1]` and scaled to 0..=255. Image rows are the four
//! categories, columns the layers, each cell `CELL`×`CELL` pixels.

use std::io::Write;
use std::path::Path;

use super::CategoryMatrix;
use crate::error::{Error, Result};

pub const CELL: usize = 16;

pub fn hot(t: f64) -> [u8; 3] {
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
}

/// Ramp positions per cell, `[category][layer]`.
pub fn ramp_positions(m: &CategoryMatrix) -> Result<Vec<Vec<f64>>> {
    let all = m.values.iter().flatten();
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap"));
    }
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..4)
        .map(|k| m.values.iter().map(|row| if hi > lo { (row[k] - lo) / (hi - lo) } else { 0.5 }).collect())
        .collect())
}

pub fn heatmap_pixels(m: &CategoryMatrix) -> Result<(usize, usize, Vec<u8>)> {
    if m.values.is_empty() {
        return Err(Error::Empty("matrix has no layers".into()));
    }
    let t = ramp_positions(m)?;
    let (w, h) = (m.layers() * CELL, 4 * CELL);
    let mut px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            px.extend(hot(t[y / CELL][x / CELL]));
        }
    }
    Ok((w, h, px))
}

pub fn write_ppm(m: &CategoryMatrix, path: &Path) -> Result<()> {
    let (w, h, px) = heatmap_pixels(m)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(&px)?;
    out.flush()?;
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.ppm` into `dir`.
pub fn render_heatmap(m: &CategoryMatrix, dir: &Path, stem: &str) -> Result<()> {
    m.write_csv(&dir.join(format!("{stem}.csv")))?;
    write_ppm(m, &dir.join(format!("{stem}.ppm")))
}
