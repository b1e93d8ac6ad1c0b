//! Minimal writers for portable graymaps and raw f32 arrays.

use ndarray::Array2;
use std::io::Write;
use std::path::Path;

use crate::Result;

/// Writes an 8-bit binary PGM (P5), linearly mapping `[min, max]` to 0..255.
/// A constant array maps to mid-gray.
pub fn write_pgm(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (nx, nz) = data.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = Vec::with_capacity(nx * nz + 32);
    // PGM rasters are row-by-row top to bottom; emit x as rows.
    out.extend_from_slice(format!("P5\n{nz} {nx}\n255\n").as_bytes());
    for i in 0..nx {
        for k in 0..nz {
            let g = if span > 0.0 {
                ((data[[i, k]] - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            };
            out.push(g);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Writes the raw values as little-endian f32, row-major.
pub fn write_f32_raw(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
