//! 8-bit binary PGM (P5) export.
//!
//! Values are min-max scaled to 0..255 over the image being written; the
//! scaling bounds are recorded in the header comment so the mapping stays
//! recoverable.

use crate::error::Result;
use std::io::Write;
use std::path::Path;

pub fn write_pgm(path: impl AsRef<Path>, pixels: &[f32], width: usize, height: usize) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &p in pixels {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "P5")?;
    writeln!(w, "# min {lo} max {hi} (linear min-max scaling)")?;
    writeln!(w, "{width} {height}")?;
    writeln!(w, "255")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&p| (((p - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Horizontally concatenate equally-tall images with a 1px divider.
pub fn write_strip(
    path: impl AsRef<Path>,
    panels: &[(&[f32], usize)],
    height: usize,
) -> Result<()> {
    let total_w: usize = panels.iter().map(|(_, w)| w).sum::<usize>() + panels.len() - 1;
    let mut canvas = vec![0.0f32; total_w * height];
    // A divider brighter than the per-panel max keeps panels visually separate.
    let mut global_hi = f32::NEG_INFINITY;
    for (img, _) in panels {
        for &p in *img {
            global_hi = global_hi.max(p);
        }
    }
    let divider = if global_hi.is_finite() { global_hi } else { 1.0 };
    let mut x0 = 0;
    for (img, w) in panels {
        // Per-panel min-max normalization into the divider scale.
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &p in *img {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..height {
            for x in 0..*w {
                canvas[y * total_w + x0 + x] = (img[y * w + x] - lo) / range * divider;
            }
        }
        x0 += w;
        if x0 < total_w {
            for y in 0..height {
                canvas[y * total_w + x0] = divider;
            }
            x0 += 1;
        }
    }
    write_pgm(path, &canvas, total_w, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload_are_wellformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        write_pgm(&p, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8, 128, 255, 64]);
    }
}
