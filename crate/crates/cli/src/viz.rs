//! PPM export: embedding channels as RGB, and cosine distance to one pixel.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};
use hle_core::embed::PixelFields;
use hle_core::grid::{dot, FieldGrid};

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

/// Maps [-1, 1] affinely onto [0, 255].
pub fn channel_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// One RGB buffer per group of three channels. A short last group is padded
/// with zero bytes.
pub fn embedding_images(e: &FieldGrid) -> Vec<Vec<u8>> {
    let n = e.height * e.width;
    (0..e.channels.div_ceil(3))
        .map(|g| {
            let mut buf = vec![0u8; n * 3];
            for i in 0..n {
                let px = e.pixel(i);
                for c in 0..3 {
                    if let Some(&v) = px.get(3 * g + c) {
                        buf[3 * i + c] = channel_byte(v);
                    }
                }
            }
            buf
        })
        .collect()
}

const PALETTE: [[f64; 3]; 5] = [
    [255.0, 0.0, 0.0],
    [255.0, 255.0, 0.0],
    [0.0, 255.0, 0.0],
    [0.0, 255.0, 255.0],
    [0.0, 0.0, 255.0],
];

/// Warm to cold: red at cosine distance 0, then yellow, green, cyan, and
/// blue at distance 2, linearly interpolated.
pub fn palette(distance: f64) -> [u8; 3] {
    let t = (distance / 2.0).clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let i = (t.floor() as usize).min(PALETTE.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (PALETTE[i][c] * (1.0 - f) + PALETTE[i + 1][c] * f).round() as u8;
    }
    out
}

pub fn distance_image(fields: &PixelFields, row: usize, col: usize) -> Result<Vec<u8>> {
    let (h, w) = (fields.height(), fields.width());
    if row >= h || col >= w {
        bail!("target ({row}, {col}) outside {h}x{w}");
    }
    let target = fields.embedding.pixel(row * w + col);
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let d = 1.0 - dot(fields.embedding.pixel(i), target);
        buf.extend_from_slice(&palette(d));
    }
    Ok(buf)
}
