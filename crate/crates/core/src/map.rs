//! Classification maps as binary PPM (P6) images.

use std::path::Path;

use crate::metrics::Label;
use crate::{Error, Result};

/// Colors for known classes `0..12`; class `i` uses entry `i % 12`.
///
/// | index | rgb             |
/// |-------|-----------------|
/// | 0     | `#e6194b` red   |
/// | 1     | `#3cb44b` green |
/// | 2     | `#4363d8` blue  |
/// | 3     | `#ffe119` yellow|
/// | 4     | `#f58231` orange|
/// | 5     | `#911eb4` purple|
/// | 6     | `#42d4f4` cyan  |
/// | 7     | `#f032e6` magenta|
/// | 8     | `#bfef45` lime  |
/// | 9     | `#fabed4` pink  |
/// | 10    | `#469990` teal  |
/// | 11    | `#9a6324` brown |
pub const PALETTE: [[u8; 3]; 12] = [
    [0xe6, 0x19, 0x4b],
    [0x3c, 0xb4, 0x4b],
    [0x43, 0x63, 0xd8],
    [0xff, 0xe1, 0x19],
    [0xf5, 0x82, 0x31],
    [0x91, 0x1e, 0xb4],
    [0x42, 0xd4, 0xf4],
    [0xf0, 0x32, 0xe6],
    [0xbf, 0xef, 0x45],
    [0xfa, 0xbe, 0xd4],
    [0x46, 0x99, 0x90],
    [0x9a, 0x63, 0x24],
];

pub const UNKNOWN_COLOR: [u8; 3] = [0, 0, 0];

pub fn color(label: Label) -> [u8; 3] {
    match label {
        Label::Known(c) => PALETTE[c % PALETTE.len()],
        Label::Unknown => UNKNOWN_COLOR,
    }
}

/// Encode row-major per-pixel labels as a P6 image.
pub fn render_ppm(width: usize, height: usize, labels: &[Label]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::shape("render_ppm", &[height, width], &[labels.len()]));
    }
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + 3 * labels.len());
    out.extend_from_slice(header.as_bytes());
    for &l in labels {
        out.extend_from_slice(&color(l));
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, labels: &[Label]) -> Result<()> {
    let bytes = render_ppm(width, height, labels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
