//! `HSC1` cube and `HSL1` label files.
//!
//! Both share a framing: a 4-byte magic, a little-endian `u32` header
//! length, a UTF-8 JSON header, then a little-endian payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HsiCube, LabelMap};
use crate::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSC1";
const LABEL_MAGIC: &[u8; 4] = b"HSL1";

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    bands: usize,
    height: usize,
    width: usize,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    height: usize,
    width: usize,
    classes: Vec<String>,
}

fn frame(magic: &[u8; 4], header: &impl Serialize, payload_len: usize) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Returns the parsed header and the payload offset.
fn unframe<'a, H: Deserialize<'a>>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(H, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "file shorter than the 8-byte preamble".into(),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap()),
        });
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let end = 8 + len;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("header declares {len} bytes but the file ends early"),
        });
    }
    let header = serde_json::from_slice(&bytes[8..end]).map_err(|e| Error::Format {
        offset: 8,
        message: format!("header: {e}"),
    })?;
    Ok((header, end))
}

fn check_payload(bytes: &[u8], start: usize, expected: usize) -> Result<()> {
    let found = bytes.len() - start;
    if found < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: expected {expected} bytes, found {found}"),
        });
    }
    if found > expected {
        return Err(Error::Format {
            offset: start + expected,
            message: format!("{} trailing bytes after payload", found - expected),
        });
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cube_to_bytes(cube: &HsiCube) -> Result<Vec<u8>> {
    cube.validate()?;
    let header = CubeHeader {
        bands: cube.bands,
        height: cube.height,
        width: cube.width,
        dtype: "f32".into(),
    };
    let mut out = frame(CUBE_MAGIC, &header, 4 * cube.values.len())?;
    for &v in &cube.values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Degenerate(format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn cube_from_bytes(bytes: &[u8], name: &str) -> Result<HsiCube> {
    let (h, start): (CubeHeader, _) = unframe(bytes, CUBE_MAGIC)?;
    if h.dtype != "f32" {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported dtype {:?}", h.dtype),
        });
    }
    if h.bands == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "cube has zero bands".into(),
        });
    }
    let n = h.bands * h.height * h.width;
    check_payload(bytes, start, 4 * n)?;
    let mut values = Vec::with_capacity(n);
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                offset: start + 4 * i,
                message: format!("non-finite value {v}"),
            });
        }
        values.push(v as f64);
    }
    Ok(HsiCube {
        bands: h.bands,
        height: h.height,
        width: h.width,
        values,
        name: name.to_string(),
    })
}

pub fn labels_to_bytes(map: &LabelMap) -> Result<Vec<u8>> {
    map.validate()?;
    let header = LabelHeader {
        height: map.height,
        width: map.width,
        classes: map.class_names.clone(),
    };
    let mut out = frame(LABEL_MAGIC, &header, 2 * map.labels.len())?;
    for &l in &map.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<LabelMap> {
    let (h, start): (LabelHeader, _) = unframe(bytes, LABEL_MAGIC)?;
    let n = h.height * h.width;
    check_payload(bytes, start, 2 * n)?;
    let labels: Vec<u16> = bytes[start..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let map = LabelMap {
        height: h.height,
        width: h.width,
        labels,
        class_names: h.classes,
    };
    if let Some(i) = map.first_invalid() {
        return Err(Error::Format {
            offset: start + 2 * i,
            message: format!(
                "label {} exceeds the {} declared classes",
                map.labels[i],
                map.class_names.len()
            ),
        });
    }
    Ok(map)
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    cube_from_bytes(&read(path)?, &name)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &cube_to_bytes(cube)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    labels_from_bytes(&read(path.as_ref())?)
}

pub fn save_labels(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &labels_to_bytes(map)?)
}
