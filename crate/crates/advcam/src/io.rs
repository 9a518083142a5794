//! On-disk formats: binary PPM/PGM images, and a small `AMAP` container for
//! full-precision f64 attribution maps.

use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |e| IoError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes a `[3,H,W]` tensor in [0,1] as binary PPM (P6), 8-bit quantized.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<(), IoError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(d[(c * h + y) * w + x]));
            }
        }
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

/// Writes a `[H,W]` tensor of byte values (already in 0..=255) as binary PGM (P5).
pub fn write_pgm_bytes(bytes: &[u8], h: usize, w: usize, path: &Path) -> Result<(), IoError> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(bytes);
    std::fs::write(path, buf).map_err(io_err(path))
}

/// Writes a non-negative `[H,W]` map as 8-bit PGM after self-normalization.
pub fn write_pgm_normalized(map: &Tensor, path: &Path) -> Result<(), IoError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max = map.max_value();
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if max > 0.0 { quantize(v / max) } else { 0 })
        .collect();
    write_pgm_bytes(&bytes, h, w, path)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_pnm_header<'a>(
    bytes: &'a [u8],
    magic: &str,
    path: &Path,
) -> Result<(usize, usize, &'a [u8]), IoError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    // magic, width, height, maxval separated by whitespace; no comment support
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 {
        return Err(fmt_err(path, "truncated header"));
    }
    if fields[0] != magic.as_bytes() {
        return Err(fmt_err(path, format!("expected magic {magic}")));
    }
    let parse = |b: &[u8]| -> Result<usize, IoError> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err(path, "bad header field"))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte after maxval, then raster
    Ok((h, w, &bytes[pos + 1..]))
}

/// Reads a binary PPM into a `[3,H,W]` tensor, dequantized as v/255.
pub fn read_ppm(path: &Path) -> Result<Tensor, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (h, w, raster) = parse_pnm_header(&bytes, "P6", path)?;
    if raster.len() < 3 * h * w {
        return Err(fmt_err(path, "truncated raster"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = raster[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("shape"))
}

/// Reads a binary PGM raster as raw bytes plus extents.
pub fn read_pgm_bytes(path: &Path) -> Result<(Vec<u8>, usize, usize), IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (h, w, raster) = parse_pnm_header(&bytes, "P5", path)?;
    if raster.len() < h * w {
        return Err(fmt_err(path, "truncated raster"));
    }
    Ok((raster[..h * w].to_vec(), h, w))
}

const AMAP_MAGIC: &[u8; 4] = b"AMAP";

/// Writes a `[H,W]` f64 map: magic, u32 h, u32 w, little-endian f64 block.
pub fn write_amap(map: &Tensor, path: &Path) -> Result<(), IoError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut buf = Vec::with_capacity(12 + map.len() * 8);
    buf.extend_from_slice(AMAP_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_amap(path: &Path) -> Result<Tensor, IoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[0..4] != AMAP_MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let block = &bytes[12..];
    if block.len() != h * w * 8 {
        return Err(fmt_err(path, "raster length mismatch"));
    }
    let data = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(vec![h, w], data).expect("shape"))
}
