//! Binary PGM images and a small latent container format.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LATENT_MAGIC: &[u8; 4] = b"ISLT";

/// Grey-level image, one byte per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    /// Scales `values` so the largest becomes 255; an all-zero map stays black.
    pub fn from_map(values: &[f32], height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "Pgm::from_map",
                format!("{} values for {height}×{width}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("map contains non-finite values".into()));
        }
        let max = values.iter().fold(0.0f32, |m, &v| m.max(v));
        let pixels = values
            .iter()
            .map(|&v| {
                if max <= 0.0 {
                    0
                } else {
                    ((v.max(0.0) / max) as f64 * 255.0).round() as u8
                }
            })
            .collect();
        Ok(Self { width, height, pixels })
    }

    pub fn from_bits(bits: &[bool], height: usize, width: usize) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "Pgm::from_bits",
                format!("{} cells for {height}×{width}", bits.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected P5, found {}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM number {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let data = &bytes[(pos + 1).min(bytes.len())..];
        if data.len() != width * height {
            return Err(Error::Format(format!(
                "{} pixel bytes for {width}×{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }
}

/// `ISLT`, rows and cols as little-endian u32, then row-major f32 LE.
pub fn encode_latent(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.values().len());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_latent(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 12 || &bytes[..4] != LATENT_MAGIC {
        return Err(Error::Format("not a latent file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!("{} payload bytes for {rows}×{cols}", body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Matrix::new(rows, cols, values)
}
