//! Binary PGM (P5, maxval 255) for grayscale images and label masks.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{BinaryMask, GrayImage, TensorError};

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("malformed magic: expected P5")]
    BadMagic,
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("unsupported maxval {0} (only 255)")]
    MaxVal(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Raster(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage, PgmError> {
    decode_image(&fs::read(path)?)
}

pub fn save_image(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), PgmError> {
    fs::write(path, encode(image.width(), image.height(), image.pixels()))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask, PgmError> {
    decode_mask(&fs::read(path)?)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), PgmError> {
    fs::write(path, encode(mask.width(), mask.height(), mask.values()))?;
    Ok(())
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let (w, h, pixels) = decode_raw(bytes)?;
    Ok(GrayImage::new(w, h, pixels.to_vec())?)
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, PgmError> {
    let (w, h, pixels) = decode_raw(bytes)?;
    Ok(BinaryMask::new(w, h, pixels.to_vec())?)
}

fn decode_raw(bytes: &[u8]) -> Result<(usize, usize, &[u8]), PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::BadDimensions(format!("{width}x{height}")));
    }
    if maxval != 255 {
        return Err(PgmError::MaxVal(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::BadDimensions("missing separator before pixel data".into())),
    }
    let expected = width as usize * height as usize;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            actual: data.len(),
        });
    }
    Ok((width as usize, height as usize, &data[..expected]))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, PgmError> {
    loop {
        match bytes.get(*pos) {
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&c) = bytes.get(*pos) {
                    *pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::BadDimensions(format!("missing {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PgmError::BadDimensions(format!("{what} out of range")))
}
