//! Dense arrays and 8-bit rasters shared by every stage of the pipeline.
//!
//! Storage is `f32` (what goes on disk); all arithmetic elsewhere in the
//! crate happens in `f64` and converts at the boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("tensor must have at least one dimension")]
    NoDims,
    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("pixel count {actual} does not match {width}x{height}")]
    PixelCount {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("illegal mask value {0}")]
    IllegalMaskValue(u8),
}

/// Row-major `f32` array with at least one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::NoDims);
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(idx));
        }
        Ok(Self { shape, data })
    }

    /// Narrows `f64` values to `f32` storage.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, TensorError> {
        if pixels.len() != width * height {
            return Err(TensorError::PixelCount {
                width,
                height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Copies out the `w`x`h` rectangle whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            pixels.extend_from_slice(&self.pixels[start..start + w]);
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }
}

/// Per-pixel label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskLabel {
    Background,
    Object,
    Ignore,
}

impl MaskLabel {
    pub const BACKGROUND: u8 = 0;
    pub const OBJECT: u8 = 1;
    pub const IGNORE: u8 = 255;

    pub fn from_raw(v: u8) -> Result<Self, TensorError> {
        match v {
            Self::BACKGROUND => Ok(Self::Background),
            Self::OBJECT => Ok(Self::Object),
            Self::IGNORE => Ok(Self::Ignore),
            other => Err(TensorError::IllegalMaskValue(other)),
        }
    }

    pub fn raw(self) -> u8 {
        match self {
            Self::Background => Self::BACKGROUND,
            Self::Object => Self::OBJECT,
            Self::Ignore => Self::IGNORE,
        }
    }
}

/// Segmentation mask holding only the values 0 (background), 1 (object)
/// and 255 (ignore).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self, TensorError> {
        if values.len() != width * height {
            return Err(TensorError::PixelCount {
                width,
                height,
                actual: values.len(),
            });
        }
        if let Some(&bad) = values
            .iter()
            .find(|&&v| v != MaskLabel::BACKGROUND && v != MaskLabel::OBJECT && v != MaskLabel::IGNORE)
        {
            return Err(TensorError::IllegalMaskValue(bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> MaskLabel) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y).raw());
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn label(&self, idx: usize) -> MaskLabel {
        match self.values[idx] {
            MaskLabel::OBJECT => MaskLabel::Object,
            MaskLabel::IGNORE => MaskLabel::Ignore,
            _ => MaskLabel::Background,
        }
    }

    pub fn is_object(&self, idx: usize) -> bool {
        self.values[idx] == MaskLabel::OBJECT
    }

    pub fn is_ignore(&self, idx: usize) -> bool {
        self.values[idx] == MaskLabel::IGNORE
    }

    pub fn count(&self, label: MaskLabel) -> usize {
        let raw = label.raw();
        self.values.iter().filter(|&&v| v == raw).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, actual: 3, .. })
        ));
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite(1))
        );
        assert_eq!(Tensor::new(vec![], vec![]), Err(TensorError::NoDims));
        assert!(Tensor::new(vec![0], vec![]).unwrap().is_empty());
    }

    #[test]
    fn mask_rejects_illegal_value() {
        let err = BinaryMask::new(2, 1, vec![0, 7]).unwrap_err();
        assert_eq!(err.to_string(), "illegal mask value 7");
        let m = BinaryMask::new(2, 2, vec![0, 1, 255, 0]).unwrap();
        assert_eq!(m.count(MaskLabel::Object), 1);
        assert!(m.is_ignore(2));
    }

    #[test]
    fn crop_copies_rectangle() {
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let c = img.crop(1, 0, 2, 2);
        assert_eq!(c.pixels(), &[2, 3, 5, 6]);
    }
}
