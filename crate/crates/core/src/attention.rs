//! Per-layer, per-head attention tensors as produced by an encoder.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::tensor::{GrayImage, Tensor};

/// Rows must sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("attention layer {layer} has no heads")]
    NoHeads { layer: usize },
    #[error("layer {layer}: head {head} has shape {actual:?}, expected {expected:?}")]
    HeadShape {
        layer: usize,
        head: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("layer {layer}: {cols} key tokens do not match a {grid_n}x{grid_n} grid{}", if *.class_token { " plus class token" } else { "" })]
    TokenCount {
        layer: usize,
        cols: usize,
        grid_n: usize,
        class_token: bool,
    },
    #[error("layer {layer}: {rows} query rows with reduction ratio {reduction} do not cover {patches} patches")]
    Reduction {
        layer: usize,
        rows: usize,
        reduction: usize,
        patches: usize,
    },
    #[error("layer {layer}: reduced grid with {rows} rows is not square")]
    NonSquareReducedGrid { layer: usize, rows: usize },
    #[error("layer {layer}, head {head}, row {row}: not a probability vector (sum {sum})")]
    NotStochastic {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("attention stack has no layers")]
    Empty,
    #[error("attention tensor must be 3-D (heads, rows, cols), got {0:?}")]
    TensorRank(Vec<usize>),
}

/// Attention of one layer: `heads` matrices of shape `rows × cols`.
///
/// `cols` is the full token count `T` (patch grid plus optional class token).
/// Rows equal `T` for full attention; with a reduction ratio `r` there are
/// `grid_n² / r` patch rows (plus the class-token row, if any).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    heads: Vec<Matrix>,
    grid_n: usize,
    reduction: usize,
}

impl LayerAttention {
    /// Full (unreduced) attention over a `grid_n × grid_n` patch grid.
    pub fn new(heads: Vec<Matrix>, grid_n: usize) -> Self {
        Self::with_reduction(heads, grid_n, 1)
    }

    pub fn with_reduction(heads: Vec<Matrix>, grid_n: usize, reduction: usize) -> Self {
        Self {
            heads,
            grid_n,
            reduction,
        }
    }

    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn rows(&self) -> usize {
        self.heads.first().map_or(0, Matrix::rows)
    }

    pub fn cols(&self) -> usize {
        self.heads.first().map_or(0, Matrix::cols)
    }

    /// Side of the square grid laid out by the (patch) query rows.
    pub fn row_grid_side(&self, has_class_token: bool) -> usize {
        let patch_rows = self.rows() - usize::from(has_class_token);
        isqrt(patch_rows)
    }

    /// Packs the heads into a `(heads, rows, cols)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor, crate::tensor::TensorError> {
        let data: Vec<f64> = self.heads.iter().flat_map(|h| h.as_slice().iter().copied()).collect();
        Tensor::from_f64(vec![self.num_heads(), self.rows(), self.cols()], &data)
    }

    pub fn from_tensor(t: &Tensor, grid_n: usize, reduction: usize) -> Result<Self, AttentionError> {
        let &[m, r, c] = t.shape() else {
            return Err(AttentionError::TensorRank(t.shape().to_vec()));
        };
        let values = t.to_f64();
        let heads = values
            .chunks_exact((r * c).max(1))
            .take(m)
            .map(|chunk| Matrix::from_vec(r, c, chunk.to_vec()))
            .collect();
        Ok(Self::with_reduction(heads, grid_n, reduction))
    }

    fn validate(&self, layer: usize, has_class_token: bool) -> Result<(), AttentionError> {
        let first = self.heads.first().ok_or(AttentionError::NoHeads { layer })?;
        let expected = first.shape();
        for (head, m) in self.heads.iter().enumerate() {
            if m.shape() != expected {
                return Err(AttentionError::HeadShape {
                    layer,
                    head,
                    expected,
                    actual: m.shape(),
                });
            }
        }
        let cls = usize::from(has_class_token);
        let patches = self.grid_n * self.grid_n;
        if self.grid_n == 0 || expected.1 != patches + cls {
            return Err(AttentionError::TokenCount {
                layer,
                cols: expected.1,
                grid_n: self.grid_n,
                class_token: has_class_token,
            });
        }
        let patch_rows = expected.0.saturating_sub(cls);
        if self.reduction == 0 || patch_rows == 0 || patch_rows * self.reduction != patches {
            return Err(AttentionError::Reduction {
                layer,
                rows: expected.0,
                reduction: self.reduction,
                patches,
            });
        }
        let side = isqrt(patch_rows);
        if side * side != patch_rows {
            return Err(AttentionError::NonSquareReducedGrid { layer, rows: patch_rows });
        }
        for (head, m) in self.heads.iter().enumerate() {
            for (row, values) in m.iter_rows().enumerate() {
                let sum: f64 = values.iter().sum();
                let valid = values.iter().all(|v| v.is_finite() && *v >= 0.0);
                if !valid || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(AttentionError::NotStochastic {
                        layer,
                        head,
                        row,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

/// All layers' attention for one input image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: Vec<LayerAttention>,
    has_class_token: bool,
}

impl AttentionStack {
    /// Validates shapes, reduction accounting and row-stochasticity.
    pub fn new(layers: Vec<LayerAttention>, has_class_token: bool) -> Result<Self, AttentionError> {
        if layers.is_empty() {
            return Err(AttentionError::Empty);
        }
        for (idx, layer) in layers.iter().enumerate() {
            layer.validate(idx, has_class_token)?;
        }
        Ok(Self {
            layers,
            has_class_token,
        })
    }

    pub fn layers(&self) -> &[LayerAttention] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn has_class_token(&self) -> bool {
        self.has_class_token
    }
}

/// Anything that maps an input image to a stack of attention maps.
pub trait AttentionModel {
    /// Expected input `(width, height)` in pixels.
    fn input_size(&self) -> (usize, usize);

    fn patch_size(&self) -> usize;

    fn attention(&self, image: &GrayImage) -> Result<AttentionStack, crate::Error>;
}

pub(crate) fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| 1.0 / cols as f64)
    }

    #[test]
    fn accepts_full_and_reduced_layers() {
        let full = LayerAttention::new(vec![uniform(16, 16); 2], 4);
        let reduced = LayerAttention::with_reduction(vec![uniform(4, 16)], 4, 4);
        let stack = AttentionStack::new(vec![full, reduced], false).unwrap();
        assert_eq!(stack.layers()[1].row_grid_side(false), 2);
    }

    #[test]
    fn class_token_accounting() {
        let l = LayerAttention::new(vec![uniform(5, 5)], 2);
        assert!(AttentionStack::new(vec![l.clone()], true).is_ok());
        assert!(matches!(
            AttentionStack::new(vec![l], false),
            Err(AttentionError::TokenCount { .. })
        ));
    }

    #[test]
    fn rejects_non_square_reduction_and_bad_rows() {
        let l = LayerAttention::with_reduction(vec![uniform(8, 16)], 4, 2);
        assert!(matches!(
            AttentionStack::new(vec![l], false),
            Err(AttentionError::NonSquareReducedGrid { rows: 8, .. })
        ));
        let mut m = uniform(4, 4);
        m.set(2, 0, 0.5);
        let l = LayerAttention::new(vec![m], 2);
        assert!(matches!(
            AttentionStack::new(vec![l], false),
            Err(AttentionError::NotStochastic { row: 2, .. })
        ));
        assert_eq!(AttentionStack::new(vec![], false), Err(AttentionError::Empty));
    }

    #[test]
    fn tensor_round_trip() {
        let l = LayerAttention::new(vec![uniform(4, 4), Matrix::from_fn(4, 4, |r, c| f64::from(u8::from(r == c)))], 2);
        let t = l.to_tensor().unwrap();
        assert_eq!(t.shape(), &[2, 4, 4]);
        assert_eq!(LayerAttention::from_tensor(&t, 2, 1).unwrap(), l);
    }
}
