//! Attention entropy: from per-head attention rows to per-pixel object scores.
//!
//! Pipeline for one image:
//! head-average → drop class token → row entropy → patch grid →
//! resample to a common grid → aggregate layers → negate and upsample to
//! pixels → threshold.

use std::marker::PhantomData;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionStack, LayerAttention};
use crate::linalg::Matrix;
use crate::tensor::{BinaryMask, MaskLabel, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("cannot average zero attention heads")]
    NoHeads,
    #[error("attention heads have mismatched shapes")]
    HeadShape,
    #[error("class token stripping needs at least 2 tokens, got {0}")]
    TooFewTokens(usize),
    #[error("negative or non-finite attention value {value} at row {row}")]
    NegativeEntry { row: usize, value: f64 },
    #[error("{len} values cannot fill a {width}x{height} grid")]
    GridSize { len: usize, width: usize, height: usize },
    #[error("grid dimensions must be positive, got {width}x{height}")]
    ZeroDims { width: usize, height: usize },
    #[error("non-finite grid value at index {0}")]
    NonFinite(usize),
    #[error("uniform aggregation needs a non-empty layer subset")]
    EmptySubset,
    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndex { index: usize, layers: usize },
    #[error("weighted aggregation has {weights} weights for {layers} layers")]
    WeightCount { weights: usize, layers: usize },
    #[error("no entropy maps to aggregate")]
    NoMaps,
    #[error("window at ({x}, {y}) of size {width}x{height} exceeds the {full_w}x{full_h} frame")]
    WindowBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        full_w: usize,
        full_h: usize,
    },
    #[error("pixel ({x}, {y}) is not covered by any window")]
    Uncovered { x: usize, y: usize },
    #[error("window of {window} does not fit into frame extent {full}")]
    WindowTooLarge { window: usize, full: usize },
    #[error("threshold must not be NaN")]
    NanThreshold,
}

/// Marker for grids of per-patch entropies (nats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entropy;

/// Marker for grids of per-pixel object scores (higher = more object-like).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Score;

/// Row-major 2-D field of finite values.
#[derive(Debug)]
pub struct Grid<K> {
    width: usize,
    height: usize,
    values: Vec<f64>,
    kind: PhantomData<K>,
}

pub type EntropyMap = Grid<Entropy>;
pub type ScoreMap = Grid<Score>;

impl<K> Clone for Grid<K> {
    fn clone(&self) -> Self {
        Grid {
            width: self.width,
            height: self.height,
            values: self.values.clone(),
            kind: PhantomData,
        }
    }
}

impl<K> PartialEq for Grid<K> {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.values == other.values
    }
}

impl<K> Grid<K> {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, EntropyError> {
        if width == 0 || height == 0 {
            return Err(EntropyError::ZeroDims { width, height });
        }
        if values.len() != width * height {
            return Err(EntropyError::GridSize {
                len: values.len(),
                width,
                height,
            });
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(EntropyError::NonFinite(idx));
        }
        Ok(Self {
            width,
            height,
            values,
            kind: PhantomData,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self, EntropyError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `f` elementwise; the result must stay finite.
    pub fn map<K2>(&self, f: impl Fn(f64) -> f64) -> Result<Grid<K2>, EntropyError> {
        Grid::new(self.width, self.height, self.values.iter().map(|&v| f(v)).collect())
    }

    /// `(height, width)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::from_f64(vec![self.height, self.width], &self.values)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, EntropyError> {
        match *t.shape() {
            [h, w] => Self::new(w, h, t.to_f64()),
            _ => Err(EntropyError::GridSize {
                len: t.len(),
                width: 0,
                height: 0,
            }),
        }
    }
}

/// Mean over heads: `Ā[j, j'] = (1/m) Σ_i A_i[j, j']`.
pub fn average_heads(heads: &[Matrix]) -> Result<Matrix, EntropyError> {
    let first = heads.first().ok_or(EntropyError::NoHeads)?;
    if heads.iter().any(|h| h.shape() != first.shape()) {
        return Err(EntropyError::HeadShape);
    }
    let m = heads.len() as f64;
    let mut sum = vec![0.0; first.as_slice().len()];
    for head in heads {
        for (s, &v) in sum.iter_mut().zip(head.as_slice()) {
            *s += v;
        }
    }
    Ok(Matrix::from_vec(
        first.rows(),
        first.cols(),
        sum.into_iter().map(|s| s / m).collect(),
    ))
}

/// Removes row 0 and column 0 (the class token). With `renormalize`, each
/// remaining row is rescaled to sum to one; rows with no mass left become
/// uniform.
pub fn strip_class_token(attention: &Matrix, renormalize: bool) -> Result<Matrix, EntropyError> {
    let (rows, cols) = attention.shape();
    if rows < 2 || cols < 2 {
        return Err(EntropyError::TooFewTokens(rows.min(cols)));
    }
    let mut out = Matrix::from_fn(rows - 1, cols - 1, |r, c| attention.get(r + 1, c + 1));
    if renormalize {
        let n = (cols - 1) as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / n);
            }
        }
    }
    Ok(out)
}

/// Shannon entropy of one nonnegative row, `0 · ln 0 = 0`.
#[inline]
pub fn shannon_entropy(row: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in row {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Entropy of every row, in nats.
pub fn row_entropy(attention: &Matrix) -> Result<Vec<f64>, EntropyError> {
    attention
        .iter_rows()
        .enumerate()
        .map(|(row, values)| {
            if let Some(&value) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(EntropyError::NegativeEntry { row, value });
            }
            Ok(shannon_entropy(values))
        })
        .collect()
}

/// Row-major reshape of per-patch entropies into a `grid_w × grid_h` map.
pub fn entropy_grid(values: Vec<f64>, grid_w: usize, grid_h: usize) -> Result<EntropyMap, EntropyError> {
    EntropyMap::new(grid_w, grid_h, values)
}

/// Bilinear resampling with half-pixel (cell-centre) alignment; edges clamp.
pub fn resample_bilinear<K>(grid: &Grid<K>, out_w: usize, out_h: usize) -> Result<Grid<K>, EntropyError> {
    if out_w == 0 || out_h == 0 {
        return Err(EntropyError::ZeroDims {
            width: out_w,
            height: out_h,
        });
    }
    if out_w == grid.width && out_h == grid.height {
        return Ok(grid.clone());
    }
    let xs = axis_taps(grid.width, out_w);
    let ys = axis_taps(grid.height, out_h);
    let mut values = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(grid.get(x0, y0), grid.get(x1, y0), fx);
            let bottom = lerp(grid.get(x0, y1), grid.get(x1, y1), fx);
            values.push(lerp(top, bottom, fy));
        }
    }
    Grid::new(out_w, out_h, values)
}

/// For each output index: the two source indices and the fractional weight
/// of the second.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    // clamp so rounding can never leave the [a, b] hull
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// How per-layer entropy maps are combined.
///
/// Layer indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LayerAggregation {
    /// Mean of the selected layers.
    UniformSubset { subset: Vec<usize> },
    /// `σ(Σ_l a_l E^l + b)`.
    Weighted { weights: Vec<f64>, bias: f64 },
}

impl LayerAggregation {
    pub fn all_layers(num_layers: usize) -> Self {
        Self::UniformSubset {
            subset: (0..num_layers).collect(),
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Self::Weighted { .. })
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), EntropyError> {
        match self {
            Self::UniformSubset { subset } => {
                if subset.is_empty() {
                    return Err(EntropyError::EmptySubset);
                }
                if let Some(&index) = subset.iter().find(|&&i| i >= num_layers) {
                    return Err(EntropyError::LayerIndex {
                        index,
                        layers: num_layers,
                    });
                }
                Ok(())
            }
            Self::Weighted { weights, .. } => {
                if weights.len() != num_layers {
                    return Err(EntropyError::WeightCount {
                        weights: weights.len(),
                        layers: num_layers,
                    });
                }
                Ok(())
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest grid among the maps (by cell count; ties keep the first).
pub fn finest_grid(maps: &[EntropyMap]) -> Option<(usize, usize)> {
    maps.iter()
        .map(|m| (m.width, m.height))
        .reduce(|best, cur| if cur.0 * cur.1 > best.0 * best.1 { cur } else { best })
}

/// Resamples each map to `common_w × common_h` and combines them.
pub fn aggregate_layers(
    maps: &[EntropyMap],
    aggregation: &LayerAggregation,
    common_w: usize,
    common_h: usize,
) -> Result<EntropyMap, EntropyError> {
    if maps.is_empty() {
        return Err(EntropyError::NoMaps);
    }
    aggregation.validate(maps.len())?;
    let n = common_w * common_h;
    let resampled = |idx: usize| resample_bilinear(&maps[idx], common_w, common_h);
    match aggregation {
        LayerAggregation::UniformSubset { subset } => {
            let mut acc = vec![0.0; n];
            for &idx in subset {
                let m = resampled(idx)?;
                acc.iter_mut().zip(m.values()).for_each(|(a, v)| *a += v);
            }
            let k = subset.len() as f64;
            EntropyMap::new(common_w, common_h, acc.into_iter().map(|a| a / k).collect())
        }
        LayerAggregation::Weighted { weights, bias } => {
            let mut acc = vec![*bias; n];
            for (idx, &w) in weights.iter().enumerate() {
                let m = resampled(idx)?;
                acc.iter_mut().zip(m.values()).for_each(|(a, v)| *a += w * v);
            }
            EntropyMap::new(common_w, common_h, acc.into_iter().map(sigmoid).collect())
        }
    }
}

/// Pixel-resolution object score. Uniform-mode maps are negated (low
/// entropy means object); weighted-mode maps are already oriented.
pub fn to_score(map: &EntropyMap, img_w: usize, img_h: usize, weighted_mode: bool) -> Result<ScoreMap, EntropyError> {
    let oriented: ScoreMap = if weighted_mode {
        map.map(|v| v)?
    } else {
        map.map(|v| -v)?
    };
    resample_bilinear(&oriented, img_w, img_h)
}

/// `1` where `score >= threshold`, else `0`.
pub fn binarize(scores: &ScoreMap, threshold: f64) -> Result<BinaryMask, EntropyError> {
    if threshold.is_nan() {
        return Err(EntropyError::NanThreshold);
    }
    Ok(BinaryMask::from_fn(scores.width, scores.height, |x, y| {
        if scores.get(x, y) >= threshold {
            MaskLabel::Object
        } else {
            MaskLabel::Background
        }
    }))
}

/// Averages overlapping windows placed at `(x, y)` offsets into a full frame.
pub fn merge_windows<K>(windows: &[(Grid<K>, usize, usize)], full_w: usize, full_h: usize) -> Result<Grid<K>, EntropyError> {
    if full_w == 0 || full_h == 0 {
        return Err(EntropyError::ZeroDims {
            width: full_w,
            height: full_h,
        });
    }
    let mut sum = vec![0.0; full_w * full_h];
    let mut count = vec![0u32; full_w * full_h];
    for (grid, x, y) in windows {
        let (x, y) = (*x, *y);
        if x + grid.width > full_w || y + grid.height > full_h {
            return Err(EntropyError::WindowBounds {
                x,
                y,
                width: grid.width,
                height: grid.height,
                full_w,
                full_h,
            });
        }
        for wy in 0..grid.height {
            for wx in 0..grid.width {
                let idx = (y + wy) * full_w + x + wx;
                sum[idx] += grid.get(wx, wy);
                count[idx] += 1;
            }
        }
    }
    if let Some(idx) = count.iter().position(|&c| c == 0) {
        return Err(EntropyError::Uncovered {
            x: idx % full_w,
            y: idx / full_w,
        });
    }
    Grid::new(
        full_w,
        full_h,
        sum.into_iter().zip(count).map(|(s, c)| s / f64::from(c)).collect(),
    )
}

/// Window start offsets along one axis: step by `stride` (clamped to the
/// window so there are no gaps), and always end with a window flush against
/// the far edge.
pub fn window_offsets(full: usize, window: usize, stride: usize) -> Result<Vec<usize>, EntropyError> {
    if window == 0 || window > full {
        return Err(EntropyError::WindowTooLarge { window, full });
    }
    let stride = stride.clamp(1, window);
    let mut offsets = Vec::new();
    let mut pos = 0;
    while pos + window < full {
        offsets.push(pos);
        pos += stride;
    }
    offsets.push(full - window);
    offsets.dedup();
    Ok(offsets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Rescale patch rows after dropping the class token.
    pub renormalize: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { renormalize: true }
    }
}

/// Entropy map of one layer, laid out on its (possibly reduced) row grid.
pub fn layer_entropy_map(
    layer: &LayerAttention,
    has_class_token: bool,
    options: ExtractOptions,
) -> Result<EntropyMap, EntropyError> {
    let mean = average_heads(layer.heads())?;
    let patch_attention = if has_class_token {
        strip_class_token(&mean, options.renormalize)?
    } else {
        mean
    };
    let entropies = row_entropy(&patch_attention)?;
    let side = layer.row_grid_side(has_class_token);
    entropy_grid(entropies, side, side)
}

/// One entropy map per layer.
pub fn stack_entropy_maps(stack: &AttentionStack, options: ExtractOptions) -> Result<Vec<EntropyMap>, EntropyError> {
    stack
        .layers()
        .par_iter()
        .map(|layer| layer_entropy_map(layer, stack.has_class_token(), options))
        .collect()
}

/// Aggregates layer maps on a common grid and turns the result into a
/// pixel score map.
pub fn score_map(
    maps: &[EntropyMap],
    aggregation: &LayerAggregation,
    common: Option<(usize, usize)>,
    img_w: usize,
    img_h: usize,
) -> Result<ScoreMap, EntropyError> {
    let (cw, ch) = match common {
        Some(c) => c,
        None => finest_grid(maps).ok_or(EntropyError::NoMaps)?,
    };
    let aggregated = aggregate_layers(maps, aggregation, cw, ch)?;
    to_score(&aggregated, img_w, img_h, aggregation.is_weighted())
}
