//! Choosing which layers to average, and learning per-layer weights.
//!
//! Automatic selection renders a synthetic circle-on-texture image, runs it
//! through the model, and keeps every layer whose background entropy is at
//! least `ratio` times its object entropy (default 1.2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionModel;
use crate::entropy::{self, EntropyMap, ExtractOptions, LayerAggregation};
use crate::linalg::Matrix;
use crate::tensor::{BinaryMask, GrayImage, MaskLabel};

pub const DEFAULT_RATIO: f64 = 1.2;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("circle at ({cx}, {cy}) with radius {radius} does not fit in {width}x{height}")]
    CircleOutOfBounds {
        cx: f64,
        cy: f64,
        radius: f64,
        width: usize,
        height: usize,
    },
    #[error("radius {radius} is smaller than the patch size {patch_size}")]
    RadiusTooSmall { radius: f64, patch_size: usize },
    #[error("layer {layer}: no {region} cells after downsampling the mask to {grid_w}x{grid_h}")]
    EmptyRegion {
        layer: usize,
        region: &'static str,
        grid_w: usize,
        grid_h: usize,
    },
    #[error("selection ratio must be > 1, got {0}")]
    InvalidRatio(f64),
    #[error("training data contains only one class")]
    SingleClass,
    #[error("{samples} samples but {labels} labels")]
    LabelCount { samples: usize, labels: usize },
    #[error("non-finite feature at sample {0}")]
    NonFiniteFeature(usize),
    #[error("no layers to select from")]
    NoLayers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestPatternConfig {
    pub width: usize,
    pub height: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl TestPatternConfig {
    /// Centred circle sized for a model input: radius `max(patch, side/6)`.
    pub fn for_input(width: usize, height: usize, patch_size: usize, seed: u64) -> Self {
        let side = width.min(height) as f64;
        Self {
            width,
            height,
            center_x: width as f64 / 2.0,
            center_y: height as f64 / 2.0,
            radius: (side / 6.0).max(patch_size as f64),
            patch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPattern {
    pub image: GrayImage,
    pub object_mask: BinaryMask,
}

const CHECKER_CELL: usize = 8;
const CHECKER_LEVELS: [i32; 2] = [96, 128];
const NOISE_AMPLITUDE: i32 = 16;
const STRIPE_PERIOD: usize = 4;
const STRIPE_LEVELS: [u8; 2] = [230, 30];

/// Circle filled with horizontal stripes on a noisy checkerboard.
pub fn gen_test_pattern(config: &TestPatternConfig) -> Result<TestPattern, SelectionError> {
    let TestPatternConfig {
        width,
        height,
        center_x: cx,
        center_y: cy,
        radius,
        patch_size,
        seed,
    } = *config;
    if radius < patch_size as f64 {
        return Err(SelectionError::RadiusTooSmall { radius, patch_size });
    }
    let fits = cx - radius >= 0.0 && cy - radius >= 0.0 && cx + radius <= width as f64 && cy + radius <= height as f64;
    if !fits {
        return Err(SelectionError::CircleOutOfBounds {
            cx,
            cy,
            radius,
            width,
            height,
        });
    }
    let inside = |x: usize, y: usize| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        dx * dx + dy * dy <= radius * radius
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            // draw noise for every pixel so the background does not depend on the circle
            let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
            let v = if inside(x, y) {
                STRIPE_LEVELS[(y / (STRIPE_PERIOD / 2)) % 2]
            } else {
                let base = CHECKER_LEVELS[(x / CHECKER_CELL + y / CHECKER_CELL) % 2];
                (base + noise).clamp(0, 255) as u8
            };
            pixels.push(v);
        }
    }
    let image = GrayImage::new(width, height, pixels).expect("pixel count matches");
    let object_mask = BinaryMask::from_fn(width, height, |x, y| {
        if inside(x, y) {
            MaskLabel::Object
        } else {
            MaskLabel::Background
        }
    });
    Ok(TestPattern { image, object_mask })
}

/// Majority label of each grid cell: `Some(true)` for object, `Some(false)`
/// for background (ties included), `None` if the cell covers only ignore
/// pixels or no pixels at all.
pub fn downsample_mask(mask: &BinaryMask, grid_w: usize, grid_h: usize) -> Vec<Option<bool>> {
    let (w, h) = (mask.width(), mask.height());
    let mut cells = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        let (y0, y1) = (gy * h / grid_h, (gy + 1) * h / grid_h);
        for gx in 0..grid_w {
            let (x0, x1) = (gx * w / grid_w, (gx + 1) * w / grid_w);
            let (mut obj, mut bg) = (0usize, 0usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    match mask.get(x, y) {
                        MaskLabel::OBJECT => obj += 1,
                        MaskLabel::BACKGROUND => bg += 1,
                        _ => {}
                    }
                }
            }
            cells.push(if obj + bg == 0 { None } else { Some(obj > bg) });
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMeans {
    pub obj_mean: f64,
    pub bg_mean: f64,
}

/// Per-layer object/background mean entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layers: Vec<RegionMeans>,
}

pub fn region_stats(maps: &[EntropyMap], mask: &BinaryMask) -> Result<LayerStats, SelectionError> {
    let layers = maps
        .iter()
        .enumerate()
        .map(|(layer, map)| {
            let (gw, gh) = (map.width(), map.height());
            let cells = downsample_mask(mask, gw, gh);
            let (mut obj, mut n_obj, mut bg, mut n_bg) = (0.0, 0usize, 0.0, 0usize);
            for (&v, cell) in map.values().iter().zip(&cells) {
                match cell {
                    Some(true) => {
                        obj += v;
                        n_obj += 1;
                    }
                    Some(false) => {
                        bg += v;
                        n_bg += 1;
                    }
                    None => {}
                }
            }
            let empty = |region| SelectionError::EmptyRegion {
                layer,
                region,
                grid_w: gw,
                grid_h: gh,
            };
            if n_obj == 0 {
                return Err(empty("object"));
            }
            if n_bg == 0 {
                return Err(empty("background"));
            }
            Ok(RegionMeans {
                obj_mean: obj / n_obj as f64,
                bg_mean: bg / n_bg as f64,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(LayerStats { layers })
}

/// Layers with `bg_mean >= ratio * obj_mean`. May be empty.
pub fn select_layers(stats: &LayerStats, ratio: f64) -> Result<Vec<usize>, SelectionError> {
    if !(ratio > 1.0 && ratio.is_finite()) {
        return Err(SelectionError::InvalidRatio(ratio));
    }
    Ok(stats
        .layers
        .iter()
        .enumerate()
        .filter(|(_, s)| s.bg_mean >= ratio * s.obj_mean)
        .map(|(l, _)| l)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelectionEntry {
    pub layer: usize,
    pub obj_mean: f64,
    pub bg_mean: f64,
    /// `bg_mean / obj_mean`; `None` when the object mean is zero.
    pub ratio: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub per_layer: Vec<LayerSelectionEntry>,
    pub selection: Vec<usize>,
    pub fallback_used: bool,
}

impl SelectionReport {
    pub fn aggregation(&self) -> LayerAggregation {
        LayerAggregation::UniformSubset {
            subset: self.selection.clone(),
        }
    }
}

/// Applies the ratio rule to precomputed maps; an empty result falls back
/// to all layers.
pub fn select_from_maps(maps: &[EntropyMap], mask: &BinaryMask, ratio: f64) -> Result<SelectionReport, SelectionError> {
    if maps.is_empty() {
        return Err(SelectionError::NoLayers);
    }
    let stats = region_stats(maps, mask)?;
    let chosen = select_layers(&stats, ratio)?;
    let fallback_used = chosen.is_empty();
    let selection = if fallback_used {
        log::warn!("no layer passed the {ratio} entropy ratio; falling back to all layers");
        (0..maps.len()).collect()
    } else {
        chosen.clone()
    };
    let per_layer = stats
        .layers
        .iter()
        .enumerate()
        .map(|(layer, s)| LayerSelectionEntry {
            layer,
            obj_mean: s.obj_mean,
            bg_mean: s.bg_mean,
            ratio: (s.obj_mean > 0.0).then(|| s.bg_mean / s.obj_mean),
            selected: chosen.contains(&layer),
        })
        .collect();
    Ok(SelectionReport {
        per_layer,
        selection,
        fallback_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoSelectOptions {
    pub ratio: f64,
    /// Circle radius in pixels; `None` uses [`TestPatternConfig::for_input`].
    pub radius: Option<f64>,
    pub seed: u64,
    pub extract: ExtractOptions,
}

impl Default for AutoSelectOptions {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_RATIO,
            radius: None,
            seed: 0,
            extract: ExtractOptions::default(),
        }
    }
}

/// Renders a test pattern at the model's input size and selects layers on it.
pub fn auto_select<M: AttentionModel + ?Sized>(model: &M, options: &AutoSelectOptions) -> Result<SelectionReport, crate::Error> {
    let (w, h) = model.input_size();
    let mut config = TestPatternConfig::for_input(w, h, model.patch_size(), options.seed);
    if let Some(r) = options.radius {
        config.radius = r;
    }
    let pattern = gen_test_pattern(&config)?;
    let stack = model.attention(&pattern.image)?;
    let maps = entropy::stack_entropy_maps(&stack, options.extract)?;
    Ok(select_from_maps(&maps, &pattern.object_mask, options.ratio)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective before the first step and after every epoch.
    pub loss_trace: Vec<f64>,
}

impl LogisticFit {
    pub fn aggregation(&self) -> LayerAggregation {
        LayerAggregation::Weighted {
            weights: self.weights.clone(),
            bias: self.bias,
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        entropy::sigmoid(linear(&self.weights, self.bias, features))
    }
}

#[inline]
fn linear(weights: &[f64], bias: f64, x: &[f64]) -> f64 {
    bias + weights.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy plus `l2 · ‖a‖²` (the bias is not penalised).
pub fn logistic_loss(weights: &[f64], bias: f64, samples: &Matrix, labels: &[bool], l2: f64) -> f64 {
    let n = samples.rows() as f64;
    let data: f64 = samples
        .iter_rows()
        .zip(labels)
        .map(|(x, &y)| {
            let z = linear(weights, bias, x);
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum();
    data / n + l2 * weights.iter().map(|a| a * a).sum::<f64>()
}

/// Analytic gradient of [`logistic_loss`] with respect to `(a, b)`.
pub fn logistic_gradient(weights: &[f64], bias: f64, samples: &Matrix, labels: &[bool], l2: f64) -> (Vec<f64>, f64) {
    let n = samples.rows() as f64;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, &y) in samples.iter_rows().zip(labels) {
        let residual = entropy::sigmoid(linear(weights, bias, x)) - f64::from(u8::from(y));
        for (g, v) in grad.iter_mut().zip(x) {
            *g += residual * v;
        }
        grad_b += residual;
    }
    for (g, a) in grad.iter_mut().zip(weights) {
        *g = *g / n + 2.0 * l2 * a;
    }
    (grad, grad_b / n)
}

/// Full-batch gradient descent from `a = 0, b = 0`.
///
/// `samples` is `n × L` (one row of layer entropies per pixel); `labels`
/// marks object pixels.
pub fn fit_layer_weights(samples: &Matrix, labels: &[bool], options: &FitOptions) -> Result<LogisticFit, SelectionError> {
    if samples.rows() != labels.len() {
        return Err(SelectionError::LabelCount {
            samples: samples.rows(),
            labels: labels.len(),
        });
    }
    if let Some(idx) = samples.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(SelectionError::NonFiniteFeature(idx));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(SelectionError::SingleClass);
    }
    let mut weights = vec![0.0; samples.cols()];
    let mut bias = 0.0;
    let mut loss_trace = Vec::with_capacity(options.epochs + 1);
    loss_trace.push(logistic_loss(&weights, bias, samples, labels, options.l2));
    for _ in 0..options.epochs {
        let (grad, grad_b) = logistic_gradient(&weights, bias, samples, labels, options.l2);
        for (a, g) in weights.iter_mut().zip(&grad) {
            *a -= options.learning_rate * g;
        }
        bias -= options.learning_rate * grad_b;
        loss_trace.push(logistic_loss(&weights, bias, samples, labels, options.l2));
    }
    Ok(LogisticFit {
        weights,
        bias,
        loss_trace,
    })
}
