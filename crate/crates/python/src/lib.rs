//! Python bindings for the attentropy toolkit.
//!
//! Structured results (reports, aggregations, manifests) cross the boundary
//! as plain dicts and lists.

use attentropy::entropy;
use attentropy::eval::{self, EvalConfig, ScoreNormalization};
use attentropy::pipeline::{self, ExtractConfig};
use attentropy::selection::{self, AutoSelectOptions, FitOptions, TestPatternConfig};
use attentropy::{npy, pgm, viz, LayerAggregation, MaskLabel};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(pyattentropy, AttentropyError, PyException);

fn core_err(e: impl Into<attentropy::Error>) -> PyErr {
    let e = e.into();
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        AttentropyError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| AttentropyError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn aggregation_or_all(obj: Option<&Bound<'_, PyAny>>, num_layers: usize) -> PyResult<LayerAggregation> {
    match obj {
        Some(o) if !o.is_none() => from_py(o),
        _ => Ok(LayerAggregation::all_layers(num_layers)),
    }
}

/// 8-bit grayscale image.
#[pyclass(module = "pyattentropy", from_py_object)]
#[derive(Clone)]
struct Image {
    inner: attentropy::GrayImage,
}

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        let inner = attentropy::GrayImage::new(width, height, pixels).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            inner: attentropy::GrayImage::filled(width, height, value),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pgm::load_image(path).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        pgm::save_image(&self.inner, path).map_err(core_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Ground-truth or predicted mask with values 0 (background), 1 (object)
/// and 255 (ignore).
#[pyclass(module = "pyattentropy", from_py_object)]
#[derive(Clone)]
struct Mask {
    inner: attentropy::BinaryMask,
}

#[pymethods]
impl Mask {
    #[new]
    fn new(width: usize, height: usize, values: Vec<u8>) -> PyResult<Self> {
        let inner = attentropy::BinaryMask::new(width, height, values).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pgm::load_mask(path).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        pgm::save_mask(&self.inner, path).map_err(core_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn values(&self) -> Vec<u8> {
        self.inner.values().to_vec()
    }

    fn object_pixels(&self) -> usize {
        self.inner.count(MaskLabel::Object)
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, object={})", self.inner.width(), self.inner.height(), self.object_pixels())
    }
}

/// Per-patch entropy in nats, row-major.
#[pyclass(module = "pyattentropy", from_py_object)]
#[derive(Clone)]
struct EntropyMap {
    inner: attentropy::EntropyMap,
}

#[pymethods]
impl EntropyMap {
    #[new]
    fn new(width: usize, height: usize, values: Vec<f64>) -> PyResult<Self> {
        let inner = attentropy::EntropyMap::new(width, height, values).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let t = npy::load_tensor(path).map_err(core_err)?;
        Ok(Self {
            inner: attentropy::EntropyMap::from_tensor(&t).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let t = self.inner.to_tensor().map_err(core_err)?;
        npy::save_tensor(&t, path).map_err(core_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("EntropyMap({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Pixel anomaly scores; larger means more likely object.
#[pyclass(module = "pyattentropy", from_py_object)]
#[derive(Clone)]
struct ScoreMap {
    inner: attentropy::ScoreMap,
}

#[pymethods]
impl ScoreMap {
    #[new]
    fn new(width: usize, height: usize, values: Vec<f64>) -> PyResult<Self> {
        let inner = attentropy::ScoreMap::new(width, height, values).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let t = npy::load_tensor(path).map_err(core_err)?;
        Ok(Self {
            inner: attentropy::ScoreMap::from_tensor(&t).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let t = self.inner.to_tensor().map_err(core_err)?;
        npy::save_tensor(&t, path).map_err(core_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    /// Object where `score >= threshold`.
    fn binarize(&self, threshold: f64) -> PyResult<Mask> {
        Ok(Mask {
            inner: entropy::binarize(&self.inner, threshold).map_err(core_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("ScoreMap({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Attention matrices of every layer and head for one forward pass.
#[pyclass(module = "pyattentropy", from_py_object)]
#[derive(Clone)]
struct AttentionStack {
    inner: attentropy::AttentionStack,
}

#[pymethods]
impl AttentionStack {
    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    #[getter]
    fn has_class_token(&self) -> bool {
        self.inner.has_class_token()
    }

    fn num_heads(&self, layer: usize) -> PyResult<usize> {
        self.layer(layer).map(|l| l.num_heads())
    }

    /// One head's attention matrix as a list of rows.
    fn head(&self, layer: usize, head: usize) -> PyResult<Vec<Vec<f64>>> {
        let m = self
            .layer(layer)?
            .heads()
            .get(head)
            .ok_or_else(|| PyValueError::new_err(format!("head {head} out of range")))?;
        Ok(m.iter_rows().map(<[f64]>::to_vec).collect())
    }

    #[pyo3(signature = (renormalize = true))]
    fn entropy_maps(&self, renormalize: bool) -> PyResult<Vec<EntropyMap>> {
        let maps = entropy::stack_entropy_maps(&self.inner, attentropy::ExtractOptions { renormalize }).map_err(core_err)?;
        Ok(maps.into_iter().map(|inner| EntropyMap { inner }).collect())
    }
}

impl AttentionStack {
    fn layer(&self, layer: usize) -> PyResult<&attentropy::LayerAttention> {
        self.inner
            .layers()
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))
    }
}

/// Randomly initialised toy ViT.
#[pyclass(module = "pyattentropy")]
struct Model {
    inner: attentropy::VitWeights,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (layers, heads, channels, grid, patch = 16, class_token = false, seed = 0))]
    fn new(layers: usize, heads: usize, channels: usize, grid: usize, patch: usize, class_token: bool, seed: u64) -> PyResult<Self> {
        let config = attentropy::VitConfig {
            patch_size: patch,
            grid_n: grid,
            channels,
            heads,
            layers,
            use_class_token: class_token,
        };
        Ok(Self {
            inner: attentropy::init_model(&config, seed).map_err(core_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: attentropy::VitWeights::load(path).map_err(core_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(core_err)
    }

    /// Zeroes every query and key projection, making attention uniform.
    fn zero_query_key(&mut self) {
        self.inner.zero_query_key();
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config.input_size()
    }

    /// Forward pass on an image of exactly the model input size.
    fn forward(&self, image: &Image) -> PyResult<AttentionStack> {
        Ok(AttentionStack {
            inner: attentropy::vit_forward(&image.inner, &self.inner).map_err(core_err)?,
        })
    }
}

/// Merged per-layer entropy maps for one image.
#[pyclass(module = "pyattentropy")]
struct Extraction {
    inner: attentropy::Extraction,
}

#[pymethods]
impl Extraction {
    #[getter]
    fn maps(&self) -> Vec<EntropyMap> {
        self.inner.maps.iter().cloned().map(|inner| EntropyMap { inner }).collect()
    }

    #[getter]
    fn windows(&self) -> Vec<(usize, usize)> {
        self.inner.windows.clone()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.inner.image_width, self.inner.image_height)
    }

    /// Pixel score map; `aggregation` is a dict such as
    /// `{"mode": "uniform_subset", "subset": [0, 2]}` and defaults to all layers.
    #[pyo3(signature = (aggregation = None, common = None))]
    fn score_map(&self, aggregation: Option<&Bound<'_, PyAny>>, common: Option<(usize, usize)>) -> PyResult<ScoreMap> {
        let agg = aggregation_or_all(aggregation, self.inner.maps.len())?;
        Ok(ScoreMap {
            inner: self.inner.score_map(&agg, common).map_err(core_err)?,
        })
    }

    /// Writes `entropy_lNN.npy` files and the manifest into `dir`.
    fn save(&self, dir: &str) -> PyResult<()> {
        pipeline::write_extraction(&self.inner, dir).map(|_| ()).map_err(core_err)
    }
}

/// Entropy of a probability vector in nats.
#[pyfunction]
fn shannon_entropy(row: Vec<f64>) -> f64 {
    entropy::shannon_entropy(&row)
}

/// Entropy of every row of a row-stochastic matrix.
#[pyfunction]
fn row_entropy(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    entropy::row_entropy(&attentropy::Matrix::from_rows(&rows)).map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (model, image, stride = None, renormalize = true))]
fn extract(model: &Model, image: &Image, stride: Option<usize>, renormalize: bool) -> PyResult<Extraction> {
    let config = ExtractConfig {
        stride,
        options: attentropy::ExtractOptions { renormalize },
        keep_attention: false,
    };
    Ok(Extraction {
        inner: attentropy::extract(&model.inner, &image.inner, &config).map_err(core_err)?,
    })
}

/// Maps from a directory written by `Extraction.save` or the CLI.
#[pyfunction]
fn read_entropy_dir(dir: &str) -> PyResult<Vec<EntropyMap>> {
    let (_, maps) = pipeline::read_entropy_dir(dir).map_err(core_err)?;
    Ok(maps.into_iter().map(|inner| EntropyMap { inner }).collect())
}

#[pyfunction]
#[pyo3(signature = (maps, width, height, aggregation = None, common = None))]
fn score_map(
    maps: Vec<EntropyMap>,
    width: usize,
    height: usize,
    aggregation: Option<&Bound<'_, PyAny>>,
    common: Option<(usize, usize)>,
) -> PyResult<ScoreMap> {
    let maps: Vec<_> = maps.into_iter().map(|m| m.inner).collect();
    let agg = aggregation_or_all(aggregation, maps.len())?;
    Ok(ScoreMap {
        inner: entropy::score_map(&maps, &agg, common, width, height).map_err(core_err)?,
    })
}

/// Striped circle on a noisy checkerboard, with its object mask.
#[pyfunction]
#[pyo3(signature = (width, height, patch = 16, seed = 0))]
fn gen_test_pattern(width: usize, height: usize, patch: usize, seed: u64) -> PyResult<(Image, Mask)> {
    let p = selection::gen_test_pattern(&TestPatternConfig::for_input(width, height, patch, seed)).map_err(core_err)?;
    Ok((Image { inner: p.image }, Mask { inner: p.object_mask }))
}

/// Layer selection on maps and an object mask; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (maps, mask, ratio = None))]
fn select_layers<'py>(py: Python<'py>, maps: Vec<EntropyMap>, mask: &Mask, ratio: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    let maps: Vec<_> = maps.into_iter().map(|m| m.inner).collect();
    let ratio = ratio.unwrap_or(AutoSelectOptions::default().ratio);
    let report = selection::select_from_maps(&maps, &mask.inner, ratio).map_err(core_err)?;
    to_py(py, &report)
}

/// Layer selection on the built-in test pattern at the model input size.
#[pyfunction]
#[pyo3(signature = (model, ratio = None, seed = 0))]
fn auto_select<'py>(py: Python<'py>, model: &Model, ratio: Option<f64>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let defaults = AutoSelectOptions::default();
    let options = AutoSelectOptions {
        ratio: ratio.unwrap_or(defaults.ratio),
        seed,
        ..defaults
    };
    let report = attentropy::auto_select(&model.inner, &options).map_err(core_err)?;
    to_py(py, &report)
}

/// Fits logistic layer weights on `(maps, mask)` frames. Returns
/// `weights`, `bias`, `loss_trace` and a ready-to-use `aggregation`.
#[pyfunction]
#[pyo3(signature = (frames, epochs = None, learning_rate = None, l2 = None))]
fn fit_layer_weights<'py>(
    py: Python<'py>,
    frames: Vec<(Vec<EntropyMap>, Mask)>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    l2: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let defaults = FitOptions::default();
    let options = FitOptions {
        epochs: epochs.unwrap_or(defaults.epochs),
        learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
        l2: l2.unwrap_or(defaults.l2),
    };
    let layers = frames.first().map_or(0, |(m, _)| m.len());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (maps, mask) in &frames {
        if maps.len() != layers {
            return Err(PyValueError::new_err("frames have different layer counts"));
        }
        let maps: Vec<_> = maps.iter().map(|m| m.inner.clone()).collect();
        let (x, y) = pipeline::pixel_features(&maps, &mask.inner).map_err(core_err)?;
        features.extend_from_slice(x.as_slice());
        labels.extend(y);
    }
    let samples = attentropy::Matrix::from_vec(labels.len(), layers, features);
    let fit = attentropy::fit_layer_weights(&samples, &labels, &options).map_err(core_err)?;
    let out = serde_json::json!({
        "weights": fit.weights,
        "bias": fit.bias,
        "loss_trace": fit.loss_trace,
        "aggregation": fit.aggregation(),
    });
    to_py(py, &out)
}

/// Pixel and segment metrics over `(scores, gt)` frames.
///
/// `normalization` is one of `"none"`, `"min_max"` or `"rank"`.
#[pyfunction]
#[pyo3(signature = (frames, thresholds = None, match_threshold = None, normalization = None))]
fn evaluate<'py>(
    py: Python<'py>,
    frames: Vec<(ScoreMap, Mask)>,
    thresholds: Option<Vec<f64>>,
    match_threshold: Option<f64>,
    normalization: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let defaults = EvalConfig::default();
    let normalization: ScoreNormalization = match normalization {
        Some(n) => from_py(n)?,
        None => defaults.normalization,
    };
    let config = EvalConfig {
        thresholds: thresholds.unwrap_or(defaults.thresholds),
        match_threshold: match_threshold.unwrap_or(defaults.match_threshold),
        normalization,
        ..defaults
    };
    let frames: Vec<_> = frames.into_iter().map(|(s, m)| (s.inner, m.inner)).collect();
    let report = eval::evaluate(&frames, &config).map_err(core_err)?;
    to_py(py, &report)
}

/// Writes a viewer bundle for one model-sized image and returns its manifest.
#[pyfunction]
#[pyo3(signature = (image, stack, out_dir, renormalize = true))]
fn export_viz<'py>(
    py: Python<'py>,
    image: &Image,
    stack: &AttentionStack,
    out_dir: &str,
    renormalize: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let manifest = viz::export_viz(&image.inner, &stack.inner, attentropy::ExtractOptions { renormalize }, out_dir)
        .map_err(core_err)?;
    to_py(py, &manifest)
}

/// Checks a viewer bundle and returns its manifest.
#[pyfunction]
fn validate_viz<'py>(py: Python<'py>, dir: &str) -> PyResult<Bound<'py, PyAny>> {
    let manifest = viz::validate_viz(dir).map_err(core_err)?;
    to_py(py, &manifest)
}

#[pymodule]
fn pyattentropy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AttentropyError", m.py().get_type::<AttentropyError>())?;
    m.add_class::<Image>()?;
    m.add_class::<Mask>()?;
    m.add_class::<EntropyMap>()?;
    m.add_class::<ScoreMap>()?;
    m.add_class::<AttentionStack>()?;
    m.add_class::<Model>()?;
    m.add_class::<Extraction>()?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(row_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(read_entropy_dir, m)?)?;
    m.add_function(wrap_pyfunction!(score_map, m)?)?;
    m.add_function(wrap_pyfunction!(gen_test_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(select_layers, m)?)?;
    m.add_function(wrap_pyfunction!(auto_select, m)?)?;
    m.add_function(wrap_pyfunction!(fit_layer_weights, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(export_viz, m)?)?;
    m.add_function(wrap_pyfunction!(validate_viz, m)?)?;
    Ok(())
}
