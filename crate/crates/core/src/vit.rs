//! A small ViT-style encoder that produces real multi-layer, multi-head
//! attention at desk scale.
//!
//! Each block follows
//!
//! ```text
//! A_i   = softmax(Z W_Q,i (Z W_K,i)^T / sqrt(d))
//! SA    = [A_1 Z W_V,1, ..., A_m Z W_V,m]
//! MSA   = SA + SA W_O
//! Z'    = MSA + MLP(MSA),   MLP(x) = max(0, x W_1 + b_1) W_2 + b_2
//! ```
//!
//! There is no layer norm. Input is single-channel; pixels are scaled to
//! `[0, 1]` before the patch embedding.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionModel, AttentionStack, LayerAttention};
use crate::linalg::Matrix;
use crate::npy::{self, NpyError};
use crate::tensor::GrayImage;

pub const DEFAULT_PATCH_SIZE: usize = 16;
const MLP_EXPANSION: usize = 4;
const WEIGHTS_FORMAT: &str = "attentropy-vit-weights";

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("image is {width}x{height}, model expects {expected}x{expected}")]
    ImageSize {
        width: usize,
        height: usize,
        expected: usize,
    },
    #[error("layer {0} produced non-finite activations")]
    NonFinite(usize),
    #[error("bad weights manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_patch_size() -> usize {
    DEFAULT_PATCH_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    pub grid_n: usize,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default)]
    pub use_class_token: bool,
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        let positive = [
            ("patch_size", self.patch_size),
            ("grid_n", self.grid_n),
            ("channels", self.channels),
            ("heads", self.heads),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(VitError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(VitError::InvalidConfig(format!(
                "C not divisible by m (C={}, m={})",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn num_patches(&self) -> usize {
        self.grid_n * self.grid_n
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    /// Side length in pixels of the square input.
    pub fn input_size(&self) -> usize {
        self.grid_n * self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        MLP_EXPANSION * self.channels
    }
}

/// Weights of one encoder block. Head `i` owns columns `i·d .. (i+1)·d` of
/// the packed query/key/value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
}

impl LayerWeights {
    fn zeros(config: &VitConfig) -> Self {
        let c = config.channels;
        let h = config.mlp_hidden();
        Self {
            w_q: Matrix::zeros(c, c),
            w_k: Matrix::zeros(c, c),
            w_v: Matrix::zeros(c, c),
            w_o: Matrix::zeros(c, c),
            mlp_w1: Matrix::zeros(c, h),
            mlp_b1: vec![0.0; h],
            mlp_w2: Matrix::zeros(h, c),
            mlp_b2: vec![0.0; c],
        }
    }

    fn check(&self, config: &VitConfig, layer: usize) -> Result<(), VitError> {
        let c = config.channels;
        let h = config.mlp_hidden();
        let expect = |what: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape && m.is_finite() {
                Ok(())
            } else {
                Err(VitError::Shape {
                    what: format!("layer {layer} {what}"),
                    expected: shape,
                    actual: m.shape(),
                })
            }
        };
        expect("w_q", &self.w_q, (c, c))?;
        expect("w_k", &self.w_k, (c, c))?;
        expect("w_v", &self.w_v, (c, c))?;
        expect("w_o", &self.w_o, (c, c))?;
        expect("mlp_w1", &self.mlp_w1, (c, h))?;
        expect("mlp_w2", &self.mlp_w2, (h, c))?;
        if self.mlp_b1.len() != h || self.mlp_b2.len() != c {
            return Err(VitError::Shape {
                what: format!("layer {layer} mlp bias"),
                expected: (h, c),
                actual: (self.mlp_b1.len(), self.mlp_b2.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    pub config: VitConfig,
    /// `patch_size² × C`
    pub patch_embed: Matrix,
    /// `T × C`
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
}

/// Seeded initialisation: every matrix entry is drawn from `N(0, 1/C)` and
/// rounded to `f32` so that saving and reloading is lossless. Biases start
/// at zero.
pub fn init_model(config: &VitConfig, seed: u64) -> Result<VitWeights, VitError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (config.channels as f64).sqrt())
        .map_err(|e| VitError::InvalidConfig(e.to_string()))?;
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| f64::from(normal.sample(&mut rng) as f32))
    };
    let c = config.channels;
    let h = config.mlp_hidden();
    let patch_embed = draw(config.patch_dim(), c);
    let pos_embed = draw(config.num_tokens(), c);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            w_q: draw(c, c),
            w_k: draw(c, c),
            w_v: draw(c, c),
            w_o: draw(c, c),
            mlp_w1: draw(c, h),
            mlp_b1: vec![0.0; h],
            mlp_w2: draw(h, c),
            mlp_b2: vec![0.0; c],
        })
        .collect();
    Ok(VitWeights {
        config: *config,
        patch_embed,
        pos_embed,
        layers,
    })
}

impl VitWeights {
    /// All-zero weights with the right shapes.
    pub fn zeros(config: &VitConfig) -> Result<Self, VitError> {
        config.validate()?;
        Ok(Self {
            config: *config,
            patch_embed: Matrix::zeros(config.patch_dim(), config.channels),
            pos_embed: Matrix::zeros(config.num_tokens(), config.channels),
            layers: (0..config.layers).map(|_| LayerWeights::zeros(config)).collect(),
        })
    }

    /// Zeroes every query and key projection, which makes all attention
    /// rows uniform regardless of the input.
    pub fn zero_query_key(&mut self) {
        for layer in &mut self.layers {
            layer.w_q = Matrix::zeros(layer.w_q.rows(), layer.w_q.cols());
            layer.w_k = Matrix::zeros(layer.w_k.rows(), layer.w_k.cols());
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.layers {
            return Err(VitError::Manifest(format!(
                "{} layers in weights, config says {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        let check = |what: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape && m.is_finite() {
                Ok(())
            } else {
                Err(VitError::Shape {
                    what: what.to_string(),
                    expected: shape,
                    actual: m.shape(),
                })
            }
        };
        check("patch_embed", &self.patch_embed, (cfg.patch_dim(), cfg.channels))?;
        check("pos_embed", &self.pos_embed, (cfg.num_tokens(), cfg.channels))?;
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.check(cfg, idx)?;
        }
        Ok(())
    }

    /// Writes `config.json`, `manifest.json` and one NPY file per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), VitError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let save = |name: &str, m: &Matrix| -> Result<String, VitError> {
            let file = format!("{name}.npy");
            npy::save_tensor(&m.to_tensor().map_err(NpyError::from)?, dir.join(&file))?;
            Ok(file)
        };
        let save_vec = |name: &str, v: &[f64]| save(name, &Matrix::from_vec(1, v.len(), v.to_vec()));

        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{idx:02}");
            layers.push(LayerManifest {
                w_q: save(&format!("{p}_w_q"), &layer.w_q)?,
                w_k: save(&format!("{p}_w_k"), &layer.w_k)?,
                w_v: save(&format!("{p}_w_v"), &layer.w_v)?,
                w_o: save(&format!("{p}_w_o"), &layer.w_o)?,
                mlp_w1: save(&format!("{p}_mlp_w1"), &layer.mlp_w1)?,
                mlp_b1: save_vec(&format!("{p}_mlp_b1"), &layer.mlp_b1)?,
                mlp_w2: save(&format!("{p}_mlp_w2"), &layer.mlp_w2)?,
                mlp_b2: save_vec(&format!("{p}_mlp_b2"), &layer.mlp_b2)?,
            });
        }
        let manifest = WeightsManifest {
            format: WEIGHTS_FORMAT.to_string(),
            config: self.config,
            patch_embed: save("patch_embed", &self.patch_embed)?,
            pos_embed: save("pos_embed", &self.pos_embed)?,
            layers,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, VitError> {
        let dir = dir.as_ref();
        let manifest: WeightsManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != WEIGHTS_FORMAT {
            return Err(VitError::Manifest(format!("unknown format '{}'", manifest.format)));
        }
        let load = |file: &str| -> Result<Matrix, VitError> {
            let t = npy::load_tensor(dir.join(file))?;
            Matrix::from_tensor(&t).ok_or_else(|| VitError::Manifest(format!("{file}: expected a 1-D or 2-D tensor")))
        };
        let load_vec = |file: &str| load(file).map(Matrix::into_vec);
        let layers = manifest
            .layers
            .iter()
            .map(|l| {
                Ok(LayerWeights {
                    w_q: load(&l.w_q)?,
                    w_k: load(&l.w_k)?,
                    w_v: load(&l.w_v)?,
                    w_o: load(&l.w_o)?,
                    mlp_w1: load(&l.mlp_w1)?,
                    mlp_b1: load_vec(&l.mlp_b1)?,
                    mlp_w2: load(&l.mlp_w2)?,
                    mlp_b2: load_vec(&l.mlp_b2)?,
                })
            })
            .collect::<Result<Vec<_>, VitError>>()?;
        let weights = Self {
            config: manifest.config,
            patch_embed: load(&manifest.patch_embed)?,
            pos_embed: load(&manifest.pos_embed)?,
            layers,
        };
        weights.validate()?;
        Ok(weights)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    format: String,
    config: VitConfig,
    patch_embed: String,
    pos_embed: String,
    layers: Vec<LayerManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    w_q: String,
    w_k: String,
    w_v: String,
    w_o: String,
    mlp_w1: String,
    mlp_b1: String,
    mlp_w2: String,
    mlp_b2: String,
}

/// One row per token, patches in row-major grid order. With a class token
/// an all-zero row is prepended.
pub fn patchify(image: &GrayImage, config: &VitConfig) -> Result<Matrix, VitError> {
    let side = config.input_size();
    if image.width() != side || image.height() != side {
        return Err(VitError::ImageSize {
            width: image.width(),
            height: image.height(),
            expected: side,
        });
    }
    let p = config.patch_size;
    let cls = usize::from(config.use_class_token);
    let mut out = Matrix::zeros(config.num_tokens(), config.patch_dim());
    for j in 0..config.num_patches() {
        let (gy, gx) = (j / config.grid_n, j % config.grid_n);
        let row = out.row_mut(j + cls);
        for py in 0..p {
            for px in 0..p {
                row[py * p + px] = f64::from(image.get(gx * p + px, gy * p + py)) / 255.0;
            }
        }
    }
    Ok(out)
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn check_tokens(z: &Matrix, config: &VitConfig) -> Result<(), VitError> {
    if z.cols() != config.channels || z.rows() == 0 {
        return Err(VitError::Shape {
            what: "token matrix Z".into(),
            expected: (z.rows().max(1), config.channels),
            actual: z.shape(),
        });
    }
    Ok(())
}

/// Per-head attention and the concatenated self-attention output.
///
/// Returns `(A, SA)` with `A` holding `m` matrices of shape `T × T` and
/// `SA` of shape `T × (m·d)`.
pub fn attention_forward(
    z: &Matrix,
    layer: &LayerWeights,
    config: &VitConfig,
) -> Result<(Vec<Matrix>, Matrix), VitError> {
    config.validate()?;
    check_tokens(z, config)?;
    layer.check(config, 0)?;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let q = z.matmul(&layer.w_q);
    let k = z.matmul(&layer.w_k);
    let v = z.matmul(&layer.w_v);

    let per_head: Vec<(Matrix, Matrix)> = (0..config.heads)
        .into_par_iter()
        .map(|i| {
            let (lo, hi) = (i * d, (i + 1) * d);
            let (qi, ki, vi) = (q.columns(lo, hi), k.columns(lo, hi), v.columns(lo, hi));
            let mut a = qi.matmul_transposed(&ki).map(|s| s * scale);
            for r in 0..a.rows() {
                softmax_in_place(a.row_mut(r));
            }
            let sa = a.matmul(&vi);
            (a, sa)
        })
        .collect();

    let t = z.rows();
    let mut concat = Matrix::zeros(t, config.heads * d);
    for (i, (_, sa)) in per_head.iter().enumerate() {
        for r in 0..t {
            concat.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(sa.row(r));
        }
    }
    Ok((per_head.into_iter().map(|(a, _)| a).collect(), concat))
}

/// One encoder block; returns the next token matrix and this block's attention.
pub fn msa_block(
    z: &Matrix,
    layer: &LayerWeights,
    config: &VitConfig,
) -> Result<(Matrix, Vec<Matrix>), VitError> {
    let (attention, sa) = attention_forward(z, layer, config)?;
    let msa = sa.add(&sa.matmul(&layer.w_o));
    let mut hidden = msa.matmul(&layer.mlp_w1);
    hidden.add_row_vector(&layer.mlp_b1);
    let hidden = hidden.map(|v| v.max(0.0));
    let mut mlp = hidden.matmul(&layer.mlp_w2);
    mlp.add_row_vector(&layer.mlp_b2);
    Ok((msa.add(&mlp), attention))
}

/// Initial tokens: patch embedding plus positional embedding.
pub fn embed(image: &GrayImage, weights: &VitWeights) -> Result<Matrix, VitError> {
    let patches = patchify(image, &weights.config)?;
    Ok(patches.matmul(&weights.patch_embed).add(&weights.pos_embed))
}

/// Runs all blocks and collects every layer's attention.
pub fn vit_forward(image: &GrayImage, weights: &VitWeights) -> Result<AttentionStack, crate::Error> {
    let config = &weights.config;
    let mut z = embed(image, weights)?;
    let mut layers = Vec::with_capacity(weights.layers.len());
    for (idx, layer) in weights.layers.iter().enumerate() {
        let (next, attention) = msa_block(&z, layer, config)?;
        if !next.is_finite() {
            return Err(VitError::NonFinite(idx).into());
        }
        layers.push(LayerAttention::new(attention, config.grid_n));
        z = next;
    }
    Ok(AttentionStack::new(layers, config.use_class_token)?)
}

impl AttentionModel for VitWeights {
    fn input_size(&self) -> (usize, usize) {
        let side = self.config.input_size();
        (side, side)
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn attention(&self, image: &GrayImage) -> Result<AttentionStack, crate::Error> {
        vit_forward(image, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(grid_n: usize, channels: usize, heads: usize, layers: usize) -> VitConfig {
        VitConfig {
            patch_size: 4,
            grid_n,
            channels,
            heads,
            layers,
            use_class_token: false,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let c = cfg(2, 8, 2, 2);
        assert_eq!(init_model(&c, 1).unwrap(), init_model(&c, 1).unwrap());
        assert_ne!(init_model(&c, 1).unwrap(), init_model(&c, 2).unwrap());
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let err = init_model(&cfg(2, 8, 3, 1), 0).unwrap_err();
        assert!(err.to_string().contains("C not divisible by m"), "{err}");
        assert!(init_model(&cfg(0, 8, 2, 1), 0).is_err());
    }

    #[test]
    fn patchify_shapes_and_class_token() {
        let mut c = cfg(2, 4, 1, 1);
        c.patch_size = 16;
        let img = GrayImage::filled(32, 32, 51);
        let p = patchify(&img, &c).unwrap();
        assert_eq!(p.shape(), (4, 256));
        assert!(p.iter_rows().all(|r| r == p.row(0)));
        assert!((p.get(0, 0) - 0.2).abs() < 1e-15);

        c.use_class_token = true;
        let p = patchify(&img, &c).unwrap();
        assert_eq!(p.shape(), (5, 256));
        assert!(p.row(0).iter().all(|&v| v == 0.0));
        assert!(patchify(&GrayImage::filled(32, 16, 0), &c).is_err());
    }

    #[test]
    fn patchify_row_major_order() {
        let c = VitConfig {
            patch_size: 1,
            grid_n: 2,
            channels: 1,
            heads: 1,
            layers: 1,
            use_class_token: false,
        };
        let img = GrayImage::new(2, 2, vec![0, 51, 102, 153]).unwrap();
        let p = patchify(&img, &c).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.2, 0.4, 0.6]);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let c = cfg(2, 4, 2, 1);
        let mut w = init_model(&c, 3).unwrap();
        w.zero_query_key();
        let z = Matrix::from_fn(4, 4, |r, k| (r * 3 + k) as f64 * 0.1);
        let (a, _) = attention_forward(&z, &w.layers[0], &c).unwrap();
        for head in &a {
            assert!(head.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let c = cfg(1, 4, 2, 1);
        let w = init_model(&c, 9).unwrap();
        let z = Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let (a, sa) = attention_forward(&z, &w.layers[0], &c).unwrap();
        assert!(a.iter().all(|h| h.as_slice() == [1.0]));
        // with one token, SA is just V
        let v = z.matmul(&w.layers[0].w_v);
        for (x, y) in sa.as_slice().iter().zip(v.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let c = cfg(2, 4, 2, 1);
        let w = VitWeights::zeros(&c).unwrap();
        let z = Matrix::from_fn(4, 4, |r, k| (r + k) as f64);
        let (next, a) = msa_block(&z, &w.layers[0], &c).unwrap();
        assert!(next.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn scalar_block_by_hand() {
        // C = m = d = 1, T = 1: A = [[1]], SA = z·v, MSA = SA(1 + o),
        // Z' = MSA + max(0, MSA·w1 + b1)·w2 + b2 (hidden width 4)
        let c = cfg(1, 1, 1, 1);
        let mut w = VitWeights::zeros(&c).unwrap();
        let l = &mut w.layers[0];
        l.w_q = Matrix::from_vec(1, 1, vec![0.7]);
        l.w_k = Matrix::from_vec(1, 1, vec![-0.4]);
        l.w_v = Matrix::from_vec(1, 1, vec![2.0]);
        l.w_o = Matrix::from_vec(1, 1, vec![0.5]);
        l.mlp_w1 = Matrix::from_vec(1, 4, vec![1.0, -1.0, 0.5, 0.0]);
        l.mlp_b1 = vec![0.0, 0.0, -1.0, 0.25];
        l.mlp_w2 = Matrix::from_vec(4, 1, vec![1.0, 3.0, 2.0, 4.0]);
        l.mlp_b2 = vec![0.125];
        let z = Matrix::from_vec(1, 1, vec![1.5]);
        let (next, a) = msa_block(&z, &w.layers[0], &c).unwrap();
        assert_eq!(a[0].as_slice(), &[1.0]);
        // SA = 3, MSA = 4.5; hidden = [4.5, 0, 1.25, 0.25]; MLP = 4.5 + 2.5 + 1 + 0.125 = 8.125
        assert!((next.get(0, 0) - 12.625).abs() < 1e-12, "{}", next.get(0, 0));
    }

    #[test]
    fn save_load_round_trip() {
        let mut c = cfg(2, 4, 2, 2);
        c.use_class_token = true;
        let w = init_model(&c, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        assert_eq!(VitWeights::load(dir.path()).unwrap(), w);
        let cfg_json: VitConfig =
            serde_json::from_slice(&fs::read(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg_json, c);
    }

    #[test]
    fn config_json_keys() {
        let c = cfg(8, 16, 2, 4);
        let v: serde_json::Value = serde_json::to_value(c).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["channels", "grid_n", "heads", "layers", "patch_size", "use_class_token"]);
    }
}
