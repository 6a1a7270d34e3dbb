//! End-to-end extraction over arbitrary image sizes and the on-disk layout
//! of extraction results.
//!
//! Images larger than the model input are covered with overlapping windows;
//! each layer's entropy grids are merged on that layer's own cell grid by
//! averaging overlaps.
//!
//! Directory layout written by [`write_extraction`]:
//!
//! ```text
//! extract.json              manifest (ExtractManifest)
//! entropy_l00.npy ...       (grid_h, grid_w) f32 per layer
//! attention_w0_l00.npy ...  (heads, rows, cols) f32, optional
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionModel, AttentionStack, LayerAttention};
use crate::entropy::{self, EntropyError, EntropyMap, ExtractOptions, LayerAggregation, ScoreMap};
use crate::linalg::Matrix;
use crate::npy;
use crate::tensor::{BinaryMask, GrayImage};
use crate::Error;

const MANIFEST: &str = "extract.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtractConfig {
    /// Window stride in pixels; defaults to half the model input.
    pub stride: Option<usize>,
    pub options: ExtractOptions,
    /// Keep every window's attention stack in the result.
    pub keep_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub has_class_token: bool,
    pub renormalize: bool,
    /// Top-left pixel offset of every window.
    pub windows: Vec<(usize, usize)>,
    /// One merged map per layer.
    pub maps: Vec<EntropyMap>,
    /// Per-window stacks, only when requested.
    pub stacks: Vec<AttentionStack>,
}

fn config_error(msg: String) -> Error {
    Error::Config(msg)
}

/// Runs `model` over `image` (sliding windows when the sizes differ) and
/// returns one merged entropy map per layer.
pub fn extract<M: AttentionModel + ?Sized>(model: &M, image: &GrayImage, config: &ExtractConfig) -> Result<Extraction, Error> {
    let (win_w, win_h) = model.input_size();
    let patch = model.patch_size();
    let (img_w, img_h) = (image.width(), image.height());
    if img_w % patch != 0 || img_h % patch != 0 {
        return Err(config_error(format!(
            "image {img_w}x{img_h} is not a multiple of the patch size {patch}"
        )));
    }
    let stride = config.stride.unwrap_or(win_w.min(win_h) / 2).max(1);
    if stride > win_w.min(win_h) {
        return Err(config_error(format!("stride {stride} exceeds the {win_w}x{win_h} window")));
    }
    if !stride.is_multiple_of(patch) {
        return Err(config_error(format!("stride {stride} is not a multiple of the patch size {patch}")));
    }
    let xs = entropy::window_offsets(img_w, win_w, stride)?;
    let ys = entropy::window_offsets(img_h, win_h, stride)?;
    let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    if windows.len() > 1 {
        log::info!("sliding-window inference: {} windows of {win_w}x{win_h}", windows.len());
    }

    let mut per_window: Vec<Vec<EntropyMap>> = Vec::with_capacity(windows.len());
    let mut stacks = Vec::new();
    let mut has_class_token = false;
    for &(x, y) in &windows {
        let crop = image.crop(x, y, win_w, win_h);
        let stack = model.attention(&crop)?;
        has_class_token = stack.has_class_token();
        per_window.push(entropy::stack_entropy_maps(&stack, config.options)?);
        if config.keep_attention {
            stacks.push(stack);
        }
    }

    let num_layers = per_window[0].len();
    let mut maps = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let first = &per_window[0][layer];
        if win_w % first.width() != 0 || win_h % first.height() != 0 {
            return Err(config_error(format!(
                "layer {layer}: {}x{} grid does not tile the {win_w}x{win_h} input",
                first.width(),
                first.height()
            )));
        }
        let (cell_w, cell_h) = (win_w / first.width(), win_h / first.height());
        let mut placed = Vec::with_capacity(windows.len());
        for (w, &(x, y)) in per_window.iter().zip(&windows) {
            if x % cell_w != 0 || y % cell_h != 0 {
                return Err(config_error(format!(
                    "layer {layer}: window offset ({x}, {y}) is not aligned to {cell_w}x{cell_h} cells"
                )));
            }
            placed.push((w[layer].clone(), x / cell_w, y / cell_h));
        }
        maps.push(entropy::merge_windows(&placed, img_w / cell_w, img_h / cell_h)?);
    }

    Ok(Extraction {
        image_width: img_w,
        image_height: img_h,
        patch_size: patch,
        has_class_token,
        renormalize: config.options.renormalize,
        windows,
        maps,
        stacks,
    })
}

impl Extraction {
    /// Pixel scores for the whole image; `common` defaults to the finest grid.
    pub fn score_map(&self, aggregation: &LayerAggregation, common: Option<(usize, usize)>) -> Result<ScoreMap, EntropyError> {
        entropy::score_map(&self.maps, aggregation, common, self.image_width, self.image_height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub entropy: String,
    /// Key-token grid side and reduction ratio of the dumped attention.
    pub grid_n: Option<usize>,
    pub reduction: Option<usize>,
    /// One file per window, in window order.
    #[serde(default)]
    pub attention: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractManifest {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub has_class_token: bool,
    pub renormalize: bool,
    pub windows: Vec<(usize, usize)>,
    pub layers: Vec<LayerEntry>,
}

pub fn write_extraction(extraction: &Extraction, dir: impl AsRef<Path>) -> Result<ExtractManifest, Error> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(extraction.maps.len());
    for (index, map) in extraction.maps.iter().enumerate() {
        let file = format!("entropy_l{index:02}.npy");
        npy::save_tensor(&map.to_tensor()?, dir.join(&file))?;
        let mut attention = Vec::new();
        for (w, stack) in extraction.stacks.iter().enumerate() {
            let name = format!("attention_w{w}_l{index:02}.npy");
            npy::save_tensor(&stack.layers()[index].to_tensor()?, dir.join(&name))?;
            attention.push(name);
        }
        let layer = extraction.stacks.first().map(|s| &s.layers()[index]);
        layers.push(LayerEntry {
            index,
            grid_w: map.width(),
            grid_h: map.height(),
            entropy: file,
            grid_n: layer.map(LayerAttention::grid_n),
            reduction: layer.map(LayerAttention::reduction),
            attention,
        });
    }
    let manifest = ExtractManifest {
        image_width: extraction.image_width,
        image_height: extraction.image_height,
        patch_size: extraction.patch_size,
        has_class_token: extraction.has_class_token,
        renormalize: extraction.renormalize,
        windows: extraction.windows.clone(),
        layers,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<ExtractManifest, Error> {
    Ok(serde_json::from_slice(&fs::read(dir.as_ref().join(MANIFEST))?)?)
}

/// Loads the per-layer entropy maps of an extraction directory.
pub fn read_entropy_dir(dir: impl AsRef<Path>) -> Result<(ExtractManifest, Vec<EntropyMap>), Error> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let maps = manifest
        .layers
        .iter()
        .map(|l| {
            let map = EntropyMap::from_tensor(&npy::load_tensor(dir.join(&l.entropy))?)?;
            if (map.width(), map.height()) != (l.grid_w, l.grid_h) {
                return Err(config_error(format!("{}: shape disagrees with manifest", l.entropy)));
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    if maps.is_empty() {
        return Err(config_error("extraction directory lists no layers".into()));
    }
    Ok((manifest, maps))
}

/// Rebuilds the attention stack of one window from its dumps.
pub fn read_attention_dir(dir: impl AsRef<Path>, window: usize) -> Result<AttentionStack, Error> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            let file = l
                .attention
                .get(window)
                .ok_or_else(|| config_error(format!("layer {}: no attention dump for window {window}", l.index)))?;
            let grid_n = l.grid_n.ok_or_else(|| config_error(format!("layer {}: grid_n missing", l.index)))?;
            let tensor = npy::load_tensor(dir.join(file))?;
            Ok(LayerAttention::from_tensor(&tensor, grid_n, l.reduction.unwrap_or(1))?)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(AttentionStack::new(layers, manifest.has_class_token)?)
}

/// Per-pixel feature rows (one column per layer) for every non-ignore pixel
/// of `mask`, with matching object labels.
pub fn pixel_features(maps: &[EntropyMap], mask: &BinaryMask) -> Result<(Matrix, Vec<bool>), EntropyError> {
    let (w, h) = (mask.width(), mask.height());
    let upsampled = maps
        .iter()
        .map(|m| entropy::resample_bilinear(m, w, h))
        .collect::<Result<Vec<_>, _>>()?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for idx in 0..w * h {
        if mask.is_ignore(idx) {
            continue;
        }
        features.extend(upsampled.iter().map(|m| m.values()[idx]));
        labels.push(mask.is_object(idx));
    }
    Ok((Matrix::from_vec(labels.len(), maps.len(), features), labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{init_model, VitConfig};

    fn model(grid_n: usize) -> crate::vit::VitWeights {
        let cfg = VitConfig {
            patch_size: 4,
            grid_n,
            channels: 8,
            heads: 2,
            layers: 2,
            use_class_token: false,
        };
        init_model(&cfg, 11).unwrap()
    }

    #[test]
    fn single_window_matches_direct_forward() {
        let m = model(4);
        let img = GrayImage::new(16, 16, (0..256).map(|i| (i * 7 % 251) as u8).collect()).unwrap();
        let ex = extract(&m, &img, &ExtractConfig::default()).unwrap();
        let direct = entropy::stack_entropy_maps(&m.attention(&img).unwrap(), ExtractOptions::default()).unwrap();
        assert_eq!(ex.windows, vec![(0, 0)]);
        assert_eq!(ex.maps, direct);
    }

    #[test]
    fn rectangular_image_is_windowed() {
        let m = model(4);
        let img = GrayImage::new(32, 16, (0..512).map(|i| (i * 13 % 256) as u8).collect()).unwrap();
        let ex = extract(&m, &img, &ExtractConfig::default()).unwrap();
        assert_eq!(ex.windows, vec![(0, 0), (8, 0), (16, 0)]);
        assert_eq!((ex.maps[0].width(), ex.maps[0].height()), (8, 4));
        // leftmost column is covered by the first window only
        let first = entropy::stack_entropy_maps(&m.attention(&img.crop(0, 0, 16, 16)).unwrap(), ExtractOptions::default()).unwrap();
        assert_eq!(ex.maps[1].get(0, 2), first[1].get(0, 2));
    }

    #[test]
    fn rejects_unaligned_images() {
        let m = model(4);
        assert!(extract(&m, &GrayImage::filled(18, 16, 0), &ExtractConfig::default()).is_err());
        assert!(extract(&m, &GrayImage::filled(8, 8, 0), &ExtractConfig::default()).is_err());
    }

    #[test]
    fn write_and_read_back() {
        let m = model(4);
        let img = GrayImage::filled(16, 16, 77);
        let cfg = ExtractConfig {
            keep_attention: true,
            ..Default::default()
        };
        let ex = extract(&m, &img, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_extraction(&ex, dir.path()).unwrap();
        let (manifest, maps) = read_entropy_dir(dir.path()).unwrap();
        assert_eq!(manifest.layers.len(), 2);
        for (a, b) in maps.iter().zip(&ex.maps) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        let stack = read_attention_dir(dir.path(), 0).unwrap();
        assert_eq!(stack.num_layers(), 2);
        assert!(read_attention_dir(dir.path(), 1).is_err());
    }

    #[test]
    fn pixel_features_skip_ignore() {
        let maps = vec![EntropyMap::constant(1, 1, 2.0).unwrap(), EntropyMap::constant(1, 1, 3.0).unwrap()];
        let mask = BinaryMask::new(3, 1, vec![1, 255, 0]).unwrap();
        let (x, y) = pixel_features(&maps, &mask).unwrap();
        assert_eq!(x.shape(), (2, 2));
        assert_eq!(x.as_slice(), &[2.0, 3.0, 2.0, 3.0]);
        assert_eq!(y, vec![true, false]);
    }
}
