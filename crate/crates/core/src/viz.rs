//! Static bundle consumed by the browser attention explorer.
//!
//! ```text
//! manifest.json
//! image.pgm
//! attention_l00.f32 ...   T×T head-averaged patch attention, row-major f32 LE
//! entropy_l00.f32 ...     grid_n×grid_n entropies, row-major f32 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionStack;
use crate::entropy::{self, ExtractOptions};
use crate::pgm;
use crate::tensor::GrayImage;

pub const BUNDLE_FORMAT: &str = "attentropy-viz";
pub const BUNDLE_VERSION: u32 = 1;
/// Attention values are clipped to this range for display.
pub const CLIP_RANGE: [f64; 2] = [0.0, 0.005];
const DTYPE: &str = "float32-le";

#[derive(Debug, Error)]
pub enum VizError {
    #[error("viz bundles need full (unreduced) attention; layer {0} is reduced")]
    Reduced(usize),
    #[error("all layers must share one patch grid; layer {layer} has {found}, expected {expected}")]
    MixedGrids { layer: usize, found: usize, expected: usize },
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error(transparent)]
    Entropy(#[from] entropy::EntropyError),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizManifest {
    pub format: String,
    pub version: u32,
    pub grid_n: usize,
    /// Patch tokens per layer (`grid_n²`); the class token is never exported.
    pub tokens: usize,
    pub layers: usize,
    pub clip: [f64; 2],
    pub dtype: String,
    pub image: ImageRef,
    pub attention: Vec<String>,
    pub entropy: Vec<String>,
}

fn write_f32(path: &Path, values: &[f64]) -> std::io::Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)
}

pub fn export_viz(
    image: &GrayImage,
    stack: &AttentionStack,
    options: ExtractOptions,
    out_dir: impl AsRef<Path>,
) -> Result<VizManifest, VizError> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let grid_n = stack.layers()[0].grid_n();
    let mut attention = Vec::new();
    let mut entropy_files = Vec::new();
    for (idx, layer) in stack.layers().iter().enumerate() {
        if layer.reduction() != 1 {
            return Err(VizError::Reduced(idx));
        }
        if layer.grid_n() != grid_n {
            return Err(VizError::MixedGrids {
                layer: idx,
                found: layer.grid_n(),
                expected: grid_n,
            });
        }
        let mean = entropy::average_heads(layer.heads())?;
        let patch = if stack.has_class_token() {
            entropy::strip_class_token(&mean, options.renormalize)?
        } else {
            mean
        };
        let ent = entropy::row_entropy(&patch)?;
        let a_name = format!("attention_l{idx:02}.f32");
        let e_name = format!("entropy_l{idx:02}.f32");
        write_f32(&out.join(&a_name), patch.as_slice())?;
        write_f32(&out.join(&e_name), &ent)?;
        attention.push(a_name);
        entropy_files.push(e_name);
    }
    pgm::save_image(image, out.join("image.pgm"))?;
    let manifest = VizManifest {
        format: BUNDLE_FORMAT.to_string(),
        version: BUNDLE_VERSION,
        grid_n,
        tokens: grid_n * grid_n,
        layers: stack.num_layers(),
        clip: CLIP_RANGE,
        dtype: DTYPE.to_string(),
        image: ImageRef {
            file: "image.pgm".to_string(),
            width: image.width(),
            height: image.height(),
        },
        attention,
        entropy: entropy_files,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Checks a bundle the way the viewer will read it.
pub fn validate_viz(dir: impl AsRef<Path>) -> Result<VizManifest, VizError> {
    let dir = dir.as_ref();
    let manifest: VizManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let invalid = |msg: String| Err(VizError::Invalid(msg));
    if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
        return invalid(format!("unknown format {} v{}", manifest.format, manifest.version));
    }
    if manifest.dtype != DTYPE {
        return invalid(format!("unsupported dtype {}", manifest.dtype));
    }
    if manifest.clip[0].partial_cmp(&manifest.clip[1]) != Some(std::cmp::Ordering::Less) {
        return invalid(format!("clip range {:?} is empty", manifest.clip));
    }
    if manifest.tokens != manifest.grid_n * manifest.grid_n || manifest.grid_n == 0 {
        return invalid(format!("{} tokens do not match grid_n {}", manifest.tokens, manifest.grid_n));
    }
    if manifest.attention.len() != manifest.layers || manifest.entropy.len() != manifest.layers {
        return invalid(format!("manifest lists {} layers but {} attention / {} entropy files",
            manifest.layers, manifest.attention.len(), manifest.entropy.len()));
    }
    let t = manifest.tokens;
    let check = |file: &str, floats: usize| -> Result<Vec<f32>, VizError> {
        let bytes = fs::read(dir.join(file))?;
        if bytes.len() != floats * 4 {
            return Err(VizError::Invalid(format!("{file}: {} bytes, expected {}", bytes.len(), floats * 4)));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VizError::Invalid(format!("{file}: non-finite value")));
        }
        Ok(values)
    };
    for file in &manifest.attention {
        check(file, t * t)?;
    }
    for file in &manifest.entropy {
        check(file, t)?;
    }
    let image = pgm::load_image(dir.join(&manifest.image.file))?;
    if (image.width(), image.height()) != (manifest.image.width, manifest.image.height) {
        return invalid(format!(
            "image is {}x{}, manifest says {}x{}",
            image.width(),
            image.height(),
            manifest.image.width,
            manifest.image.height
        ));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LayerAttention;
    use crate::linalg::Matrix;

    fn stack(layers: usize, grid_n: usize) -> AttentionStack {
        let t = grid_n * grid_n;
        let uniform = Matrix::from_fn(t, t, |_, _| 1.0 / t as f64);
        AttentionStack::new((0..layers).map(|_| LayerAttention::new(vec![uniform.clone()], grid_n)).collect(), false).unwrap()
    }

    #[test]
    fn bundle_sizes_and_clip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::filled(64, 64, 9);
        let m = export_viz(&img, &stack(2, 4), ExtractOptions::default(), dir.path()).unwrap();
        assert_eq!(m.layers, 2);
        assert_eq!(m.clip, [0.0, 0.005]);
        assert_eq!(fs::metadata(dir.path().join(&m.attention[0])).unwrap().len(), 1024);
        assert_eq!(fs::metadata(dir.path().join(&m.entropy[1])).unwrap().len(), 64);
        assert_eq!(validate_viz(dir.path()).unwrap(), m);
    }

    #[test]
    fn validate_catches_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_viz(&GrayImage::filled(8, 8, 0), &stack(1, 2), ExtractOptions::default(), dir.path()).unwrap();
        fs::write(dir.path().join(&m.attention[0]), [0u8; 10]).unwrap();
        assert!(matches!(validate_viz(dir.path()), Err(VizError::Invalid(_))));
    }
}
