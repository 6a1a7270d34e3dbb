//! Attention stacks with a planted object, for end-to-end checks where the
//! right answer is known by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionModel, AttentionStack, LayerAttention};
use crate::linalg::Matrix;
use crate::tensor::{BinaryMask, GrayImage, MaskLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub grid_n: usize,
    pub patch_size: usize,
    /// Top-left patch of the square object.
    pub object_origin: (usize, usize),
    /// Object side in patches.
    pub object_side: usize,
    pub layers: usize,
    pub heads: usize,
    /// Layers where object rows are near one-hot; every other row is near uniform.
    pub contrast_layers: Vec<usize>,
    /// Mass an object row puts on its own token.
    pub peak: f64,
    /// Relative amplitude of the multiplicative row noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            grid_n: 16,
            patch_size: 16,
            object_origin: (6, 5),
            object_side: 3,
            layers: 6,
            heads: 2,
            contrast_layers: vec![2, 3],
            peak: 0.95,
            noise: 0.2,
            seed: 7,
        }
    }
}

impl PlantSpec {
    pub fn is_object_patch(&self, px: usize, py: usize) -> bool {
        let (ox, oy) = self.object_origin;
        (ox..ox + self.object_side).contains(&px) && (oy..oy + self.object_side).contains(&py)
    }

    pub fn image_side(&self) -> usize {
        self.grid_n * self.patch_size
    }

    /// Pixel mask of the planted object.
    pub fn mask(&self) -> BinaryMask {
        let p = self.patch_size;
        BinaryMask::from_fn(self.image_side(), self.image_side(), |x, y| {
            if self.is_object_patch(x / p, y / p) {
                MaskLabel::Object
            } else {
                MaskLabel::Background
            }
        })
    }

    pub fn stack(&self) -> Result<AttentionStack, crate::Error> {
        let t = self.grid_n * self.grid_n;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noisy_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let row: Vec<f64> = (0..t).map(|_| 1.0 + self.noise * rng.random_range(-1.0..=1.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        };
        let layers = (0..self.layers)
            .map(|l| {
                let contrast = self.contrast_layers.contains(&l);
                let heads = (0..self.heads)
                    .map(|_| {
                        let mut m = Matrix::zeros(t, t);
                        for r in 0..t {
                            let mut row = noisy_row(&mut rng);
                            if contrast && self.is_object_patch(r % self.grid_n, r / self.grid_n) {
                                row.iter_mut().for_each(|v| *v *= 1.0 - self.peak);
                                row[r] += self.peak;
                            }
                            m.row_mut(r).copy_from_slice(&row);
                        }
                        m
                    })
                    .collect();
                LayerAttention::new(heads, self.grid_n)
            })
            .collect();
        Ok(AttentionStack::new(layers, false)?)
    }
}

/// Returns the same planted stack for every input image.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub spec: PlantSpec,
    stack: AttentionStack,
}

impl PlantedModel {
    pub fn new(spec: PlantSpec) -> Result<Self, crate::Error> {
        let stack = spec.stack()?;
        Ok(Self { spec, stack })
    }
}

impl AttentionModel for PlantedModel {
    fn input_size(&self) -> (usize, usize) {
        (self.spec.image_side(), self.spec.image_side())
    }

    fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    fn attention(&self, _image: &GrayImage) -> Result<AttentionStack, crate::Error> {
        Ok(self.stack.clone())
    }
}
