//! Attention-entropy maps from vision transformers.
//!
//! The crate runs a small deterministic ViT (or any [`AttentionModel`]) over a
//! grayscale image, turns each layer's attention rows into Shannon-entropy maps,
//! picks or weights the layers that separate objects from background, and scores
//! the result with pixel-level and segment-level metrics.

pub mod attention;
pub mod entropy;
pub mod eval;
pub mod linalg;
pub mod npy;
pub mod pgm;
pub mod pipeline;
pub mod selection;
pub mod synthetic;
pub mod tensor;
pub mod vit;
pub mod viz;

pub use attention::{AttentionModel, AttentionStack, LayerAttention};
pub use entropy::{EntropyMap, ExtractOptions, LayerAggregation, ScoreMap};
pub use eval::{evaluate, EvalConfig, MetricsReport, ScoreNormalization};
pub use linalg::Matrix;
pub use pipeline::{extract, ExtractConfig, Extraction};
pub use selection::{auto_select, fit_layer_weights, AutoSelectOptions, FitOptions, SelectionReport};
pub use tensor::{BinaryMask, GrayImage, MaskLabel, Tensor};
pub use vit::{init_model, vit_forward, VitConfig, VitWeights};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Npy(#[from] npy::NpyError),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
    #[error(transparent)]
    Attention(#[from] attention::AttentionError),
    #[error(transparent)]
    Vit(#[from] vit::VitError),
    #[error(transparent)]
    Entropy(#[from] entropy::EntropyError),
    #[error(transparent)]
    Selection(#[from] selection::SelectionError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Viz(#[from] viz::VizError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_config(&self) -> bool {
        use entropy::EntropyError as E;
        matches!(
            self,
            Error::Config(_)
                | Error::Vit(vit::VitError::InvalidConfig(..))
                | Error::Selection(selection::SelectionError::InvalidRatio(..))
                | Error::Entropy(
                    E::EmptySubset | E::LayerIndex { .. } | E::WeightCount { .. } | E::WindowTooLarge { .. } | E::NanThreshold
                )
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
