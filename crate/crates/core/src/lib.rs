//! Desk-scale laboratory for multi-vision-encoder fusion transformers.
//!
//! The crate builds a small single-stream multimodal transformer over
//! synthetic scenes, feeds it tokens from three frozen synthetic vision
//! encoders (region / grid / patch), and provides the full analysis
//! toolkit for the captured attention: CLS attention shares, cross-modal
//! attention flow, overlapping-token surplus attention, visual grounding
//! accuracy, and encoder-dropout robustness evaluation.
//!
//! Numeric kernels (`tensor`, `optim`, `geometry`, `analysis`) are generic
//! over the scalar type through [`scalar::Scalar`]; the laboratory itself
//! runs in `f64` via the aliases exported at the crate root.

pub mod analysis;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::CoreError;

/// Dense tensor at laboratory precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Autodiff graph at laboratory precision.
pub type Graph64 = tensor::Graph<f64>;
/// Parameter store at laboratory precision.
pub type ParamSet64 = tensor::ParamSet<f64>;
/// AdamW optimizer at laboratory precision.
pub type AdamW64 = optim::AdamW<f64>;
/// Axis-aligned normalized box at laboratory precision.
pub type BBox64 = geometry::BBox<f64>;
/// Captured attention at laboratory precision (dumps downcast to f32).
pub type AttentionRecord64 = model::AttentionRecord<f64>;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
