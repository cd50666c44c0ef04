//! Spectral-spatial contrastive clustering (SSCC) for hyperspectral image cubes.
//!
//! The library trains a twin convolutional network whose softmax projection
//! head emits one dimension per cluster, so cluster labels fall out of a
//! single forward pass. Training is self-supervised: every patch is distorted
//! twice by a spectral-spatial augmentation pool and the two views are pulled
//! together by an InfoNCE term while a redundancy-reduction term keeps the
//! cluster columns decorrelated. Everything runs on the CPU at desk scale.
//!
//! Modules follow the pipeline order:
//!
//! * [`cube`] — hyperspectral cube / label map data model and binary file IO
//! * [`pca`] — spectral dimensionality reduction fitted on cube pixels
//! * [`patch`] — per-pixel patch extraction with mirror padding
//! * [`synth`] — deterministic synthetic cube generator for benchmarks
//! * [`augment`] — the augmentation pool and two-view generation
//! * [`network`] — backbone + projection head with exact reverse-mode gradients
//! * [`losses`] — within-cluster InfoNCE and between-cluster decorrelation
//! * [`trainer`] — batch-wise Adam optimization with step learning-rate decay
//! * [`infer`] — online cluster assignment by argmax over label representations
//! * [`metrics`] — Hungarian-matched clustering metrics and the divergence score

pub mod augment;
pub mod cube;
pub mod error;
pub mod infer;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod network;
pub mod patch;
pub mod pca;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use mat::Mat;
