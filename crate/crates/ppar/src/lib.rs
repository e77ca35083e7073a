//! Training toolkit for prototype-guided semantic segmentation.
//!
//! The library trains small fully-convolutional segmentation models whose
//! intermediate features are pulled toward *fixed text prototypes*: embeddings
//! of class names (optionally enriched with per-class color and texture
//! strings mined from the training data). On top of the alignment terms, a
//! pixel-reweighting scheme derives per-pixel loss weights from the entropy of
//! prototype similarities, down-weighting ambiguous pixels.
//!
//! Subsystems:
//! - [`catalog`]: class id/name table shared by every stage.
//! - [`text`] / [`provider`]: prototype texts, embedding providers, caches.
//! - [`factors`]: per-class color and local-binary-pattern texture mining.
//! - [`centroids`]: masked feature pooling and EMA prototype banks.
//! - [`align`]: KL alignment losses between centroid and prototype
//!   distributions, plus single/multi-layer baseline variants.
//! - [`reweight`]: prototype similarity, entropy, weight maps, weighted CE.
//! - [`nn`] / [`backbone`]: a small conv backbone with feature taps and
//!   handwritten backprop.
//! - [`data`]: folder datasets and the synthetic two-domain generator.
//! - [`train`]: the optimization loop, augmentation, checkpoints, metrics.
//! - [`eval`]: confusion matrices, mIoU, cross-domain reports and figures.
//! - [`config`]: the run configuration document and its section hashing.

pub mod align;
pub mod backbone;
pub mod catalog;
pub mod centroids;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod factors;
pub mod nn;
pub mod provider;
pub mod reweight;
pub mod rng;
pub mod text;
pub mod train;

pub use error::{Error, Result};
