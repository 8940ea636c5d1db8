//! Retrieval-augmented pseudo-labels for camouflaged and salient object segmentation.
//!
//! The pipeline is training-free:
//!
//! 1. Patch-token features and pooled ground-truth mask values from a labelled image set are
//!    collected into a [`store::RawDatabase`] of vector/mask pairs.
//! 2. [`kmeans::cluster`] compresses that database into a [`store::ClusteredStore`]: `K`
//!    centroids, each carrying the mean mask score of its members.
//! 3. For a query image, every patch token retrieves its top-k centroids with an exact
//!    [`search`] scan, and the averaged mask scores form a coarse map that
//!    [`pseudolabel`] upsamples and thresholds.
//! 4. [`prompts`] turns the map into a mask prompt plus positive/negative points for a
//!    promptable segmenter.
//! 5. [`metrics`] scores maps against ground truth (S-measure, E-measure, weighted
//!    F-measure, MAE) and [`bench`] measures clustering and retrieval cost over `K`.
//!
//! Tensors, stores and pseudo-labels cross process boundaries through the fixed binary
//! layouts in [`tensorio`].

pub mod array;
pub mod bench;
pub mod cli;
pub mod error;
mod kernels;
pub mod kmeans;
pub mod metrics;
pub mod pgm;
pub mod prompts;
pub mod pseudolabel;
pub mod search;
pub mod store;
pub mod tensorio;

pub use array::{Map, Matrix};
pub use error::{Error, Result};
pub use search::Metric;
pub use store::{ClusteredStore, RawDatabase, VectorMaskPair};

/// Side length in pixels of one patch token of the feature extractor.
pub const PATCH_SIZE: usize = 14;
