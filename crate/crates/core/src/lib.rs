//! Gradient-mean estimators and weighted gradient clustering.
//!
//! The crate measures how noisy mini-batch gradient estimates are along an
//! SGD trajectory and implements a stratified estimator that samples one
//! example per cluster of a size-weighted clustering of per-example
//! gradients. Clustering can run on materialised gradients or on per-layer
//! rank-1 factors that never form the full gradient.

pub mod clustering;
pub mod data_gen;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod harness;
mod io_util;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use dataset::{Dataset, LabelSpace, Provenance};
pub use error::{Error, Result};
pub use io_util::{format_f64, write_atomic};
pub use model::{GradientTable, LayerSpec, LossSpec, ModelSnapshot, PerExampleFactors};
pub use numerics::{Matrix, RngStream};
