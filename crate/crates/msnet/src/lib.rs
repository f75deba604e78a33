//! Training and evaluation engine for segmentation on heterogeneous
//! multi-site data.
//!
//! The crate builds everything from first principles on a small
//! reverse-mode autodiff engine over dense `f64` tensors: an
//! encoder-decoder segmentation backbone whose normalization layers keep
//! separate affine parameters and running statistics per data site, a
//! set of per-site auxiliary decoder branches that supply hard-label
//! knowledge-transfer targets for the shared network, the alternating
//! training loop that ties them together, and the metrics/statistics
//! layer used to compare the `joint`, `separate`, `dsbn` and `msnet`
//! training strategies on synthetic multi-site corpora.

pub mod engine;
pub mod loss;
pub mod model;
pub mod norm;
pub mod verify;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
