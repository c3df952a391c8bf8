//! Multi-organ segmentation from single-organ datasets.
//!
//! A pair of networks is co-trained on hard pseudo labels and on soft labels
//! produced by the other network's weight-averaged copy, with a region mask
//! that keeps soft supervision off pixels carrying ground-truth annotations.
//! Everything runs on CPU against synthetic abdomen phantoms.

pub mod autodiff;
pub mod error;
pub mod losses;
pub mod mean_teacher;
pub mod metrics;
pub mod phantom;
pub mod segnet;
pub mod trainer;

pub use error::{Error, FormatError, Result};
