//! Synthetic X-ray correspondence toolkit.
//!
//! * [`volume`] and [`phantom`]: attenuation grids and procedural phantoms.
//! * [`geometry`], [`projector`]: view geometry and Joseph-method DRRs.
//! * [`correspondence`]: many-to-many patch correspondence ground truth.
//! * [`dataset`]: randomized view-pair datasets with a JSON manifest.
//! * [`matcher`]: a small transformer that predicts correspondences and
//!   classifies view pairs, with hand-written gradients.
//! * [`metrics`]: MSE, precision, recall, AP, and classification scores.

pub mod correspondence;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod image;
pub mod matcher;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod volume;

pub use error::{Error, Result};
