//! Anatomically prioritized point-cloud sampling for 2D brain slices and a
//! lightweight region-token point network that classifies them.
//!
//! Pipeline: [`phantom`] slices → [`preprocess`] → [`sampler`] clouds →
//! [`model`] trained by [`trainer`], measured by [`bench`], persisted with
//! [`io`].

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod io;
pub mod model;
pub mod morphology;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
