//! Slice preprocessing: per-slice min-max intensity normalization and a
//! threshold + closing + largest-component brain mask.

use crate::error::{Error, Result};
use crate::morphology::{close_disk, fill_holes, largest_component};
use crate::types::{Mask, SliceImage};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_CLOSING_RADIUS: usize = 2;

/// Min-max normalize raw values into [0, 1]. A constant image maps to zeros.
pub fn intensity_normalize(width: usize, height: usize, raw: &[f64]) -> Result<SliceImage> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("image contains NaN or infinite pixels".into()));
    }
    let normalized = normalize_values(raw);
    SliceImage::new(width, height, normalized.into_iter().map(|v| v as f32).collect())
}

/// The normalization itself, without the slice-shape checks.
pub fn normalize_values(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Brain mask: pixels at or above `threshold`, closed with a disk of
/// `closing_radius`, reduced to the largest 4-connected component, with
/// enclosed holes filled.
pub fn compute_brain_mask(slice: &SliceImage, threshold: f64, closing_radius: usize) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!("threshold {threshold} not in (0, 1)")));
    }
    let fg = Mask {
        width: slice.width,
        height: slice.height,
        data: slice.pixels.iter().map(|&v| v as f64 >= threshold).collect(),
    };
    if fg.is_empty() {
        return Err(Error::NoBrainFound { threshold });
    }
    let closed = close_disk(&fg, closing_radius);
    let largest = largest_component(&closed).ok_or(Error::NoBrainFound { threshold })?;
    Ok(fill_holes(&largest))
}
