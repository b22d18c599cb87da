//! Shared domain types: region labels, labelled points, clouds, slices and
//! region masks.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Anatomical region of a sampled point. The integer codes are part of the
/// on-disk formats and fix the one-hot ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum RegionLabel {
    Hippocampus = 0,
    Ventricles = 1,
    Surface = 2,
    Interior = 3,
}

impl RegionLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [RegionLabel; 4] = [
        RegionLabel::Hippocampus,
        RegionLabel::Ventricles,
        RegionLabel::Surface,
        RegionLabel::Interior,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RegionLabel::Hippocampus),
            1 => Some(RegionLabel::Ventricles),
            2 => Some(RegionLabel::Surface),
            3 => Some(RegionLabel::Interior),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionLabel::Hippocampus => "hippocampus",
            RegionLabel::Ventricles => "ventricles",
            RegionLabel::Surface => "surface",
            RegionLabel::Interior => "interior",
        }
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Diagnosis class. `Ad` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Cn = 0,
    Ad = 1,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ClassLabel::Cn),
            1 => Some(ClassLabel::Ad),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Cn => "CN",
            ClassLabel::Ad => "AD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "CN" | "cn" => Some(ClassLabel::Cn),
            "AD" | "ad" => Some(ClassLabel::Ad),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sampled point: normalized position, normalized intensity, region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: f32,
    pub y: f32,
    pub intensity: f32,
    pub region: RegionLabel,
}

/// Fixed-size collection of labelled points for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LabeledPoint>,
    pub class_label: Option<ClassLabel>,
    pub source_id: String,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of points carrying each region label, in label order.
    pub fn region_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for p in &self.points {
            counts[p.region.index()] += 1;
        }
        counts
    }
}

/// Cloud sizes produced by the samplers.
pub const SUPPORTED_SIZES: [usize; 3] = [2048, 4096, 8192];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Size { expected: usize, actual: usize },
    XRange,
    YRange,
    IntensityRange,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Size { expected, actual } => {
                write!(f, "size: expected {expected} points, found {actual}")
            }
            Rule::XRange => f.write_str("x must be finite and within [-1, 1]"),
            Rule::YRange => f.write_str("y must be finite and within [-1, 1]"),
            Rule::IntensityRange => f.write_str("intensity must be within [0, 1]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending point, `None` for cloud-level rules.
    pub index: Option<usize>,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the cloud size and every per-point invariant.
pub fn validate_cloud(cloud: &PointCloud, expected_n: usize) -> Validation {
    let mut violations = Vec::new();
    if cloud.points.len() != expected_n {
        violations.push(Violation {
            index: None,
            rule: Rule::Size { expected: expected_n, actual: cloud.points.len() },
        });
    }
    for (i, p) in cloud.points.iter().enumerate() {
        for rule in point_violations(p) {
            violations.push(Violation { index: Some(i), rule });
        }
    }
    Validation { violations }
}

pub(crate) fn point_violations(p: &LabeledPoint) -> Vec<Rule> {
    let mut out = Vec::new();
    if !(p.x.is_finite() && (-1.0..=1.0).contains(&p.x)) {
        out.push(Rule::XRange);
    }
    if !(p.y.is_finite() && (-1.0..=1.0).contains(&p.y)) {
        out.push(Rule::YRange);
    }
    if !(p.intensity.is_finite() && (0.0..=1.0).contains(&p.intensity)) {
        out.push(Rule::IntensityRange);
    }
    out
}

/// Map a pixel-space coordinate on an axis of `extent` pixels into [-1, 1],
/// pixel centers included (`p = 0` is the center of the first pixel).
pub fn normalize_axis(p: f64, extent: usize) -> f64 {
    2.0 * (p + 0.5) / extent as f64 - 1.0
}

/// Inverse of [`normalize_axis`].
pub fn denormalize_axis(v: f64, extent: usize) -> f64 {
    (v + 1.0) * extent as f64 / 2.0 - 0.5
}

/// Normalize pixel coordinates `(px, py)` into [-1, 1]², preserving order.
pub fn normalize_coordinates(
    raw_points: &[(f64, f64)],
    width: usize,
    height: usize,
) -> Result<Vec<(f64, f64)>> {
    if width == 0 || height == 0 {
        return Err(Error::Degenerate(format!("image extent {width}x{height}")));
    }
    Ok(raw_points
        .iter()
        .map(|&(px, py)| (normalize_axis(px, width), normalize_axis(py, height)))
        .collect())
}

/// Pixel index containing a normalized coordinate, clamped to the grid.
pub fn pixel_index(v: f32, extent: usize) -> usize {
    let u = ((v as f64 + 1.0) * extent as f64 / 2.0).floor();
    if u < 0.0 {
        0
    } else {
        (u as usize).min(extent - 1)
    }
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn minus(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_shape(other), "mask shape mismatch");
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !(a && b))
    }

    /// Set pixels as `(col, row)` in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if self.get(col, row) {
                    out.push((col, row));
                }
            }
        }
        out
    }
}

/// Single-channel image, row-major, values in [0, 1] after preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl SliceImage {
    pub const MIN_EXTENT: usize = 32;

    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < Self::MIN_EXTENT || height < Self::MIN_EXTENT {
            return Err(Error::Degenerate(format!(
                "slice {width}x{height} is below the {min}x{min} minimum",
                min = Self::MIN_EXTENT
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} pixels for a {width}x{height} slice",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice pixels".into()));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Per-region masks plus the whole-brain mask. Regions partition the brain.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub brain: Mask,
    /// Indexed by [`RegionLabel::index`].
    pub regions: [Mask; 4],
}

impl RegionMasks {
    /// Build masks from the brain, hippocampus, ventricle and surface-band
    /// masks. Every region is clipped to the brain, ventricles lose any
    /// pixel claimed by the hippocampus, and the interior is whatever brain
    /// remains.
    pub fn from_parts(brain: Mask, hippocampus: &Mask, ventricles: &Mask, surface: &Mask) -> Self {
        let surface = surface.and(&brain);
        let hippocampus = hippocampus.and(&brain).minus(&surface);
        let ventricles = ventricles.and(&brain).minus(&surface).minus(&hippocampus);
        let interior = brain.minus(&hippocampus.or(&ventricles).or(&surface));
        Self { brain, regions: [hippocampus, ventricles, surface, interior] }
    }

    pub fn region(&self, label: RegionLabel) -> &Mask {
        &self.regions[label.index()]
    }

    pub fn width(&self) -> usize {
        self.brain.width
    }

    pub fn height(&self) -> usize {
        self.brain.height
    }

    /// Region containing a pixel, `None` outside the brain.
    pub fn label_at(&self, col: usize, row: usize) -> Option<RegionLabel> {
        RegionLabel::ALL.into_iter().find(|l| self.regions[l.index()].get(col, row))
    }

    /// Broken invariants, empty when the masks are consistent.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for label in RegionLabel::ALL {
            let m = self.region(label);
            if !m.same_shape(&self.brain) {
                problems.push(format!("{label} mask shape differs from brain mask"));
                return problems;
            }
            if !m.is_subset_of(&self.brain) {
                problems.push(format!("{label} mask is not a subset of the brain mask"));
            }
        }
        if !self.region(RegionLabel::Hippocampus).is_disjoint(self.region(RegionLabel::Ventricles)) {
            problems.push("hippocampus and ventricle masks overlap".into());
        }
        let expected_interior = self.brain.minus(
            &self
                .region(RegionLabel::Hippocampus)
                .or(self.region(RegionLabel::Ventricles))
                .or(self.region(RegionLabel::Surface)),
        );
        if &expected_interior != self.region(RegionLabel::Interior) {
            problems.push("interior mask is not brain minus the other regions".into());
        }
        problems
    }
}
