//! Anatomical priority sampling and the ablation samplers.
//!
//! Priority sampling splits a fixed point budget across the four regions
//! with fixed ratios, samples each region from its own candidate pixels
//! (brain-boundary band for the surface, boundary plus body for the
//! ventricles), completes undersized regions with replacement, and finally
//! re-checks that every point lies inside the brain mask.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::boundary_mask;
use crate::rng::{self, tag};
use crate::types::{normalize_axis, pixel_index, LabeledPoint, Mask, PointCloud, RegionLabel, RegionMasks, SliceImage};

pub type Pixel = (usize, usize);

/// Per-region sampling fractions and the target cloud size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingBudget {
    /// Indexed by [`RegionLabel::index`].
    pub ratios: [f64; 4],
    pub total_n: usize,
}

impl SamplingBudget {
    pub const DEFAULT_RATIOS: [f64; 4] = [0.25, 0.25, 0.30, 0.20];
    pub const RATIO_TOLERANCE: f64 = 1e-9;

    pub fn new(ratios: [f64; 4], total_n: usize) -> Result<Self> {
        let b = Self { ratios, total_n };
        b.validate()?;
        Ok(b)
    }

    pub fn with_default_ratios(total_n: usize) -> Self {
        Self { ratios: Self::DEFAULT_RATIOS, total_n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Budget(format!("ratios must be finite and >= 0: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > Self::RATIO_TOLERANCE {
            return Err(Error::Budget(format!("ratios sum to {sum}, expected 1")));
        }
        if self.total_n == 0 {
            return Err(Error::Budget("total_n must be positive".into()));
        }
        Ok(())
    }
}

/// The five sampling strategies compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "aps")]
    Aps,
    #[serde(rename = "uniform-roi")]
    UniformRoi,
    #[serde(rename = "uniform")]
    UniformNoRoi,
    #[serde(rename = "random-roi")]
    RandomRoi,
    #[serde(rename = "random")]
    RandomNoRoi,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Aps,
        SamplerKind::UniformRoi,
        SamplerKind::UniformNoRoi,
        SamplerKind::RandomRoi,
        SamplerKind::RandomNoRoi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Aps => "aps",
            SamplerKind::UniformRoi => "uniform-roi",
            SamplerKind::UniformNoRoi => "uniform",
            SamplerKind::RandomRoi => "random-roi",
            SamplerKind::RandomNoRoi => "random",
        }
    }

    pub fn uses_roi(self) -> bool {
        !matches!(self, SamplerKind::UniformNoRoi | SamplerKind::RandomNoRoi)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown sampler {s:?}")))
    }
}

/// Split `budget.total_n` across regions.
///
/// Regions with no available pixels get nothing and their share is spread
/// over the remaining regions in proportion to their ratios. Each region
/// first gets the floor of its exact quota; leftover points go one at a time
/// to the largest fractional remainders (ties to the lower region code).
pub fn allocate_budget(budget: &SamplingBudget, availability: [usize; 4]) -> Result<[usize; 4]> {
    budget.validate()?;
    if availability.iter().all(|&a| a == 0) {
        return Err(Error::Budget("every region is empty".into()));
    }
    let live: Vec<usize> = (0..4).filter(|&r| availability[r] > 0 && budget.ratios[r] > 0.0).collect();
    let live_sum: f64 = live.iter().map(|&r| budget.ratios[r]).sum();
    if live.is_empty() || live_sum <= 0.0 {
        return Err(Error::Budget("no available region has a positive ratio".into()));
    }
    let n = budget.total_n;
    let mut counts = [0usize; 4];
    let mut remainders = Vec::with_capacity(live.len());
    for &r in &live {
        let exact = budget.ratios[r] / live_sum * n as f64;
        // guard against 39.999999... style round-off
        let floor = (exact + 1e-9).floor();
        counts[r] = floor as usize;
        remainders.push((r, exact - floor));
    }
    let assigned: usize = counts.iter().sum();
    let leftover = n.saturating_sub(assigned);
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(r, _) in remainders.iter().cycle().take(leftover) {
        counts[r] += 1;
    }
    Ok(counts)
}

/// Mask pixels with at least one 4-neighbour outside the mask, row-major.
pub fn extract_boundary(mask: &Mask) -> Result<Vec<Pixel>> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("boundary of an empty mask".into()));
    }
    Ok(boundary_mask(mask).pixels())
}

/// Draw `count` pixels. Without replacement when there are enough
/// candidates; otherwise every candidate once (shuffled) followed by
/// with-replacement draws for the remainder.
pub fn sample_region<R: Rng + ?Sized>(candidates: &[Pixel], count: usize, rng: &mut R) -> Result<Vec<Pixel>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates { region: "region".into(), requested: count });
    }
    let mut pool = candidates.to_vec();
    let take = count.min(pool.len());
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    while pool.len() < count {
        pool.push(candidates[rng.random_range(0..candidates.len())]);
    }
    Ok(pool)
}

fn check_shapes(slice: &SliceImage, masks: &RegionMasks) -> Result<()> {
    if slice.width != masks.width() || slice.height != masks.height() {
        return Err(Error::Shape {
            op: "sampler",
            detail: format!(
                "slice {}x{} vs masks {}x{}",
                slice.width,
                slice.height,
                masks.width(),
                masks.height()
            ),
        });
    }
    Ok(())
}

fn pixel_point(slice: &SliceImage, (col, row): Pixel, region: RegionLabel) -> LabeledPoint {
    LabeledPoint {
        x: normalize_axis(col as f64, slice.width) as f32,
        y: normalize_axis(row as f64, slice.height) as f32,
        intensity: slice.get(col, row),
        region,
    }
}

/// Drop points outside the brain mask, erroring if any had to be dropped.
fn hard_clip(points: Vec<LabeledPoint>, brain: &Mask) -> Result<Vec<LabeledPoint>> {
    let before = points.len();
    let kept: Vec<LabeledPoint> = points
        .into_iter()
        .filter(|p| brain.get(pixel_index(p.x, brain.width), pixel_index(p.y, brain.height)))
        .collect();
    if kept.len() != before {
        return Err(Error::HardClip { count: before - kept.len() });
    }
    Ok(kept)
}

/// Number of points outside the brain mask.
pub fn points_outside(cloud: &PointCloud, brain: &Mask) -> usize {
    cloud
        .points
        .iter()
        .filter(|p| !brain.get(pixel_index(p.x, brain.width), pixel_index(p.y, brain.height)))
        .count()
}

/// Candidate pixels per region for priority sampling.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub hippocampus: Vec<Pixel>,
    pub ventricle_boundary: Vec<Pixel>,
    pub ventricle_body: Vec<Pixel>,
    pub surface: Vec<Pixel>,
    pub interior: Vec<Pixel>,
}

impl Candidates {
    pub fn from_masks(masks: &RegionMasks) -> Self {
        let vent = masks.region(RegionLabel::Ventricles);
        let boundary = boundary_mask(vent);
        Self {
            hippocampus: masks.region(RegionLabel::Hippocampus).pixels(),
            ventricle_boundary: boundary.pixels(),
            ventricle_body: vent.minus(&boundary).pixels(),
            surface: masks.region(RegionLabel::Surface).pixels(),
            interior: masks.region(RegionLabel::Interior).pixels(),
        }
    }

    pub fn availability(&self) -> [usize; 4] {
        [
            self.hippocampus.len(),
            self.ventricle_boundary.len() + self.ventricle_body.len(),
            self.surface.len(),
            self.interior.len(),
        ]
    }
}

/// Priority sampling result with the allocation it honoured.
#[derive(Debug, Clone)]
pub struct ApsOutput {
    pub cloud: PointCloud,
    pub allocation: [usize; 4],
}

pub fn aps_sample(slice: &SliceImage, masks: &RegionMasks, budget: &SamplingBudget, seed: u64) -> Result<PointCloud> {
    aps_sample_detailed(slice, masks, budget, seed).map(|o| o.cloud)
}

pub fn aps_sample_detailed(
    slice: &SliceImage,
    masks: &RegionMasks,
    budget: &SamplingBudget,
    seed: u64,
) -> Result<ApsOutput> {
    check_shapes(slice, masks)?;
    let cand = Candidates::from_masks(masks);
    let allocation = allocate_budget(budget, cand.availability())?;
    let mut points = Vec::with_capacity(budget.total_n);
    for label in RegionLabel::ALL {
        let quota = allocation[label.index()];
        let mut rng = rng::stream(seed, &[tag::SAMPLER, label.index() as u64]);
        let pixels = match label {
            RegionLabel::Hippocampus => sample_region(&cand.hippocampus, quota, &mut rng),
            RegionLabel::Surface => sample_region(&cand.surface, quota, &mut rng),
            RegionLabel::Interior => sample_region(&cand.interior, quota, &mut rng),
            RegionLabel::Ventricles => {
                // boundary stage first, the body completes the quota
                let on_boundary = (quota / 2).min(cand.ventricle_boundary.len());
                let body: &[Pixel] =
                    if cand.ventricle_body.is_empty() { &cand.ventricle_boundary } else { &cand.ventricle_body };
                let mut px = sample_region(&cand.ventricle_boundary, on_boundary, &mut rng)?;
                px.extend(sample_region(body, quota - on_boundary, &mut rng)?);
                Ok(px)
            }
        }
        .map_err(|e| match e {
            Error::EmptyCandidates { requested, .. } => {
                Error::EmptyCandidates { region: label.to_string(), requested }
            }
            other => other,
        })?;
        points.extend(pixels.into_iter().map(|px| pixel_point(slice, px, label)));
    }
    let points = hard_clip(points, &masks.brain)?;
    if points.len() != budget.total_n {
        return Err(Error::Budget(format!("sampled {} points, expected {}", points.len(), budget.total_n)));
    }
    Ok(ApsOutput { cloud: PointCloud { points, class_label: None, source_id: String::new() }, allocation })
}

/// Regular grid over the brain mask: the coarsest square lattice (spacing
/// shrinking by 1% steps from `sqrt(area / n)`) with at least `n` nodes inside
/// the mask, truncated to the first `n` nodes in row-major order. Returned as
/// continuous pixel-space positions.
pub fn brain_grid(brain: &Mask, n: usize) -> Result<Vec<(f64, f64)>> {
    let area = brain.count();
    if area == 0 {
        return Err(Error::Budget("empty brain mask".into()));
    }
    let nodes = |spacing: f64| -> Vec<(f64, f64)> {
        let cols = (brain.width as f64 / spacing).ceil() as usize;
        let rows = (brain.height as f64 / spacing).ceil() as usize;
        let mut out = Vec::new();
        for j in 0..rows {
            let v = (j as f64 + 0.5) * spacing;
            if v >= brain.height as f64 {
                break;
            }
            for i in 0..cols {
                let u = (i as f64 + 0.5) * spacing;
                if u >= brain.width as f64 {
                    break;
                }
                if brain.get(u as usize, v as usize) {
                    out.push((u, v));
                }
            }
        }
        out
    };
    let mut spacing = (area as f64 / n as f64).sqrt();
    loop {
        let mut grid = nodes(spacing);
        if grid.len() >= n {
            grid.truncate(n);
            return Ok(grid);
        }
        spacing *= 0.99;
    }
}

/// One of the five ablation samplers. `Aps` uses the default ratios.
pub fn ablation_sample(
    kind: SamplerKind,
    slice: &SliceImage,
    masks: &RegionMasks,
    total_n: usize,
    seed: u64,
) -> Result<PointCloud> {
    if kind == SamplerKind::Aps {
        return aps_sample(slice, masks, &SamplingBudget::with_default_ratios(total_n), seed);
    }
    check_shapes(slice, masks)?;
    if total_n == 0 {
        return Err(Error::Budget("total_n must be positive".into()));
    }
    let label_for = |col: usize, row: usize| {
        if kind.uses_roi() {
            masks.label_at(col, row).unwrap_or(RegionLabel::Interior)
        } else {
            RegionLabel::Interior
        }
    };
    let points: Vec<LabeledPoint> = match kind {
        SamplerKind::UniformRoi | SamplerKind::UniformNoRoi => brain_grid(&masks.brain, total_n)?
            .into_iter()
            .map(|(u, v)| {
                let (col, row) = (u as usize, v as usize);
                LabeledPoint {
                    x: (2.0 * u / slice.width as f64 - 1.0) as f32,
                    y: (2.0 * v / slice.height as f64 - 1.0) as f32,
                    intensity: slice.get(col, row),
                    region: label_for(col, row),
                }
            })
            .collect(),
        SamplerKind::RandomRoi | SamplerKind::RandomNoRoi => {
            let brain = masks.brain.pixels();
            if brain.is_empty() {
                return Err(Error::Budget("empty brain mask".into()));
            }
            let mut rng = rng::stream(seed, &[tag::SAMPLER, 100 + kind as u64]);
            (0..total_n)
                .map(|_| {
                    let (col, row) = brain[rng.random_range(0..brain.len())];
                    pixel_point(slice, (col, row), label_for(col, row))
                })
                .collect()
        }
        SamplerKind::Aps => unreachable!(),
    };
    let points = hard_clip(points, &masks.brain)?;
    Ok(PointCloud { points, class_label: None, source_id: String::new() })
}
