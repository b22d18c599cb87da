//! Synthetic 2D brain phantoms with ground-truth region masks.
//!
//! A phantom is an elliptical brain with a sinusoidally perturbed outline, a
//! pair of central ventricle lobes and a pair of medial hippocampal blobs.
//! The class signal lives in those two structures: AD phantoms have larger
//! ventricles and smaller hippocampi than CN phantoms.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::inner_band;
use crate::rng::{self, tag};
use crate::types::{ClassLabel, Mask, RegionLabel, RegionMasks, SliceImage};

/// Mean tissue intensity per region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionIntensities {
    pub hippocampus: f32,
    pub ventricles: f32,
    pub surface: f32,
    pub interior: f32,
}

impl RegionIntensities {
    pub fn mean(&self, label: RegionLabel) -> f32 {
        match label {
            RegionLabel::Hippocampus => self.hippocampus,
            RegionLabel::Ventricles => self.ventricles,
            RegionLabel::Surface => self.surface,
            RegionLabel::Interior => self.interior,
        }
    }
}

impl Default for RegionIntensities {
    fn default() -> Self {
        Self { hippocampus: 0.5, ventricles: 0.2, surface: 0.55, interior: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Ventricle radius multipliers.
    pub ventricle_scale_ad: f64,
    pub ventricle_scale_cn: f64,
    /// Hippocampus area multipliers.
    pub hippocampus_scale_ad: f64,
    pub hippocampus_scale_cn: f64,
    pub noise_sigma: f64,
    pub surface_thickness: usize,
    pub intensities: RegionIntensities,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            ventricle_scale_ad: 1.6,
            ventricle_scale_cn: 1.0,
            hippocampus_scale_ad: 0.6,
            hippocampus_scale_cn: 1.0,
            noise_sigma: 0.05,
            surface_thickness: 2,
            intensities: RegionIntensities::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < SliceImage::MIN_EXTENT {
            return Err(Error::Degenerate(format!(
                "image_size {} is below {}",
                self.image_size,
                SliceImage::MIN_EXTENT
            )));
        }
        let scales = [
            self.ventricle_scale_ad,
            self.ventricle_scale_cn,
            self.hippocampus_scale_ad,
            self.hippocampus_scale_cn,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput("phantom scales must be positive".into()));
        }
        if self.ventricle_scale_ad <= self.ventricle_scale_cn {
            return Err(Error::InvalidInput("AD ventricle scale must exceed CN".into()));
        }
        if self.hippocampus_scale_ad >= self.hippocampus_scale_cn {
            return Err(Error::InvalidInput("AD hippocampus scale must be below CN".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        if self.surface_thickness == 0 {
            return Err(Error::InvalidInput("surface_thickness must be >= 1".into()));
        }
        Ok(())
    }

    fn ventricle_scale(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::Ad => self.ventricle_scale_ad,
            ClassLabel::Cn => self.ventricle_scale_cn,
        }
    }

    fn hippocampus_scale(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::Ad => self.hippocampus_scale_ad,
            ClassLabel::Cn => self.hippocampus_scale_cn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub slice: SliceImage,
    pub masks: RegionMasks,
    pub class: ClassLabel,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    tilt: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.tilt.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        u * u + v * v <= 1.0
    }
}

/// Generate one phantom. Deterministic in `(config.seed, class, sample_index)`.
pub fn generate_phantom(config: &PhantomConfig, class: ClassLabel, sample_index: u64) -> Result<Phantom> {
    config.validate()?;
    let size = config.image_size;
    let s = size as f64;
    let mut rng = rng::stream(config.seed, &[tag::PHANTOM, class.index() as u64, sample_index]);
    let mut jitter = |spread: f64| 1.0 + rng.random_range(-spread..=spread);

    let (cx, cy) = (s / 2.0 * jitter(0.01), s / 2.0 * jitter(0.01));
    let brain_ax = 0.40 * s * jitter(0.03);
    let brain_ay = 0.46 * s * jitter(0.03);
    let mut rng = rng::stream(config.seed, &[tag::PHANTOM, class.index() as u64, sample_index, 1]);
    let lobes = rng.random_range(5..=7) as f64;
    let amp = rng.random_range(0.02..0.04);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp2 = rng.random_range(0.005..0.015);
    let phase2 = rng.random_range(0.0..std::f64::consts::TAU);

    let vs = config.ventricle_scale(class);
    let hs = config.hippocampus_scale(class).sqrt();
    let side = |sign: f64, rng: &mut rng::Stream| -> (Ellipse, Ellipse) {
        let j = |rng: &mut rng::Stream, spread: f64| 1.0 + rng.random_range(-spread..=spread);
        let vent = Ellipse {
            cx: cx + sign * 0.055 * s,
            cy: cy - 0.04 * s,
            ax: 0.045 * s * vs * j(rng, 0.05),
            ay: 0.11 * s * vs * j(rng, 0.05),
            tilt: sign * 0.15 * j(rng, 0.3),
        };
        let hippo = Ellipse {
            cx: cx + sign * 0.20 * s * j(rng, 0.03),
            cy: cy + 0.20 * s * j(rng, 0.03),
            ax: 0.07 * s * hs * j(rng, 0.05),
            ay: 0.04 * s * hs * j(rng, 0.05),
            tilt: -sign * 0.3 * j(rng, 0.3),
        };
        (vent, hippo)
    };
    let (vent_l, hippo_l) = side(-1.0, &mut rng);
    let (vent_r, hippo_r) = side(1.0, &mut rng);

    let brain = Mask::from_fn(size, size, |col, row| {
        let x = col as f64 + 0.5;
        let y = row as f64 + 0.5;
        let dx = (x - cx) / brain_ax;
        let dy = (y - cy) / brain_ay;
        let theta = dy.atan2(dx);
        let radius = 1.0 + amp * (lobes * theta + phase).sin() + amp2 * (3.0 * lobes * theta + phase2).sin();
        (dx * dx + dy * dy).sqrt() <= radius
    });
    let centre = |e: &Ellipse, other: &Ellipse| {
        Mask::from_fn(size, size, |col, row| {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            e.contains(x, y) || other.contains(x, y)
        })
    };
    let ventricles = centre(&vent_l, &vent_r);
    let hippocampus = centre(&hippo_l, &hippo_r);
    let surface = inner_band(&brain, config.surface_thickness);
    let masks = RegionMasks::from_parts(brain, &hippocampus, &ventricles, &surface);

    let mut noise_rng = rng::stream(config.seed, &[tag::PHANTOM, class.index() as u64, sample_index, 2]);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut pixels = vec![0.0f32; size * size];
    for row in 0..size {
        for col in 0..size {
            if let Some(label) = masks.label_at(col, row) {
                let mean = config.intensities.mean(label) as f64;
                let v = if config.noise_sigma > 0.0 { mean + noise.sample(&mut noise_rng) } else { mean };
                pixels[row * size + col] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Phantom { slice: SliceImage::new(size, size, pixels)?, masks, class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub class: ClassLabel,
    pub path: String,
    pub split: Split,
}

impl SampleRecord {
    /// Phantom index encoded in ids of the form `<class>-<index>`.
    pub fn phantom_index(&self) -> Option<u64> {
        self.sample_id.rsplit('-').next()?.parse().ok()
    }
}

pub fn sample_id(class: ClassLabel, index: u64) -> String {
    format!("{}-{index:05}", class.as_str().to_ascii_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split, class: ClassLabel) -> usize {
        self.split(split).filter(|r| r.class == class).count()
    }
}

/// Stratified per-subject train/test split over `n_per_class` phantoms of
/// each class. Paths point at `phantoms/<id>.aph`.
pub fn generate_dataset(config: &PhantomConfig, n_per_class: usize, split_fraction: f64) -> Result<Manifest> {
    config.validate()?;
    if n_per_class < 5 {
        return Err(Error::InvalidInput(format!("n_per_class must be >= 5, got {n_per_class}")));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("split fraction {split_fraction} not in (0, 1)")));
    }
    let n_train = (split_fraction * n_per_class as f64).round() as usize;
    if n_train >= n_per_class {
        return Err(Error::InvalidInput("split leaves the test set empty".into()));
    }
    if n_train == 0 {
        return Err(Error::InvalidInput("split leaves the train set empty".into()));
    }
    let mut records = Vec::with_capacity(2 * n_per_class);
    for class in [ClassLabel::Cn, ClassLabel::Ad] {
        let mut order: Vec<usize> = (0..n_per_class).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SPLIT, class.index() as u64]));
        let mut is_train = vec![false; n_per_class];
        for &i in &order[..n_train] {
            is_train[i] = true;
        }
        for (index, train) in is_train.into_iter().enumerate() {
            let id = sample_id(class, index as u64);
            records.push(SampleRecord {
                path: format!("phantoms/{id}.aph"),
                sample_id: id,
                class,
                split: if train { Split::Train } else { Split::Test },
            });
        }
    }
    Ok(Manifest { records })
}

/// Generate the phantom behind a manifest record.
pub fn phantom_for(config: &PhantomConfig, record: &SampleRecord) -> Result<Phantom> {
    let index = record
        .phantom_index()
        .ok_or_else(|| Error::InvalidInput(format!("sample id {} carries no index", record.sample_id)))?;
    generate_phantom(config, record.class, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg, ClassLabel::Ad, 3).unwrap();
        let b = generate_phantom(&cfg, ClassLabel::Ad, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&cfg, ClassLabel::Ad, 4).unwrap();
        assert_ne!(a.slice, c.slice);
    }

    #[test]
    fn ad_ventricles_are_larger() {
        let cfg = PhantomConfig::default();
        for i in 0..10 {
            let ad = generate_phantom(&cfg, ClassLabel::Ad, i).unwrap();
            let cn = generate_phantom(&cfg, ClassLabel::Cn, i).unwrap();
            let v = |p: &Phantom| p.masks.region(RegionLabel::Ventricles).count();
            let h = |p: &Phantom| p.masks.region(RegionLabel::Hippocampus).count();
            assert!(v(&ad) > v(&cn), "index {i}: {} vs {}", v(&ad), v(&cn));
            assert!(h(&ad) < h(&cn));
        }
    }

    #[test]
    fn zero_noise_gives_exact_means() {
        let cfg = PhantomConfig { noise_sigma: 0.0, ..Default::default() };
        let p = generate_phantom(&cfg, ClassLabel::Cn, 0).unwrap();
        for label in RegionLabel::ALL {
            let mean = cfg.intensities.mean(label);
            for (c, r) in p.masks.region(label).pixels() {
                assert_eq!(p.slice.get(c, r), mean);
            }
        }
    }

    #[test]
    fn masks_hold_invariants_and_all_regions_present() {
        let cfg = PhantomConfig { seed: 11, ..Default::default() };
        for class in [ClassLabel::Ad, ClassLabel::Cn] {
            for i in 0..25 {
                let p = generate_phantom(&cfg, class, i).unwrap();
                assert!(p.masks.check_invariants().is_empty());
                for label in RegionLabel::ALL {
                    assert!(p.masks.region(label).count() > 0, "{label} empty");
                }
                for (c, r) in p.masks.brain.pixels() {
                    assert!(p.slice.get(c, r) > 0.0 || cfg.noise_sigma > 0.0);
                }
            }
        }
    }

    #[test]
    fn small_image_is_rejected() {
        let cfg = PhantomConfig { image_size: 16, ..Default::default() };
        assert!(matches!(generate_phantom(&cfg, ClassLabel::Ad, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dataset_split_sizes() {
        let cfg = PhantomConfig::default();
        let m = generate_dataset(&cfg, 50, 0.8).unwrap();
        assert_eq!(m.split(Split::Train).count(), 80);
        assert_eq!(m.split(Split::Test).count(), 20);
        assert_eq!(m.count(Split::Train, ClassLabel::Ad), 40);
        assert_eq!(m.count(Split::Train, ClassLabel::Cn), 40);
        assert_eq!(m.count(Split::Test, ClassLabel::Ad), 10);
        assert_eq!(m.count(Split::Test, ClassLabel::Cn), 10);

        let big = generate_dataset(&cfg, 500, 0.8).unwrap();
        assert_eq!(big.split(Split::Train).count(), 800);
        assert_eq!(big.split(Split::Test).count(), 200);
        assert_eq!(generate_dataset(&cfg, 500, 0.8).unwrap(), big);
    }

    #[test]
    fn dataset_ids_are_unique_and_split_once() {
        let m = generate_dataset(&PhantomConfig::default(), 37, 0.8).unwrap();
        let mut ids: Vec<_> = m.records.iter().map(|r| r.sample_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), m.records.len());
        for split in [Split::Train, Split::Test] {
            let ad = m.count(split, ClassLabel::Ad) as isize;
            let cn = m.count(split, ClassLabel::Cn) as isize;
            assert!((ad - cn).abs() <= 1);
        }
    }

    #[test]
    fn dataset_rejects_bad_requests() {
        let cfg = PhantomConfig::default();
        assert!(generate_dataset(&cfg, 4, 0.8).is_err());
        assert!(generate_dataset(&cfg, 5, 0.95).is_err());
    }

    #[test]
    fn record_index_round_trips() {
        let m = generate_dataset(&PhantomConfig::default(), 6, 0.8).unwrap();
        for r in &m.records {
            assert_eq!(sample_id(r.class, r.phantom_index().unwrap()), r.sample_id);
        }
    }
}
