use std::collections::VecDeque;

use proptest::prelude::*;

use neuroaps_core::phantom::{generate_phantom, PhantomConfig};
use neuroaps_core::sampler::{
    ablation_sample, allocate_budget, aps_sample, extract_boundary, sample_region, SamplerKind, SamplingBudget,
};
use neuroaps_core::types::{pixel_index, ClassLabel, Mask, RegionLabel};
use neuroaps_core::{rng, Error};

/// Mask pixels touching the exterior, found by flooding the background of
/// a one-pixel padded copy. Only valid for hole-free masks.
fn exterior_contour(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width + 2, mask.height + 2);
    let inside = |c: usize, r: usize| c >= 1 && r >= 1 && c <= mask.width && r <= mask.height && mask.get(c - 1, r - 1);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::from([(0usize, 0usize)]);
    outside[0] = true;
    while let Some((c, r)) = queue.pop_front() {
        let next = [(c.wrapping_sub(1), r), (c + 1, r), (c, r.wrapping_sub(1)), (c, r + 1)];
        for (nc, nr) in next {
            if nc < w && nr < h && !outside[nr * w + nc] && !inside(nc, nr) {
                outside[nr * w + nc] = true;
                queue.push_back((nc, nr));
            }
        }
    }
    let mut out = Vec::new();
    for r in 1..=mask.height {
        for c in 1..=mask.width {
            if inside(c, r) && [(c - 1, r), (c + 1, r), (c, r - 1), (c, r + 1)].iter().any(|&(a, b)| outside[b * w + a]) {
                out.push((c - 1, r - 1));
            }
        }
    }
    out
}

#[test]
fn brain_boundary_matches_flood_fill_contour() {
    let config = PhantomConfig::default();
    for index in 0..10 {
        for class in [ClassLabel::Ad, ClassLabel::Cn] {
            let p = generate_phantom(&config, class, index).unwrap();
            let boundary = extract_boundary(&p.masks.brain).unwrap();
            assert_eq!(boundary, exterior_contour(&p.masks.brain), "{class} #{index}");
        }
    }
}

#[test]
fn hand_countable_boundaries() {
    let square = Mask::from_fn(5, 5, |c, r| (1..4).contains(&c) && (1..4).contains(&r));
    let b = extract_boundary(&square).unwrap();
    assert_eq!(b.len(), 8);
    assert!(!b.contains(&(2, 2)));
    let dot = Mask::from_fn(5, 5, |c, r| c == 3 && r == 1);
    assert_eq!(extract_boundary(&dot).unwrap(), vec![(3, 1)]);
    assert!(extract_boundary(&Mask::new(5, 5)).is_err());
}

#[test]
fn budget_examples() {
    let b = SamplingBudget::with_default_ratios(8192);
    assert_eq!(allocate_budget(&b, [1; 4]).unwrap(), [2048, 2048, 2458, 1638]);
    let half = SamplingBudget::new([0.5, 0.5, 0.0, 0.0], 100).unwrap();
    assert_eq!(allocate_budget(&half, [9, 9, 9, 9]).unwrap(), [50, 50, 0, 0]);
    let b = SamplingBudget::with_default_ratios(100);
    // 100 * (0.25, 0.30, 0.20) / 0.75 = 33.3, 40, 26.7; the .7 remainder wins
    assert_eq!(allocate_budget(&b, [0, 5, 5, 5]).unwrap(), [0, 33, 40, 27]);
    assert!(matches!(allocate_budget(&b, [0; 4]), Err(Error::Budget(_))));
}

#[test]
fn sample_region_examples() {
    let cands: Vec<(usize, usize)> = (0..10).map(|i| (i, 2 * i)).collect();
    let mut all = sample_region(&cands, 10, &mut rng::stream(1, &[])).unwrap();
    all.sort();
    assert_eq!(all, cands);
    let four = &cands[..4];
    let drawn = sample_region(four, 10, &mut rng::stream(2, &[])).unwrap();
    assert_eq!(drawn.len(), 10);
    assert!(four.iter().all(|c| drawn.contains(c)));
    assert!(drawn.iter().all(|d| four.contains(d)));
    assert_eq!(drawn, sample_region(four, 10, &mut rng::stream(2, &[])).unwrap());
    assert!(sample_region(&[], 1, &mut rng::stream(3, &[])).is_err());
    assert!(sample_region(&[], 0, &mut rng::stream(3, &[])).unwrap().is_empty());
}

#[test]
fn labels_match_source_masks() {
    let p = generate_phantom(&PhantomConfig::default(), ClassLabel::Ad, 4).unwrap();
    let (w, h) = (p.slice.width, p.slice.height);
    for kind in [SamplerKind::Aps, SamplerKind::UniformRoi, SamplerKind::RandomRoi] {
        let cloud = ablation_sample(kind, &p.slice, &p.masks, 4096, 8).unwrap();
        for pt in &cloud.points {
            let (c, r) = (pixel_index(pt.x, w), pixel_index(pt.y, h));
            assert_eq!(p.masks.label_at(c, r), Some(pt.region), "{kind}");
            assert_eq!(pt.intensity, p.slice.get(c, r), "{kind}");
        }
    }
    for kind in [SamplerKind::UniformNoRoi, SamplerKind::RandomNoRoi] {
        let cloud = ablation_sample(kind, &p.slice, &p.masks, 2048, 8).unwrap();
        assert!(cloud.points.iter().all(|pt| pt.region == RegionLabel::Interior));
    }
}

#[test]
fn aps_oversamples_hippocampus() {
    let config = PhantomConfig::default();
    for index in 0..10 {
        let p = generate_phantom(&config, ClassLabel::Ad, index).unwrap();
        let aps = ablation_sample(SamplerKind::Aps, &p.slice, &p.masks, 2048, index).unwrap();
        let random = ablation_sample(SamplerKind::RandomRoi, &p.slice, &p.masks, 2048, index).unwrap();
        let h = RegionLabel::Hippocampus.index();
        assert!(aps.region_counts()[h] >= random.region_counts()[h]);
    }
}

#[test]
fn region_proportions_hold_across_sizes() {
    let p = generate_phantom(&PhantomConfig::default(), ClassLabel::Cn, 1).unwrap();
    let small = aps_sample(&p.slice, &p.masks, &SamplingBudget::with_default_ratios(2048), 3).unwrap();
    let large = aps_sample(&p.slice, &p.masks, &SamplingBudget::with_default_ratios(8192), 3).unwrap();
    for (a, b) in small.region_counts().iter().zip(large.region_counts()) {
        assert!((*a as f64 / 2048.0 - b as f64 / 8192.0).abs() <= 1.0 / 2048.0);
    }
}

proptest! {
    #[test]
    fn allocation_sums_to_total(
        raw in prop::array::uniform4(0.0f64..1.0),
        avail in prop::array::uniform4(0usize..3),
        total in 1usize..10_000,
    ) {
        let sum: f64 = raw.iter().sum();
        prop_assume!(sum > 1e-3 && avail.iter().any(|&a| a > 0));
        let ratios = raw.map(|r| r / sum);
        let Ok(budget) = SamplingBudget::new(ratios, total) else { return Ok(()) };
        match allocate_budget(&budget, avail) {
            Ok(counts) => {
                prop_assert_eq!(counts.iter().sum::<usize>(), total);
                for (c, a) in counts.iter().zip(avail) {
                    if a == 0 { prop_assert_eq!(*c, 0); }
                }
            }
            // only possible when every available region has zero ratio
            Err(_) => prop_assert!(ratios.iter().zip(avail).all(|(r, a)| a == 0 || *r == 0.0)),
        }
    }
}
