//! Point-density and sampler-ablation sweeps, latency timing and the
//! workspace metric.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, forward_detailed, ModelConfig, ModelParams};
use crate::phantom::{generate_phantom, Manifest, PhantomConfig, Split};
use crate::sampler::{ablation_sample, SamplerKind};
use crate::trainer::{evaluate, sample_split, train, EvalReport, TrainConfig, TrainOutcome};
use crate::types::{ClassLabel, PointCloud, SUPPORTED_SIZES};

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_REPS: usize = 50;
pub const ABLATION_POINTS: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Median of a sample: the middle order statistic, or the mean of the two
/// middle ones for an even count.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// `warmup` untimed forwards, then `reps` timed single-cloud forwards.
pub fn measure_latency(params: &ModelParams<f32>, cloud: &PointCloud, warmup: usize, reps: usize) -> Result<LatencyStats> {
    if warmup < 3 || reps < 20 {
        return Err(Error::InvalidInput(format!("need warmup >= 3 and reps >= 20, got {warmup} and {reps}")));
    }
    for _ in 0..warmup {
        std::hint::black_box(forward(cloud, params)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(forward(std::hint::black_box(cloud), params)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats {
        median_ms: median(&times),
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().copied().fold(0.0, f64::max),
    })
}

/// Fixed reference cloud for timing: an APS sample of the first AD phantom.
pub fn reference_cloud(n_points: usize) -> Result<PointCloud> {
    let p = generate_phantom(&PhantomConfig::default(), ClassLabel::Ad, 0)?;
    ablation_sample(SamplerKind::Aps, &p.slice, &p.masks, n_points, 0)
}

/// Latency on [`reference_cloud`].
pub fn measure_latency_at(params: &ModelParams<f32>, n_points: usize, warmup: usize, reps: usize) -> Result<LatencyStats> {
    measure_latency(params, &reference_cloud(n_points)?, warmup, reps)
}

/// High-water mark of live numeric bytes during one forward pass.
pub fn peak_workspace_bytes(params: &ModelParams<f32>, cloud: &PointCloud) -> Result<usize> {
    Ok(forward_detailed(cloud, params)?.peak_workspace_bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: SamplerKind,
    pub n_points: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub latency_ms: f64,
    pub peak_workspace_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
}

impl RunReport {
    /// Mean accuracy over the rows of one variant.
    pub fn mean_accuracy(&self, variant: SamplerKind) -> Option<f64> {
        let acc: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.accuracy).collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// Everything a sweep needs besides the cell coordinates.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub phantom: PhantomConfig,
    pub manifest: Manifest,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub warmup: usize,
    pub reps: usize,
}

impl SweepConfig {
    pub fn new(phantom: PhantomConfig, manifest: Manifest) -> Self {
        Self {
            phantom,
            manifest,
            model: ModelConfig::default(),
            train: TrainConfig { eval_every_epoch: false, ..Default::default() },
            warmup: DEFAULT_WARMUP,
            reps: DEFAULT_REPS,
        }
    }
}

/// One sweep cell with its training history and evaluation details.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: RunRow,
    pub outcome: TrainOutcome,
    pub eval: EvalReport,
}

/// Train and evaluate one (kind, n_points, seed) cell. The seed drives
/// sampling, initialization and training order.
pub fn run_cell(config: &SweepConfig, kind: SamplerKind, n_points: usize, seed: u64) -> Result<CellResult> {
    let train_set = sample_split(&config.phantom, &config.manifest, Split::Train, kind, n_points, None, seed)?;
    let test_set = sample_split(&config.phantom, &config.manifest, Split::Test, kind, n_points, None, seed)?;
    let model = ModelConfig { init_seed: seed, ..config.model.clone() };
    let train_config = TrainConfig { seed, ..config.train.clone() };
    let outcome = train(&train_set, &test_set, &model, &train_config)?;
    let eval = evaluate(&outcome.params, &test_set)?;
    let latency = measure_latency(&outcome.params, &test_set[0], config.warmup, config.reps)?;
    let peak = peak_workspace_bytes(&outcome.params, &test_set[0])?;
    let row = RunRow {
        variant: kind,
        n_points,
        seed,
        accuracy: eval.accuracy,
        latency_ms: latency.median_ms,
        peak_workspace_bytes: peak,
    };
    Ok(CellResult { row, outcome, eval })
}

/// One APS model per (n_points, seed).
pub fn density_sweep(config: &SweepConfig, point_counts: &[usize], seeds: &[u64]) -> Result<Vec<CellResult>> {
    let mut cells = Vec::with_capacity(point_counts.len() * seeds.len());
    for &n in point_counts {
        for &s in seeds {
            cells.push(run_cell(config, SamplerKind::Aps, n, s)?);
        }
    }
    Ok(cells)
}

/// One model per (kind, seed) over the given kinds, sorted by kind.
pub fn ablation_sweep_with(config: &SweepConfig, kinds: &[SamplerKind], n_points: usize, seeds: &[u64]) -> Result<Vec<CellResult>> {
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    let mut cells = Vec::with_capacity(kinds.len() * seeds.len());
    for kind in kinds {
        for &s in seeds {
            cells.push(run_cell(config, kind, n_points, s)?);
        }
    }
    Ok(cells)
}

/// All five samplers at 8192 points.
pub fn ablation_sweep(config: &SweepConfig, seeds: &[u64]) -> Result<Vec<CellResult>> {
    ablation_sweep_with(config, &SamplerKind::ALL, ABLATION_POINTS, seeds)
}

pub fn report_of(cells: &[CellResult]) -> RunReport {
    RunReport { rows: cells.iter().map(|c| c.row.clone()).collect() }
}

/// Default density grid.
pub fn default_point_counts() -> Vec<usize> {
    SUPPORTED_SIZES.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn median_of_odd_count_is_middle_order_statistic() {
        let v: Vec<f64> = (0..21).rev().map(f64::from).collect();
        assert_eq!(median(&v), 10.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn latency_preconditions() {
        let p = init_params::<f32>(&ModelConfig::default()).unwrap();
        let c = reference_cloud(2048).unwrap();
        assert!(measure_latency(&p, &c, 2, 20).is_err());
        assert!(measure_latency(&p, &c, 3, 19).is_err());
        let s = measure_latency(&p, &c, 3, 20).unwrap();
        assert!(s.min_ms > 0.0 && s.min_ms <= s.median_ms && s.median_ms <= s.max_ms);
    }

    #[test]
    fn workspace_grows_with_points() {
        let p = init_params::<f32>(&ModelConfig::default()).unwrap();
        let w: Vec<usize> = SUPPORTED_SIZES.iter().map(|&n| peak_workspace_bytes(&p, &reference_cloud(n).unwrap()).unwrap()).collect();
        assert!(w[0] < w[1] && w[1] < w[2], "{w:?}");
    }
}
