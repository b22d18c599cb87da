//! Training and evaluation: mean cross-entropy over mini-batches, Adam with
//! a fixed learning rate, coordinate jitter and duplicate-replacement point
//! dropout.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::model::{forward_detailed, init_params, loss_and_grads, ModelConfig, ModelParams};
use crate::phantom::{phantom_for, Manifest, PhantomConfig, Split};
use crate::rng::{self, tag};
use crate::sampler::{ablation_sample, aps_sample, SamplerKind, SamplingBudget};
use crate::types::{ClassLabel, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Std of the Gaussian added to x and y, in normalized units.
    pub jitter_sigma: f64,
    pub dropout_fraction: f64,
    pub seed: u64,
    /// Evaluate the test split after every epoch (otherwise only after the last).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            jitter_sigma: 0.01,
            dropout_fraction: 0.1,
            seed: 0,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidInput(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(Error::InvalidInput(format!("dropout {} not in [0, 1)", self.dropout_fraction)));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidInput("jitter sigma must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Jitter x and y (clamped to [-1, 1]), then overwrite
/// `floor(dropout_fraction * N)` randomly chosen points with copies of
/// randomly chosen surviving points. Intensities, labels and size are kept.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, config: &TrainConfig, rng: &mut R) -> PointCloud {
    let mut out = cloud.clone();
    if config.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, config.jitter_sigma).expect("validated sigma");
        for p in &mut out.points {
            p.x = (p.x as f64 + noise.sample(rng)).clamp(-1.0, 1.0) as f32;
            p.y = (p.y as f64 + noise.sample(rng)).clamp(-1.0, 1.0) as f32;
        }
    }
    let n = out.points.len();
    let dropped = (config.dropout_fraction * n as f64).floor() as usize;
    if dropped > 0 && dropped < n {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let (gone, kept) = order.split_at(dropped);
        for &i in gone {
            out.points[i] = out.points[kept[rng.random_range(0..kept.len())]];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochStats>,
    /// Largest single-sample tape peak plus optimizer and batch-gradient buffers.
    pub peak_workspace_bytes: usize,
}

/// Confusion counts with AD as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn record(&mut self, truth: ClassLabel, predicted: ClassLabel) {
        match (truth, predicted) {
            (ClassLabel::Ad, ClassLabel::Ad) => self.tp += 1,
            (ClassLabel::Cn, ClassLabel::Cn) => self.tn += 1,
            (ClassLabel::Cn, ClassLabel::Ad) => self.fp += 1,
            (ClassLabel::Ad, ClassLabel::Cn) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Forward passes bucketed by how many regions had at least one point.
    pub nonempty_region_counts: [usize; 5],
}

fn label_of(cloud: &PointCloud) -> Result<ClassLabel> {
    cloud
        .class_label
        .ok_or_else(|| Error::InvalidInput(format!("cloud {} has no class label", cloud.source_id)))
}

fn argmax_class(logits: &[f32]) -> ClassLabel {
    if logits[1] > logits[0] {
        ClassLabel::Ad
    } else {
        ClassLabel::Cn
    }
}

/// Accuracy and confusion counts of frozen parameters on labelled clouds.
pub fn evaluate(params: &ModelParams<f32>, clouds: &[PointCloud]) -> Result<EvalReport> {
    if clouds.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let mut confusion = Confusion::default();
    let mut nonempty_region_counts = [0usize; 5];
    for cloud in clouds {
        let truth = label_of(cloud)?;
        let out = forward_detailed(cloud, params)?;
        confusion.record(truth, argmax_class(&out.logits));
        nonempty_region_counts[out.empty_regions.iter().filter(|e| !**e).count()] += 1;
    }
    Ok(EvalReport { accuracy: confusion.accuracy(), confusion, nonempty_region_counts })
}

/// Train from freshly initialized parameters.
pub fn train(
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = init_params::<f32>(model_config)?;
    train_from(params, train_set, test_set, config)
}

/// Continue training `params`.
pub fn train_from(
    mut params: ModelParams<f32>,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let labels: Vec<ClassLabel> = train_set.iter().map(label_of).collect::<Result<_>>()?;
    let mut adam = AdamState::new(&params.tensors(), config.learning_rate);
    let param_bytes: usize = params.tensors().iter().map(|t| t.bytes()).sum();
    let mut peak_tape = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let mut r = rng::stream(config.seed, &[tag::AUGMENT, epoch as u64, i as u64]);
                let cloud = augment(&train_set[i], config, &mut r);
                let out = loss_and_grads(&cloud, labels[i].index(), &params).map_err(|e| match e {
                    Error::NonFinite(_) => non_finite(step, batch, train_set),
                    other => other,
                })?;
                if !out.loss.is_finite() {
                    return Err(non_finite(step, batch, train_set));
                }
                peak_tape = peak_tape.max(out.peak_workspace_bytes);
                loss_sum += out.loss as f64;
                correct += (argmax_class(&out.logits) == labels[i]) as usize;
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    for (x, &y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            acc.iter_mut().flatten().for_each(|g| *g *= scale);
            adam_step(&mut params.tensors_mut(), &acc, &mut adam)?;
            if !params.all_finite() {
                return Err(non_finite(step, batch, train_set));
            }
            step += 1;
        }
        let last = epoch + 1 == config.epochs;
        let test_accuracy = if !test_set.is_empty() && (config.eval_every_epoch || last) {
            Some(evaluate(&params, test_set)?.accuracy)
        } else {
            None
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
        });
    }
    Ok(TrainOutcome { params, history, peak_workspace_bytes: peak_tape + adam.bytes() + param_bytes })
}

fn non_finite(step: usize, batch: &[usize], set: &[PointCloud]) -> Error {
    Error::NonFiniteLoss { step, batch_ids: batch.iter().map(|&i| set[i].source_id.clone()).collect() }
}

/// Sampler seed for one sample of a run.
pub fn sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    let id_hash = sample_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    rng::derive_seed(run_seed, &[tag::SAMPLER, id_hash])
}

/// Sample one labelled cloud per manifest record of `split`.
pub fn sample_split(
    phantom_config: &PhantomConfig,
    manifest: &Manifest,
    split: Split,
    kind: SamplerKind,
    n_points: usize,
    ratios: Option<[f64; 4]>,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    manifest
        .split(split)
        .map(|record| {
            let phantom = phantom_for(phantom_config, record)?;
            let s = sample_seed(seed, &record.sample_id);
            let mut cloud = match (kind, ratios) {
                (SamplerKind::Aps, Some(r)) => aps_sample(&phantom.slice, &phantom.masks, &SamplingBudget::new(r, n_points)?, s)?,
                (SamplerKind::Aps, None) | (_, None) => ablation_sample(kind, &phantom.slice, &phantom.masks, n_points, s)?,
                (_, Some(_)) => return Err(Error::InvalidInput("ratios only apply to the aps sampler".into())),
            };
            cloud.class_label = Some(record.class);
            cloud.source_id = record.sample_id.clone();
            Ok(cloud)
        })
        .collect()
}

/// Sample both splits of `manifest` and train on them.
pub fn train_from_manifest(
    phantom_config: &PhantomConfig,
    manifest: &Manifest,
    kind: SamplerKind,
    n_points: usize,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let train_set = sample_split(phantom_config, manifest, Split::Train, kind, n_points, None, config.seed)?;
    let test_set = sample_split(phantom_config, manifest, Split::Test, kind, n_points, None, config.seed)?;
    train(&train_set, &test_set, model_config, config)
}
