//! The region-token point network.
//!
//! A shared per-point MLP lifts each `(x, y, intensity, one_hot(region))`
//! row to a 256-d feature. Features are max-pooled per region into four ROI
//! tokens (a learned token stands in for a region with no points) and over
//! all points into a global token. The global token queries the ROI tokens
//! through single-head scaled dot-product attention; the attended vector is
//! concatenated with the global token and classified by a small MLP head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::types::{PointCloud, RegionLabel};

pub const POINT_FEATURES: usize = 3;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 3 geometric/intensity values plus the region one-hot.
    pub input_dim: usize,
    pub encoder_dims: Vec<usize>,
    pub fusion_dim: usize,
    /// Hidden and output widths of the head; its input is `2 * fusion_dim`.
    pub head_dims: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: POINT_FEATURES + RegionLabel::COUNT,
            encoder_dims: vec![64, 128, 256],
            fusion_dim: 256,
            head_dims: vec![128, NUM_CLASSES],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(init_seed: u64) -> Self {
        Self { init_seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("model config: {m}")));
        if self.input_dim != POINT_FEATURES + RegionLabel::COUNT {
            return bad("input_dim must be 7");
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return bad("encoder dims must be non-empty and positive");
        }
        if self.encoder_dims.last() != Some(&self.fusion_dim) {
            return bad("last encoder width must equal fusion_dim");
        }
        if self.head_dims.last() != Some(&NUM_CLASSES) || self.head_dims.contains(&0) {
            return bad("head must end in 2 logits");
        }
        Ok(())
    }

    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.encoder_dims
            .iter()
            .map(|&out| {
                let s = (fan_in, out);
                fan_in = out;
                s
            })
            .collect()
    }

    fn head_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = 2 * self.fusion_dim;
        self.head_dims
            .iter()
            .map(|&out| {
                let s = (fan_in, out);
                fan_in = out;
                s
            })
            .collect()
    }

    /// Parameter count implied by the shapes alone.
    pub fn parameter_count(&self) -> usize {
        let linear = |(i, o): (usize, usize)| i * o + o;
        let d = self.fusion_dim;
        self.encoder_shapes().into_iter().map(linear).sum::<usize>()
            + 3 * d * d
            + d
            + self.head_shapes().into_iter().map(linear).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[fan_in × fan_out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub encoder: Vec<Linear<T>>,
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub empty_token: Tensor<T>,
    pub head: Vec<Linear<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Every tensor in declaration order: encoder (weight, bias) pairs,
    /// query, key and value projections, the empty-region token, head pairs.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([&self.query, &self.key, &self.value, &self.empty_token]);
        for l in &self.head {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([&mut self.query, &mut self.key, &mut self.value, &mut self.empty_token]);
        for l in &mut self.head {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Rebuild from tensors in declaration order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let template = Self::zeros(&config);
        let shapes: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape.clone()).collect();
        if tensors.len() != shapes.len() {
            return Err(Error::Shape { op: "from_tensors", detail: format!("{} tensors, expected {}", tensors.len(), shapes.len()) });
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if &t.shape != s || t.len() != s.iter().product::<usize>() {
                return Err(Error::Shape { op: "from_tensors", detail: format!("tensor {i}: {:?} vs {s:?}", t.shape) });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let pairs = |n: usize, next: &mut dyn FnMut() -> Tensor<T>| {
            (0..n).map(|_| Linear { weight: next(), bias: next() }).collect::<Vec<_>>()
        };
        let encoder = pairs(config.encoder_dims.len(), &mut next);
        let (query, key, value, empty_token) = (next(), next(), next(), next());
        let head = pairs(config.head_dims.len(), &mut next);
        Ok(Self { config, encoder, query, key, value, empty_token, head })
    }

    fn zeros(config: &ModelConfig) -> Self {
        let lin = |(i, o): (usize, usize)| Linear { weight: Tensor::zeros(vec![i, o]), bias: Tensor::zeros(vec![o]) };
        let d = config.fusion_dim;
        Self {
            config: config.clone(),
            encoder: config.encoder_shapes().into_iter().map(lin).collect(),
            query: Tensor::zeros(vec![d, d]),
            key: Tensor::zeros(vec![d, d]),
            value: Tensor::zeros(vec![d, d]),
            empty_token: Tensor::zeros(vec![d]),
            head: config.head_shapes().into_iter().map(lin).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_tensors(self.config.clone(), self.tensors().into_iter().map(|t| t.cast()).collect())
            .expect("same config and shapes")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrite all values from a flat buffer in declaration order.
    pub fn unflatten(&mut self, flat: &[T]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Exact number of learnable scalars.
pub fn count_parameters<T: Scalar>(params: &ModelParams<T>) -> usize {
    params.tensors().iter().map(|t| t.len()).sum()
}

/// Glorot-uniform weights, zero biases, zero empty-region token.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::<T>::zeros(config);
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        if t.shape.len() != 2 {
            continue;
        }
        let bound = glorot_bound(t.shape[0], t.shape[1]);
        let mut r = rng::stream(config.init_seed, &[tag::INIT, i as u64]);
        for v in &mut t.data {
            *v = T::from_f64_lossy(r.random_range(-bound..=bound));
        }
    }
    Ok(params)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Parameters registered on a tape, in declaration order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub empty_token: Var,
    pub head: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([self.query, self.key, self.value, self.empty_token]);
        out.extend(self.head.iter().flat_map(|&(w, b)| [w, b]));
        out
    }
}

/// Put the parameters on `tape`, as differentiable leaves when `trainable`.
pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Result<ParamVars> {
    let mut put = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    let mut encoder = Vec::new();
    for l in &params.encoder {
        encoder.push((put(&l.weight)?, put(&l.bias)?));
    }
    let (query, key, value, empty_token) = (put(&params.query)?, put(&params.key)?, put(&params.value)?, put(&params.empty_token)?);
    let mut head = Vec::new();
    for l in &params.head {
        head.push((put(&l.weight)?, put(&l.bias)?));
    }
    Ok(ParamVars { encoder, query, key, value, empty_token, head })
}

/// `[N × 7]` input rows `[x, y, I, one_hot(region)]`.
pub fn input_matrix<T: Scalar>(cloud: &PointCloud) -> Tensor<T> {
    let width = POINT_FEATURES + RegionLabel::COUNT;
    let mut data = Vec::with_capacity(cloud.len() * width);
    for p in &cloud.points {
        data.push(T::from_f64_lossy(p.x as f64));
        data.push(T::from_f64_lossy(p.y as f64));
        data.push(T::from_f64_lossy(p.intensity as f64));
        for r in RegionLabel::ALL {
            data.push(if p.region == r { T::one() } else { T::zero() });
        }
    }
    Tensor { shape: vec![cloud.len(), width], data }
}

/// Handles and side outputs of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub features: Var,
    pub roi_tokens: Var,
    pub global_token: Var,
    pub fused: Var,
    pub logits: Var,
    pub attention: Vec<T>,
    /// Regions that received the learned empty-region token.
    pub empty_regions: [bool; 4],
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, mut x: Var, layers: &[(Var, Var)], relu_last: bool) -> Result<Var> {
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = tape.matmul(x, w)?;
        x = tape.add_bias(x, b)?;
        if relu_last || i + 1 < layers.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Shared per-point MLP on a tape: `[N × 7] → [N × 256]`.
pub fn encode_on_tape<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, cloud: &PointCloud) -> Result<Var> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    let x = tape.constant(input_matrix(cloud))?;
    mlp(tape, x, &vars.encoder, true)
}

/// Region tokens `[4 × D]` (empty regions filled) and the global token `[1 × D]`.
pub fn tokenize_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    features: Var,
    regions: &[RegionLabel],
) -> Result<(Var, Var, [bool; 4])> {
    let ids: Vec<usize> = regions.iter().map(|r| r.index()).collect();
    let pooled = tape.masked_max_pool(features, &ids, RegionLabel::COUNT)?;
    let tokens = tape.fill_rows(pooled.out, vars.empty_token, &pooled.empty)?;
    let global = tape.masked_max_pool(features, &vec![0; ids.len()], 1)?;
    let mut empty = [false; 4];
    empty.copy_from_slice(&pooled.empty);
    Ok((tokens, global.out, empty))
}

/// Attention of the global token over the ROI tokens, concatenated with the
/// global token: `[1 × 2D]`.
pub fn fuse_on_tape<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, tokens: Var, global: Var) -> Result<(Var, Vec<T>)> {
    let q = tape.matmul(global, vars.query)?;
    let k = tape.matmul(tokens, vars.key)?;
    let v = tape.matmul(tokens, vars.value)?;
    let att = tape.scaled_dot_attention(q, k, v)?;
    let fused = tape.concat_cols(att.out, global)?;
    Ok((fused, att.weights))
}

pub fn forward_on_tape<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, cloud: &PointCloud) -> Result<ForwardTrace<T>> {
    let features = encode_on_tape(tape, vars, cloud)?;
    let regions: Vec<RegionLabel> = cloud.points.iter().map(|p| p.region).collect();
    let (roi_tokens, global_token, empty_regions) = tokenize_on_tape(tape, vars, features, &regions)?;
    let (fused, attention) = fuse_on_tape(tape, vars, roi_tokens, global_token)?;
    let logits = mlp(tape, fused, &vars.head, false)?;
    Ok(ForwardTrace { features, roi_tokens, global_token, fused, logits, attention, empty_regions })
}

/// Per-point features `[N × 256]`.
pub fn encode_points<T: Scalar>(cloud: &PointCloud, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false)?;
    let f = encode_on_tape(&mut tape, &vars, cloud)?;
    Ok(tape.value(f).clone())
}

/// ROI tokens and global token for precomputed features.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens<T> {
    pub roi_tokens: Tensor<T>,
    pub global_token: Tensor<T>,
    pub empty_regions: [bool; 4],
}

pub fn roi_tokenize<T: Scalar>(features: &Tensor<T>, regions: &[RegionLabel], params: &ModelParams<T>) -> Result<Tokens<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false)?;
    let f = tape.constant(features.clone())?;
    let (t, g, empty_regions) = tokenize_on_tape(&mut tape, &vars, f, regions)?;
    Ok(Tokens { roi_tokens: tape.value(t).clone(), global_token: tape.value(g).clone(), empty_regions })
}

/// Fused `[1 × 2D]` vector and the attention weights over the ROI tokens.
pub fn fuse<T: Scalar>(roi_tokens: &Tensor<T>, global_token: &Tensor<T>, params: &ModelParams<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false)?;
    let t = tape.constant(roi_tokens.clone())?;
    let g = tape.constant(Tensor { shape: vec![1, global_token.len()], data: global_token.data.clone() })?;
    let (fused, w) = fuse_on_tape(&mut tape, &vars, t, g)?;
    Ok((tape.value(fused).clone(), w))
}

/// Inference output with instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub logits: Vec<T>,
    pub attention: Vec<T>,
    pub empty_regions: [bool; 4],
    pub peak_workspace_bytes: usize,
}

pub fn forward_detailed<T: Scalar>(cloud: &PointCloud, params: &ModelParams<T>) -> Result<Inference<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false)?;
    let trace = forward_on_tape(&mut tape, &vars, cloud)?;
    Ok(Inference {
        logits: tape.value(trace.logits).data.clone(),
        attention: trace.attention,
        empty_regions: trace.empty_regions,
        peak_workspace_bytes: tape.peak_live_bytes(),
    })
}

/// Two logits `[CN, AD]`.
pub fn forward<T: Scalar>(cloud: &PointCloud, params: &ModelParams<T>) -> Result<Vec<T>> {
    forward_detailed(cloud, params).map(|i| i.logits)
}

pub fn predict<T: Scalar>(cloud: &PointCloud, params: &ModelParams<T>) -> Result<usize> {
    let logits = forward(cloud, params)?;
    Ok(if logits[1] > logits[0] { 1 } else { 0 })
}

/// Loss and parameter gradients for one labelled cloud.
#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    pub loss: T,
    pub logits: Vec<T>,
    /// In declaration order, one buffer per parameter tensor.
    pub grads: Vec<Vec<T>>,
    pub peak_workspace_bytes: usize,
    pub branch_signature: u64,
}

pub fn loss_and_grads<T: Scalar>(cloud: &PointCloud, class: usize, params: &ModelParams<T>) -> Result<LossAndGrads<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, true)?;
    let trace = forward_on_tape(&mut tape, &vars, cloud)?;
    let loss = tape.cross_entropy(trace.logits, class)?;
    let loss_value = tape.value(loss).data[0];
    let logits = tape.value(trace.logits).data.clone();
    let branch_signature = tape.branch_signature();
    let mut g = tape.backward(loss)?;
    let grads = vars
        .all()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| g.take(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect();
    Ok(LossAndGrads { loss: loss_value, logits, grads, peak_workspace_bytes: tape.peak_live_bytes(), branch_signature })
}

/// Loss plus branch signature without a backward pass.
pub fn loss_only<T: Scalar>(cloud: &PointCloud, class: usize, params: &ModelParams<T>) -> Result<(T, u64)> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false)?;
    let trace = forward_on_tape(&mut tape, &vars, cloud)?;
    let loss = tape.cross_entropy(trace.logits, class)?;
    Ok((tape.value(loss).data[0], tape.branch_signature()))
}

/// Analytic floating-point operation counts of one forward pass. A
/// multiply-add counts as two; a comparison, bias add or ReLU as one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub encoder: u64,
    pub pooling: u64,
    pub fusion: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.encoder + self.pooling + self.fusion + self.head
    }

    pub fn encoder_and_pooling(&self) -> u64 {
        self.encoder + self.pooling
    }
}

pub fn forward_flops(config: &ModelConfig, n_points: usize) -> FlopCount {
    let n = n_points as u64;
    let layer = |rows: u64, (i, o): (usize, usize), relu: bool| {
        let (i, o) = (i as u64, o as u64);
        rows * (2 * i * o + o + if relu { o } else { 0 })
    };
    let encoder = config.encoder_shapes().into_iter().map(|s| layer(n, s, true)).sum();
    let d = config.fusion_dim as u64;
    // region pool and global pool each compare every feature once
    let pooling = 2 * n * d;
    let g = RegionLabel::COUNT as u64;
    let projections = 2 * d * d + 2 * (2 * g * d * d);
    let attention = 2 * g * d + 3 * g + 2 * g * d;
    let fusion = projections + attention;
    let shapes = config.head_shapes();
    let last = shapes.len().saturating_sub(1);
    let head = shapes.into_iter().enumerate().map(|(i, s)| layer(1, s, i < last)).sum();
    FlopCount { encoder, pooling, fusion, head }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LabeledPoint;

    fn toy_cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = rng::stream(seed, &[99]);
        PointCloud {
            points: (0..n)
                .map(|_| LabeledPoint {
                    x: r.random_range(-1.0..1.0),
                    y: r.random_range(-1.0..1.0),
                    intensity: r.random_range(0.0..1.0),
                    region: RegionLabel::ALL[r.random_range(0..4)],
                })
                .collect(),
            class_label: None,
            source_id: "toy".into(),
        }
    }

    #[test]
    fn parameter_count_of_default_config() {
        let expected = 7 * 64 + 64 + 64 * 128 + 128 + 128 * 256 + 256 + 3 * (256 * 256) + 256 + 512 * 128 + 128 + 128 * 2 + 2;
        assert_eq!(expected, 304_642);
        let p = init_params::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(count_parameters(&p), expected);
        assert_eq!(ModelConfig::default().parameter_count(), expected);
        let headless = ModelConfig { head_dims: vec![], ..Default::default() };
        assert_eq!(expected - headless.parameter_count(), 512 * 128 + 128 + 128 * 2 + 2);
        let q = init_params::<f32>(&ModelConfig::default()).unwrap();
        assert_eq!(count_parameters(&p), count_parameters(&q));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let cfg = ModelConfig::with_seed(42);
        let a = init_params::<f64>(&cfg).unwrap();
        assert_eq!(a, init_params::<f64>(&cfg).unwrap());
        assert_ne!(a, init_params::<f64>(&ModelConfig::with_seed(43)).unwrap());
        for l in a.encoder.iter().chain(&a.head) {
            assert!(l.bias.data.iter().all(|&b| b == 0.0));
        }
        assert!(a.empty_token.data.iter().all(|&v| v == 0.0));
        let mut sampled = 0;
        for t in a.tensors() {
            if t.shape.len() == 2 {
                let bound = glorot_bound(t.shape[0], t.shape[1]);
                for &v in &t.data {
                    assert!(v.abs() <= bound);
                    sampled += 1;
                }
            }
        }
        assert!(sampled >= 100_000);
    }

    #[test]
    fn encoding_follows_points() {
        let p = init_params::<f64>(&ModelConfig::with_seed(1)).unwrap();
        let c = toy_cloud(12, 0);
        let mut rev = c.clone();
        rev.points.reverse();
        let f = encode_points(&c, &p).unwrap();
        let g = encode_points(&rev, &p).unwrap();
        for i in 0..12 {
            assert_eq!(f.row(i), g.row(11 - i));
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut p = init_params::<f64>(&ModelConfig::default()).unwrap();
        for l in &mut p.encoder {
            l.weight.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = encode_points(&toy_cloud(5, 1), &p).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_point_gives_identical_rows() {
        let p = init_params::<f64>(&ModelConfig::with_seed(2)).unwrap();
        let mut c = toy_cloud(1, 3);
        c.points = vec![c.points[0]; 9];
        let f = encode_points(&c, &p).unwrap();
        for i in 1..9 {
            assert_eq!(f.row(i), f.row(0));
        }
    }

    #[test]
    fn single_region_tokens() {
        let mut p = init_params::<f64>(&ModelConfig::with_seed(3)).unwrap();
        p.empty_token.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.01);
        let mut c = toy_cloud(20, 4);
        c.points.iter_mut().for_each(|pt| pt.region = RegionLabel::Surface);
        let f = encode_points(&c, &p).unwrap();
        let regions: Vec<_> = c.points.iter().map(|p| p.region).collect();
        let t = roi_tokenize(&f, &regions, &p).unwrap();
        assert_eq!(t.empty_regions, [true, true, false, true]);
        assert_eq!(t.roi_tokens.row(2), t.global_token.data.as_slice());
        for r in [0, 1, 3] {
            assert_eq!(t.roi_tokens.row(r), p.empty_token.data.as_slice());
        }
    }

    #[test]
    fn tokens_match_brute_force_and_are_order_free() {
        let p = init_params::<f64>(&ModelConfig::with_seed(4)).unwrap();
        let c = toy_cloud(32, 5);
        let f = encode_points(&c, &p).unwrap();
        let regions: Vec<_> = c.points.iter().map(|p| p.region).collect();
        let t = roi_tokenize(&f, &regions, &p).unwrap();
        let d = 256;
        for r in RegionLabel::ALL {
            let members: Vec<usize> = (0..32).filter(|&i| regions[i] == r).collect();
            for j in 0..d {
                let brute = members.iter().map(|&i| f.data[i * d + j]).fold(f64::NEG_INFINITY, f64::max);
                let want = if members.is_empty() { p.empty_token.data[j] } else { brute };
                assert_eq!(t.roi_tokens.data[r.index() * d + j], want);
            }
        }
        let mut perm = c.clone();
        perm.points.rotate_left(7);
        let fp = encode_points(&perm, &p).unwrap();
        let rp: Vec<_> = perm.points.iter().map(|p| p.region).collect();
        assert_eq!(roi_tokenize(&fp, &rp, &p).unwrap(), t);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let p = init_params::<f64>(&ModelConfig::with_seed(5)).unwrap();
        let token: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin()).collect();
        let tokens = Tensor::new(vec![4, 256], token.repeat(4)).unwrap();
        let global = Tensor::new(vec![256], (0..256).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let (fused, w) = fuse(&tokens, &global, &p).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        // aggregated = token · W_v
        for j in 0..256 {
            let want: f64 = (0..256).map(|i| token[i] * p.value.data[i * 256 + j]).sum();
            assert!((fused.data[j] - want).abs() < 1e-9);
        }
        assert_eq!(&fused.data[256..], global.data.as_slice());
    }

    #[test]
    fn saturated_attention_picks_aligned_token() {
        let mut p = init_params::<f64>(&ModelConfig::with_seed(6)).unwrap();
        let eye: Vec<f64> = (0..256 * 256).map(|i| if i / 256 == i % 256 { 1.0 } else { 0.0 }).collect();
        for t in [&mut p.query, &mut p.key, &mut p.value] {
            t.data.clone_from(&eye);
        }
        let mut tokens = vec![0.0; 4 * 256];
        for j in 0..256 {
            tokens[2 * 256 + j] = 10.0;
            tokens[j] = if j % 2 == 0 { 0.1 } else { -0.1 };
        }
        let global = Tensor::new(vec![256], vec![10.0; 256]).unwrap();
        let (fused, w) = fuse(&Tensor::new(vec![4, 256], tokens.clone()).unwrap(), &global, &p).unwrap();
        assert!(w[2] > 1.0 - 1e-12);
        for j in 0..256 {
            assert!((fused.data[j] - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_permutation_invariant_and_deterministic() {
        let p = init_params::<f64>(&ModelConfig::with_seed(7)).unwrap();
        let c = toy_cloud(64, 8);
        let a = forward(&c, &p).unwrap();
        let mut perm = c.clone();
        perm.points.reverse();
        perm.points.rotate_left(13);
        assert_eq!(forward(&perm, &p).unwrap(), a);
        assert_eq!(forward(&c, &p).unwrap(), a);
    }

    #[test]
    fn flops_scale_linearly() {
        let cfg = ModelConfig::default();
        let small = forward_flops(&cfg, 2048);
        let big = forward_flops(&cfg, 8192);
        assert_eq!(big.encoder_and_pooling(), 4 * small.encoder_and_pooling());
        assert_eq!(big.fusion, small.fusion);
    }

    #[test]
    fn flatten_round_trip() {
        let p = init_params::<f32>(&ModelConfig::with_seed(9)).unwrap();
        let mut q = init_params::<f32>(&ModelConfig::with_seed(10)).unwrap();
        q.unflatten(&p.flatten());
        assert_eq!(p.tensors(), q.tensors());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { input_dim: 4, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { head_dims: vec![128, 3], ..Default::default() }.validate().is_err());
        assert!(ModelConfig { encoder_dims: vec![64, 128], ..Default::default() }.validate().is_err());
    }
}
