//! A small multi-head pose regressor trained with Adam.
//!
//! The trunk is two fully connected ReLU layers `input -> H -> H`. Each head
//! is an affine map `H -> 7` producing `(x, y, z, qw, qx, qy, qz)`. Heads tap
//! the trunk the way PoseNet's auxiliary regressors tap GoogLeNet: head `i`
//! reads trunk layer `min(i, depth - 1)`, and the last head always reads the
//! deepest layer. With three heads that is layer 1, layer 2, layer 2.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, SceneDataset};
use crate::error::{Error, Result};
use crate::geom::{normalize, Pose, Quaternion, Vec3};
use crate::loss::{multi_head_loss, multi_head_subgradient, LossBreakdown, LossWeights};

pub const POSE_OUTPUTS: usize = 7;
pub const TRUNK_DEPTH: usize = 2;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }

    /// Accumulates `dW += dz x^T`, `db += dz` and `dx += W^T dz` (if given).
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for ((g_row, gb), d) in grad
            .weights
            .chunks_exact_mut(self.inputs)
            .zip(grad.bias.iter_mut())
            .zip(dz)
        {
            *gb += d;
            for (g, v) in g_row.iter_mut().zip(x) {
                *g += d * v;
            }
        }
        if let Some(dx) = dx {
            for (row, d) in self.weights.chunks_exact(self.inputs).zip(dz) {
                for (acc, w) in dx.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameters of the regressor. Serialized field order is fixed: dimensions,
/// trunk layers, then heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Post-ReLU output of each trunk layer.
    pub hidden: Vec<Vec<f64>>,
    /// Raw head outputs.
    pub outputs: Vec<[f64; POSE_OUTPUTS]>,
}

pub fn init_model(
    input_dim: usize,
    hidden: usize,
    heads: usize,
    seed: u64,
) -> Result<RegressorModel> {
    if input_dim == 0 || hidden == 0 || heads == 0 {
        return Err(Error::InvalidConfig(
            "model dimensions must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(TRUNK_DEPTH);
    trunk.push(Dense::uniform(input_dim, hidden, &mut rng));
    for _ in 1..TRUNK_DEPTH {
        trunk.push(Dense::uniform(hidden, hidden, &mut rng));
    }
    let heads = (0..heads)
        .map(|_| {
            let mut h = Dense::uniform(hidden, POSE_OUTPUTS, &mut rng);
            // untrained heads predict the origin with the identity rotation
            h.bias = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
            h
        })
        .collect();
    Ok(RegressorModel {
        input_dim,
        hidden_dim: hidden,
        seed,
        trunk,
        heads,
    })
}

fn relu_in_place(v: &mut [f64]) {
    // NaN must survive so non-finite inputs surface as a non-finite loss
    for x in v.iter_mut().filter(|x| **x < 0.0) {
        *x = 0.0;
    }
}

fn to_pose(o: &[f64; POSE_OUTPUTS]) -> Pose {
    Pose::new(
        Vec3::new(o[0], o[1], o[2]),
        Quaternion::new(o[3], o[4], o[5], o[6]),
    )
}

impl RegressorModel {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Trunk layer index feeding head `head`.
    pub fn head_tap(&self, head: usize) -> usize {
        let deepest = self.trunk.len() - 1;
        if head + 1 == self.heads.len() {
            deepest
        } else {
            head.min(deepest)
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    /// All parameters in serialization order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.trunk.iter().chain(&self.heads).flat_map(Dense::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(Dense::params_mut)
    }

    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> RegressorModel {
        let z = |d: &Dense| Dense::zeros(d.inputs, d.outputs);
        RegressorModel {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
            trunk: self.trunk.iter().map(z).collect(),
            heads: self.heads.iter().map(z).collect(),
        }
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, features: &[f64]) -> Result<ForwardCache> {
        self.check_input(features)?;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(hidden.last().map_or(features, Vec::as_slice), &mut out);
            relu_in_place(&mut out);
            hidden.push(out);
        }
        let mut buf = Vec::with_capacity(POSE_OUTPUTS);
        let outputs = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                head.apply(&hidden[self.head_tap(i)], &mut buf);
                let mut o = [0.0; POSE_OUTPUTS];
                o.copy_from_slice(&buf);
                o
            })
            .collect();
        Ok(ForwardCache { hidden, outputs })
    }

    /// Backpropagates per-head output gradients, accumulating into `grad`.
    pub fn backward(
        &self,
        features: &[f64],
        cache: &ForwardCache,
        d_outputs: &[[f64; POSE_OUTPUTS]],
        grad: &mut RegressorModel,
    ) {
        let mut d_hidden: Vec<Vec<f64>> = cache.hidden.iter().map(|h| vec![0.0; h.len()]).collect();
        for (i, (head, d_out)) in self.heads.iter().zip(d_outputs).enumerate() {
            let tap = self.head_tap(i);
            head.backward(
                &cache.hidden[tap],
                d_out,
                &mut grad.heads[i],
                Some(&mut d_hidden[tap]),
            );
        }
        for l in (0..self.trunk.len()).rev() {
            let mut dz = std::mem::take(&mut d_hidden[l]);
            for (d, h) in dz.iter_mut().zip(&cache.hidden[l]) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            let (below, _) = d_hidden.split_at_mut(l);
            let (input, dx) = match l {
                0 => (features, None),
                _ => (
                    cache.hidden[l - 1].as_slice(),
                    Some(below[l - 1].as_mut_slice()),
                ),
            };
            self.trunk[l].backward(input, &dz, &mut grad.trunk[l], dx);
        }
    }
}

/// One pose per head, rotations as produced (unnormalized).
pub fn forward(model: &RegressorModel, features: &[f64]) -> Result<Vec<Pose>> {
    Ok(model
        .forward_cached(features)?
        .outputs
        .iter()
        .map(to_pose)
        .collect())
}

/// Evaluation-time prediction: the last head with its rotation normalized.
pub fn predict(model: &RegressorModel, features: &[f64]) -> Result<Pose> {
    let cache = model.forward_cached(features)?;
    let last = cache.outputs.last().expect("model has at least one head");
    let pose = to_pose(last);
    Ok(Pose::new(
        pose.position,
        normalize(pose.rotation)?.quaternion(),
    ))
}

/// Mean multi-head loss over `frames` and its gradient for every parameter.
pub fn batch_loss_and_grad(
    model: &RegressorModel,
    frames: &[&Frame],
    weights: &LossWeights,
) -> Result<(LossBreakdown, RegressorModel)> {
    let mut grad = model.zeros_like();
    let mut loss = LossBreakdown::default();
    let scale = 1.0 / frames.len() as f64;
    for frame in frames {
        let cache = model.forward_cached(&frame.features)?;
        let preds: Vec<Pose> = cache.outputs.iter().map(to_pose).collect();
        loss += multi_head_loss(&preds, &frame.pose, weights)?;
        let d_outputs: Vec<[f64; POSE_OUTPUTS]> =
            multi_head_subgradient(&preds, &frame.pose, weights)?
                .iter()
                .map(|g| g.to_array().map(|v| v * scale))
                .collect();
        model.backward(&frame.features, &cache, &d_outputs, &mut grad);
    }
    Ok((loss.scaled(scale), grad))
}

/// Mean multi-head loss without gradients.
pub fn batch_loss(
    model: &RegressorModel,
    frames: &[&Frame],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut loss = LossBreakdown::default();
    for frame in frames {
        loss += multi_head_loss(&forward(model, &frame.features)?, &frame.pose, weights)?;
    }
    Ok(loss.scaled(1.0 / frames.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub hidden_dim: usize,
    /// Trace every `log_every` iterations (the first and last are always kept).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            weights: LossWeights::posenet(0.0),
            seed: 0,
            hidden_dim: 64,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.batch_size == 0
            || self.hidden_dim == 0
            || self.log_every == 0
        {
            return Err(Error::InvalidConfig(
                "iterations, batch size, hidden size and log interval must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub total: f64,
    pub position_term: f64,
    pub rotation_term: f64,
    pub los_term: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub entries: Vec<TraceEntry>,
}

struct Adam {
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, model: &mut RegressorModel, grad: &RegressorModel) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in model
            .params_mut()
            .zip(grad.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Mini-batch Adam on the multi-head loss over the training split.
///
/// Batches are drawn without replacement from a generator seeded with
/// `cfg.seed`; a batch size at least the training-set size means full-batch
/// descent in frame order.
pub fn train(dataset: &SceneDataset, cfg: &TrainConfig) -> Result<(RegressorModel, TrainTrace)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    let mut model = init_model(
        dataset.feature_dim,
        cfg.hidden_dim,
        cfg.weights.heads.len(),
        cfg.seed,
    )?;
    let mut adam = Adam::new(cfg.learning_rate, model.param_count());
    // separate stream from initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = dataset.train.len();
    let full_batch = cfg.batch_size >= n;
    let all: Vec<&Frame> = dataset.train.iter().collect();
    let mut trace = TrainTrace::default();

    for it in 0..cfg.iterations {
        let batch: Vec<&Frame> = if full_batch {
            all.clone()
        } else {
            index::sample(&mut rng, n, cfg.batch_size)
                .into_iter()
                .map(|i| &dataset.train[i])
                .collect()
        };
        let (loss, grad) = batch_loss_and_grad(&model, &batch, &cfg.weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            trace.entries.push(TraceEntry {
                iteration: it,
                total: loss.total,
                position_term: loss.position_term,
                rotation_term: loss.rotation_term,
                los_term: loss.los_term,
            });
        }
        adam.update(&mut model, &grad);
        if !model.params().all(|p| p.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;
    use crate::geom::Vec3;

    fn zero_model(input_dim: usize, heads: usize) -> RegressorModel {
        let mut m = init_model(input_dim, 4, heads, 1).unwrap();
        for p in m.params_mut() {
            *p = 0.0;
        }
        for h in &mut m.heads {
            h.bias[3] = 1.0;
        }
        m
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(12, 16, 3, 7).unwrap();
        let b = init_model(12, 16, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(12, 16, 3, 8).unwrap());
        assert_eq!(a.heads.len(), 3);
        assert_eq!(a.trunk.len(), TRUNK_DEPTH);
        assert!(init_model(0, 16, 3, 7).is_err());
    }

    #[test]
    fn fresh_model_predicts_near_identity() {
        let model = init_model(48, 64, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let x: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
            for pose in forward(&model, &x).unwrap() {
                let q = pose.rotation;
                let dev = [q.w - 1.0, q.x, q.y, q.z]
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(dev < 1.0, "deviation {dev}");
            }
        }
    }

    #[test]
    fn zero_model_outputs() {
        let m = zero_model(5, 3);
        let out = forward(&m, &[0.3, -1.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.len(), 3);
        for p in out {
            assert_eq!(p, Pose::new(Vec3::ZERO, Quaternion::IDENTITY));
        }
        assert_eq!(
            predict(&m, &[0.0; 5]).unwrap(),
            Pose::new(Vec3::ZERO, Quaternion::IDENTITY)
        );
        assert!(matches!(
            forward(&m, &[0.0; 4]),
            Err(Error::DimensionMismatch {
                expected: 5,
                got: 4
            })
        ));
    }

    #[test]
    fn predict_normalizes_last_head() {
        let m = init_model(6, 8, 3, 3).unwrap();
        let x = [0.1, 0.5, -0.3, 0.9, -1.0, 0.2];
        let heads = forward(&m, &x).unwrap();
        assert_eq!(heads, forward(&m, &x).unwrap());
        let last = heads.last().unwrap();
        let p = predict(&m, &x).unwrap();
        assert_eq!(p.position, last.position);
        assert_eq!(p.rotation, normalize(last.rotation).unwrap().quaternion());
        assert!(p.rotation.is_unit());

        let mut dead = zero_model(6, 1);
        dead.heads[0].bias[3] = 0.0;
        assert!(matches!(predict(&dead, &x), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn trunk_weight_reaches_every_head() {
        let m = init_model(6, 8, 3, 11).unwrap();
        let x = [0.4, 0.5, -0.3, 0.9, -1.0, 0.2];
        let before = forward(&m, &x).unwrap();
        let mut bumped = m.clone();
        // first row of the first layer whose unit is active
        let cache = m.forward_cached(&x).unwrap();
        let unit = cache.hidden[0].iter().position(|h| *h > 0.0).unwrap();
        bumped.trunk[0].weights[unit * 6] += 0.5;
        let after = forward(&bumped, &x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn head_taps() {
        let m = init_model(4, 4, 3, 0).unwrap();
        assert_eq!(
            (0..3).map(|i| m.head_tap(i)).collect::<Vec<_>>(),
            vec![0, 1, 1]
        );
        let single = init_model(4, 4, 1, 0).unwrap();
        assert_eq!(single.head_tap(0), 1);
    }

    fn small_scene() -> SceneDataset {
        synth_scene(Vec3::new(2.0, 0.5, 1.0), 200, 50, 8, 0.0, 0).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = small_scene();
        let cfg = TrainConfig {
            iterations: 400,
            hidden_dim: 32,
            weights: LossWeights::posenet(0.5),
            ..TrainConfig::default()
        };
        let (m1, t1) = train(&ds, &cfg).unwrap();
        let (m2, t2) = train(&ds, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        let first = t1.entries.first().unwrap();
        let last = t1.entries.last().unwrap();
        assert_eq!(first.iteration, 0);
        assert_eq!(last.iteration, 399);
        assert!(t1
            .entries
            .windows(2)
            .all(|w| w[0].iteration < w[1].iteration));
        assert!(
            last.total < first.total,
            "{} !< {}",
            last.total,
            first.total
        );

        let untrained = init_model(ds.feature_dim, 32, 3, 0).unwrap();
        let frame = &ds.train[17];
        let err = |m: &RegressorModel| {
            (predict(m, &frame.features).unwrap().position - frame.pose.position).norm()
        };
        assert!(err(&m1) < err(&untrained));
    }

    #[test]
    fn gamma_zero_matches_default_and_positive_gamma_diverges() {
        let ds = small_scene();
        let base = TrainConfig {
            iterations: 20,
            hidden_dim: 16,
            ..TrainConfig::default()
        };
        let (a, _) = train(&ds, &base).unwrap();
        let (b, _) = train(
            &ds,
            &TrainConfig {
                weights: LossWeights::posenet(0.0),
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let (c, _) = train(
            &ds,
            &TrainConfig {
                weights: LossWeights::posenet(1.0),
                ..base
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_batch_small_lr_is_monotone() {
        let ds = synth_scene(Vec3::new(2.0, 0.5, 1.0), 40, 10, 8, 0.0, 0).unwrap();
        let cfg = TrainConfig {
            iterations: 100,
            batch_size: ds.train.len(),
            learning_rate: 1e-4,
            hidden_dim: 16,
            log_every: 1,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&ds, &cfg).unwrap();
        assert_eq!(trace.entries.len(), 100);
        for w in trace.entries.windows(2) {
            assert!(
                w[1].total <= w[0].total,
                "iteration {}: {} > {}",
                w[1].iteration,
                w[1].total,
                w[0].total
            );
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let ds = small_scene();
        for cfg in [
            TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(train(&ds, &cfg), Err(Error::InvalidConfig(_))));
        }
        let mut empty = ds.clone();
        empty.train.clear();
        assert!(matches!(
            train(&empty, &TrainConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut ds = small_scene();
        ds.train[0].features[0] = f64::NAN;
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: ds.train.len(),
            hidden_dim: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&ds, &cfg),
            Err(Error::NonFiniteLoss { iteration: 0 })
        ));
    }
}
