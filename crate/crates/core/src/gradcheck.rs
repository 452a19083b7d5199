//! Finite-difference verification of the analytic loss gradients and of the
//! regressor's backpropagation.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::geom::{normalize, Pose, Quaternion, Vec3};
use crate::loss::{loss_gradient, proposed_loss, LossWeights};
use crate::model::{batch_loss, batch_loss_and_grad, RegressorModel};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Points closer than this to a norm kink are resampled.
pub const SINGULARITY_MARGIN: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every component.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidConfig(
            "step must be positive and finite".into(),
        ));
    }
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            if up.is_finite() && down.is_finite() {
                Ok((up - down) / (2.0 * h))
            } else {
                Err(Error::NonFiniteEvaluation { component: i })
            }
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-8)` with Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|c| c * c).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradFailure {
    pub index: usize,
    pub input: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub n_points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Sorted by index.
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub pred: Pose,
    pub gt: Pose,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

fn pose_vector(p: &Pose) -> [f64; 7] {
    let q = p.rotation;
    [p.position.x, p.position.y, p.position.z, q.w, q.x, q.y, q.z]
}

fn pose_from_vector(v: &[f64]) -> Pose {
    Pose::new(
        Vec3::new(v[0], v[1], v[2]),
        Quaternion::new(v[3], v[4], v[5], v[6]),
    )
}

/// Random differentiable loss inputs: positions in `[-5, 5]^3`, uniform unit
/// ground-truth rotations, predicted quaternion components in `[-1, 1]`, and
/// at least [`SINGULARITY_MARGIN`] from every norm kink.
pub fn sample_loss_inputs(n: usize, seed: u64) -> Vec<LossSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut v3 = || {
            Vec3::new(
                rng.random_range(-5.0..=5.0),
                rng.random_range(-5.0..=5.0),
                rng.random_range(-5.0..=5.0),
            )
        };
        let (gp, pp) = (v3(), v3());
        let g: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let Ok(gq) = normalize(Quaternion::from_array(g)) else {
            continue;
        };
        let pq = Quaternion::from_array(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)));
        let alpha = rng.random_range(0.1..=2.0);
        let beta = rng.random_range(1.0..=500.0);
        let gamma = rng.random_range(0.0..=20.0);
        if (pp - gp).norm() < SINGULARITY_MARGIN || (pq - *gq).norm() < SINGULARITY_MARGIN {
            continue;
        }
        out.push(LossSample {
            pred: Pose::new(pp, pq),
            gt: Pose::new(gp, gq.quaternion()),
            alpha,
            beta,
            gamma,
        });
    }
    out
}

/// Analytic and numeric gradients of the proposed loss at one input.
pub fn check_loss_point(s: &LossSample, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let analytic = loss_gradient(&s.pred, &s.gt, s.alpha, s.beta, s.gamma)?
        .to_array()
        .to_vec();
    let numeric = central_difference(
        |x| proposed_loss(&pose_from_vector(x), &s.gt, s.alpha, s.beta, s.gamma).total,
        &pose_vector(&s.pred),
        h,
    )?;
    Ok((analytic, numeric))
}

fn summarize(
    n_points: usize,
    h: f64,
    tol: f64,
    rows: Vec<(usize, String, Vec<f64>, Vec<f64>)>,
) -> GradCheckReport {
    let mut max_rel_error: f64 = 0.0;
    let mut failures = Vec::new();
    for (index, input, analytic, numeric) in rows {
        let rel_error = relative_error(&analytic, &numeric);
        max_rel_error = max_rel_error.max(rel_error);
        if rel_error > tol {
            failures.push(GradFailure {
                index,
                input,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    failures.sort_by_key(|f| f.index);
    GradCheckReport {
        n_points,
        step: h,
        tolerance: tol,
        max_rel_error,
        failures,
    }
}

/// Compares [`loss_gradient`] with central differences on `n_samples`
/// seeded random inputs.
pub fn check_loss_gradients(n_samples: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let rows = sample_loss_inputs(n_samples, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (a, n) = check_loss_point(s, DEFAULT_STEP)?;
            let input = serde_json::to_string(s).expect("sample serializes");
            Ok((i, input, a, n))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(n_samples, DEFAULT_STEP, tol, rows))
}

/// Backpropagated gradient of the mean multi-head loss over `frames` against
/// central differences, on `n_params` parameters drawn at random. The
/// relative error is taken over the sampled subvector as a whole.
pub fn check_model_gradients(
    model: &RegressorModel,
    frames: &[&Frame],
    weights: &LossWeights,
    n_params: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let total = model.param_count();
    if n_params == 0 || n_params > total {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {n_params} of {total} parameters"
        )));
    }
    let (_, grad) = batch_loss_and_grad(model, frames, weights)?;
    let grads: Vec<f64> = grad.params().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, total, n_params).into_vec();
    picked.sort_unstable();

    let base: Vec<f64> = model.params().copied().collect();
    let x: Vec<f64> = picked.iter().map(|&i| base[i]).collect();
    let numeric = central_difference(
        |sub| {
            let mut m = model.clone();
            let mut vals = base.clone();
            for (&i, v) in picked.iter().zip(sub) {
                vals[i] = *v;
            }
            for (p, v) in m.params_mut().zip(vals) {
                *p = v;
            }
            batch_loss(&m, frames, weights).map_or(f64::NAN, |l| l.total)
        },
        &x,
        h,
    )?;
    let analytic: Vec<f64> = picked.iter().map(|&i| grads[i]).collect();
    let input = format!("parameters {picked:?}");
    Ok(summarize(
        n_params,
        h,
        tol,
        vec![(0, input, analytic, numeric)],
    ))
}
