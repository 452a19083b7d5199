//! Grid search over the line-of-sight weight gamma.
//!
//! Validation frames are carved from the end of the training split (by id);
//! the test split never enters the search.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, SceneDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DEFAULT_BINS};
use crate::geom::Vec3;
use crate::model::{train, TrainConfig};

pub const MIN_VALIDATION_FRAMES: usize = 10;

pub const SELECTION_RULE: &str =
    "min validation median position error; ties: smaller median rotation error, then smaller gamma";

/// Multiples of the largest scene extent tried by default.
pub const GAMMA_SCALE_FACTORS: [f64; 5] = [0.0, 0.1, 0.3, 1.0, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub gamma_values: Vec<f64>,
    pub base_cfg: TrainConfig,
    pub val_fraction: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_values.is_empty() {
            return Err(Error::InvalidConfig("gamma grid is empty".into()));
        }
        if !self.gamma_values.iter().all(|g| g.is_finite() && *g >= 0.0) {
            return Err(Error::InvalidConfig(
                "gamma values must be finite and non-negative".into(),
            ));
        }
        if !self.gamma_values.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "gamma values must be sorted ascending without duplicates".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "validation fraction must be in (0, 1)".into(),
            ));
        }
        self.base_cfg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub gamma: f64,
    pub val_median_pos_m: f64,
    pub val_median_rot_deg: f64,
    pub val_median_los_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best_gamma: f64,
    pub selection_rule: String,
    pub n_fit: usize,
    pub n_validation: usize,
}

/// `{0, 0.1, 0.3, 1, 3}` times the largest extent.
pub fn default_gamma_grid(extents: Vec3) -> Vec<f64> {
    let s = extents.max_component();
    GAMMA_SCALE_FACTORS.iter().map(|f| f * s).collect()
}

/// Splits training frames into (fit, validation): the last
/// `ceil(len * val_fraction)` frames by id order go to validation.
pub fn split_validation(train: &[Frame], val_fraction: f64) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let mut sorted: Vec<Frame> = train.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n_val = (sorted.len() as f64 * val_fraction).ceil() as usize;
    if n_val < MIN_VALIDATION_FRAMES || n_val >= sorted.len() {
        return Err(Error::InsufficientData(format!(
            "{} training frames cannot give a validation split of at least {MIN_VALIDATION_FRAMES} \
             frames and a non-empty fitting split at fraction {val_fraction}",
            sorted.len()
        )));
    }
    let val = sorted.split_off(sorted.len() - n_val);
    Ok((sorted, val))
}

fn better(a: &GridRow, b: &GridRow) -> Ordering {
    a.val_median_pos_m
        .total_cmp(&b.val_median_pos_m)
        .then(a.val_median_rot_deg.total_cmp(&b.val_median_rot_deg))
        .then(a.gamma.total_cmp(&b.gamma))
}

pub fn select_best(rows: &[GridRow]) -> Option<f64> {
    rows.iter().min_by(|a, b| better(a, b)).map(|r| r.gamma)
}

fn search_training_split(
    name: &str,
    extents: Vec3,
    feature_dim: usize,
    train_split: &[Frame],
    spec: &GridSpec,
) -> Result<GridResult> {
    let (fit, val) = split_validation(train_split, spec.val_fraction)?;
    let inner = SceneDataset {
        name: format!("{name}/validation"),
        extents,
        feature_dim,
        train: fit,
        test: val,
    };
    let mut rows = spec
        .gamma_values
        .par_iter()
        .map(|&gamma| {
            let cfg = TrainConfig {
                weights: spec.base_cfg.weights.with_gamma(gamma),
                ..spec.base_cfg.clone()
            };
            let (model, _) = train(&inner, &cfg)?;
            let r = evaluate(&model, &inner, DEFAULT_BINS, DEFAULT_BINS)?;
            Ok(GridRow {
                gamma,
                val_median_pos_m: r.median_pos_m,
                val_median_rot_deg: r.median_rot_deg,
                val_median_los_deg: r.median_los_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    let best_gamma = select_best(&rows).expect("grid is non-empty");
    Ok(GridResult {
        rows,
        best_gamma,
        selection_rule: SELECTION_RULE.to_string(),
        n_fit: inner.train.len(),
        n_validation: inner.test.len(),
    })
}

/// Trains one model per gamma (same seed) on the fitting part of the training
/// split and picks the gamma with the lowest validation median position
/// error.
pub fn grid_search(ds: &SceneDataset, spec: &GridSpec) -> Result<GridResult> {
    spec.validate()?;
    search_training_split(&ds.name, ds.extents, ds.feature_dim, &ds.train, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    #[test]
    fn default_grid_examples() {
        assert_eq!(
            default_gamma_grid(Vec3::new(2.0, 0.5, 1.0)),
            vec![0.0, 0.2, 0.6, 2.0, 6.0]
        );
        assert_eq!(
            default_gamma_grid(Vec3::new(1.0, 1.0, 1.0)),
            vec![0.0, 0.1, 0.3, 1.0, 3.0]
        );
        let kings = default_gamma_grid(Vec3::new(140.0, 40.0, 1.0));
        for (g, e) in kings.iter().zip([0.0, 14.0, 42.0, 140.0, 420.0]) {
            assert!((g - e).abs() <= 1e-12 * e.max(1.0));
        }
    }

    #[test]
    fn selection_rule() {
        let row = |gamma, pos, rot| GridRow {
            gamma,
            val_median_pos_m: pos,
            val_median_rot_deg: rot,
            val_median_los_deg: 0.0,
        };
        assert_eq!(
            select_best(&[row(0.0, 0.3, 5.0), row(1.0, 0.2, 4.0), row(2.0, 0.25, 3.0)]),
            Some(1.0)
        );
        assert_eq!(
            select_best(&[row(0.0, 0.2, 5.0), row(1.0, 0.2, 4.0)]),
            Some(1.0)
        );
        assert_eq!(
            select_best(&[row(0.0, 0.2, 4.0), row(1.0, 0.2, 4.0)]),
            Some(0.0)
        );
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn spec_validation() {
        let ok = GridSpec {
            gamma_values: vec![0.0, 1.0],
            base_cfg: TrainConfig::default(),
            val_fraction: 0.2,
        };
        assert!(ok.validate().is_ok());
        for bad in [
            GridSpec {
                gamma_values: vec![],
                ..ok.clone()
            },
            GridSpec {
                gamma_values: vec![1.0, 0.0],
                ..ok.clone()
            },
            GridSpec {
                gamma_values: vec![0.0, 0.0],
                ..ok.clone()
            },
            GridSpec {
                gamma_values: vec![-1.0],
                ..ok.clone()
            },
            GridSpec {
                val_fraction: 1.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn validation_split_takes_last_ids() {
        let ds = synth_scene(Vec3::new(2.0, 0.5, 1.0), 100, 10, 4, 0.0, 0).unwrap();
        let mut shuffled = ds.train.clone();
        shuffled.reverse();
        let (fit, val) = split_validation(&shuffled, 0.2).unwrap();
        assert_eq!((fit.len(), val.len()), (80, 20));
        assert!(fit.iter().all(|f| val.iter().all(|v| f.id < v.id)));
        assert!(matches!(
            split_validation(&ds.train[..40], 0.2),
            Err(Error::InsufficientData(_))
        ));
    }

    fn quick_spec(gammas: Vec<f64>) -> GridSpec {
        GridSpec {
            gamma_values: gammas,
            base_cfg: TrainConfig {
                iterations: 150,
                hidden_dim: 16,
                ..TrainConfig::default()
            },
            val_fraction: 0.2,
        }
    }

    #[test]
    fn single_candidate_and_determinism() {
        let ds = synth_scene(Vec3::new(2.0, 0.5, 1.0), 120, 30, 6, 0.01, 0).unwrap();
        let r = grid_search(&ds, &quick_spec(vec![0.0])).unwrap();
        assert_eq!(r.best_gamma, 0.0);
        assert_eq!(r.rows.len(), 1);

        let spec = quick_spec(vec![0.0, 0.5, 2.0]);
        let a = grid_search(&ds, &spec).unwrap();
        assert_eq!(a, grid_search(&ds, &spec).unwrap());
        assert_eq!(
            a.rows.iter().map(|r| r.gamma).collect::<Vec<_>>(),
            vec![0.0, 0.5, 2.0]
        );
        assert!(spec.gamma_values.contains(&a.best_gamma));
        assert_eq!((a.n_fit, a.n_validation), (96, 24));
    }

    #[test]
    fn test_split_is_never_read() {
        let ds = synth_scene(Vec3::new(2.0, 0.5, 1.0), 120, 30, 6, 0.01, 0).unwrap();
        let mut poisoned = ds.clone();
        for f in &mut poisoned.test {
            f.features.iter_mut().for_each(|v| *v = f64::NAN);
        }
        let spec = quick_spec(vec![0.0, 1.0]);
        assert_eq!(
            grid_search(&ds, &spec).unwrap(),
            grid_search(&poisoned, &spec).unwrap()
        );
    }
}
