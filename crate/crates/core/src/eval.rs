//! Median positional / rotational error, line-of-sight angle, and cumulative
//! error histograms over a test split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SceneDataset;
use crate::error::{Error, Result};
use crate::geom::{angular_distance_deg, line_of_sight_cos, normalize, Pose, UnitQuaternion};
use crate::model::{predict, RegressorModel};

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub upper_edge: f64,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub n_frames: usize,
    pub median_pos_m: f64,
    pub median_rot_deg: f64,
    pub median_los_deg: f64,
    /// Upper edges in metres.
    pub pos_histogram: Vec<HistogramBin>,
    /// Upper edges in degrees.
    pub rot_histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameErrors {
    pub pos_m: f64,
    pub rot_deg: f64,
    pub los_deg: f64,
}

/// Errors of one prediction. The predicted rotation is normalized first.
pub fn frame_errors(pred: &Pose, gt: &Pose) -> Result<FrameErrors> {
    let q_pred = normalize(pred.rotation)?;
    let q_gt = UnitQuaternion::try_new(gt.rotation)?;
    Ok(FrameErrors {
        pos_m: (pred.position - gt.position).norm(),
        rot_deg: angular_distance_deg(q_pred, q_gt),
        los_deg: line_of_sight_cos(gt, pred.position).acos().to_degrees(),
    })
}

/// Lower median: element `floor((n - 1) / 2)` of the sorted input.
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = xs.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

/// Cumulative fraction of `errors` at or below each of `bins` uniform edges
/// spanning `(0, max]`. The last edge is the maximum itself, so the final
/// fraction is exactly 1.
pub fn cumulative_histogram(errors: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::InvalidConfig(
            "histogram needs at least one bin".into(),
        ));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().unwrap();
    let n = sorted.len() as f64;
    Ok((1..=bins)
        .map(|k| {
            let edge = if k == bins {
                max
            } else {
                max * k as f64 / bins as f64
            };
            let count = sorted.partition_point(|e| *e <= edge);
            HistogramBin {
                upper_edge: edge,
                cumulative_fraction: count as f64 / n,
            }
        })
        .collect())
}

/// Builds a report from per-frame errors.
pub fn report_from_errors(
    scene: &str,
    errors: &[FrameErrors],
    bins_pos: usize,
    bins_rot: usize,
) -> Result<EvalReport> {
    if errors.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let pos: Vec<f64> = errors.iter().map(|e| e.pos_m).collect();
    let rot: Vec<f64> = errors.iter().map(|e| e.rot_deg).collect();
    let los: Vec<f64> = errors.iter().map(|e| e.los_deg).collect();
    Ok(EvalReport {
        scene: scene.to_string(),
        n_frames: errors.len(),
        median_pos_m: median(&pos)?,
        median_rot_deg: median(&rot)?,
        median_los_deg: median(&los)?,
        pos_histogram: cumulative_histogram(&pos, bins_pos)?,
        rot_histogram: cumulative_histogram(&rot, bins_rot)?,
    })
}

pub fn evaluate(
    model: &RegressorModel,
    ds: &SceneDataset,
    bins_pos: usize,
    bins_rot: usize,
) -> Result<EvalReport> {
    if ds.test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let errors = ds
        .test
        .par_iter()
        .map(|f| frame_errors(&predict(model, &f.features)?, &f.pose))
        .collect::<Result<Vec<_>>>()?;
    report_from_errors(&ds.name, &errors, bins_pos, bins_rot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub a: f64,
    pub b: f64,
    /// `b - a`; negative means `b` improved.
    pub delta: f64,
    /// `(b - a) / a * 100` from unrounded medians; absent when `a` is zero.
    pub percent: Option<f64>,
    /// `percent` rounded to one decimal.
    pub percent_display: Option<f64>,
}

impl MetricDelta {
    fn new(a: f64, b: f64) -> Self {
        let percent = (a != 0.0).then(|| (b - a) / a * 100.0);
        Self {
            a,
            b,
            delta: b - a,
            percent,
            percent_display: percent.map(|p| (p * 10.0).round() / 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub scene: String,
    pub n_frames: usize,
    pub position_m: MetricDelta,
    pub rotation_deg: MetricDelta,
    pub los_deg: MetricDelta,
}

/// Differences of `b`'s medians relative to `a`'s.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportComparison> {
    if a.scene != b.scene || a.n_frames != b.n_frames {
        return Err(Error::SceneMismatch {
            a: format!("{} ({} frames)", a.scene, a.n_frames),
            b: format!("{} ({} frames)", b.scene, b.n_frames),
        });
    }
    Ok(ReportComparison {
        scene: a.scene.clone(),
        n_frames: a.n_frames,
        position_m: MetricDelta::new(a.median_pos_m, b.median_pos_m),
        rotation_deg: MetricDelta::new(a.median_rot_deg, b.median_rot_deg),
        los_deg: MetricDelta::new(a.median_los_deg, b.median_los_deg),
    })
}
