//! Pose regression losses and their gradients with respect to the prediction.
//!
//! * default: `alpha * |p_hat - p| + beta * |q_hat - q|` (unsquared norms,
//!   raw predicted quaternion)
//! * line-of-sight: `1 - cos(theta)`, theta being the angle between the true
//!   viewing direction and `p - p_hat`
//! * proposed: default plus `gamma` times the line-of-sight term
//! * multi-head: the proposed loss summed over every regressor head, each
//!   with its own `(alpha, beta)` and a shared `gamma`

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{line_of_sight_cos, viewing_direction_of, Pose, Vec3, LOS_DEGENERACY_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub heads: Vec<HeadWeights>,
    pub gamma: f64,
}

impl LossWeights {
    /// PoseNet's three-regressor weighting: alpha = (0.3, 0.3, 1),
    /// beta = (150, 150, 500).
    pub fn posenet(gamma: f64) -> Self {
        Self {
            heads: vec![
                HeadWeights {
                    alpha: 0.3,
                    beta: 150.0,
                },
                HeadWeights {
                    alpha: 0.3,
                    beta: 150.0,
                },
                HeadWeights {
                    alpha: 1.0,
                    beta: 500.0,
                },
            ],
            gamma,
        }
    }

    pub fn single(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            heads: vec![HeadWeights { alpha, beta }],
            gamma,
        }
    }

    pub fn from_lists(alphas: &[f64], betas: &[f64], gamma: f64) -> Result<Self> {
        if alphas.len() != betas.len() {
            return Err(Error::InvalidConfig(format!(
                "{} alphas but {} betas",
                alphas.len(),
                betas.len()
            )));
        }
        let w = Self {
            heads: alphas
                .iter()
                .zip(betas)
                .map(|(&alpha, &beta)| HeadWeights { alpha, beta })
                .collect(),
            gamma,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            heads: self.heads.clone(),
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::InvalidConfig("at least one head is required".into()));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !self.heads.iter().all(|h| ok(h.alpha) && ok(h.beta)) || !ok(self.gamma) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub position_term: f64,
    pub rotation_term: f64,
    pub los_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms(position_term: f64, rotation_term: f64, los_term: f64) -> Self {
        Self {
            position_term,
            rotation_term,
            los_term,
            total: position_term + rotation_term + los_term,
        }
    }

    pub fn scaled(self, s: f64) -> Self {
        Self {
            position_term: self.position_term * s,
            rotation_term: self.rotation_term * s,
            los_term: self.los_term * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.position_term.is_finite()
            && self.rotation_term.is_finite()
            && self.los_term.is_finite()
    }
}

impl Add for LossBreakdown {
    type Output = LossBreakdown;
    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            position_term: self.position_term + o.position_term,
            rotation_term: self.rotation_term + o.rotation_term,
            los_term: self.los_term + o.los_term,
            total: self.total + o.total,
        }
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: LossBreakdown) {
        *self = *self + o;
    }
}

/// Gradient of a loss with respect to one predicted pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseGradient {
    pub d_position: Vec3,
    /// With respect to the unnormalized `(w, x, y, z)` components.
    pub d_rotation: [f64; 4],
}

impl PoseGradient {
    pub fn to_array(&self) -> [f64; 7] {
        let p = self.d_position;
        let r = self.d_rotation;
        [p.x, p.y, p.z, r[0], r[1], r[2], r[3]]
    }
}

fn rotation_error(pred: &Pose, gt: &Pose) -> [f64; 4] {
    (pred.rotation - gt.rotation).to_array()
}

fn norm4(v: &[f64; 4]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn default_loss(pred: &Pose, gt: &Pose, alpha: f64, beta: f64) -> LossBreakdown {
    let pos = alpha * (pred.position - gt.position).norm();
    let rot = beta * norm4(&rotation_error(pred, gt));
    LossBreakdown::from_terms(pos, rot, 0.0)
}

/// `1 - cos(theta)`, in `[0, 2]`.
pub fn line_of_sight_term(pred: &Pose, gt: &Pose) -> f64 {
    1.0 - line_of_sight_cos(gt, pred.position)
}

pub fn proposed_loss(pred: &Pose, gt: &Pose, alpha: f64, beta: f64, gamma: f64) -> LossBreakdown {
    let base = default_loss(pred, gt, alpha, beta);
    if gamma == 0.0 {
        return base;
    }
    let los = gamma * line_of_sight_term(pred, gt);
    LossBreakdown::from_terms(base.position_term, base.rotation_term, los)
}

pub fn multi_head_loss(preds: &[Pose], gt: &Pose, w: &LossWeights) -> Result<LossBreakdown> {
    check_heads(preds, w)?;
    Ok(preds
        .iter()
        .zip(&w.heads)
        .map(|(p, h)| proposed_loss(p, gt, h.alpha, h.beta, w.gamma))
        .fold(LossBreakdown::default(), Add::add))
}

fn check_heads(preds: &[Pose], w: &LossWeights) -> Result<()> {
    if preds.len() != w.heads.len() {
        return Err(Error::HeadCountMismatch {
            expected: w.heads.len(),
            got: preds.len(),
        });
    }
    Ok(())
}

/// Exact gradient of [`proposed_loss`]`.total` with respect to the prediction.
///
/// Fails with `NonDifferentiablePoint` when a norm term with a nonzero weight
/// sits at (within [`LOS_DEGENERACY_EPS`] of) its kink; callers that want a
/// subgradient there should use [`loss_subgradient`].
pub fn loss_gradient(
    pred: &Pose,
    gt: &Pose,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<PoseGradient> {
    let dp = (pred.position - gt.position).norm();
    if alpha != 0.0 && dp <= LOS_DEGENERACY_EPS {
        return Err(Error::NonDifferentiablePoint {
            term: "position",
            norm: dp,
        });
    }
    let dq = norm4(&rotation_error(pred, gt));
    if beta != 0.0 && dq <= LOS_DEGENERACY_EPS {
        return Err(Error::NonDifferentiablePoint {
            term: "rotation",
            norm: dq,
        });
    }
    if gamma != 0.0 && dp <= LOS_DEGENERACY_EPS {
        return Err(Error::NonDifferentiablePoint {
            term: "line-of-sight",
            norm: dp,
        });
    }
    Ok(loss_subgradient(pred, gt, alpha, beta, gamma))
}

/// Gradient of [`proposed_loss`] using zero for any term at its kink.
pub fn loss_subgradient(pred: &Pose, gt: &Pose, alpha: f64, beta: f64, gamma: f64) -> PoseGradient {
    let mut g = PoseGradient::default();

    let dpos = pred.position - gt.position;
    let dp = dpos.norm();
    if alpha != 0.0 && dp > LOS_DEGENERACY_EPS {
        g.d_position = dpos * (alpha / dp);
    }

    let drot = rotation_error(pred, gt);
    let dq = norm4(&drot);
    if beta != 0.0 && dq > LOS_DEGENERACY_EPS {
        for (out, d) in g.d_rotation.iter_mut().zip(drot) {
            *out = beta * d / dq;
        }
    }

    // term = 1 - v.D / (|v| |D|), D = p - p_hat, so
    // d term / d p_hat = (v_hat - cos * D_hat) / |D|.
    if gamma != 0.0 && dp > LOS_DEGENERACY_EPS {
        let v = viewing_direction_of(gt.rotation);
        let v_hat = v * (1.0 / v.norm());
        let delta = gt.position - pred.position;
        let d_hat = delta * (1.0 / dp);
        let cos = v_hat.dot(d_hat);
        g.d_position += (v_hat - d_hat * cos) * (gamma / dp);
    }
    g
}

/// Per-head subgradients of [`multi_head_loss`].
pub fn multi_head_subgradient(
    preds: &[Pose],
    gt: &Pose,
    w: &LossWeights,
) -> Result<Vec<PoseGradient>> {
    check_heads(preds, w)?;
    Ok(preds
        .iter()
        .zip(&w.heads)
        .map(|(p, h)| loss_subgradient(p, gt, h.alpha, h.beta, w.gamma))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{normalize, Quaternion, UnitQuaternion};
    use proptest::prelude::*;

    fn origin_looking_z() -> Pose {
        Pose::new(Vec3::ZERO, Quaternion::IDENTITY)
    }

    fn at(p: Vec3) -> Pose {
        Pose::new(p, Quaternion::IDENTITY)
    }

    #[test]
    fn default_loss_examples() {
        let gt = Pose::new(
            Vec3::new(1.0, -2.0, 0.5),
            Quaternion::new(0.5, 0.5, 0.5, 0.5),
        );
        assert_eq!(default_loss(&gt, &gt, 1.0, 1.0).total, 0.0);

        let mut pred = gt;
        pred.position = gt.position + Vec3::new(3.0, 4.0, 0.0);
        let l = default_loss(&pred, &gt, 1.0, 500.0);
        assert!((l.total - 5.0).abs() < 1e-12);
        assert_eq!(l.rotation_term, 0.0);

        let mut pred = gt;
        pred.rotation = gt.rotation + Quaternion::new(0.1, 0.0, 0.0, 0.0);
        let l = default_loss(&pred, &gt, 0.3, 150.0);
        assert!((l.total - 15.0).abs() < 1e-12);
        assert_eq!(l.los_term, 0.0);
    }

    #[test]
    fn line_of_sight_examples() {
        let gt = origin_looking_z();
        assert_eq!(line_of_sight_term(&gt, &gt), 0.0);
        assert_eq!(line_of_sight_term(&at(Vec3::new(0.0, 0.0, -1.0)), &gt), 0.0);
        assert_eq!(line_of_sight_term(&at(Vec3::new(0.0, 1.0, 0.0)), &gt), 1.0);
        assert_eq!(line_of_sight_term(&at(Vec3::new(0.0, 0.0, 1.0)), &gt), 2.0);
    }

    #[test]
    fn proposed_loss_examples() {
        let gt = origin_looking_z();
        let pred = Pose::new(
            Vec3::new(0.4, -1.0, 2.0),
            Quaternion::new(0.9, 0.1, 0.0, -0.2),
        );
        assert_eq!(
            proposed_loss(&pred, &gt, 0.7, 3.0, 0.0),
            default_loss(&pred, &gt, 0.7, 3.0)
        );
        assert_eq!(proposed_loss(&gt, &gt, 1.0, 1.0, 5.0).total, 0.0);
        let l = proposed_loss(&at(Vec3::new(0.0, 1.0, 0.0)), &gt, 0.0, 0.0, 2.0);
        assert_eq!(l.total, 2.0);
        assert_eq!(l.los_term, 2.0);
    }

    #[test]
    fn multi_head_examples() {
        let gt = Pose::new(
            Vec3::new(0.2, 0.1, -0.3),
            Quaternion::new(0.5, -0.5, 0.5, 0.5),
        );
        let w = LossWeights::posenet(3.0);
        assert_eq!(multi_head_loss(&[gt; 3], &gt, &w).unwrap().total, 0.0);

        let pred = Pose::new(
            Vec3::new(1.0, 2.0, 3.0),
            Quaternion::new(0.0, 1.0, 0.0, 0.0),
        );
        let single = multi_head_loss(&[pred], &gt, &LossWeights::single(1.0, 1.0, 0.0)).unwrap();
        assert_eq!(single, default_loss(&pred, &gt, 1.0, 1.0));

        let mut shifted = gt;
        shifted.position = gt.position + Vec3::new(1.0, 0.0, 0.0);
        let l = multi_head_loss(&[shifted; 3], &gt, &LossWeights::posenet(0.0)).unwrap();
        // 0.3 + 0.3 + 1 summed by hand
        assert!((l.total - 1.6).abs() < 1e-12);

        assert!(matches!(
            multi_head_loss(&[gt; 2], &gt, &w),
            Err(Error::HeadCountMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn gradient_examples() {
        let gt = origin_looking_z();
        let pred = Pose::new(
            Vec3::new(3.0, 0.0, 4.0),
            Quaternion::new(1.0, 0.2, 0.0, 0.0),
        );
        let g = loss_gradient(&pred, &gt, 1.0, 0.0, 0.0).unwrap();
        assert!((g.d_position - Vec3::new(0.6, 0.0, 0.8)).norm() < 1e-15);
        assert_eq!(g.d_rotation, [0.0; 4]);

        let g = loss_gradient(&pred, &gt, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(g.d_position, Vec3::ZERO);
        assert!((g.d_rotation[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_rejects_kinks() {
        let gt = origin_looking_z();
        let same_pos = Pose::new(Vec3::ZERO, Quaternion::new(0.0, 1.0, 0.0, 0.0));
        assert!(matches!(
            loss_gradient(&same_pos, &gt, 1.0, 1.0, 0.0),
            Err(Error::NonDifferentiablePoint {
                term: "position",
                ..
            })
        ));
        assert!(matches!(
            loss_gradient(&same_pos, &gt, 0.0, 1.0, 1.0),
            Err(Error::NonDifferentiablePoint {
                term: "line-of-sight",
                ..
            })
        ));
        let same_rot = at(Vec3::new(1.0, 0.0, 0.0));
        assert!(matches!(
            loss_gradient(&same_rot, &gt, 1.0, 1.0, 1.0),
            Err(Error::NonDifferentiablePoint {
                term: "rotation",
                ..
            })
        ));
        // zero weights make the kinks irrelevant
        let g = loss_gradient(&gt, &gt, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(g, PoseGradient::default());
        assert_eq!(
            loss_subgradient(&gt, &gt, 1.0, 1.0, 1.0),
            PoseGradient::default()
        );
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::posenet(1.0).validate().is_ok());
        assert!(LossWeights::single(-1.0, 1.0, 0.0).validate().is_err());
        assert!(LossWeights::single(1.0, 1.0, f64::NAN).validate().is_err());
        assert!(LossWeights {
            heads: vec![],
            gamma: 0.0
        }
        .validate()
        .is_err());
        assert!(LossWeights::from_lists(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-r..r).prop_map(|a| Vec3::from_slice(&a))
    }

    fn dyadic_vec3() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-5120i32..5120).prop_map(|a| {
            Vec3::new(
                a[0] as f64 / 1024.0,
                a[1] as f64 / 1024.0,
                a[2] as f64 / 1024.0,
            )
        })
    }

    fn unit_q() -> impl Strategy<Value = UnitQuaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("norm", |a| Quaternion::from_array(*a).norm() > 0.1)
            .prop_map(|a| normalize(Quaternion::from_array(a)).unwrap())
    }

    fn raw_q() -> impl Strategy<Value = Quaternion> {
        prop::array::uniform4(-1.0f64..1.0).prop_map(Quaternion::from_array)
    }

    proptest! {
        #[test]
        fn los_term_bounded(gp in vec3(5.0), q in unit_q(), pp in vec3(5.0)) {
            let t = line_of_sight_term(&at(pp), &Pose::new(gp, *q));
            prop_assert!((0.0..=2.0).contains(&t));
        }

        #[test]
        fn translation_invariance(
            gp in dyadic_vec3(), q in unit_q(), pp in dyadic_vec3(), pq in raw_q(),
            shift in prop::array::uniform3(-1000i32..1000),
        ) {
            // dyadic coordinates and integer shifts keep the subtraction exact
            let shift = Vec3::new(shift[0] as f64, shift[1] as f64, shift[2] as f64);
            let gt = Pose::new(gp, *q);
            let pred = Pose::new(pp, pq);
            let a = proposed_loss(&pred, &gt, 0.7, 30.0, 2.0);
            let b = proposed_loss(&Pose::new(pp + shift, pq), &Pose::new(gp + shift, *q), 0.7, 30.0, 2.0);
            let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
            prop_assert!(rel(a.position_term, b.position_term) <= 1e-12);
            prop_assert!(rel(a.rotation_term, b.rotation_term) <= 1e-12);
            prop_assert!((a.los_term - b.los_term).abs() <= 1e-12 * a.los_term.abs().max(1.0));
        }

        #[test]
        fn proposed_nonnegative_and_zero_at_truth(gp in vec3(5.0), q in unit_q(), pp in vec3(5.0), pq in raw_q()) {
            let gt = Pose::new(gp, *q);
            prop_assert!(proposed_loss(&Pose::new(pp, pq), &gt, 1.0, 10.0, 3.0).total >= 0.0);
            prop_assert_eq!(proposed_loss(&gt, &gt, 1.0, 10.0, 3.0).total, 0.0);
        }

        #[test]
        fn identical_heads_scale(gp in vec3(5.0), q in unit_q(), pp in vec3(5.0), pq in raw_q(), n in 1usize..6) {
            let gt = Pose::new(gp, *q);
            let pred = Pose::new(pp, pq);
            let w = LossWeights {
                heads: vec![HeadWeights { alpha: 0.3, beta: 150.0 }; n],
                gamma: 1.5,
            };
            let multi = multi_head_loss(&vec![pred; n], &gt, &w).unwrap().total;
            let one = proposed_loss(&pred, &gt, 0.3, 150.0, 1.5).total * n as f64;
            prop_assert!((multi - one).abs() <= 1e-12 * one.abs().max(1e-300));
        }

        #[test]
        fn breakdown_sums(gp in vec3(5.0), q in unit_q(), pp in vec3(5.0), pq in raw_q()) {
            let l = proposed_loss(&Pose::new(pp, pq), &Pose::new(gp, *q), 0.3, 150.0, 4.0);
            let s = l.position_term + l.rotation_term + l.los_term;
            prop_assert!((l.total - s).abs() <= 1e-12 * s.abs().max(1e-300));
        }
    }
}
