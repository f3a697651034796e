//! Camera trajectory metrics: ATE, RPE and relative pose accuracy.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{rms, MetricError};
use crate::pose::{rotation_angle, umeyama, Pose};

/// Pair translations shorter than this have no defined direction.
pub const MIN_BASELINE: f64 = 1e-9;
pub const DEFAULT_MAX_THRESHOLD_DEG: f64 = 30.0;

/// Estimated and ground-truth camera-to-world poses, index-matched.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub est: Vec<Pose>,
    pub gt: Vec<Pose>,
}

impl TrajectoryPair {
    pub fn new(est: Vec<Pose>, gt: Vec<Pose>) -> Result<Self, MetricError> {
        if est.len() != gt.len() {
            return Err(MetricError::LengthMismatch {
                what: "trajectory",
                left: est.len(),
                right: gt.len(),
            });
        }
        Ok(Self { est, gt })
    }

    pub fn len(&self) -> usize {
        self.est.len()
    }

    pub fn is_empty(&self) -> bool {
        self.est.is_empty()
    }
}

/// RMS of camera-centre residuals after aligning the estimated centres to
/// the ground truth (similarity when `with_scale`, rigid otherwise).
pub fn ate(pair: &TrajectoryPair, with_scale: bool) -> Result<f64, MetricError> {
    if pair.len() < 3 {
        return Err(MetricError::TooFew {
            what: "poses",
            need: 3,
            got: pair.len(),
        });
    }
    let est: Vec<Vector3<f64>> = pair.est.iter().map(|p| *p.translation()).collect();
    let gt: Vec<Vector3<f64>> = pair.gt.iter().map(|p| *p.translation()).collect();
    let s = umeyama(&est, &gt, with_scale)?;
    Ok(rms(est.iter().zip(&gt).map(|(e, g)| (s.apply(e) - g).norm())))
}

/// ATE without any alignment.
pub fn ate_unaligned(pair: &TrajectoryPair) -> f64 {
    rms(pair
        .est
        .iter()
        .zip(&pair.gt)
        .map(|(e, g)| (e.translation() - g.translation()).norm()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rpe {
    /// RMS translation error, scene units.
    pub trans: f64,
    /// RMS rotation error, degrees.
    pub rot: f64,
    pub pairs: usize,
}

/// Relative pose error over a fixed frame delta.
pub fn rpe(pair: &TrajectoryPair, step: usize) -> Result<Rpe, MetricError> {
    let n = pair.len();
    if step == 0 || step >= n {
        return Err(MetricError::InvalidStep { step, len: n });
    }
    let mut trans = Vec::with_capacity(n - step);
    let mut rot = Vec::with_capacity(n - step);
    for i in 0..n - step {
        let d_gt = pair.gt[i].inverse().compose(&pair.gt[i + step]);
        let d_est = pair.est[i].inverse().compose(&pair.est[i + step]);
        let err = d_gt.inverse().compose(&d_est);
        trans.push(err.translation().norm());
        rot.push(rotation_angle(err.rotation()).to_degrees());
    }
    Ok(Rpe {
        trans: rms(trans),
        rot: rms(rot),
        pairs: n - step,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelPoseAccuracy {
    pub rra: f64,
    pub rta: f64,
    pub auc: f64,
    pub threshold: f64,
    pub pairs: usize,
    /// Pairs dropped for a zero-length baseline.
    pub skipped: usize,
}

/// Per-pair rotation and translation-direction errors in degrees, for all
/// ordered pairs `i < j`. Returns `(errors, skipped)`.
pub fn pairwise_errors(pair: &TrajectoryPair) -> (Vec<(f64, f64)>, usize) {
    let n = pair.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut skipped = 0;
    for i in 0..n {
        for j in i + 1..n {
            let rel_gt = pair.gt[i].inverse().compose(&pair.gt[j]);
            let rel_est = pair.est[i].inverse().compose(&pair.est[j]);
            let (tg, te) = (rel_gt.translation(), rel_est.translation());
            if tg.norm() < MIN_BASELINE || te.norm() < MIN_BASELINE {
                skipped += 1;
                continue;
            }
            let r_err = rotation_angle(&(rel_gt.rotation().transpose() * rel_est.rotation())).to_degrees();
            let cos = (tg.dot(te) / (tg.norm() * te.norm())).clamp(-1.0, 1.0);
            let t_err = cos.acos().to_degrees();
            out.push((r_err, t_err.min(180.0 - t_err)));
        }
    }
    (out, skipped)
}

fn percent_below(errors: &[(f64, f64)], thr: f64, pick: impl Fn(&(f64, f64)) -> f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|e| pick(e) < thr).count() as f64 / errors.len() as f64
}

/// RRA and RTA at `max_threshold` degrees, and the area under
/// `min(RRA(θ), RTA(θ))` for integer θ in `1..=max_threshold`, normalised
/// so a perfect estimate scores 100.
pub fn rel_pose_accuracy(pair: &TrajectoryPair, max_threshold: f64) -> Result<RelPoseAccuracy, MetricError> {
    if pair.len() < 2 {
        return Err(MetricError::TooFew {
            what: "poses",
            need: 2,
            got: pair.len(),
        });
    }
    let (errors, skipped) = pairwise_errors(pair);
    if errors.is_empty() {
        return Err(MetricError::ZeroBaseline);
    }
    let rra = percent_below(&errors, max_threshold, |e| e.0);
    let rta = percent_below(&errors, max_threshold, |e| e.1);
    let steps = max_threshold.floor() as usize;
    let curve: Vec<f64> = (1..=steps)
        .map(|th| {
            let th = th as f64;
            percent_below(&errors, th, |e| e.0).min(percent_below(&errors, th, |e| e.1))
        })
        .collect();
    let auc = if curve.len() < 2 {
        curve.first().copied().unwrap_or(0.0)
    } else {
        let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
        area / (curve.len() - 1) as f64
    };
    Ok(RelPoseAccuracy {
        rra,
        rta,
        auc,
        threshold: max_threshold,
        pairs: errors.len(),
        skipped,
    })
}

/// Mean tangent-space distance between estimated and ground-truth relative
/// poses, over every frame except the anchor: `|log(C_est C_gt^-1)|`.
pub fn pose_tangent_error(est_rel: &[Pose], gt_rel: &[Pose], anchor: usize) -> f64 {
    let errs: Vec<f64> = est_rel
        .iter()
        .zip(gt_rel)
        .enumerate()
        .filter(|(t, _)| *t != anchor)
        .map(|(_, (e, g))| {
            let d = e.compose(&g.inverse());
            match crate::pose::log_map(&d) {
                Ok(v) => v.norm(),
                // Beyond the log cutoff the error is at least pi.
                Err(_) => std::f64::consts::PI.hypot(d.translation().norm()),
            }
        })
        .collect();
    super::mean(&errs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::so3_exp;

    fn line(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                Pose::from_parts_unchecked(
                    so3_exp(&Vector3::new(0.0, 0.05 * i as f64, 0.0)),
                    Vector3::new(i as f64 * 0.3, 0.1 * (i as f64).sin(), 0.02 * (i * i) as f64),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_are_perfect() {
        let p = TrajectoryPair::new(line(6), line(6)).unwrap();
        assert!(ate(&p, true).unwrap() < 1e-12);
        let r = rpe(&p, 1).unwrap();
        assert!(r.trans < 1e-12 && r.rot < 1e-6);
        let a = rel_pose_accuracy(&p, 30.0).unwrap();
        assert_eq!((a.rra, a.rta, a.auc), (100.0, 100.0, 100.0));
    }

    #[test]
    fn ate_absorbs_similarity() {
        let gt = line(7);
        let g = Pose::from_parts_unchecked(so3_exp(&Vector3::new(0.3, -0.2, 0.9)), Vector3::new(1.0, 2.0, -3.0));
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| {
                let t = g.transform_point(p.translation()) * 2.5;
                Pose::from_parts_unchecked(g.rotation() * p.rotation(), t)
            })
            .collect();
        assert!(ate(&TrajectoryPair::new(est, gt).unwrap(), true).unwrap() < 1e-9);
    }

    #[test]
    fn rpe_closed_forms() {
        let gt = line(6);
        let theta = 0.1f64;
        let est: Vec<Pose> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| Pose::from_parts_unchecked(p.rotation() * so3_exp(&Vector3::new(0.0, theta * i as f64, 0.0)), *p.translation()))
            .collect();
        let r = rpe(&TrajectoryPair::new(est, gt.clone()).unwrap(), 1).unwrap();
        assert!((r.rot - theta.to_degrees()).abs() < 1e-9);

        let d = 0.07;
        let est: Vec<Pose> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| Pose::from_parts_unchecked(*p.rotation(), p.translation() + Vector3::new(d * i as f64, 0.0, 0.0)))
            .collect();
        let r = rpe(&TrajectoryPair::new(est, gt).unwrap(), 1).unwrap();
        assert!((r.trans - d).abs() < 1e-12, "{}", r.trans);
    }

    #[test]
    fn rotations_off_by_45_fail_rra() {
        let gt = line(5);
        let est: Vec<Pose> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| Pose::from_parts_unchecked(p.rotation() * so3_exp(&Vector3::new(0.0, 0.0, (45f64 * i as f64).to_radians())), *p.translation()))
            .collect();
        let a = rel_pose_accuracy(&TrajectoryPair::new(est, gt).unwrap(), 30.0).unwrap();
        assert_eq!(a.rra, 0.0);
    }

    #[test]
    fn zero_baseline_pairs_are_skipped() {
        let mut gt = line(4);
        gt[1] = Pose::from_parts_unchecked(*gt[1].rotation(), *gt[0].translation());
        let p = TrajectoryPair::new(gt.clone(), gt).unwrap();
        let a = rel_pose_accuracy(&p, 30.0).unwrap();
        assert_eq!(a.skipped, 1);
        assert_eq!(a.pairs, 5);
        let still = vec![Pose::identity(); 3];
        assert_eq!(
            rel_pose_accuracy(&TrajectoryPair::new(still.clone(), still).unwrap(), 30.0),
            Err(MetricError::ZeroBaseline)
        );
    }

    #[test]
    fn too_short_and_bad_step() {
        let p = TrajectoryPair::new(line(2), line(2)).unwrap();
        assert!(matches!(ate(&p, true), Err(MetricError::TooFew { .. })));
        assert!(matches!(rpe(&p, 2), Err(MetricError::InvalidStep { .. })));
        assert!(TrajectoryPair::new(line(2), line(3)).is_err());
    }
}
