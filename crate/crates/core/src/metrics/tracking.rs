//! 3D point-tracking metrics in the TAPVid-3D style.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::MetricError;

/// Visibility values at or above this count as "visible".
pub const VISIBLE_AT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum Thresholds {
    /// Threshold for a sample is `fraction * |p_gt|` (distance from the
    /// camera centre), one entry per fraction.
    DepthScaled(Vec<f64>),
    /// Fixed distances in scene units.
    Absolute(Vec<f64>),
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::DepthScaled(vec![0.01, 0.02, 0.04, 0.08, 0.16])
    }
}

impl Thresholds {
    pub fn len(&self) -> usize {
        match self {
            Thresholds::DepthScaled(v) | Thresholds::Absolute(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, k: usize, gt: &Vector3<f64>) -> f64 {
        match self {
            Thresholds::DepthScaled(v) => v[k] * gt.norm(),
            Thresholds::Absolute(v) => v[k],
        }
    }
}

/// Tracks with visibility, flattened as `i * T + t`.
#[derive(Clone, Copy, Debug)]
pub struct TrackView<'a> {
    pub points: &'a [Vector3<f64>],
    pub visibility: &'a [f64],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingScores {
    pub aj: f64,
    pub apd: f64,
    pub oa: f64,
}

/// Average Jaccard, average position accuracy and occlusion accuracy, all
/// in percent.
///
/// Per threshold, with `vis` meaning visibility >= 0.5:
/// - APD: share of gt-visible samples whose prediction is within threshold.
/// - Jaccard: `TP / (TP + FP + FN)` with TP = both visible and within,
///   FP = predicted visible but not a TP, FN = gt visible but not a TP.
///
/// OA is the share of samples where predicted and gt visibility agree.
pub fn tapvid3d_metrics(est: TrackView, gt: TrackView, thresholds: &Thresholds) -> Result<TrackingScores, MetricError> {
    let n = gt.points.len();
    for (what, len) in [
        ("estimated points", est.points.len()),
        ("estimated visibility", est.visibility.len()),
        ("gt visibility", gt.visibility.len()),
    ] {
        if len != n {
            return Err(MetricError::LengthMismatch { what, left: len, right: n });
        }
    }
    if n == 0 {
        return Err(MetricError::TooFew {
            what: "track samples",
            need: 1,
            got: 0,
        });
    }
    if thresholds.is_empty() {
        return Err(MetricError::TooFew {
            what: "thresholds",
            need: 1,
            got: 0,
        });
    }
    let agree = (0..n)
        .filter(|&k| (est.visibility[k] >= VISIBLE_AT) == (gt.visibility[k] >= VISIBLE_AT))
        .count();
    let oa = 100.0 * agree as f64 / n as f64;

    let n_gt_vis = gt.visibility.iter().filter(|&&v| v >= VISIBLE_AT).count();
    let mut apd_sum = 0.0;
    let mut aj_sum = 0.0;
    for k in 0..thresholds.len() {
        let (mut within_vis, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for s in 0..n {
            let g_vis = gt.visibility[s] >= VISIBLE_AT;
            let p_vis = est.visibility[s] >= VISIBLE_AT;
            let within = (est.points[s] - gt.points[s]).norm() < thresholds.at(k, &gt.points[s]);
            if g_vis && within {
                within_vis += 1;
            }
            let hit = g_vis && p_vis && within;
            if hit {
                tp += 1;
            } else {
                if p_vis {
                    fp += 1;
                }
                if g_vis {
                    fn_ += 1;
                }
            }
        }
        apd_sum += if n_gt_vis == 0 { 0.0 } else { within_vis as f64 / n_gt_vis as f64 };
        let denom = tp + fp + fn_;
        // Nothing visible anywhere and nothing predicted: perfect agreement.
        aj_sum += if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    }
    let m = thresholds.len() as f64;
    Ok(TrackingScores {
        aj: 100.0 * aj_sum / m,
        apd: 100.0 * apd_sum / m,
        oa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracks() {
        let pts: Vec<Vector3<f64>> = (0..12).map(|k| Vector3::new(k as f64 * 0.1, 0.2, 1.5)).collect();
        let vis: Vec<f64> = (0..12).map(|k| if k % 5 == 0 { 0.0 } else { 1.0 }).collect();
        let v = TrackView { points: &pts, visibility: &vis };
        let s = tapvid3d_metrics(v, v, &Thresholds::default()).unwrap();
        assert_eq!((s.aj, s.apd, s.oa), (100.0, 100.0, 100.0));
    }

    #[test]
    fn far_tracks_score_zero_apd() {
        let gt: Vec<Vector3<f64>> = (0..6).map(|k| Vector3::new(0.0, k as f64, 2.0)).collect();
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| p + Vector3::new(10.0, 0.0, 0.0)).collect();
        let vis = vec![1.0; 6];
        let s = tapvid3d_metrics(
            TrackView { points: &est, visibility: &vis },
            TrackView { points: &gt, visibility: &vis },
            &Thresholds::default(),
        )
        .unwrap();
        assert_eq!(s.apd, 0.0);
        assert_eq!(s.aj, 0.0);
        assert_eq!(s.oa, 100.0);
    }
}
