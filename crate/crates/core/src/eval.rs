//! Metric evaluation over prediction and ground-truth file sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::FrameSet;
use crate::metrics::depth::{depth_metrics, DepthOptions};
use crate::metrics::pointcloud::{pointmap_metrics, CloudOptions, CloudScores};
use crate::metrics::tracking::{tapvid3d_metrics, Thresholds, TrackView};
use crate::metrics::trajectory::{ate, rel_pose_accuracy, rpe, TrajectoryPair, DEFAULT_MAX_THRESHOLD_DEG};
use crate::metrics::{MetricError, MetricReport};
use crate::tracks::TrackSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricGroup {
    /// ATE, RPE, RRA/RTA/AUC from `poses.csv`.
    Trajectory,
    /// AJ, APD, OA from `tracks.csv`.
    Tracking,
    /// Accuracy, completion, normal consistency from `pointmaps/`, per
    /// frame.
    Pointmap,
    /// AbsRel and delta1 from `depth/`.
    Depth,
}

impl MetricGroup {
    pub const ALL: [MetricGroup; 4] = [
        MetricGroup::Trajectory,
        MetricGroup::Tracking,
        MetricGroup::Pointmap,
        MetricGroup::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricGroup::Trajectory => "trajectory",
            MetricGroup::Tracking => "tracking",
            MetricGroup::Pointmap => "pointmap",
            MetricGroup::Depth => "depth",
        }
    }

    /// Parses a comma-separated list; `all` selects every group.
    pub fn parse_list(s: &str) -> Result<Vec<MetricGroup>, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Self::ALL);
            } else {
                out.push(part.parse()?);
            }
        }
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err("empty metric selection".into());
        }
        Ok(out)
    }
}

impl fmt::Display for MetricGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown metric group {s:?} (expected trajectory, tracking, pointmap, depth or all)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Similarity (rather than rigid) alignment for ATE.
    pub ate_scale: bool,
    pub rpe_step: usize,
    /// RRA/RTA threshold and AUC range, degrees.
    pub max_angle: f64,
    pub tracking_thresholds: Thresholds,
    pub cloud: CloudOptions,
    pub depth: DepthOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ate_scale: true,
            rpe_step: 1,
            max_angle: DEFAULT_MAX_THRESHOLD_DEG,
            tracking_thresholds: Thresholds::default(),
            cloud: CloudOptions::default(),
            depth: DepthOptions::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rpe_step == 0 {
            return Err("rpe_step must be at least 1".into());
        }
        if !(self.max_angle >= 1.0) || !self.max_angle.is_finite() {
            return Err(format!("max_angle must be a finite angle >= 1 degree, got {}", self.max_angle));
        }
        if self.tracking_thresholds.is_empty() {
            return Err("tracking_thresholds must not be empty".into());
        }
        if self.cloud.normal_neighbours < 3 {
            return Err("cloud.normal_neighbours must be at least 3".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{side} is missing {what}")]
    Missing { side: &'static str, what: &'static str },
    #[error("{group}: {source}")]
    Metric {
        group: MetricGroup,
        #[source]
        source: MetricError,
    },
}

fn view(t: &TrackSet) -> TrackView<'_> {
    TrackView {
        points: &t.points,
        visibility: &t.visibility,
    }
}

fn both<'a, T>(pred: &'a Option<T>, gt: &'a Option<T>, what: &'static str) -> Result<(&'a T, &'a T), EvalError> {
    let p = pred.as_ref().ok_or(EvalError::Missing { side: "prediction", what })?;
    let g = gt.as_ref().ok_or(EvalError::Missing { side: "ground truth", what })?;
    Ok((p, g))
}

/// Computes the selected metric groups. Each group needs its files on both
/// sides. Pointmap scores are computed per frame in camera coordinates and
/// averaged over frames, so they do not depend on the poses.
pub fn evaluate_frame_sets(
    pred: &FrameSet,
    gt: &FrameSet,
    groups: &[MetricGroup],
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    let mut report = MetricReport::default();
    for &group in groups {
        let wrap = |source| EvalError::Metric { group, source };
        match group {
            MetricGroup::Trajectory => {
                let (p, g) = both(&pred.poses, &gt.poses, "poses.csv")?;
                let pair = TrajectoryPair::new(p.clone(), g.clone()).map_err(wrap)?;
                let align = if cfg.ate_scale { "sim3" } else { "se3" };
                report.push("ate", ate(&pair, cfg.ate_scale).map_err(wrap)?, &[("alignment", align.into())]);
                let r = rpe(&pair, cfg.rpe_step).map_err(wrap)?;
                let step = [("step", cfg.rpe_step.to_string())];
                report.push("rpe_trans", r.trans, &step);
                report.push("rpe_rot_deg", r.rot, &step);
                let a = rel_pose_accuracy(&pair, cfg.max_angle).map_err(wrap)?;
                let thr = cfg.max_angle.to_string();
                let meta = [("threshold_deg", thr), ("skipped_pairs", a.skipped.to_string())];
                report.push("rra", a.rra, &meta);
                report.push("rta", a.rta, &meta);
                report.push("auc", a.auc, &meta);
            }
            MetricGroup::Tracking => {
                let (p, g) = both(&pred.tracks, &gt.tracks, "tracks.csv")?;
                let s = tapvid3d_metrics(view(p), view(g), &cfg.tracking_thresholds).map_err(wrap)?;
                report.push("aj", s.aj, &[]);
                report.push("apd", s.apd, &[]);
                report.push("oa", s.oa, &[]);
            }
            MetricGroup::Pointmap => {
                let (p, g) = both(&pred.pointmaps, &gt.pointmaps, "pointmaps/")?;
                if p.len() != g.len() {
                    return Err(wrap(MetricError::LengthMismatch {
                        what: "pointmap frames",
                        left: p.len(),
                        right: g.len(),
                    }));
                }
                let mut per_frame = Vec::with_capacity(g.len());
                for (pg, gg) in p.iter().zip(g) {
                    per_frame.push(pointmap_metrics(pg.points(), gg.points(), &cfg.cloud).map_err(wrap)?);
                }
                let avg = |f: fn(&CloudScores) -> f64| per_frame.iter().map(f).sum::<f64>() / per_frame.len() as f64;
                let meta = [("frames", per_frame.len().to_string())];
                report.push("acc_mean", avg(|s| s.acc_mean), &meta);
                report.push("acc_median", avg(|s| s.acc_median), &meta);
                report.push("comp_mean", avg(|s| s.comp_mean), &meta);
                report.push("comp_median", avg(|s| s.comp_median), &meta);
                report.push("nc_mean", avg(|s| s.nc_mean), &meta);
                report.push("nc_median", avg(|s| s.nc_median), &meta);
            }
            MetricGroup::Depth => {
                let (p, g) = both(&pred.depth, &gt.depth, "depth/")?;
                let s = depth_metrics(p, g, None, &cfg.depth).map_err(wrap)?;
                let meta = [("valid_pixels", s.valid_pixels.to_string())];
                report.push("abs_rel", s.abs_rel, &meta);
                report.push("delta1", s.delta1, &meta);
            }
        }
    }
    Ok(report)
}
