//! Camera-coordinate trajectories, visibility and static-point masks.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::grid::PixelLocation;
use crate::pose::Pose;

/// Fraction of the scene diagonal used as the default static threshold.
pub const DEFAULT_TAU_FRACTION: f64 = 0.02;

/// N×T camera-coordinate tracks. Entry `(i, t)` lives at `i * n_frames + t`
/// and is expressed in the camera coordinates of frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub n_tracks: usize,
    pub n_frames: usize,
    pub points: Vec<Vector3<f64>>,
    /// Visibility in `[0, 1]`, used directly as the per-sample weight.
    pub visibility: Vec<f64>,
    pub query_pixels: Vec<PixelLocation>,
    pub static_mask: Vec<bool>,
}

impl TrackSet {
    pub fn new(n_tracks: usize, n_frames: usize) -> Self {
        let n = n_tracks * n_frames;
        Self {
            n_tracks,
            n_frames,
            points: vec![Vector3::zeros(); n],
            visibility: vec![1.0; n],
            query_pixels: vec![PixelLocation::default(); n],
            static_mask: vec![true; n],
        }
    }

    #[inline]
    pub fn index(&self, track: usize, frame: usize) -> usize {
        track * self.n_frames + frame
    }

    pub fn point(&self, track: usize, frame: usize) -> Vector3<f64> {
        self.points[self.index(track, frame)]
    }

    pub fn weight(&self, track: usize, frame: usize) -> f64 {
        self.visibility[self.index(track, frame)]
    }

    pub fn pixel(&self, track: usize, frame: usize) -> PixelLocation {
        self.query_pixels[self.index(track, frame)]
    }

    /// Checks visibility range and finiteness of visible entries.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_tracks * self.n_frames;
        if self.points.len() != n
            || self.visibility.len() != n
            || self.query_pixels.len() != n
            || self.static_mask.len() != n
        {
            return Err(format!("track arrays must all hold {n} entries"));
        }
        for (k, (&v, p)) in self.visibility.iter().zip(&self.points).enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("visibility {v} outside [0, 1] at entry {k}"));
            }
            if v > 0.0 && !p.iter().all(|c| c.is_finite()) {
                return Err(format!("visible entry {k} is not finite"));
            }
        }
        Ok(())
    }
}

/// Ground-truth N×T world-coordinate tracks, same indexing as [`TrackSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct WorldTrackSet {
    pub n_tracks: usize,
    pub n_frames: usize,
    pub points: Vec<Vector3<f64>>,
}

impl WorldTrackSet {
    pub fn point(&self, track: usize, frame: usize) -> Vector3<f64> {
        self.points[track * self.n_frames + frame]
    }

    /// Length of the bounding-box diagonal of all points.
    pub fn diagonal(&self) -> f64 {
        bbox_diagonal(&self.points)
    }

    /// Applies a rigid transform to every point.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            n_tracks: self.n_tracks,
            n_frames: self.n_frames,
            points: self.points.iter().map(|p| g.transform_point(p)).collect(),
        }
    }
}

pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Which per-track position a frame's displacement is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticReference {
    /// Coordinate-wise median over the visible frames.
    #[default]
    Median,
    /// The track's position at the anchor frame.
    Anchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticMaskConfig {
    pub tau: f64,
    pub reference: StaticReference,
}

impl StaticMaskConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            reference: StaticReference::Median,
        }
    }

    /// Threshold at [`DEFAULT_TAU_FRACTION`] of `scene_diagonal`.
    pub fn for_scene(scene_diagonal: f64) -> Self {
        Self::new(DEFAULT_TAU_FRACTION * scene_diagonal)
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median of the points selected by `keep`; falls back to
/// all points when none is selected.
pub fn coordinatewise_median(points: &[Vector3<f64>], keep: impl Fn(usize) -> bool) -> Vector3<f64> {
    let mut sel: Vec<usize> = (0..points.len()).filter(|&k| keep(k)).collect();
    if sel.is_empty() {
        sel = (0..points.len()).collect();
    }
    let mut out = Vector3::zeros();
    let mut buf = Vec::with_capacity(sel.len());
    for c in 0..3 {
        buf.clear();
        buf.extend(sel.iter().map(|&k| points[k][c]));
        out[c] = median(&mut buf);
    }
    out
}

/// Binary mask (`i * T + t`) marking samples whose displacement from the
/// track's temporal reference is below `tau`.
pub fn static_mask_from_positions(
    n_tracks: usize,
    n_frames: usize,
    positions: &[Vector3<f64>],
    anchor: usize,
    cfg: &StaticMaskConfig,
    visibility: Option<&[f64]>,
) -> Vec<bool> {
    let mut mask = vec![false; n_tracks * n_frames];
    for i in 0..n_tracks {
        let row = &positions[i * n_frames..(i + 1) * n_frames];
        let reference = match cfg.reference {
            StaticReference::Anchor => row[anchor],
            StaticReference::Median => coordinatewise_median(row, |t| {
                visibility.is_none_or(|v| v[i * n_frames + t] > 0.5)
            }),
        };
        for t in 0..n_frames {
            mask[i * n_frames + t] = (row[t] - reference).norm() < cfg.tau;
        }
    }
    mask
}

/// Static mask from ground-truth world tracks.
pub fn static_mask(
    gt: &WorldTrackSet,
    anchor: usize,
    cfg: &StaticMaskConfig,
    visibility: Option<&[f64]>,
) -> Vec<bool> {
    static_mask_from_positions(gt.n_tracks, gt.n_frames, &gt.points, anchor, cfg, visibility)
}

/// Static mask evaluated after expressing the world tracks in the anchor
/// camera's coordinates. Displacements are rigid-invariant, so this agrees
/// with [`static_mask`] up to rounding at the threshold.
pub fn static_mask_in_anchor_frame(
    gt: &WorldTrackSet,
    c_x: &Pose,
    anchor: usize,
    cfg: &StaticMaskConfig,
    visibility: Option<&[f64]>,
) -> Vec<bool> {
    let targets = anchor_targets(gt, c_x);
    static_mask_from_positions(gt.n_tracks, gt.n_frames, &targets, anchor, cfg, visibility)
}

/// World point expressed in the coordinates of camera `c_t` (camera-to-world).
pub fn camera_frame_position(world_point: &Vector3<f64>, c_t: &Pose) -> Vector3<f64> {
    c_t.inverse().transform_point(world_point)
}

/// Ground-truth world tracks expressed in the anchor camera's coordinates.
pub fn anchor_targets(gt: &WorldTrackSet, c_x: &Pose) -> Vec<Vector3<f64>> {
    let w2c = c_x.inverse();
    gt.points.iter().map(|p| w2c.transform_point(p)).collect()
}
