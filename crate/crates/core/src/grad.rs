//! Parameter blocks, gradient tape and stop-gradient routing.
//!
//! Stop-gradient is realised on both sides of an evaluation: an objective
//! reads differentiable quantities from a `live` store and detached
//! quantities from a `frozen` store, and it only deposits partials into the
//! blocks its [`RoutingMask`] admits. In an ordinary pass both stores are the
//! same object. A finite-difference check perturbs only `live`, so the
//! numerical derivative sees exactly the routed dependencies.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::PointMapGrid;
use crate::pose::{so3_exp, so3_left_jacobian, Pose};
use crate::tracks::TrackSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),
    #[error("index {index} out of range for block `{block}` of length {len}")]
    IndexOutOfRange {
        block: BlockId,
        index: usize,
        len: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    Grids,
    Tracks,
    Poses,
}

impl BlockId {
    pub const ALL: [BlockId; 3] = [BlockId::Grids, BlockId::Tracks, BlockId::Poses];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::Grids => "grids",
            BlockId::Tracks => "tracks",
            BlockId::Poses => "poses",
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockId {
    type Err = GradError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grids" => Ok(BlockId::Grids),
            "tracks" => Ok(BlockId::Tracks),
            "poses" => Ok(BlockId::Poses),
            other => Err(GradError::UnknownBlock(other.to_string())),
        }
    }
}

/// Which parameter branches a loss term may send gradient to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct RoutingMask {
    pub to_tracks: bool,
    pub to_pointmaps: bool,
    pub to_poses: bool,
}

impl RoutingMask {
    pub const TRACKS: RoutingMask = RoutingMask {
        to_tracks: true,
        to_pointmaps: false,
        to_poses: false,
    };
    pub const POINTMAPS: RoutingMask = RoutingMask {
        to_tracks: false,
        to_pointmaps: true,
        to_poses: false,
    };
    pub const POSES: RoutingMask = RoutingMask {
        to_tracks: false,
        to_pointmaps: false,
        to_poses: true,
    };
    pub const POSES_AND_POINTMAPS: RoutingMask = RoutingMask {
        to_tracks: false,
        to_pointmaps: true,
        to_poses: true,
    };

    pub fn admits(&self, block: BlockId) -> bool {
        match block {
            BlockId::Grids => self.to_pointmaps,
            BlockId::Tracks => self.to_tracks,
            BlockId::Poses => self.to_poses,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.to_tracks || self.to_pointmaps || self.to_poses)
    }
}

/// Shape of the problem the blocks are laid out for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_frames: usize,
    pub n_tracks: usize,
    pub width: usize,
    pub height: usize,
    pub anchor: usize,
}

impl Layout {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn block_len(&self, block: BlockId) -> usize {
        match block {
            BlockId::Grids => self.n_frames * self.pixels() * 3,
            BlockId::Tracks => self.n_tracks * self.n_frames * 3,
            BlockId::Poses => self.n_frames * 6,
        }
    }

    #[inline]
    pub fn grid_offset(&self, frame: usize, pixel: usize) -> usize {
        (frame * self.pixels() + pixel) * 3
    }

    #[inline]
    pub fn track_offset(&self, track: usize, frame: usize) -> usize {
        (track * self.n_frames + frame) * 3
    }

    #[inline]
    pub fn pose_offset(&self, frame: usize) -> usize {
        frame * 6
    }
}

/// Flat parameter blocks: all pointmap values, all track points, and one
/// 6-vector `(omega, upsilon)` per frame perturbing the relative pose
/// `frame -> anchor` as `(exp(omega) R0, t0 + upsilon)`. The anchor frame's
/// relative pose is the identity and ignores its tangent.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    layout: Layout,
    grids: Vec<f64>,
    tracks: Vec<f64>,
    poses: Vec<f64>,
    base_poses: Vec<Pose>,
}

impl ParamStore {
    pub fn new(layout: Layout, base_poses: Vec<Pose>) -> Self {
        assert_eq!(base_poses.len(), layout.n_frames, "one base pose per frame");
        Self {
            grids: vec![0.0; layout.block_len(BlockId::Grids)],
            tracks: vec![0.0; layout.block_len(BlockId::Tracks)],
            poses: vec![0.0; layout.block_len(BlockId::Poses)],
            base_poses,
            layout,
        }
    }

    /// Builds a store from per-frame grids, camera-frame tracks and
    /// relative poses `frame -> anchor`.
    pub fn from_parts(grids: &[PointMapGrid], tracks: &TrackSet, rel_poses: &[Pose], anchor: usize) -> Self {
        let (width, height) = (grids[0].width(), grids[0].height());
        let layout = Layout {
            n_frames: grids.len(),
            n_tracks: tracks.n_tracks,
            width,
            height,
            anchor,
        };
        assert_eq!(tracks.n_frames, grids.len(), "track/grid frame count mismatch");
        let mut base = rel_poses.to_vec();
        base[anchor] = Pose::identity();
        let mut store = Self::new(layout, base);
        for (t, g) in grids.iter().enumerate() {
            assert!(g.width() == width && g.height() == height, "grid size mismatch");
            for (p, v) in g.points().iter().enumerate() {
                let o = layout.grid_offset(t, p);
                store.grids[o..o + 3].copy_from_slice(v.as_slice());
            }
        }
        for (k, v) in tracks.points.iter().enumerate() {
            store.tracks[k * 3..k * 3 + 3].copy_from_slice(v.as_slice());
        }
        store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn block(&self, block: BlockId) -> &[f64] {
        match block {
            BlockId::Grids => &self.grids,
            BlockId::Tracks => &self.tracks,
            BlockId::Poses => &self.poses,
        }
    }

    pub fn block_mut(&mut self, block: BlockId) -> &mut [f64] {
        match block {
            BlockId::Grids => &mut self.grids,
            BlockId::Tracks => &mut self.tracks,
            BlockId::Poses => &mut self.poses,
        }
    }

    pub fn block_by_name(&self, name: &str) -> Result<&[f64], GradError> {
        Ok(self.block(name.parse()?))
    }

    #[inline]
    pub fn grid_value(&self, frame: usize, pixel: usize) -> Vector3<f64> {
        let o = self.layout.grid_offset(frame, pixel);
        Vector3::new(self.grids[o], self.grids[o + 1], self.grids[o + 2])
    }

    #[inline]
    pub fn track_point(&self, track: usize, frame: usize) -> Vector3<f64> {
        let o = self.layout.track_offset(track, frame);
        Vector3::new(self.tracks[o], self.tracks[o + 1], self.tracks[o + 2])
    }

    pub fn pose_tangent(&self, frame: usize) -> (Vector3<f64>, Vector3<f64>) {
        let o = self.layout.pose_offset(frame);
        let p = &self.poses[o..o + 6];
        (Vector3::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], p[5]))
    }

    pub fn base_pose(&self, frame: usize) -> &Pose {
        &self.base_poses[frame]
    }

    /// Current relative pose `frame -> anchor`.
    pub fn rel_pose(&self, frame: usize) -> Pose {
        let base = &self.base_poses[frame];
        if frame == self.layout.anchor {
            return *base;
        }
        let (omega, upsilon) = self.pose_tangent(frame);
        if omega == Vector3::zeros() && upsilon == Vector3::zeros() {
            return *base;
        }
        Pose::from_parts_unchecked(so3_exp(&omega) * base.rotation(), base.translation() + upsilon)
    }

    pub fn rel_poses(&self) -> Vec<Pose> {
        (0..self.layout.n_frames).map(|t| self.rel_pose(t)).collect()
    }

    /// `J_l(omega)` for the tangent of `frame`; maps a left rotation
    /// perturbation gradient onto the stored coordinates.
    pub fn pose_left_jacobian(&self, frame: usize) -> nalgebra::Matrix3<f64> {
        so3_left_jacobian(&self.pose_tangent(frame).0)
    }

    /// Folds pose tangents into the base poses and zeroes them.
    pub fn retract(&mut self) {
        for t in 0..self.layout.n_frames {
            let (omega, upsilon) = self.pose_tangent(t);
            if omega == Vector3::zeros() && upsilon == Vector3::zeros() {
                continue;
            }
            let p = self.rel_pose(t);
            self.base_poses[t] = Pose::new(*p.rotation(), *p.translation());
        }
        self.poses.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn grids(&self) -> Vec<PointMapGrid> {
        (0..self.layout.n_frames)
            .map(|t| {
                let pts = (0..self.layout.pixels()).map(|p| self.grid_value(t, p)).collect();
                PointMapGrid::new(self.layout.width, self.layout.height, t, pts)
            })
            .collect()
    }

    pub fn track_points(&self) -> Vec<Vector3<f64>> {
        (0..self.layout.n_tracks)
            .flat_map(|i| (0..self.layout.n_frames).map(move |t| (i, t)))
            .map(|(i, t)| self.track_point(i, t))
            .collect()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    grids: Vec<f64>,
    tracks: Vec<f64>,
    poses: Vec<f64>,
}

impl Tape {
    pub fn new(layout: &Layout) -> Self {
        Self {
            grids: vec![0.0; layout.block_len(BlockId::Grids)],
            tracks: vec![0.0; layout.block_len(BlockId::Tracks)],
            poses: vec![0.0; layout.block_len(BlockId::Poses)],
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.layout())
    }

    pub fn reset(&mut self) {
        for b in BlockId::ALL {
            self.grad_mut(b).iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad(&self, block: BlockId) -> &[f64] {
        match block {
            BlockId::Grids => &self.grids,
            BlockId::Tracks => &self.tracks,
            BlockId::Poses => &self.poses,
        }
    }

    pub fn grad_mut(&mut self, block: BlockId) -> &mut [f64] {
        match block {
            BlockId::Grids => &mut self.grids,
            BlockId::Tracks => &mut self.tracks,
            BlockId::Poses => &mut self.poses,
        }
    }

    /// Adds `partial` at `index` when `routing` admits `block`.
    pub fn accumulate(
        &mut self,
        block: BlockId,
        index: usize,
        partial: f64,
        routing: RoutingMask,
    ) -> Result<(), GradError> {
        let g = self.grad_mut(block);
        if index >= g.len() {
            return Err(GradError::IndexOutOfRange {
                block,
                index,
                len: g.len(),
            });
        }
        if routing.admits(block) {
            g[index] += partial;
        }
        Ok(())
    }

    pub fn accumulate_named(
        &mut self,
        block: &str,
        index: usize,
        partial: f64,
        routing: RoutingMask,
    ) -> Result<(), GradError> {
        self.accumulate(block.parse()?, index, partial, routing)
    }

    /// Adds a 3-vector at `offset..offset + 3`. Offsets come from a
    /// [`Layout`], so they are in range by construction.
    #[inline]
    pub(crate) fn add_vec3(&mut self, block: BlockId, offset: usize, v: &Vector3<f64>, routing: RoutingMask) {
        if routing.admits(block) {
            let g = &mut self.grad_mut(block)[offset..offset + 3];
            g[0] += v.x;
            g[1] += v.y;
            g[2] += v.z;
        }
    }

    /// Adds `other` into `self` in block order.
    pub fn merge(&mut self, other: &Tape) {
        for b in BlockId::ALL {
            for (a, o) in self.grad_mut(b).iter_mut().zip(other.grad(b)) {
                *a += o;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in BlockId::ALL {
            self.grad_mut(b).iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn norm(&self, block: BlockId) -> f64 {
        self.grad(block).iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self, block: BlockId) -> f64 {
        self.grad(block).iter().fold(0.0f64, |a, g| a.max(g.abs()))
    }

    /// Indices of `block` with a nonzero gradient, in ascending order.
    pub fn touched(&self, block: BlockId) -> Vec<usize> {
        self.grad(block)
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A scalar objective with stop-gradient semantics; see the module docs.
pub trait Objective {
    fn evaluate(&self, live: &ParamStore, frozen: &ParamStore, tape: Option<&mut Tape>) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&ParamStore, &ParamStore, Option<&mut Tape>) -> f64,
{
    fn evaluate(&self, live: &ParamStore, frozen: &ParamStore, tape: Option<&mut Tape>) -> f64 {
        self(live, frozen, tape)
    }
}

/// Gradient entries smaller than this are compared in absolute terms.
pub const FD_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdCheck {
    pub block: BlockId,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

/// Central-difference derivative of the objective with respect to one live
/// entry; the step is `h * max(1, |value|)`.
pub fn numeric_partial(obj: &dyn Objective, store: &ParamStore, block: BlockId, index: usize, h: f64) -> f64 {
    let x = store.block(block)[index];
    let step = h * x.abs().max(1.0);
    let mut plus = store.clone();
    plus.block_mut(block)[index] = x + step;
    let mut minus = store.clone();
    minus.block_mut(block)[index] = x - step;
    let fp = obj.evaluate(&plus, store, None);
    let fm = obj.evaluate(&minus, store, None);
    (fp - fm) / ((x + step) - (x - step))
}

/// Compares the objective's analytic gradient against central differences
/// at `indices` of `block`. `analytic` overrides the tape gradient when
/// given (used to self-test the checker).
pub fn finite_diff_check(
    obj: &dyn Objective,
    store: &ParamStore,
    block: BlockId,
    indices: &[usize],
    h: f64,
    analytic: Option<&Tape>,
) -> Result<FdCheck, GradError> {
    let own;
    let tape = match analytic {
        Some(t) => t,
        None => {
            let mut t = Tape::for_store(store);
            obj.evaluate(store, store, Some(&mut t));
            own = t;
            &own
        }
    };
    let len = store.block(block).len();
    let mut out = FdCheck {
        block,
        checked: 0,
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &index in indices {
        if index >= len {
            return Err(GradError::IndexOutOfRange { block, index, len });
        }
        let a = tape.grad(block)[index];
        let n = numeric_partial(obj, store, block, index, h);
        let e = relative_error(a, n);
        out.checked += 1;
        if e > out.max_rel_error || out.worst_index.is_none() {
            out.max_rel_error = out.max_rel_error.max(e);
            out.worst_index = Some(index);
            out.worst_analytic = a;
            out.worst_numeric = n;
        }
    }
    Ok(out)
}
