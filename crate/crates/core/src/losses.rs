//! Coupling objectives between tracks, pointmaps and relative poses.
//!
//! Each objective is a sum of sub-terms, and every sub-term sends gradient
//! to exactly the branch its [`RoutingMask`] names:
//!
//! | sub-term | residual | receives gradient |
//! |---|---|---|
//! | [`SubTerm::ConsToPointmaps`] | `sg[p] - sample(P_t, q)` | pointmaps |
//! | [`SubTerm::ConsToTracks`] | `p - sg[sample(P_t, q)]` | tracks |
//! | [`SubTerm::CamToPoses`] | `C_{t->x} sg[p] - target` (static only) | poses |
//! | [`SubTerm::CamToTracks`] | `sg[C_{t->x}] p - p_bar` | tracks |
//! | [`SubTerm::SelfConsToPointmaps`] / [`SubTerm::SelfConsToTracks`] | as the cons pair, at pseudo-track pixels | pointmaps / tracks |
//! | [`SubTerm::SelfAnchor`] | `C_{t->x} sg[sample(P_t, q_t)] - sample(P_x, q_x)` (static only) | poses, anchor pointmap |
//!
//! Every residual goes through the Huber penalty [`huber`] and is scaled by
//! the sample's visibility weight.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{BlockId, Objective, ParamStore, RoutingMask, Tape};
use crate::grid::{corner_weights_for, PixelLocation, SampleError};
use crate::tracks::{static_mask_from_positions, StaticMaskConfig, StaticReference};

pub const DEFAULT_HUBER_DELTA: f64 = 0.05;
/// Samples with a smaller visibility weight are left out of every sum.
pub const DEFAULT_MIN_WEIGHT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("track {track}, frame {frame}: {source}")]
    OutOfDomain {
        track: usize,
        frame: usize,
        #[source]
        source: SampleError,
    },
    #[error("camera consistency needs ground-truth anchor targets")]
    MissingTargets,
    #[error("self-supervised terms need pseudo 2D tracks")]
    MissingPseudoTracks,
}

/// `0.5 |r|^2` inside `delta`, `delta (|r| - 0.5 delta)` outside.
pub fn huber(r: &Vector3<f64>, delta: f64) -> f64 {
    let n = r.norm();
    if n <= delta {
        0.5 * n * n
    } else {
        delta * (n - 0.5 * delta)
    }
}

/// Gradient of [`huber`] with respect to the residual.
pub fn huber_grad(r: &Vector3<f64>, delta: f64) -> Vector3<f64> {
    let n = r.norm();
    if n <= delta {
        *r
    } else {
        r * (delta / n)
    }
}

/// Where the pose-routed camera term pulls reprojected track points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamTarget {
    /// Ground-truth anchor targets.
    #[default]
    GtTargets,
    /// The anchor frame's pointmap sampled at the track's anchor pixel.
    AnchorSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermToggles {
    pub cons: bool,
    pub cam: bool,
    pub selfsup: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        Self {
            cons: true,
            cam: true,
            selfsup: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub cons: f64,
    pub cam: f64,
    pub selfsup: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            cons: 1.0,
            cam: 1.0,
            selfsup: 1.0,
        }
    }
}

/// Loss and ablation settings; the JSON form of this struct is the loss
/// configuration document.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub delta: f64,
    /// Static threshold; `None` means 0.02 of the scene diagonal.
    pub tau_static: Option<f64>,
    pub static_reference: StaticReference,
    pub static_gating: bool,
    pub cam_target: CamTarget,
    pub min_weight: f64,
    pub terms: TermToggles,
    pub weights: TermWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_HUBER_DELTA,
            tau_static: None,
            static_reference: StaticReference::Median,
            static_gating: true,
            cam_target: CamTarget::GtTargets,
            min_weight: DEFAULT_MIN_WEIGHT,
            terms: TermToggles::default(),
            weights: TermWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta > 0.0) {
            return Err(format!("delta must be positive, got {}", self.delta));
        }
        if let Some(t) = self.tau_static {
            if !(t > 0.0) {
                return Err(format!("tau_static must be positive, got {t}"));
            }
        }
        let w = self.weights;
        for (name, v) in [("cons", w.cons), ("cam", w.cam), ("selfsup", w.selfsup)] {
            if !(v > 0.0) {
                return Err(format!("weights.{name} must be positive, got {v}"));
            }
        }
        if !(self.min_weight >= 0.0) {
            return Err(format!("min_weight must be non-negative, got {}", self.min_weight));
        }
        Ok(())
    }

    pub fn static_mask_config(&self, scene_diagonal: f64) -> StaticMaskConfig {
        StaticMaskConfig {
            tau: self.tau_static.unwrap_or(crate::tracks::DEFAULT_TAU_FRACTION * scene_diagonal),
            reference: self.static_reference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTerm {
    ConsToPointmaps,
    ConsToTracks,
    CamToPoses,
    CamToTracks,
    SelfConsToPointmaps,
    SelfConsToTracks,
    SelfAnchor,
}

impl SubTerm {
    pub const ALL: [SubTerm; 7] = [
        SubTerm::ConsToPointmaps,
        SubTerm::ConsToTracks,
        SubTerm::CamToPoses,
        SubTerm::CamToTracks,
        SubTerm::SelfConsToPointmaps,
        SubTerm::SelfConsToTracks,
        SubTerm::SelfAnchor,
    ];

    pub fn routing(self) -> RoutingMask {
        match self {
            SubTerm::ConsToPointmaps | SubTerm::SelfConsToPointmaps => RoutingMask::POINTMAPS,
            SubTerm::ConsToTracks | SubTerm::CamToTracks | SubTerm::SelfConsToTracks => RoutingMask::TRACKS,
            SubTerm::CamToPoses => RoutingMask::POSES,
            SubTerm::SelfAnchor => RoutingMask::POSES_AND_POINTMAPS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubTerm::ConsToPointmaps => "cons_to_pointmaps",
            SubTerm::ConsToTracks => "cons_to_tracks",
            SubTerm::CamToPoses => "cam_to_poses",
            SubTerm::CamToTracks => "cam_to_tracks",
            SubTerm::SelfConsToPointmaps => "selfsup_cons_to_pointmaps",
            SubTerm::SelfConsToTracks => "selfsup_cons_to_tracks",
            SubTerm::SelfAnchor => "selfsup_anchor",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of sub-terms an evaluation includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TermSet(u8);

impl TermSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        SubTerm::ALL.iter().fold(Self(0), |s, t| s.with(*t))
    }

    pub fn only(t: SubTerm) -> Self {
        Self(t.bit())
    }

    pub fn with(self, t: SubTerm) -> Self {
        Self(self.0 | t.bit())
    }

    pub fn contains(self, t: SubTerm) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn from_toggles(t: &TermToggles) -> Self {
        let mut s = Self::empty();
        if t.cons {
            s = s.with(SubTerm::ConsToPointmaps).with(SubTerm::ConsToTracks);
        }
        if t.cam {
            s = s.with(SubTerm::CamToPoses).with(SubTerm::CamToTracks);
        }
        if t.selfsup {
            s = s
                .with(SubTerm::SelfConsToPointmaps)
                .with(SubTerm::SelfConsToTracks)
                .with(SubTerm::SelfAnchor);
        }
        s
    }
}

/// Pseudo 2D tracks: pixel locations, tracker visibility, and the
/// provisional static mask derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoObservations {
    pub pixels: Vec<PixelLocation>,
    pub visibility: Vec<f64>,
    pub static_mask: Vec<bool>,
}

/// Fixed (non-parameter) inputs of the coupling losses, indexed `i * T + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingData {
    pub anchor: usize,
    pub pixels: Vec<PixelLocation>,
    pub weights: Vec<f64>,
    pub static_mask: Vec<bool>,
    /// Ground-truth anchor targets; absent in the self-supervised setting.
    pub targets: Option<Vec<Vector3<f64>>>,
    pub pseudo: Option<PseudoObservations>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualStats {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

impl ResidualStats {
    fn push(&mut self, n: f64) {
        self.count += 1;
        self.mean += (n - self.mean) / self.count as f64;
        self.max = self.max.max(n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cons_value: f64,
    pub cam_value: f64,
    pub selfsup_value: f64,
    pub total: f64,
    pub cons_residuals: ResidualStats,
    pub cam_residuals: ResidualStats,
    pub selfsup_residuals: ResidualStats,
    /// Samples left out for having a weight below the cutoff.
    pub skipped: usize,
}

/// Weighted sum of the three component values.
pub fn total_loss(weights: &TermWeights, cons: f64, cam: f64, selfsup: f64) -> f64 {
    weights.cons * cons + weights.cam * cam + weights.selfsup * selfsup
}

struct Ctx<'a> {
    live: &'a ParamStore,
    frozen: &'a ParamStore,
    cfg: &'a LossConfig,
}

impl Ctx<'_> {
    fn sample(
        &self,
        store: &ParamStore,
        frame: usize,
        track: usize,
        q: PixelLocation,
    ) -> Result<(Vector3<f64>, [(usize, f64); 4]), LossError> {
        let l = store.layout();
        let corners = corner_weights_for(l.width, l.height, q).map_err(|source| LossError::OutOfDomain {
            track,
            frame,
            source,
        })?;
        let v = corners
            .iter()
            .fold(Vector3::zeros(), |acc, &(p, w)| acc + store.grid_value(frame, p) * w);
        Ok((v, corners))
    }
}

fn push_grid_grad(tape: &mut Tape, store: &ParamStore, frame: usize, corners: &[(usize, f64); 4], g: &Vector3<f64>) {
    let l = store.layout();
    for &(p, w) in corners {
        if w != 0.0 {
            tape.add_vec3(BlockId::Grids, l.grid_offset(frame, p), &(g * w), RoutingMask::POINTMAPS);
        }
    }
}

/// Gradient of `rho(R p + t - target)` with respect to the stored pose
/// tangent, given `psi = d rho / d r` and `rp = R p`.
fn push_pose_grad(tape: &mut Tape, store: &ParamStore, frame: usize, rp: &Vector3<f64>, psi: &Vector3<f64>, scale: f64) {
    let left = rp.cross(psi);
    let omega = store.pose_left_jacobian(frame).transpose() * left * scale;
    let o = store.layout().pose_offset(frame);
    tape.add_vec3(BlockId::Poses, o, &omega, RoutingMask::POSES);
    tape.add_vec3(BlockId::Poses, o + 3, &(psi * scale), RoutingMask::POSES);
}

/// Bidirectional track–pointmap consistency over the given pixels and
/// weights. Returns the unweighted component value.
#[allow(clippy::too_many_arguments)]
fn cons_pass(
    ctx: &Ctx,
    pixels: &[PixelLocation],
    weights: &[f64],
    to_grids: bool,
    to_tracks: bool,
    scale: f64,
    mut tape: Option<&mut Tape>,
    stats: &mut ResidualStats,
    skipped: &mut usize,
) -> Result<f64, LossError> {
    if !(to_grids || to_tracks) {
        return Ok(0.0);
    }
    let l = *ctx.live.layout();
    let delta = ctx.cfg.delta;
    let mut value = 0.0;
    for i in 0..l.n_tracks {
        for t in 0..l.n_frames {
            let k = i * l.n_frames + t;
            let w = weights[k];
            if w < ctx.cfg.min_weight {
                *skipped += 1;
                continue;
            }
            let q = pixels[k];
            let mut v = 0.0;
            if to_grids {
                let (s, corners) = ctx.sample(ctx.live, t, i, q)?;
                let r = ctx.frozen.track_point(i, t) - s;
                v += huber(&r, delta);
                stats.push(r.norm());
                if let Some(tape) = tape.as_deref_mut() {
                    let g = -huber_grad(&r, delta) * (w * scale);
                    push_grid_grad(tape, ctx.live, t, &corners, &g);
                }
            }
            if to_tracks {
                let (s, _) = ctx.sample(ctx.frozen, t, i, q)?;
                let r = ctx.live.track_point(i, t) - s;
                v += huber(&r, delta);
                if !to_grids {
                    stats.push(r.norm());
                }
                if let Some(tape) = tape.as_deref_mut() {
                    let g = huber_grad(&r, delta) * (w * scale);
                    tape.add_vec3(BlockId::Tracks, l.track_offset(i, t), &g, RoutingMask::TRACKS);
                }
            }
            value += w * v;
        }
    }
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn cam_pass(
    ctx: &Ctx,
    data: &CouplingData,
    to_poses: bool,
    to_tracks: bool,
    scale: f64,
    mut tape: Option<&mut Tape>,
    stats: &mut ResidualStats,
    skipped: &mut usize,
) -> Result<f64, LossError> {
    if !(to_poses || to_tracks) {
        return Ok(0.0);
    }
    let l = *ctx.live.layout();
    let x = data.anchor;
    let delta = ctx.cfg.delta;
    let need_targets = to_tracks || ctx.cfg.cam_target == CamTarget::GtTargets;
    let targets = match (&data.targets, need_targets) {
        (Some(t), _) => Some(t.as_slice()),
        (None, true) => return Err(LossError::MissingTargets),
        (None, false) => None,
    };
    let live_poses = ctx.live.rel_poses();
    let frozen_poses = ctx.frozen.rel_poses();
    let mut value = 0.0;
    for i in 0..l.n_tracks {
        for t in 0..l.n_frames {
            let k = i * l.n_frames + t;
            let w = data.weights[k];
            if w < ctx.cfg.min_weight {
                *skipped += 1;
                continue;
            }
            let mut v = 0.0;
            let gated_in = !ctx.cfg.static_gating || data.static_mask[k];
            if to_poses && gated_in {
                let target = match ctx.cfg.cam_target {
                    CamTarget::GtTargets => Some(targets.expect("checked above")[k]),
                    CamTarget::AnchorSamples => {
                        let kx = i * l.n_frames + x;
                        if data.weights[kx] < ctx.cfg.min_weight {
                            None
                        } else {
                            Some(ctx.sample(ctx.frozen, x, i, data.pixels[kx])?.0)
                        }
                    }
                };
                if let Some(target) = target {
                    let pose = &live_poses[t];
                    let rp = pose.rotation() * ctx.frozen.track_point(i, t);
                    let r = rp + pose.translation() - target;
                    v += huber(&r, delta);
                    stats.push(r.norm());
                    if t != x {
                        if let Some(tape) = tape.as_deref_mut() {
                            let psi = huber_grad(&r, delta);
                            push_pose_grad(tape, ctx.live, t, &rp, &psi, w * scale);
                        }
                    }
                }
            }
            if to_tracks {
                let target = targets.expect("checked above")[k];
                let pose = &frozen_poses[t];
                let r = pose.transform_point(&ctx.live.track_point(i, t)) - target;
                v += huber(&r, delta);
                if !to_poses {
                    stats.push(r.norm());
                }
                if let Some(tape) = tape.as_deref_mut() {
                    let g = pose.rotation().transpose() * huber_grad(&r, delta) * (w * scale);
                    tape.add_vec3(BlockId::Tracks, l.track_offset(i, t), &g, RoutingMask::TRACKS);
                }
            }
            value += w * v;
        }
    }
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn anchor_pass(
    ctx: &Ctx,
    data: &CouplingData,
    pseudo: &PseudoObservations,
    scale: f64,
    mut tape: Option<&mut Tape>,
    stats: &mut ResidualStats,
    skipped: &mut usize,
) -> Result<f64, LossError> {
    let l = *ctx.live.layout();
    let x = data.anchor;
    let delta = ctx.cfg.delta;
    let live_poses = ctx.live.rel_poses();
    let mut value = 0.0;
    for i in 0..l.n_tracks {
        let kx = i * l.n_frames + x;
        for t in 0..l.n_frames {
            if t == x {
                continue;
            }
            let k = i * l.n_frames + t;
            let w = pseudo.visibility[k];
            if w < ctx.cfg.min_weight || pseudo.visibility[kx] < ctx.cfg.min_weight {
                *skipped += 1;
                continue;
            }
            if ctx.cfg.static_gating && !pseudo.static_mask[k] {
                continue;
            }
            let (s_t, _) = ctx.sample(ctx.frozen, t, i, pseudo.pixels[k])?;
            let (s_x, corners) = ctx.sample(ctx.live, x, i, pseudo.pixels[kx])?;
            let pose = &live_poses[t];
            let rp = pose.rotation() * s_t;
            let r = rp + pose.translation() - s_x;
            value += w * huber(&r, delta);
            stats.push(r.norm());
            if let Some(tape) = tape.as_deref_mut() {
                let psi = huber_grad(&r, delta);
                push_pose_grad(tape, ctx.live, t, &rp, &psi, w * scale);
                push_grid_grad(tape, ctx.live, x, &corners, &(-psi * (w * scale)));
            }
        }
    }
    Ok(value)
}

/// Evaluates the selected sub-terms. Differentiable quantities are read
/// from `live`, detached ones from `frozen`; gradients (already multiplied
/// by the term weights) go into `tape`.
pub fn evaluate(
    live: &ParamStore,
    frozen: &ParamStore,
    data: &CouplingData,
    cfg: &LossConfig,
    terms: TermSet,
    mut tape: Option<&mut Tape>,
) -> Result<LossBreakdown, LossError> {
    let ctx = Ctx { live, frozen, cfg };
    let mut out = LossBreakdown::default();
    let w = cfg.weights;

    out.cons_value = cons_pass(
        &ctx,
        &data.pixels,
        &data.weights,
        terms.contains(SubTerm::ConsToPointmaps),
        terms.contains(SubTerm::ConsToTracks),
        w.cons,
        tape.as_deref_mut(),
        &mut out.cons_residuals,
        &mut out.skipped,
    )?;
    out.cam_value = cam_pass(
        &ctx,
        data,
        terms.contains(SubTerm::CamToPoses),
        terms.contains(SubTerm::CamToTracks),
        w.cam,
        tape.as_deref_mut(),
        &mut out.cam_residuals,
        &mut out.skipped,
    )?;

    let self_cons = terms.contains(SubTerm::SelfConsToPointmaps) || terms.contains(SubTerm::SelfConsToTracks);
    let self_anchor = terms.contains(SubTerm::SelfAnchor);
    if self_cons || self_anchor {
        let pseudo = data.pseudo.as_ref().ok_or(LossError::MissingPseudoTracks)?;
        out.selfsup_value = cons_pass(
            &ctx,
            &pseudo.pixels,
            &pseudo.visibility,
            terms.contains(SubTerm::SelfConsToPointmaps),
            terms.contains(SubTerm::SelfConsToTracks),
            w.selfsup,
            tape.as_deref_mut(),
            &mut out.selfsup_residuals,
            &mut out.skipped,
        )?;
        if self_anchor {
            out.selfsup_value += anchor_pass(
                &ctx,
                data,
                pseudo,
                w.selfsup,
                tape.as_deref_mut(),
                &mut out.selfsup_residuals,
                &mut out.skipped,
            )?;
        }
    }
    out.total = total_loss(&w, out.cons_value, out.cam_value, out.selfsup_value);
    Ok(out)
}

/// Provisional static mask for the self-supervised setting: a sample is
/// static when its pointmap sample, carried into the anchor frame by the
/// current relative pose, stays within `tau` of the track's temporal
/// reference.
pub fn provisional_static_mask(
    store: &ParamStore,
    pixels: &[PixelLocation],
    visibility: &[f64],
    cfg: &StaticMaskConfig,
    min_weight: f64,
) -> Result<Vec<bool>, LossError> {
    let l = *store.layout();
    let poses = store.rel_poses();
    let mut positions = vec![Vector3::zeros(); l.n_tracks * l.n_frames];
    for i in 0..l.n_tracks {
        for t in 0..l.n_frames {
            let k = i * l.n_frames + t;
            if visibility[k] < min_weight {
                continue;
            }
            let corners = corner_weights_for(l.width, l.height, pixels[k])
                .map_err(|source| LossError::OutOfDomain { track: i, frame: t, source })?;
            let s = corners
                .iter()
                .fold(Vector3::zeros(), |acc, &(p, w)| acc + store.grid_value(t, p) * w);
            positions[k] = poses[t].transform_point(&s);
        }
    }
    let vis: Vec<f64> = visibility.iter().map(|&v| if v < min_weight { 0.0 } else { 1.0 }).collect();
    Ok(static_mask_from_positions(
        l.n_tracks,
        l.n_frames,
        &positions,
        l.anchor,
        cfg,
        Some(&vis),
    ))
}

/// [`Objective`] adapter over [`evaluate`] for a fixed term selection.
pub struct CoupledObjective<'a> {
    pub data: &'a CouplingData,
    pub cfg: &'a LossConfig,
    pub terms: TermSet,
}

impl Objective for CoupledObjective<'_> {
    fn evaluate(&self, live: &ParamStore, frozen: &ParamStore, tape: Option<&mut Tape>) -> f64 {
        evaluate(live, frozen, self.data, self.cfg, self.terms, tape)
            .map(|b| b.total)
            .unwrap_or(f64::NAN)
    }
}
