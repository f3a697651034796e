//! Deterministic synthetic dynamic scenes.
//!
//! The world holds a single height-field surface `z(u, v)` sampled on a
//! lattice and interpolated bilinearly between lattice nodes. Frame `t`
//! observes a `W x H` window of that lattice whose origin is shifted by a
//! whole number of nodes, and its pointmap stores the window's nodes in the
//! camera coordinates of frame `t`. Because the camera transform is affine
//! and the window is node-aligned, bilinear sampling of a ground-truth
//! pointmap at any in-window location reproduces the surface point exactly
//! (up to rounding), which makes the ground truth a zero of every coupling
//! term.
//!
//! Static tracks sit at fixed surface coordinates. Dynamic tracks slide
//! across the surface, linearly or sinusoidally.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::ParamStore;
use crate::grid::{PixelLocation, PointMapGrid};
use crate::losses::{provisional_static_mask, CouplingData, LossConfig, LossError, PseudoObservations};
use crate::pose::{exp_map, relative_pose, Pose, PoseTangent};
use crate::tracks::{anchor_targets, camera_frame_position, static_mask_in_anchor_frame, TrackSet, WorldTrackSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {field}: {reason}")]
    ConfigInvalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::ConfigInvalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraPathKind {
    #[default]
    Orbit,
    Line,
    RandomWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    #[default]
    Linear,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPath {
    pub kind: CameraPathKind,
    /// Orbit: swept angle in radians. Line: path length. Random walk:
    /// standard deviation of the total displacement.
    pub magnitude: f64,
    /// Distance of the cameras from the surface centre.
    pub distance: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            kind: CameraPathKind::Orbit,
            magnitude: 0.6,
            distance: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    pub kind: MotionKind,
    /// Peak surface speed of dynamic points, in scene units per frame.
    pub speed: f64,
    /// All dynamic points share one direction, like a single moving object.
    pub coherent: bool,
}

impl Default for Motion {
    fn default() -> Self {
        Self {
            kind: MotionKind::Linear,
            speed: 0.03,
            coherent: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Occlusion {
    /// Fraction of tracks that get one occluded span.
    pub fraction: f64,
    /// Length of the span in frames.
    pub span: usize,
}

impl Default for Occlusion {
    fn default() -> Self {
        Self { fraction: 0.3, span: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLevels {
    /// Per-coordinate standard deviation on pointmap values.
    pub pointmap: f64,
    /// Per-coordinate standard deviation on track points.
    pub track: f64,
    /// Per-component standard deviation of the pose tangent.
    pub pose: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub anchor: usize,
    pub width: usize,
    pub height: usize,
    /// Window shift in lattice nodes per frame (rounded per frame).
    pub window_drift: f64,
    pub camera: CameraPath,
    pub motion: Motion,
    pub occlusion: Occlusion,
    pub noise: NoiseLevels,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            n_static: 48,
            n_dynamic: 16,
            anchor: 0,
            width: 24,
            height: 24,
            window_drift: 0.5,
            camera: CameraPath::default(),
            motion: Motion::default(),
            occlusion: Occlusion::default(),
            noise: NoiseLevels {
                pointmap: 0.005,
                track: 0.005,
                pose: 0.03,
            },
            seed: 0,
        }
    }
}

// Window margin (in lattice nodes) kept free around query locations.
const MARGIN: f64 = 0.5;
// Surface extent along u for the first window; the scene diagonal ends up
// close to 1.
const WINDOW_EXTENT: f64 = 0.7;

impl SceneConfig {
    pub fn n_tracks(&self) -> usize {
        self.n_static + self.n_dynamic
    }

    fn offsets(&self) -> Vec<usize> {
        (0..self.n_frames)
            .map(|t| (self.window_drift * t as f64).round() as usize)
            .collect()
    }

    /// Lattice spacing in scene units.
    pub fn spacing(&self) -> f64 {
        WINDOW_EXTENT / (self.width.max(2) - 1) as f64
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_frames < 1 {
            return Err(invalid("n_frames", "must be at least 1"));
        }
        if self.n_static + self.n_dynamic < 1 {
            return Err(invalid("n_static", "need at least one track (n_static + n_dynamic >= 1)"));
        }
        if self.anchor >= self.n_frames {
            return Err(invalid("anchor", format!("{} is not a frame index (n_frames = {})", self.anchor, self.n_frames)));
        }
        if self.width < 4 {
            return Err(invalid("width", "must be at least 4"));
        }
        if self.height < 4 {
            return Err(invalid("height", "must be at least 4"));
        }
        if !(self.window_drift >= 0.0) || !self.window_drift.is_finite() {
            return Err(invalid("window_drift", "must be finite and non-negative"));
        }
        let n = self.noise;
        for (field, v) in [("noise.pointmap", n.pointmap), ("noise.track", n.track), ("noise.pose", n.pose)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(field, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion.fraction) {
            return Err(invalid("occlusion.fraction", "must lie in [0, 1]"));
        }
        if self.occlusion.fraction > 0.0 && self.occlusion.span >= self.n_frames {
            return Err(invalid("occlusion.span", "must be shorter than the sequence"));
        }
        if !(self.motion.speed >= 0.0) || !self.motion.speed.is_finite() {
            return Err(invalid("motion.speed", "must be finite and non-negative"));
        }
        if !(self.camera.distance > 0.0) {
            return Err(invalid("camera.distance", "must be positive"));
        }
        if !(self.camera.magnitude >= 0.0) || !self.camera.magnitude.is_finite() {
            return Err(invalid("camera.magnitude", "must be finite and non-negative"));
        }
        let (lo, hi) = self.common_u_range();
        if hi - lo <= 0.0 {
            return Err(invalid("window_drift", "windows of the first and last frame do not overlap"));
        }
        let travel = self.dynamic_extent() / self.spacing();
        if self.n_dynamic > 0 && travel >= (hi - lo).min(self.height as f64 - 1.0 - 2.0 * MARGIN) {
            return Err(invalid("motion.speed", "dynamic points would leave the observed surface"));
        }
        Ok(())
    }

    /// Lattice-u range (node units) visible in every frame, with margin.
    fn common_u_range(&self) -> (f64, f64) {
        let last = *self.offsets().last().unwrap_or(&0) as f64;
        (last + MARGIN, (self.width - 1) as f64 - MARGIN)
    }

    /// Full extent of a dynamic path, in scene units.
    fn dynamic_extent(&self) -> f64 {
        let s = self.motion.speed;
        match self.motion.kind {
            MotionKind::Linear => s * (self.n_frames.saturating_sub(1)) as f64,
            MotionKind::Sinusoidal => 2.0 * s * self.n_frames as f64 / std::f64::consts::TAU,
        }
    }
}

/// Noisy copies of the ground truth, as a reconstruction network would
/// produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    pub grids: Vec<PointMapGrid>,
    pub tracks: TrackSet,
    /// Noisy camera-to-world poses.
    pub poses: Vec<Pose>,
    /// Relative poses `t -> anchor` derived from `poses`.
    pub rel_poses: Vec<Pose>,
}

/// Pixel trajectories with tracker visibility; no 3D information.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTracks {
    pub n_tracks: usize,
    pub n_frames: usize,
    pub pixels: Vec<PixelLocation>,
    pub visibility: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub gt_world: WorldTrackSet,
    /// Camera-to-world poses.
    pub gt_poses: Vec<Pose>,
    pub gt_grids: Vec<PointMapGrid>,
    /// Camera-frame tracks with visibility, query pixels and the static
    /// mask at the default threshold.
    pub gt_tracks: TrackSet,
    pub is_dynamic: Vec<bool>,
    pub pseudo: PseudoTracks,
    pub estimates: Estimates,
    /// Bounding-box diagonal of the observed surface.
    pub diagonal: f64,
}

struct Surface {
    u0: f64,
    v0: f64,
    h: f64,
    nu: usize,
    nv: usize,
    z: Vec<f64>,
}

impl Surface {
    fn new(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.spacing();
        let nu = cfg.width + cfg.offsets().last().copied().unwrap_or(0);
        let nv = cfg.height;
        let u0 = -0.5 * (nu - 1) as f64 * h;
        let v0 = -0.5 * (nv - 1) as f64 * h;
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|k| {
                let amp = 0.04 / (k + 1) as f64;
                let fu = rng.random_range(2.0..6.0);
                let fv = rng.random_range(2.0..6.0);
                let ph = rng.random_range(0.0..std::f64::consts::TAU);
                [amp, fu, fv, ph]
            })
            .collect();
        let mut z = vec![0.0; nu * nv];
        for k in 0..nv {
            for j in 0..nu {
                let (u, v) = (u0 + j as f64 * h, v0 + k as f64 * h);
                z[k * nu + j] = waves.iter().map(|w| w[0] * (w[1] * u + w[2] * v + w[3]).sin()).sum();
            }
        }
        Self { u0, v0, h, nu, nv, z }
    }

    fn node(&self, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(self.u0 + j as f64 * self.h, self.v0 + k as f64 * self.h, self.z[k * self.nu + j])
    }

    /// Surface point at continuous lattice coordinates.
    fn point(&self, a: f64, b: f64) -> Vector3<f64> {
        let j = (a.floor() as usize).min(self.nu - 2);
        let k = (b.floor() as usize).min(self.nv - 2);
        let (fa, fb) = (a - j as f64, b - k as f64);
        let z = (1.0 - fa) * (1.0 - fb) * self.z[k * self.nu + j]
            + fa * (1.0 - fb) * self.z[k * self.nu + j + 1]
            + (1.0 - fa) * fb * self.z[(k + 1) * self.nu + j]
            + fa * fb * self.z[(k + 1) * self.nu + j + 1];
        Vector3::new(self.u0 + a * self.h, self.v0 + b * self.h, z)
    }
}

fn camera_poses(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let t_n = cfg.n_frames;
    let d = cfg.camera.distance;
    let m = cfg.camera.magnitude;
    let center = Vector3::zeros();
    let up = Vector3::y();
    let frac = |t: usize| if t_n > 1 { t as f64 / (t_n - 1) as f64 - 0.5 } else { 0.0 };
    let eyes: Vec<Vector3<f64>> = match cfg.camera.kind {
        CameraPathKind::Orbit => {
            // Tilted orbit around the surface normal.
            let elev = 0.9f64;
            (0..t_n)
                .map(|t| {
                    let a = m * frac(t);
                    let r = d * elev.cos();
                    Vector3::new(r * a.sin(), -r * a.cos() * 0.3, d * elev.sin())
                })
                .collect()
        }
        CameraPathKind::Line => (0..t_n)
            .map(|t| Vector3::new(m * frac(t), -0.3 * d, d))
            .collect(),
        CameraPathKind::RandomWalk => {
            let step = Normal::new(0.0, m / (t_n.max(2) as f64 - 1.0).sqrt()).expect("finite sigma");
            let mut p = Vector3::new(0.0, -0.3 * d, d);
            let mut out = Vec::with_capacity(t_n);
            for _ in 0..t_n {
                out.push(p);
                p += Vector3::new(step.sample(rng), step.sample(rng), 0.3 * step.sample(rng));
            }
            out
        }
    };
    eyes.into_iter().map(|e| Pose::look_at(e, center, up)).collect()
}

/// Builds the ground truth and its noisy estimates. Deterministic in the
/// config (including its seed).
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let surface = Surface::new(cfg, &mut rng);
    let offsets = cfg.offsets();
    let gt_poses = camera_poses(cfg, &mut rng);
    let (t_n, n) = (cfg.n_frames, cfg.n_tracks());
    let (w, h) = (cfg.width, cfg.height);

    let gt_grids: Vec<PointMapGrid> = (0..t_n)
        .map(|t| {
            let w2c = gt_poses[t].inverse();
            PointMapGrid::from_fn(w, h, t, |x, y| w2c.transform_point(&surface.node(x + offsets[t], y)))
        })
        .collect();

    // Lattice coordinates of every track at every frame.
    let (ulo, uhi) = cfg.common_u_range();
    let (vlo, vhi) = (MARGIN, (h - 1) as f64 - MARGIN);
    let travel = cfg.dynamic_extent() / surface.h;
    let mut lattice = vec![(0.0, 0.0); n * t_n];
    let mut is_dynamic = vec![false; n];
    let mut shared_theta = None;
    for i in 0..n {
        let dynamic = i >= cfg.n_static;
        is_dynamic[i] = dynamic;
        if !dynamic {
            let a = rng.random_range(ulo..uhi);
            let b = rng.random_range(vlo..vhi);
            for t in 0..t_n {
                lattice[i * t_n + t] = (a, b);
            }
            continue;
        }
        let theta: f64 = match (cfg.motion.coherent, shared_theta) {
            (true, Some(th)) => th,
            _ => rng.random_range(0.0..std::f64::consts::TAU),
        };
        if cfg.motion.coherent {
            shared_theta = Some(theta);
        }
        let dir = (theta.cos(), theta.sin());
        let half = 0.5 * travel;
        let ca = rng.random_range(ulo + half * dir.0.abs()..=uhi - half * dir.0.abs());
        let cb = rng.random_range(vlo + half * dir.1.abs()..=vhi - half * dir.1.abs());
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for t in 0..t_n {
            let s = match cfg.motion.kind {
                MotionKind::Linear => {
                    let tc = 0.5 * (t_n - 1) as f64;
                    (t as f64 - tc) * cfg.motion.speed / surface.h
                }
                MotionKind::Sinusoidal => {
                    let amp = half;
                    amp * (std::f64::consts::TAU * t as f64 / t_n as f64 + phase).sin()
                }
            };
            lattice[i * t_n + t] = (ca + s * dir.0, cb + s * dir.1);
        }
    }

    let mut world = Vec::with_capacity(n * t_n);
    let mut tracks = TrackSet::new(n, t_n);
    for i in 0..n {
        for t in 0..t_n {
            let (a, b) = lattice[i * t_n + t];
            let x = surface.point(a, b);
            world.push(x);
            let k = i * t_n + t;
            tracks.points[k] = camera_frame_position(&x, &gt_poses[t]);
            tracks.query_pixels[k] = PixelLocation::new(a - offsets[t] as f64, b);
        }
    }
    let gt_world = WorldTrackSet {
        n_tracks: n,
        n_frames: t_n,
        points: world,
    };

    // Occlusion spans, never covering the anchor frame.
    let span = cfg.occlusion.span;
    if span > 0 && t_n > span {
        for i in 0..n {
            if rng.random::<f64>() >= cfg.occlusion.fraction {
                continue;
            }
            let starts: Vec<usize> = (0..=t_n - span)
                .filter(|&s| !(s..s + span).contains(&cfg.anchor))
                .collect();
            if starts.is_empty() {
                continue;
            }
            let s = starts[rng.random_range(0..starts.len())];
            for t in s..s + span {
                tracks.visibility[i * t_n + t] = 0.0;
            }
        }
    }

    let mut nodes = Vec::with_capacity(surface.nu * surface.nv);
    for k in 0..surface.nv {
        for j in 0..surface.nu {
            nodes.push(surface.node(j, k));
        }
    }
    let diagonal = crate::tracks::bbox_diagonal(&nodes);
    let mask_cfg = LossConfig::default().static_mask_config(diagonal);
    tracks.static_mask = static_mask_in_anchor_frame(
        &gt_world,
        &gt_poses[cfg.anchor],
        cfg.anchor,
        &mask_cfg,
        Some(&tracks.visibility),
    );

    let pseudo = PseudoTracks {
        n_tracks: n,
        n_frames: t_n,
        pixels: tracks.query_pixels.clone(),
        visibility: tracks.visibility.clone(),
    };

    let mut scene = SyntheticScene {
        config: *cfg,
        gt_world,
        gt_poses,
        gt_grids,
        gt_tracks: tracks,
        is_dynamic,
        pseudo,
        estimates: Estimates {
            grids: Vec::new(),
            tracks: TrackSet::new(0, 0),
            poses: Vec::new(),
            rel_poses: Vec::new(),
        },
        diagonal,
    };
    let n = cfg.noise;
    // Separate stream so noise draws do not shift the scene layout.
    scene.estimates = perturb(&scene, n.pointmap, n.track, n.pose, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(scene)
}

/// Noisy estimates of `scene`: i.i.d. Gaussian noise on grid and track
/// coordinates, and a Gaussian tangent left-multiplied onto each
/// camera-to-world pose.
pub fn perturb(scene: &SyntheticScene, sigma_p: f64, sigma_t: f64, sigma_c: f64, seed: u64) -> Estimates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |s: f64| -> f64 {
        if s == 0.0 {
            0.0
        } else {
            Normal::new(0.0, s).expect("finite sigma").sample(&mut rng)
        }
    };
    let grids = scene
        .gt_grids
        .iter()
        .map(|g| {
            let mut g = g.clone();
            for p in g.points_mut() {
                *p += Vector3::new(draw(sigma_p), draw(sigma_p), draw(sigma_p));
            }
            g
        })
        .collect();
    let mut tracks = scene.gt_tracks.clone();
    for p in &mut tracks.points {
        *p += Vector3::new(draw(sigma_t), draw(sigma_t), draw(sigma_t));
    }
    let poses: Vec<Pose> = scene
        .gt_poses
        .iter()
        .map(|c| {
            if sigma_c == 0.0 {
                return *c;
            }
            let xi = PoseTangent::new(
                Vector3::new(draw(sigma_c), draw(sigma_c), draw(sigma_c)),
                Vector3::new(draw(sigma_c), draw(sigma_c), draw(sigma_c)),
            );
            exp_map(&xi).compose(c)
        })
        .collect();
    let anchor = scene.config.anchor;
    let rel_poses = poses.iter().map(|c| relative_pose(c, &poses[anchor])).collect();
    Estimates {
        grids,
        tracks,
        poses,
        rel_poses,
    }
}

impl SyntheticScene {
    pub fn anchor(&self) -> usize {
        self.config.anchor
    }

    pub fn gt_rel_poses(&self) -> Vec<Pose> {
        let cx = &self.gt_poses[self.anchor()];
        self.gt_poses.iter().map(|c| relative_pose(c, cx)).collect()
    }

    /// Ground-truth tracks in the anchor camera's coordinates.
    pub fn anchor_targets(&self) -> Vec<Vector3<f64>> {
        anchor_targets(&self.gt_world, &self.gt_poses[self.anchor()])
    }

    /// Ground-truth static mask at the threshold implied by `cfg`.
    pub fn static_mask(&self, cfg: &LossConfig) -> Vec<bool> {
        static_mask_in_anchor_frame(
            &self.gt_world,
            &self.gt_poses[self.anchor()],
            self.anchor(),
            &cfg.static_mask_config(self.diagonal),
            Some(&self.gt_tracks.visibility),
        )
    }

    pub fn estimate_store(&self) -> ParamStore {
        ParamStore::from_parts(&self.estimates.grids, &self.estimates.tracks, &self.estimates.rel_poses, self.anchor())
    }

    pub fn gt_store(&self) -> ParamStore {
        ParamStore::from_parts(&self.gt_grids, &self.gt_tracks, &self.gt_rel_poses(), self.anchor())
    }

    /// Loss inputs for the supervised setting: ground-truth visibility,
    /// pixels, targets and static mask.
    pub fn supervised_data(&self, cfg: &LossConfig) -> CouplingData {
        CouplingData {
            anchor: self.anchor(),
            pixels: self.gt_tracks.query_pixels.clone(),
            weights: self.gt_tracks.visibility.clone(),
            static_mask: self.static_mask(cfg),
            targets: Some(self.anchor_targets()),
            pseudo: None,
        }
    }

    /// Loss inputs for the self-supervised setting: pseudo tracks only, with
    /// the provisional static mask computed from `store`.
    pub fn selfsup_data(&self, cfg: &LossConfig, store: &ParamStore) -> Result<CouplingData, LossError> {
        let p = &self.pseudo;
        let mask = provisional_static_mask(
            store,
            &p.pixels,
            &p.visibility,
            &cfg.static_mask_config(self.diagonal),
            cfg.min_weight,
        )?;
        Ok(CouplingData {
            anchor: self.anchor(),
            pixels: p.pixels.clone(),
            weights: p.visibility.clone(),
            static_mask: mask.clone(),
            targets: None,
            pseudo: Some(PseudoObservations {
                pixels: p.pixels.clone(),
                visibility: p.visibility.clone(),
                static_mask: mask,
            }),
        })
    }
}
