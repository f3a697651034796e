//! Joint first-order refinement of pointmaps, tracks and relative poses.
//!
//! Each epoch takes one gradient step per block with its own step size,
//! halving a shared scale until the monitored loss decreases. The update
//! direction is the routed gradient, which respects every stop-gradient in
//! the objective, so it need not be the full gradient of the loss being
//! monitored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{BlockId, ParamStore, Tape};
use crate::losses::{evaluate, CouplingData, LossBreakdown, LossConfig, LossError, TermSet};
use crate::metrics::trajectory::{ate, pose_tangent_error, TrajectoryPair};
use crate::synth::SyntheticScene;

/// Loss values at or below this count as an exact optimum.
pub const ZERO_LOSS: f64 = 1e-20;
/// Gradients with every entry at or below this count as zero.
pub const ZERO_GRAD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("loss diverged at epoch {epoch}: {loss} exceeds 10x the initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSteps {
    pub grids: f64,
    pub tracks: f64,
    pub poses: f64,
}

impl Default for BlockSteps {
    fn default() -> Self {
        Self {
            grids: 0.05,
            tracks: 0.05,
            poses: 0.5,
        }
    }
}

impl BlockSteps {
    pub fn get(&self, b: BlockId) -> f64 {
        match b {
            BlockId::Grids => self.grids,
            BlockId::Tracks => self.tracks,
            BlockId::Poses => self.poses,
        }
    }
}

/// What the backtracking line search compares against the current loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// The full loss at the trial state. The loss sequence is monotone, but
    /// the routed direction need not descend it, so runs can stall.
    #[default]
    Joint,
    /// The trial state with every stop-gradient copy held at the pre-step
    /// state. The routed gradient is the exact gradient of this function,
    /// so some step always decreases it; the full loss may rise slightly.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: BlockSteps,
    pub max_epochs: usize,
    /// Stop when the loss fell by less than this fraction over `window` epochs.
    pub tolerance: f64,
    pub window: usize,
    pub max_halvings: usize,
    /// Per-block gradient norm cap.
    pub clip_norm: Option<f64>,
    pub line_search: LineSearch,
    pub loss: LossConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: BlockSteps::default(),
            max_epochs: 300,
            tolerance: 1e-8,
            window: 5,
            max_halvings: 20,
            clip_norm: None,
            line_search: LineSearch::Joint,
            loss: LossConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let s = self.steps;
        for (name, v) in [("steps.grids", s.grids), ("steps.tracks", s.tracks), ("steps.poses", s.poses)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.max_epochs < 1 {
            return Err("max_epochs must be at least 1".into());
        }
        if self.window < 1 {
            return Err("window must be at least 1".into());
        }
        if !(self.tolerance >= 0.0) {
            return Err("tolerance must be non-negative".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.loss.validate().map_err(|m| format!("loss.{m}"))
    }

    pub fn terms(&self) -> TermSet {
        TermSet::from_toggles(&self.loss.terms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Loss and gradients are numerically zero.
    Stationary,
    /// Relative decrease over the window fell below the tolerance.
    Converged,
    /// No step size in the backtracking range decreased the loss.
    Stalled,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Stationary => "stationary",
            StopReason::Converged => "converged",
            StopReason::Stalled => "stalled",
            StopReason::MaxEpochs => "max-epochs",
        }
    }
}

/// Error measures of a parameter state against the scene's ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    /// Mean `|log(C_est C_gt^-1)|` over non-anchor relative poses.
    pub pose_error: f64,
    /// ATE of relative-pose camera centres, with scale; `None` when the
    /// centres are degenerate (e.g. collinear).
    pub ate: Option<f64>,
    /// Mean distance between estimated and true pointmap values.
    pub pointmap_error: f64,
    /// Mean distance between estimated and true visible track points.
    pub track_error: f64,
}

pub fn state_metrics(store: &ParamStore, scene: &SyntheticScene) -> StateMetrics {
    let est = store.rel_poses();
    let gt = scene.gt_rel_poses();
    let pose_error = pose_tangent_error(&est, &gt, scene.anchor());
    let ate = TrajectoryPair::new(est, gt).ok().and_then(|p| ate(&p, true).ok());
    let l = store.layout();
    let mut pm = 0.0;
    for (t, g) in scene.gt_grids.iter().enumerate() {
        for (p, v) in g.points().iter().enumerate() {
            pm += (store.grid_value(t, p) - v).norm();
        }
    }
    let pointmap_error = pm / (l.n_frames * l.pixels()) as f64;
    let (mut te, mut n) = (0.0, 0usize);
    for i in 0..l.n_tracks {
        for t in 0..l.n_frames {
            if scene.gt_tracks.weight(i, t) > 0.5 {
                te += (store.track_point(i, t) - scene.gt_tracks.point(i, t)).norm();
                n += 1;
            }
        }
    }
    StateMetrics {
        pose_error,
        ate,
        pointmap_error,
        track_error: if n == 0 { 0.0 } else { te / n as f64 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Loss after the accepted step (equal to `loss.total` when no step was taken).
    pub loss_after: f64,
    /// Line-search objective after the step.
    pub surrogate_after: f64,
    pub step_scale: f64,
    pub halvings: usize,
    pub grad_norm: f64,
    pub pose_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    pub initial: StateMetrics,
    pub final_state: StateMetrics,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl OptimReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn pose_error_reduction(&self) -> f64 {
        if self.initial.pose_error == 0.0 {
            0.0
        } else {
            1.0 - self.final_state.pose_error / self.initial.pose_error
        }
    }

    /// Per-epoch CSV.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(
            "epoch,total,cons,cam,selfsup,loss_after,surrogate_after,step_scale,halvings,grad_norm,pose_error,skipped\n",
        );
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.loss.total,
                e.loss.cons_value,
                e.loss.cam_value,
                e.loss.selfsup_value,
                e.loss_after,
                e.surrogate_after,
                e.step_scale,
                e.halvings,
                e.grad_norm,
                e.pose_error,
                e.loss.skipped
            ));
        }
        s
    }
}

fn coupling_data(scene: &SyntheticScene, cfg: &OptimConfig, store: &ParamStore) -> Result<CouplingData, LossError> {
    if cfg.loss.terms.selfsup {
        scene.selfsup_data(&cfg.loss, store)
    } else {
        Ok(scene.supervised_data(&cfg.loss))
    }
}

fn total(store: &ParamStore, data: &CouplingData, cfg: &OptimConfig, terms: TermSet) -> Result<f64, LossError> {
    Ok(evaluate(store, store, data, &cfg.loss, terms, None)?.total)
}

/// Runs gradient descent on `store` in place.
///
/// Steps are accepted on strict decrease of the [`LineSearch`] objective.
/// The full loss after each step is recorded in `loss_after` and drives
/// the convergence test.
///
/// In the self-supervised setting the provisional static mask is rebuilt
/// from the current state at the start of every epoch; otherwise the
/// ground-truth mask stays fixed.
pub fn optimize(store: &mut ParamStore, scene: &SyntheticScene, cfg: &OptimConfig) -> Result<OptimReport, OptimError> {
    cfg.validate().map_err(OptimError::Config)?;
    let terms = cfg.terms();
    let initial = state_metrics(store, scene);
    let mut data = coupling_data(scene, cfg, store)?;
    let initial_loss = total(store, &data, cfg, terms)?;
    let mut epochs = Vec::new();
    let mut history = vec![initial_loss];
    let mut tape = Tape::for_store(store);
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        if cfg.loss.terms.selfsup && epoch > 1 {
            data = coupling_data(scene, cfg, store)?;
        }
        tape.reset();
        let breakdown = evaluate(store, store, &data, &cfg.loss, terms, Some(&mut tape))?;
        let loss = breakdown.total;
        if let Some(c) = cfg.clip_norm {
            for b in BlockId::ALL {
                let n = tape.norm(b);
                if n > c {
                    tape.grad_mut(b).iter_mut().for_each(|g| *g *= c / n);
                }
            }
        }
        let grad_norm = BlockId::ALL.iter().map(|&b| tape.norm(b).powi(2)).sum::<f64>().sqrt();
        let grad_max = BlockId::ALL.iter().map(|&b| tape.max_abs(b)).fold(0.0, f64::max);
        let mut record = EpochRecord {
            epoch,
            loss: breakdown,
            loss_after: loss,
            surrogate_after: loss,
            step_scale: 0.0,
            halvings: 0,
            grad_norm,
            pose_error: 0.0,
        };
        if loss <= ZERO_LOSS || grad_max <= ZERO_GRAD {
            record.pose_error = pose_tangent_error(&store.rel_poses(), &scene.gt_rel_poses(), scene.anchor());
            epochs.push(record);
            stop = StopReason::Stationary;
            break;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        let mut smallest_trial = f64::INFINITY;
        for h in 0..=cfg.max_halvings {
            let mut trial = store.clone();
            for b in BlockId::ALL {
                let eta = alpha * cfg.steps.get(b);
                let g = tape.grad(b);
                for (x, gi) in trial.block_mut(b).iter_mut().zip(g) {
                    *x -= eta * gi;
                }
            }
            // Evaluate the state exactly as it will be stored.
            trial.retract();
            let lt = match cfg.line_search {
                LineSearch::Joint => total(&trial, &data, cfg, terms)?,
                LineSearch::Frozen => evaluate(&trial, store, &data, &cfg.loss, terms, None)?.total,
            };
            smallest_trial = lt;
            if lt.is_finite() && lt < loss {
                accepted = Some((trial, lt, h));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, lt, h)) => {
                *store = trial;
                record.surrogate_after = lt;
                record.loss_after = match cfg.line_search {
                    LineSearch::Joint => lt,
                    LineSearch::Frozen => total(store, &data, cfg, terms)?,
                };
                record.step_scale = alpha;
                record.halvings = h;
            }
            None => {
                if !smallest_trial.is_finite() || smallest_trial > 10.0 * initial_loss {
                    return Err(OptimError::Diverged {
                        epoch,
                        loss: smallest_trial,
                        initial: initial_loss,
                    });
                }
                record.halvings = cfg.max_halvings;
                record.pose_error = pose_tangent_error(&store.rel_poses(), &scene.gt_rel_poses(), scene.anchor());
                epochs.push(record);
                stop = StopReason::Stalled;
                break;
            }
        }
        record.pose_error = pose_tangent_error(&store.rel_poses(), &scene.gt_rel_poses(), scene.anchor());
        epochs.push(record);
        history.push(record.loss_after);
        if history.len() > cfg.window {
            let past = history[history.len() - 1 - cfg.window];
            let now = record.loss_after;
            if past <= 0.0 || (past - now) / past < cfg.tolerance {
                stop = StopReason::Converged;
                break;
            }
        }
    }
    let final_loss = total(store, &coupling_data(scene, cfg, store)?, cfg, terms)?;
    Ok(OptimReport {
        epochs,
        stop,
        initial,
        final_state: state_metrics(store, scene),
        initial_loss,
        final_loss,
    })
}

/// Named term selections for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No coupling: every branch keeps its initial prediction.
    BranchOnly,
    Cons,
    Cam,
    /// Consistency and camera terms together.
    Full,
    /// Consistency and camera terms with static gating turned off.
    FullUngated,
    /// Pseudo-track objective only; no 3D targets.
    Selfsup,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::BranchOnly,
        Ablation::Cons,
        Ablation::Cam,
        Ablation::Full,
        Ablation::FullUngated,
        Ablation::Selfsup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BranchOnly => "branch-only",
            Ablation::Cons => "cons",
            Ablation::Cam => "cam",
            Ablation::Full => "full",
            Ablation::FullUngated => "full-ungated",
            Ablation::Selfsup => "selfsup",
        }
    }

    /// Returns `cfg` with the term toggles (and gating) of this ablation.
    pub fn apply(self, cfg: &LossConfig) -> LossConfig {
        let mut c = *cfg;
        let (cons, cam, selfsup) = match self {
            Ablation::BranchOnly => (false, false, false),
            Ablation::Cons => (true, false, false),
            Ablation::Cam => (false, true, false),
            Ablation::Full | Ablation::FullUngated => (true, true, false),
            Ablation::Selfsup => (false, false, true),
        };
        c.terms.cons = cons;
        c.terms.cam = cam;
        c.terms.selfsup = selfsup;
        if self == Ablation::FullUngated {
            c.static_gating = false;
        }
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let a = match s {
            "branch-only" | "none" => Ablation::BranchOnly,
            "cons" | "+cons" => Ablation::Cons,
            "cam" | "+cam" => Ablation::Cam,
            "full" => Ablation::Full,
            "full-ungated" | "ungated" => Ablation::FullUngated,
            "selfsup" | "+selfsup" => Ablation::Selfsup,
            _ => {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                return Err(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")));
            }
        };
        Ok(a)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
