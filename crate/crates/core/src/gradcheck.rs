//! Finite-difference sweep over every loss sub-term and parameter block.
//!
//! Each fixture is a small random scene evaluated at its noisy estimates.
//! For every sub-term and every block the analytic gradient is compared
//! against central differences at a sample of entries: the entries the
//! sub-term touches, plus a few it does not. Blocks a sub-term does not
//! route to must come out exactly zero on both sides.
//!
//! At `tol = 1e-12` the sweep fails on most fixtures. Central differences
//! carry `O(h^2)` truncation error everywhere, and near the Huber kink
//! (`|r| = delta`) the second derivative jumps, so the error there is
//! `O(h)` instead. The `kink` fixture places one residual exactly at the
//! kink to exercise that case.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{finite_diff_check, BlockId, ParamStore, Tape};
use crate::losses::{CouplingData, CoupledObjective, LossConfig, SubTerm, TermSet};
use crate::synth::{generate, NoiseLevels, SceneConfig, SyntheticScene};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Step relative to `max(1, |x|)`; scenes have unit diagonal.
    pub h: f64,
    pub tol: f64,
    pub fixtures: usize,
    pub seed: u64,
    /// Touched entries checked per (sub-term, block).
    pub touched_per_block: usize,
    /// Untouched entries checked per (sub-term, block).
    pub untouched_per_block: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            tol: DEFAULT_TOL,
            fixtures: 50,
            seed: 0,
            touched_per_block: 24,
            untouched_per_block: 4,
        }
    }
}

/// A store, its loss inputs and loss settings.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: String,
    pub scene: SyntheticScene,
    pub store: ParamStore,
    pub data: CouplingData,
    pub cfg: LossConfig,
}

/// Random small scene `k` of the sweep, evaluated at its noisy estimates,
/// with supervised targets and pseudo observations both present.
pub fn random_fixture(seed: u64, k: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d) ^ k as u64);
    let n_frames = rng.random_range(3..=6);
    let size = rng.random_range(8..=14);
    let cfg = SceneConfig {
        n_frames,
        n_static: rng.random_range(6..=16),
        n_dynamic: rng.random_range(0..=6),
        anchor: rng.random_range(0..n_frames),
        width: size,
        height: size,
        noise: NoiseLevels {
            pointmap: rng.random_range(0.0..0.02),
            track: rng.random_range(0.0..0.02),
            pose: rng.random_range(0.0..0.08),
        },
        seed: rng.random(),
        ..Default::default()
    };
    let mut loss = LossConfig {
        tau_static: Some(rng.random_range(0.02..0.2)),
        ..Default::default()
    };
    if rng.random_bool(0.5) {
        loss.cam_target = crate::losses::CamTarget::AnchorSamples;
    }
    if rng.random_bool(0.25) {
        loss.static_gating = false;
    }
    build(format!("random-{k}"), cfg, loss)
}

fn build(name: String, scene_cfg: SceneConfig, cfg: LossConfig) -> Fixture {
    let scene = generate(&scene_cfg).expect("fixture configs are valid");
    let store = scene.estimate_store();
    let mut data = scene.supervised_data(&cfg);
    data.pseudo = scene.selfsup_data(&cfg, &store).expect("estimates are in-domain").pseudo;
    Fixture {
        name,
        scene,
        store,
        data,
        cfg,
    }
}

/// Noiseless scene with a single perturbed track entry whose consistency
/// residual has norm exactly `delta`.
pub fn kink_fixture() -> Fixture {
    let mut f = build(
        "kink".into(),
        SceneConfig {
            n_frames: 3,
            n_static: 6,
            n_dynamic: 0,
            width: 10,
            height: 10,
            noise: NoiseLevels {
                pointmap: 0.0,
                track: 0.0,
                pose: 0.0,
            },
            ..Default::default()
        },
        LossConfig::default(),
    );
    let l = *f.store.layout();
    let off = l.track_offset(0, 1);
    f.store.block_mut(BlockId::Tracks)[off] += f.cfg.delta;
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub fixture: String,
    pub term: String,
    pub block: BlockId,
    pub routed: bool,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

impl GradcheckRow {
    pub const CSV_HEADER: &'static str = "fixture,term,block,routed,checked,max_rel_error,worst_index,analytic,numeric,pass";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.fixture,
            self.term,
            self.block,
            self.routed,
            self.checked,
            self.max_rel_error,
            self.worst_index.map(|i| i.to_string()).unwrap_or_default(),
            self.analytic,
            self.numeric,
            self.pass
        )
    }
}

/// Optional gradient corruption applied after the analytic pass; used to
/// test that the harness reports failures.
pub type TapeHook<'a> = &'a (dyn Fn(SubTerm, &mut Tape) + Sync);

/// Checks every sub-term against every block on one fixture.
pub fn check_fixture(f: &Fixture, cfg: &GradcheckConfig, hook: Option<TapeHook>) -> Vec<GradcheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ hash(&f.name));
    let mut rows = Vec::new();
    for term in SubTerm::ALL {
        let obj = CoupledObjective {
            data: &f.data,
            cfg: &f.cfg,
            terms: TermSet::only(term),
        };
        let mut tape = Tape::for_store(&f.store);
        crate::grad::Objective::evaluate(&obj, &f.store, &f.store, Some(&mut tape));
        if let Some(h) = hook {
            h(term, &mut tape);
        }
        for block in BlockId::ALL {
            let routed = term.routing().admits(block);
            let indices = pick_indices(&tape, &f.store, block, cfg, &mut rng);
            let check = finite_diff_check(&obj, &f.store, block, &indices, cfg.h, Some(&tape)).expect("indices are in range");
            let pass = if routed {
                check.max_rel_error <= cfg.tol
            } else {
                // Non-routed blocks must be exactly zero on both sides.
                check.max_rel_error == 0.0 && tape.grad(block).iter().all(|&g| g == 0.0)
            };
            rows.push(GradcheckRow {
                fixture: f.name.clone(),
                term: term.name().into(),
                block,
                routed,
                checked: check.checked,
                max_rel_error: check.max_rel_error,
                worst_index: check.worst_index,
                analytic: check.worst_analytic,
                numeric: check.worst_numeric,
                pass,
            });
        }
    }
    rows
}

fn hash(s: &str) -> u64 {
    // FNV-1a; only needs to be stable.
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn pick_indices(tape: &Tape, store: &ParamStore, block: BlockId, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = store.block(block).len();
    let touched = tape.touched(block);
    let mut out: Vec<usize> = if touched.len() <= cfg.touched_per_block {
        touched.clone()
    } else {
        let mut v: Vec<usize> = sample(rng, touched.len(), cfg.touched_per_block).into_iter().map(|j| touched[j]).collect();
        v.sort_unstable();
        v
    };
    let untouched = len - touched.len();
    if untouched > 0 {
        for _ in 0..cfg.untouched_per_block.min(untouched) {
            let mut j = rng.random_range(0..len);
            while touched.binary_search(&j).is_ok() {
                j = rng.random_range(0..len);
            }
            out.push(j);
        }
    }
    out
}

/// Runs [`check_fixture`] over `cfg.fixtures` random fixtures.
pub fn run_sweep(cfg: &GradcheckConfig, hook: Option<TapeHook>) -> Vec<GradcheckRow> {
    (0..cfg.fixtures)
        .flat_map(|k| check_fixture(&random_fixture(cfg.seed, k), cfg, hook))
        .collect()
}

pub fn rows_csv(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{}\n", GradcheckRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}
