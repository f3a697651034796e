//! Reproducible experiment runs: scene generation, optimization sweeps,
//! evaluation and gradient checks, each writing a directory of JSON and
//! CSV files plus a `manifest.json`.
//!
//! Seeds run on a rayon pool; each seed writes only its own files and
//! aggregate tables are assembled in seed order, so the output bytes do
//! not depend on `jobs`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{evaluate_frame_sets, EvalError, MetricGroup};
use crate::gradcheck::{check_fixture, kink_fixture, random_fixture, rows_csv, GradcheckConfig, GradcheckRow, TapeHook};
use crate::io::{read_frame_set, read_scene, write_file, write_frame_set, write_json, write_scene, IoError};
use crate::metrics::MetricReport;
use crate::optim::{optimize, Ablation, OptimConfig, OptimError, OptimReport, StateMetrics};
use crate::synth::generate;
use crate::tracks::TrackSet;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("seed {seed}, {ablation}: {source}")]
    Optim {
        seed: u64,
        ablation: Ablation,
        #[source]
        source: OptimError,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Provenance of one output directory. Runs with equal manifests produce
/// byte-identical trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch; see [`timestamp`].
    pub timestamp: u64,
    pub config_paths: Vec<String>,
    pub inputs: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablations: Vec<String>,
    pub output_dir: String,
    /// The fully resolved configuration.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, out: &Path, config: RunConfig, timestamp: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp,
            config_paths: Vec::new(),
            inputs: Vec::new(),
            seeds: Vec::new(),
            ablations: Vec::new(),
            output_dir: out.display().to_string(),
            config,
        }
    }

    pub fn write(&self, out: &Path) -> Result<(), IoError> {
        write_json(&out.join(MANIFEST_FILE), self)
    }
}

/// `SOURCE_DATE_EPOCH` when set and valid, otherwise the current time.
pub fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

/// Parses `7`, `0,3,5` or a half-open range `0..10` (ranges and single
/// values may be mixed with commas). Duplicates are removed and the result
/// is sorted.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range {part:?}"))?;
            let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range {part:?}"))?;
            if b <= a {
                return Err(format!("empty seed range {part:?}"));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?);
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed_{seed:04}")
}

/// Runs `f` on a pool of `jobs` threads (`0` = rayon's default).
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Generates one scene directory per seed under `out`.
pub fn run_gen(cfg: &RunConfig, seeds: &[u64], out: &Path, jobs: usize, manifest: &RunManifest) -> Result<(), RunError> {
    cfg.validate()?;
    with_pool(jobs, || {
        seeds.par_iter().try_for_each(|&seed| -> Result<(), RunError> {
            let scene_cfg = crate::synth::SceneConfig { seed, ..cfg.scene };
            let scene = generate(&scene_cfg).map_err(ConfigError::from)?;
            write_scene(&out.join(seed_dir(seed)), &scene)?;
            Ok(())
        })
    })??;
    manifest.write(out)?;
    Ok(())
}

/// Seeds with a `seed_NNNN` directory under `dir`, sorted.
pub fn discover_seeds(dir: &Path) -> Result<Vec<u64>, IoError> {
    let entries = std::fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut seeds = Vec::new();
    for e in entries.flatten() {
        if let Some(s) = e.file_name().to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|n| n.parse().ok()) {
            if e.path().is_dir() {
                seeds.push(s);
            }
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

/// One row of the optimization summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimRow {
    pub ablation: Ablation,
    pub seed: u64,
    /// `ok` or `diverged`.
    pub status: String,
    pub epochs: usize,
    pub stop: String,
    pub initial: Option<StateMetrics>,
    pub final_state: Option<StateMetrics>,
    pub pose_error_reduction: Option<f64>,
    pub final_loss: Option<f64>,
}

impl OptimRow {
    pub fn diverged(&self) -> bool {
        self.status == "diverged"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSummary {
    pub rows: Vec<OptimRow>,
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl OptimSummary {
    pub fn any_diverged(&self) -> bool {
        self.rows.iter().any(OptimRow::diverged)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "ablation,seed,status,epochs,stop,initial_pose_error,final_pose_error,pose_error_reduction,\
             initial_ate,final_ate,initial_pointmap_error,final_pointmap_error,initial_track_error,final_track_error,final_loss\n",
        );
        for r in &self.rows {
            let i = r.initial;
            let f = r.final_state;
            let cols = [
                r.ablation.to_string(),
                r.seed.to_string(),
                r.status.clone(),
                r.epochs.to_string(),
                r.stop.clone(),
                opt_num(i.map(|m| m.pose_error)),
                opt_num(f.map(|m| m.pose_error)),
                opt_num(r.pose_error_reduction),
                opt_num(i.and_then(|m| m.ate)),
                opt_num(f.and_then(|m| m.ate)),
                opt_num(i.map(|m| m.pointmap_error)),
                opt_num(f.map(|m| m.pointmap_error)),
                opt_num(i.map(|m| m.track_error)),
                opt_num(f.map(|m| m.track_error)),
                opt_num(r.final_loss),
            ];
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        s
    }
}

fn optimize_one(scenes: &Path, out: &Path, base: &OptimConfig, ablation: Ablation, seed: u64) -> Result<OptimRow, RunError> {
    let scene = read_scene(&scenes.join(seed_dir(seed)))?;
    let mut cfg = *base;
    cfg.loss = ablation.apply(&base.loss);
    let mut store = scene.estimate_store();
    let dir = out.join(ablation.name()).join(seed_dir(seed));
    match optimize(&mut store, &scene, &cfg) {
        Ok(report) => {
            write_optim_outputs(&dir, &report, &store, &scene.estimates.tracks)?;
            Ok(OptimRow {
                ablation,
                seed,
                status: "ok".into(),
                epochs: report.epochs_run(),
                stop: report.stop.name().into(),
                initial: Some(report.initial),
                final_state: Some(report.final_state),
                pose_error_reduction: Some(report.pose_error_reduction()),
                final_loss: Some(report.final_loss),
            })
        }
        Err(OptimError::Diverged { epoch, loss, initial }) => {
            write_json(
                &dir.join("diverged.json"),
                &serde_json::json!({ "epoch": epoch, "loss": loss, "initial": initial }),
            )?;
            Ok(OptimRow {
                ablation,
                seed,
                status: "diverged".into(),
                epochs: epoch,
                stop: "diverged".into(),
                initial: None,
                final_state: None,
                pose_error_reduction: None,
                final_loss: None,
            })
        }
        Err(source) => Err(RunError::Optim { seed, ablation, source }),
    }
}

/// `report.json`, `epochs.csv` and the optimized estimates under `est/`
/// (poses relative to the anchor).
fn write_optim_outputs(dir: &Path, report: &OptimReport, store: &crate::grad::ParamStore, template: &TrackSet) -> Result<(), IoError> {
    write_json(&dir.join("report.json"), report)?;
    write_file(&dir.join("epochs.csv"), report.epochs_csv())?;
    let mut tracks = template.clone();
    tracks.points = store.track_points();
    write_frame_set(&dir.join("est"), &store.rel_poses(), &tracks, &store.grids())
}

/// Optimizes every `(ablation, seed)` pair of the scenes under `scenes`.
/// Diverged runs become flagged rows rather than errors.
pub fn run_optimize(
    scenes: &Path,
    cfg: &RunConfig,
    ablations: &[Ablation],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
    manifest: &RunManifest,
) -> Result<OptimSummary, RunError> {
    cfg.validate()?;
    let jobs_list: Vec<(Ablation, u64)> = ablations.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let rows = with_pool(jobs, || {
        jobs_list
            .par_iter()
            .map(|&(a, s)| optimize_one(scenes, out, &cfg.optim, a, s))
            .collect::<Result<Vec<_>, _>>()
    })??;
    let summary = OptimSummary { rows };
    write_json(&out.join("summary.json"), &summary)?;
    write_file(&out.join("summary.csv"), summary.to_csv())?;
    manifest.write(out)?;
    Ok(summary)
}

/// Evaluates `pred` against `gt` and writes `metrics.json` and `metrics.csv`.
pub fn run_eval(pred: &Path, gt: &Path, groups: &[MetricGroup], cfg: &RunConfig, out: &Path, manifest: &RunManifest) -> Result<MetricReport, RunError> {
    cfg.validate()?;
    let p = read_frame_set(pred)?;
    let g = read_frame_set(gt)?;
    let report = evaluate_frame_sets(&p, &g, groups, &cfg.eval)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_file(&out.join("metrics.csv"), report.to_csv())?;
    manifest.write(out)?;
    Ok(report)
}

/// Which fixtures a gradient check covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixtureSelection {
    /// Indices of random fixtures.
    pub random: Vec<u64>,
    pub kink: bool,
}

/// Runs the finite-difference sweep and writes `gradcheck.csv` and
/// `gradcheck.json`. Failures are rows, never errors.
pub fn run_gradcheck(
    gc: &GradcheckConfig,
    fixtures: &FixtureSelection,
    out: &Path,
    jobs: usize,
    hook: Option<TapeHook>,
    manifest: &RunManifest,
) -> Result<Vec<GradcheckRow>, RunError> {
    let per_fixture: Vec<Vec<GradcheckRow>> = with_pool(jobs, || {
        let mut v: Vec<Vec<GradcheckRow>> = fixtures
            .random
            .par_iter()
            .map(|&k| check_fixture(&random_fixture(gc.seed, k as usize), gc, hook))
            .collect();
        if fixtures.kink {
            v.push(check_fixture(&kink_fixture(), gc, hook));
        }
        v
    })?;
    let rows: Vec<GradcheckRow> = per_fixture.into_iter().flatten().collect();
    write_file(&out.join("gradcheck.csv"), rows_csv(&rows))?;
    write_json(&out.join("gradcheck.json"), &rows)?;
    manifest.write(out)?;
    Ok(rows)
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree_contents(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, IoError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<(), IoError> {
        let wrap = |source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        };
        for e in std::fs::read_dir(dir).map_err(wrap)? {
            let p = e.map_err(wrap)?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = std::fs::read(&p).map_err(|source| IoError::Io { path: p.clone(), source })?;
                out.push((p.strip_prefix(root).expect("under root").to_path_buf(), bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("3, 1,3").unwrap(), vec![1, 3]);
        assert_eq!(parse_seeds("0..3,10").unwrap(), vec![0, 1, 2, 10]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }
}
