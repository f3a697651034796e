//! `trackcouple`: generate scenes, run optimization ablations, evaluate
//! predictions and check gradients.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
//! 4 gradient check failure, 5 divergence in at least one seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trackcouple::config::{ConfigError, RunConfig};
use trackcouple::eval::{EvalError, MetricGroup};
use trackcouple::experiment::{
    discover_seeds, parse_seeds, run_eval, run_gen, run_gradcheck, run_optimize, timestamp, FixtureSelection, RunError,
    RunManifest,
};
use trackcouple::gradcheck::{GradcheckConfig, DEFAULT_H, DEFAULT_TOL};
use trackcouple::optim::Ablation;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;
const EXIT_DIVERGED: u8 = 5;

#[derive(Parser)]
#[command(name = "trackcouple", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `$TRACKCOUPLE_OUT/<command>`, or
    /// `trackcouple-out/<command>` when the variable is unset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic scene directory per seed.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Seeds: `7`, `0,3,5` or `0..10`.
        #[arg(long, default_value = "0")]
        seeds: String,
    },
    /// Optimize generated scenes under one or more ablations.
    Optimize {
        /// Directory written by `gen`.
        scenes: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Comma-separated ablations: branch-only (none), cons, cam, full,
        /// full-ungated, selfsup.
        #[arg(long, default_value = "full")]
        ablation: String,
        /// Subset of seeds; defaults to every scene found.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Compare a prediction directory against a ground-truth directory.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Comma-separated metric groups: trajectory, tracking, pointmap,
        /// depth, or all.
        #[arg(long, default_value = "all")]
        metrics: String,
    },
    /// Finite-difference check of every loss term against every block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random fixture indices.
        #[arg(long, default_value = "0..50")]
        seeds: String,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = DEFAULT_H)]
        h: f64,
        /// Maximum relative error.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Also check the fixture with a residual on the Huber kink.
        #[arg(long)]
        kink: bool,
        /// Test hook: add 1e-3 to every routed gradient entry.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(ConfigError::Invalid { .. }) | RunError::Pool(_) => EXIT_CONFIG,
            // A config file that exists but does not parse is a config error.
            RunError::Config(ConfigError::Io(trackcouple::io::IoError::Format { .. })) => EXIT_CONFIG,
            RunError::Config(ConfigError::Io(_)) | RunError::Io(_) => EXIT_IO,
            RunError::Eval(EvalError::Missing { .. } | EvalError::Metric { .. }) => EXIT_IO,
            RunError::Optim { .. } => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        std::env::var_os("TRACKCOUPLE_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("trackcouple-out"))
            .join(command)
    })
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::from(RunError::Config(e))),
        None => Ok(RunConfig::default()),
    }
}

fn manifest(command: &str, common: &Common, out: &Path, cfg: &RunConfig) -> RunManifest {
    let mut m = RunManifest::new(command, out, cfg.clone(), timestamp());
    m.config_paths = common.config.iter().map(|p| p.display().to_string()).collect();
    m
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds = parse_seeds(&seeds).map_err(Failure::config)?;
            let out = out_dir(&common, "gen");
            let mut m = manifest("gen", &common, &out, &cfg);
            m.seeds = seeds.clone();
            run_gen(&cfg, &seeds, &out, common.jobs, &m)?;
            println!("wrote {} scene(s) to {}", seeds.len(), out.display());
            Ok(())
        }
        Command::Optimize {
            scenes,
            common,
            ablation,
            seeds,
        } => {
            let cfg = load_config(&common)?;
            let ablations = ablation
                .split(',')
                .map(|s| s.trim().parse::<Ablation>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::config)?;
            let seeds = match seeds {
                Some(s) => parse_seeds(&s).map_err(Failure::config)?,
                None => discover_seeds(&scenes).map_err(|e| Failure::from(RunError::Io(e)))?,
            };
            if seeds.is_empty() {
                return Err(Failure {
                    code: EXIT_IO,
                    message: format!("{}: no seed_NNNN scene directories", scenes.display()),
                });
            }
            let out = out_dir(&common, "optimize");
            let mut m = manifest("optimize", &common, &out, &cfg);
            m.seeds = seeds.clone();
            m.ablations = ablations.iter().map(|a| a.to_string()).collect();
            m.inputs = vec![scenes.display().to_string()];
            let summary = run_optimize(&scenes, &cfg, &ablations, &seeds, &out, common.jobs, &m)?;
            print!("{}", summary.to_csv());
            if summary.any_diverged() {
                return Err(Failure {
                    code: EXIT_DIVERGED,
                    message: "at least one seed diverged (see summary.csv)".into(),
                });
            }
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            common,
            metrics,
        } => {
            let cfg = load_config(&common)?;
            let groups = MetricGroup::parse_list(&metrics).map_err(Failure::config)?;
            let out = out_dir(&common, "eval");
            let mut m = manifest("eval", &common, &out, &cfg);
            m.inputs = vec![pred.display().to_string(), gt.display().to_string()];
            let report = run_eval(&pred, &gt, &groups, &cfg, &out, &m)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Gradcheck {
            common,
            seeds,
            h,
            tol,
            kink,
            corrupt,
        } => {
            let cfg = load_config(&common)?;
            if !(h > 0.0) || !(tol > 0.0) {
                return Err(Failure::config("--h and --tol must be positive"));
            }
            let random = parse_seeds(&seeds).map_err(Failure::config)?;
            let gc = GradcheckConfig {
                h,
                tol,
                fixtures: random.len(),
                ..Default::default()
            };
            let out = out_dir(&common, "gradcheck");
            let mut m = manifest("gradcheck", &common, &out, &cfg);
            m.seeds = random.clone();
            let corrupt_hook = |term: trackcouple::losses::SubTerm, tape: &mut trackcouple::grad::Tape| {
                for b in trackcouple::grad::BlockId::ALL {
                    if term.routing().admits(b) {
                        tape.grad_mut(b).iter_mut().for_each(|g| *g += 1e-3);
                    }
                }
            };
            let hook: Option<trackcouple::gradcheck::TapeHook> = if corrupt { Some(&corrupt_hook) } else { None };
            let rows = run_gradcheck(&gc, &FixtureSelection { random, kink }, &out, common.jobs, hook, &m)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
            println!("{} checks, {} failed; table in {}", rows.len(), failed.len(), out.join("gradcheck.csv").display());
            for r in &failed {
                println!("FAIL {}", r.csv_line());
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_GRADCHECK,
                    message: format!("{} gradient check(s) failed", failed.len()),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
