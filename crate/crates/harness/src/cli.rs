use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resource_lab::resource_model::{self, AllocationProblem, ScalingMode};

use crate::config::{ConfigFile, ExperimentConfig, FitWindow};
use crate::error::{HarnessError, Result};
use crate::report;
use crate::store::{CellKey, Outcome, ResultStore};
use crate::sweep;

pub const OUT_ENV: &str = "RESOURCE_LAB_OUT";
pub const DEFAULT_OUT: &str = "results";

#[derive(Debug, Parser)]
#[command(name = "resource-lab", version, about = "Neuron-allocation scaling experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; falls back to $RESOURCE_LAB_OUT, then `results`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and analyze a single cell.
    Train {
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: Option<f64>,
        /// Seed index within the cell.
        #[arg(long, default_value_t = 0)]
        replicate: u32,
        #[arg(long)]
        force: bool,
    },
    /// Run every cell of the selected experiments.
    Sweep {
        #[arg(long = "experiment")]
        experiments: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Re-run the allocation analysis on stored weights.
    Analyze {
        #[arg(long = "experiment")]
        experiments: Vec<String>,
        /// Write the refreshed analysis back into the store.
        #[arg(long)]
        update: bool,
    },
    /// Fit task loss against allocated neurons.
    Fit {
        #[arg(long = "experiment")]
        experiments: Vec<String>,
        /// all, split, or MIN:MAX
        #[arg(long)]
        window: Option<FitWindow>,
    },
    /// Solve the budgeted neuron allocation problem.
    Allocate {
        #[arg(long, value_delimiter = ',', required = true)]
        a: Vec<f64>,
        /// Per-neuron costs; defaults to 2 for every subtask.
        #[arg(long, value_delimiter = ',')]
        c: Vec<f64>,
        #[arg(long)]
        budget: f64,
        /// Also report the best integer allocation.
        #[arg(long)]
        integer: bool,
        /// Also run the grid-search oracle with this many steps.
        #[arg(long)]
        bruteforce: Option<usize>,
    },
    /// Scaling predictions.
    Predict {
        /// width_and_depth or width_only
        #[arg(long)]
        mode: Option<ScalingMode>,
        /// Observed loss-vs-parameters exponent to compare against.
        #[arg(long, allow_hyphen_values = true)]
        observed: Option<f64>,
        /// Parallel subtask weights.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        /// Series coefficients A,B.
        #[arg(long, value_delimiter = ',')]
        series: Vec<f64>,
        /// Allocations.
        #[arg(long, value_delimiter = ',')]
        n: Vec<f64>,
        /// Per-subtask unit coefficients for parallel predictions.
        #[arg(long, value_delimiter = ',')]
        k: Vec<f64>,
    },
    /// Monte Carlo check of the ensembling law.
    EnsembleOracle {
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        n: Vec<usize>,
    },
    /// Aggregate results and write the CSV bundle.
    Report {
        #[arg(long = "experiment")]
        experiments: Vec<String>,
    },
}

/// Parses `args` and runs the command, writing human output to `out`.
/// Returns the process exit status: 0 on success, 2 on usage errors and 1
/// on any other failure.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(HarnessError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Compact decimal form: up to 9 fractional digits, trailing zeros trimmed.
pub fn fmt_num(x: f64) -> String {
    let s = format!("{x:.9}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        &s
    };
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_num(x)).collect::<Vec<_>>().join(",")
}

fn io(e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    let path = path
        .as_ref()
        .ok_or_else(|| HarnessError::Usage("this command needs --config <path>".into()))?;
    ConfigFile::load(path)
}

fn workers(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let dir = out_dir(cli.out.clone());
    match cli.command {
        Command::Train {
            experiment,
            alpha,
            beta,
            replicate,
            force,
        } => {
            let cfg = load_config(&cli.config)?;
            let exp = cfg.experiment(&experiment)?;
            let master = cli.seed.unwrap_or(cfg.seed);
            let plan = sweep::plan_cell(
                exp,
                master,
                CellKey {
                    alpha,
                    beta,
                    seed: replicate,
                },
            )?;
            let mut store = ResultStore::open(&dir)?;
            let s = sweep::run_cells(&mut store, vec![plan], 1, force)?;
            let entry = store
                .lookup(
                    &exp.id,
                    &CellKey {
                        alpha,
                        beta,
                        seed: replicate,
                    },
                )
                .cloned()
                .ok_or_else(|| HarnessError::NoResults(experiment.clone()))?;
            let r = store.load(&entry)?;
            match r.metrics() {
                Some(m) => writeln!(
                    out,
                    "{} {}: loss = {:e} N = {} per_layer = {:?}{}",
                    exp.id,
                    r.key.slug(),
                    m.final_task_loss,
                    m.allocation.total_allocated,
                    m.allocation.per_layer_live,
                    if s.executed == 0 { " (cached)" } else { "" }
                )
                .map_err(io)?,
                None => return Err(HarnessError::NoResults(format!("{}: cell failed", r.key.slug()))),
            }
        }
        Command::Sweep { experiments, force } => {
            let cfg = load_config(&cli.config)?;
            let master = cli.seed.unwrap_or(cfg.seed);
            let mut store = ResultStore::open(&dir)?;
            for exp in cfg.select(&experiments)? {
                let s = sweep::run_sweep(&mut store, exp, master, workers(cli.workers), force)?;
                writeln!(
                    out,
                    "{}: {} cells, {} trained, {} cached, {} reused, {} failed",
                    exp.id, s.planned, s.executed, s.skipped, s.reused, s.failed
                )
                .map_err(io)?;
            }
        }
        Command::Analyze { experiments, update } => {
            let cfg = load_config(&cli.config)?;
            let mut store = ResultStore::open(&dir)?;
            for exp in cfg.select(&experiments)? {
                let runs = store.results(&exp.id)?;
                if runs.is_empty() {
                    return Err(HarnessError::NoResults(format!("experiment `{}`", exp.id)));
                }
                for r in runs.iter().filter(|r| r.metrics().is_some()) {
                    let mut fresh = r.clone();
                    if update {
                        fresh = sweep::refresh_analysis(&mut store, exp, r)?;
                    } else if let Outcome::Completed(m) = &mut fresh.outcome {
                        sweep::reanalyze(&store, exp, r)?.apply(m);
                    }
                    let Some(m) = fresh.metrics() else { continue };
                    let a = &m.allocation;
                    let mut line = format!(
                        "{} {} N = {} per_layer = {:?} weight_N = {}",
                        exp.id,
                        r.key.slug(),
                        a.total_allocated,
                        a.per_layer_live,
                        a.weight_allocated
                    );
                    if let Some(p) = a.parallel {
                        line += &format!(" N1 = {} N2 = {} superposed = {}", p.task1, p.task2, p.superposed);
                    }
                    if let Some(rd) = &m.redundancy {
                        line += &format!(" redundancy = {}", fmt_num(rd.fraction_nonzero));
                    }
                    writeln!(out, "{line}").map_err(io)?;
                }
            }
        }
        Command::Fit { experiments, window } => {
            let cfg = cli.config.as_ref().map(|p| ConfigFile::load(p)).transpose()?;
            let store = ResultStore::open(&dir)?;
            let ids = if experiments.is_empty() {
                store.experiments()
            } else {
                experiments
            };
            if ids.is_empty() {
                return Err(HarnessError::NoResults(format!("store {}", dir.display())));
            }
            let mut rows = Vec::new();
            for id in &ids {
                let w = window.clone().unwrap_or_else(|| {
                    cfg.as_ref()
                        .and_then(|c| c.experiment(id).ok())
                        .map(|e| e.fit.clone())
                        .unwrap_or_default()
                });
                let (fits, _) = report::emit_fit(&store, id, &w)?;
                for f in &fits {
                    writeln!(
                        out,
                        "{} [{}] exponent = {} coefficient = {} r2 = {} N in [{}, {}] points = {}",
                        f.experiment,
                        f.window,
                        fmt_num(f.exponent),
                        fmt_num(f.coefficient),
                        fmt_num(f.r2),
                        fmt_num(f.x_min),
                        fmt_num(f.x_max),
                        f.count
                    )
                    .map_err(io)?;
                }
                rows.extend(fits);
            }
            report::write_csv(&dir.join("report").join("fits.csv"), &rows)?;
        }
        Command::Allocate {
            a,
            c,
            budget,
            integer,
            bruteforce,
        } => {
            let problem = if c.is_empty() {
                AllocationProblem::with_default_costs(a, budget)?
            } else {
                AllocationProblem::new(a, c, budget)?
            };
            let s = resource_model::solve_allocation(&problem)?;
            writeln!(out, "n = {} loss = {}", join(&s.allocations), fmt_num(s.loss)).map_err(io)?;
            if integer {
                let n = resource_model::round_allocation(&problem, &s)?;
                let nf: Vec<f64> = n.iter().map(|&v| v as f64).collect();
                writeln!(out, "integer n = {} loss = {}", join(&nf), fmt_num(problem.loss(&nf))).map_err(io)?;
            }
            if let Some(steps) = bruteforce {
                let b = resource_model::solve_allocation_bruteforce(&problem, steps)?;
                writeln!(out, "grid n = {} loss = {}", join(&b.allocations), fmt_num(b.loss)).map_err(io)?;
            }
        }
        Command::Predict {
            mode,
            observed,
            betas,
            series,
            n,
            k,
        } => {
            let mut printed = false;
            if let Some(mode) = mode {
                let p = resource_model::parameter_count_exponent(mode);
                writeln!(out, "exponent = {}", p.exponent).map_err(io)?;
                for step in &p.derivation {
                    writeln!(out, "  {step}").map_err(io)?;
                }
                if let Some(obs) = observed {
                    let gap = resource_model::compare_exponent(p.exponent, obs);
                    writeln!(
                        out,
                        "observed {} differs by {}",
                        fmt_num(obs),
                        fmt_num((gap * 1e5).round() / 1e5)
                    )
                    .map_err(io)?;
                }
                printed = true;
            }
            if !betas.is_empty() {
                let k = if k.is_empty() {
                    vec![1.0; betas.len()]
                } else {
                    k.clone()
                };
                let l = resource_model::predict_parallel_loss(&betas, &n, &k)?;
                writeln!(out, "parallel loss = {}", fmt_num(l)).map_err(io)?;
                printed = true;
            }
            if !series.is_empty() {
                if series.len() != 2 || n.len() != 2 {
                    return Err(HarnessError::Usage("--series takes A,B and --n takes N_g,N_f".into()));
                }
                let l = resource_model::predict_series_loss((series[0], series[1]), (n[0], n[1]))?;
                writeln!(out, "series loss = {}", fmt_num(l)).map_err(io)?;
                printed = true;
            }
            if !printed {
                return Err(HarnessError::Usage("predict needs --mode, --betas or --series".into()));
            }
        }
        Command::EnsembleOracle { rho, samples, n } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let r = resource_model::ensemble_empirical_oracle(&n, samples, rho, &mut rng)?;
            for (size, mse) in &r.points {
                writeln!(out, "n = {size} mse = {mse:e}").map_err(io)?;
            }
            writeln!(
                out,
                "exponent = {} r2 = {}",
                fmt_num(r.fit.exponent),
                fmt_num(r.fit.r_squared)
            )
            .map_err(io)?;
        }
        Command::Report { experiments } => {
            let cfg = load_config(&cli.config)?;
            let store = ResultStore::open(&dir)?;
            let selected = cfg.select(&experiments)?;
            let summaries = report::write_report(&store, &selected, &dir.join("report"))?;
            print_summaries(out, &summaries, &selected)?;
        }
    }
    Ok(())
}

fn print_summaries(
    out: &mut dyn Write,
    summaries: &[report::ExperimentSummary],
    exps: &[&ExperimentConfig],
) -> Result<()> {
    for s in summaries {
        writeln!(out, "{}: {} runs ({} failed)", s.experiment, s.runs, s.failed).map_err(io)?;
        for f in &s.fits {
            writeln!(
                out,
                "  fit [{}] exponent = {} r2 = {}",
                f.window,
                fmt_num(f.exponent),
                fmt_num(f.r2)
            )
            .map_err(io)?;
        }
        if let Some(e) = &s.fit_error {
            writeln!(out, "  fit unavailable: {e}").map_err(io)?;
        }
        let is_parallel = exps
            .iter()
            .any(|e| e.id == s.experiment && e.kind == resource_lab::TaskKind::Parallel);
        for a in &s.aggregates {
            let mut line = format!(
                "  alpha = {} beta = {} median N = {} median loss = {}",
                fmt_num(a.alpha),
                a.beta.map_or("-".into(), fmt_num),
                a.median_n.map_or("-".into(), fmt_num),
                a.median_loss.map_or("-".into(), |v| format!("{v:e}"))
            );
            if is_parallel {
                line += &format!(
                    " ratio = {} ± {} superposed = {}",
                    a.ratio_mean.map_or("-".into(), fmt_num),
                    a.ratio_std.map_or("-".into(), fmt_num),
                    a.superposed_total
                );
            }
            writeln!(out, "{line}").map_err(io)?;
        }
    }
    Ok(())
}

/// Resolves a path relative to the workspace's `configs/` directory.
pub fn bundled_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}
