//! Command-line front end for the gpode library.
//!
//! Five subcommands cover the full workflow: `simulate` writes a noisy
//! benchmark dataset, `train` fits a model from a TOML config and a CSV,
//! `predict` rolls a trained model forward over a grid, `evaluate` scores a
//! checkpoint against a CSV, and `reproduce` runs a named end-to-end
//! experiment protocol.
//!
//! Every failure exits nonzero and prints a single-line JSON record to
//! stderr, `{"error":{"category":...,"exit_code":...,"message":...}}`, so
//! scripts can branch on the category without parsing prose. Exit codes:
//! 2 usage, 3 config, 4 io, 5 data, 6 numerics, 7 checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gpode::checkpoint::{checkpoint_load, checkpoint_save};
use gpode::config::load_config;
use gpode::data::{
    load_csv, make_grid, pca_fit, pca_project, save_csv, simulate, system_by_name, GridKind,
    ObservationSet,
};
use gpode::dynamics::TimeGrid;
use gpode::experiments::{experiment_by_name, initialize_from_observations, ModelSetup, RunOptions};
use gpode::inference::{predict, train, write_history_csv, TrainConfig};
use gpode::metrics::{self, CoverageMode, MetricsReport, REPORT_SCHEMA_VERSION};
use gpode::{Error, Result};

const USAGE_EXIT: i32 = 2;

/// Default substeps for `predict` grid specs that omit the fourth field.
const DEFAULT_PREDICT_SUBSTEPS: usize = 5;

#[derive(Parser)]
#[command(
    name = "gpode",
    version,
    about = "Learn ODE vector fields from noisy trajectories with a sparse GP and normalizing flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a named system and write noisy observations as CSV
    Simulate {
        /// TOML experiment config (system, grid, noise, seed)
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a CSV dataset and write a checkpoint plus history CSV
    Train {
        /// TOML experiment config (model sizes, optimizer settings, seed)
        #[arg(long)]
        config: PathBuf,
        /// Training CSV; defaults to the config's data_csv entry
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint path; the history CSV lands beside it
        #[arg(long)]
        out: PathBuf,
        /// Record real elapsed seconds in the history wall_time column.
        /// Off by default so same-seed runs produce byte-identical files.
        #[arg(long)]
        timing: bool,
    },
    /// Sample a trained model's predictive trajectories over a time grid
    Predict {
        /// Checkpoint written by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Grid spec `t0:t1:count[:substeps]`, e.g. `0:14:100` or `0:14:100:10`
        #[arg(long)]
        grid: String,
        /// Output CSV path (time, per-dimension mean and standard deviation)
        #[arg(long)]
        out: PathBuf,
        /// Predictive samples to draw
        #[arg(long, default_value_t = 50)]
        n_mc: usize,
        /// RNG seed for the predictive draws
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint against a CSV dataset and write a metrics report
    Evaluate {
        /// Checkpoint written by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV with the target values; masked entries are skipped
        #[arg(long)]
        data: PathBuf,
        /// Output JSON report path
        #[arg(long)]
        out: PathBuf,
        /// Predictive samples for the metrics
        #[arg(long, default_value_t = 50)]
        n_mc_eval: usize,
        /// RNG seed for the predictive draws
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Credible-interval construction: `quantile` or `stddev`
        #[arg(long, default_value = "quantile")]
        coverage_mode: String,
        /// Credible-interval level in (0, 1)
        #[arg(long, default_value_t = 0.95)]
        coverage_level: f64,
    },
    /// Run a named experiment end to end and write its report JSON
    Reproduce {
        /// Experiment name: vdp, fhn, or latent-demo
        #[arg(long)]
        experiment: String,
        /// Output report path
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Comma-separated seeds overriding the protocol default
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Optimization steps overriding the protocol default
        #[arg(long)]
        steps: Option<usize>,
        /// Training Monte-Carlo samples overriding the protocol default
        #[arg(long)]
        n_mc: Option<usize>,
        /// Evaluation samples overriding the protocol default
        #[arg(long)]
        n_mc_eval: Option<usize>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                e.exit();
            }
            let _ = e.print();
            emit_error_record("usage", USAGE_EXIT, &e.to_string());
            std::process::exit(USAGE_EXIT);
        }
    };
    if let Err(e) = run(cli.command) {
        let (category, code) = categorize(&e);
        emit_error_record(category, code, &e.to_string());
        std::process::exit(code);
    }
}

/// Map a library error to its stderr category and process exit code.
fn categorize(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::UnknownName { .. }
        | Error::DimensionMismatch { .. } => ("config", 3),
        Error::Io(_) => ("io", 4),
        Error::CsvParse { .. } | Error::EmptyData(_) => ("data", 5),
        Error::Divergence { .. }
        | Error::TrainingFailure { .. }
        | Error::Numerics(_)
        | Error::CholeskyFailed { .. }
        | Error::InversionFailed { .. }
        | Error::DegenerateLayer { .. } => ("numerics", 6),
        Error::Checkpoint(_) => ("checkpoint", 7),
    }
}

fn emit_error_record(category: &str, code: i32, message: &str) {
    let record =
        serde_json::json!({"error": {"category": category, "exit_code": code, "message": message}});
    eprintln!("{record}");
}

/// Prefix io errors with the file they concern; the library reports them
/// without a path.
fn with_path<T>(result: Result<T>, path: &Path) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => other,
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, out } => run_simulate(&config, &out),
        Command::Train { config, data, out, timing } => run_train(&config, data, &out, timing),
        Command::Predict { ckpt, grid, out, n_mc, seed } => {
            run_predict(&ckpt, &grid, &out, n_mc, seed)
        }
        Command::Evaluate { ckpt, data, out, n_mc_eval, seed, coverage_mode, coverage_level } => {
            run_evaluate(&ckpt, &data, &out, n_mc_eval, seed, &coverage_mode, coverage_level)
        }
        Command::Reproduce { experiment, out, seeds, steps, n_mc, n_mc_eval } => {
            run_reproduce(&experiment, &out, seeds, steps, n_mc, n_mc_eval)
        }
    }
}

fn run_simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = with_path(load_config(config), config)?;
    let name = cfg
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("simulate needs a `system` entry in the config".into()))?;
    let system = system_by_name(name)?;
    let x0 = match &cfg.x0 {
        Some(v) => {
            if v.len() != system.dim() {
                return Err(Error::dim("x0", system.dim().to_string(), v.len().to_string()));
            }
            Array1::from(v.clone())
        }
        None => system.default_x0(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kind = cfg.grid_kind()?;
    let train_grid = make_grid(kind, cfg.n_train, 0.0, cfg.t_train_end, cfg.substeps, &mut rng)?;
    let grid = if cfg.n_test > 0 {
        let mut times = train_grid.times().to_vec();
        times.extend(forecast_times(kind, cfg.n_test, cfg.t_train_end, cfg.t_test_end, &mut rng));
        TimeGrid::new(times, cfg.substeps)?
    } else {
        train_grid
    };
    let (_, mut obs) = simulate(system.as_ref(), x0.view(), &grid, cfg.noise_var, &mut rng)?;
    obs.metadata.insert("seed".into(), cfg.seed.to_string());
    obs.metadata.insert("n_train".into(), cfg.n_train.to_string());
    save_csv(&obs, out)?;
    println!(
        "wrote {} observations of {} ({} dims) to {}",
        obs.n(),
        name,
        obs.d(),
        out.display()
    );
    Ok(())
}

/// Times extending a training window to `t_end`: the half-open tail
/// (t_start, t_end], spaced to match the training grid's kind.
fn forecast_times(
    kind: GridKind,
    n: usize,
    t_start: f64,
    t_end: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    match kind {
        GridKind::Regular => {
            (1..=n).map(|i| t_start + (t_end - t_start) * i as f64 / n as f64).collect()
        }
        GridKind::IrregularUniform => loop {
            let mut times: Vec<f64> = (1..n).map(|_| rng.gen_range(t_start..t_end)).collect();
            times.push(t_end);
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
            let lead = times.first().is_none_or(|&t| t > t_start);
            if lead && times.windows(2).all(|w| w[1] > w[0]) {
                break times;
            }
        },
    }
}

fn run_train(config: &Path, data: Option<PathBuf>, out: &Path, timing: bool) -> Result<()> {
    let cfg = with_path(load_config(config), config)?;
    let data_path = match data {
        Some(p) => p,
        None => cfg.data_csv.clone().ok_or_else(|| {
            Error::Config("train needs --data or a `data_csv` entry in the config".into())
        })?,
    };
    let raw = with_path(load_csv(&data_path), &data_path)?;
    // The CSV's substeps entry describes how the data were generated; the
    // model integrates with the config's own resolution instead.
    let grid = TimeGrid::new(raw.grid.times().to_vec(), cfg.substeps)?;
    let train_set = if cfg.pca_dim > 0 {
        if raw.mask.iter().any(|&m| !m) {
            return Err(Error::Config(
                "pca_dim > 0 needs fully observed data; mask out rows before projecting".into(),
            ));
        }
        let map = pca_fit(raw.observations.view(), cfg.pca_dim)?;
        let latent = pca_project(&map, raw.observations.view());
        let mask = Array2::from_elem(latent.raw_dim(), true);
        let mut metadata = raw.metadata.clone();
        metadata.insert("latent_dim".into(), cfg.pca_dim.to_string());
        ObservationSet::new(grid, latent, mask, metadata)?
    } else {
        ObservationSet::new(grid, raw.observations.clone(), raw.mask.clone(), raw.metadata.clone())?
    };
    let setup = ModelSetup {
        inducing: cfg.inducing,
        fourier_features: cfg.fourier_features,
        prior_depth: cfg.prior_depth,
        posterior_depth: cfg.posterior_depth,
        noise_var: cfg.noise_var,
        shooting_segments: (cfg.shooting_segments > 0).then_some(cfg.shooting_segments),
    };
    let params = initialize_from_observations(&train_set, &setup, cfg.seed)?;
    let mut train_config = TrainConfig::new(cfg.steps, cfg.seed);
    train_config.step_size = cfg.step_size;
    train_config.n_mc = cfg.n_mc;
    train_config.clip_norm = cfg.clip_norm;
    train_config.record_walltime = timing;
    let (trained, history) = train(&params, &train_set, None, &train_config)?;
    checkpoint_save(&trained, out)?;
    let history_path = out.with_extension("history.csv");
    write_history_csv(&history, &history_path)?;
    if cfg.pca_dim > 0 {
        println!(
            "note: model lives in the {}-dimensional principal-component space of the data",
            cfg.pca_dim
        );
    }
    match history.last() {
        Some(r) => println!(
            "trained {} steps, final ELBO {:.4}; checkpoint {}, history {}",
            history.len(),
            r.estimate.total,
            out.display(),
            history_path.display()
        ),
        None => println!(
            "trained 0 steps; checkpoint {}, history {}",
            out.display(),
            history_path.display()
        ),
    }
    Ok(())
}

fn run_predict(ckpt: &Path, grid_spec: &str, out: &Path, n_mc: usize, seed: u64) -> Result<()> {
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
    }
    let params = with_path(checkpoint_load(ckpt), ckpt)?;
    let grid = parse_grid_spec(grid_spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ensemble = predict(&params, &grid, n_mc, &mut rng)?;
    let Some(mean) = ensemble.mean() else {
        return Err(Error::Numerics(format!("all {n_mc} predictive samples diverged")));
    };
    let std = ensemble_std(&ensemble.trajectories, &mean);
    let d = mean.ncols();
    let mut text = String::new();
    writeln!(text, "# n_mc={n_mc}").expect("string write");
    writeln!(text, "# n_divergent={}", ensemble.n_divergent).expect("string write");
    writeln!(text, "# seed={seed}").expect("string write");
    writeln!(text, "# substeps={}", grid.substeps()).expect("string write");
    text.push('t');
    for j in 1..=d {
        write!(text, ",mean_{j}").expect("string write");
    }
    for j in 1..=d {
        write!(text, ",std_{j}").expect("string write");
    }
    text.push('\n');
    for (i, &t) in grid.times().iter().enumerate() {
        write!(text, "{t:.16e}").expect("string write");
        for j in 0..d {
            write!(text, ",{:.16e}", mean[[i, j]]).expect("string write");
        }
        for j in 0..d {
            write!(text, ",{:.16e}", std[[i, j]]).expect("string write");
        }
        text.push('\n');
    }
    std::fs::write(out, text)?;
    println!(
        "wrote predictive mean and std over {} points to {} ({} of {} samples diverged)",
        grid.len(),
        out.display(),
        ensemble.n_divergent,
        n_mc
    );
    Ok(())
}

/// Per-entry sample standard deviation (ddof 1); zero when only one
/// trajectory survived.
fn ensemble_std(trajectories: &[gpode::dynamics::Trajectory], mean: &Array2<f64>) -> Array2<f64> {
    let mut acc = Array2::zeros(mean.raw_dim());
    if trajectories.len() < 2 {
        return acc;
    }
    for t in trajectories {
        let diff = &t.states - mean;
        acc = acc + &diff * &diff;
    }
    acc.mapv(|v: f64| (v / (trajectories.len() - 1) as f64).sqrt())
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    n_mc_eval: usize,
    seed: u64,
    coverage_mode: &str,
    coverage_level: f64,
) -> Result<()> {
    if n_mc_eval == 0 {
        return Err(Error::InvalidParameter("n_mc_eval must be at least 1".into()));
    }
    let mode: CoverageMode = coverage_mode.parse()?;
    if !(coverage_level > 0.0 && coverage_level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "coverage_level must lie in (0, 1), got {coverage_level}"
        )));
    }
    let params = with_path(checkpoint_load(ckpt), ckpt)?;
    let obs = with_path(load_csv(data), data)?;
    if obs.d() != params.variational.d {
        return Err(Error::dim(
            "evaluate data",
            format!("{} dims (model)", params.variational.d),
            format!("{} dims (csv)", obs.d()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ensemble = predict(&params, &obs.grid, n_mc_eval, &mut rng)?;
    let Some(pred_mean) = ensemble.mean() else {
        return Err(Error::Numerics(format!("all {n_mc_eval} predictive samples diverged")));
    };
    let views: Vec<_> = ensemble.trajectories.iter().map(|t| t.states.view()).collect();
    let noise = params.model.noise_variances();
    let truth = obs.observations.view();
    let (coverage, coverage_per_dim) = metrics::coverage_detailed(
        &views,
        truth,
        noise.view(),
        coverage_level,
        mode,
        &obs.mask,
        &mut rng,
    )?;
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mse: metrics::mse(pred_mean.view(), truth, &obs.mask)?,
        mnll: metrics::mnll(&views, truth, noise.view(), &obs.mask)?,
        coverage,
        n_divergent: ensemble.n_divergent,
        mse_per_dim: metrics::mse_per_dim(pred_mean.view(), truth, &obs.mask)?,
        mnll_per_dim: metrics::mnll_per_dim(&views, truth, noise.view(), &obs.mask)?,
        coverage_per_dim,
    };
    report.validate()?;
    std::fs::write(out, report.to_json() + "\n")?;
    println!(
        "mse {:.6}, mnll {:.6}, coverage {:.4} at level {:.2} ({} of {} samples diverged); report {}",
        report.mse,
        report.mnll,
        report.coverage,
        coverage_level,
        report.n_divergent,
        n_mc_eval,
        out.display()
    );
    Ok(())
}

fn run_reproduce(
    experiment: &str,
    out: &Path,
    seeds: Option<Vec<u64>>,
    steps: Option<usize>,
    n_mc: Option<usize>,
    n_mc_eval: Option<usize>,
) -> Result<()> {
    let exp = experiment_by_name(experiment)?;
    let mut opts = RunOptions::default();
    if let Some(seeds) = seeds {
        if seeds.is_empty() {
            return Err(Error::Config("--seeds needs at least one seed".into()));
        }
        opts.seeds = seeds;
    }
    opts.steps = steps;
    opts.n_mc = n_mc;
    opts.n_mc_eval = n_mc_eval;
    log::info!("running {}: {}", exp.name(), exp.description());
    let report = exp.run(&opts)?;
    report.validate()?;
    std::fs::write(out, report.to_json() + "\n")?;
    for v in &report.variants {
        println!(
            "{:>14}: median mse {:.4}, mnll {:.4}, coverage {:.3}",
            v.variant, v.median_mse, v.median_mnll, v.median_coverage
        );
    }
    println!("report written to {}", out.display());
    Ok(())
}

/// Parse `t0:t1:count[:substeps]` into an evenly spaced grid.
fn parse_grid_spec(spec: &str) -> Result<TimeGrid> {
    let bad = |msg: &str| Error::Config(format!("grid spec `{spec}`: {msg}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 && parts.len() != 4 {
        return Err(bad("expected t0:t1:count or t0:t1:count:substeps"));
    }
    let t0: f64 = parts[0].parse().map_err(|_| bad("t0 is not a number"))?;
    let t1: f64 = parts[1].parse().map_err(|_| bad("t1 is not a number"))?;
    let n: usize = parts[2].parse().map_err(|_| bad("count is not an integer"))?;
    let substeps: usize = match parts.get(3) {
        Some(s) => s.parse().map_err(|_| bad("substeps is not an integer"))?,
        None => DEFAULT_PREDICT_SUBSTEPS,
    };
    if !(t1 > t0) {
        return Err(bad("t1 must exceed t0"));
    }
    if n < 2 {
        return Err(bad("count must be at least 2"));
    }
    let mut times: Vec<f64> =
        (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
    times[n - 1] = t1;
    TimeGrid::new(times, substeps)
}
