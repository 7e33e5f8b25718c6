//! `netgrowth` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage, parse and validation errors, 3 when
//! the numerics fail (covariance not positive definite, matrix exponential
//! overflow, singular systems).

mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use netgrowth::calibration::{calibrate, read_growth_csv, CalibrationConfig, IoTable};
use netgrowth::inference::{fit_mle, FitSpec, ObservationSet};
use netgrowth::moments::{moment_trajectory, write_moments_csv};
use netgrowth::risk::risk_curve;
use netgrowth::sim::{empirical_moments, run_monte_carlo};
use netgrowth::{NetWorthVector, ParamsDocument, SimConfig};

use manifest::RunManifest;

const THREADS_ENV: &str = "NETGROWTH_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "netgrowth",
    version,
    about = "Stochastic model of interdependent firm growth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate trade and expenditure rates from an input-output table.
    Calibrate {
        /// CSV with header `label,x_1,...,x_N,output`.
        #[arg(long)]
        io_table: PathBuf,
        /// CSV with header `label,annual_growth`.
        #[arg(long)]
        growth: PathBuf,
        /// Share of sector output held by the representative firm.
        #[arg(long, default_value_t = 0.01)]
        share: f64,
        /// Days per table period.
        #[arg(long, default_value_t = 365.0)]
        time_unit: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Exact mean and covariance trajectory.
    Moments {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 90.0)]
        t_max: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Euler–Maruyama ensemble plus its empirical moments.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        paths: usize,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long)]
        t_max: f64,
        #[arg(long, default_value_t = 1.0)]
        record_step: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        /// Write the ensemble in the binary layout instead of CSV.
        #[arg(long)]
        binary: bool,
        /// Empirical moments CSV; defaults to `<output>.moments.csv`.
        #[arg(long)]
        moments: Option<PathBuf>,
    },
    /// Value at risk, conditional value at risk and relative risk curves.
    Risk {
        #[arg(long)]
        params: PathBuf,
        /// Stressed sector, by exact label or 0-based index.
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = 0.01)]
        q: f64,
        #[arg(long, default_value_t = 90.0)]
        t_max: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(short, long)]
        output: PathBuf,
        /// Sectors ranked by |R| at t-max.
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Maximum-likelihood fit to net-worth snapshots.
    Fit {
        /// Initial parameters; must carry `a0`.
        #[arg(long)]
        params_init: PathBuf,
        /// CSV with header `t,a_1,...,a_N`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Free::Lambda)]
        free: Free,
        #[arg(long, default_value_t = 2000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Free {
    Lambda,
    Phi,
    Both,
}

impl Free {
    fn as_str(self) -> &'static str {
        match self {
            Free::Lambda => "lambda",
            Free::Phi => "phi",
            Free::Both => "both",
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Model(String, netgrowth::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Model(_, e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => f.write_str(msg),
            Failure::Model(ctx, e) if ctx.is_empty() => write!(f, "{e}"),
            Failure::Model(ctx, e) => write!(f, "{ctx}: {e}"),
        }
    }
}

type CmdResult<T> = Result<T, Failure>;

trait Context<T> {
    fn ctx(self, what: impl std::fmt::Display) -> CmdResult<T>;
}

impl<T> Context<T> for netgrowth::Result<T> {
    fn ctx(self, what: impl std::fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Model(what.to_string(), e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn ctx(self, what: impl std::fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(format!("{what}: {e}")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> CmdResult<()> {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => {
            let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))
            })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Failure::Usage(format!("cannot build thread pool: {e}")))?;
            pool.install(|| dispatch(cli.command))
        }
        Err(_) => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> CmdResult<()> {
    let started = Instant::now();
    let (mut manifest, primary) = match command {
        Command::Calibrate {
            io_table,
            growth,
            share,
            time_unit,
            output,
        } => cmd_calibrate(&io_table, &growth, share, time_unit, &output)?,
        Command::Moments {
            params,
            t_max,
            step,
            output,
        } => cmd_moments(&params, t_max, step, &output)?,
        Command::Simulate {
            params,
            paths,
            dt,
            t_max,
            record_step,
            seed,
            output,
            binary,
            moments,
        } => {
            let moments = moments.unwrap_or_else(|| suffixed(&output, ".moments.csv"));
            let opts = SimulateOptions {
                paths,
                dt,
                t_max,
                record_step,
                seed,
                binary,
            };
            cmd_simulate(&params, &opts, &output, &moments)?
        }
        Command::Risk {
            params,
            source,
            q,
            t_max,
            step,
            output,
            ranking,
        } => cmd_risk(&params, &source, q, t_max, step, &output, ranking.as_deref())?,
        Command::Fit {
            params_init,
            data,
            free,
            max_iter,
            tolerance,
            output,
        } => cmd_fit(&params_init, &data, free, max_iter, tolerance, &output)?,
    };
    let path = manifest
        .write(&primary, started.elapsed())
        .ctx("writing manifest")?;
    eprintln!("wrote {} (manifest {})", primary.display(), path.display());
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_input(path: &Path, manifest: &mut RunManifest) -> CmdResult<Vec<u8>> {
    let bytes = fs::read(path).ctx(path.display())?;
    manifest.input(path, &bytes);
    Ok(bytes)
}

fn read_params(path: &Path, manifest: &mut RunManifest) -> CmdResult<(ParamsDocument, NetWorthVector)> {
    let bytes = read_input(path, manifest)?;
    let text =
        String::from_utf8(bytes).map_err(|_| Failure::Usage(format!("{}: not UTF-8", path.display())))?;
    let doc = ParamsDocument::from_json(&text).ctx(path.display())?;
    doc.params()
        .ctx(path.display())?
        .ensure_valid()
        .ctx(path.display())?;
    let a0 = doc
        .initial()
        .ctx(path.display())?
        .ok_or_else(|| Failure::Usage(format!("{}: missing initial net-worth \"a0\"", path.display())))?;
    Ok((doc, a0))
}

fn create(path: &Path) -> CmdResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).ctx(path.display())?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CmdResult<()> {
    w.flush().ctx(path.display())
}

/// `0, step, 2 step, ..., t_max`; `t_max` must be a whole number of steps.
fn time_grid(t_max: f64, step: f64) -> CmdResult<Vec<f64>> {
    if !(t_max >= 0.0 && t_max.is_finite()) {
        return Err(Failure::Usage(format!(
            "--t-max must be finite and nonnegative, got {t_max}"
        )));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Failure::Usage(format!("step must be positive, got {step}")));
    }
    let k = (t_max / step).round();
    if (k * step - t_max).abs() > 1e-9 * t_max.max(1.0) {
        return Err(Failure::Usage(format!(
            "--t-max {t_max} is not a multiple of step {step}"
        )));
    }
    Ok((0..=k as usize).map(|i| i as f64 * step).collect())
}

fn cmd_calibrate(
    io_table: &Path,
    growth: &Path,
    share: f64,
    time_unit: f64,
    output: &Path,
) -> CmdResult<(RunManifest, PathBuf)> {
    let mut manifest = RunManifest::new("calibrate");
    manifest.option("io_table", io_table.display().to_string());
    manifest.option("growth", growth.display().to_string());
    manifest.option("share", share);
    manifest.option("time_unit", time_unit);

    let table = IoTable::read_csv(&read_input(io_table, &mut manifest)?[..]).ctx(io_table.display())?;
    let rates =
        read_growth_csv(&read_input(growth, &mut manifest)?[..], &table.labels).ctx(growth.display())?;
    let mut config = CalibrationConfig::new(rates);
    config.firm_share = share;
    config.time_unit_days = time_unit;
    let cal = calibrate(&table, &config).ctx("calibration")?;
    for &i in &cal.clamped {
        eprintln!("warning: expenditure rate of {:?} clamped at 0", cal.labels[i]);
    }
    let doc = cal.to_document(
        &config,
        Some(io_table.display().to_string()),
        Some(growth.display().to_string()),
    );
    doc.write(output).ctx(output.display())?;
    manifest.output(output);
    Ok((manifest, output.to_path_buf()))
}

fn cmd_moments(params: &Path, t_max: f64, step: f64, output: &Path) -> CmdResult<(RunManifest, PathBuf)> {
    let mut manifest = RunManifest::new("moments");
    manifest.option("params", params.display().to_string());
    manifest.option("t_max", t_max);
    manifest.option("step", step);

    let (doc, a0) = read_params(params, &mut manifest)?;
    let p = doc.params().ctx(params.display())?;
    let grid = time_grid(t_max, step)?;
    let states = moment_trajectory(&p, &a0, &grid).ctx("moments")?;
    let mut w = create(output)?;
    write_moments_csv(&mut w, &states).ctx(output.display())?;
    finish(w, output)?;
    manifest.output(output);
    Ok((manifest, output.to_path_buf()))
}

struct SimulateOptions {
    paths: usize,
    dt: f64,
    t_max: f64,
    record_step: f64,
    seed: u64,
    binary: bool,
}

fn cmd_simulate(
    params: &Path,
    opts: &SimulateOptions,
    output: &Path,
    moments: &Path,
) -> CmdResult<(RunManifest, PathBuf)> {
    let mut manifest = RunManifest::new("simulate");
    manifest.option("params", params.display().to_string());
    manifest.option("paths", opts.paths);
    manifest.option("dt", opts.dt);
    manifest.option("t_max", opts.t_max);
    manifest.option("record_step", opts.record_step);
    manifest.option("binary", opts.binary);
    manifest.option("moments", moments.display().to_string());
    manifest.seed = Some(opts.seed);

    let (doc, a0) = read_params(params, &mut manifest)?;
    let p = doc.params().ctx(params.display())?;
    let grid = time_grid(opts.t_max, opts.record_step)?;
    let config = SimConfig::new(opts.dt, opts.t_max, opts.paths, opts.seed);
    let ensemble = run_monte_carlo(&p, &a0, &config, &grid).ctx("simulation")?;

    let mut w = create(output)?;
    if opts.binary {
        ensemble.write_binary(&mut w).ctx(output.display())?;
    } else {
        ensemble.write_csv(&mut w).ctx(output.display())?;
    }
    finish(w, output)?;
    manifest.output(output);

    let states = grid
        .iter()
        .map(|&t| empirical_moments(&ensemble, t))
        .collect::<netgrowth::Result<Vec<_>>>()
        .ctx("empirical moments")?;
    let mut w = create(moments)?;
    write_moments_csv(&mut w, &states).ctx(moments.display())?;
    finish(w, moments)?;
    manifest.output(moments);
    Ok((manifest, output.to_path_buf()))
}

/// Exact label match first, then a 0-based index.
fn resolve_source(source: &str, labels: &[String]) -> CmdResult<usize> {
    if let Some(j) = labels.iter().position(|l| l == source) {
        return Ok(j);
    }
    match source.trim().parse::<usize>() {
        Ok(j) if j < labels.len() => Ok(j),
        _ => Err(Failure::Usage(format!(
            "unknown sector {source:?}; valid labels: {} (or an index 0..{})",
            labels
                .iter()
                .map(|l| format!("{l:?}"))
                .collect::<Vec<_>>()
                .join(", "),
            labels.len() - 1
        ))),
    }
}

fn cmd_risk(
    params: &Path,
    source: &str,
    q: f64,
    t_max: f64,
    step: f64,
    output: &Path,
    ranking: Option<&Path>,
) -> CmdResult<(RunManifest, PathBuf)> {
    let mut manifest = RunManifest::new("risk");
    manifest.option("params", params.display().to_string());
    manifest.option("source", source);
    manifest.option("q", q);
    manifest.option("t_max", t_max);
    manifest.option("step", step);
    if let Some(r) = ranking {
        manifest.option("ranking", r.display().to_string());
    }

    let (doc, a0) = read_params(params, &mut manifest)?;
    let p = doc.params().ctx(params.display())?;
    let labels = doc.labels_or_default();
    let j = resolve_source(source, &labels)?;
    manifest.option("source_index", j);
    let grid = time_grid(t_max, step)?;
    let curve = risk_curve(&p, &a0, j, q, &grid).ctx("risk")?;

    let mut w = create(output)?;
    curve.write_csv(&mut w, &labels).ctx(output.display())?;
    finish(w, output)?;
    manifest.output(output);
    if let Some(r) = ranking {
        let mut w = create(r)?;
        curve.write_ranking_csv(&mut w, &labels).ctx(r.display())?;
        finish(w, r)?;
        manifest.output(r);
    }
    Ok((manifest, output.to_path_buf()))
}

fn cmd_fit(
    params_init: &Path,
    data: &Path,
    free: Free,
    max_iter: usize,
    tolerance: f64,
    output: &Path,
) -> CmdResult<(RunManifest, PathBuf)> {
    let mut manifest = RunManifest::new("fit");
    manifest.option("params_init", params_init.display().to_string());
    manifest.option("data", data.display().to_string());
    manifest.option("free", free.as_str());
    manifest.option("max_iter", max_iter);
    manifest.option("tolerance", tolerance);

    let (doc, a0) = read_params(params_init, &mut manifest)?;
    let init = doc.params().ctx(params_init.display())?;
    let obs = ObservationSet::read_csv(&read_input(data, &mut manifest)?[..], a0).ctx(data.display())?;
    let mut spec = FitSpec::new(init);
    if matches!(free, Free::Lambda | Free::Both) {
        spec = spec.free_all_lambda();
    }
    if matches!(free, Free::Phi | Free::Both) {
        spec = spec.free_positive_phi();
    }
    spec.max_iter = max_iter;
    spec.tolerance = tolerance;
    let fit = fit_mle(&spec, &obs).ctx("fit")?;
    if !fit.report.converged {
        eprintln!("warning: optimizer stopped at max-iter {max_iter} before converging");
    }

    let mut out = ParamsDocument::from_params(&fit.params);
    out.a0 = doc.a0.clone();
    out.labels = doc.labels.clone();
    out.fit_report = Some(fit.report);
    out.write(output).ctx(output.display())?;
    manifest.output(output);
    Ok((manifest, output.to_path_buf()))
}
