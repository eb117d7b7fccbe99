//! `faircert`: statistics, certification sweeps, simulation, validation and
//! plotting from the command line.
//!
//! Exit codes: 0 on success (infeasible certificates included), 2 on input or
//! schema errors, 3 on internal solver failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use faircert_core::fairgen::{
    gen_gaussian_mixture, gen_general_trials, gen_sensitive_trials, score_gaussian, validate, DisjointShift,
    GaussianMixtureSpec, LinearScorer, ShiftDataset,
};
use faircert_core::general::{certify_general, certify_general_fs, DEFAULT_GRANULARITY};
use faircert_core::io::{self, SamplesFile};
use faircert_core::plot::render_svg;
use faircert_core::sensitive::{certify_sensitive, certify_sensitive_fs};
use faircert_core::stats::aggregate_stats;
use faircert_core::{Certificate, Error, LossKind, Result, Scenario, SkewOptions, StatsTable};

#[derive(Debug, Parser)]
#[command(name = "faircert", version, about = "Fairness certificates under distribution shift")]
struct Cli {
    /// Flat key = value file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "FAIRCERT_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregate a samples CSV into stats.json.
    Stats(StatsArgs),
    /// Certify a statistics table at one or more radii.
    Certify(CertifyArgs),
    /// Generate fair shifted distributions and record their losses.
    Gen(GenArgs),
    /// Compare trial losses with a certificate sweep.
    Validate(ValidateArgs),
    /// Render a sweep (and optional trials) as SVG.
    Plot(PlotArgs),
    /// Write a scored Gaussian-mixture samples CSV for demonstrations.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Sensitive,
    General,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Sensitive => Scenario::Sensitive,
            ScenarioArg::General => Scenario::General,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Zeroone,
    Bce,
    Jsd,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Zeroone => LossKind::ZeroOne,
            LossArg::Bce => LossKind::Bce,
            LossArg::Jsd => LossKind::Jsd,
        }
    }
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Number of sensitive values S.
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Number of labels C.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value = "zeroone")]
    loss: LossArg,
    /// Loss upper bound, overriding the one implied by --loss.
    #[arg(long = "M", value_name = "M")]
    m: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, value_enum, default_value = "sensitive")]
    scenario: ScenarioArg,
    /// Radii to certify, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["rho_start", "rho_stop", "rho_step"])]
    rho: Vec<f64>,
    #[arg(long, requires_all = ["rho_stop", "rho_step"])]
    rho_start: Option<f64>,
    #[arg(long)]
    rho_stop: Option<f64>,
    #[arg(long)]
    rho_step: Option<f64>,
    /// Grid cells per axis for general shifting.
    #[arg(long, default_value_t = DEFAULT_GRANULARITY)]
    granularity: usize,
    /// Account for sampling error in the statistics.
    #[arg(long)]
    finite_sampling: bool,
    /// Per-quantity confidence parameter.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long)]
    skew_s: Option<f64>,
    #[arg(long)]
    skew_y: Option<f64>,
    /// Loss upper bound, overriding the table's.
    #[arg(long = "M", value_name = "M")]
    m: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Loss-mode samples CSV; general shifting needs a shifted_loss column.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, value_enum, default_value = "sensitive")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 3000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DemoArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "zeroone")]
    loss: LossArg,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn out_dir(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn check_finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::OutOfRange {
            name,
            value: v,
            range: "(0, inf)",
        })
    }
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let kind = LossKind::from(a.loss);
    let samples = io::read_samples_file(&a.samples, a.groups, a.classes)?;
    let mut table = aggregate_stats(&samples.records(), a.groups, a.classes, kind)?;
    if let Some(m) = a.m {
        table = table.with_loss_bound(check_finite("M", m)?)?;
    }
    let path = out_dir(&a.out)?.join("stats.json");
    io::write_stats_file(&path, &table)?;
    println!(
        "{} samples, S={} C={} M={}",
        table.total_count(),
        table.s_count(),
        table.c_count(),
        table.loss_bound().map_or("unbounded".to_string(), |m| m.to_string())
    );
    println!("s,y,n,E,V,p");
    let c = table.c_count();
    for (i, cell) in table.cells().iter().enumerate() {
        println!("{},{},{},{},{},{}", i / c, i % c, cell.n, cell.mean, cell.variance, cell.mass);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn radii(a: &CertifyArgs) -> Result<Vec<f64>> {
    let list = match (a.rho_start, a.rho_stop, a.rho_step) {
        (Some(start), Some(stop), Some(step)) => {
            if !(step > 0.0) {
                return Err(Error::OutOfRange {
                    name: "rho-step",
                    value: step,
                    range: "(0, inf)",
                });
            }
            let count = ((stop - start) / step + 1e-9).floor();
            if !(count >= 0.0) {
                return Err(Error::Schema("rho-stop must not be below rho-start".into()));
            }
            (0..=count as usize)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect()
        }
        _ => a.rho.clone(),
    };
    if list.is_empty() {
        return Err(Error::Schema("give --rho or --rho-start/--rho-stop/--rho-step".into()));
    }
    for &r in &list {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::OutOfRange {
                name: "rho",
                value: r,
                range: "(0, 1]",
            });
        }
    }
    let mut list = list;
    list.sort_by(f64::total_cmp);
    list.dedup();
    Ok(list)
}

fn load_table(path: &Path, m: Option<f64>) -> Result<StatsTable> {
    let table = io::read_stats_file(path)?;
    match m {
        Some(m) => table.with_loss_bound(check_finite("M", m)?),
        None => Ok(table),
    }
}

fn certify_one(table: &StatsTable, a: &CertifyArgs, rho: f64) -> Result<Certificate> {
    let skew = SkewOptions {
        delta_s: a.skew_s,
        delta_l: a.skew_y,
    };
    match (a.scenario, a.finite_sampling) {
        (ScenarioArg::Sensitive, false) => certify_sensitive(table, rho, skew),
        (ScenarioArg::Sensitive, true) => certify_sensitive_fs(table, rho, a.delta, skew),
        (ScenarioArg::General, false) => certify_general(table, rho, a.granularity, skew),
        (ScenarioArg::General, true) => certify_general_fs(table, rho, a.granularity, a.delta, skew),
    }
}

fn cmd_certify(a: &CertifyArgs) -> Result<()> {
    let table = load_table(&a.stats, a.m)?;
    let list = radii(a)?;
    info!("certifying {} radii", list.len());
    let certs: Vec<Certificate> = list
        .par_iter()
        .map(|&rho| certify_one(&table, a, rho))
        .collect::<Result<_>>()?;
    let dir = out_dir(&a.out)?;
    io::write_json_file(&dir.join("certificates.json"), &certs)?;
    io::write_sweep_file(&dir.join("sweep.csv"), &certs)?;
    let scenario = Scenario::from(a.scenario);
    if let Some(c) = certs.first() {
        println!("scenario {scenario}, confidence {}", c.confidence);
        println!("min feasible rho {}", c.min_feasible_rho);
    }
    println!("rho,bound,feasible");
    for c in &certs {
        match c.value {
            Some(v) => println!("{},{},true", c.rho, v),
            None => println!("{},,false", c.rho),
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let SamplesFile::Losses(samples) = io::read_samples_file(&a.samples, 2, 2)? else {
        return Err(Error::Schema("gen needs a loss-mode samples CSV".into()));
    };
    let data = ShiftDataset::new(&samples)?;
    let trials = match a.scenario {
        ScenarioArg::Sensitive => gen_sensitive_trials(&data, a.trials, a.seed)?,
        ScenarioArg::General => gen_general_trials(&data, a.trials, a.seed)?,
    };
    let path = out_dir(&a.out)?.join("trials.csv");
    io::write_trials_file(&path, &trials)?;
    println!("{} trials, wrote {}", trials.len(), path.display());
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let curve = io::read_sweep_file(&a.sweep)?;
    let trials = io::read_trials_file(&a.trials)?;
    let report = validate(&trials, &curve)?;
    let path = out_dir(&a.out)?.join("report.json");
    io::write_json_file(&path, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    if report.out_of_range > 0 {
        println!("{} trials lie beyond the largest radius and were skipped", report.out_of_range);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let curve = io::read_sweep_file(&a.sweep)?;
    let trials = match &a.trials {
        Some(p) => io::read_trials_file(p)?,
        None => Vec::new(),
    };
    let chart = render_svg(&curve, &trials)?;
    let path = out_dir(&a.out)?.join("plot.svg");
    std::fs::write(&path, chart.svg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_demo(a: &DemoArgs) -> Result<()> {
    let g = gen_gaussian_mixture(&GaussianMixtureSpec::default(), a.n, a.seed)?;
    let samples = score_gaussian(&g, &LinearScorer::default(), &DisjointShift::default(), a.loss.into())?;
    let path = out_dir(&a.out)?.join("samples.csv");
    io::write_loss_samples_file(&path, &samples)?;
    println!("{} samples, wrote {}", samples.len(), path.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MalformedProblem(_) | Error::SamplingExhausted(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::OutOfRange {
                name: "jobs",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Unsupported(e.to_string()))?;
    }
    match &cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Demo(a) => cmd_demo(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let args = match config::merge(&Cli::command(), args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
