use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sblab::experiment::{
    run_fig1, run_ode_vs_simulation, run_simulation, run_theory_suite, write_json, Arm, OdeCheckConfig, RunConfig,
    RunContext, Seeds, TheoryGrid,
};
use sblab::metrics::{
    detect_learning_times, detect_loss_drops, entropy_report, learning_times_from_drops, read_trace_csv,
};
use sblab::upsampler::{build_plan, export_plan, ingest_trajectories, kmeans2, read_plan, rescale_plan, FeatureMode, PlanMode};
use sblab::Error;

/// Simplicity-bias lab: GD vs SAM on linear-attention in-context regression.
#[derive(Parser)]
#[command(name = "sblab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, env = "SB_LAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Gd,
    Sam,
    GdUpsampled,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Gd => Arm::Gd,
            ArmArg::Sam => Arm::Sam,
            ArmArg::GdUpsampled => Arm::GdUpsampled,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturesArg {
    Trajectory,
    Final,
    LogRatio,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Duplicate,
    Weight,
}

impl From<ModeArg> for PlanMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Duplicate => PlanMode::Duplicate,
            ModeArg::Weight => PlanMode::Weight,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Progress,
    Drops,
}

#[derive(Subcommand)]
enum Command {
    /// One training run of one arm.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "gd")]
        arm: ArmArg,
    },
    /// GD, SAM and GD+upsampling over all seeds.
    Fig1 {
        #[command(flatten)]
        common: Common,
        /// Base seed; the config's seed count is kept.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Entropy and majorization checks over a grid of spectra.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Seed for the random spectra.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Early-phase simulation against the scalar ODEs.
    OdeCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Two-way clustering of loss trajectories into an upsampling plan.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "trajectory")]
        features: FeaturesArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        factor: f64,
        #[arg(long, value_enum, default_value = "duplicate")]
        mode: ModeArg,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        /// Plan file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-scales an existing plan; prints it unless --out is given.
    Upsample {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learning times and their entropy from a trace CSV.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
        /// Run config supplying spectrum, context length and thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Arm whose learning rate converts steps to time.
        #[arg(long, value_enum, default_value = "gd")]
        arm: ArmArg,
        #[arg(long, value_enum, default_value = "progress")]
        method: MethodArg,
        /// Report file; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status contract: 1 for failed checks or runtime errors, 2 for bad
/// configuration or arguments.
enum Failure {
    Invariant(String),
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) | Error::Spectrum(_) | Error::Parse { .. } | Error::Json(_) => {
                Failure::Config(e.to_string())
            }
            Error::Run { ref source, .. } if matches!(**source, Error::Config(_)) => Failure::Config(e.to_string()),
            _ => Failure::Invariant(e.to_string()),
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_or_default<T: Default>(path: Option<&Path>, load: fn(&Path) -> Result<T, Error>) -> Result<T, Error> {
    path.map_or_else(|| Ok(T::default()), load)
}

fn context(common: &Common, config_out: Option<&Path>) -> RunContext {
    let out_dir = common
        .out
        .clone()
        .or_else(|| config_out.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("sblab-out"));
    RunContext { jobs: common.jobs, out_dir, timestamp: std::env::var("SOURCE_DATE_EPOCH").ok() }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { common, seed, arm } => {
            let config = load_run_config(common.config.as_deref())?;
            let ctx = context(&common, config.output_dir.as_deref());
            let seed = match seed {
                Some(s) => s,
                None => *config.seeds.to_vec().first().ok_or_else(|| Failure::Config("no seeds".into()))?,
            };
            let (summary, dir) = run_simulation(&config, arm.into(), seed, &ctx)?;
            println!(
                "{} seed {}: final test loss {:.6}, {} drops -> {}",
                summary.arm.as_str(),
                seed,
                summary.result.final_test_loss,
                summary.result.drop_steps.len(),
                dir.display()
            );
        }
        Command::Fig1 { common, seed } => {
            let mut config = load_run_config(common.config.as_deref())?;
            if let Some(base) = seed {
                config.seeds = Seeds::Range { base, count: config.seeds.to_vec().len() };
            }
            let ctx = context(&common, config.output_dir.as_deref());
            let (summary, dir) = run_fig1(&config, &ctx)?;
            for arm in &summary.arms {
                println!(
                    "{:13} median test loss {:.6}  median entropy {}",
                    arm.arm.as_str(),
                    arm.median_test_loss,
                    arm.median_entropy.map_or("-".into(), |e| format!("{e:.4}"))
                );
            }
            let dc = &summary.drop_check;
            println!(
                "gd drops: {}/{} seeds with {} drops, {} aligned -> {}",
                dc.seeds_with_expected_drops,
                dc.seeds,
                dc.expected_drops,
                dc.seeds_aligned,
                dir.display()
            );
        }
        Command::Theory { common, seed } => {
            let mut grid = load_or_default(common.config.as_deref(), TheoryGrid::load)?;
            if let Some(s) = seed {
                grid.seed = s;
            }
            let ctx = context(&common, None);
            let (report, dir) = run_theory_suite(&grid, &ctx)?;
            for c in &report.checks {
                println!("{:20} pass {} fail {} precondition-skipped {}", c.name, c.passed, c.failed, c.skipped);
            }
            println!("-> {}", dir.display());
            if !report.all_passed() {
                return Err(Failure::Invariant("theory checks failed".into()));
            }
        }
        Command::OdeCheck { common } => {
            let cfg = load_or_default(common.config.as_deref(), OdeCheckConfig::load)?;
            let ctx = context(&common, None);
            let (report, dir) = run_ode_vs_simulation(&cfg, &ctx)?;
            for r in &report.rows {
                println!(
                    "{:16} feature {} λ={:<8} max rel err {:.3e} {}",
                    r.arm.as_str(),
                    r.feature + 1,
                    r.lambda,
                    r.max_rel_err,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            println!("-> {}", dir.display());
            if !report.all_passed() {
                return Err(Failure::Invariant("ODE and simulation disagree".into()));
            }
        }
        Command::Cluster { input, features, seed, factor, mode, max_iters, out } => {
            let traj = ingest_trajectories(&input)?;
            let features = match features {
                FeaturesArg::Trajectory => FeatureMode::Trajectory,
                FeaturesArg::Final => FeatureMode::Final,
                FeaturesArg::LogRatio => FeatureMode::LogRatio,
            };
            let assignment = kmeans2(&traj, features, max_iters, seed)?;
            let plan = build_plan(&assignment, factor, mode.into())?;
            export_plan(&plan, &out)?;
            println!("hard {} easy {} -> {}", plan.counts.hard, plan.counts.easy, out.display());
        }
        Command::Upsample { plan, factor, mode, out } => {
            let old = read_plan(&plan)?;
            let new = rescale_plan(&old, factor, mode.map_or(old.mode, Into::into))?;
            match out {
                Some(path) => {
                    export_plan(&new, &path)?;
                    println!("effective size {} -> {}", new.effective_size(), path.display());
                }
                None => print_json(&new)?,
            }
        }
        Command::Metrics { input, config, arm, method, out } => {
            let config = load_run_config(config.as_deref())?;
            let spec = config.validate()?;
            let trace = read_trace_csv(BufReader::new(File::open(&input).map_err(Error::from)?))?;
            let eta = config.arms.get(arm.into()).learning_rate;
            let m = &config.metrics;
            let times = match method {
                MethodArg::Progress => detect_learning_times(&trace, &spec, config.n_ctx, m.theta, eta)?,
                MethodArg::Drops => {
                    let drops = detect_loss_drops(&trace.losses(), m.smoothing_window, m.drop_ratio)?;
                    let steps: Vec<usize> = trace.step_losses.iter().map(|s| s.0).collect();
                    learning_times_from_drops(&steps, &drops, spec.dim(), eta)
                }
            };
            let report = entropy_report(&times)?;
            match out {
                Some(path) => {
                    write_json(&path, &report)?;
                    println!("entropy {:.6} over M = {} -> {}", report.entropy, report.m, path.display());
                }
                None => print_json(&report)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
