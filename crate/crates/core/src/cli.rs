//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::allocation::simulate;
use crate::day_ahead::{DayAheadInput, DayAheadSchedule};
use crate::error::{Error, Result};
use crate::io::{
    load_per_ev_csv, load_schedule_csv, load_series_csv, load_trace_csv, parse_scenario, FileDigest, OutputWriter,
    RunManifest, ScenarioConfig, SessionSource, CONFIG_SNAPSHOT, OUT_DIR_ENV, PER_EV, TRACE, UNCONTROLLED,
};
use crate::metrics::{ramp_table, ramp_table_csv, report_from_series, RunSeries};
use crate::pipeline::{build_scenario, plan_day_ahead, run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "evgrid", version, about = "Day-ahead and real-time EV charging management for a microgrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample charging sessions from the behavior model.
    Gen(Common),
    /// Solve the day-ahead aggregate schedule.
    Dayahead(Common),
    /// Run real-time allocation against a day-ahead schedule.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Day-ahead schedule CSV (`step,p_hat_kw`).
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Ramp and cost table over finished runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory holding trace.csv, per_ev.csv and uncontrolled.csv.
        #[arg(long = "run", value_name = "DIR")]
        runs: Vec<PathBuf>,
    },
    /// Generate, plan, simulate and report in one run.
    Pipeline(Common),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Scenario JSON; built-in synthetic scenario when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ramping penalty weight.
    #[arg(long)]
    theta: Option<f64>,
    /// Consensus damping.
    #[arg(long)]
    beta: Option<f64>,
    /// Number of generated EVs.
    #[arg(long)]
    evs: Option<usize>,
    #[arg(long, value_name = "BOOL", action = ArgAction::Set)]
    perfect_forecast: Option<bool>,
}

/// A loaded scenario with command-line overrides applied.
struct Context {
    config: ScenarioConfig,
    manifest: RunManifest,
    out: PathBuf,
}

impl Common {
    fn context(&self, subcommand: &str) -> Result<Context> {
        let mut config = match &self.config {
            Some(p) => parse_scenario(p)?,
            None => ScenarioConfig::default(),
        };
        let mut overrides = std::collections::BTreeMap::new();
        if let Some(seed) = self.seed {
            config.seed = seed;
            overrides.insert("seed".to_string(), seed.to_string());
        }
        if let Some(theta) = self.theta {
            config.theta = theta;
            overrides.insert("theta".to_string(), theta.to_string());
        }
        if let Some(beta) = self.beta {
            config.consensus.beta = beta;
            overrides.insert("beta".to_string(), beta.to_string());
        }
        if let Some(n) = self.evs {
            match &mut config.sessions {
                SessionSource::Generate(g) => g.n = n,
                SessionSource::File(_) => {
                    return Err(Error::Invalid("--evs needs generated sessions, config reads a file".into()))
                }
            }
            overrides.insert("evs".to_string(), n.to_string());
        }
        if let Some(pf) = self.perfect_forecast {
            config.perfect_forecast = pf;
            overrides.insert("perfect_forecast".to_string(), pf.to_string());
        }
        config.validate()?;

        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

        let mut manifest = RunManifest::new(subcommand, config.seed, &config)?;
        manifest.overrides = overrides;
        if let Some(p) = &self.config {
            manifest.inputs.push(FileDigest::of_file(p)?);
        }
        for p in config.input_files() {
            manifest.inputs.push(FileDigest::of_file(&p)?);
        }
        Ok(Context { config, manifest, out })
    }
}

fn exit_code(converged: bool) -> i32 {
    if converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn gen(common: &Common) -> Result<i32> {
    let ctx = common.context("gen")?;
    let SessionSource::Generate(g) = &ctx.config.sessions else {
        return Err(Error::Invalid("gen needs a `sessions.generate` block".into()));
    };
    let sessions = ctx.config.load_sessions()?;
    let mut w = OutputWriter::create(&ctx.out)?;
    w.sessions(&sessions)?;
    w.write_json(
        "gen_provenance.json",
        &serde_json::json!({
            "grid": ctx.config.grid,
            "n": g.n,
            "seed": g.seed.unwrap_or(ctx.config.seed),
            "behavior": g.behavior,
        }),
    )?;
    w.finish(ctx.manifest)?;
    println!("{} sessions written to {}", sessions.len(), ctx.out.display());
    Ok(EXIT_OK)
}

fn dayahead(common: &Common) -> Result<i32> {
    let ctx = common.context("dayahead")?;
    let inputs = ctx.config.run_inputs()?;
    let (scenario, repairs) = build_scenario(&inputs)?;
    let schedule = plan_day_ahead(&scenario, inputs.theta, &inputs.solver)?;
    let mut w = OutputWriter::create(&ctx.out)?;
    w.write_json(CONFIG_SNAPSHOT, &ctx.manifest.config)?;
    w.sessions(&scenario.planned_sessions())?;
    w.dayahead(&schedule, inputs.theta, &repairs)?;
    let converged = schedule.stats.converged;
    w.finish(RunManifest {
        converged,
        ..ctx.manifest
    })?;
    println!(
        "objective {:.4} (cost {:.4}, ramp {:.4}) after {} iterations",
        schedule.objective, schedule.cost_term, schedule.ramp_term, schedule.stats.iterations
    );
    Ok(exit_code(converged))
}

fn simulate_cmd(common: &Common, schedule: Option<&Path>) -> Result<i32> {
    let schedule = schedule.ok_or_else(|| Error::Invalid("simulate needs --schedule FILE".into()))?;
    let mut ctx = common.context("simulate")?;
    let inputs = ctx.config.run_inputs()?;
    let p_hat = load_schedule_csv(schedule, &inputs.grid)?;
    ctx.manifest.inputs.push(FileDigest::of_file(schedule)?);
    let (scenario, _) = build_scenario(&inputs)?;
    let input = DayAheadInput {
        price: scenario.price.clone(),
        baseload: scenario.baseload_forecast.clone(),
        solar: scenario.solar_forecast.clone(),
        theta: inputs.theta,
        grid: scenario.grid.clone(),
    };
    let dayahead = DayAheadSchedule::from_profile(p_hat, &input)?;
    let trace = simulate(&scenario, &dayahead, &inputs.simulation)?;
    let mut w = OutputWriter::create(&ctx.out)?;
    w.write_json(CONFIG_SNAPSHOT, &ctx.manifest.config)?;
    w.simulation(&trace, &scenario.uncontrolled_ev_load())?;
    let converged = trace.convergence_rate() == 1.0;
    w.finish(RunManifest {
        converged,
        ..ctx.manifest
    })?;
    println!(
        "{} steps, consensus converged on {:.1}% of them",
        trace.steps.len(),
        100.0 * trace.convergence_rate()
    );
    Ok(exit_code(converged))
}

fn report_cmd(common: &Common, runs: &[PathBuf]) -> Result<i32> {
    if runs.is_empty() {
        return Err(Error::Invalid("report needs at least one --run DIR".into()));
    }
    let mut ctx = common.context("report")?;
    let grid = &ctx.config.grid;
    let price = ctx.config.price()?;
    let mut reports = Vec::with_capacity(runs.len());
    for dir in runs {
        let (trace_path, per_ev_path, unc_path) = (dir.join(TRACE), dir.join(PER_EV), dir.join(UNCONTROLLED));
        let rows = load_trace_csv(&trace_path)?;
        let evs = load_per_ev_csv(&per_ev_path)?;
        let uncontrolled = load_series_csv(&unc_path, "ev_kw", "kW", grid)?.values;
        for p in [&trace_path, &per_ev_path, &unc_path] {
            ctx.manifest.inputs.push(FileDigest::of_file(p)?);
        }
        Error::check_len("trace", grid.steps, rows.len())?;
        let netload: Vec<f64> = rows.iter().map(|r| r.baseload_kw - r.solar_kw).collect();
        let ev: Vec<f64> = rows.iter().map(|r| r.ev_kw).collect();
        let planned: Vec<f64> = rows.iter().map(|r| r.target_kw).collect();
        let label = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let series = RunSeries {
            step_hours: grid.step_hours,
            netload: &netload,
            ev: &ev,
            planned: &planned,
            uncontrolled_ev: &uncontrolled,
            price: &price,
        };
        reports.push(report_from_series(label, series, &evs)?);
    }
    let table = ramp_table(&reports);
    let mut w = OutputWriter::create(&ctx.out)?;
    w.write_json("report.json", &reports)?;
    w.write("ramp_table.txt", table.as_bytes())?;
    w.write("ramp_table.csv", ramp_table_csv(&reports).as_bytes())?;
    w.finish(ctx.manifest)?;
    print!("{table}");
    Ok(EXIT_OK)
}

fn pipeline(common: &Common) -> Result<i32> {
    let ctx = common.context("pipeline")?;
    let inputs = ctx.config.run_inputs()?;
    let label = format!("{} EVs", inputs.sessions.len());
    let result = run(&inputs, &label)?;
    let manifest = crate::io::write_outputs(&ctx.out, &result, inputs.theta, ctx.manifest)?;
    let r = &result.report;
    println!(
        "{} EVs: ramp {:.1} -> {:.1} kW/step ({:.1}% lower), cost ${:.2} vs ${:.2} uncontrolled, tracking RMSE {:.2} kW",
        r.ev_count,
        r.ramp_index_uncontrolled,
        r.ramp_index_controlled,
        r.ramp_reduction_pct,
        r.total_cost_usd,
        r.uncontrolled_cost_usd,
        r.tracking_rmse_kw
    );
    Ok(exit_code(manifest.converged))
}

/// Parse `argv` (program name first) and run. Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let started = Instant::now();
    let outcome = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Dayahead(c) => dayahead(c),
        Command::Simulate { common, schedule } => simulate_cmd(common, schedule.as_deref()),
        Command::Report { common, runs } => report_cmd(common, runs),
        Command::Pipeline(c) => pipeline(c),
    };
    match outcome {
        Ok(code) => {
            eprintln!("finished in {:.2} s", started.elapsed().as_secs_f64());
            if code == EXIT_NOT_CONVERGED {
                eprintln!("warning: solver did not converge everywhere; see events.jsonl and the manifest");
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}
