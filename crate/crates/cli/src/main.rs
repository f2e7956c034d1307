//! `granmpc` command-line driver: set precomputation, closed-loop episodes,
//! Monte Carlo batches and the three-method comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use granmpc::ocp::{MethodKind, TerminalCost};
use granmpc::scenario::{build_sets, ScenarioConfig, SetArtifacts};
use granmpc::sim::{
    compare_summaries, monte_carlo_runs, summarize, write_json, write_summary_csv, MonteCarloSummary, RunRecord,
};
use granmpc::Error;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "granmpc", version, about = "Robust + stochastic MPC with models of different granularity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the tube and covariance schedule and write them as JSON.
    BuildSets(Common),
    /// Run closed-loop episodes and write their trajectories.
    Run(Batch),
    /// Run a Monte Carlo batch for one method.
    Montecarlo(Batch),
    /// Run every method on common seeds and report cost and timing ratios.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario config file (TOML); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `section.key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    #[arg(long, value_parser = PossibleValuesParser::new(["target", "origin"]))]
    terminal_cost: Option<String>,
    /// Record every SQP iterate in the trajectory files.
    #[arg(long)]
    debug_trace: bool,
}

#[derive(Debug, Args)]
struct Batch {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = PossibleValuesParser::new(["granular", "single-rsmpc", "single-rmpc"]))]
    method: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    runs: Option<u64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    runs: Option<u64>,
}

/// Config file, then `--set` overrides, then dedicated flags.
fn effective_config(common: &Common, method: Option<&str>, runs: Option<u64>) -> Result<ScenarioConfig, Error> {
    let base = match &common.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => ScenarioConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.set)?;
    if let Some(m) = method {
        cfg.run.method = m.parse()?;
    }
    if let Some(r) = runs {
        cfg.run.runs = r as usize;
    }
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.run.jobs = j as usize;
    }
    if let Some(o) = &common.out {
        cfg.run.out = o.display().to_string();
    }
    if let Some(t) = &common.terminal_cost {
        cfg.costs.terminal_cost = t.parse::<TerminalCost>()?;
    }
    if common.debug_trace {
        cfg.solver.trace = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &ScenarioConfig) -> Result<PathBuf, Error> {
    let out = PathBuf::from(&cfg.run.out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct TightenedBounds {
    input: f64,
    velocity: f64,
    lane: [f64; 2],
}

#[derive(Debug, Serialize)]
struct SetsReport<'a> {
    tightened: TightenedBounds,
    #[serde(flatten)]
    artifacts: &'a SetArtifacts,
}

fn symmetric(upper: Option<f64>, lower: Option<f64>) -> f64 {
    upper.unwrap_or(f64::INFINITY).min(-lower.unwrap_or(f64::NEG_INFINITY))
}

fn cmd_build_sets(common: &Common) -> Result<(), Error> {
    let cfg = effective_config(common, None, None)?;
    let out = prepare_out(&cfg)?;
    let sets = build_sets(&cfg)?;
    let t = &sets.tube;
    let tightened = TightenedBounds {
        input: (0..2).map(|i| symmetric(t.input_upper(i), t.input_lower(i))).fold(f64::INFINITY, f64::min),
        velocity: [1, 3].iter().map(|&i| symmetric(t.state_upper(i), t.state_lower(i))).fold(f64::INFINITY, f64::min),
        lane: [t.state_lower(2).unwrap_or(f64::NEG_INFINITY), t.state_upper(2).unwrap_or(f64::INFINITY)],
    };
    println!(
        "tightened: |a| <= {:.4}, |v| <= {:.4}, p_y in [{:.4}, {:.4}]; Z has {} generators, alpha {:.2e}, s {}",
        tightened.input,
        tightened.velocity,
        tightened.lane[0],
        tightened.lane[1],
        t.z.n_generators(),
        t.alpha,
        t.s
    );
    write_json(&out.join("sets.json"), &SetsReport { tightened, artifacts: &sets })?;
    write_json(&out.join("tube.json"), &sets.tube)?;
    write_json(&out.join("covariance.json"), &sets.coarse_schedule)?;
    Ok(())
}

const AGGREGATE_HEADER: &str = "method,n_runs,pass_rate,collision_rate,reach_rate,mean_cumulative_cost,mean_solve_ms,median_solve_ms,softened_steps,constraint_violations,max_px";

fn write_aggregate_csv(path: &Path, summaries: &[MonteCarloSummary]) -> Result<(), Error> {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for m in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.method,
            m.n_runs,
            m.pass_rate,
            m.collision_rate,
            m.reach_rate,
            m.mean_cumulative_cost,
            m.mean_solve_ms,
            m.median_solve_ms,
            m.softened_steps,
            m.constraint_violations,
            m.max_px
        );
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_trajectories(dir: &Path, runs: &[RunRecord]) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    for r in runs {
        r.write_jsonl(&dir.join(format!("{}_{}.jsonl", r.method, r.seed)))?;
    }
    Ok(())
}

fn batch(cfg: &ScenarioConfig, method: MethodKind) -> Result<(Vec<RunRecord>, MonteCarloSummary), Error> {
    let runs = monte_carlo_runs(cfg, method, cfg.run.runs, cfg.run.seed, cfg.run.jobs)?;
    let summary = summarize(method, cfg.run.seed, &runs)?;
    Ok((runs, summary))
}

fn print_summary(s: &MonteCarloSummary) {
    println!(
        "{}: runs {}, pass_rate {:.3}, collision_rate {:.3}, reach_rate {:.3}, mean cost {:.2}, mean solve {:.3} ms, softened steps {}",
        s.method, s.n_runs, s.pass_rate, s.collision_rate, s.reach_rate, s.mean_cumulative_cost, s.mean_solve_ms, s.softened_steps
    );
}

fn cmd_run(args: &Batch) -> Result<(), Error> {
    // A plain `run` is a single episode unless --runs says otherwise.
    let cfg = effective_config(&args.common, args.method.as_deref(), Some(args.runs.unwrap_or(1)))?;
    let out = prepare_out(&cfg)?;
    let (runs, _) = batch(&cfg, cfg.run.method)?;
    write_trajectories(&out, &runs)?;
    write_summary_csv(&out.join("summary.csv"), &runs)?;
    for r in &runs {
        println!(
            "{} seed {}: {:?} after {} steps, passed {}, collided {}, reached {}, cost {:.2}, max p_x {:.2}",
            r.method, r.seed, r.termination, r.n_steps, r.passed, r.collided, r.reached, r.cumulative_cost, r.max_px
        );
    }
    Ok(())
}

fn cmd_montecarlo(args: &Batch) -> Result<(), Error> {
    let cfg = effective_config(&args.common, args.method.as_deref(), args.runs)?;
    let out = prepare_out(&cfg)?;
    let (runs, summary) = batch(&cfg, cfg.run.method)?;
    write_trajectories(&out.join("runs"), &runs)?;
    write_summary_csv(&out.join("summary.csv"), &runs)?;
    write_aggregate_csv(&out.join("aggregate.csv"), std::slice::from_ref(&summary))?;
    write_json(&out.join("summary.json"), &summary)?;
    print_summary(&summary);
    Ok(())
}

fn write_curves(path: &Path, summaries: &[MonteCarloSummary]) -> Result<(), Error> {
    let len = summaries.iter().map(|s| s.mean_cost_curve.len()).max().unwrap_or(0);
    let mut s = String::from("k");
    for m in summaries {
        let _ = write!(s, ",cost_{0},solve_ms_{0}", m.method);
    }
    s.push('\n');
    for k in 0..len {
        let _ = write!(s, "{k}");
        for m in summaries {
            let pick = |c: &[f64]| c.get(k).or(c.last()).copied().unwrap_or(0.0);
            let _ = write!(s, ",{},{}", pick(&m.mean_cost_curve), pick(&m.solve_time_curve));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), Error> {
    let cfg = effective_config(&args.common, None, args.runs)?;
    let out = prepare_out(&cfg)?;
    let mut summaries = Vec::new();
    for method in MethodKind::ALL {
        let (runs, summary) = batch(&cfg, method)?;
        write_summary_csv(&out.join(format!("summary_{method}.csv")), &runs)?;
        print_summary(&summary);
        summaries.push(summary);
    }
    write_aggregate_csv(&out.join("aggregate.csv"), &summaries)?;
    write_curves(&out.join("curves.csv"), &summaries)?;
    let report = compare_summaries(cfg.run.runs, cfg.run.seed, summaries);
    if let (Some(t), Some(c)) = (report.time_ratio, report.cost_ratio) {
        println!("granular / single-rsmpc: solve time ratio {t:.3}, cost ratio {c:.4}");
    }
    write_json(&out.join("comparison.json"), &report)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildSets(c) => cmd_build_sets(c),
        Command::Run(b) => cmd_run(b),
        Command::Montecarlo(b) => cmd_montecarlo(b),
        Command::Compare(c) => cmd_compare(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("granmpc: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
