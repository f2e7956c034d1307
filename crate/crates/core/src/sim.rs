//! Closed-loop simulation, Monte Carlo batches and method comparison.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{assemble, extract_control, solve_sqp, Controller, MethodKind, OcpSolution, SolveStatus, SqpIterate};
use crate::scenario::{
    build_controller_with_tube, collision_and_pass_check, predict_obstacle, NoiseKind, ScenarioConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub disturbance: Vec<f64>,
    pub obstacle: [f64; 2],
    pub stage_cost: f64,
    pub status: SolveStatus,
    pub sqp_iterations: usize,
    pub softened: bool,
    /// Wall time; excluded from serialization so records stay reproducible.
    #[serde(skip)]
    pub solve_ms: f64,
    /// SQP iterates, filled when the solver trace is enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<SqpIterate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Reached,
    Collided,
    MaxSteps,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: MethodKind,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub final_obstacle: [f64; 2],
    pub collided: bool,
    pub passed: bool,
    pub reached: bool,
    pub n_steps: usize,
    pub termination: Termination,
    pub cumulative_cost: f64,
    pub max_px: f64,
    pub softened_steps: usize,
    /// Realized states outside the original lane or velocity bounds.
    pub constraint_violations: usize,
}

impl RunRecord {
    pub fn mean_solve_ms(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.steps.iter().map(|s| s.solve_ms).sum::<f64>() / self.steps.len() as f64
        }
    }

    /// Serialized form without wall times.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            writeln!(f, "{}", serde_json::to_string(s)?)?;
        }
        let mut tail = self.clone();
        tail.steps.clear();
        writeln!(f, "{}", serde_json::to_string(&tail)?)?;
        f.flush()?;
        Ok(())
    }
}

fn sample_bounded(rng: &mut ChaCha8Rng, bound: f64, kind: NoiseKind) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    match kind {
        NoiseKind::Uniform => rng.random_range(-bound..=bound),
        NoiseKind::TruncatedGaussian => {
            let n = Normal::new(0.0, bound / 2.0).expect("positive deviation");
            loop {
                let v: f64 = n.sample(rng);
                if v.abs() <= bound {
                    return v;
                }
            }
        }
    }
}

/// Independent generator streams for the plant and the obstacle.
pub fn rng_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut plant = ChaCha8Rng::seed_from_u64(seed);
    plant.set_stream(0);
    let mut obstacle = ChaCha8Rng::seed_from_u64(seed);
    obstacle.set_stream(1);
    (plant, obstacle)
}

pub fn run_closed_loop(cfg: &ScenarioConfig, method: MethodKind, seed: u64) -> Result<RunRecord> {
    let ctrl = build_controller_with_tube(cfg, method, cfg.build_tube()?)?;
    run_with_controller(cfg, &ctrl, seed)
}

pub fn run_with_controller(cfg: &ScenarioConfig, ctrl: &Arc<Controller>, seed: u64) -> Result<RunRecord> {
    let model = &ctrl.model;
    let k_gain = ctrl.robust.tube.k.clone();
    let weights = &ctrl.weights;
    let dt = cfg.scenario.dt;
    let horizon = ctrl.horizon();
    let half = cfg.disturbance_half_widths();
    let (mut rng_plant, mut rng_obs) = rng_streams(seed);
    let mut x = cfg.start_state();
    let mut obs = cfg.initial_obstacle();
    let mut prev: Option<OcpSolution> = None;
    let mut steps = Vec::new();
    let mut robot_hist = vec![[x[0], x[2]]];
    let mut obs_hist = vec![obs.position];
    let lane = cfg.constraints.lane;
    let vmax = cfg.constraints.velocity_max;
    let violates = |x: &DVector<f64>| x[2] < lane[0] || x[2] > lane[1] || x[1].abs() > vmax || x[3].abs() > vmax;
    let mut violations = usize::from(violates(&x));
    let mut termination = Termination::MaxSteps;

    for k in 0..cfg.scenario.max_steps {
        let pred = cfg.obstacle.enabled.then(|| predict_obstacle(&obs, horizon, dt));
        let problem = assemble(ctrl, &x, pred, prev.as_ref())?;
        let sol = solve_sqp(&problem, &ctrl.settings)?;
        if sol.status == SolveStatus::Infeasible {
            termination = Termination::Infeasible;
            break;
        }
        let u = extract_control(&sol, &x, &k_gain)?;
        let d = DVector::from_iterator(4, half.iter().map(|b| sample_bounded(&mut rng_plant, *b, NoiseKind::Uniform)));
        let dob = [
            sample_bounded(&mut rng_obs, cfg.obstacle.disturbance, cfg.obstacle.noise),
            sample_bounded(&mut rng_obs, cfg.obstacle.disturbance, cfg.obstacle.noise),
        ];
        steps.push(StepRecord {
            k,
            state: x.as_slice().to_vec(),
            input: u.as_slice().to_vec(),
            disturbance: d.as_slice().to_vec(),
            obstacle: obs.position,
            stage_cost: weights.stage_cost(&x, &u),
            status: sol.status,
            sqp_iterations: sol.iterations,
            softened: sol.softened,
            solve_ms: sol.solve_time_ms,
            trace: sol.trace.clone(),
        });
        x = model.step(&x, &u, &d)?;
        if cfg.obstacle.enabled {
            obs.step(dt, dob);
        }
        violations += usize::from(violates(&x));
        robot_hist.push([x[0], x[2]]);
        obs_hist.push(obs.position);
        prev = Some(sol);
        let o = collision_and_pass_check(&robot_hist[robot_hist.len() - 1..], &obs_hist[obs_hist.len() - 1..], cfg)?;
        if o.collided {
            termination = Termination::Collided;
            break;
        }
        if o.reached {
            termination = Termination::Reached;
            break;
        }
    }
    let outcome = collision_and_pass_check(&robot_hist, &obs_hist, cfg)?;
    let cumulative_cost = steps.iter().map(|s| s.stage_cost).sum();
    Ok(RunRecord {
        method: ctrl.method,
        seed,
        n_steps: steps.len(),
        softened_steps: steps.iter().filter(|s| s.softened).count(),
        max_px: robot_hist.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
        steps,
        final_state: x.as_slice().to_vec(),
        final_obstacle: obs.position,
        collided: outcome.collided,
        passed: outcome.passed,
        reached: outcome.reached,
        termination,
        cumulative_cost,
        constraint_violations: violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub method: MethodKind,
    pub n_runs: usize,
    pub base_seed: u64,
    pub pass_rate: f64,
    pub collision_rate: f64,
    pub reach_rate: f64,
    pub infeasible_runs: usize,
    pub softened_steps: usize,
    pub constraint_violations: usize,
    pub max_px: f64,
    pub mean_cumulative_cost: f64,
    pub mean_cost_curve: Vec<f64>,
    pub mean_solve_ms: f64,
    pub median_solve_ms: f64,
    pub solve_time_curve: Vec<f64>,
}

fn padded_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            let s: f64 = rows.iter().map(|r| r.get(k).or(r.last()).copied().unwrap_or(0.0)).sum();
            s / rows.len() as f64
        })
        .collect()
}

pub fn summarize(method: MethodKind, base_seed: u64, runs: &[RunRecord]) -> Result<MonteCarloSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to summarize".into()));
    }
    let n = runs.len() as f64;
    let rate = |f: &dyn Fn(&RunRecord) -> bool| runs.iter().filter(|r| f(r)).count() as f64 / n;
    let mut per_step: Vec<f64> = runs.iter().flat_map(|r| r.steps.iter().map(|s| s.solve_ms)).collect();
    per_step.sort_by(f64::total_cmp);
    let median = if per_step.is_empty() {
        0.0
    } else if per_step.len() % 2 == 1 {
        per_step[per_step.len() / 2]
    } else {
        0.5 * (per_step[per_step.len() / 2 - 1] + per_step[per_step.len() / 2])
    };
    let mean_solve = if per_step.is_empty() { 0.0 } else { per_step.iter().sum::<f64>() / per_step.len() as f64 };
    let costs: Vec<Vec<f64>> = runs.iter().map(|r| r.steps.iter().map(|s| s.stage_cost).collect()).collect();
    let times: Vec<Vec<f64>> = runs.iter().map(|r| r.steps.iter().map(|s| s.solve_ms).collect()).collect();
    Ok(MonteCarloSummary {
        method,
        n_runs: runs.len(),
        base_seed,
        pass_rate: rate(&|r| r.passed && !r.collided),
        collision_rate: rate(&|r| r.collided),
        reach_rate: rate(&|r| r.reached),
        infeasible_runs: runs.iter().filter(|r| r.termination == Termination::Infeasible).count(),
        softened_steps: runs.iter().map(|r| r.softened_steps).sum(),
        constraint_violations: runs.iter().map(|r| r.constraint_violations).sum(),
        max_px: runs.iter().map(|r| r.max_px).fold(f64::NEG_INFINITY, f64::max),
        mean_cumulative_cost: runs.iter().map(|r| r.cumulative_cost).sum::<f64>() / n,
        mean_cost_curve: padded_mean(&costs),
        mean_solve_ms: mean_solve,
        median_solve_ms: median,
        solve_time_curve: padded_mean(&times),
    })
}

/// Placeholder for an episode whose solver returned an error.
pub fn failed_record(cfg: &ScenarioConfig, method: MethodKind, seed: u64) -> RunRecord {
    RunRecord {
        method,
        seed,
        steps: Vec::new(),
        final_state: cfg.start_state().as_slice().to_vec(),
        final_obstacle: cfg.obstacle.start,
        collided: false,
        passed: false,
        reached: false,
        n_steps: 0,
        termination: Termination::Infeasible,
        cumulative_cost: 0.0,
        max_px: cfg.scenario.start[0],
        softened_steps: 0,
        constraint_violations: 0,
    }
}

/// Runs seeds `base_seed..base_seed + n_runs` on up to `jobs` threads.
/// A run that errors is replaced by an empty record marked infeasible.
pub fn monte_carlo_runs(
    cfg: &ScenarioConfig,
    method: MethodKind,
    n_runs: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let ctrl = build_controller_with_tube(cfg, method, cfg.build_tube()?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| base_seed + i).collect();
    let results: Vec<Result<RunRecord>> =
        pool.install(|| seeds.par_iter().map(|s| run_with_controller(cfg, &ctrl, *s)).collect());
    Ok(results.into_iter().zip(seeds).map(|(r, seed)| r.unwrap_or_else(|_| failed_record(cfg, method, seed))).collect())
}

pub fn monte_carlo(
    cfg: &ScenarioConfig,
    method: MethodKind,
    n_runs: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<MonteCarloSummary> {
    summarize(method, base_seed, &monte_carlo_runs(cfg, method, n_runs, base_seed, jobs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_runs: usize,
    pub base_seed: u64,
    pub summaries: Vec<MonteCarloSummary>,
    /// Mean solve time of the granular method over the single-model R+SMPC.
    pub time_ratio: Option<f64>,
    /// Mean cumulative cost of the granular method over the single-model R+SMPC.
    pub cost_ratio: Option<f64>,
}

pub fn ratios(a: &MonteCarloSummary, b: &MonteCarloSummary) -> (f64, f64) {
    (a.mean_solve_ms / b.mean_solve_ms, a.mean_cumulative_cost / b.mean_cumulative_cost)
}

pub fn compare_summaries(n_runs: usize, base_seed: u64, summaries: Vec<MonteCarloSummary>) -> ComparisonReport {
    let find = |m: MethodKind| summaries.iter().find(|s| s.method == m);
    let (time_ratio, cost_ratio) = match (find(MethodKind::Granular), find(MethodKind::SingleRsmpc)) {
        (Some(g), Some(s)) => {
            let (t, c) = ratios(g, s);
            (Some(t), Some(c))
        }
        _ => (None, None),
    };
    ComparisonReport { n_runs, base_seed, summaries, time_ratio, cost_ratio }
}

/// All three methods on the same seeds.
pub fn compare_methods(cfg: &ScenarioConfig, n_runs: usize, base_seed: u64, jobs: usize) -> Result<ComparisonReport> {
    let mut summaries = Vec::new();
    for m in MethodKind::ALL {
        summaries.push(monte_carlo(cfg, m, n_runs, base_seed, jobs)?);
    }
    Ok(compare_summaries(n_runs, base_seed, summaries))
}

pub const SUMMARY_CSV_HEADER: &str =
    "method,run_id,passed,collided,reached,steps,cumulative_cost,mean_solve_ms,softened_steps";

pub fn write_summary_csv(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SUMMARY_CSV_HEADER}")?;
    for r in runs {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.seed,
            r.passed,
            r.collided,
            r.reached,
            r.n_steps,
            r.cumulative_cost,
            r.mean_solve_ms(),
            r.softened_steps
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
