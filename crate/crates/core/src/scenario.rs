//! The mobile-robot world: configuration, obstacles, constraint builders and
//! per-method controller construction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chance::{propagate_covariance, ChanceConstraint, CovarianceSchedule};
use crate::error::{Error, Result};
use crate::ocp::{
    BoxEdge, Controller, CostWeights, LongModel, LongStage, MethodKind, RobustStage, SqpSettings, TerminalCost,
};
use crate::setops::{HPolytope, Zonotope};
use crate::sysmodel::{double_integrator, single_integrator, GainPair, LinearModel, ProjectionMap};
use crate::tube::{build_tube, planar_radius, TubeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: WorldConfig,
    pub constraints: ConstraintConfig,
    pub obstacle: ObstacleConfig,
    pub static_box: BoxConfig,
    pub disturbance: DisturbanceConfig,
    pub costs: CostConfig,
    pub gains: GainConfig,
    pub chance: ChanceConfig,
    pub horizons: HorizonConfig,
    pub tube: TubeConfig,
    pub solver: SqpSettings,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub dt: f64,
    pub start: [f64; 2],
    pub target: [f64; 2],
    pub robot_radius: f64,
    pub max_steps: usize,
    pub finish_threshold: f64,
    pub pass_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub lane: [f64; 2],
    pub input_max: f64,
    pub velocity_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Uniform,
    TruncatedGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustSource {
    /// Robust ellipse and box taken from the configured constants.
    Constant,
    /// Nominal geometry enlarged by the extent of the computed tube.
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub enabled: bool,
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub disturbance: f64,
    pub noise: NoiseKind,
    pub ellipse: [f64; 2],
    pub robust_ellipse: [f64; 2],
    pub robust_source: RobustSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub enabled: bool,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub robust_x: [f64; 2],
    pub robust_y: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceVariant {
    /// `‖d‖∞ ≤ bound` on all four states.
    Full,
    /// Only the velocity states are disturbed.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub bound: f64,
    pub variant: DisturbanceVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: [f64; 4],
    pub r: [f64; 2],
    pub qc: [f64; 2],
    pub rc: [f64; 2],
    pub terminal_cost: TerminalCost,
}

/// Gain magnitudes; the stored gains are their negatives so that `A + BK`
/// is the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    pub k: [f64; 2],
    pub kc: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConfig {
    pub p: f64,
    pub sigma_w: [f64; 2],
    /// Standard deviation of the Gaussian stand-in for the bounded
    /// disturbance on the single-model long stage.
    pub single_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub ns: usize,
    pub nl: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeConfig {
    pub eps: f64,
    /// Cap on the generators of the initial-state tube set, after merging.
    pub init_generators: usize,
    /// Direction tolerance for merging nearly parallel generators of Z.
    pub merge_tol: f64,
}

/// Batch settings used by the command-line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodKind,
    /// Episodes per Monte Carlo batch.
    pub runs: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: WorldConfig {
                dt: 0.2,
                start: [0.0, 0.0],
                target: [19.0, 0.0],
                robot_radius: 0.5,
                max_steps: 100,
                finish_threshold: 0.5,
                pass_margin: 1.0,
            },
            constraints: ConstraintConfig { lane: [-0.5, 2.5], input_max: 3.0, velocity_max: 3.0 },
            obstacle: ObstacleConfig {
                enabled: true,
                start: [6.0, 0.0],
                velocity: [0.6, 0.0],
                radius: 0.5,
                disturbance: 0.1,
                noise: NoiseKind::Uniform,
                ellipse: [1.0, 1.0],
                robust_ellipse: [2.1, 2.1],
                robust_source: RobustSource::Constant,
            },
            static_box: BoxConfig {
                enabled: true,
                x: [11.0, 15.0],
                y: [2.0, 3.0],
                robust_x: [10.2, 15.8],
                robust_y: [1.2, 3.8],
            },
            disturbance: DisturbanceConfig { bound: 0.1, variant: DisturbanceVariant::Velocity },
            costs: CostConfig {
                q: [1.0, 0.1, 1.0, 0.1],
                r: [0.1, 0.1],
                qc: [1.0, 1.0],
                rc: [0.1, 0.1],
                terminal_cost: TerminalCost::Target,
            },
            gains: GainConfig { k: [3.77, 4.67], kc: [2.32, 4.14] },
            chance: ChanceConfig { p: 0.8, sigma_w: [0.1, 0.1], single_sigma: 0.1 },
            horizons: HorizonConfig { ns: 7, nl: 13 },
            tube: TubeConfig { eps: 1e-3, init_generators: 64, merge_tol: 1e-6 },
            solver: SqpSettings::default(),
            run: RunConfig { method: MethodKind::Granular, runs: 100, seed: 1, jobs: 1, out: "out".into() },
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Overlay `top` onto `base` key by key; tables merge, values replace.
fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ScenarioConfig {
    /// Parse a config file. Keys it leaves out keep their default values.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg_err = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(&Self::default().to_toml_string()?).map_err(cfg_err)?;
        merge_tables(&mut table, toml::from_str(s).map_err(cfg_err)?);
        let cfg: Self = table.try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Apply `section.key=value` overrides. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml_string()?).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) =
                o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut table;
            for (i, part) in path.iter().enumerate() {
                let last = i + 1 == path.len();
                let entry =
                    cur.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key '{}'", key.trim())))?;
                if last {
                    if entry.is_table() {
                        return Err(Error::Config(format!("'{}' is a section, not a value", key.trim())));
                    }
                    *entry = parse_value(raw.trim());
                    break;
                }
                cur = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("unknown config key '{}'", key.trim())))?;
            }
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let w = &self.scenario;
        if !(w.dt > 0.0) {
            return bad("scenario.dt must be positive");
        }
        if !(w.robot_radius > 0.0) || !(self.obstacle.radius > 0.0) {
            return bad("radii must be positive");
        }
        if w.max_steps == 0 {
            return bad("scenario.max_steps must be at least 1");
        }
        if !(w.finish_threshold > 0.0) || !(w.pass_margin >= 0.0) {
            return bad("finish_threshold must be positive and pass_margin nonnegative");
        }
        let c = &self.constraints;
        if !(c.lane[0] < c.lane[1]) {
            return bad("constraints.lane must be increasing");
        }
        if !(c.input_max > 0.0) || !(c.velocity_max > 0.0) {
            return bad("input and velocity bounds must be positive");
        }
        let o = &self.obstacle;
        if o.ellipse.iter().chain(o.robust_ellipse.iter()).any(|v| !(*v > 0.0)) {
            return bad("ellipse semi-axes must be positive");
        }
        if !(o.disturbance >= 0.0) {
            return bad("obstacle.disturbance must be nonnegative");
        }
        let b = &self.static_box;
        if !(b.x[0] < b.x[1] && b.y[0] < b.y[1] && b.robust_x[0] < b.robust_x[1] && b.robust_y[0] < b.robust_y[1]) {
            return bad("box extents must be increasing");
        }
        if !(self.disturbance.bound >= 0.0) {
            return bad("disturbance.bound must be nonnegative");
        }
        let k = &self.costs;
        if k.q.iter().chain(k.qc.iter()).any(|v| !(*v >= 0.0)) {
            return bad("state weights must be nonnegative");
        }
        if k.r.iter().chain(k.rc.iter()).any(|v| !(*v > 0.0)) {
            return bad("input weights must be positive");
        }
        if self.gains.k.iter().chain(self.gains.kc.iter()).any(|v| !v.is_finite()) {
            return bad("gains must be finite");
        }
        let ch = &self.chance;
        if !(ch.p >= 0.5 && ch.p < 1.0) {
            return bad("chance.p must lie in [0.5, 1)");
        }
        if ch.sigma_w.iter().any(|v| !(*v >= 0.0)) || !(ch.single_sigma >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if self.horizons.ns == 0 {
            return bad("horizons.ns must be at least 1");
        }
        if !(self.tube.eps > 0.0) {
            return bad("tube.eps must be positive");
        }
        if !(self.tube.merge_tol >= 0.0 && self.tube.merge_tol < 1.0) {
            return bad("tube.merge_tol must lie in [0, 1)");
        }
        if self.run.runs == 0 || self.run.jobs == 0 {
            return bad("run.runs and run.jobs must be at least 1");
        }
        self.solver.validate()
    }

    pub fn horizon(&self) -> usize {
        self.horizons.ns + self.horizons.nl
    }

    pub fn start_state(&self) -> DVector<f64> {
        let s = self.scenario.start;
        DVector::from_column_slice(&[s[0], 0.0, s[1], 0.0])
    }

    pub fn target_state(&self) -> DVector<f64> {
        let t = self.scenario.target;
        DVector::from_column_slice(&[t[0], 0.0, t[1], 0.0])
    }

    /// Per-axis bounds of the plant disturbance in state coordinates.
    pub fn disturbance_half_widths(&self) -> [f64; 4] {
        let b = self.disturbance.bound;
        match self.disturbance.variant {
            DisturbanceVariant::Full => [b; 4],
            DisturbanceVariant::Velocity => [0.0, b, 0.0, b],
        }
    }

    pub fn detailed_model(&self) -> Result<LinearModel> {
        let h = self.disturbance_half_widths();
        let lo: Vec<f64> = h.iter().map(|v| -v).collect();
        double_integrator(self.scenario.dt, Zonotope::from_bounds(&lo, &h)?)
    }

    pub fn coarse_model(&self) -> Result<LinearModel> {
        let s = self.chance.sigma_w;
        single_integrator(self.scenario.dt, DMatrix::from_diagonal(&DVector::from_column_slice(&s)))
    }

    pub fn gain_k(&self) -> DMatrix<f64> {
        let [kp, kv] = self.gains.k;
        DMatrix::from_row_slice(2, 4, &[-kp, -kv, 0.0, 0.0, 0.0, 0.0, -kp, -kv])
    }

    pub fn gain_kc(&self) -> DMatrix<f64> {
        let [kx, ky] = self.gains.kc;
        DMatrix::from_row_slice(2, 2, &[-kx, 0.0, 0.0, -ky])
    }

    pub fn gains(&self) -> Result<GainPair> {
        GainPair::new(&self.detailed_model()?, self.gain_k(), &self.coarse_model()?, self.gain_kc())
    }

    pub fn state_set(&self) -> Result<HPolytope> {
        let c = &self.constraints;
        let inf = f64::INFINITY;
        HPolytope::from_bounds(
            &[-inf, -c.velocity_max, c.lane[0], -c.velocity_max],
            &[inf, c.velocity_max, c.lane[1], c.velocity_max],
        )
    }

    pub fn input_set(&self) -> Result<HPolytope> {
        let a = self.constraints.input_max;
        HPolytope::from_bounds(&[-a, -a], &[a, a])
    }

    pub fn build_tube(&self) -> Result<TubeSpec> {
        build_tube(&self.detailed_model()?, &self.gain_k(), self.tube.eps, &self.state_set()?, &self.input_set()?)
    }

    pub fn coarse_schedule(&self) -> Result<CovarianceSchedule> {
        let coarse = self.coarse_model()?;
        let g = self.gains()?;
        let sw = match &coarse.disturbance {
            crate::sysmodel::Disturbance::Gaussian(s) => s.clone(),
            crate::sysmodel::Disturbance::BoundedBox(_) => unreachable!("coarse model is Gaussian"),
        };
        propagate_covariance(&g.phi_c, &coarse.g, &sw, &DMatrix::zeros(2, 2), self.horizon())
    }

    /// Covariance of the detailed model's error under the Gaussian stand-in
    /// for the bounded disturbance.
    pub fn detailed_schedule(&self, phi: &DMatrix<f64>) -> Result<CovarianceSchedule> {
        let h = self.disturbance_half_widths();
        let s2 = self.chance.single_sigma * self.chance.single_sigma;
        let diag = DVector::from_iterator(4, h.iter().map(|v| if *v > 0.0 { s2 } else { 0.0 }));
        propagate_covariance(
            phi,
            &DMatrix::identity(4, 4),
            &DMatrix::from_diagonal(&diag),
            &DMatrix::zeros(4, 4),
            self.horizon(),
        )
    }

    pub fn robust_geometry(&self, tube: &TubeSpec) -> Result<RobustGeometry> {
        let derived = derive_robust_geometry(self, tube)?;
        Ok(match self.obstacle.robust_source {
            RobustSource::Constant => RobustGeometry {
                ellipse: self.obstacle.robust_ellipse,
                box_edge: BoxEdge {
                    x_min: self.static_box.robust_x[0],
                    x_max: self.static_box.robust_x[1],
                    edge: self.static_box.robust_y[0],
                },
            },
            RobustSource::Derived => derived,
        })
    }

    pub fn chance_box(&self) -> BoxEdge {
        let r = self.scenario.robot_radius;
        BoxEdge { x_min: self.static_box.x[0] - r, x_max: self.static_box.x[1] + r, edge: self.static_box.y[0] - r }
    }

    pub fn cost_weights(&self) -> CostWeights {
        let d = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        CostWeights {
            q: d(&self.costs.q),
            r: d(&self.costs.r),
            qc: d(&self.costs.qc),
            rc: d(&self.costs.rc),
            target_state: self.target_state(),
            target_position: DVector::from_column_slice(&self.scenario.target),
            terminal: self.costs.terminal_cost,
        }
    }

    pub fn initial_obstacle(&self) -> DynamicObstacle {
        DynamicObstacle {
            position: self.obstacle.start,
            velocity: self.obstacle.velocity,
            radius: self.obstacle.radius,
            disturbance: self.obstacle.disturbance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustGeometry {
    pub ellipse: [f64; 2],
    pub box_edge: BoxEdge,
}

/// Robust obstacle geometry from the tube: the nominal ellipse grown by the
/// planar radius of Z, the box grown by the robot radius plus the tube's
/// extent along each axis.
pub fn derive_robust_geometry(cfg: &ScenarioConfig, tube: &TubeSpec) -> Result<RobustGeometry> {
    use crate::setops::Support;
    let r = planar_radius(&tube.z, [0, 2])?;
    let e = cfg.obstacle.ellipse;
    let unit = |i: usize, s: f64| {
        let mut v = DVector::zeros(4);
        v[i] = s;
        v
    };
    let ex = tube.z.support(&unit(0, 1.0))?.max(tube.z.support(&unit(0, -1.0))?);
    let ey = tube.z.support(&unit(2, 1.0))?.max(tube.z.support(&unit(2, -1.0))?);
    let m = cfg.scenario.robot_radius;
    let b = &cfg.static_box;
    Ok(RobustGeometry {
        ellipse: [e[0] + r, e[1] + r],
        box_edge: BoxEdge { x_min: b.x[0] - m - ex, x_max: b.x[1] + m + ex, edge: b.y[0] - m - ey },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacle {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub disturbance: f64,
}

impl DynamicObstacle {
    pub fn new(position: [f64; 2], velocity: [f64; 2], radius: f64, disturbance: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument("obstacle radius must be positive".into()));
        }
        Ok(Self { position, velocity, radius, disturbance })
    }

    /// True motion over one step with velocity disturbance `d`.
    pub fn step(&mut self, dt: f64, d: [f64; 2]) {
        self.position[0] += dt * (self.velocity[0] + d[0]);
        self.position[1] += dt * (self.velocity[1] + d[1]);
    }
}

/// Constant-velocity extrapolation from the current position, `horizon + 1`
/// entries starting with the current one.
pub fn predict_obstacle(obs: &DynamicObstacle, horizon: usize, dt: f64) -> Vec<[f64; 2]> {
    (0..=horizon)
        .map(|k| {
            let t = k as f64 * dt;
            [obs.position[0] + t * obs.velocity[0], obs.position[1] + t * obs.velocity[1]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RobustConstraint {
    /// `((p_x − c_x)/a)² + ((p_y − c_y)/b)² − 1 ≥ 0` on the nominal position.
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
    },
    /// `p_y ≤ edge` while `x_min ≤ p_x ≤ x_max`.
    BoxEdge(BoxEdge),
    TightenedState(HPolytope),
    TightenedInput(HPolytope),
}

impl RobustConstraint {
    /// Residual at a nominal position; nonnegative means satisfied. Only
    /// meaningful for the obstacle constraints.
    pub fn residual(&self, p: [f64; 2]) -> Option<f64> {
        match self {
            RobustConstraint::Ellipse { center, semi_axes } => {
                let dx = (p[0] - center[0]) / semi_axes[0];
                let dy = (p[1] - center[1]) / semi_axes[1];
                Some(dx * dx + dy * dy - 1.0)
            }
            RobustConstraint::BoxEdge(b) => {
                if p[0] >= b.x_min && p[0] <= b.x_max {
                    Some(b.edge - p[1])
                } else {
                    Some(f64::INFINITY)
                }
            }
            _ => None,
        }
    }
}

pub fn build_rmpc_constraints(
    cfg: &ScenarioConfig,
    tube: &TubeSpec,
    k: usize,
    obstacle: [f64; 2],
) -> Result<Vec<RobustConstraint>> {
    if k > cfg.horizon() {
        return Err(Error::InvalidArgument(format!("step {k} beyond the horizon")));
    }
    let g = cfg.robust_geometry(tube)?;
    let mut out =
        vec![RobustConstraint::TightenedState(tube.xbar.clone()), RobustConstraint::TightenedInput(tube.ubar.clone())];
    if cfg.obstacle.enabled {
        out.push(RobustConstraint::Ellipse { center: obstacle, semi_axes: g.ellipse });
    }
    if cfg.static_box.enabled {
        out.push(RobustConstraint::BoxEdge(g.box_edge));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmpcConstraints {
    pub ellipse: Option<ChanceConstraint>,
    pub lane_upper: ChanceConstraint,
    pub lane_lower: ChanceConstraint,
    /// Lower-edge half-plane and the x-range where it applies.
    pub box_edge: Option<(ChanceConstraint, [f64; 2])>,
    pub sigma: DMatrix<f64>,
    pub v_max: f64,
    pub rate_max: f64,
}

pub fn build_smpc_constraints(
    cfg: &ScenarioConfig,
    k: usize,
    obstacle: [f64; 2],
    sigma: &DMatrix<f64>,
) -> Result<SmpcConstraints> {
    if k < cfg.horizons.ns || k > cfg.horizon() {
        return Err(Error::InvalidArgument(format!("step {k} outside the long stage")));
    }
    let p = cfg.chance.p;
    let lane = cfg.constraints.lane;
    let b = cfg.chance_box();
    Ok(SmpcConstraints {
        ellipse: cfg.obstacle.enabled.then(|| ChanceConstraint::ellipse(obstacle, cfg.obstacle.ellipse, p)),
        lane_upper: ChanceConstraint::half_plane([0.0, 1.0], lane[1], p),
        lane_lower: ChanceConstraint::half_plane([0.0, -1.0], -lane[0], p),
        box_edge: cfg
            .static_box
            .enabled
            .then(|| (ChanceConstraint::half_plane([0.0, 1.0], b.edge, p), [b.x_min, b.x_max])),
        sigma: sigma.clone(),
        v_max: cfg.constraints.velocity_max,
        rate_max: cfg.constraints.input_max * cfg.scenario.dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub collided: bool,
    pub passed: bool,
    pub reached: bool,
}

pub fn collision_and_pass_check(robot: &[[f64; 2]], obstacle: &[[f64; 2]], cfg: &ScenarioConfig) -> Result<Outcome> {
    if robot.len() != obstacle.len() {
        return Err(Error::DimensionMismatch {
            context: "collision_and_pass_check histories",
            expected: robot.len(),
            got: obstacle.len(),
        });
    }
    let clearance = cfg.scenario.robot_radius + cfg.obstacle.radius;
    let lane = cfg.constraints.lane;
    let mut out = Outcome { collided: false, passed: false, reached: false };
    for (r, o) in robot.iter().zip(obstacle) {
        let dist = (r[0] - o[0]).hypot(r[1] - o[1]);
        if (cfg.obstacle.enabled && dist < clearance) || r[1] < lane[0] || r[1] > lane[1] {
            out.collided = true;
        }
        if r[0] > o[0] + cfg.scenario.pass_margin {
            out.passed = true;
        }
    }
    if let Some(last) = robot.last() {
        let t = cfg.scenario.target;
        out.reached = (last[0] - t[0]).hypot(last[1] - t[1]) <= cfg.scenario.finish_threshold;
    }
    Ok(out)
}

/// Precomputed sets shared by every controller of a configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetArtifacts {
    pub tube: TubeSpec,
    pub coarse_schedule: CovarianceSchedule,
    pub robust: RobustGeometry,
    pub derived: RobustGeometry,
    pub tube_planar_radius: f64,
}

pub fn build_sets(cfg: &ScenarioConfig) -> Result<SetArtifacts> {
    let tube = cfg.build_tube()?;
    Ok(SetArtifacts {
        coarse_schedule: cfg.coarse_schedule()?,
        robust: cfg.robust_geometry(&tube)?,
        derived: derive_robust_geometry(cfg, &tube)?,
        tube_planar_radius: planar_radius(&tube.z, [0, 2])?,
        tube,
    })
}

pub fn build_controller(cfg: &ScenarioConfig, method: MethodKind) -> Result<Arc<Controller>> {
    cfg.validate()?;
    let tube = cfg.build_tube()?;
    build_controller_with_tube(cfg, method, tube)
}

pub fn build_controller_with_tube(cfg: &ScenarioConfig, method: MethodKind, tube: TubeSpec) -> Result<Arc<Controller>> {
    let geo = cfg.robust_geometry(&tube)?;
    let z_init = tube.z.merge_parallel(cfg.tube.merge_tol).largest_generators(cfg.tube.init_generators);
    let robust = RobustStage {
        ellipse: cfg.obstacle.enabled.then_some(geo.ellipse),
        static_box: cfg.static_box.enabled.then_some(geo.box_edge),
        z_init,
        tube: tube.clone(),
    };
    let (ns, nl) = match method {
        MethodKind::SingleRmpc => (cfg.horizon(), 0),
        _ => (cfg.horizons.ns, cfg.horizons.nl),
    };
    let chance_box = cfg.static_box.enabled.then(|| cfg.chance_box());
    let ellipse = cfg.obstacle.enabled.then_some(cfg.obstacle.ellipse);
    let long = match method {
        MethodKind::SingleRmpc => None,
        MethodKind::Granular => {
            let g = cfg.gains()?;
            let schedule = cfg.coarse_schedule()?;
            Some(LongStage {
                model: LongModel::Coarse {
                    model: cfg.coarse_model()?,
                    kc: g.kc.clone(),
                    phi_c: g.phi_c.clone(),
                    projection: ProjectionMap::robot(),
                    v_max: cfg.constraints.velocity_max,
                    rate_max: cfg.constraints.input_max * cfg.scenario.dt,
                },
                sigmas: schedule.sigmas,
                p: cfg.chance.p,
                ellipse,
                static_box: chance_box,
                lane: cfg.constraints.lane,
            })
        }
        MethodKind::SingleRsmpc => {
            let schedule = cfg.detailed_schedule(&tube.phi)?;
            Some(LongStage {
                model: LongModel::Detailed { u_max: cfg.constraints.input_max, v_max: cfg.constraints.velocity_max },
                sigmas: schedule.sigmas,
                p: cfg.chance.p,
                ellipse,
                static_box: chance_box,
                lane: cfg.constraints.lane,
            })
        }
    };
    let c =
        Controller::new(method, ns, nl, cfg.detailed_model()?, robust, long, cfg.cost_weights(), cfg.solver.clone())?;
    Ok(Arc::new(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chance::deterministic_residual;
    use approx::assert_abs_diff_eq;

    #[test]
    fn defaults_round_trip_byte_identical() {
        let cfg = ScenarioConfig::default();
        let s = cfg.to_toml_string().unwrap();
        let back = ScenarioConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string().unwrap(), s);
    }

    #[test]
    fn defaults_hold_scenario_constants() {
        let c = ScenarioConfig::default();
        assert_eq!(c.scenario.dt, 0.2);
        assert_eq!(c.scenario.target, [19.0, 0.0]);
        assert_eq!(c.constraints.lane, [-0.5, 2.5]);
        assert_eq!(c.obstacle.robust_ellipse, [2.1, 2.1]);
        assert_eq!(c.static_box.robust_y[0], 1.2);
        assert_eq!(c.chance.p, 0.8);
        assert_eq!((c.horizons.ns, c.horizons.nl), (7, 13));
        assert_eq!(c.gains.kc, [2.32, 4.14]);
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = ScenarioConfig::default();
        let o =
            c.with_overrides(&["chance.p=0.9", "disturbance.variant=full", "costs.terminal_cost=\"origin\""]).unwrap();
        assert_eq!(o.chance.p, 0.9);
        assert_eq!(o.disturbance.variant, DisturbanceVariant::Full);
        assert_eq!(o.costs.terminal_cost, TerminalCost::Origin);
        assert!(matches!(c.with_overrides(&["chance.q=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["nosuch.p=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["chance=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["chance.p=1.5"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["scenario.dt=-0.2"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["chance.p=abc"]), Err(Error::Config(_))));
    }

    #[test]
    fn run_section_validates() {
        let c = ScenarioConfig::default();
        let o = c.with_overrides(&["run.method=single-rmpc", "run.runs=5", "run.jobs=3"]).unwrap();
        assert_eq!(o.run.method, MethodKind::SingleRmpc);
        assert_eq!((o.run.runs, o.run.jobs), (5, 3));
        assert!(matches!(c.with_overrides(&["run.runs=0"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["run.jobs=0"]), Err(Error::Config(_))));
        assert!(c.with_overrides(&["run.method=fastest"]).is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = ScenarioConfig::from_toml_str("[chance]\np = 0.9\n\n[horizons]\nnl = 5\n").unwrap();
        assert_eq!(c.chance.p, 0.9);
        assert_eq!(c.chance.sigma_w, [0.1, 0.1]);
        assert_eq!((c.horizons.ns, c.horizons.nl), (7, 5));
        assert_eq!(c.scenario, ScenarioConfig::default().scenario);
        assert_eq!(ScenarioConfig::from_toml_str("").unwrap(), ScenarioConfig::default());
        assert!(matches!(ScenarioConfig::from_toml_str("[chance]\np = 2.0\n"), Err(Error::Config(_))));
        assert!(matches!(ScenarioConfig::from_toml_str("chance = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_in_files_are_rejected() {
        let mut s = ScenarioConfig::default().to_toml_string().unwrap();
        s = s.replace("[chance]\n", "[chance]\nextra = 1\n");
        assert!(ScenarioConfig::from_toml_str(&s).is_err());
    }

    #[test]
    fn predict_obstacle_examples() {
        let o = DynamicObstacle::new([6.0, 0.0], [0.6, 0.0], 0.5, 0.1).unwrap();
        let p = predict_obstacle(&o, 5, 0.2);
        assert_eq!(p.len(), 6);
        assert_abs_diff_eq!(p[5][0], 6.6, epsilon = 1e-12);
        assert_eq!(p[5][1], 0.0);
        assert_eq!(predict_obstacle(&o, 0, 0.2), vec![[6.0, 0.0]]);
        let still = DynamicObstacle::new([1.0, 2.0], [0.0, 0.0], 0.5, 0.1).unwrap();
        assert!(predict_obstacle(&still, 4, 0.2).iter().all(|q| *q == [1.0, 2.0]));
        assert!(DynamicObstacle::new([0.0, 0.0], [0.0, 0.0], 0.0, 0.1).is_err());
    }

    #[test]
    fn rmpc_constraint_examples() {
        let cfg = ScenarioConfig::default().with_overrides(&["disturbance.variant=velocity"]).unwrap();
        let tube = cfg.build_tube().unwrap();
        let cons = build_rmpc_constraints(&cfg, &tube, 3, [6.0, 0.0]).unwrap();
        let ell = cons.iter().find(|c| matches!(c, RobustConstraint::Ellipse { .. })).unwrap();
        assert_abs_diff_eq!(ell.residual([8.1, 0.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert!(ell.residual([30.0, 0.0]).unwrap() > 100.0);
        let bx = cons.iter().find(|c| matches!(c, RobustConstraint::BoxEdge(_))).unwrap();
        assert_abs_diff_eq!(bx.residual([12.0, 1.2]).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(bx.residual([9.0, 2.0]).unwrap(), f64::INFINITY);
        assert_eq!(cons, build_rmpc_constraints(&cfg, &tube, 3, [6.0, 0.0]).unwrap());
        assert!(build_rmpc_constraints(&cfg, &tube, 21, [6.0, 0.0]).is_err());
    }

    #[test]
    fn smpc_constraint_examples() {
        let cfg = ScenarioConfig::default();
        let sched = cfg.coarse_schedule().unwrap();
        let ns = cfg.horizons.ns;
        let s = build_smpc_constraints(&cfg, ns, [6.0, 0.0], sched.get(ns).unwrap()).unwrap();
        let ell = s.ellipse.unwrap();
        let z = [8.0, 0.0];
        let sig = sched.get(ns).unwrap();
        let expected = 3.0 - (2.0 * 16.0 * sig[(0, 0)]).sqrt() * crate::chance::erfinv(0.6).unwrap();
        assert_abs_diff_eq!(deterministic_residual(&ell, &z, sig).unwrap(), expected, epsilon = 1e-12);
        // p = 0.5 and Σ = 0 both reduce to the nominal constraint.
        let half = cfg.with_overrides(&["chance.p=0.5"]).unwrap();
        let s5 = build_smpc_constraints(&half, ns, [6.0, 0.0], sig).unwrap();
        assert_abs_diff_eq!(deterministic_residual(&s5.ellipse.unwrap(), &z, sig).unwrap(), 3.0, epsilon = 1e-12);
        let zero = DMatrix::zeros(2, 2);
        assert_abs_diff_eq!(deterministic_residual(&s.lane_upper, &[0.0, 0.0], &zero).unwrap(), 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(deterministic_residual(&s.lane_lower, &[0.0, 0.0], &zero).unwrap(), 0.5, epsilon = 1e-12);
        let (edge, range) = s.box_edge.unwrap();
        assert_abs_diff_eq!(deterministic_residual(&edge, &[12.0, 1.5], &zero).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(range, [10.5, 15.5]);
        assert_eq!(s.v_max, 3.0);
        assert_abs_diff_eq!(s.rate_max, 0.6, epsilon = 1e-12);
        assert!(build_smpc_constraints(&cfg, ns - 1, [6.0, 0.0], sig).is_err());
        assert_eq!(s, build_smpc_constraints(&cfg, ns, [6.0, 0.0], sig).unwrap());
    }

    #[test]
    fn collision_boundary_is_strict() {
        let cfg = ScenarioConfig::default();
        let o = collision_and_pass_check(&[[5.0, 0.0]], &[[6.0, 0.0]], &cfg).unwrap();
        assert!(!o.collided);
        let o = collision_and_pass_check(&[[5.01, 0.0]], &[[6.0, 0.0]], &cfg).unwrap();
        assert!(o.collided);
        let o = collision_and_pass_check(&[[0.0, 2.6]], &[[6.0, 0.0]], &cfg).unwrap();
        assert!(o.collided);
        let o = collision_and_pass_check(&[[19.0, 0.0]], &[[6.0, 0.0]], &cfg).unwrap();
        assert!(o.reached && o.passed && !o.collided);
        let o = collision_and_pass_check(&[[7.0, 2.0]], &[[6.0, 0.0]], &cfg).unwrap();
        assert!(!o.passed);
        assert!(collision_and_pass_check(&[[0.0, 0.0]], &[], &cfg).is_err());
    }

    #[test]
    fn derived_geometry_reports_tube_extent() {
        let cfg = ScenarioConfig::default();
        let sets = build_sets(&cfg).unwrap();
        assert_abs_diff_eq!(sets.derived.ellipse[0], 1.0 + sets.tube_planar_radius, epsilon = 1e-12);
        assert_eq!(sets.robust.ellipse, [2.1, 2.1]);
        assert!(sets.derived.box_edge.edge < 1.5);
    }
}
