//! Two-stage optimal control problem: a robust tube stage on the detailed
//! model followed by a chance-constrained stage, solved by SQP over dense QPs.
//!
//! Decision variables are lifted: besides the free inputs the layout keeps the
//! predicted states and ties them together with equality rows.

pub mod qp;
mod sqp;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::setops::{Support, Zonotope};
use crate::sysmodel::{LinearModel, ProjectionMap};
use crate::tube::TubeSpec;
use qp::{EqualityFactor, QpFactor, SparseRow};

pub use sqp::{linearize_box, linearize_ellipse, solve_sqp, BoxFace, SqpIterate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Granular,
    SingleRsmpc,
    SingleRmpc,
}

impl MethodKind {
    pub const ALL: [MethodKind; 3] = [MethodKind::Granular, MethodKind::SingleRsmpc, MethodKind::SingleRmpc];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Granular => "granular",
            MethodKind::SingleRsmpc => "single-rsmpc",
            MethodKind::SingleRmpc => "single-rmpc",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalCost {
    Target,
    Origin,
}

impl FromStr for TerminalCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TerminalCost::Target),
            "origin" => Ok(TerminalCost::Origin),
            _ => Err(Error::InvalidArgument(format!("unknown terminal cost '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub rc: DMatrix<f64>,
    pub target_state: DVector<f64>,
    pub target_position: DVector<f64>,
    pub terminal: TerminalCost,
}

impl CostWeights {
    /// `(x − x̃)ᵀQ(x − x̃) + uᵀRu`.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - &self.target_state;
        (e.transpose() * &self.q * &e)[0] + (u.transpose() * &self.r * u)[0]
    }

    fn terminal_target(&self) -> DVector<f64> {
        match self.terminal {
            TerminalCost::Target => self.target_position.clone(),
            TerminalCost::Origin => DVector::zeros(self.target_position.len()),
        }
    }
}

/// Lower edge of a rectangular obstacle that extends upward past the lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxEdge {
    pub x_min: f64,
    pub x_max: f64,
    pub edge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustStage {
    pub tube: TubeSpec,
    /// Set used for the free initial nominal state (inner approximation of Z).
    pub z_init: Zonotope,
    pub ellipse: Option<[f64; 2]>,
    pub static_box: Option<BoxEdge>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum LongModel {
    /// Position-only model driven by velocity commands `v = K_c z + c`.
    Coarse {
        model: LinearModel,
        kc: DMatrix<f64>,
        phi_c: DMatrix<f64>,
        projection: ProjectionMap,
        v_max: f64,
        rate_max: f64,
    },
    /// The detailed model continued with `u = K s + c`.
    Detailed { u_max: f64, v_max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongStage {
    pub model: LongModel,
    /// Error covariance indexed by absolute prediction step `0..=N`.
    pub sigmas: Vec<DMatrix<f64>>,
    pub p: f64,
    pub ellipse: Option<[f64; 2]>,
    pub static_box: Option<BoxEdge>,
    pub lane: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub step_tol: f64,
    pub violation_tol: f64,
    /// Relative objective change below which a feasible iterate counts as
    /// converged.
    pub objective_tol: f64,
    pub damping_factor: f64,
    pub damping_steps: usize,
    pub warm_start: bool,
    pub soft_weight: f64,
    pub soft_quadratic: f64,
    pub regularization: f64,
    /// Speed of the straight-line initial guess.
    pub guess_speed: f64,
    pub trace: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 20,
            step_tol: 1e-5,
            violation_tol: 1e-6,
            objective_tol: 1e-5,
            damping_factor: 0.5,
            damping_steps: 8,
            warm_start: true,
            soft_weight: 1e6,
            soft_quadratic: 1.0,
            regularization: 1e-6,
            guess_speed: 1.0,
            trace: false,
        }
    }
}

impl SqpSettings {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("step_tol", self.step_tol),
            ("violation_tol", self.violation_tol),
            ("objective_tol", self.objective_tol),
            ("soft_weight", self.soft_weight),
            ("soft_quadratic", self.soft_quadratic),
            ("regularization", self.regularization),
            ("guess_speed", self.guess_speed),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("solver.{name} must be positive")));
            }
        }
        if !(self.damping_factor > 0.0 && self.damping_factor < 1.0) {
            return Err(Error::Config("solver.damping_factor must lie in (0, 1)".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("solver.max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    InitialState,
    Dynamics,
    Coupling,
    LongDynamics,
    TubeMembership,
    TightenedState,
    TightenedInput,
    RobustEllipse,
    RobustBox,
    ChanceEllipse,
    ChanceLane,
    ChanceBox,
    ChanceVelocity,
    InputSet,
    InputRate,
}

impl ConstraintKind {
    fn is_nonlinear(self) -> bool {
        matches!(
            self,
            ConstraintKind::RobustEllipse
                | ConstraintKind::RobustBox
                | ConstraintKind::ChanceEllipse
                | ConstraintKind::ChanceBox
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConstraintTag {
    pub kind: ConstraintKind,
    pub step: usize,
}

/// Index map of the lifted decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_beta: usize,
    pub nx: usize,
    pub nu: usize,
    pub ns: usize,
    pub nl: usize,
    pub ls: usize,
    pub lu: usize,
    xbar0: usize,
    nu0: usize,
    s0: usize,
    c0: usize,
    n_vars: usize,
}

impl Layout {
    pub fn new(n_beta: usize, nx: usize, nu: usize, ns: usize, nl: usize, ls: usize, lu: usize) -> Self {
        let xbar0 = n_beta;
        let nu0 = xbar0 + nx * (ns + 1);
        let s0 = nu0 + nu * (ns + 1);
        let (ls, lu) = if nl == 0 { (0, 0) } else { (ls, lu) };
        let c0 = s0 + if nl == 0 { 0 } else { ls * (nl + 1) };
        let n_vars = c0 + lu * nl;
        Self { n_beta, nx, nu, ns, nl, ls, lu, xbar0, nu0, s0, c0, n_vars }
    }

    pub fn n(&self) -> usize {
        self.ns + self.nl
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Number of free control quantities: β, ν₀…ν_{N_s} and c_{N_s}…c_{N−1}.
    pub fn control_len(&self) -> usize {
        self.n_beta + self.nu * (self.ns + 1) + self.lu * self.nl
    }

    pub fn beta(&self, i: usize) -> usize {
        i
    }

    pub fn xbar(&self, k: usize, i: usize) -> usize {
        debug_assert!(k <= self.ns && i < self.nx);
        self.xbar0 + k * self.nx + i
    }

    pub fn nu(&self, k: usize, i: usize) -> usize {
        debug_assert!(k <= self.ns && i < self.nu);
        self.nu0 + k * self.nu + i
    }

    /// Long-stage state at absolute step `k ∈ N_s..=N`.
    pub fn s(&self, k: usize, i: usize) -> usize {
        debug_assert!(self.nl > 0 && k >= self.ns && k <= self.n() && i < self.ls);
        self.s0 + (k - self.ns) * self.ls + i
    }

    /// Long-stage input at absolute step `k ∈ N_s..N`.
    pub fn c(&self, k: usize, i: usize) -> usize {
        debug_assert!(self.nl > 0 && k >= self.ns && k < self.n() && i < self.lu);
        self.c0 + (k - self.ns) * self.lu + i
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TaggedRow {
    pub tag: ConstraintTag,
    pub row: SparseRow,
}

/// Quadratic objective `½wᵀHw + fᵀw + c`.
#[derive(Debug, Clone)]
pub(crate) struct Quadratic {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: f64,
}

impl Quadratic {
    fn new(n: usize) -> Self {
        Self { h: DMatrix::zeros(n, n), f: DVector::zeros(n), c: 0.0 }
    }

    /// Adds `(Lw − t)ᵀ W (Lw − t)` where row `i` of `L` is `rows[i]`.
    fn add(&mut self, rows: &[Vec<(usize, f64)>], target: &[f64], w: &DMatrix<f64>) {
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                for (a, va) in &rows[i] {
                    for (b, vb) in &rows[j] {
                        self.h[(*a, *b)] += 2.0 * wij * va * vb;
                    }
                }
                for (a, va) in &rows[i] {
                    self.f[*a] -= wij * target[j] * va;
                }
                for (b, vb) in &rows[j] {
                    self.f[*b] -= wij * target[i] * vb;
                }
                self.c += wij * target[i] * target[j];
            }
        }
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.h * w)) + self.f.dot(w) + self.c
    }
}

/// Everything about the OCP that does not depend on the measured state or
/// the obstacle: layout, fixed constraints, cost and its factorization.
#[derive(Debug, Clone)]
pub struct Controller {
    pub method: MethodKind,
    pub model: LinearModel,
    pub robust: RobustStage,
    pub long: Option<LongStage>,
    pub weights: CostWeights,
    pub settings: SqpSettings,
    pub inequalities: bool,
    layout: Layout,
    fixed_eq: Vec<TaggedRow>,
    fixed_ineq: Vec<TaggedRow>,
    slots: Vec<ConstraintTag>,
    quad: Quadratic,
    factor: EqualityFactor,
    soft_factor: EqualityFactor,
}

impl Controller {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: MethodKind,
        ns: usize,
        nl: usize,
        model: LinearModel,
        robust: RobustStage,
        long: Option<LongStage>,
        weights: CostWeights,
        settings: SqpSettings,
    ) -> Result<Self> {
        Self::build(method, ns, nl, model, robust, long, weights, settings, true)
    }

    /// Same problem with every inequality removed.
    pub fn without_inequalities(&self) -> Result<Self> {
        Self::build(
            self.method,
            self.layout.ns,
            self.layout.nl,
            self.model.clone(),
            self.robust.clone(),
            self.long.clone(),
            self.weights.clone(),
            self.settings.clone(),
            false,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        method: MethodKind,
        ns: usize,
        nl: usize,
        model: LinearModel,
        robust: RobustStage,
        long: Option<LongStage>,
        weights: CostWeights,
        settings: SqpSettings,
        inequalities: bool,
    ) -> Result<Self> {
        settings.validate()?;
        let nx = model.n_x();
        let nu = model.n_u();
        check_dim("tube K rows", nu, robust.tube.k.nrows())?;
        check_dim("tube K cols", nx, robust.tube.k.ncols())?;
        check_dim("z_init", nx, robust.z_init.dim())?;
        check_dim("Q", nx, weights.q.nrows())?;
        check_dim("R", nu, weights.r.nrows())?;
        check_dim("target state", nx, weights.target_state.len())?;
        if nx != 4 || nu != 2 {
            return Err(Error::InvalidArgument(
                "the planar obstacle model needs a 4-state, 2-input detailed model".into(),
            ));
        }
        let long = if nl == 0 { None } else { long };
        match (method, &long) {
            (MethodKind::SingleRmpc, Some(_)) => {
                return Err(Error::InvalidArgument("single-model RMPC has no long stage; use N_l = 0".into()))
            }
            (MethodKind::Granular, Some(LongStage { model: LongModel::Detailed { .. }, .. }))
            | (MethodKind::SingleRsmpc, Some(LongStage { model: LongModel::Coarse { .. }, .. })) => {
                return Err(Error::InvalidArgument(format!("long-stage model does not match method {method}")))
            }
            (MethodKind::Granular | MethodKind::SingleRsmpc, None) if nl > 0 => {
                return Err(Error::InvalidArgument("missing long stage".into()))
            }
            _ => {}
        }
        let (ls, lu) = match &long {
            Some(l) => {
                if l.sigmas.len() < ns + nl + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "covariance schedule has {} entries, need {}",
                        l.sigmas.len(),
                        ns + nl + 1
                    )));
                }
                if !(l.p >= 0.5 && l.p < 1.0) {
                    return Err(Error::InvalidArgument(format!("risk parameter {} outside [0.5, 1)", l.p)));
                }
                match &l.model {
                    LongModel::Coarse { model: m, projection, .. } => {
                        check_dim("projection state dim", nx, projection.matrix().ncols() - nu)?;
                        (m.n_x(), m.n_u())
                    }
                    LongModel::Detailed { .. } => (nx, nu),
                }
            }
            None => (0, 0),
        };
        if let Some(l) = &long {
            check_dim("covariance dim", ls, l.sigmas[0].nrows())?;
            if ls != 2 && ls != 4 {
                return Err(Error::InvalidArgument("long-stage state must be planar position or full state".into()));
            }
        }
        let layout = Layout::new(robust.z_init.n_generators(), nx, nu, ns, nl, ls, lu);
        let mut c = Self {
            method,
            model,
            robust,
            long,
            weights,
            settings,
            inequalities,
            layout,
            fixed_eq: Vec::new(),
            fixed_ineq: Vec::new(),
            slots: Vec::new(),
            quad: Quadratic::new(layout.n_vars()),
            factor: EqualityFactor::new(&QpFactor::new(&DMatrix::identity(1, 1))?, &[])?,
            soft_factor: EqualityFactor::new(&QpFactor::new(&DMatrix::identity(1, 1))?, &[])?,
        };
        c.assemble_fixed()?;
        c.assemble_cost();
        let rows: Vec<SparseRow> = c.fixed_eq.iter().map(|r| r.row.clone()).collect();
        c.factor = EqualityFactor::new(&QpFactor::new(&c.quad.h)?, &rows)?;
        c.soft_factor = EqualityFactor::new(&QpFactor::new(&c.soft_hessian())?, &rows)?;
        Ok(c)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn horizon(&self) -> usize {
        self.layout.n()
    }

    pub(crate) fn quad(&self) -> &Quadratic {
        &self.quad
    }

    pub(crate) fn factor(&self, soft: bool) -> &EqualityFactor {
        if soft {
            &self.soft_factor
        } else {
            &self.factor
        }
    }

    pub(crate) fn fixed_ineq(&self) -> &[TaggedRow] {
        &self.fixed_ineq
    }

    pub(crate) fn slots(&self) -> &[ConstraintTag] {
        &self.slots
    }

    /// Gradient `Hw + f` of the assembled objective.
    pub fn objective_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.quad.h * w + &self.quad.f
    }

    pub fn objective_quadratic(&self, w: &DVector<f64>) -> f64 {
        self.quad.value(w)
    }

    fn soft_hessian(&self) -> DMatrix<f64> {
        let n = self.layout.n_vars();
        let m = self.slots.len();
        let mut h = DMatrix::zeros(n + m, n + m);
        h.view_mut((0, 0), (n, n)).copy_from(&self.quad.h);
        for j in 0..m {
            h[(n + j, n + j)] = self.settings.soft_quadratic;
        }
        h
    }

    pub(crate) fn soft_linear(&self) -> DVector<f64> {
        let n = self.layout.n_vars();
        let mut f = DVector::from_element(n + self.slots.len(), self.settings.soft_weight);
        f.rows_mut(0, n).copy_from(&self.quad.f);
        f
    }

    fn long_gain(&self) -> DMatrix<f64> {
        match &self.long {
            Some(LongStage { model: LongModel::Coarse { kc, .. }, .. }) => kc.clone(),
            _ => self.robust.tube.k.clone(),
        }
    }

    /// Rows for `v_k` (coarse velocity command) or `u_k` (detailed input) of
    /// the long stage: `gain · s_k + c_k`.
    fn long_input_rows(&self, k: usize) -> Vec<Vec<(usize, f64)>> {
        let l = &self.layout;
        let g = self.long_gain();
        (0..l.lu)
            .map(|i| {
                let mut r: Vec<(usize, f64)> =
                    (0..l.ls).filter(|&j| g[(i, j)] != 0.0).map(|j| (l.s(k, j), g[(i, j)])).collect();
                r.push((l.c(k, i), 1.0));
                r
            })
            .collect()
    }

    /// Rows for the detailed input `K x̄_k + ν_k`.
    fn nominal_input_rows(&self, k: usize) -> Vec<Vec<(usize, f64)>> {
        let l = &self.layout;
        let kk = &self.robust.tube.k;
        (0..l.nu)
            .map(|i| {
                let mut r: Vec<(usize, f64)> =
                    (0..l.nx).filter(|&j| kk[(i, j)] != 0.0).map(|j| (l.xbar(k, j), kk[(i, j)])).collect();
                r.push((l.nu(k, i), 1.0));
                r
            })
            .collect()
    }

    fn push_eq(&mut self, kind: ConstraintKind, step: usize, terms: Vec<(usize, f64)>, rhs: f64) {
        self.fixed_eq.push(TaggedRow { tag: ConstraintTag { kind, step }, row: SparseRow::new(terms, rhs) });
    }

    fn push_ineq(&mut self, kind: ConstraintKind, step: usize, terms: Vec<(usize, f64)>, rhs: f64) {
        self.fixed_ineq.push(TaggedRow { tag: ConstraintTag { kind, step }, row: SparseRow::new(terms, rhs) });
    }

    /// `lo ≤ row ≤ hi` as two inequality rows.
    fn push_range(&mut self, kind: ConstraintKind, step: usize, terms: &[(usize, f64)], lo: f64, hi: f64) {
        self.push_ineq(kind, step, terms.to_vec(), hi);
        self.push_ineq(kind, step, terms.iter().map(|(i, v)| (*i, -v)).collect(), -lo);
    }

    fn assemble_fixed(&mut self) -> Result<()> {
        let l = self.layout;
        let phi = self.robust.tube.phi.clone();
        let b = self.model.b.clone();
        let g = self.robust.z_init.generators().clone();

        // x̄₀ + Gβ = x₀ − c_Z; the right-hand side is filled in per problem.
        for i in 0..l.nx {
            let mut t = vec![(l.xbar(0, i), 1.0)];
            t.extend((0..l.n_beta).filter(|&j| g[(i, j)] != 0.0).map(|j| (l.beta(j), g[(i, j)])));
            self.push_eq(ConstraintKind::InitialState, 0, t, 0.0);
        }
        for k in 0..l.ns {
            for i in 0..l.nx {
                let mut t = vec![(l.xbar(k + 1, i), 1.0)];
                t.extend((0..l.nx).filter(|&j| phi[(i, j)] != 0.0).map(|j| (l.xbar(k, j), -phi[(i, j)])));
                t.extend((0..l.nu).filter(|&j| b[(i, j)] != 0.0).map(|j| (l.nu(k, j), -b[(i, j)])));
                self.push_eq(ConstraintKind::Dynamics, k + 1, t, 0.0);
            }
        }
        if let Some(long) = self.long.clone() {
            let ns = l.ns;
            match &long.model {
                LongModel::Coarse { model: m, kc, phi_c, projection, .. } => {
                    // (z, v) = P (x̄, u) with u = K x̄ + ν, then c = v − K_c z.
                    let p = projection.matrix().clone();
                    let kk = self.robust.tube.k.clone();
                    let xu = |row: usize| -> Vec<(usize, f64)> {
                        let mut coeff = vec![0.0; l.nx];
                        let mut nu_coeff = vec![0.0; l.nu];
                        for j in 0..l.nx {
                            coeff[j] += p[(row, j)];
                        }
                        for a in 0..l.nu {
                            let pa = p[(row, l.nx + a)];
                            if pa != 0.0 {
                                nu_coeff[a] += pa;
                                for j in 0..l.nx {
                                    coeff[j] += pa * kk[(a, j)];
                                }
                            }
                        }
                        let mut t: Vec<(usize, f64)> =
                            (0..l.nx).filter(|&j| coeff[j] != 0.0).map(|j| (l.xbar(ns, j), coeff[j])).collect();
                        t.extend((0..l.nu).filter(|&a| nu_coeff[a] != 0.0).map(|a| (l.nu(ns, a), nu_coeff[a])));
                        t
                    };
                    for i in 0..l.ls {
                        let mut t = vec![(l.s(ns, i), 1.0)];
                        t.extend(xu(i).into_iter().map(|(j, v)| (j, -v)));
                        self.push_eq(ConstraintKind::Coupling, ns, t, 0.0);
                    }
                    for i in 0..l.lu {
                        // c + K_c z − v = 0
                        let mut t = vec![(l.c(ns, i), 1.0)];
                        t.extend((0..l.ls).filter(|&j| kc[(i, j)] != 0.0).map(|j| (l.s(ns, j), kc[(i, j)])));
                        t.extend(xu(l.ls + i).into_iter().map(|(j, v)| (j, -v)));
                        self.push_eq(ConstraintKind::Coupling, ns, t, 0.0);
                    }
                    let bc = &m.b;
                    for k in ns..l.n() {
                        for i in 0..l.ls {
                            let mut t = vec![(l.s(k + 1, i), 1.0)];
                            t.extend((0..l.ls).filter(|&j| phi_c[(i, j)] != 0.0).map(|j| (l.s(k, j), -phi_c[(i, j)])));
                            t.extend((0..l.lu).filter(|&j| bc[(i, j)] != 0.0).map(|j| (l.c(k, j), -bc[(i, j)])));
                            self.push_eq(ConstraintKind::LongDynamics, k + 1, t, 0.0);
                        }
                    }
                }
                LongModel::Detailed { .. } => {
                    for i in 0..l.nx {
                        self.push_eq(ConstraintKind::Coupling, ns, vec![(l.s(ns, i), 1.0), (l.xbar(ns, i), -1.0)], 0.0);
                    }
                    for i in 0..l.nu {
                        self.push_eq(ConstraintKind::Coupling, ns, vec![(l.c(ns, i), 1.0), (l.nu(ns, i), -1.0)], 0.0);
                    }
                    for k in ns..l.n() {
                        for i in 0..l.nx {
                            let mut t = vec![(l.s(k + 1, i), 1.0)];
                            t.extend((0..l.nx).filter(|&j| phi[(i, j)] != 0.0).map(|j| (l.s(k, j), -phi[(i, j)])));
                            t.extend((0..l.nu).filter(|&j| b[(i, j)] != 0.0).map(|j| (l.c(k, j), -b[(i, j)])));
                            self.push_eq(ConstraintKind::LongDynamics, k + 1, t, 0.0);
                        }
                    }
                }
            }
        }

        if !self.inequalities {
            return Ok(());
        }

        for j in 0..l.n_beta {
            self.push_range(ConstraintKind::TubeMembership, 0, &[(l.beta(j), 1.0)], -1.0, 1.0);
        }
        let xbar = self.robust.tube.xbar.clone();
        for k in 0..=l.ns {
            for f in 0..xbar.n_faces() {
                let t: Vec<(usize, f64)> = (0..l.nx)
                    .filter(|&j| xbar.normals()[(f, j)] != 0.0)
                    .map(|j| (l.xbar(k, j), xbar.normals()[(f, j)]))
                    .collect();
                self.push_ineq(ConstraintKind::TightenedState, k, t, xbar.offsets()[f]);
            }
        }
        let ubar = self.robust.tube.ubar.clone();
        for k in 0..l.ns {
            let rows = self.nominal_input_rows(k);
            for f in 0..ubar.n_faces() {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for i in 0..l.nu {
                    let a = ubar.normals()[(f, i)];
                    if a != 0.0 {
                        for (j, v) in &rows[i] {
                            *acc.entry(*j).or_insert(0.0) += a * v;
                        }
                    }
                }
                self.push_ineq(ConstraintKind::TightenedInput, k, acc.into_iter().collect(), ubar.offsets()[f]);
            }
        }
        if self.robust.ellipse.is_some() {
            for k in 0..=l.ns {
                self.slots.push(ConstraintTag { kind: ConstraintKind::RobustEllipse, step: k });
            }
        }
        if self.robust.static_box.is_some() {
            for k in 0..=l.ns {
                self.slots.push(ConstraintTag { kind: ConstraintKind::RobustBox, step: k });
            }
        }

        if let Some(long) = self.long.clone() {
            let ns = l.ns;
            let (py, vel_idx): (usize, Option<[usize; 2]>) = if l.ls == 2 { (1, None) } else { (2, Some([1, 3])) };
            for k in ns..=l.n() {
                let sig = &long.sigmas[k];
                let gy = crate::chance::gamma(&unit2(l.ls, py), sig, long.p)?;
                self.push_range(
                    ConstraintKind::ChanceLane,
                    k,
                    &[(l.s(k, py), 1.0)],
                    long.lane[0] + gy,
                    long.lane[1] - gy,
                );
            }
            match &long.model {
                LongModel::Coarse { v_max, rate_max, .. } => {
                    for k in ns..l.n() {
                        for (i, r) in self.long_input_rows(k).into_iter().enumerate() {
                            let _ = i;
                            self.push_range(ConstraintKind::InputSet, k, &r, -v_max, *v_max);
                        }
                    }
                    for k in ns + 1..l.n() {
                        let now = self.long_input_rows(k);
                        let prev = self.long_input_rows(k - 1);
                        for i in 0..l.lu {
                            let mut t = now[i].clone();
                            t.extend(prev[i].iter().map(|(j, v)| (*j, -v)));
                            self.push_range(ConstraintKind::InputRate, k, &t, -rate_max, *rate_max);
                        }
                    }
                }
                LongModel::Detailed { u_max, v_max } => {
                    let vi = vel_idx.expect("detailed long stage has velocity states");
                    for k in ns..=l.n() {
                        let sig = &long.sigmas[k];
                        for &j in &vi {
                            let gv = crate::chance::gamma(&unit2(l.ls, j), sig, long.p)?;
                            self.push_range(
                                ConstraintKind::ChanceVelocity,
                                k,
                                &[(l.s(k, j), 1.0)],
                                -v_max + gv,
                                v_max - gv,
                            );
                        }
                    }
                    for k in ns..l.n() {
                        for r in self.long_input_rows(k) {
                            self.push_range(ConstraintKind::InputSet, k, &r, -u_max, *u_max);
                        }
                    }
                }
            }
            if long.ellipse.is_some() {
                for k in ns..=l.n() {
                    self.slots.push(ConstraintTag { kind: ConstraintKind::ChanceEllipse, step: k });
                }
            }
            if long.static_box.is_some() {
                for k in ns..=l.n() {
                    self.slots.push(ConstraintTag { kind: ConstraintKind::ChanceBox, step: k });
                }
            }
        }
        Ok(())
    }

    fn assemble_cost(&mut self) {
        let l = self.layout;
        let w = self.weights.clone();
        let mut quad = Quadratic::new(l.n_vars());
        let ns = l.ns;
        let state_rows =
            |k: usize| -> Vec<Vec<(usize, f64)>> { (0..l.nx).map(|i| vec![(l.xbar(k, i), 1.0)]).collect() };
        for k in 0..ns {
            quad.add(&state_rows(k), w.target_state.as_slice(), &w.q);
            quad.add(&self.nominal_input_rows(k), &vec![0.0; l.nu], &w.r);
        }
        let reg = self.settings.regularization;
        let eye = |n: usize| DMatrix::<f64>::identity(n, n) * reg;
        let term = w.terminal_target();
        match &self.long {
            None => {
                // Terminal cost on the position of x̄_N; velocities and the
                // unused ν_N only carry the regularization.
                let pos: Vec<Vec<(usize, f64)>> = vec![vec![(l.xbar(ns, 0), 1.0)], vec![(l.xbar(ns, 2), 1.0)]];
                quad.add(&pos, term.as_slice(), &w.qc);
                quad.add(&state_rows(ns), w.target_state.as_slice(), &eye(l.nx));
            }
            Some(long) => {
                let srows =
                    |k: usize| -> Vec<Vec<(usize, f64)>> { (0..l.ls).map(|i| vec![(l.s(k, i), 1.0)]).collect() };
                let (q_long, r_long, target) = match &long.model {
                    LongModel::Coarse { .. } => (w.qc.clone(), w.rc.clone(), w.target_position.clone()),
                    LongModel::Detailed { .. } => (w.q.clone(), w.r.clone(), w.target_state.clone()),
                };
                for k in ns..l.n() {
                    quad.add(&srows(k), target.as_slice(), &q_long);
                    quad.add(&self.long_input_rows(k), &vec![0.0; l.lu], &r_long);
                }
                let pos_rows: Vec<Vec<(usize, f64)>> =
                    if l.ls == 2 { srows(l.n()) } else { vec![vec![(l.s(l.n(), 0), 1.0)], vec![(l.s(l.n(), 2), 1.0)]] };
                quad.add(&pos_rows, term.as_slice(), &w.qc);
                if l.ls == 4 {
                    let vrows = vec![vec![(l.s(l.n(), 1), 1.0)], vec![(l.s(l.n(), 3), 1.0)]];
                    quad.add(&vrows, &[0.0; 2], &eye(2));
                }
                quad.add(&state_rows(ns), w.target_state.as_slice(), &eye(l.nx));
            }
        }
        let nu_rows: Vec<Vec<(usize, f64)>> = (0..l.nu).map(|i| vec![(l.nu(ns, i), 1.0)]).collect();
        quad.add(&nu_rows, &vec![0.0; l.nu], &eye(l.nu));
        let beta_rows: Vec<Vec<(usize, f64)>> = (0..l.n_beta).map(|i| vec![(l.beta(i), 1.0)]).collect();
        quad.add(&beta_rows, &vec![0.0; l.n_beta], &eye(l.n_beta));
        self.quad = quad;
    }

    /// Objective evaluated directly from the trajectories in `w`.
    pub fn objective_value(&self, w: &DVector<f64>) -> f64 {
        let l = &self.layout;
        let wt = &self.weights;
        let reg = self.settings.regularization;
        let get = |idx: &dyn Fn(usize) -> usize, n: usize| DVector::from_fn(n, |i, _| w[idx(i)]);
        let quadform = |v: &DVector<f64>, m: &DMatrix<f64>| (v.transpose() * m * v)[0];
        let mut j = 0.0;
        for k in 0..l.ns {
            let x = get(&|i| l.xbar(k, i), l.nx);
            let nu = get(&|i| l.nu(k, i), l.nu);
            let u = &self.robust.tube.k * &x + nu;
            j += wt.stage_cost(&x, &u);
        }
        let term = wt.terminal_target();
        let xn = get(&|i| l.xbar(l.ns, i), l.nx);
        j += reg * (&xn - &wt.target_state).norm_squared();
        match &self.long {
            None => {
                let p = DVector::from_column_slice(&[xn[0], xn[2]]) - &term;
                j += quadform(&p, &wt.qc);
            }
            Some(long) => {
                let gain = self.long_gain();
                for k in l.ns..l.n() {
                    let s = get(&|i| l.s(k, i), l.ls);
                    let c = get(&|i| l.c(k, i), l.lu);
                    let v = &gain * &s + c;
                    match &long.model {
                        LongModel::Coarse { .. } => {
                            j += quadform(&(&s - &wt.target_position), &wt.qc) + quadform(&v, &wt.rc);
                        }
                        LongModel::Detailed { .. } => j += wt.stage_cost(&s, &v),
                    }
                }
                let s = get(&|i| l.s(l.n(), i), l.ls);
                let p = if l.ls == 2 { s.clone() } else { DVector::from_column_slice(&[s[0], s[2]]) };
                j += quadform(&(p - &term), &wt.qc);
                if l.ls == 4 {
                    j += reg * (s[1] * s[1] + s[3] * s[3]);
                }
            }
        }
        let nu_n = get(&|i| l.nu(l.ns, i), l.nu);
        let beta = get(&|i| l.beta(i), l.n_beta);
        j + reg * (nu_n.norm_squared() + beta.norm_squared())
    }

    /// Rows of `[(kind, step)] → row count` for every constraint the problem
    /// carries; nonlinear constraints count one slot per step.
    pub fn census(&self) -> BTreeMap<ConstraintTag, usize> {
        let mut m = BTreeMap::new();
        for r in self.fixed_eq.iter().chain(self.fixed_ineq.iter()) {
            *m.entry(r.tag).or_insert(0) += 1;
        }
        for s in &self.slots {
            debug_assert!(s.kind.is_nonlinear());
            *m.entry(*s).or_insert(0) += 1;
        }
        m
    }

    /// Equality rows with the initial-state right-hand side for `x0`.
    pub(crate) fn equalities(&self, x0: &DVector<f64>) -> Vec<SparseRow> {
        let c = self.robust.z_init.center();
        // The initial-state rows come first, one per state component.
        self.fixed_eq
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.row.clone();
                if r.tag.kind == ConstraintKind::InitialState {
                    row.rhs = x0[i] - c[i];
                }
                row
            })
            .collect()
    }

    pub(crate) fn equality_tags(&self) -> Vec<ConstraintTag> {
        self.fixed_eq.iter().map(|r| r.tag).collect()
    }

    /// Straight-line rollout from `x0` toward the target.
    pub fn straight_line_guess(&self, x0: &DVector<f64>) -> DVector<f64> {
        let l = &self.layout;
        let mut w = DVector::zeros(l.n_vars());
        let p0 = [x0[0], x0[2]];
        let tgt = &self.weights.target_position;
        let (dx, dy) = (tgt[0] - p0[0], tgt[1] - p0[1]);
        let dist = dx.hypot(dy);
        let dir = if dist > 0.0 { [dx / dist, dy / dist] } else { [0.0, 0.0] };
        let dt = self.model.dt;
        let speed = self.settings.guess_speed;
        let at = |k: usize| -> ([f64; 2], [f64; 2]) {
            let travel = (speed * dt * k as f64).min(dist);
            let v = if speed * dt * k as f64 >= dist { 0.0 } else { speed };
            ([p0[0] + dir[0] * travel, p0[1] + dir[1] * travel], [dir[0] * v, dir[1] * v])
        };
        for k in 0..=l.ns {
            let (p, v) = at(k);
            let x = [p[0], v[0], p[1], v[1]];
            for i in 0..4 {
                w[l.xbar(k, i)] = x[i];
            }
        }
        if l.nl > 0 {
            let gain = self.long_gain();
            for k in l.ns..=l.n() {
                let (p, v) = at(k);
                let s: Vec<f64> = if l.ls == 2 { p.to_vec() } else { vec![p[0], v[0], p[1], v[1]] };
                for i in 0..l.ls {
                    w[l.s(k, i)] = s[i];
                }
                if k < l.n() {
                    let sv = DVector::from_vec(s);
                    let fb = &gain * &sv;
                    let cmd: Vec<f64> = if l.ls == 2 { v.to_vec() } else { vec![0.0; l.lu] };
                    for i in 0..l.lu {
                        w[l.c(k, i)] = cmd[i] - fb[i];
                    }
                }
            }
        }
        w
    }

    /// Shift a previous solution by one step.
    pub fn shifted_guess(&self, prev: &DVector<f64>) -> Result<DVector<f64>> {
        let l = &self.layout;
        check_dim("shifted_guess", l.n_vars(), prev.len())?;
        let mut w = DVector::zeros(l.n_vars());
        let phi = &self.robust.tube.phi;
        let get_x = |k: usize| DVector::from_fn(l.nx, |i, _| prev[l.xbar(k, i)]);
        for k in 0..l.ns {
            for i in 0..l.nx {
                w[l.xbar(k, i)] = prev[l.xbar(k + 1, i)];
            }
        }
        for k in 0..l.ns.saturating_sub(1) {
            for i in 0..l.nu {
                w[l.nu(k, i)] = prev[l.nu(k + 1, i)];
            }
        }
        let last_x: DVector<f64> = match &self.long {
            None => get_x(l.ns),
            Some(long) => {
                let next = (l.ns + 1).min(l.n());
                let s = DVector::from_fn(l.ls, |i, _| prev[l.s(next, i)]);
                match &long.model {
                    LongModel::Coarse { kc, projection, .. } => {
                        let c = if next < l.n() {
                            DVector::from_fn(l.lu, |i, _| prev[l.c(next, i)])
                        } else {
                            DVector::zeros(l.lu)
                        };
                        let v = kc * &s + c;
                        projection.lift(&s, &v)?.0
                    }
                    LongModel::Detailed { .. } => s,
                }
            }
        };
        for i in 0..l.nx {
            w[l.xbar(l.ns, i)] = last_x[i];
        }
        if l.ns > 0 {
            // Least-squares input reproducing the last nominal transition.
            let b = &self.model.b;
            let rhs = &last_x - phi * DVector::from_fn(l.nx, |i, _| w[l.xbar(l.ns - 1, i)]);
            let nu = (b.transpose() * b).lu().solve(&(b.transpose() * rhs)).unwrap_or_else(|| DVector::zeros(l.nu));
            for i in 0..l.nu {
                w[l.nu(l.ns - 1, i)] = nu[i];
            }
        }
        if let Some(long) = &self.long {
            for k in l.ns..l.n() {
                for i in 0..l.ls {
                    w[l.s(k, i)] = prev[l.s(k + 1, i)];
                }
            }
            // Hold the terminal state; the last input is the least-squares fit to
            // that transition.
            for i in 0..l.ls {
                w[l.s(l.n(), i)] = prev[l.s(l.n(), i)];
            }
            for k in l.ns..l.n() - 1 {
                for i in 0..l.lu {
                    w[l.c(k, i)] = prev[l.c(k + 1, i)];
                }
            }
            if l.n() > l.ns + 1 {
                let (bl, phi_long) = match &long.model {
                    LongModel::Coarse { model, phi_c, .. } => (model.b.clone(), phi_c.clone()),
                    LongModel::Detailed { .. } => (self.model.b.clone(), phi.clone()),
                };
                let sn = DVector::from_fn(l.ls, |i, _| w[l.s(l.n(), i)]);
                let sp = DVector::from_fn(l.ls, |i, _| w[l.s(l.n() - 1, i)]);
                let rhs = &sn - phi_long * sp;
                let c =
                    (bl.transpose() * &bl).lu().solve(&(bl.transpose() * rhs)).unwrap_or_else(|| DVector::zeros(l.lu));
                for i in 0..l.lu {
                    w[l.c(l.n() - 1, i)] = c[i];
                }
            }
        }
        Ok(w)
    }
}

fn unit2(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

/// One instance of the OCP at a measured state.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub controller: Arc<Controller>,
    pub x0: DVector<f64>,
    /// Predicted obstacle centers for steps `0..=N`, if an obstacle exists.
    pub obstacle: Option<Vec<[f64; 2]>>,
    pub guess: DVector<f64>,
}

pub fn assemble(
    controller: &Arc<Controller>,
    x0: &DVector<f64>,
    obstacle: Option<Vec<[f64; 2]>>,
    previous: Option<&OcpSolution>,
) -> Result<OcpProblem> {
    check_dim("assemble x0", controller.model.n_x(), x0.len())?;
    if let Some(o) = &obstacle {
        if o.len() < controller.horizon() + 1 {
            return Err(Error::InvalidArgument(format!(
                "obstacle prediction has {} entries, need {}",
                o.len(),
                controller.horizon() + 1
            )));
        }
    }
    let guess = match previous {
        Some(p) if controller.settings.warm_start && p.status != SolveStatus::Infeasible => {
            controller.shifted_guess(&p.raw)?
        }
        _ => controller.straight_line_guess(x0),
    };
    Ok(OcpProblem { controller: Arc::clone(controller), x0: x0.clone(), obstacle, guess })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpSolution {
    pub beta: DVector<f64>,
    pub nominal_inputs: Vec<DVector<f64>>,
    pub nominal_states: Vec<DVector<f64>>,
    pub coarse_inputs: Vec<DVector<f64>>,
    pub coarse_states: Vec<DVector<f64>>,
    pub raw: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time_ms: f64,
    pub softened: bool,
    pub max_violation: f64,
    /// Constraints blocking feasibility when `status` is infeasible.
    pub violated: Vec<ConstraintTag>,
    pub trace: Vec<SqpIterate>,
}

impl OcpSolution {
    pub(crate) fn from_raw(c: &Controller, raw: DVector<f64>) -> Self {
        let l = c.layout();
        let vecs = |idx: &dyn Fn(usize, usize) -> usize, ks: std::ops::Range<usize>, n: usize| -> Vec<DVector<f64>> {
            ks.map(|k| DVector::from_fn(n, |i, _| raw[idx(k, i)])).collect()
        };
        let beta = DVector::from_fn(l.n_beta, |i, _| raw[l.beta(i)]);
        let nominal_states = vecs(&|k, i| l.xbar(k, i), 0..l.ns + 1, l.nx);
        let nominal_inputs = vecs(&|k, i| l.nu(k, i), 0..l.ns + 1, l.nu);
        let (coarse_states, coarse_inputs) = if l.nl > 0 {
            (vecs(&|k, i| l.s(k, i), l.ns..l.n() + 1, l.ls), vecs(&|k, i| l.c(k, i), l.ns..l.n(), l.lu))
        } else {
            (Vec::new(), Vec::new())
        };
        let objective = c.objective_quadratic(&raw);
        Self {
            beta,
            nominal_inputs,
            nominal_states,
            coarse_inputs,
            coarse_states,
            raw,
            objective,
            status: SolveStatus::Converged,
            iterations: 0,
            solve_time_ms: 0.0,
            softened: false,
            max_violation: 0.0,
            violated: Vec::new(),
            trace: Vec::new(),
        }
    }
}

/// `κ(x₀) = K x₀ + ν₀`, cross-checked against `ū₀ + K(x₀ − x̄₀)`.
pub fn extract_control(solution: &OcpSolution, x0: &DVector<f64>, k: &DMatrix<f64>) -> Result<DVector<f64>> {
    if solution.status == SolveStatus::Infeasible {
        return Err(Error::QpInfeasible);
    }
    let nu0 = solution.nominal_inputs.first().ok_or_else(|| Error::InvalidArgument("empty solution".into()))?;
    let xbar0 = &solution.nominal_states[0];
    check_dim("extract_control x0", k.ncols(), x0.len())?;
    let u = k * x0 + nu0;
    let ubar0 = k * xbar0 + nu0;
    let alt = ubar0 + k * (x0 - xbar0);
    let scale = 1.0 + u.amax() + (k * x0).amax();
    let gap = (&u - &alt).amax();
    if gap > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!("control forms disagree by {gap:e}")));
    }
    Ok(u)
}
