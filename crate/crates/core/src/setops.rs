//! Convex sets in H-representation and generator form, plus the outer
//! approximation of the minimal robust positively invariant set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sysmodel::spectral_radius;

/// Generator cap applied while accumulating Minkowski sums.
pub const MAX_GENERATORS: usize = 512;

const MRPI_MAX_TERMS: usize = 2000;

pub trait Support {
    fn dim(&self) -> usize;

    /// Maximum of `dir · x` over the set.
    fn support(&self, dir: &DVector<f64>) -> Result<f64>;
}

fn check_direction(dir: &DVector<f64>) -> Result<()> {
    if dir.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("direction has non-finite entries".into()));
    }
    if dir.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("direction is zero".into()));
    }
    Ok(())
}

enum LpOutcome {
    Optimal(f64),
    Infeasible,
    Unbounded,
}

/// `max cᵀx` subject to `aᵢᵀx <= bᵢ`, `x` free.
fn lp_maximize(c: &[f64], rows: &[(Vec<f64>, f64)]) -> Result<LpOutcome> {
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
    let n = c.len();
    let m = rows.len();
    let dense: Vec<Vec<f64>> = rows.iter().map(|(a, _)| a.clone()).collect();
    let a = if m == 0 { CscMatrix::zeros((0, n)) } else { CscMatrix::from(&dense) };
    let b: Vec<f64> = rows.iter().map(|(_, b)| *b).collect();
    let q: Vec<f64> = c.iter().map(|v| -v).collect();
    let p = CscMatrix::zeros((n, n));
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-11)
        .tol_gap_rel(1e-11)
        .tol_feas(1e-11)
        .max_iter(400)
        .build()
        .map_err(|e| Error::Lp(format!("{e:?}")))?;
    let cones = [NonnegativeConeT(m)];
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).map_err(|e| Error::Lp(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            Ok(LpOutcome::Optimal(c.iter().zip(&sol.x).map(|(a, b)| a * b).sum()))
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Ok(LpOutcome::Infeasible),
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Ok(LpOutcome::Unbounded),
        other => Err(Error::Lp(format!("solver stopped with {other:?}"))),
    }
}

/// `{x : normals · x <= offsets}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        check_dim("HPolytope offsets", normals.nrows(), offsets.len())?;
        if normals.ncols() == 0 {
            return Err(Error::InvalidArgument("polytope of dimension 0".into()));
        }
        for (i, row) in normals.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) || row.iter().all(|v| *v == 0.0) {
                return Err(Error::InvalidArgument(format!("half-space {i} has a zero or non-finite normal")));
            }
        }
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite offset".into()));
        }
        let p = Self { normals, offsets };
        if p.interior_radius()? < 0.0 {
            return Err(Error::EmptySet(p.first_empty_row()));
        }
        Ok(p)
    }

    /// Axis-aligned box; infinite bounds produce no half-space.
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        check_dim("HPolytope::from_bounds", lo.len(), hi.len())?;
        let n = lo.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if hi[i].is_finite() {
                rows.push((i, 1.0, hi[i]));
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0, -lo[i]));
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, (i, s, off)) in rows.into_iter().enumerate() {
            a[(r, i)] = s;
            b[r] = off;
        }
        Self::new(a, b)
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn n_faces(&self) -> usize {
        self.offsets.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        (&self.normals * x - &self.offsets).iter().all(|v| *v <= tol)
    }

    /// Offset of the half-space whose normal is exactly `normal`, if present.
    pub fn offset_for(&self, normal: &[f64]) -> Option<f64> {
        self.normals.row_iter().position(|r| r.iter().zip(normal).all(|(a, b)| a == b)).map(|i| self.offsets[i])
    }

    /// Largest `t` (capped at 1) such that a ball of radius `t` fits inside;
    /// negative means the set is empty.
    fn interior_radius(&self) -> Result<f64> {
        let n = self.dim();
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        let mut rows: Vec<(Vec<f64>, f64)> = self
            .normals
            .row_iter()
            .zip(self.offsets.iter())
            .map(|(row, b)| {
                let mut a: Vec<f64> = row.iter().copied().collect();
                a.push(row.norm());
                (a, *b)
            })
            .collect();
        let mut cap = vec![0.0; n + 1];
        cap[n] = 1.0;
        rows.push((cap, 1.0));
        match lp_maximize(&c, &rows)? {
            LpOutcome::Optimal(v) => Ok(v),
            LpOutcome::Infeasible => Ok(-1.0),
            LpOutcome::Unbounded => Err(Error::Lp("interior radius unbounded".into())),
        }
    }

    fn first_empty_row(&self) -> String {
        for i in 0..self.n_faces() {
            let sub = Self {
                normals: self.normals.rows(0, i + 1).into_owned(),
                offsets: self.offsets.rows(0, i + 1).into_owned(),
            };
            if matches!(sub.interior_radius(), Ok(r) if r < 0.0) {
                let row: Vec<f64> = self.normals.row(i).iter().copied().collect();
                return format!(
                    "half-space {i} (normal {:?}, offset {:.6}) conflicts with the earlier rows",
                    row, self.offsets[i]
                );
            }
        }
        "no feasible point".into()
    }
}

impl Support for HPolytope {
    fn dim(&self) -> usize {
        self.normals.ncols()
    }

    fn support(&self, dir: &DVector<f64>) -> Result<f64> {
        check_dim("HPolytope::support", self.dim(), dir.len())?;
        check_direction(dir)?;
        let rows: Vec<(Vec<f64>, f64)> = self
            .normals
            .row_iter()
            .zip(self.offsets.iter())
            .map(|(row, b)| (row.iter().copied().collect(), *b))
            .collect();
        let c: Vec<f64> = dir.iter().copied().collect();
        match lp_maximize(&c, &rows)? {
            LpOutcome::Optimal(v) => Ok(v),
            LpOutcome::Unbounded => Err(Error::Unbounded),
            LpOutcome::Infeasible => Err(Error::EmptySet("support of empty polytope".into())),
        }
    }
}

/// `{c + G β : ‖β‖∞ <= 1}`; generators are the columns of `generators`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self> {
        check_dim("Zonotope generators", center.len(), generators.nrows())?;
        if center.iter().chain(generators.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("zonotope has non-finite entries".into()));
        }
        Ok(Self { center, generators })
    }

    pub fn from_generator_list(center: DVector<f64>, gens: &[DVector<f64>]) -> Result<Self> {
        let n = center.len();
        let mut g = DMatrix::zeros(n, gens.len());
        for (j, v) in gens.iter().enumerate() {
            check_dim("Zonotope generator", n, v.len())?;
            g.set_column(j, v);
        }
        Self::new(center, g)
    }

    pub fn singleton(point: DVector<f64>) -> Self {
        let n = point.len();
        Self { center: point, generators: DMatrix::zeros(n, 0) }
    }

    /// Axis-aligned box; zero-width axes contribute no generator.
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        check_dim("Zonotope::from_bounds", lo.len(), hi.len())?;
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("lower bound above upper bound".into()));
        }
        let n = lo.len();
        let center = DVector::from_fn(n, |i, _| 0.5 * (lo[i] + hi[i]));
        let axes: Vec<usize> = (0..n).filter(|&i| hi[i] > lo[i]).collect();
        let mut g = DMatrix::zeros(n, axes.len());
        for (j, &i) in axes.iter().enumerate() {
            g[(i, j)] = 0.5 * (hi[i] - lo[i]);
        }
        Self::new(center, g)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn n_generators(&self) -> usize {
        self.generators.ncols()
    }

    /// Half-widths of the smallest enclosing axis-aligned box.
    pub fn interval_radius(&self) -> DVector<f64> {
        DVector::from_fn(self.center.len(), |i, _| self.generators.row(i).iter().map(|v| v.abs()).sum())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { center: &self.center * s, generators: &self.generators * s }
    }

    /// Over-approximation with at most `max` generators: the smallest ones
    /// (by Euclidean norm) are replaced by their interval hull.
    pub fn reduce(&self, max: usize) -> Self {
        let n = self.dim();
        let m = self.n_generators();
        if m <= max || max < n {
            return self.clone();
        }
        let keep = max - n;
        let mut order: Vec<usize> = (0..m).collect();
        let norms: Vec<f64> = (0..m).map(|j| self.generators.column(j).norm()).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        let mut g = DMatrix::zeros(n, max);
        for (j, &src) in order[..keep].iter().enumerate() {
            g.set_column(j, &self.generators.column(src));
        }
        for &src in &order[keep..] {
            for i in 0..n {
                g[(i, keep + i)] += self.generators[(i, src)].abs();
            }
        }
        Self { center: self.center.clone(), generators: g }
    }

    /// Inner approximation keeping the `k` largest generators.
    pub fn largest_generators(&self, k: usize) -> Self {
        let m = self.n_generators();
        if k >= m {
            return self.clone();
        }
        let norms: Vec<f64> = (0..m).map(|j| self.generators.column(j).norm()).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        let mut idx = order[..k].to_vec();
        idx.sort_unstable();
        Self { center: self.center.clone(), generators: self.generators.select_columns(&idx) }
    }

    /// Inner approximation that sums generators whose directions agree up to
    /// `1 − |cos θ| ≤ tol`. Exactly parallel generators merge without loss.
    pub fn merge_parallel(&self, tol: f64) -> Self {
        let m = self.n_generators();
        let norms: Vec<f64> = (0..m).map(|j| self.generators.column(j).norm()).collect();
        let mut order: Vec<usize> = (0..m).filter(|&j| norms[j] > 0.0).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        let mut reps: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
        for j in order {
            let g = self.generators.column(j).into_owned();
            let u = &g / norms[j];
            match reps.iter_mut().find(|(d, _)| 1.0 - d.dot(&u).abs() <= tol) {
                Some((d, acc)) => {
                    if d.dot(&u) >= 0.0 {
                        *acc += &g;
                    } else {
                        *acc -= &g;
                    }
                }
                None => reps.push((u, g)),
            }
        }
        let mut g = DMatrix::zeros(self.dim(), reps.len());
        for (j, (_, acc)) in reps.iter().enumerate() {
            g.set_column(j, acc);
        }
        Self { center: self.center.clone(), generators: g }
    }

    /// Membership through a feasibility LP over the generator weights.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        check_dim("Zonotope::contains", self.dim(), x.len())?;
        let m = self.n_generators();
        let mut rows = Vec::with_capacity(2 * (m + self.dim()));
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            rows.push((e.clone(), 1.0 + tol));
            e[j] = -1.0;
            rows.push((e, 1.0 + tol));
        }
        for i in 0..self.dim() {
            let g: Vec<f64> = self.generators.row(i).iter().copied().collect();
            let rhs = x[i] - self.center[i];
            rows.push((g.clone(), rhs + tol));
            rows.push((g.iter().map(|v| -v).collect(), -rhs + tol));
        }
        if m == 0 {
            return Ok(rows.iter().all(|(_, b)| *b >= 0.0));
        }
        Ok(matches!(lp_maximize(&vec![0.0; m], &rows)?, LpOutcome::Optimal(_)))
    }
}

impl Support for Zonotope {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn support(&self, dir: &DVector<f64>) -> Result<f64> {
        check_dim("Zonotope::support", self.dim(), dir.len())?;
        check_direction(dir)?;
        let proj = self.generators.tr_mul(dir);
        Ok(self.center.dot(dir) + proj.iter().map(|v| v.abs()).sum::<f64>())
    }
}

pub fn minkowski_sum(a: &Zonotope, b: &Zonotope) -> Result<Zonotope> {
    check_dim("minkowski_sum", a.dim(), b.dim())?;
    let n = a.dim();
    let (ma, mb) = (a.n_generators(), b.n_generators());
    let mut g = DMatrix::zeros(n, ma + mb);
    g.columns_mut(0, ma).copy_from(&a.generators);
    g.columns_mut(ma, mb).copy_from(&b.generators);
    Ok(Zonotope { center: &a.center + &b.center, generators: g })
}

pub fn linear_map(m: &DMatrix<f64>, s: &Zonotope) -> Result<Zonotope> {
    check_dim("linear_map", m.ncols(), s.dim())?;
    Ok(Zonotope { center: m * &s.center, generators: m * &s.generators })
}

pub fn pontryagin_diff(p: &HPolytope, z: &Zonotope) -> Result<HPolytope> {
    check_dim("pontryagin_diff", p.dim(), z.dim())?;
    let mut offsets = p.offsets.clone();
    for (i, row) in p.normals.row_iter().enumerate() {
        offsets[i] -= z.support(&row.transpose())?;
    }
    HPolytope::new(p.normals.clone(), offsets).map_err(|e| match e {
        Error::EmptySet(msg) => Error::EmptySet(format!("tube does not fit inside the constraint set: {msg}")),
        other => other,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrpiOuter {
    pub z: Zonotope,
    pub alpha: f64,
    pub s: usize,
}

/// Outer approximation `(1-α)⁻¹ (D ⊕ ΦD ⊕ … ⊕ Φ^{s-1}D)` of the minimal
/// robust positively invariant set of `e⁺ = Φe + d`, `d ∈ D`.
///
/// `D` must be an axis-aligned box containing the origin. Axes along which
/// `D` has zero width are widened to `eps` times the largest half-width so
/// that the scaling condition `Φ^s D ⊆ αD` can hold; the result is then
/// invariant for the widened box and hence for `D`.
pub fn mrpi_outer(phi: &DMatrix<f64>, d: &Zonotope, eps: f64) -> Result<MrpiOuter> {
    let n = d.dim();
    check_dim("mrpi_outer Phi rows", n, phi.nrows())?;
    check_dim("mrpi_outer Phi cols", n, phi.ncols())?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let rho = spectral_radius(phi);
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    for j in 0..d.n_generators() {
        if d.generators.column(j).iter().filter(|v| **v != 0.0).count() > 1 {
            return Err(Error::InvalidArgument("disturbance set must be an axis-aligned box".into()));
        }
    }
    if !d.contains(&DVector::zeros(n), 1e-12)? {
        return Err(Error::InvalidArgument("disturbance set must contain the origin".into()));
    }

    let radius = d.interval_radius();
    let rmax = radius.max();
    let lo: Vec<f64> = (0..n).map(|i| d.center[i] - radius[i]).collect();
    let hi: Vec<f64> = (0..n).map(|i| d.center[i] + radius[i]).collect();
    let dd = if rmax == 0.0 {
        d.clone()
    } else if radius.iter().any(|r| *r == 0.0) {
        let pad = eps * rmax;
        let lo: Vec<f64> = lo.iter().zip(radius.iter()).map(|(l, r)| if *r == 0.0 { l - pad } else { *l }).collect();
        let hi: Vec<f64> = hi.iter().zip(radius.iter()).map(|(h, r)| if *r == 0.0 { h + pad } else { *h }).collect();
        Zonotope::from_bounds(&lo, &hi)?
    } else {
        d.clone()
    };
    if rmax == 0.0 || phi.iter().all(|v| *v == 0.0) {
        return Ok(MrpiOuter { z: dd, alpha: 0.0, s: 1 });
    }

    let facet_width: Vec<(DVector<f64>, f64)> = (0..n)
        .flat_map(|i| {
            [1.0, -1.0].into_iter().map(move |sgn| {
                let mut e = DVector::zeros(n);
                e[i] = sgn;
                e
            })
        })
        .map(|e| {
            let w = dd.support(&e).expect("box support");
            (e, w)
        })
        .collect();
    if facet_width.iter().any(|(_, w)| *w <= 0.0) {
        return Err(Error::InvalidArgument("disturbance set must contain the origin in its interior".into()));
    }

    let mut sum = dd.clone();
    let mut power = phi.clone();
    for s in 1..=MRPI_MAX_TERMS {
        let mapped = linear_map(&power, &dd)?;
        let mut alpha: f64 = 0.0;
        let mut max_support: f64 = 0.0;
        for (e, w) in &facet_width {
            alpha = alpha.max(mapped.support(e)? / w);
            max_support = max_support.max(sum.support(e)?);
        }
        if alpha <= eps / (eps + max_support) {
            let z = sum.scale(1.0 / (1.0 - alpha));
            return Ok(MrpiOuter { z, alpha, s });
        }
        sum = minkowski_sum(&sum, &mapped)?;
        if sum.n_generators() > MAX_GENERATORS {
            sum = sum.reduce(MAX_GENERATORS);
        }
        power = phi * power;
    }
    Err(Error::IterationCap { context: "mrpi_outer", cap: MRPI_MAX_TERMS })
}

/// Plot-oriented JSON description of a set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SetExport {
    Hpolytope { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
    Zonotope { center: Vec<f64>, generators: Vec<Vec<f64>> },
}

impl From<&HPolytope> for SetExport {
    fn from(p: &HPolytope) -> Self {
        SetExport::Hpolytope {
            normals: p.normals.row_iter().map(|r| r.iter().copied().collect()).collect(),
            offsets: p.offsets.iter().copied().collect(),
        }
    }
}

impl From<&Zonotope> for SetExport {
    fn from(z: &Zonotope) -> Self {
        SetExport::Zonotope {
            center: z.center.iter().copied().collect(),
            generators: z.generators.column_iter().map(|c| c.iter().copied().collect()).collect(),
        }
    }
}
