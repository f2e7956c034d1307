//! Dense dual active-set solver for strictly convex QPs
//! `min ½xᵀHx + fᵀx  s.t.  a_iᵀx = b_i (equalities), a_iᵀx ≤ b_i (inequalities)`.
//!
//! The Hessian factor `J = L⁻ᵀ` (with `H = LLᵀ`) is computed once and reused,
//! which suits SQP loops where only `f` and the constraints change.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { terms, rhs }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(i, a)| a * x[*i]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.terms.iter().map(|(_, a)| a * a).sum::<f64>().sqrt()
    }

    /// `aᵀx − b`; positive means an inequality row is violated.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.dot(x) - self.rhs
    }

    fn from_dense(row: nalgebra::DVectorView<'_, f64>, rhs: f64) -> Self {
        let terms = row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect();
        Self { terms, rhs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers in the convention `Hx + f + Σ λ_i a_i = 0`.
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Constraints active when the solver stopped (equalities first, then
    /// inequalities offset by the equality count).
    pub active: Vec<usize>,
    /// On infeasibility, the constraint that could not be added.
    pub blocking: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct QpFactor {
    n: usize,
    /// Row `i` holds column `i` of `J`.
    jt: Vec<f64>,
    pub regularized: bool,
}

impl QpFactor {
    pub fn new(h: &DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        check_dim("QpFactor", n, h.ncols())?;
        let sym = (h + h.transpose()) * 0.5;
        let (chol, regularized) = match sym.clone().cholesky() {
            Some(c) => (c, false),
            None => {
                let scale = sym.diagonal().amax().max(1.0);
                let reg = &sym + DMatrix::identity(n, n) * (1e-9 * scale);
                let c = reg
                    .cholesky()
                    .ok_or_else(|| Error::InvalidArgument("QP Hessian is not positive semidefinite".into()))?;
                (c, true)
            }
        };
        let linv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::InvalidArgument("singular Cholesky factor".into()))?;
        let mut jt = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                jt[i * n + j] = linv[(i, j)];
            }
        }
        Ok(Self { n, jt, regularized })
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

fn row(jt: &[f64], n: usize, i: usize) -> &[f64] {
    &jt[i * n..(i + 1) * n]
}

fn rotate_rows(jt: &mut [f64], n: usize, i: usize, k: usize, c: f64, s: f64) {
    let (lo, hi) = if i < k { (i, k) } else { (k, i) };
    let (head, tail) = jt.split_at_mut(hi * n);
    let (ri, rk) = if i < k {
        (&mut head[lo * n..(lo + 1) * n], &mut tail[..n])
    } else {
        (&mut tail[..n], &mut head[lo * n..(lo + 1) * n])
    };
    for (a, b) in ri.iter_mut().zip(rk.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x + s * y;
        *b = -s * x + c * y;
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

struct Active {
    /// Index into the combined constraint list.
    idx: usize,
    /// Orientation: the constraint is handled as `σ aᵀx ≥ σ b` internally.
    sigma: f64,
    u: f64,
    equality: bool,
}

/// Factor state after the equality rows have been added. It depends on the
/// rows only, so SQP loops with fixed equality rows can build it once.
#[derive(Debug, Clone)]
pub struct EqualityFactor {
    n: usize,
    meq: usize,
    jt: Vec<f64>,
    /// Column `j` of the upper-triangular `R`.
    rcols: Vec<Vec<f64>>,
    /// First row that is linearly dependent on the earlier ones.
    dependent: Option<usize>,
}

fn check_rows(n: usize, rows: &[&SparseRow]) -> Result<()> {
    for r in rows {
        if r.terms.iter().any(|(i, v)| *i >= n || !v.is_finite()) || !r.rhs.is_finite() {
            return Err(Error::InvalidArgument("malformed QP constraint row".into()));
        }
    }
    Ok(())
}

impl EqualityFactor {
    pub fn new(fac: &QpFactor, eq: &[SparseRow]) -> Result<Self> {
        let n = fac.n;
        check_rows(n, &eq.iter().collect::<Vec<_>>())?;
        let mut jt = fac.jt.clone();
        let mut rcols = Vec::with_capacity(eq.len());
        let mut dependent = None;
        let mut d = vec![0.0; n];
        let mut z = vec![0.0; n];
        for (q, a) in eq.iter().enumerate() {
            for (i, di) in d.iter_mut().enumerate() {
                let ri = row(&jt, n, i);
                *di = a.terms.iter().map(|(j, v)| v * ri[*j]).sum::<f64>();
            }
            z.iter_mut().for_each(|v| *v = 0.0);
            for i in q..n {
                if d[i] != 0.0 {
                    for (zj, rj) in z.iter_mut().zip(row(&jt, n, i)) {
                        *zj += d[i] * rj;
                    }
                }
            }
            let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if znorm <= 1e-13 * (1.0 + a.norm()) {
                dependent = Some(q);
                break;
            }
            for j in (q + 1..n).rev() {
                if d[j] == 0.0 {
                    continue;
                }
                let (c, s, rr) = givens(d[j - 1], d[j]);
                d[j - 1] = rr;
                d[j] = 0.0;
                rotate_rows(&mut jt, n, j - 1, j, c, s);
            }
            rcols.push(d[..=q].to_vec());
        }
        Ok(Self { n, meq: eq.len(), jt, rcols, dependent })
    }

    pub fn n_equalities(&self) -> usize {
        self.meq
    }
}

/// Solve with a precomputed Hessian factor.
pub fn solve_factored(fac: &QpFactor, f: &DVector<f64>, eq: &[SparseRow], ineq: &[SparseRow]) -> Result<QpSolution> {
    solve_with_equalities(&EqualityFactor::new(fac, eq)?, f, eq, ineq)
}

/// Solve reusing the equality phase. `eq` must hold the rows `ef` was built
/// from; only their right-hand sides are read.
pub fn solve_with_equalities(
    ef: &EqualityFactor,
    f: &DVector<f64>,
    eq: &[SparseRow],
    ineq: &[SparseRow],
) -> Result<QpSolution> {
    let n = ef.n;
    check_dim("qp linear term", n, f.len())?;
    check_dim("qp equality rows", ef.meq, eq.len())?;
    let meq = eq.len();
    let all: Vec<&SparseRow> = eq.iter().chain(ineq.iter()).collect();
    check_rows(n, &all[meq..])?;
    let norms: Vec<f64> = all.iter().map(|r| r.norm()).collect();
    let mut jt = ef.jt.clone();
    let g: Vec<f64> = (0..n).map(|i| row(&jt, n, i).iter().zip(f.iter()).map(|(a, b)| a * b).sum()).collect();
    let q0 = ef.rcols.len();
    // Rᵀy = b by forward substitution.
    let mut y = vec![0.0; q0];
    for i in 0..q0 {
        let mut s = eq[i].rhs;
        for (j, yj) in y.iter().enumerate().take(i) {
            s -= ef.rcols[i][j] * yj;
        }
        y[i] = s / ef.rcols[i][i];
    }
    // x = J₁ y − J₂ J₂ᵀ f.
    let mut x = vec![0.0; n];
    for i in 0..n {
        let w = if i < q0 { y[i] } else { -g[i] };
        if w != 0.0 {
            for (xj, rj) in x.iter_mut().zip(row(&jt, n, i)) {
                *xj += w * rj;
            }
        }
    }
    // u = R⁻¹ (J₁ᵀ f + y).
    let mut u = vec![0.0; q0];
    for i in (0..q0).rev() {
        let mut s = g[i] + y[i];
        for j in i + 1..q0 {
            s -= ef.rcols[j][i] * u[j];
        }
        u[i] = s / ef.rcols[i][i];
    }

    let mut active: Vec<Active> = (0..q0).map(|i| Active { idx: i, sigma: 1.0, u: u[i], equality: true }).collect();
    let mut rcols: Vec<Vec<f64>> = ef.rcols.clone();
    let mut is_active = vec![false; all.len()];
    is_active[..q0].iter_mut().for_each(|v| *v = true);
    let cap = 20 * (n + all.len()) + 100;
    let mut iterations = q0;
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];

    let finish = |x: Vec<f64>, active: &[Active], status: QpStatus, iterations: usize, blocking: Option<usize>| {
        let mut eq_duals = vec![0.0; meq];
        let mut ineq_duals = vec![0.0; all.len() - meq];
        for a in active {
            // Internal multiplier u pairs with normal σa in Hx + f = Σ u σ a.
            let lambda = -a.sigma * a.u;
            if a.idx < meq {
                eq_duals[a.idx] = lambda;
            } else {
                ineq_duals[a.idx - meq] = lambda;
            }
        }
        QpSolution {
            x: DVector::from_vec(x),
            eq_duals,
            ineq_duals,
            status,
            iterations,
            active: active.iter().map(|a| a.idx).collect(),
            blocking,
        }
    };

    if let Some(p) = ef.dependent {
        return Ok(finish(x, &active, QpStatus::Infeasible, iterations, Some(p)));
    }

    loop {
        // Pick the constraint to add.
        let mut pick: Option<(usize, f64)> = None;
        {
            let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut worst = 0.0;
            for p in meq..all.len() {
                if is_active[p] || norms[p] == 0.0 {
                    continue;
                }
                let viol = all[p].residual(&x) / norms[p];
                let tol = 1e-11 * (1.0 + all[p].rhs.abs() / norms[p] + xmax);
                if viol > tol && viol > worst {
                    worst = viol;
                    pick = Some((p, -1.0));
                }
            }
        }
        let Some((p, sigma)) = pick else {
            return Ok(finish(x, &active, QpStatus::Optimal, iterations, None));
        };
        let np = all[p];
        let equality = p < meq;
        // Multiplier of the constraint being added.
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > cap {
                return Ok(finish(x, &active, QpStatus::IterationCap, iterations, Some(p)));
            }
            let q = active.len();
            // d = Jᵀ n with n = σ a.
            for (i, di) in d.iter_mut().enumerate() {
                let ri = row(&jt, n, i);
                *di = sigma * np.terms.iter().map(|(j, a)| a * ri[*j]).sum::<f64>();
            }
            // Primal direction z = J₂ d₂.
            z.iter_mut().for_each(|v| *v = 0.0);
            for i in q..n {
                if d[i] != 0.0 {
                    for (zj, rj) in z.iter_mut().zip(row(&jt, n, i)) {
                        *zj += d[i] * rj;
                    }
                }
            }
            // Dual direction r = R⁻¹ d₁.
            let mut r = vec![0.0; q];
            for i in (0..q).rev() {
                let mut s = d[i];
                for j in i + 1..q {
                    s -= rcols[j][i] * r[j];
                }
                r[i] = s / rcols[i][i];
            }
            // Partial step.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, a) in active.iter().enumerate() {
                if !a.equality && r[j] > 0.0 {
                    let t = a.u / r[j];
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            // Full step.
            let ztn: f64 = sigma * np.terms.iter().map(|(j, a)| a * z[*j]).sum::<f64>();
            let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let slack = sigma * (np.dot(&x) - np.rhs);
            let t2 = if znorm <= 1e-13 * (1.0 + norms[p]) || ztn <= 0.0 { f64::INFINITY } else { -slack / ztn };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Ok(finish(x, &active, QpStatus::Infeasible, iterations, Some(p)));
            }
            if t2.is_finite() {
                for (xj, zj) in x.iter_mut().zip(z.iter()) {
                    *xj += t * zj;
                }
            }
            for (a, rj) in active.iter_mut().zip(r.iter()) {
                a.u -= t * rj;
            }
            u_new += t;

            if t == t2 {
                // Add p: rotate d₂ into d_q and append the R column.
                for j in (q + 1..n).rev() {
                    if d[j] == 0.0 {
                        continue;
                    }
                    let (c, s, rr) = givens(d[j - 1], d[j]);
                    d[j - 1] = rr;
                    d[j] = 0.0;
                    rotate_rows(&mut jt, n, j - 1, j, c, s);
                }
                rcols.push(d[..=q].to_vec());
                active.push(Active { idx: p, sigma, u: u_new, equality });
                is_active[p] = true;
                break;
            }

            // Drop the blocking constraint and retry p.
            let l = drop.expect("finite partial step has a blocking constraint");
            is_active[active[l].idx] = false;
            active.remove(l);
            rcols.remove(l);
            for j in l..rcols.len() {
                let (c, s, rr) = givens(rcols[j][j], rcols[j][j + 1]);
                rcols[j][j] = rr;
                rcols[j].truncate(j + 1);
                for col in rcols.iter_mut().skip(j + 1) {
                    let (a, b) = (col[j], col[j + 1]);
                    col[j] = c * a + s * b;
                    col[j + 1] = -s * a + c * b;
                }
                rotate_rows(&mut jt, n, j, j + 1, c, s);
            }
        }
    }
}

/// Dense entry point: equalities `a_eq x = b_eq`, inequalities `a_ineq x ≤ b_ineq`.
pub fn qp_solve(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a_ineq: &DMatrix<f64>,
    b_ineq: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
) -> Result<QpSolution> {
    let n = h.nrows();
    check_dim("qp_solve A_ineq columns", n, a_ineq.ncols())?;
    check_dim("qp_solve b_ineq", a_ineq.nrows(), b_ineq.len())?;
    check_dim("qp_solve A_eq columns", n, a_eq.ncols())?;
    check_dim("qp_solve b_eq", a_eq.nrows(), b_eq.len())?;
    let fac = QpFactor::new(h)?;
    let eq: Vec<SparseRow> =
        (0..a_eq.nrows()).map(|i| SparseRow::from_dense(a_eq.row(i).transpose().as_view(), b_eq[i])).collect();
    let ineq: Vec<SparseRow> =
        (0..a_ineq.nrows()).map(|i| SparseRow::from_dense(a_ineq.row(i).transpose().as_view(), b_ineq[i])).collect();
    solve_factored(&fac, f, &eq, &ineq)
}

#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

pub fn kkt_residuals(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    eq: &[SparseRow],
    ineq: &[SparseRow],
    sol: &QpSolution,
) -> KktResiduals {
    let x = sol.x.as_slice();
    let mut grad = h * &sol.x + f;
    for (r, l) in eq.iter().zip(&sol.eq_duals) {
        for (i, a) in &r.terms {
            grad[*i] += l * a;
        }
    }
    for (r, l) in ineq.iter().zip(&sol.ineq_duals) {
        for (i, a) in &r.terms {
            grad[*i] += l * a;
        }
    }
    let primal_eq = eq.iter().map(|r| r.residual(x).abs()).fold(0.0, f64::max);
    let primal_in = ineq.iter().map(|r| r.residual(x).max(0.0)).fold(0.0, f64::max);
    let compl = ineq.iter().zip(&sol.ineq_duals).map(|(r, l)| (l * r.residual(x)).abs()).fold(0.0, f64::max);
    let dual_sign = sol.ineq_duals.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max);
    KktResiduals { stationarity: grad.amax(), primal: primal_eq.max(primal_in), complementarity: compl, dual_sign }
}
