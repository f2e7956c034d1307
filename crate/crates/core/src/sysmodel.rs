//! Discrete-time linear models, the projection linking the detailed and the
//! coarse model, closed-loop matrices and LQR gains.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::setops::Zonotope;

const DARE_TOL: f64 = 1e-10;
const DARE_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Disturbance {
    BoundedBox(Zonotope),
    Gaussian(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub dt: f64,
    pub disturbance: Disturbance,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>, dt: f64, disturbance: Disturbance) -> Result<Self> {
        let n = a.nrows();
        check_dim("LinearModel A columns", n, a.ncols())?;
        check_dim("LinearModel B rows", n, b.nrows())?;
        check_dim("LinearModel G rows", n, g.nrows())?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        match &disturbance {
            Disturbance::BoundedBox(z) => {
                check_dim("LinearModel disturbance", g.ncols(), z.center().len())?;
                if !z.contains(&DVector::zeros(g.ncols()), 1e-12)? {
                    return Err(Error::InvalidArgument("disturbance box must contain the origin".into()));
                }
            }
            Disturbance::Gaussian(s) => {
                check_dim("LinearModel covariance", g.ncols(), s.nrows())?;
                check_psd("disturbance covariance", s)?;
            }
        }
        Ok(Self { a, b, g, dt, disturbance })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_w(&self) -> usize {
        self.g.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("step state", self.n_x(), x.len())?;
        check_dim("step input", self.n_u(), u.len())?;
        check_dim("step disturbance", self.n_w(), d.len())?;
        Ok(&self.a * x + &self.b * u + &self.g * d)
    }
}

pub(crate) fn check_psd(what: &str, s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::InvalidArgument(format!("{what} is not square")));
    }
    let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if (s - s.transpose()).iter().any(|v| v.abs() > 1e-12 * scale) {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    let sym = (s + s.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if min_eig < -1e-12 * scale {
        return Err(Error::InvalidArgument(format!("{what} is not positive semidefinite (eigenvalue {min_eig:e})")));
    }
    Ok(())
}

/// Planar double integrator with state `(p_x, v_x, p_y, v_y)` and
/// acceleration input; exact zero-order-hold discretization.
pub fn double_integrator(dt: f64, disturbance: Zonotope) -> Result<LinearModel> {
    let mut a = DMatrix::identity(4, 4);
    a[(0, 1)] = dt;
    a[(2, 3)] = dt;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = 0.5 * dt * dt;
    b[(1, 0)] = dt;
    b[(2, 1)] = 0.5 * dt * dt;
    b[(3, 1)] = dt;
    LinearModel::new(a, b, DMatrix::identity(4, 4), dt, Disturbance::BoundedBox(disturbance))
}

/// Planar position model driven by velocity.
pub fn single_integrator(dt: f64, sigma_w: DMatrix<f64>) -> Result<LinearModel> {
    LinearModel::new(
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * dt,
        DMatrix::identity(2, 2),
        dt,
        Disturbance::Gaussian(sigma_w),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMap {
    matrix: DMatrix<f64>,
    n_x: usize,
    n_u: usize,
    n_xi: usize,
}

impl ProjectionMap {
    pub fn new(matrix: DMatrix<f64>, n_x: usize, n_u: usize, n_xi: usize) -> Result<Self> {
        check_dim("ProjectionMap columns", n_x + n_u, matrix.ncols())?;
        if n_xi > matrix.nrows() {
            return Err(Error::InvalidArgument("coarse state larger than projection".into()));
        }
        if matrix.rank(1e-12) < matrix.nrows() {
            return Err(Error::InvalidArgument("projection is not surjective".into()));
        }
        Ok(Self { matrix, n_x, n_u, n_xi })
    }

    /// `ξ = (p_x, p_y)`, `v = (v_x, v_y)` from `x = (p_x, v_x, p_y, v_y)`.
    pub fn robot() -> Self {
        let mut m = DMatrix::zeros(4, 6);
        m[(0, 0)] = 1.0;
        m[(1, 2)] = 1.0;
        m[(2, 1)] = 1.0;
        m[(3, 3)] = 1.0;
        Self::new(m, 4, 2, 2).expect("selection matrix has full rank")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_xi(&self) -> usize {
        self.n_xi
    }

    pub fn n_v(&self) -> usize {
        self.matrix.nrows() - self.n_xi
    }

    pub fn project(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("project state", self.n_x, x.len())?;
        check_dim("project input", self.n_u, u.len())?;
        let mut xu = DVector::zeros(self.n_x + self.n_u);
        xu.rows_mut(0, self.n_x).copy_from(x);
        xu.rows_mut(self.n_x, self.n_u).copy_from(u);
        let out = &self.matrix * xu;
        Ok((out.rows(0, self.n_xi).into_owned(), out.rows(self.n_xi, self.n_v()).into_owned()))
    }

    /// Minimum-norm `(x, u)` mapping onto `(ξ, v)`.
    pub fn lift(&self, xi: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("lift coarse state", self.n_xi, xi.len())?;
        check_dim("lift coarse input", self.n_v(), v.len())?;
        let mut target = DVector::zeros(self.matrix.nrows());
        target.rows_mut(0, self.n_xi).copy_from(xi);
        target.rows_mut(self.n_xi, self.n_v()).copy_from(v);
        let pinv = self.matrix.clone().pseudo_inverse(1e-12).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let xu = pinv * target;
        Ok((xu.rows(0, self.n_x).into_owned(), xu.rows(self.n_x, self.n_u).into_owned()))
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// `Φ = A + B K`, rejected unless Schur stable.
pub fn closed_loop(model: &LinearModel, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("closed_loop gain rows", model.n_u(), k.nrows())?;
    check_dim("closed_loop gain columns", model.n_x(), k.ncols())?;
    let phi = &model.a + &model.b * k;
    let rho = spectral_radius(&phi);
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainPair {
    pub k: DMatrix<f64>,
    pub kc: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub phi_c: DMatrix<f64>,
}

impl GainPair {
    /// Gains are stored in the `u = K x` convention.
    pub fn new(detailed: &LinearModel, k: DMatrix<f64>, coarse: &LinearModel, kc: DMatrix<f64>) -> Result<Self> {
        let phi = closed_loop(detailed, &k)?;
        let phi_c = closed_loop(coarse, &kc)?;
        Ok(Self { k, kc, phi, phi_c })
    }
}

#[derive(Debug, Clone)]
pub struct Lqr {
    /// Gain for `u = -K x`.
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// Infinite-horizon discrete LQR by fixed-point iteration on the Riccati
/// recursion. The returned `k` stabilizes `A - B K`; negate it for the
/// `u = K x` convention used elsewhere in the crate.
pub fn dlqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Lqr> {
    let n = a.nrows();
    let m = b.ncols();
    check_dim("dlqr A", n, a.ncols())?;
    check_dim("dlqr B", n, b.nrows())?;
    check_dim("dlqr Q", n, q.nrows())?;
    check_dim("dlqr R", m, r.nrows())?;
    check_psd("Q", q)?;
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let (next, _) = riccati_step(a, b, q, r, &p)?;
        let diff = (&next - &p).amax();
        p = next;
        if diff <= DARE_TOL * (1.0 + p.amax()) {
            let (_, k) = riccati_step(a, b, q, r, &p)?;
            return Ok(Lqr { k, p });
        }
    }
    Err(Error::IterationCap { context: "dlqr", cap: DARE_MAX_ITER })
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let chol = s.cholesky().ok_or_else(|| Error::InvalidArgument("R + BᵀPB is not positive definite".into()))?;
    let k = chol.solve(&(&bt_p * a));
    let at_p = a.transpose() * p;
    let next = &at_p * a - &at_p * b * &k + q;
    Ok(((&next + next.transpose()) * 0.5, k))
}
