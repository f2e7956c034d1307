//! Gaussian uncertainty propagation for the long stage and the deterministic
//! tightening of chance constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sysmodel::check_psd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSchedule {
    pub sigmas: Vec<DMatrix<f64>>,
    pub phi_c: DMatrix<f64>,
    pub gc_sigma_gct: DMatrix<f64>,
}

impl CovarianceSchedule {
    pub fn get(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.sigmas.get(k)
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// `Σ_{k+1} = Φ Σ_k Φᵀ + G Σ_w Gᵀ`, returning `n_steps + 1` matrices.
pub fn propagate_covariance(
    phi_c: &DMatrix<f64>,
    g_c: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    n_steps: usize,
) -> Result<CovarianceSchedule> {
    let n = phi_c.nrows();
    check_dim("propagate_covariance Phi", n, phi_c.ncols())?;
    check_dim("propagate_covariance G rows", n, g_c.nrows())?;
    check_dim("propagate_covariance G cols", g_c.ncols(), sigma_w.nrows())?;
    check_dim("propagate_covariance sigma0", n, sigma0.nrows())?;
    check_psd("sigma_w", sigma_w)?;
    check_psd("sigma0", sigma0)?;
    let q = g_c * sigma_w * g_c.transpose();
    let q = (&q + q.transpose()) * 0.5;
    let mut sigmas = Vec::with_capacity(n_steps + 1);
    sigmas.push(sigma0.clone());
    for k in 0..n_steps {
        let next = phi_c * &sigmas[k] * phi_c.transpose() + &q;
        sigmas.push((&next + next.transpose()) * 0.5);
    }
    Ok(CovarianceSchedule { sigmas, phi_c: phi_c.clone(), gc_sigma_gct: q })
}

/// Error function, accurate to a few ulps: Maclaurin series for small
/// arguments, Lentz continued fraction for `erfc` beyond.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

pub fn erfc(x: f64) -> f64 {
    if x < 2.5 {
        1.0 - erf(x)
    } else {
        erfc_cf(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // erf x = 2/√π · e^{-x²} Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term.abs() <= sum.abs() * 1e-17 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x2).exp() * sum
}

fn erfc_cf(x: f64) -> f64 {
    // erfc x = e^{-x²}/√π · 1/(x + 1/2/(x + 1/(x + 3/2/(x + …))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..500 {
        let a = n as f64 * 0.5;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Inverse error function on `(-1, 1)`.
pub fn erfinv(y: f64) -> Result<f64> {
    if !(y.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("erfinv argument {y} outside (-1, 1)")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // Giles' single-precision rational approximation as the starting point.
    let w = -((1.0 - y) * (1.0 + y)).ln();
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        p = 3.432_739_39e-07 + p * w;
        p = -3.523_387_7e-06 + p * w;
        p = -4.391_506_54e-06 + p * w;
        p = 0.000_218_580_87 + p * w;
        p = -0.001_253_725_03 + p * w;
        p = -0.004_177_681_64 + p * w;
        p = 0.246_640_727 + p * w;
        p = 1.501_409_41 + p * w;
        p * y
    } else {
        let w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        p = 0.000_100_950_558 + p * w;
        p = 0.001_349_343_22 + p * w;
        p = -0.003_673_428_44 + p * w;
        p = 0.005_739_507_73 + p * w;
        p = -0.007_622_461_3 + p * w;
        p = 0.009_438_870_47 + p * w;
        p = 1.001_674_06 + p * w;
        p = 2.832_976_82 + p * w;
        p * y
    };
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    for _ in 0..4 {
        // Halley step on erf(x) − y.
        let err = if y.abs() > 0.9 {
            // Work with erfc near ±1 to avoid cancellation.
            let s = y.signum();
            s * ((1.0 - s * y) - erfc(s * x))
        } else {
            erf(x) - y
        };
        let deriv = two_over_sqrt_pi * (-x * x).exp();
        let step = err / deriv;
        x -= step / (1.0 + x * step);
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Tightening margin `sqrt(2 ∇gᵀΣ∇g) · erfinv(2p − 1)`.
pub fn gamma(grad_g: &DVector<f64>, sigma: &DMatrix<f64>, p: f64) -> Result<f64> {
    check_dim("gamma sigma", grad_g.len(), sigma.nrows())?;
    if !(0.5..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("risk parameter {p} outside [0.5, 1)")));
    }
    let var = grad_g.dot(&(sigma * grad_g)).max(0.0);
    Ok((2.0 * var).sqrt() * erfinv(2.0 * p - 1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConstraintShape {
    /// `((ξ₀−c₀)/a)² + ((ξ₁−c₁)/b)² − 1 ≥ 0`.
    Ellipse { center: [f64; 2], semi_axes: [f64; 2] },
    /// `offset − normal·ξ ≥ 0`.
    HalfPlane { normal: [f64; 2], offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceConstraint {
    pub shape: ConstraintShape,
    pub p: f64,
}

impl ChanceConstraint {
    pub fn ellipse(center: [f64; 2], semi_axes: [f64; 2], p: f64) -> Self {
        Self { shape: ConstraintShape::Ellipse { center, semi_axes }, p }
    }

    pub fn half_plane(normal: [f64; 2], offset: f64, p: f64) -> Self {
        Self { shape: ConstraintShape::HalfPlane { normal, offset }, p }
    }

    pub fn value(&self, z: &[f64; 2]) -> f64 {
        match self.shape {
            ConstraintShape::Ellipse { center, semi_axes } => {
                let dx = (z[0] - center[0]) / semi_axes[0];
                let dy = (z[1] - center[1]) / semi_axes[1];
                dx * dx + dy * dy - 1.0
            }
            ConstraintShape::HalfPlane { normal, offset } => offset - normal[0] * z[0] - normal[1] * z[1],
        }
    }

    pub fn gradient(&self, z: &[f64; 2]) -> [f64; 2] {
        match self.shape {
            ConstraintShape::Ellipse { center, semi_axes } => [
                2.0 * (z[0] - center[0]) / (semi_axes[0] * semi_axes[0]),
                2.0 * (z[1] - center[1]) / (semi_axes[1] * semi_axes[1]),
            ],
            ConstraintShape::HalfPlane { normal, .. } => [-normal[0], -normal[1]],
        }
    }

    pub fn gamma(&self, z: &[f64; 2], sigma: &DMatrix<f64>) -> Result<f64> {
        let g = self.gradient(z);
        gamma(&DVector::from_column_slice(&g), sigma, self.p)
    }
}

/// `g(z) − γ(∇g(z), Σ, p)`; nonnegative iff the tightened constraint holds.
pub fn deterministic_residual(c: &ChanceConstraint, z: &[f64; 2], sigma: &DMatrix<f64>) -> Result<f64> {
    Ok(c.value(z) - c.gamma(z, sigma)?)
}
