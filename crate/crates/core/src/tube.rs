//! Tube construction for the robust stage: invariant error set, tightened
//! constraint sets and the free initial nominal state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::setops::{linear_map, mrpi_outer, pontryagin_diff, HPolytope, Support, Zonotope};
use crate::sysmodel::{closed_loop, Disturbance, LinearModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub z: Zonotope,
    pub kz: Zonotope,
    pub xbar: HPolytope,
    pub ubar: HPolytope,
    pub k: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub alpha: f64,
    pub s: usize,
}

impl TubeSpec {
    /// Upper bound of the tightened state set along `+e_i`, if it has one.
    pub fn state_upper(&self, i: usize) -> Option<f64> {
        self.xbar.offset_for(&unit(self.xbar.dim(), i, 1.0))
    }

    pub fn state_lower(&self, i: usize) -> Option<f64> {
        self.xbar.offset_for(&unit(self.xbar.dim(), i, -1.0)).map(|b| -b)
    }

    pub fn input_upper(&self, i: usize) -> Option<f64> {
        self.ubar.offset_for(&unit(self.ubar.dim(), i, 1.0))
    }

    pub fn input_lower(&self, i: usize) -> Option<f64> {
        self.ubar.offset_for(&unit(self.ubar.dim(), i, -1.0)).map(|b| -b)
    }
}

fn unit(n: usize, i: usize, s: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = s;
    e
}

pub fn build_tube(model: &LinearModel, k: &DMatrix<f64>, eps: f64, x: &HPolytope, u: &HPolytope) -> Result<TubeSpec> {
    let d = match &model.disturbance {
        Disturbance::BoundedBox(d) => linear_map(&model.g, d)?,
        Disturbance::Gaussian(_) => return Err(Error::InvalidArgument("tube needs a bounded disturbance".into())),
    };
    check_dim("build_tube state set", model.n_x(), x.dim())?;
    check_dim("build_tube input set", model.n_u(), u.dim())?;
    let phi = closed_loop(model, k)?;
    let out = mrpi_outer(&phi, &d, eps)?;
    let kz = linear_map(k, &out.z)?;
    let xbar = pontryagin_diff(x, &out.z)?;
    let ubar = pontryagin_diff(u, &kz)?;
    Ok(TubeSpec { z: out.z, kz, xbar, ubar, k: k.clone(), phi, alpha: out.alpha, s: out.s })
}

/// `x̄⁺ = Φ x̄ + B ν`.
pub fn nominal_step(
    phi: &DMatrix<f64>,
    b: &DMatrix<f64>,
    xbar: &DVector<f64>,
    nu: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("nominal_step state", phi.ncols(), xbar.len())?;
    check_dim("nominal_step input", b.ncols(), nu.len())?;
    check_dim("nominal_step B rows", phi.nrows(), b.nrows())?;
    Ok(phi * xbar + b * nu)
}

/// `x̄₀ = offset − G β` with `‖β‖∞ ≤ 1`, where `offset = x₀ − c_Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateConstraint {
    pub offset: DVector<f64>,
    pub generators: DMatrix<f64>,
}

impl InitialStateConstraint {
    pub fn n_aux(&self) -> usize {
        self.generators.ncols()
    }

    pub fn nominal(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("InitialStateConstraint beta", self.n_aux(), beta.len())?;
        Ok(&self.offset - &self.generators * beta)
    }
}

pub fn initial_state_constraint(z: &Zonotope, x0: &DVector<f64>) -> Result<InitialStateConstraint> {
    check_dim("initial_state_constraint", z.dim(), x0.len())?;
    Ok(InitialStateConstraint { offset: x0 - z.center(), generators: z.generators().clone() })
}

/// Largest distance from the center of `z` to a point of its projection
/// onto two coordinates.
pub fn planar_radius(z: &Zonotope, axes: [usize; 2]) -> Result<f64> {
    let n = z.dim();
    if axes[0] >= n || axes[1] >= n || axes[0] == axes[1] {
        return Err(Error::InvalidArgument(format!("bad projection axes {axes:?}")));
    }
    let centered = Zonotope::new(DVector::zeros(n), z.generators().clone())?;
    let mut best: f64 = 0.0;
    let steps = 7200;
    for i in 0..steps {
        let t = i as f64 * std::f64::consts::TAU / steps as f64;
        let mut d = DVector::zeros(n);
        d[axes[0]] = t.cos();
        d[axes[1]] = t.sin();
        best = best.max(centered.support(&d)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setops::minkowski_sum;
    use crate::sysmodel::double_integrator;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn robot_k() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 4, &[-3.77, -4.67, 0.0, 0.0, 0.0, 0.0, -3.77, -4.67])
    }

    fn sets() -> (HPolytope, HPolytope) {
        let inf = f64::INFINITY;
        let x = HPolytope::from_bounds(&[-inf, -3.0, -0.5, -3.0], &[inf, 3.0, 2.5, 3.0]).unwrap();
        let u = HPolytope::from_bounds(&[-3.0, -3.0], &[3.0, 3.0]).unwrap();
        (x, u)
    }

    fn random_unit(rng: &mut impl Rng, n: usize) -> DVector<f64> {
        loop {
            let d = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            if d.norm() > 1e-3 {
                return d.normalize();
            }
        }
    }

    #[test]
    fn zero_disturbance_keeps_sets() {
        let model = double_integrator(0.2, Zonotope::singleton(DVector::zeros(4))).unwrap();
        let (x, u) = sets();
        let t = build_tube(&model, &robot_k(), 1e-3, &x, &u).unwrap();
        assert_eq!(t.xbar, x);
        assert_eq!(t.ubar, u);
        assert_eq!(t.z.n_generators(), 0);
    }

    #[test]
    fn tightened_sets_contain_tube_sum() {
        let d = Zonotope::from_bounds(&[-0.1; 4], &[0.1; 4]).unwrap();
        let model = double_integrator(0.2, d).unwrap();
        let (x, u) = sets();
        let t = build_tube(&model, &robot_k(), 1e-3, &x, &u).unwrap();
        assert!(t.z.contains(&DVector::zeros(4), 1e-12).unwrap());
        for (i, row) in x.normals().row_iter().enumerate() {
            let dir = row.transpose();
            let lhs = t.xbar.support(&dir).unwrap() + t.z.support(&dir).unwrap();
            assert!(lhs <= x.offsets()[i] + 1e-8);
        }
        for (i, row) in u.normals().row_iter().enumerate() {
            let dir = row.transpose();
            let lhs = t.ubar.support(&dir).unwrap() + t.kz.support(&dir).unwrap();
            assert!(lhs <= u.offsets()[i] + 1e-8);
        }
        assert!(t.state_upper(2).unwrap() < 2.5);
        assert!(t.state_upper(0).is_none());
        assert_abs_diff_eq!(t.input_upper(0).unwrap(), -t.input_lower(0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn oversized_disturbance_fails_loudly() {
        let d = Zonotope::from_bounds(&[-1.0; 4], &[1.0; 4]).unwrap();
        let model = double_integrator(0.2, d).unwrap();
        let (x, u) = sets();
        assert!(matches!(build_tube(&model, &robot_k(), 1e-3, &x, &u), Err(Error::EmptySet(_))));
        let unstable = -robot_k();
        let d = Zonotope::from_bounds(&[-0.1; 4], &[0.1; 4]).unwrap();
        let model = double_integrator(0.2, d).unwrap();
        assert!(matches!(build_tube(&model, &unstable, 1e-3, &x, &u), Err(Error::Unstable(_))));
    }

    #[test]
    fn nominal_step_examples() {
        let model = double_integrator(0.2, Zonotope::singleton(DVector::zeros(4))).unwrap();
        let phi = closed_loop(&model, &robot_k()).unwrap();
        let z = nominal_step(&phi, &model.b, &DVector::zeros(4), &DVector::zeros(2)).unwrap();
        assert_eq!(z, DVector::zeros(4));
        let x1 = nominal_step(&phi, &model.b, &v(&[1.0, 0.0, 0.0, 0.0]), &DVector::zeros(2)).unwrap();
        // Block product by hand: (1 − 0.02·3.77, −0.2·3.77).
        assert_abs_diff_eq!(x1, v(&[1.0 - 0.02 * 3.77, -0.2 * 3.77, 0.0, 0.0]), epsilon = 1e-14);
        assert_abs_diff_eq!(x1[0], 0.9246, epsilon = 1e-12);
        assert_abs_diff_eq!(x1[1], -0.754, epsilon = 1e-12);

        let block = phi.view((0, 0), (2, 2)).into_owned();
        let e = block.complex_eigenvalues();
        let lambda = e[0].re;
        // Eigenvector of [[a, b], [c, d]] for λ: (b, λ − a).
        let ev = v(&[block[(0, 1)], lambda - block[(0, 0)], 0.0, 0.0]);
        let next = nominal_step(&phi, &model.b, &ev, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(next, &ev * lambda, epsilon = 1e-12);
        assert!(nominal_step(&phi, &model.b, &DVector::zeros(3), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn initial_state_encoding() {
        let x0 = v(&[1.0, 2.0, 3.0, 4.0]);
        let c = initial_state_constraint(&Zonotope::singleton(DVector::zeros(4)), &x0).unwrap();
        assert_eq!(c.n_aux(), 0);
        assert_eq!(c.nominal(&DVector::zeros(0)).unwrap(), x0);

        let bx = Zonotope::from_bounds(&[-0.1; 4], &[0.1; 4]).unwrap();
        let c = initial_state_constraint(&bx, &x0).unwrap();
        assert_eq!(c.n_aux(), 4);
        let corner = c.nominal(&v(&[1.0, -1.0, 1.0, -1.0])).unwrap();
        assert_abs_diff_eq!(corner, v(&[0.9, 2.1, 2.9, 4.1]), epsilon = 1e-15);

        let z = Zonotope::from_generator_list(
            v(&[0.05, 0.0, -0.02, 0.0]),
            &[v(&[0.1, 0.2, 0.0, 0.0]), v(&[0.0, -0.1, 0.3, 0.1]), v(&[0.2, 0.0, 0.0, -0.1])],
        )
        .unwrap();
        let c = initial_state_constraint(&z, &x0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let beta = DVector::from_fn(3, |_, _| rng.random_range(-1.0..=1.0));
            let xbar0 = c.nominal(&beta).unwrap();
            let e = &x0 - &xbar0;
            for _ in 0..50 {
                let d = random_unit(&mut rng, 4);
                assert!(e.dot(&d) <= z.support(&d).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn tube_contains_closed_loop_error() {
        let d = Zonotope::from_bounds(&[-0.1; 4], &[0.1; 4]).unwrap();
        let model = double_integrator(0.2, d.clone()).unwrap();
        let (x, u) = sets();
        let t = build_tube(&model, &robot_k(), 1e-3, &x, &u).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dirs: Vec<_> = (0..50).map(|_| random_unit(&mut rng, 4)).collect();
        let supports: Vec<f64> = dirs.iter().map(|d| t.z.support(d).unwrap()).collect();
        let k = robot_k();
        for _ in 0..10_000 {
            let mut xa = v(&[0.0, 0.5, 1.0, 0.0]);
            let mut xn = xa.clone();
            for _ in 0..20 {
                let nu = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let dk = DVector::from_fn(4, |_, _| rng.random_range(-0.1..=0.1));
                let ua = &k * &xa + &nu;
                xa = model.step(&xa, &ua, &dk).unwrap();
                xn = nominal_step(&t.phi, &model.b, &xn, &nu).unwrap();
                let e = &xa - &xn;
                for (d, h) in dirs.iter().zip(&supports) {
                    assert!(e.dot(d) <= h + 1e-12);
                }
            }
        }
    }

    #[test]
    fn robust_satisfaction_by_sampling() {
        let d = Zonotope::from_bounds(&[-0.1; 4], &[0.1; 4]).unwrap();
        let model = double_integrator(0.2, d).unwrap();
        let (x, u) = sets();
        let t = build_tube(&model, &robot_k(), 1e-3, &x, &u).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = t.z.generators();
        let lo = [0.0, t.state_lower(1).unwrap(), t.state_lower(2).unwrap(), t.state_lower(3).unwrap()];
        let hi = [0.0, t.state_upper(1).unwrap(), t.state_upper(2).unwrap(), t.state_upper(3).unwrap()];
        for _ in 0..2000 {
            let xb = DVector::from_fn(4, |i, _| if i == 0 { 5.0 } else { rng.random_range(lo[i]..=hi[i]) });
            let beta = DVector::from_fn(g.ncols(), |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            let xs = &xb + t.z.center() + g * beta;
            assert!(x.contains(&xs, 1e-9));
        }
    }

    #[test]
    fn planar_radius_of_box() {
        let z = Zonotope::from_bounds(&[-0.3, -1.0, -0.4, -1.0], &[0.3, 1.0, 0.4, 1.0]).unwrap();
        assert_abs_diff_eq!(planar_radius(&z, [0, 2]).unwrap(), 0.5, epsilon = 1e-6);
        let zz = minkowski_sum(&z, &z).unwrap();
        assert_abs_diff_eq!(planar_radius(&zz, [0, 2]).unwrap(), 1.0, epsilon = 1e-6);
        assert!(planar_radius(&z, [0, 0]).is_err());
    }
}
