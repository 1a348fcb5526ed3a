//! Conjugate-gradient solver for symmetric positive-definite systems.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Iteration limits for the CG solver.
#[derive(Debug, Clone, Copy)]
pub struct CgConfig {
    /// Maximum number of iterations.
    pub max_iters: usize,
    /// Residual-norm threshold for early exit.
    pub tol: f64,
}

impl CgConfig {
    pub fn new(max_iters: usize, tol: f64) -> Result<Self> {
        if max_iters < 1 {
            return Err(Error::InvalidInput("CG max_iters must be >= 1".into()));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidInput(format!("CG tol must be positive, got {tol}")));
        }
        Ok(Self { max_iters, tol })
    }
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-4 }
    }
}

/// Result of a CG solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub z: DVector<f64>,
    pub iters: usize,
    pub final_residual: f64,
}

/// Solves `A z = g` for a symmetric positive-definite operator supplied
/// as a matrix-vector map. Starts from zero, keeps the classical
/// residual/conjugate-direction recurrences, and exits early once the
/// residual norm drops below `cfg.tol`.
pub fn cg_solve<F>(apply_a: F, g: &DVector<f64>, cfg: &CgConfig) -> Result<CgSolution>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("CG right-hand side contains non-finite values".into()));
    }
    let n = g.len();
    let mut x = DVector::zeros(n);
    let mut rho = g.clone();
    let mut rho_sq = rho.norm_squared();
    if rho_sq.sqrt() < cfg.tol {
        return Ok(CgSolution { z: x, iters: 0, final_residual: rho_sq.sqrt() });
    }
    let mut p = rho.clone();
    let mut iters = 0;
    for i in 1..=cfg.max_iters {
        let ap = apply_a(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) || !curvature.is_finite() {
            return Err(Error::CgBreakdown { iter: i, curvature });
        }
        let alpha = rho_sq / curvature;
        x.axpy(alpha, &p, 1.0);
        rho.axpy(-alpha, &ap, 1.0);
        let rho_sq_next = rho.norm_squared();
        if !rho_sq_next.is_finite() {
            return Err(Error::CgBreakdown { iter: i, curvature });
        }
        iters = i;
        if rho_sq_next.sqrt() < cfg.tol {
            rho_sq = rho_sq_next;
            break;
        }
        let beta = rho_sq_next / rho_sq;
        rho_sq = rho_sq_next;
        // p = rho + beta p
        p *= beta;
        p += &rho;
    }
    Ok(CgSolution { z: x, iters, final_residual: rho_sq.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_apply(a: DMatrix<f64>) -> impl Fn(&DVector<f64>) -> DVector<f64> {
        move |v| &a * v
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * (n as f64 * 0.1)
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let g = DVector::from_vec(vec![3.0, -1.0, 2.5]);
        let cfg = CgConfig::new(10, 1e-12).unwrap();
        let sol = cg_solve(|v| v.clone(), &g, &cfg).unwrap();
        assert_eq!(sol.iters, 1);
        assert!((&sol.z - &g).norm() < 1e-14);
    }

    #[test]
    fn two_by_two_matches_direct_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let g = DVector::from_vec(vec![1.0, 2.0]);
        let cfg = CgConfig::new(2, 1e-13).unwrap();
        let sol = cg_solve(dense_apply(a), &g, &cfg).unwrap();
        assert!(sol.iters <= 2);
        assert!((sol.z[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((sol.z[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20;
        let a = random_spd(n, &mut rng);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let want = a.clone().lu().solve(&g).unwrap();
        let cfg = CgConfig::new(n, 1e-10).unwrap();
        let sol = cg_solve(dense_apply(a), &g, &cfg).unwrap();
        assert!((&sol.z - &want).norm() / want.norm() < 1e-8);
    }

    #[test]
    fn finite_termination_and_energy_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &n in &[10usize, 30, 50] {
            let a = random_spd(n, &mut rng);
            let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let cfg = CgConfig::new(n, 1e-10).unwrap();
            let sol = cg_solve(dense_apply(a.clone()), &g, &cfg).unwrap();
            assert!(sol.iters <= n);
            assert!(sol.final_residual < 1e-10);

            // Internal residual equals the externally recomputed one, and
            // the quadratic energy decreases monotonically along the path.
            let mut prev_energy = f64::INFINITY;
            for cap in 1..=sol.iters {
                let cfg_cap = CgConfig::new(cap, 1e-300).unwrap();
                let s = cg_solve(dense_apply(a.clone()), &g, &cfg_cap).unwrap();
                let external = (&g - &a * &s.z).norm();
                // 1e-6 relative, floored at the float-noise level of the
                // residual recomputation itself.
                let tol = 1e-6 * external.max(1e-8 * g.norm());
                assert!(
                    (s.final_residual - external).abs() <= tol,
                    "internal {} vs external {}",
                    s.final_residual,
                    external
                );
                let energy = 0.5 * s.z.dot(&(&a * &s.z)) - g.dot(&s.z);
                assert!(energy <= prev_energy + 1e-12);
                prev_energy = energy;
            }
        }
    }

    #[test]
    fn indefinite_operator_reports_breakdown() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let g = DVector::from_vec(vec![0.0, 1.0]);
        let cfg = CgConfig::default();
        match cg_solve(dense_apply(a), &g, &cfg) {
            Err(Error::CgBreakdown { iter, .. }) => assert_eq!(iter, 1),
            other => panic!("expected breakdown, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_rhs_rejected() {
        let g = DVector::from_vec(vec![f64::NAN, 1.0]);
        assert!(cg_solve(|v| v.clone(), &g, &CgConfig::default()).is_err());
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let g = DVector::zeros(4);
        let sol = cg_solve(|v| v.clone(), &g, &CgConfig::default()).unwrap();
        assert_eq!(sol.iters, 0);
        assert!(sol.z.iter().all(|&v| v == 0.0));
    }
}
