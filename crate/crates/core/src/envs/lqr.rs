use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::model::LtiModel;

pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITER: usize = 100_000;

/// Infinite-horizon discrete LQR gain for `u = -K x`, by fixed-point iteration
/// of the Riccati recursion starting from `P = Q`.
pub fn lqr_gain(model: &LtiModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (model.n_sys(), model.m_sys());
    check_dim("Q rows", n, q.nrows())?;
    check_dim("Q columns", n, q.ncols())?;
    check_dim("R rows", m, r.nrows())?;
    check_dim("R columns", m, r.ncols())?;
    if r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("R"));
    }
    let (a, b) = (model.a(), model.b());
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let (k, next) = riccati_step(a, b, &at, &bt, q, r, &p)?;
        let delta = (&next - &p).amax();
        p = next;
        if !delta.is_finite() {
            break;
        }
        if delta < RICCATI_TOL {
            return Ok(k);
        }
    }
    Err(Error::RiccatiDivergence(RICCATI_MAX_ITER))
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    at: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pb = p * b;
    let s = r + bt * &pb;
    let chol = s.cholesky().ok_or(Error::NotPositiveDefinite("R + BᵀPB"))?;
    let k = chol.solve(&(bt * p * a));
    let next = q + at * p * a - at * &pb * &k;
    Ok((k, (&next + next.transpose()) * 0.5))
}

/// Spectral radius of `A - B K`.
pub fn closed_loop_spectral_radius(model: &LtiModel, k: &DMatrix<f64>) -> f64 {
    let acl = model.a() - model.b() * k;
    acl.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_benchmark;

    #[test]
    fn zero_dynamics_give_zero_gain() {
        let m = LtiModel::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 1)).unwrap();
        let k = lqr_gain(&m, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(k, DMatrix::zeros(1, 2));
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        // P = 1 + P - P²/(P+1)  =>  P² - P - 1 = 0  =>  P = (1+√5)/2
        let mut p: f64 = 1.0;
        for _ in 0..200 {
            p = 1.0 + p - p * p / (p + 1.0);
        }
        let golden = 0.5 * (1.0 + 5f64.sqrt());
        assert!((p - golden).abs() < 1e-12);
        let m = LtiModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let k = lqr_gain(&m, &DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap();
        assert!((k[(0, 0)] - golden / (golden + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn benchmark_closed_loops_are_stable() {
        for name in ["double_integrator", "quadruple_tank", "cartpole"] {
            let s = load_benchmark(name).unwrap();
            let (n, m) = (s.n_sys(), s.m_sys());
            let k = lqr_gain(&s.model, &DMatrix::identity(n, n), &DMatrix::identity(m, m)).unwrap();
            assert!(closed_loop_spectral_radius(&s.model, &k) < 1.0, "{name}");
        }
    }

    #[test]
    fn rejects_indefinite_r() {
        let m = LtiModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        assert!(lqr_gain(&m, &DMatrix::identity(1, 1), &DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn uncontrollable_unstable_mode_does_not_converge() {
        let m = LtiModel::new(DMatrix::from_element(1, 1, 2.0), DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(
            lqr_gain(&m, &DMatrix::identity(1, 1), &DMatrix::identity(1, 1)),
            Err(Error::RiccatiDivergence(_))
        ));
    }
}
