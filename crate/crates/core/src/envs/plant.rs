use nalgebra::{DVector, Matrix2, Vector2, Vector4};

use crate::error::{check_dim, Error, Result};
use crate::model::{BenchmarkSystem, CartpoleParams, Plant, GRAVITY};

/// Advances the true plant by one control step.
pub fn env_step(system: &BenchmarkSystem, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("state", system.n_sys(), x.len())?;
    check_dim("input", system.m_sys(), u.len())?;
    match system.plant {
        Plant::Linear => Ok(system.model.step(x, u)),
        Plant::Cartpole(p) => {
            let s = Vector4::new(x[0], x[1], x[2], x[3]);
            let next = cartpole_step(&p, &s, u[0])?;
            Ok(DVector::from_column_slice(next.as_slice()))
        }
    }
}

/// Time derivative of `[p, p_dot, theta, theta_dot]` from the mass-matrix form
///
/// ```text
/// [m_c + m_p       m_p l cos θ] [p̈]   [u + m_p l sin θ θ̇²]
/// [m_p l cos θ     m_p l²     ] [θ̈] = [m_p g l sin θ      ]
/// ```
pub fn cartpole_derivative(p: &CartpoleParams, s: &Vector4<f64>, u: f64) -> Result<Vector4<f64>> {
    let (theta, theta_dot) = (s[2], s[3]);
    let (sin, cos) = theta.sin_cos();
    let ml = p.m_p * p.l;
    let mass = Matrix2::new(p.m_c + p.m_p, ml * cos, ml * cos, ml * p.l);
    let rhs = Vector2::new(u + ml * sin * theta_dot * theta_dot, ml * GRAVITY * sin);
    let acc = mass.lu().solve(&rhs).ok_or(Error::Singular("cartpole mass matrix"))?;
    Ok(Vector4::new(s[1], acc[0], theta_dot, acc[1]))
}

/// Classical fourth-order Runge-Kutta step with zero-order-hold input.
pub fn cartpole_rk4(p: &CartpoleParams, s: &Vector4<f64>, u: f64, dt: f64) -> Result<Vector4<f64>> {
    let k1 = cartpole_derivative(p, s, u)?;
    let k2 = cartpole_derivative(p, &(s + k1 * (0.5 * dt)), u)?;
    let k3 = cartpole_derivative(p, &(s + k2 * (0.5 * dt)), u)?;
    let k4 = cartpole_derivative(p, &(s + k3 * dt), u)?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// RK4 substeps per control interval. One step per 0.1 s drifts by a few
/// percent in energy over an episode; ten keep the drift below 1e-6.
pub const CARTPOLE_SUBSTEPS: usize = 10;

/// One control interval of the nonlinear plant with the input held constant.
pub fn cartpole_step(p: &CartpoleParams, s: &Vector4<f64>, u: f64) -> Result<Vector4<f64>> {
    let h = p.dt / CARTPOLE_SUBSTEPS as f64;
    let mut s = *s;
    for _ in 0..CARTPOLE_SUBSTEPS {
        s = cartpole_rk4(p, &s, u, h)?;
    }
    Ok(s)
}

/// Total mechanical energy with the pendulum potential measured from the pivot.
pub fn cartpole_energy(p: &CartpoleParams, s: &Vector4<f64>) -> f64 {
    let (v, theta, w) = (s[1], s[2], s[3]);
    let kinetic = 0.5 * (p.m_c + p.m_p) * v * v + p.m_p * p.l * theta.cos() * v * w + 0.5 * p.m_p * p.l * p.l * w * w;
    kinetic + p.m_p * GRAVITY * p.l * theta.cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linearize_cartpole_with, load_benchmark, Discretization};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn double_integrator_step() {
        let s = load_benchmark("double_integrator").unwrap();
        assert_eq!(env_step(&s, &v(&[1.0, 1.0]), &v(&[0.0])).unwrap(), v(&[2.0, 1.0]));
        assert!(env_step(&s, &v(&[1.0]), &v(&[0.0])).is_err());
    }

    #[test]
    fn cartpole_upright_equilibrium() {
        let s = load_benchmark("cartpole").unwrap();
        let x = env_step(&s, &DVector::zeros(4), &v(&[0.0])).unwrap();
        assert_eq!(x, DVector::zeros(4));
    }

    #[test]
    fn small_angle_step_matches_exact_linearization() {
        let s = load_benchmark("cartpole").unwrap();
        let Plant::Cartpole(p) = s.plant else { unreachable!() };
        let lin = linearize_cartpole_with(&p, Discretization::Exact).unwrap();
        let dir = v(&[0.3, -0.5, 0.6, 0.55]);
        let x = &dir * (1e-3 / dir.norm());
        let u = v(&[1e-3]);
        let nonlinear = env_step(&s, &x, &u).unwrap();
        let linear = lin.step(&x, &u);
        assert!((nonlinear - linear).amax() <= 1e-6);
    }

    #[test]
    fn energy_drift_over_an_episode() {
        let p = CartpoleParams::default();
        let mut s = Vector4::new(0.0, 0.0, 0.1, 0.0);
        let e0 = cartpole_energy(&p, &s);
        let mut worst: f64 = 0.0;
        for _ in 0..300 {
            s = cartpole_step(&p, &s, 0.0).unwrap();
            worst = worst.max(((cartpole_energy(&p, &s) - e0) / e0).abs());
        }
        assert!(worst <= 1e-4, "relative energy drift {worst}");
    }
}
