use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filters::{
    lqp_backward_batch, Checkpoint, FilterConfig, LqpFilter, LqpMode, LqpParams, LqpPrepared, MlpFilter, MlpPolicy,
    MlpTape, SafetyFilter, UnrollTape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Lqp,
    Mlp,
}

impl FilterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lqp => "lqp",
            Self::Mlp => "mlp",
        }
    }
}

/// A trainable filter: its deterministic map gives the mean of a diagonal
/// Gaussian over applied inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Lqp { params: LqpParams, cfg: FilterConfig },
    Mlp(MlpPolicy),
}

impl Policy {
    pub fn kind(&self) -> FilterKind {
        match self {
            Self::Lqp { .. } => FilterKind::Lqp,
            Self::Mlp(_) => FilterKind::Mlp,
        }
    }

    pub fn log_std(&self) -> &DVector<f64> {
        match self {
            Self::Lqp { params, .. } => &params.log_std,
            Self::Mlp(m) => &m.log_std,
        }
    }

    pub fn m_sys(&self) -> usize {
        self.log_std().len()
    }

    /// Flat parameters; the trailing `m_sys` entries are `log_std`.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            Self::Lqp { params, .. } => params.to_flat(),
            Self::Mlp(m) => {
                let mut v = m.net.to_flat();
                v.extend_from_slice(m.log_std.as_slice());
                v
            }
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Self::Lqp { params, .. } => params.set_flat(flat),
            Self::Mlp(m) => {
                let n = m.net.num_params();
                crate::error::check_dim("flat parameter vector", n + m.log_std.len(), flat.len())?;
                m.net.set_flat(&flat[..n])?;
                m.log_std.as_mut_slice().copy_from_slice(&flat[n..]);
                Ok(())
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Lqp { params, .. } => params.num_params(),
            Self::Mlp(m) => m.net.num_params() + m.log_std.len(),
        }
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        Ok(match self {
            Self::Lqp { params, cfg } => Snapshot::Lqp(LqpPrepared::new(params.clone(), cfg)?),
            Self::Mlp(m) => Snapshot::Mlp(Arc::new(m.clone())),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(match ck {
            Checkpoint::Lqp(c) => Self::Lqp {
                params: c.params()?,
                cfg: c.filter_config(),
            },
            Checkpoint::Mlp(c) => Self::Mlp(c.policy()?),
        })
    }

    /// The deterministic filter used at evaluation.
    pub fn filter(&self) -> Result<Box<dyn SafetyFilter>> {
        Ok(match self {
            Self::Lqp { params, cfg } => Box::new(LqpFilter::new(params.clone(), cfg, LqpMode::Unrolled)?),
            Self::Mlp(m) => Box::new(MlpFilter(m.clone())),
        })
    }
}

/// Frozen parameters for one collection or minibatch phase.
#[derive(Debug, Clone)]
pub enum Snapshot {
    Lqp(Arc<LqpPrepared>),
    Mlp(Arc<MlpPolicy>),
}

#[derive(Debug, Clone)]
pub enum PolicyTape {
    Lqp(UnrollTape),
    Mlp(MlpTape),
}

impl Snapshot {
    pub fn forward(&self, x: &DVector<f64>, u_hat: &DVector<f64>) -> Result<(DVector<f64>, PolicyTape)> {
        match self {
            Self::Lqp(p) => {
                let tape = p.forward(x, u_hat)?;
                Ok((tape.u0.clone(), PolicyTape::Lqp(tape)))
            }
            Self::Mlp(m) => {
                let tape = m.forward(x, u_hat)?;
                Ok((tape.output.clone(), PolicyTape::Mlp(tape)))
            }
        }
    }

    pub fn mean(&self, x: &DVector<f64>, u_hat: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward(x, u_hat)?.0)
    }

    /// Flat gradient of `Σ_k g_kᵀ mean_k` in the layout of
    /// [`Policy::to_flat`], with zeros in the `log_std` slots.
    pub fn backward(&self, tapes: &[PolicyTape], grads: &[DVector<f64>]) -> Result<Vec<f64>> {
        match self {
            Self::Lqp(p) => {
                let pairs = tapes.iter().zip(grads).map(|(t, g)| match t {
                    PolicyTape::Lqp(t) => (t, g),
                    PolicyTape::Mlp(_) => unreachable!("tape kind matches snapshot kind"),
                });
                let g = lqp_backward_batch(pairs)?;
                let mut flat = Vec::with_capacity(p.params().num_params());
                flat.extend_from_slice(g.h.as_slice());
                flat.extend_from_slice(g.w_b.as_slice());
                flat.extend_from_slice(g.b_b.as_slice());
                flat.extend(std::iter::repeat_n(0.0, p.params().m_sys()));
                Ok(flat)
            }
            Self::Mlp(m) => {
                let mut layer_grads = m.net.zero_grads();
                for (t, g) in tapes.iter().zip(grads) {
                    let PolicyTape::Mlp(t) = t else {
                        unreachable!("tape kind matches snapshot kind")
                    };
                    m.net.backward(t, g, &mut layer_grads)?;
                }
                let mut flat = crate::filters::flatten(&layer_grads);
                flat.extend(std::iter::repeat_n(0.0, m.m_sys()));
                Ok(flat)
            }
        }
    }
}

/// `log N(a; mean, diag(exp(log_std))²)`.
pub fn gaussian_log_prob(a: &DVector<f64>, mean: &DVector<f64>, log_std: &DVector<f64>) -> f64 {
    let mut lp = 0.0;
    for i in 0..a.len() {
        let z = (a[i] - mean[i]) / log_std[i].exp();
        lp += -0.5 * z * z - log_std[i] - 0.5 * (2.0 * PI).ln();
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_density_at_zero() {
        let lp = gaussian_log_prob(&DVector::zeros(1), &DVector::zeros(1), &DVector::zeros(1));
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let lp2 = gaussian_log_prob(
            &DVector::from_element(2, 1.0),
            &DVector::zeros(2),
            &DVector::from_element(2, 2f64.ln()),
        );
        let expected = 2.0 * (-0.125 - 2f64.ln() - 0.5 * (2.0 * PI).ln());
        assert!((lp2 - expected).abs() < 1e-14);
    }
}
