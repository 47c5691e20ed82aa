use serde::{Deserialize, Serialize};

use crate::filters::{FilterConfig, LqpParams, MlpPolicy, DEFAULT_HIDDEN, DEFAULT_M_QP, DEFAULT_N_QP};
use crate::model::BenchmarkSystem;

/// Iterations charged to the baseline filter's QP solve. Its solver is a
/// third-party active-set code, so a fixed nominal count of first-order
/// iterations on the same QP stands in for it.
pub const PSF_NOMINAL_ITERATIONS: u64 = 500;

/// What a filter costs to evaluate once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlopsDescriptor {
    Lqp {
        n_sys: usize,
        m_sys: usize,
        n_qp: usize,
        m_qp: usize,
        n_iter: usize,
    },
    /// Layer widths from input to output.
    Mlp { widths: Vec<usize> },
    Psf {
        n_sys: usize,
        m_sys: usize,
        horizon: usize,
        /// State, input and terminal constraint rows per stage.
        m_x: usize,
        m_u: usize,
        m_f: usize,
        iterations: u64,
    },
}

impl FlopsDescriptor {
    pub fn lqp(params: &LqpParams, cfg: &FilterConfig) -> Self {
        Self::Lqp {
            n_sys: params.n_sys(),
            m_sys: params.m_sys(),
            n_qp: params.n_qp(),
            m_qp: params.m_qp(),
            n_iter: cfg.n_iter,
        }
    }

    pub fn default_lqp(system: &BenchmarkSystem) -> Self {
        Self::Lqp {
            n_sys: system.n_sys(),
            m_sys: system.m_sys(),
            n_qp: DEFAULT_N_QP,
            m_qp: DEFAULT_M_QP,
            n_iter: FilterConfig::default().n_iter,
        }
    }

    pub fn mlp(policy: &MlpPolicy) -> Self {
        let mut widths = vec![policy.net.input_width()];
        widths.extend(policy.net.layers.iter().map(|l| l.w.nrows()));
        Self::Mlp { widths }
    }

    pub fn default_mlp(system: &BenchmarkSystem) -> Self {
        let mut widths = vec![system.n_sys() + system.m_sys()];
        widths.extend(DEFAULT_HIDDEN);
        widths.push(system.m_sys());
        Self::Mlp { widths }
    }

    pub fn psf(system: &BenchmarkSystem, horizon: usize) -> Self {
        Self::Psf {
            n_sys: system.n_sys(),
            m_sys: system.m_sys(),
            horizon,
            m_x: system.spec.m_x(),
            m_u: system.spec.m_u(),
            m_f: system.spec.m_f(),
            iterations: PSF_NOMINAL_ITERATIONS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lqp { .. } => "lqp",
            Self::Mlp { .. } => "mlp",
            Self::Psf { .. } => "psf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopPhase {
    pub name: String,
    pub flops: u64,
}

/// Floating-point operations of one control step, by phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub filter: String,
    pub descriptor: FlopsDescriptor,
    pub phases: Vec<FlopPhase>,
    pub total: u64,
}

impl FlopsReport {
    fn new(descriptor: &FlopsDescriptor, phases: &[(&str, u64)]) -> Self {
        Self {
            filter: descriptor.name().to_string(),
            descriptor: descriptor.clone(),
            phases: phases
                .iter()
                .map(|&(name, flops)| FlopPhase {
                    name: name.to_string(),
                    flops,
                })
                .collect(),
            total: phases.iter().map(|p| p.1).sum(),
        }
    }

    pub fn phase(&self, name: &str) -> Option<u64> {
        self.phases.iter().find(|p| p.name == name).map(|p| p.flops)
    }
}

/// Cost of one iteration `λ⁺ = F(z+λ)+μ`, `s = z + α(λ − 2λ⁺)`, `z⁺ = max(s, 0)`
/// on `m` rows: the vector add, the product with its accumulate, four
/// operations for the relaxation and one for the projection.
pub fn pdhg_iteration_flops(m: u64) -> u64 {
    m + 2 * m * m + 4 * m + m
}

/// Counts one evaluation of the described filter. Parameter-only work (the
/// factorization behind `F`, the constraint matrices of the baseline) is
/// done once per snapshot and not charged per step.
pub fn count_flops(d: &FlopsDescriptor) -> FlopsReport {
    match *d {
        FlopsDescriptor::Lqp {
            n_sys,
            m_sys,
            n_qp,
            m_qp,
            n_iter,
        } => {
            let (n, m, nq, mq) = (n_sys as u64, m_sys as u64, n_qp as u64, m_qp as u64);
            // c = −b − W x0 − H₁ û, then μ = F c
            let derive = mq + 2 * mq * n + 2 * mq * m + 2 * mq * mq;
            let iterate = n_iter as u64 * pdhg_iteration_flops(mq);
            // y = P⁻¹(Hᵀλ + E₁ᵀû)
            let recover = 2 * nq * mq + m + nq;
            FlopsReport::new(d, &[("derive", derive), ("iterate", iterate), ("recover", recover)])
        }
        FlopsDescriptor::Mlp { ref widths } => {
            let dense: u64 = widths.windows(2).map(|w| 2 * w[0] as u64 * w[1] as u64).sum();
            let hidden: u64 = widths[1..widths.len().saturating_sub(1)]
                .iter()
                .map(|&w| w as u64)
                .sum();
            FlopsReport::new(d, &[("dense", dense), ("activation", hidden)])
        }
        FlopsDescriptor::Psf {
            n_sys,
            m_sys,
            horizon,
            m_x,
            m_u,
            m_f,
            iterations,
        } => {
            let rows = (horizon * (m_x + m_u) + m_f) as u64;
            let (n, m) = (n_sys as u64, m_sys as u64);
            // b = W x0 + b0 and q = −E₁ᵀû
            let build = 2 * rows * n + rows + m;
            let solve = iterations * pdhg_iteration_flops(rows);
            FlopsReport::new(d, &[("build", build), ("solve", solve)])
        }
    }
}
