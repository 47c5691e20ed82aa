use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::filters::{solve_exact, FilterConfig, LqpParams, LqpPrepared};
use crate::model::{box_polytope, Bound, LtiModel, SafeSet, SafetySpec};
use crate::polytope;
use crate::qp::kkt_residuals;

/// Below this rejection-sampling acceptance rate the safe set is treated as
/// degenerate.
pub const MIN_ACCEPTANCE: f64 = 1e-4;
const PILOT_DRAWS: usize = 100_000;

/// How each sampled filter QP is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    /// Dual active-set solve of the QP; the limit of the deployed iteration.
    #[default]
    ActiveSet,
    /// The deployed iteration run to the configured convergence tolerance.
    Pdhg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FalsifyConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub filter: FilterConfig,
    pub solver: InnerSolver,
    /// A sample whose KKT residual exceeds this is flagged invalid.
    pub kkt_tol: f64,
    /// Violations at or below this count as safe.
    pub violation_tol: f64,
}

impl Default for FalsifyConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 0,
            filter: FilterConfig::default(),
            solver: InnerSolver::ActiveSet,
            kkt_tol: 1e-6,
            violation_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    /// No counterexample, but some samples could not be solved accurately.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x0: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub u0: Vec<f64>,
    pub x1: Vec<f64>,
    /// `G x1 − c`.
    pub violation_rows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsificationResult {
    pub verdict: Verdict,
    /// Maximum over valid samples of `max_i (G_i x1 − c_i)`.
    pub worst_violation: f64,
    pub witness: Option<Witness>,
    pub samples_evaluated: usize,
    pub invalid_samples: usize,
    pub kkt_max_residual: f64,
    pub kkt_tol: f64,
    pub violation_tol: f64,
    pub solver: InnerSolver,
}

impl FalsificationResult {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

struct Outcome {
    violation: f64,
    kkt: f64,
    valid: bool,
    u0: DVector<f64>,
    x1: DVector<f64>,
}

/// The frozen filter under test.
pub struct Falsifier<'a> {
    model: &'a LtiModel,
    safe_set: &'a SafeSet,
    prepared: std::sync::Arc<LqpPrepared>,
    cfg: FalsifyConfig,
}

impl<'a> Falsifier<'a> {
    pub fn new(model: &'a LtiModel, safe_set: &'a SafeSet, params: &LqpParams, cfg: FalsifyConfig) -> Result<Self> {
        check_dim("safe set dimension", model.n_sys(), safe_set.n_sys())?;
        check_dim("params state dimension", model.n_sys(), params.n_sys())?;
        check_dim("params input dimension", model.m_sys(), params.m_sys())?;
        if !(cfg.kkt_tol > 0.0 && cfg.violation_tol >= 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(Self {
            model,
            safe_set,
            prepared: LqpPrepared::new(params.clone(), &cfg.filter)?,
            cfg,
        })
    }

    fn solve(&self, x0: &DVector<f64>, u_hat: &DVector<f64>) -> Result<(DVector<f64>, f64, bool)> {
        let m = self.model.m_sys();
        match self.cfg.solver {
            InnerSolver::Pdhg => {
                let out = self.prepared.solve_converged(
                    x0,
                    u_hat,
                    self.cfg.filter.deploy_tol,
                    self.cfg.filter.deploy_max_iter,
                )?;
                let kkt = kkt_residuals(&out.qp, &out.y, &out.lambda)?.max();
                Ok((out.u0, kkt, out.converged))
            }
            InnerSolver::ActiveSet => {
                let qp = self.prepared.qp(x0, u_hat)?;
                match solve_exact(&qp) {
                    Ok((y, mu)) => {
                        let kkt = kkt_residuals(&qp, &y, &mu)?.max();
                        Ok((y.rows(0, m).into_owned(), kkt, true))
                    }
                    Err(Error::Infeasible) => Ok((DVector::from_element(m, f64::NAN), f64::INFINITY, false)),
                    Err(e) => Err(e),
                }
            }
        }
    }

    fn outcome(&self, x0: &DVector<f64>, u_hat: &DVector<f64>) -> Result<Outcome> {
        let (u0, kkt, converged) = self.solve(x0, u_hat)?;
        let x1 = self.model.step(x0, &u0);
        let violation = self.safe_set.max_violation(&x1);
        let valid = converged && kkt <= self.cfg.kkt_tol && violation.is_finite();
        Ok(Outcome {
            violation,
            kkt,
            valid,
            u0,
            x1,
        })
    }

    /// Evaluates every point in parallel; ties in the maximum go to the
    /// earliest point so the result does not depend on scheduling.
    pub fn evaluate(&self, points: &[(DVector<f64>, DVector<f64>)]) -> Result<FalsificationResult> {
        let outcomes: Vec<Outcome> = points
            .par_iter()
            .map(|(x0, u)| self.outcome(x0, u))
            .collect::<Result<_>>()?;
        let mut worst: Option<usize> = None;
        let mut invalid = 0;
        let mut kkt_max: f64 = 0.0;
        for (i, o) in outcomes.iter().enumerate() {
            kkt_max = kkt_max.max(o.kkt);
            if !o.valid {
                invalid += 1;
                continue;
            }
            if worst.is_none_or(|w| o.violation > outcomes[w].violation) {
                worst = Some(i);
            }
        }
        let worst_violation = worst.map_or(f64::NEG_INFINITY, |w| outcomes[w].violation);
        let verdict = if worst_violation > self.cfg.violation_tol {
            Verdict::Fail
        } else if invalid > 0 || worst.is_none() {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        let witness = worst.map(|w| {
            let o = &outcomes[w];
            Witness {
                x0: points[w].0.as_slice().to_vec(),
                u_hat: points[w].1.as_slice().to_vec(),
                u0: o.u0.as_slice().to_vec(),
                x1: o.x1.as_slice().to_vec(),
                violation_rows: (self.safe_set.g() * &o.x1 - self.safe_set.c()).as_slice().to_vec(),
            }
        });
        Ok(FalsificationResult {
            verdict,
            worst_violation,
            witness,
            samples_evaluated: points.len(),
            invalid_samples: invalid,
            kkt_max_residual: kkt_max,
            kkt_tol: self.cfg.kkt_tol,
            violation_tol: self.cfg.violation_tol,
            solver: self.cfg.solver,
        })
    }
}

fn check_box(u_hat_box: &[Bound], m: usize) -> Result<()> {
    check_dim("reference box", m, u_hat_box.len())?;
    if u_hat_box
        .iter()
        .any(|b| !(b.lo <= b.hi) || !b.lo.is_finite() || !b.hi.is_finite())
    {
        return Err(Error::InvalidArgument(
            "reference box must be finite and nonempty".into(),
        ));
    }
    Ok(())
}

/// All corners of a box, in binary counting order over the coordinates.
pub fn box_corners(bounds: &[Bound]) -> Vec<DVector<f64>> {
    let n = bounds.len();
    (0..1usize << n)
        .map(|mask| DVector::from_fn(n, |i, _| if mask >> i & 1 == 0 { bounds[i].lo } else { bounds[i].hi }))
        .collect()
}

/// Sample set of the falsifier: every (vertex, box corner) pair followed by
/// `n_samples` uniform draws, states by rejection from the bounding box.
pub fn sample_points(
    safe_set: &SafeSet,
    u_hat_box: &[Bound],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let verts = safe_set.vertices();
    let (lo, hi) =
        polytope::bounding_box(&verts).ok_or_else(|| Error::DegenerateSet("safe set has no vertices".into()))?;
    let n = safe_set.n_sys();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_box = |rng: &mut ChaCha8Rng| DVector::from_fn(n, |i, _| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());

    let mut pilot = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let hits = (0..PILOT_DRAWS)
        .filter(|_| safe_set.contains(&draw_box(&mut pilot), 0.0))
        .count();
    if (hits as f64) < MIN_ACCEPTANCE * PILOT_DRAWS as f64 {
        return Err(Error::DegenerateSet(format!(
            "rejection sampling accepted {hits} of {PILOT_DRAWS} draws; \
             the set is too thin for sampling, supply its vertices explicitly"
        )));
    }

    let corners = box_corners(u_hat_box);
    let mut points = Vec::with_capacity(verts.len() * corners.len() + n_samples);
    for v in &verts {
        for c in &corners {
            points.push((v.clone(), c.clone()));
        }
    }
    while points.len() < verts.len() * corners.len() + n_samples {
        let x = draw_box(&mut rng);
        if !safe_set.contains(&x, 0.0) {
            continue;
        }
        let u = DVector::from_fn(u_hat_box.len(), |i, _| {
            let b = u_hat_box[i];
            b.lo + (b.hi - b.lo) * rng.random::<f64>()
        });
        points.push((x, u));
    }
    Ok(points)
}

/// Searches for a state of the safe set and a reference in the box whose
/// filtered input leaves the safe set after one step of the nominal model.
pub fn sample_falsify(
    model: &LtiModel,
    safe_set: &SafeSet,
    params: &LqpParams,
    u_hat_box: &[Bound],
    cfg: &FalsifyConfig,
) -> Result<FalsificationResult> {
    check_box(u_hat_box, model.m_sys())?;
    let points = sample_points(safe_set, u_hat_box, cfg.n_samples, cfg.seed)?;
    Falsifier::new(model, safe_set, params, *cfg)?.evaluate(&points)
}

fn grid_axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| (k as f64 * step).clamp(lo, hi)).collect()
}

/// Every multiple of `step` in the safe set's bounding box that lies in the
/// set (to `1e-12`), plus the vertices, crossed with the same grid over the
/// reference box.
pub fn grid_points(safe_set: &SafeSet, u_hat_box: &[Bound], step: f64) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid step must be positive, got {step}"
        )));
    }
    let verts = safe_set.vertices();
    let (lo, hi) =
        polytope::bounding_box(&verts).ok_or_else(|| Error::DegenerateSet("safe set has no vertices".into()))?;
    let x_axes: Vec<Vec<f64>> = (0..lo.len()).map(|i| grid_axis(lo[i], hi[i], step)).collect();
    let u_axes: Vec<Vec<f64>> = u_hat_box.iter().map(|b| grid_axis(b.lo, b.hi, step)).collect();
    let mut states: Vec<DVector<f64>> = cartesian(&x_axes)
        .into_iter()
        .filter(|x| safe_set.contains(x, 1e-12))
        .collect();
    states.extend(verts);
    let inputs = cartesian(&u_axes);
    let mut points = Vec::with_capacity(states.len() * inputs.len());
    for x in &states {
        for u in &inputs {
            points.push((x.clone(), u.clone()));
        }
    }
    Ok(points)
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let mut out = vec![DVector::zeros(axes.len())];
    for (i, axis) in axes.iter().enumerate() {
        out = out
            .iter()
            .flat_map(|p| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q[i] = a;
                    q
                })
            })
            .collect();
    }
    out
}

/// Exhaustive version of [`sample_falsify`] over a regular grid.
pub fn grid_falsify(
    model: &LtiModel,
    safe_set: &SafeSet,
    params: &LqpParams,
    u_hat_box: &[Bound],
    step: f64,
    cfg: &FalsifyConfig,
) -> Result<FalsificationResult> {
    check_box(u_hat_box, model.m_sys())?;
    let points = grid_points(safe_set, u_hat_box, step)?;
    Falsifier::new(model, safe_set, params, *cfg)?.evaluate(&points)
}

/// Parameters whose constraint rows are all `0 >= -1`: the filter returns the
/// reference unchanged.
pub fn vacuous_params(n_sys: usize, input_bounds: &[Bound], n_qp: usize, m_qp: usize) -> Result<LqpParams> {
    LqpParams::new(
        DMatrix::zeros(m_qp, n_qp),
        DMatrix::zeros(m_qp, n_sys),
        DVector::from_element(m_qp, 1.0),
        crate::filters::default_log_std(input_bounds),
    )
}

/// Nominal predictive-filter constraints that keep every predicted state and
/// the terminal state inside `safe_set`, with inputs in `input_bounds`.
pub fn safe_set_params(
    model: &LtiModel,
    safe_set: &SafeSet,
    input_bounds: &[Bound],
    horizon: usize,
) -> Result<LqpParams> {
    let verts = safe_set.vertices();
    let centroid = verts.iter().fold(DVector::zeros(safe_set.n_sys()), |a, v| a + v) / verts.len() as f64;
    let inputs: Vec<Option<Bound>> = input_bounds.iter().copied().map(Some).collect();
    let (s_u, d_u) = box_polytope(&inputs);
    let spec = SafetySpec::new(
        -safe_set.g(),
        -safe_set.c(),
        s_u,
        d_u,
        -safe_set.g(),
        -safe_set.c(),
        centroid,
        DVector::from_iterator(input_bounds.len(), input_bounds.iter().map(Bound::center)),
    )?;
    LqpParams::from_model(model, &spec, horizon, input_bounds)
}
