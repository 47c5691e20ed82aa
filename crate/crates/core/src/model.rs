//! Benchmark plants, safety polytopes and the violation predicate.
//!
//! Constraint polytopes use the `S x >= d` convention throughout. A box
//! `lo <= x <= hi` is encoded as `S = [I; -I]`, `d = [lo; -hi]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::polytope;

/// Standard gravity used by the cartpole plant.
pub const GRAVITY: f64 = 9.81;

/// Nominal discrete-time linear model `x+ = A x + B u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    #[serde(rename = "A", with = "linalg::rows")]
    a: DMatrix<f64>,
    #[serde(rename = "B", with = "linalg::rows")]
    b: DMatrix<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidArgument(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        check_dim("B rows", a.nrows(), b.nrows())?;
        if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
            return Err(Error::NonFinite("LtiModel".into()));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n_sys(&self) -> usize {
        self.a.nrows()
    }

    pub fn m_sys(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    /// Interval scaled about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let (c, h) = (self.center(), self.half_width() * factor);
        Self::new(c - h, c + h)
    }
}

impl From<[f64; 2]> for Bound {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Bound> for [f64; 2] {
    fn from(b: Bound) -> Self {
        [b.lo, b.hi]
    }
}

/// Encodes per-coordinate bounds as `(S, d)` with `S x >= d`. Unbounded
/// coordinates (`None`) contribute no rows.
pub fn box_polytope(bounds: &[Option<Bound>]) -> (DMatrix<f64>, DVector<f64>) {
    let n = bounds.len();
    let active: Vec<(usize, Bound)> = bounds
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|b| (i, b)))
        .collect();
    let k = active.len();
    let mut s = DMatrix::zeros(2 * k, n);
    let mut d = DVector::zeros(2 * k);
    for (r, (i, b)) in active.iter().enumerate() {
        s[(r, *i)] = 1.0;
        d[r] = b.lo;
        s[(k + r, *i)] = -1.0;
        d[k + r] = -b.hi;
    }
    (s, d)
}

/// Polytopic state, input and terminal constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    #[serde(rename = "S_X", with = "linalg::rows")]
    s_x: DMatrix<f64>,
    #[serde(rename = "d_X", with = "linalg::vector")]
    d_x: DVector<f64>,
    #[serde(rename = "S_U", with = "linalg::rows")]
    s_u: DMatrix<f64>,
    #[serde(rename = "d_U", with = "linalg::vector")]
    d_u: DVector<f64>,
    #[serde(rename = "F_term", with = "linalg::rows")]
    f_term: DMatrix<f64>,
    #[serde(rename = "g_term", with = "linalg::vector")]
    g_term: DVector<f64>,
    /// A point satisfying the state and terminal constraints.
    #[serde(with = "linalg::vector")]
    witness_x: DVector<f64>,
    /// A point satisfying the input constraints.
    #[serde(with = "linalg::vector")]
    witness_u: DVector<f64>,
}

impl SafetySpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s_x: DMatrix<f64>,
        d_x: DVector<f64>,
        s_u: DMatrix<f64>,
        d_u: DVector<f64>,
        f_term: DMatrix<f64>,
        g_term: DVector<f64>,
        witness_x: DVector<f64>,
        witness_u: DVector<f64>,
    ) -> Result<Self> {
        let n = witness_x.len();
        let m = witness_u.len();
        check_dim("S_X columns", n, s_x.ncols())?;
        check_dim("d_X length", s_x.nrows(), d_x.len())?;
        check_dim("S_U columns", m, s_u.ncols())?;
        check_dim("d_U length", s_u.nrows(), d_u.len())?;
        check_dim("F_term columns", n, f_term.ncols())?;
        check_dim("g_term length", f_term.nrows(), g_term.len())?;
        let spec = Self {
            s_x,
            d_x,
            s_u,
            d_u,
            f_term,
            g_term,
            witness_x,
            witness_u,
        };
        let w = &spec.witness_x;
        if !satisfies(&spec.s_x, &spec.d_x, w) || !satisfies(&spec.f_term, &spec.g_term, w) {
            return Err(Error::InvalidArgument(
                "state witness violates the state or terminal polytope".into(),
            ));
        }
        if !satisfies(&spec.s_u, &spec.d_u, &spec.witness_u) {
            return Err(Error::InvalidArgument(
                "input witness violates the input polytope".into(),
            ));
        }
        Ok(spec)
    }

    /// Box constraints on states and inputs with a terminal box obtained by
    /// scaling the state box about its center by `terminal_scale`.
    pub fn from_boxes(state_bounds: &[Option<Bound>], input_bounds: &[Bound], terminal_scale: f64) -> Result<Self> {
        if !(terminal_scale > 0.0 && terminal_scale <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "terminal scale must lie in (0, 1], got {terminal_scale}"
            )));
        }
        for b in state_bounds.iter().flatten().chain(input_bounds) {
            if !(b.lo <= b.hi) {
                return Err(Error::InvalidArgument(format!("empty bound [{}, {}]", b.lo, b.hi)));
            }
        }
        let (s_x, d_x) = box_polytope(state_bounds);
        let inputs: Vec<Option<Bound>> = input_bounds.iter().copied().map(Some).collect();
        let (s_u, d_u) = box_polytope(&inputs);
        let term: Vec<Option<Bound>> = state_bounds
            .iter()
            .map(|b| b.map(|b| b.scaled(terminal_scale)))
            .collect();
        let (f_term, g_term) = box_polytope(&term);
        let witness_x = DVector::from_iterator(
            state_bounds.len(),
            state_bounds.iter().map(|b| b.map_or(0.0, |b| b.center())),
        );
        let witness_u = DVector::from_iterator(input_bounds.len(), input_bounds.iter().map(Bound::center));
        Self::new(s_x, d_x, s_u, d_u, f_term, g_term, witness_x, witness_u)
    }

    /// Same state/input constraints, different terminal polytope.
    pub fn with_terminal(&self, f_term: DMatrix<f64>, g_term: DVector<f64>) -> Result<Self> {
        Self::new(
            self.s_x.clone(),
            self.d_x.clone(),
            self.s_u.clone(),
            self.d_u.clone(),
            f_term,
            g_term,
            self.witness_x.clone(),
            self.witness_u.clone(),
        )
    }

    pub fn s_x(&self) -> &DMatrix<f64> {
        &self.s_x
    }
    pub fn d_x(&self) -> &DVector<f64> {
        &self.d_x
    }
    pub fn s_u(&self) -> &DMatrix<f64> {
        &self.s_u
    }
    pub fn d_u(&self) -> &DVector<f64> {
        &self.d_u
    }
    pub fn f_term(&self) -> &DMatrix<f64> {
        &self.f_term
    }
    pub fn g_term(&self) -> &DVector<f64> {
        &self.g_term
    }
    pub fn witness_x(&self) -> &DVector<f64> {
        &self.witness_x
    }
    pub fn n_sys(&self) -> usize {
        self.s_x.ncols()
    }
    pub fn m_sys(&self) -> usize {
        self.s_u.ncols()
    }
    pub fn m_x(&self) -> usize {
        self.s_x.nrows()
    }
    pub fn m_u(&self) -> usize {
        self.s_u.nrows()
    }
    pub fn m_f(&self) -> usize {
        self.f_term.nrows()
    }

    /// True when `x` lies outside the state polytope scaled by `factor`
    /// about the witness point.
    pub fn state_outside_scaled(&self, x: &DVector<f64>, factor: f64) -> bool {
        let sw = &self.s_x * &self.witness_x;
        let sx = &self.s_x * x;
        (0..self.m_x()).any(|i| sx[i] < sw[i] + factor * (self.d_x[i] - sw[i]))
    }
}

fn satisfies(s: &DMatrix<f64>, d: &DVector<f64>, x: &DVector<f64>) -> bool {
    (s * x - d).iter().all(|r| *r >= 0.0)
}

/// Violation indicator: true iff some state or input row is strictly violated.
/// Boundary contact does not count.
pub fn check_violation(x: &DVector<f64>, u: &DVector<f64>, spec: &SafetySpec) -> Result<bool> {
    check_dim("state", spec.n_sys(), x.len())?;
    check_dim("input", spec.m_sys(), u.len())?;
    let sx = &spec.s_x * x;
    let su = &spec.s_u * u;
    Ok(sx.iter().zip(spec.d_x.iter()).any(|(a, d)| a < d) || su.iter().zip(spec.d_u.iter()).any(|(a, d)| a < d))
}

/// Polytopic safe set `{x | G x <= c}` used by the certifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SafeSetDoc", into = "SafeSetDoc")]
pub struct SafeSet {
    g: DMatrix<f64>,
    c: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct SafeSetDoc {
    #[serde(rename = "G", with = "linalg::rows")]
    g: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    c: DVector<f64>,
}

impl TryFrom<SafeSetDoc> for SafeSet {
    type Error = Error;
    fn try_from(d: SafeSetDoc) -> Result<Self> {
        SafeSet::new(d.g, d.c)
    }
}

impl From<SafeSet> for SafeSetDoc {
    fn from(s: SafeSet) -> Self {
        Self { g: s.g, c: s.c }
    }
}

impl SafeSet {
    /// Validates that the set is nonempty and bounded by enumerating vertices.
    pub fn new(g: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        check_dim("safe set c", g.nrows(), c.len())?;
        if !polytope::is_bounded(&g) {
            return Err(Error::DegenerateSet("safe set is unbounded".into()));
        }
        if polytope::vertices(&g, &c).is_empty() {
            return Err(Error::DegenerateSet("safe set is empty".into()));
        }
        Ok(Self { g, c })
    }

    /// `lo <= x <= hi` as `G x <= c`.
    pub fn from_box(bounds: &[Bound]) -> Result<Self> {
        let opt: Vec<Option<Bound>> = bounds.iter().copied().map(Some).collect();
        let (s, d) = box_polytope(&opt);
        Self::new(-s, -d)
    }

    /// `{x | G x <= factor * c}`, i.e. the set scaled about the origin.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.g.clone(), &self.c * factor)
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }
    pub fn m_g(&self) -> usize {
        self.g.nrows()
    }
    pub fn n_sys(&self) -> usize {
        self.g.ncols()
    }

    pub fn vertices(&self) -> Vec<DVector<f64>> {
        polytope::vertices(&self.g, &self.c)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (&self.g * x - &self.c).iter().all(|r| *r <= tol)
    }

    /// `max_i (G_i x - c_i)`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.g * x - &self.c).max()
    }
}

/// Physical parameters of the cart-pole plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub m_c: f64,
    pub m_p: f64,
    pub l: f64,
    pub dt: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            m_c: 1.0,
            m_p: 0.1,
            l: 0.55,
            dt: 0.1,
        }
    }
}

/// How the true plant evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    Linear,
    Cartpole(CartpoleParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    #[default]
    ForwardEuler,
    /// Zero-order-hold via the matrix exponential.
    Exact,
}

/// Jacobian of the cart-pole dynamics at the upright equilibrium, discretized
/// with forward Euler. State order is `[p_x, p_x_dot, theta, theta_dot]`.
pub fn linearize_cartpole(m_c: f64, m_p: f64, l: f64, dt: f64) -> Result<LtiModel> {
    linearize_cartpole_with(&CartpoleParams { m_c, m_p, l, dt }, Discretization::ForwardEuler)
}

pub fn linearize_cartpole_with(p: &CartpoleParams, disc: Discretization) -> Result<LtiModel> {
    if !(p.m_c > 0.0 && p.m_p > 0.0 && p.l > 0.0) {
        return Err(Error::InvalidArgument(
            "cartpole masses and length must be positive".into(),
        ));
    }
    if !(p.dt >= 0.0) {
        return Err(Error::InvalidArgument("time step must be nonnegative".into()));
    }
    // M(0) [p_dd; th_dd] = [u; m_p g l th]  with det M(0) = m_c m_p l^2.
    let mut ac = DMatrix::zeros(4, 4);
    ac[(0, 1)] = 1.0;
    ac[(2, 3)] = 1.0;
    ac[(1, 2)] = -p.m_p * GRAVITY / p.m_c;
    ac[(3, 2)] = (p.m_c + p.m_p) * GRAVITY / (p.m_c * p.l);
    let mut bc = DMatrix::zeros(4, 1);
    bc[(1, 0)] = 1.0 / p.m_c;
    bc[(3, 0)] = -1.0 / (p.m_c * p.l);

    let (a, b) = match disc {
        Discretization::ForwardEuler => (DMatrix::identity(4, 4) + &ac * p.dt, &bc * p.dt),
        Discretization::Exact => {
            let mut aug = DMatrix::zeros(5, 5);
            aug.view_mut((0, 0), (4, 4)).copy_from(&(&ac * p.dt));
            aug.view_mut((0, 4), (4, 1)).copy_from(&(&bc * p.dt));
            let e = aug.exp();
            (e.view((0, 0), (4, 4)).into_owned(), e.view((0, 4), (4, 1)).into_owned())
        }
    };
    LtiModel::new(a, b)
}

/// A benchmark plant with its nominal model and safety specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSystem {
    pub name: String,
    pub model: LtiModel,
    pub spec: SafetySpec,
    pub state_bounds: Vec<Option<Bound>>,
    pub input_bounds: Vec<Bound>,
    pub episode_length: usize,
    pub plant: Plant,
}

impl BenchmarkSystem {
    pub fn nonlinear(&self) -> bool {
        matches!(self.plant, Plant::Cartpole(_))
    }

    pub fn n_sys(&self) -> usize {
        self.model.n_sys()
    }

    pub fn m_sys(&self) -> usize {
        self.model.m_sys()
    }

    /// Safe set `{x | G x <= c}` covering the constrained state box; only
    /// meaningful when every state coordinate is bounded.
    pub fn state_box_set(&self) -> Result<SafeSet> {
        let bounds: Option<Vec<Bound>> = self.state_bounds.iter().copied().collect();
        let bounds =
            bounds.ok_or_else(|| Error::DegenerateSet(format!("{} has unbounded state coordinates", self.name)))?;
        SafeSet::from_box(&bounds)
    }

    /// Input box as a vector of bounds for sampling.
    pub fn input_box(&self) -> &[Bound] {
        &self.input_bounds
    }
}

/// Fraction of the state box used for the terminal set of the baseline filter.
pub const DEFAULT_TERMINAL_SCALE: f64 = 0.5;

pub const SYSTEM_NAMES: [&str; 3] = ["double_integrator", "quadruple_tank", "cartpole"];

pub fn load_benchmark(name: &str) -> Result<BenchmarkSystem> {
    let (model, state_bounds, input_bounds, episode_length, plant) = match name {
        "double_integrator" => (
            LtiModel::new(
                linalg::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]),
                linalg::from_rows(&[&[0.0], &[1.0]]),
            )?,
            vec![Some(Bound::new(-0.5, 0.5)); 2],
            vec![Bound::new(-0.5, 0.5)],
            100,
            Plant::Linear,
        ),
        "quadruple_tank" => (
            LtiModel::new(
                linalg::from_rows(&[
                    &[0.98, 0.0, 0.04, 0.0],
                    &[0.0, 0.99, 0.0, 0.03],
                    &[0.0, 0.0, 0.96, 0.0],
                    &[0.0, 0.0, 0.0, 0.97],
                ]),
                linalg::from_rows(&[&[0.83, 0.0], &[0.0, 0.62], &[0.0, 0.47], &[0.3, 0.0]]),
            )?,
            vec![Some(Bound::new(0.0, 20.0)); 4],
            vec![Bound::new(-1.0, 1.0); 2],
            100,
            Plant::Linear,
        ),
        "cartpole" => {
            let params = CartpoleParams::default();
            (
                linearize_cartpole(params.m_c, params.m_p, params.l, params.dt)?,
                vec![Some(Bound::new(-2.0, 2.0)), None, Some(Bound::new(-0.5, 0.5)), None],
                vec![Bound::new(-10.0, 10.0)],
                300,
                Plant::Cartpole(params),
            )
        }
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    let spec = SafetySpec::from_boxes(&state_bounds, &input_bounds, DEFAULT_TERMINAL_SCALE)?;
    let system = BenchmarkSystem {
        name: name.to_string(),
        model,
        spec,
        state_bounds,
        input_bounds,
        episode_length,
        plant,
    };
    validate_terminal_set(&system);
    Ok(system)
}

/// One-step containment check of the terminal box under the default LQR
/// terminal controller. Returns whether the check passed; logs a warning
/// otherwise.
pub fn validate_terminal_set(system: &BenchmarkSystem) -> bool {
    let term: Option<Vec<Bound>> = system
        .state_bounds
        .iter()
        .map(|b| b.map(|b| b.scaled(DEFAULT_TERMINAL_SCALE)))
        .collect();
    let Some(term) = term else {
        log::warn!(
            "{}: terminal set is unbounded in some coordinates; invariance not validated",
            system.name
        );
        return false;
    };
    let n = system.n_sys();
    let m = system.m_sys();
    let k = match crate::envs::lqr_gain(&system.model, &DMatrix::identity(n, n), &DMatrix::identity(m, m)) {
        Ok(k) => k,
        Err(e) => {
            log::warn!("{}: terminal controller unavailable: {e}", system.name);
            return false;
        }
    };
    let set = match SafeSet::from_box(&term) {
        Ok(s) => s,
        Err(_) => return false,
    };
    let input_ok = |u: &DVector<f64>| {
        u.iter()
            .zip(&system.input_bounds)
            .all(|(v, b)| *v >= b.lo && *v <= b.hi)
    };
    let ok = set.vertices().iter().all(|v| {
        let u = -(&k * v);
        let next = system.model.step(v, &u);
        input_ok(&u) && set.contains(&next, 1e-12)
    });
    if !ok {
        log::warn!(
            "{}: scaled terminal box is not invariant under the LQR terminal controller",
            system.name
        );
    }
    ok
}

/// User-defined LTI plant description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub state_bounds: Vec<Option<Bound>>,
    pub input_bounds: Vec<Bound>,
    pub episode_length: usize,
}

impl ModelDocument {
    pub fn into_system(self) -> Result<BenchmarkSystem> {
        let a = linalg::rows::to_matrix(&self.a).map_err(Error::Parse)?;
        let b = linalg::rows::to_matrix(&self.b).map_err(Error::Parse)?;
        let model = LtiModel::new(a, b)?;
        check_dim("state_bounds", model.n_sys(), self.state_bounds.len())?;
        check_dim("input_bounds", model.m_sys(), self.input_bounds.len())?;
        if self.episode_length == 0 {
            return Err(Error::InvalidArgument("episode_length must be positive".into()));
        }
        let spec = SafetySpec::from_boxes(&self.state_bounds, &self.input_bounds, DEFAULT_TERMINAL_SCALE)?;
        Ok(BenchmarkSystem {
            name: self.name.unwrap_or_else(|| "custom".into()),
            model,
            spec,
            state_bounds: self.state_bounds,
            input_bounds: self.input_bounds,
            episode_length: self.episode_length,
            plant: Plant::Linear,
        })
    }
}

pub fn load_model_json(path: impl AsRef<Path>) -> Result<BenchmarkSystem> {
    let text = std::fs::read_to_string(path)?;
    let doc: ModelDocument = serde_json::from_str(&text)?;
    doc.into_system()
}

/// Resolves a builtin name or a path to a JSON plant description.
pub fn resolve_system(name_or_path: &str) -> Result<BenchmarkSystem> {
    if SYSTEM_NAMES.contains(&name_or_path) {
        load_benchmark(name_or_path)
    } else if name_or_path.ends_with(".json") {
        load_model_json(name_or_path)
    } else {
        Err(Error::UnknownSystem(name_or_path.to_string()))
    }
}
