//! Brownian paths and semi-implicit Euler–Maruyama stepping of the modal system
//!
//! ```text
//! dy_i = (-μ_i y_i + a1 y_i + a2 z_i + (M u)_i - F_i) dt + (b1 y_i + b2 z_i) dW
//! dz_i = (-λ_i z_i + a3 y_i + a4 z_i) dt + b3 z_i dW
//! ```
//!
//! where `M` is the mass matrix of the control region. The diagonal terms
//! `-μ_i`, `-λ_i` are implicit; couplings, forcing and noise are explicit.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{region_mass_matrix, sobolev_sq, ModalState, SpectralBasis};
use crate::error::{Error, Result};
use crate::nonlinear::Cutoff;
use crate::stats;
use crate::weights::SourceWeightParams;

/// A bounded deterministic function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFunction {
    Constant(f64),
    Sinusoid { mean: f64, amplitude: f64, frequency: f64 },
}

impl TimeFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFunction::Constant(c) => c,
            TimeFunction::Sinusoid {
                mean,
                amplitude,
                frequency,
            } => mean + amplitude * (std::f64::consts::TAU * frequency * t).sin(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match *self {
            TimeFunction::Constant(c) => c.abs(),
            TimeFunction::Sinusoid { mean, amplitude, .. } => mean.abs() + amplitude.abs(),
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            TimeFunction::Constant(_) => true,
            TimeFunction::Sinusoid { amplitude, .. } => amplitude == 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            TimeFunction::Constant(c) => c.is_finite(),
            TimeFunction::Sinusoid {
                mean,
                amplitude,
                frequency,
            } => mean.is_finite() && amplitude.is_finite() && frequency.is_finite(),
        }
    }
}

impl Default for TimeFunction {
    fn default() -> Self {
        TimeFunction::Constant(0.0)
    }
}

/// Lower-order couplings; the default keeps only the `y → z` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Couplings {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl Default for Couplings {
    fn default() -> Self {
        Self {
            a1: 0.0,
            a2: 0.0,
            a3: 1.0,
            a4: 0.0,
        }
    }
}

/// Noise coefficients, nonlinearity switch and couplings.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SystemCoefficients {
    #[serde(default)]
    pub b1: TimeFunction,
    #[serde(default)]
    pub b2: TimeFunction,
    #[serde(default)]
    pub b3: TimeFunction,
    #[serde(default)]
    pub nonlinear: bool,
    #[serde(default)]
    pub couplings: Couplings,
}

impl SystemCoefficients {
    pub fn constant(b1: f64, b2: f64, b3: f64) -> Self {
        Self {
            b1: TimeFunction::Constant(b1),
            b2: TimeFunction::Constant(b2),
            b3: TimeFunction::Constant(b3),
            ..Self::default()
        }
    }

    /// `σ = 1 + 4 Σ ‖b_i‖²_∞`.
    pub fn sigma(&self) -> f64 {
        1.0 + 4.0
            * [self.b1, self.b2, self.b3]
                .iter()
                .map(|b| b.sup_norm().powi(2))
                .sum::<f64>()
    }

    pub fn noise_at(&self, t: f64) -> (f64, f64, f64) {
        (self.b1.eval(t), self.b2.eval(t), self.b3.eval(t))
    }

    pub fn is_time_invariant(&self) -> bool {
        self.b1.is_constant() && self.b2.is_constant() && self.b3.is_constant()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("b1", self.b1), ("b2", self.b2), ("b3", self.b3)] {
            if !b.is_finite() {
                return Err(Error::param(format!("coefficients.{name}"), "must be finite"));
            }
        }
        let c = self.couplings;
        if ![c.a1, c.a2, c.a3, c.a4].iter().all(|v| v.is_finite()) {
            return Err(Error::param("coefficients.couplings", "must be finite"));
        }
        Ok(())
    }
}

/// Seeded Gaussian increments on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub dt: f64,
    pub seed: u64,
    pub path_index: u64,
    pub increments: Vec<f64>,
}

impl BrownianPath {
    /// Path `path_index` of the ensemble seeded by `seed`; each path uses its
    /// own ChaCha stream so paths are independent of evaluation order.
    pub fn generate(seed: u64, path_index: u64, dt: f64, n_steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_index);
        let s = dt.sqrt();
        let increments = (0..n_steps)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                s * g
            })
            .collect();
        Self {
            dt,
            seed,
            path_index,
            increments,
        }
    }

    pub fn zero(dt: f64, n_steps: usize) -> Self {
        Self {
            dt,
            seed: 0,
            path_index: 0,
            increments: vec![0.0; n_steps],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }

    /// Sum consecutive increments, giving the same path on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Self {
        let increments = self.increments.chunks(factor).map(|c| c.iter().sum()).collect();
        Self {
            dt: self.dt * factor as f64,
            increments,
            ..*self
        }
    }

    /// Increments of `self` before `step`, of `other` from `step` on.
    pub fn splice(&self, other: &Self, step: usize) -> Self {
        let mut increments = self.increments[..step].to_vec();
        increments.extend_from_slice(&other.increments[step..]);
        Self { increments, ..*self }
    }

    /// Increments for steps `[from, from + len)`, padded with zeros.
    pub fn window(&self, from: usize, len: usize) -> &[f64] {
        let end = (from + len).min(self.increments.len());
        &self.increments[from.min(end)..end]
    }
}

/// Basis, coefficients and control region bundled for stepping.
#[derive(Debug, Clone)]
pub struct Model {
    pub basis: SpectralBasis,
    pub coeffs: SystemCoefficients,
    pub region: (f64, f64),
    mass: nalgebra::DMatrix<f64>,
}

impl Model {
    pub fn new(n_modes: usize, coeffs: SystemCoefficients, region: (f64, f64)) -> Result<Self> {
        let basis = SpectralBasis::new(n_modes)?;
        coeffs.validate()?;
        let (a, b) = region;
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::param(
                "region",
                format!("({a}, {b}) must be a nonempty subinterval of [0, 1]"),
            ));
        }
        Ok(Self {
            mass: region_mass_matrix(n_modes, a, b),
            basis,
            coeffs,
            region,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.basis.n_modes()
    }

    /// Mass matrix `∫_{D₀} φ_i φ_j`.
    pub fn mass(&self) -> &nalgebra::DMatrix<f64> {
        &self.mass
    }

    /// Modal forcing `χ_{D₀} h` for a control `h = Σ_{j ≤ k} u_j φ_j`.
    pub fn inject(&self, u: &DVector<f64>) -> DVector<f64> {
        let k = u.len();
        self.mass.columns(0, k) * u
    }

    /// `∫_{D₀} |h|²` for the control `h = Σ u_j φ_j`.
    pub fn control_energy(&self, u: &DVector<f64>) -> f64 {
        let k = u.len();
        let mu = self.mass.view((0, 0), (k, k)) * u;
        u.dot(&mu)
    }

    /// One step with an explicit modal `y`-forcing `g` (already including
    /// control injection and any source or nonlinearity, with sign).
    pub fn advance(&self, x: &ModalState, t: f64, dt: f64, g: Option<&DVector<f64>>, dw: f64) -> ModalState {
        let (b1, b2, b3) = self.coeffs.noise_at(t);
        let c = self.coeffs.couplings;
        let n = x.n_modes();
        let mut out = ModalState::zeros(n);
        let lambda = self.basis.lambda();
        let mu = self.basis.mu();
        for k in 0..n {
            let (y, z) = (x.y[k], x.z[k]);
            let gk = g.map_or(0.0, |g| g[k]);
            let ry = y + dt * (c.a1 * y + c.a2 * z + gk) + (b1 * y + b2 * z) * dw;
            let rz = z + dt * (c.a3 * y + c.a4 * z) + b3 * z * dw;
            out.y[k] = ry / (1.0 + mu[k] * dt);
            out.z[k] = rz / (1.0 + lambda[k] * dt);
        }
        out
    }
}

fn step_index(t: f64, dt: f64) -> usize {
    (t / dt).round().max(0.0) as usize
}

/// Advance the linear controlled system by one step.
///
/// `control` holds the leading modal coefficients of the control field.
pub fn step_linear(
    model: &Model,
    state: &ModalState,
    t: f64,
    dt: f64,
    control: &DVector<f64>,
    dw: f64,
) -> Result<ModalState> {
    let g = model.inject(control);
    let next = model.advance(state, t, dt, Some(&g), dw);
    if !next.is_finite() {
        return Err(Error::NonFinite {
            step: step_index(t, dt),
        });
    }
    Ok(next)
}

/// As [`step_linear`] with the truncated nonlinearity `-φ_R(X_t) y·y_x` in the drift.
pub fn step_semilinear(
    model: &Model,
    state: &ModalState,
    t: f64,
    dt: f64,
    control: &DVector<f64>,
    dw: f64,
    cutoff: &Cutoff,
    running_xt: f64,
) -> Result<ModalState> {
    let mut g = model.inject(control);
    let f = crate::nonlinear::f_r_eval(state, running_xt, cutoff);
    g -= f;
    let next = model.advance(state, t, dt, Some(&g), dw);
    if !next.is_finite() {
        return Err(Error::NonFinite {
            step: step_index(t, dt),
        });
    }
    Ok(next)
}

/// States, applied controls and per-step control energy along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t0: f64,
    pub dt: f64,
    /// `n_steps + 1` states, the first being the initial state.
    pub states: Vec<ModalState>,
    /// Control coefficients applied on each step (empty when uncontrolled).
    pub controls: Vec<DVector<f64>>,
    /// `dt ∫_{D₀} |h|²` for each step.
    pub cost_increments: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn new(t0: f64, dt: f64, initial: ModalState) -> Self {
        Self {
            t0,
            dt,
            states: vec![initial],
            controls: Vec::new(),
            cost_increments: Vec::new(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn final_state(&self) -> &ModalState {
        self.states.last().expect("record holds at least the initial state")
    }

    /// Sequential sum of the per-step ledger.
    pub fn total_cost(&self) -> f64 {
        self.cost_increments.iter().sum()
    }

    pub fn push(&mut self, state: ModalState, control: DVector<f64>, cost: f64) {
        self.states.push(state);
        self.controls.push(control);
        self.cost_increments.push(cost);
    }

    /// CSV with a header row: time, y modes, z modes, cost increment.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].n_modes();
        let mut out = String::from("t");
        for k in 1..=n {
            out.push_str(&format!(",y{k}"));
        }
        for k in 1..=n {
            out.push_str(&format!(",z{k}"));
        }
        out.push_str(",cost\n");
        for (i, s) in self.states.iter().enumerate() {
            out.push_str(&crate::report::fmt_num(self.time(i)));
            for v in s.y.iter().chain(s.z.iter()) {
                out.push(',');
                out.push_str(&crate::report::fmt_num(*v));
            }
            out.push(',');
            let c = if i == 0 { 0.0 } else { self.cost_increments[i - 1] };
            out.push_str(&crate::report::fmt_num(c));
            out.push('\n');
        }
        out
    }
}

/// Feedback or open-loop control law used by [`simulate`]: given the step
/// index and the current state, return the control coefficients.
pub trait ControlLaw: Sync {
    fn control(&self, step: usize, state: &ModalState) -> DVector<f64>;
}

/// No control.
pub struct Uncontrolled;

impl ControlLaw for Uncontrolled {
    fn control(&self, _step: usize, _state: &ModalState) -> DVector<f64> {
        DVector::zeros(0)
    }
}

/// Replays recorded controls.
pub struct Replay<'a>(pub &'a [DVector<f64>]);

impl ControlLaw for Replay<'_> {
    fn control(&self, step: usize, _state: &ModalState) -> DVector<f64> {
        self.0.get(step).cloned().unwrap_or_else(|| DVector::zeros(0))
    }
}

/// Simulate the linear system from `t0` over the steps of `path`, with an
/// optional modal source `F` entering the `y` drift as `-F`.
pub fn simulate(
    model: &Model,
    initial: &ModalState,
    t0: f64,
    path: &BrownianPath,
    law: &dyn ControlLaw,
    source: Option<&dyn Fn(usize) -> DVector<f64>>,
) -> Result<TrajectoryRecord> {
    let dt = path.dt;
    let mut rec = TrajectoryRecord::new(t0, dt, initial.clone());
    let mut x = initial.clone();
    for (n, &dw) in path.increments.iter().enumerate() {
        let t = t0 + n as f64 * dt;
        let u = law.control(n, &x);
        let mut g = model.inject(&u);
        if let Some(f) = source {
            g -= f(n);
        }
        x = model.advance(&x, t, dt, Some(&g), dw);
        if !x.is_finite() {
            return Err(Error::NonFinite { step: n });
        }
        let cost = dt * model.control_energy(&u);
        rec.push(x.clone(), u, cost);
    }
    Ok(rec)
}

/// The four pieces of the weighted trajectory norm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct XtParts {
    pub sup_y_h2: f64,
    pub sup_z_h1: f64,
    pub int_y_h4: f64,
    pub int_z_h2: f64,
    /// The weight vanished while the state did not.
    pub blow_up: bool,
}

impl XtParts {
    pub fn value_sq(&self) -> f64 {
        self.sup_y_h2 + self.sup_z_h1 + self.int_y_h4 + self.int_z_h2
    }

    pub fn value(&self) -> f64 {
        self.value_sq().sqrt()
    }
}

/// `‖v‖²_{H^s} / w²` computed as `exp(ln‖v‖² - 2 ln w)`.
pub(crate) fn weighted_sq(norm_sq: f64, log_weight: f64) -> f64 {
    if norm_sq == 0.0 {
        0.0
    } else if log_weight == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        (norm_sq.ln() - 2.0 * log_weight).exp()
    }
}

/// Running evaluation of the `X_t` norm along a trajectory.
#[derive(Debug, Clone)]
pub struct XtAccumulator {
    lambda: Vec<f64>,
    weights: SourceWeightParams,
    parts: XtParts,
    prev: Option<(f64, f64, f64)>,
}

impl XtAccumulator {
    pub fn new(basis: &SpectralBasis, weights: SourceWeightParams) -> Self {
        Self {
            lambda: basis.lambda().to_vec(),
            weights,
            parts: XtParts::default(),
            prev: None,
        }
    }

    pub fn push(&mut self, t: f64, x: &ModalState) {
        let lw = self.weights.log_rho_hat(self.weights.horizon - t);
        let l = &self.lambda;
        let sy = weighted_sq(sobolev_sq(x.y.as_slice(), l, 2), lw);
        let sz = weighted_sq(sobolev_sq(x.z.as_slice(), l, 1), lw);
        let iy = weighted_sq(sobolev_sq(x.y.as_slice(), l, 4), lw);
        let iz = weighted_sq(sobolev_sq(x.z.as_slice(), l, 2), lw);
        let p = &mut self.parts;
        p.sup_y_h2 = p.sup_y_h2.max(sy);
        p.sup_z_h1 = p.sup_z_h1.max(sz);
        if let Some((t_prev, iy_prev, iz_prev)) = self.prev {
            let h = t - t_prev;
            p.int_y_h4 += 0.5 * h * (iy + iy_prev);
            p.int_z_h2 += 0.5 * h * (iz + iz_prev);
        }
        if !(sy + sz + iy + iz).is_finite() {
            p.blow_up = true;
        }
        self.prev = Some((t, iy, iz));
    }

    pub fn parts(&self) -> XtParts {
        self.parts
    }

    pub fn value(&self) -> f64 {
        self.parts.value()
    }
}

/// `X_t` norm of a recorded trajectory up to time `t` (infinite on blow-up).
pub fn xt_norm(traj: &TrajectoryRecord, basis: &SpectralBasis, weights: &SourceWeightParams, t: f64) -> Result<f64> {
    xt_parts(traj, basis, weights, t).map(|p| p.value())
}

pub fn xt_parts(
    traj: &TrajectoryRecord,
    basis: &SpectralBasis,
    weights: &SourceWeightParams,
    t: f64,
) -> Result<XtParts> {
    let t_end = traj.time(traj.n_steps());
    if t < traj.t0 - 1e-12 || t > t_end + 1e-12 {
        return Err(Error::param(
            "t",
            format!("{t} lies outside the recorded range [{}, {t_end}]", traj.t0),
        ));
    }
    let mut acc = XtAccumulator::new(basis, *weights);
    for (n, s) in traj.states.iter().enumerate() {
        let tn = traj.time(n);
        if tn > t + 1e-12 {
            break;
        }
        acc.push(tn, s);
    }
    Ok(acc.parts())
}

/// Result of a free-decay ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    /// Fitted rate `r` in `E(‖y‖² + ‖z‖²) ≈ C e^{-r t}`.
    pub rate: f64,
    /// `γ_{k+1} = 2λ_{k+1} - σ`.
    pub bound: f64,
    pub sigma: f64,
    pub paths: usize,
    pub warning: Option<String>,
    pub times: Vec<f64>,
    pub mean_energy: Vec<f64>,
}

/// Measure the free decay rate of data whose first `k` modes vanish.
///
/// The rate is fitted on the last three quarters of `[0, horizon]`.
pub fn free_decay_rate(
    model: &Model,
    initial: &ModalState,
    k: usize,
    paths: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<DecayReport> {
    if k >= model.n_modes() {
        return Err(Error::param("k", "band index must be below n_modes"));
    }
    if (0..k).any(|i| initial.y[i] != 0.0 || initial.z[i] != 0.0) {
        return Err(Error::param("initial", format!("first {k} modes must vanish")));
    }
    if !(dt > 0.0 && horizon > dt) {
        return Err(Error::param("dt", "need 0 < dt < horizon"));
    }
    let n_steps = (horizon / dt).round() as usize;
    let energies = stats::run_paths(paths.max(1), |p| -> Result<Vec<f64>> {
        let path = BrownianPath::generate(seed, p as u64, dt, n_steps);
        let rec = simulate(model, initial, 0.0, &path, &Uncontrolled, None)?;
        Ok(rec.states.iter().map(|s| s.energy()).collect())
    });
    let energies: Vec<Vec<f64>> = energies.into_iter().collect::<Result<_>>()?;
    let mean_energy: Vec<f64> = (0..=n_steps)
        .map(|n| energies.iter().map(|e| e[n]).sum::<f64>() / energies.len() as f64)
        .collect();
    let times: Vec<f64> = (0..=n_steps).map(|n| n as f64 * dt).collect();
    let start = n_steps / 4;
    let (xs, ys): (Vec<f64>, Vec<f64>) = times[start..]
        .iter()
        .zip(&mean_energy[start..])
        .filter(|(_, e)| **e > 0.0)
        .map(|(t, e)| (*t, e.ln()))
        .unzip();
    let fit = stats::linear_fit(&xs, &ys).ok_or_else(|| Error::param("initial", "energy vanished; nothing to fit"))?;
    let sigma = model.coeffs.sigma();
    let warning = (paths < 50).then(|| format!("only {paths} paths; the fitted rate may be unstable"));
    Ok(DecayReport {
        rate: -fit.slope,
        bound: 2.0 * model.basis.lambda()[k] - sigma,
        sigma,
        paths,
        warning,
        times,
        mean_energy,
    })
}
