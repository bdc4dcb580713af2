//! Lebeau–Robbiano null control of the linear system.
//!
//! On each dyadic interval the low band `μ_i ≤ r_j` is steered towards zero
//! during the first half by penalised linear-quadratic feedback, then the
//! system evolves freely during the second half. Penalties tighten as
//! `ε_j = ε₀ ρ^{-j}`.

mod riccati;
mod schedule;

pub use riccati::{
    band_noise, riccati_backward, riccati_discrete, DiscreteLq, LqProblem, RiccatiSolution, CONTINUOUS_MAX_DIM,
};
pub use schedule::{lr_schedule, LrInterval, LrSchedule};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::ModalState;
use crate::error::{Error, Result};
use crate::sde::{BrownianPath, ControlLaw, Model};
use crate::stats::{self, LinearFit};

/// Feedback gains on consecutive steps, acting on the leading `band` modes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySegment {
    pub start_step: usize,
    pub band: usize,
    pub gains: Vec<DMatrix<f64>>,
}

impl PolicySegment {
    pub fn end_step(&self) -> usize {
        self.start_step + self.gains.len()
    }
}

/// Adapted control: at step `n` the control is `u = -K_n [y_{1..k}; z_{1..k}]`
/// when a segment covers `n`, and zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolicy {
    pub dt: f64,
    pub segments: Vec<PolicySegment>,
}

impl ControlPolicy {
    pub fn empty(dt: f64) -> Self {
        Self {
            dt,
            segments: Vec::new(),
        }
    }

    /// Append segments, shifting their steps by `offset`.
    pub fn glue(&mut self, other: ControlPolicy, offset: usize) {
        for mut s in other.segments {
            s.start_step += offset;
            self.segments.push(s);
        }
        self.segments.sort_by_key(|s| s.start_step);
    }

    fn segment_at(&self, step: usize) -> Option<&PolicySegment> {
        let i = self.segments.partition_point(|s| s.start_step <= step);
        let s = self.segments.get(i.checked_sub(1)?)?;
        (step < s.end_step()).then_some(s)
    }

    pub fn control(&self, step: usize, x: &ModalState) -> DVector<f64> {
        match self.segment_at(step) {
            Some(s) => {
                let k = s.band;
                let mut xb = DVector::zeros(2 * k);
                xb.rows_mut(0, k).copy_from(&x.y.rows(0, k));
                xb.rows_mut(k, k).copy_from(&x.z.rows(0, k));
                -(&s.gains[step - s.start_step] * xb)
            }
            None => DVector::zeros(0),
        }
    }
}

impl ControlLaw for ControlPolicy {
    fn control(&self, step: usize, state: &ModalState) -> DVector<f64> {
        ControlPolicy::control(self, step, state)
    }
}

/// Penalised kill of the first `band` modes over `n_active` steps starting
/// at time `t_start`, with terminal weight `(1/ε) I`.
pub fn band_segment(
    model: &Model,
    band: usize,
    t_start: f64,
    n_active: usize,
    dt: f64,
    epsilon: f64,
) -> Result<PolicySegment> {
    if band > model.n_modes() {
        return Err(Error::param(
            "band",
            format!("{band} modes requested but only {} simulated", model.n_modes()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", "must be positive"));
    }
    if band == 0 || n_active == 0 {
        return Ok(PolicySegment {
            start_step: 0,
            band: 0,
            gains: Vec::new(),
        });
    }
    let problem = LqProblem::band(model, band, t_start, epsilon, n_active as f64 * dt);
    let lq = if model.coeffs.is_time_invariant() {
        riccati_discrete(&problem, dt, n_active, None)?
    } else {
        let noise = |n: usize| band_noise(model, band, t_start + n as f64 * dt);
        riccati_discrete(&problem, dt, n_active, Some(&noise))?
    };
    Ok(PolicySegment {
        start_step: 0,
        band,
        gains: lq.gains,
    })
}

/// Continuous Riccati solution for the first `band` modes (oracle and diagnostics).
pub fn riccati_backward_band(model: &Model, band: usize, tau: f64, epsilon: f64) -> Result<RiccatiSolution> {
    if !model.coeffs.is_time_invariant() {
        return Err(Error::param("coefficients", "continuous solver needs constant b_i"));
    }
    let problem = LqProblem::band(model, band, 0.0, epsilon, tau);
    riccati_backward(&problem, 1e-10, epsilon)
}

/// Outcome of one control-then-decay interval on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialControl {
    /// Gains indexed from the interval start.
    pub policy: ControlPolicy,
    pub mid_state: ModalState,
    pub end_state: ModalState,
    /// `∫∫_{D₀} |h|²` over the interval.
    pub cost: f64,
}

fn steps(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// Control on the first half of `interval`, free decay on the second half.
///
/// `path` must cover the interval's steps.
pub fn partial_spectral_control(
    model: &Model,
    x0: &ModalState,
    interval: &LrInterval,
    epsilon: f64,
    path: &BrownianPath,
) -> Result<PartialControl> {
    let dt = path.dt;
    let n_total = steps(interval.end, dt) - steps(interval.start, dt);
    let n_active = steps(interval.start + 0.5 * interval.tau, dt) - steps(interval.start, dt);
    if path.n_steps() < n_total {
        return Err(Error::param("path", "too short for the interval"));
    }
    let seg = band_segment(model, interval.band, interval.start, n_active, dt, epsilon)?;
    let policy = ControlPolicy {
        dt,
        segments: vec![seg],
    };
    let mut x = x0.clone();
    let mut mid = x0.clone();
    let mut cost = 0.0;
    for n in 0..n_total {
        if n == n_active {
            mid = x.clone();
        }
        let u = policy.control(n, &x);
        cost += dt * model.control_energy(&u);
        x = crate::sde::step_linear(model, &x, interval.start + n as f64 * dt, dt, &u, path.increments[n])?;
    }
    if n_active == n_total {
        mid = x.clone();
    }
    Ok(PartialControl {
        policy,
        mid_state: mid,
        end_state: x,
        cost,
    })
}

/// Settings of a Lebeau–Robbiano run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    pub horizon: f64,
    pub beta: f64,
    pub epsilon0: f64,
    /// `ε_j = ε₀ / ratio^j`.
    pub epsilon_ratio: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    /// How many times `β` may double before the synthesis is declared failed.
    pub max_doublings: u32,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            beta: std::f64::consts::PI.powi(2),
            epsilon0: 1e-12,
            epsilon_ratio: 4.0,
            dt: 1e-4,
            paths: 200,
            seed: 1,
            max_doublings: 6,
        }
    }
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::param("horizon", "must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::param("beta", "must be positive"));
        }
        if !(self.epsilon0 > 0.0) {
            return Err(Error::param("epsilon0", "must be positive"));
        }
        if !(self.epsilon_ratio >= 1.0) {
            return Err(Error::param("epsilon_ratio", "must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt < self.horizon) {
            return Err(Error::param("dt", "need 0 < dt < horizon"));
        }
        if self.paths == 0 {
            return Err(Error::param("paths", "must be positive"));
        }
        Ok(())
    }

    pub fn epsilon(&self, j: usize) -> f64 {
        self.epsilon0 / self.epsilon_ratio.powi(j as i32)
    }
}

/// Ensemble statistics of one interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalReport {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub tau: f64,
    pub r: f64,
    pub band: usize,
    pub epsilon: f64,
    /// `E(‖y‖² + ‖z‖²)` at the interval end.
    pub energy_end: f64,
    /// Band part of the energy at the end of the controlled half.
    pub band_energy_mid: f64,
    /// Band part of the energy at the interval start.
    pub band_energy_start: f64,
    /// `E ∫∫_{D₀} |h|²` over the interval.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrReport {
    pub beta: f64,
    pub doublings: u32,
    /// Consecutive interval-end energies decrease from the second interval on.
    pub contracting: bool,
    pub paths: usize,
    pub dt: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub tail_start: f64,
    pub intervals: Vec<IntervalReport>,
    /// Ensemble mean of each step's `dt ∫_{D₀} |h|²`.
    pub cost_ledger: Vec<f64>,
    /// Sequential sum of `cost_ledger`.
    pub total_cost: f64,
    pub note: String,
}

/// Result of [`lebeau_robbiano_synthesize`].
#[derive(Debug, Clone)]
pub struct LrOutcome {
    pub report: LrReport,
    pub policy: ControlPolicy,
}

/// Build the glued policy for a schedule.
pub fn lr_policy(model: &Model, schedule: &LrSchedule, cfg: &LrConfig) -> Result<ControlPolicy> {
    let dt = cfg.dt;
    let mut policy = ControlPolicy::empty(dt);
    for iv in &schedule.intervals {
        let s0 = steps(iv.start, dt);
        let n_active = steps(iv.start + 0.5 * iv.tau, dt) - s0;
        let seg = band_segment(model, iv.band, iv.start, n_active, dt, cfg.epsilon(iv.index))?;
        policy.glue(
            ControlPolicy {
                dt,
                segments: vec![seg],
            },
            s0,
        );
    }
    Ok(policy)
}

struct PathRun {
    energy_end: Vec<f64>,
    band_mid: Vec<f64>,
    band_start: Vec<f64>,
    costs: Vec<f64>,
    final_energy: f64,
}

fn band_energy(x: &ModalState, k: usize) -> f64 {
    x.y.rows(0, k).norm_squared() + x.z.rows(0, k).norm_squared()
}

/// Run the dyadic loop on an ensemble, doubling `β` until the interval-end
/// energies contract.
pub fn lebeau_robbiano_synthesize(model: &Model, x0: &ModalState, cfg: &LrConfig) -> Result<LrOutcome> {
    cfg.validate()?;
    if x0.n_modes() != model.n_modes() {
        return Err(Error::Dimension("initial state and model disagree on n_modes".into()));
    }
    let mut beta = cfg.beta;
    let mut doublings = 0;
    loop {
        let cfg_j = LrConfig { beta, ..*cfg };
        let (report, policy) = run_schedule(model, x0, &cfg_j, doublings)?;
        if report.contracting || doublings >= cfg.max_doublings {
            return Ok(LrOutcome { report, policy });
        }
        beta *= 2.0;
        doublings += 1;
    }
}

fn run_schedule(model: &Model, x0: &ModalState, cfg: &LrConfig, doublings: u32) -> Result<(LrReport, ControlPolicy)> {
    let schedule = lr_schedule(cfg.horizon, cfg.beta, &model.basis)?;
    let policy = lr_policy(model, &schedule, cfg)?;
    let dt = cfg.dt;
    let n_steps = steps(cfg.horizon, dt);
    let bounds: Vec<(usize, usize, usize, usize)> = schedule
        .intervals
        .iter()
        .map(|iv| {
            let s0 = steps(iv.start, dt);
            (s0, steps(iv.start + 0.5 * iv.tau, dt), steps(iv.end, dt), iv.band)
        })
        .collect();

    let runs = stats::run_paths(cfg.paths, |p| -> Result<PathRun> {
        let path = BrownianPath::generate(cfg.seed, p as u64, dt, n_steps);
        let mut x = x0.clone();
        let j_count = bounds.len();
        let mut run = PathRun {
            energy_end: vec![0.0; j_count],
            band_mid: vec![0.0; j_count],
            band_start: vec![0.0; j_count],
            costs: Vec::with_capacity(n_steps),
            final_energy: 0.0,
        };
        for n in 0..=n_steps {
            for (j, &(s0, sm, se, k)) in bounds.iter().enumerate() {
                if n == s0 {
                    run.band_start[j] = band_energy(&x, k);
                }
                if n == sm {
                    run.band_mid[j] = band_energy(&x, k);
                }
                if n == se {
                    run.energy_end[j] = x.energy();
                }
            }
            if n == n_steps {
                break;
            }
            let u = policy.control(n, &x);
            run.costs.push(dt * model.control_energy(&u));
            x = crate::sde::step_linear(model, &x, n as f64 * dt, dt, &u, path.increments[n])?;
        }
        run.final_energy = x.energy();
        Ok(run)
    });
    let runs: Vec<PathRun> = runs.into_iter().collect::<Result<_>>()?;
    let np = runs.len() as f64;
    let avg = |f: &dyn Fn(&PathRun) -> f64| runs.iter().map(f).sum::<f64>() / np;

    let cost_ledger: Vec<f64> = (0..n_steps)
        .map(|n| runs.iter().map(|r| r.costs[n]).sum::<f64>() / np)
        .collect();
    let total_cost: f64 = cost_ledger.iter().sum();
    let intervals: Vec<IntervalReport> = schedule
        .intervals
        .iter()
        .zip(&bounds)
        .enumerate()
        .map(|(j, (iv, &(s0, _, se, _)))| IntervalReport {
            index: iv.index,
            start: iv.start,
            end: iv.end,
            tau: iv.tau,
            r: iv.r,
            band: iv.band,
            epsilon: cfg.epsilon(iv.index),
            energy_end: avg(&|r| r.energy_end[j]),
            band_energy_mid: avg(&|r| r.band_mid[j]),
            band_energy_start: avg(&|r| r.band_start[j]),
            cost: cost_ledger[s0..se].iter().sum(),
        })
        .collect();
    let contracting = intervals
        .windows(2)
        .all(|w| w[0].energy_end == 0.0 || w[1].energy_end < w[0].energy_end);
    let report = LrReport {
        beta: cfg.beta,
        doublings,
        contracting,
        paths: cfg.paths,
        dt,
        initial_energy: x0.energy(),
        final_energy: avg(&|r| r.final_energy),
        tail_start: schedule.tail_start(),
        intervals,
        cost_ledger,
        total_cost,
        note: "band kill is penalised linear-quadratic feedback; terminal band energy is small, not zero".into(),
    };
    Ok((report, policy))
}

/// Fit of `ln(total cost)` against `1/T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurveReport {
    pub horizons: Vec<f64>,
    pub betas: Vec<f64>,
    pub total_costs: Vec<f64>,
    pub fit: Option<LinearFit>,
    /// Some horizon failed to contract; the fit uses the remaining ones.
    pub partial: bool,
    pub failures: Vec<String>,
}

impl CostCurveReport {
    /// The fitted constant `Ĉ` in `cost ≈ A e^{Ĉ/T}`.
    pub fn c_hat(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

/// Run the synthesis for each horizon with `β = β₁/T` and fit the blow-up rate.
pub fn cost_curve(model: &Model, x0: &ModalState, horizons: &[f64], base: &LrConfig) -> Result<CostCurveReport> {
    if horizons.len() < 3 {
        return Err(Error::param("horizons", "need at least three values"));
    }
    let mut betas = Vec::new();
    let mut costs = Vec::new();
    let mut failures = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &t in horizons {
        let cfg = LrConfig {
            horizon: t,
            beta: base.beta / t,
            ..*base
        };
        match lebeau_robbiano_synthesize(model, x0, &cfg) {
            Ok(out) if out.report.contracting => {
                betas.push(out.report.beta);
                costs.push(out.report.total_cost);
                if out.report.total_cost > 0.0 {
                    xs.push(1.0 / t);
                    ys.push(out.report.total_cost.ln());
                }
            }
            Ok(out) => {
                betas.push(out.report.beta);
                costs.push(out.report.total_cost);
                failures.push(format!("T = {t}: interval energies did not contract"));
            }
            Err(e) => {
                betas.push(f64::NAN);
                costs.push(f64::NAN);
                failures.push(format!("T = {t}: {e}"));
            }
        }
    }
    Ok(CostCurveReport {
        horizons: horizons.to_vec(),
        betas,
        total_costs: costs,
        fit: stats::linear_fit(&xs, &ys),
        partial: !failures.is_empty(),
        failures,
    })
}
