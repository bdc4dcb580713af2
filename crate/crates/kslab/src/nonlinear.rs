//! Truncated nonlinearity, fixed-point construction and the statistical certificate.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{sobolev_sq, transport_product, ModalState};
use crate::error::{Error, Result};
use crate::sde::{weighted_sq, BrownianPath, Model, TrajectoryRecord, XtAccumulator, XtParts};
use crate::sourceterm::{SourcePlan, SourceTermConfig};
use crate::stats;
use crate::weights::SourceWeightParams;

/// Smooth cutoff `φ_R`: 1 on `[0, R]`, 0 on `[2R, ∞)`, quintic smoothstep between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub radius: f64,
}

impl Cutoff {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", "must be positive and finite"));
        }
        Ok(Self { radius })
    }

    /// `sup |φ_R'| = 15/(8R)`.
    pub fn derivative_bound(&self) -> f64 {
        15.0 / (8.0 * self.radius)
    }
}

/// `φ_R(s)`.
///
/// ```
/// use kslab::nonlinear::{cutoff_eval, Cutoff};
/// let c = Cutoff::new(2.0).unwrap();
/// assert_eq!(cutoff_eval(&c, 0.0), 1.0);
/// assert_eq!(cutoff_eval(&c, 3.0), 0.5);
/// assert_eq!(cutoff_eval(&c, 4.0), 0.0);
/// ```
pub fn cutoff_eval(c: &Cutoff, s: f64) -> f64 {
    let u = (s - c.radius) / c.radius;
    if u <= 0.0 {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

/// Modal coefficients of `f_R = φ_R(X_t) y·y_x`.
pub fn f_r_eval(state: &ModalState, running_xt: f64, c: &Cutoff) -> DVector<f64> {
    let w = cutoff_eval(c, running_xt);
    if w == 0.0 {
        return DVector::zeros(state.n_modes());
    }
    let mut f = DVector::from_vec(transport_product(state.y.as_slice()));
    if w != 1.0 {
        f *= w;
    }
    f
}

/// `f_R` along a whole trajectory: entry `n` uses the state and the running
/// `X_t` norm at step `n`, so the result is adapted.
pub fn f_r_along(
    model: &Model,
    weights: &SourceWeightParams,
    rec: &TrajectoryRecord,
    cutoff: &Cutoff,
) -> (Vec<DVector<f64>>, XtParts) {
    let n = model.n_modes();
    let mut acc = XtAccumulator::new(&model.basis, *weights);
    let mut out = Vec::with_capacity(rec.n_steps());
    for (k, x) in rec.states.iter().enumerate() {
        acc.push(rec.time(k), x);
        if k == rec.n_steps() {
            break;
        }
        if model.coeffs.nonlinear {
            out.push(f_r_eval(x, acc.value(), cutoff));
        } else {
            out.push(DVector::zeros(n));
        }
    }
    (out, acc.parts())
}

/// `‖F‖_S² = ∫ ‖F/ρ‖²` on the step grid.
pub fn s_norm_sq(weights: &SourceWeightParams, dt: f64, f: &[DVector<f64>]) -> f64 {
    f.iter()
        .enumerate()
        .map(|(n, v)| dt * weighted_sq(v.norm_squared(), weights.log_rho(weights.horizon - n as f64 * dt)))
        .sum()
}

fn s_distance(weights: &SourceWeightParams, dt: f64, a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let d: Vec<DVector<f64>> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    s_norm_sq(weights, dt, &d).sqrt()
}

/// Smallest constants making the truncation estimate hold along a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub pairs: usize,
    /// `max ‖(f_R(y₁) - f_R(y₂))/ρ‖ / (R (‖Δ‖_{X_t} + ‖Δy/ρ̂‖_{H¹}))`.
    pub constant: f64,
    /// Grid points where both sides vanished.
    pub degenerate_points: usize,
}

/// Measure the constant of the truncation estimate on pairs of trajectories
/// sharing a time grid.
pub fn lipschitz_probe(
    model: &Model,
    weights: &SourceWeightParams,
    cutoff: &Cutoff,
    pairs: &[(TrajectoryRecord, TrajectoryRecord)],
) -> Result<LipschitzReport> {
    let l = model.basis.lambda();
    let mut constant: f64 = 0.0;
    let mut degenerate = 0;
    for (a, b) in pairs {
        if a.n_steps() != b.n_steps() || a.dt != b.dt || a.t0 != b.t0 {
            return Err(Error::Dimension("trajectory pair on different grids".into()));
        }
        let mut xa = XtAccumulator::new(&model.basis, *weights);
        let mut xb = XtAccumulator::new(&model.basis, *weights);
        let mut xd = XtAccumulator::new(&model.basis, *weights);
        for (k, (sa, sb)) in a.states.iter().zip(&b.states).enumerate() {
            let t = a.time(k);
            let s = weights.horizon - t;
            let diff = sa.sub(sb);
            xa.push(t, sa);
            xb.push(t, sb);
            xd.push(t, &diff);
            let fa = f_r_eval(sa, xa.value(), cutoff);
            let fb = f_r_eval(sb, xb.value(), cutoff);
            let lhs = weighted_sq((fa - fb).norm_squared(), weights.log_rho(s)).sqrt();
            let h1 = weighted_sq(sobolev_sq(diff.y.as_slice(), l, 1), weights.log_rho_hat(s)).sqrt();
            let rhs = cutoff.radius * (xd.value() + h1);
            if rhs == 0.0 {
                if lhs == 0.0 {
                    degenerate += 1;
                    continue;
                }
                constant = f64::INFINITY;
            } else {
                constant = constant.max(lhs / rhs);
            }
        }
    }
    Ok(LipschitzReport {
        pairs: pairs.len(),
        constant,
        degenerate_points: degenerate,
    })
}

/// Settings of the fixed-point construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub source: SourceTermConfig,
    pub radius: f64,
    pub max_iters: usize,
    /// Stop once `‖F^{n+1} - F^n‖_S ≤ tolerance · ‖F^{n+1}‖_S`.
    pub tolerance: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            source: SourceTermConfig::default(),
            radius: 1.0,
            max_iters: 30,
            tolerance: 1e-8,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        Cutoff::new(self.radius).map_err(|_| Error::param("radius", "must be positive and finite"))?;
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be positive"));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::param("tolerance", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Fixed-point iteration on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFixedPoint {
    pub iterations: usize,
    pub converged: bool,
    /// `d_n = ‖F^{n+1} - F^n‖_S`.
    pub distances: Vec<f64>,
    pub record: TrajectoryRecord,
    pub source: Vec<DVector<f64>>,
    pub xt: XtParts,
    /// `‖y₀‖²_{H²} + ‖z₀‖²_{H¹}`.
    pub data_sq: f64,
    pub failure: Option<String>,
}

impl PathFixedPoint {
    /// `d_n / d_{n-1}` for `n ≥ 1`.
    pub fn ratios(&self) -> Vec<f64> {
        self.distances
            .windows(2)
            .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
            .collect()
    }
}

pub(crate) fn data_sq(model: &Model, x0: &ModalState) -> f64 {
    let l = model.basis.lambda();
    sobolev_sq(x0.y.as_slice(), l, 2) + sobolev_sq(x0.z.as_slice(), l, 1)
}

/// Iterate `F ↦ f_R(y[F])` on one path, starting from `F = 0`.
pub fn fixed_point_path(
    model: &Model,
    plan: &SourcePlan,
    x0: &ModalState,
    cfg: &FixedPointConfig,
    path: &BrownianPath,
) -> Result<PathFixedPoint> {
    let cutoff = Cutoff::new(cfg.radius)?;
    let w = plan.weights;
    let dt = plan.dt;
    let n = model.n_modes();
    let steps = plan.n_steps();
    let mut f: Vec<DVector<f64>> = vec![DVector::zeros(n); steps];
    let mut distances = Vec::new();
    let mut above = 0;
    let mut failure = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last = None;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let out = plan.run_path(model, x0, &|k| f[k].clone(), path)?;
        let (next, xt) = f_r_along(model, &w, &out.record, &cutoff);
        let d = s_distance(&w, dt, &next, &f);
        let size = s_norm_sq(&w, dt, &next).sqrt();
        if let Some(&prev) = distances.last() {
            if d >= prev && prev > 0.0 {
                above += 1;
            } else {
                above = 0;
            }
        }
        distances.push(d);
        let done = d == 0.0 || d <= cfg.tolerance * size;
        // The trajectory returned is the one driven by the accepted source.
        last = Some((out.record, xt, f));
        f = next;
        if done {
            converged = true;
            break;
        }
        if above >= 3 {
            failure = Some(format!(
                "iterates stopped contracting at iteration {iterations}; reduce the radius R"
            ));
            break;
        }
    }
    if !converged && failure.is_none() {
        failure = Some(format!("no convergence within {} iterations", cfg.max_iters));
    }
    let (record, xt, source) = last.expect("at least one iteration");
    Ok(PathFixedPoint {
        iterations,
        converged,
        distances,
        record,
        source,
        xt,
        data_sq: data_sq(model, x0),
        failure,
    })
}

/// Largest modal deviation between a fixed-point trajectory and a replay of
/// its controls with the untruncated term `y y_x`.
pub fn coherence_residual(model: &Model, fp: &PathFixedPoint, path: &BrownianPath) -> Result<f64> {
    let rec = &fp.record;
    let dt = rec.dt;
    let mut x = rec.states[0].clone();
    let mut worst: f64 = 0.0;
    for k in 0..rec.n_steps() {
        let mut g = model.inject(&rec.controls[k]);
        if model.coeffs.nonlinear {
            g -= DVector::from_vec(transport_product(x.y.as_slice()));
        }
        x = model.advance(&x, rec.time(k), dt, Some(&g), path.increments[k]);
        if !x.is_finite() {
            return Err(Error::NonFinite { step: k });
        }
        worst = worst.max(x.sub(&rec.states[k + 1]).max_abs());
    }
    Ok(worst)
}

/// Random initial data: Gaussian coefficients with `y_i ∝ i^{-3}`,
/// `z_i ∝ i^{-2}`, rescaled to `(‖y₀‖²_{H²} + ‖z₀‖²_{H¹})^{1/2} = norm`.
///
/// Uses its own seed derivation so it never shares a stream with the noise.
pub fn random_data(model: &Model, seed: u64, path_index: u64, norm: f64) -> ModalState {
    let n = model.n_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_SEED_MASK);
    rng.set_stream(path_index);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 1..=n {
        let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        y.push(a / (i * i * i) as f64);
        z.push(b / (i * i) as f64);
    }
    let x = ModalState::new(y, z).expect("finite");
    let s = data_sq(model, &x).sqrt();
    if s == 0.0 || norm == 0.0 {
        ModalState::zeros(n)
    } else {
        x.scaled(norm / s)
    }
}

const DATA_SEED_MASK: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seed offset of the calibration ensemble.
pub const CALIBRATION_SEED_OFFSET: u64 = 1_000_003;

/// Constant `C` making `‖(y,z)‖²_{X_T} ≤ e^{2C/T}(‖y₀‖²_{H²} + ‖z₀‖²_{H¹})`
/// on every path of the linear controlled problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityCalibration {
    pub c_reg: f64,
    pub paths: usize,
    pub seed: u64,
    pub max_log_ratio: f64,
    pub mean_log_ratio: f64,
}

/// Calibrate on `paths` fresh paths and data directions of seed
/// `seed + CALIBRATION_SEED_OFFSET`. The map is linear, so the data scale is 1.
pub fn calibrate_regularity(
    model: &Model,
    cfg: &SourceTermConfig,
    paths: usize,
    seed: u64,
) -> Result<RegularityCalibration> {
    let plan = SourcePlan::new(model, cfg)?;
    let seed = seed.wrapping_add(CALIBRATION_SEED_OFFSET);
    let n = model.n_modes();
    let steps = plan.n_steps();
    let zero = DVector::zeros(n);
    let logs = stats::run_paths(paths, |i| -> Result<f64> {
        let path = BrownianPath::generate(seed, i as u64, plan.dt, steps);
        let x0 = random_data(model, seed, i as u64, 1.0);
        let out = plan.run_path(model, &x0, &|_| zero.clone(), &path)?;
        let mut acc = XtAccumulator::new(&model.basis, plan.weights);
        for (k, x) in out.record.states.iter().enumerate() {
            acc.push(out.record.time(k), x);
        }
        Ok(acc.parts().value_sq().ln() - data_sq(model, &x0).ln())
    });
    let logs: Vec<f64> = logs.into_iter().collect::<Result<_>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RegularityCalibration {
        c_reg: 0.5 * cfg.weights.horizon * max,
        paths,
        seed,
        max_log_ratio: max,
        mean_log_ratio: stats::mean(&logs),
    })
}

/// Ensemble summary of the fixed-point construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub radius: f64,
    pub c_hat: f64,
    pub horizon: f64,
    pub horizon_used: f64,
    pub paths: usize,
    pub converged_paths: usize,
    pub max_iterations: usize,
    /// Largest `d_n / d_{n-1}` over paths, `n ≥ 1`; 0 if no path needed two iterations.
    pub max_ratio: f64,
    pub distances_nonincreasing: bool,
    pub data_scale: f64,
    pub max_final_y_norm: f64,
    pub mean_xt_sq: f64,
    pub mean_data_sq: f64,
    /// `ln(e^{2Ĉ/T} E(‖y₀‖²_{H²} + ‖z₀‖²_{H¹}))`.
    pub log_theorem_bound: f64,
    pub theorem_holds: bool,
    /// Paths whose `sup X_t` stayed below `R`.
    pub below_radius: usize,
    /// Largest deviation from the untruncated replay on those paths.
    pub coherence_residual: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOutcome {
    pub report: FixedPointReport,
    pub paths: Vec<PathFixedPoint>,
}

/// Run the fixed point on `cfg.source.paths` paths with initial data `data(i)`.
pub fn fixed_point_solve(
    model: &Model,
    data: &(dyn Fn(usize) -> ModalState + Sync),
    cfg: &FixedPointConfig,
    c_hat: f64,
) -> Result<FixedPointOutcome> {
    cfg.validate()?;
    let plan = SourcePlan::new(model, &cfg.source)?;
    let steps = plan.n_steps();
    let sc = cfg.source;
    let runs = stats::run_paths(sc.paths, |i| -> Result<_> {
        let path = BrownianPath::generate(sc.seed, i as u64, sc.dt, steps);
        let x0 = data(i);
        let fp = fixed_point_path(model, &plan, &x0, cfg, &path)?;
        let coh = if fp.xt.value() <= cfg.radius {
            Some(coherence_residual(model, &fp, &path)?)
        } else {
            None
        };
        Ok((fp, coh))
    });
    let runs: Vec<(PathFixedPoint, Option<f64>)> = runs.into_iter().collect::<Result<_>>()?;
    let p = runs.len() as f64;
    let mean_xt_sq = runs.iter().map(|r| r.0.xt.value_sq()).sum::<f64>() / p;
    let mean_data_sq = runs.iter().map(|r| r.0.data_sq).sum::<f64>() / p;
    let t = sc.weights.horizon;
    let log_bound = 2.0 * c_hat / t + mean_data_sq.ln();
    let theorem_holds = if mean_data_sq == 0.0 {
        mean_xt_sq == 0.0
    } else {
        mean_xt_sq.ln() <= log_bound
    };
    let max_ratio = runs.iter().flat_map(|r| r.0.ratios()).fold(0.0, f64::max);
    let nonincreasing = runs.iter().all(|r| {
        r.0.distances
            .iter()
            .skip(1)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] <= w[0])
    });
    let report = FixedPointReport {
        radius: cfg.radius,
        c_hat,
        horizon: t,
        horizon_used: plan.horizon_used(),
        paths: runs.len(),
        converged_paths: runs.iter().filter(|r| r.0.converged).count(),
        max_iterations: runs.iter().map(|r| r.0.iterations).max().unwrap_or(0),
        max_ratio,
        distances_nonincreasing: nonincreasing,
        data_scale: runs.iter().map(|r| r.0.data_sq.sqrt()).fold(0.0, f64::max),
        max_final_y_norm: runs
            .iter()
            .map(|r| r.0.record.final_state().y.norm())
            .fold(0.0, f64::max),
        mean_xt_sq,
        mean_data_sq,
        log_theorem_bound: log_bound,
        theorem_holds,
        below_radius: runs.iter().filter(|r| r.1.is_some()).count(),
        coherence_residual: runs.iter().filter_map(|r| r.1).fold(0.0, f64::max),
        failures: runs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.0.failure.as_ref().map(|f| format!("path {i}: {f}")))
            .collect(),
    };
    Ok(FixedPointOutcome {
        report,
        paths: runs.into_iter().map(|r| r.0).collect(),
    })
}

/// Settings of the statistical certificate. `R = e^{-Ĉ/T}`, `δ = e^{-2Ĉ/T}√ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateConfig {
    pub fixed_point: FixedPointConfig,
    pub epsilon: f64,
    pub c_hat: f64,
    /// Normal quantile of the binomial interval.
    pub z: f64,
}

impl CertificateConfig {
    pub fn horizon(&self) -> f64 {
        self.fixed_point.source.weights.horizon
    }

    pub fn radius(&self) -> f64 {
        (-self.c_hat / self.horizon()).exp()
    }

    pub fn delta(&self) -> f64 {
        (-2.0 * self.c_hat / self.horizon()).exp() * self.epsilon.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::param("epsilon", "must lie in (0, 1)"));
        }
        if !(self.c_hat > 0.0 && self.c_hat.is_finite()) {
            return Err(Error::param("c_hat", "must be positive and finite"));
        }
        if !(self.z > 0.0) {
            return Err(Error::param("z", "must be positive"));
        }
        if !(self.delta() > 0.0) {
            return Err(Error::param("c_hat", "δ underflows; lower Ĉ or raise T"));
        }
        self.fixed_point.validate()
    }
}

/// Exceedance statistics of `sup_t ‖(y,z)‖_{X_t} > R`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub delta: f64,
    pub epsilon: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub c_hat: f64,
    pub horizon: f64,
    pub paths: usize,
    pub exceedance_count: usize,
    pub exceedance_fraction: f64,
    #[serde(rename = "empirical_mean_XT2")]
    pub empirical_mean_xt2: f64,
    /// `E‖(y,z)‖²_{X_T} / R²`.
    pub markov_bound: f64,
    /// Upper Wilson margin at quantile `z`.
    pub ci_margin: f64,
    pub markov_holds: bool,
    pub epsilon_holds: bool,
    pub converged_paths: usize,
    pub warning: Option<String>,
}

/// Monte Carlo estimate of `P(sup X_t > R)` for data of norm exactly `δ`.
pub fn statistical_certificate(model: &Model, cfg: &CertificateConfig) -> Result<CertificateReport> {
    cfg.validate()?;
    let radius = cfg.radius();
    let delta = cfg.delta();
    let mut fp = cfg.fixed_point;
    fp.radius = radius;
    let seed = fp.source.seed;
    let out = fixed_point_solve(model, &|i| random_data(model, seed, i as u64, delta), &fp, cfg.c_hat)?;
    let paths = out.paths.len();
    let exceed = out.paths.iter().filter(|p| p.xt.value() > radius).count();
    let frac = exceed as f64 / paths as f64;
    let mean = out.report.mean_xt_sq;
    let markov = mean / (radius * radius);
    let margin = stats::wilson_upper_margin(exceed, paths, cfg.z);
    let warning = (paths < 100).then(|| format!("only {paths} paths: the binomial interval is wide"));
    Ok(CertificateReport {
        delta,
        epsilon: cfg.epsilon,
        radius,
        c_hat: cfg.c_hat,
        horizon: cfg.horizon(),
        paths,
        exceedance_count: exceed,
        exceedance_fraction: frac,
        empirical_mean_xt2: mean,
        markov_bound: markov,
        ci_margin: margin,
        markov_holds: frac <= markov + 2.0 * margin,
        epsilon_holds: frac <= cfg.epsilon + margin,
        converged_paths: out.report.converged_paths,
        warning,
    })
}
