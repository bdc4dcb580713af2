//! Weight families: Carleman weights `α_m, φ_m, θ` and the source-method
//! weights `γ, ρ₀, ρ, ρ̂`.
//!
//! The `ρ` family vanishes like `exp(-c/(T-t))`, so everything is evaluated in
//! log form and parametrised by the remaining time `s = T - t`. Grid times
//! `T_k = T - T/Q^k` are carried by their remaining time `T/Q^k`, which keeps
//! full relative precision for large `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Auxiliary function `ψ` with a single interior critical point.
///
/// `ψ'(x) = (x_c - x)(a(1-x)^k + b x^k)` with `a, b > 0` fixed by `ψ(1) = 0`,
/// normalised so `max ψ = ψ(x_c) = 1`. `k = 2` gives a quartic bump; centres
/// near the boundary need a larger even `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    center: f64,
    degree: i32,
    a: f64,
    b: f64,
    scale: f64,
}

impl Psi {
    pub fn center(&self) -> f64 {
        self.center
    }

    /// Exponent `k` in the derivative formula; `ψ` is a polynomial of degree `k + 2`.
    pub fn degree(&self) -> i32 {
        self.degree
    }

    fn raw(&self, x: f64) -> f64 {
        let k = self.degree;
        let (k1, k2) = ((k + 1) as f64, (k + 2) as f64);
        let c = self.center;
        let u = 1.0 - x;
        let left = (c - 1.0) * (1.0 - u.powi(k + 1)) / k1 + (1.0 - u.powi(k + 2)) / k2;
        let right = c * x.powi(k + 1) / k1 - x.powi(k + 2) / k2;
        self.a * left + self.b * right
    }

    fn raw_x(&self, x: f64) -> f64 {
        let k = self.degree;
        (self.center - x) * (self.a * (1.0 - x).powi(k) + self.b * x.powi(k))
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.raw(x) / self.scale
    }

    pub fn deriv(&self, x: f64) -> f64 {
        self.raw_x(x) / self.scale
    }

    /// `‖ψ‖_∞`, which is 1 by normalisation.
    pub fn sup_norm(&self) -> f64 {
        1.0
    }

    pub fn sample(&self, n_points: usize) -> Vec<(f64, f64)> {
        let h = 1.0 / (n_points.max(2) - 1) as f64;
        (0..n_points.max(2))
            .map(|i| {
                let x = i as f64 * h;
                (x, self.eval(x))
            })
            .collect()
    }
}

/// Build `ψ` with its critical point at the midpoint of `d1`.
///
/// ```
/// let psi = kslab::weights::psi_build((0.45, 0.55)).unwrap();
/// assert!(psi.eval(0.0).abs() < 1e-15 && psi.eval(1.0).abs() < 1e-12);
/// assert!((psi.eval(0.25) - psi.eval(0.75)).abs() < 1e-12);
/// ```
pub fn psi_build(d1: (f64, f64)) -> Result<Psi> {
    let (lo, hi) = d1;
    if !(lo > 0.0 && hi < 1.0 && lo < hi) {
        return Err(Error::param(
            "d1",
            format!("interval ({lo}, {hi}) must lie strictly inside (0, 1)"),
        ));
    }
    let c = 0.5 * (lo + hi);
    // a, b > 0 needs 1/(k+2) < c < (k+1)/(k+2)
    let mut k = 2;
    while !(1.0 / f64::from(k + 2) < c && c < f64::from(k + 1) / f64::from(k + 2)) {
        k += 2;
    }
    let (k1, k2) = ((k + 1) as f64, (k + 2) as f64);
    let int_left = (c - 1.0) / k1 + 1.0 / k2;
    let int_right = c / k1 - 1.0 / k2;
    let mut psi = Psi {
        center: c,
        degree: k,
        a: -int_right,
        b: int_left,
        scale: 1.0,
    };
    psi.scale = psi.raw(c);
    Ok(psi)
}

/// Parameters of the Carleman weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub mu: f64,
    pub lambda: f64,
    pub m: u32,
    pub k_const: f64,
    pub psi: Psi,
    pub horizon: f64,
}

impl CarlemanParams {
    pub fn new(mu: f64, lambda: f64, m: u32, k_const: f64, psi: Psi, horizon: f64) -> Result<Self> {
        let p = Self {
            mu,
            lambda,
            m,
            k_const,
            psi,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::param("mu", "must be positive"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::param("lambda", "must be positive"));
        }
        if self.m <= 3 {
            return Err(Error::param("m", "must exceed 3"));
        }
        if !(self.k_const > self.m as f64) {
            return Err(Error::param("k_const", "must exceed m"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::param("horizon", "must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        self.k_const * (self.m as f64 + 1.0) / self.m as f64 * self.psi.sup_norm()
    }

    pub fn c2(&self) -> f64 {
        self.k_const * self.psi.sup_norm()
    }

    fn log_time_factor(&self, t: f64) -> f64 {
        -(self.m as f64) * (t * (self.horizon - t)).ln()
    }

    /// `ln φ_m(x, t)`.
    pub fn log_phi(&self, x: f64, t: f64) -> f64 {
        self.mu * (self.c2() + self.psi.eval(x)) + self.log_time_factor(t)
    }

    /// `α_m(x, t)`, always negative.
    pub fn alpha(&self, x: f64, t: f64) -> f64 {
        let num = (self.mu * (self.psi.eval(x) + self.c2())).exp() - (self.mu * self.c1()).exp();
        num * self.log_time_factor(t).exp()
    }

    /// `ln(θ² φ_m^q)`.
    pub fn log_theta2_phi_q(&self, x: f64, t: f64, q: i32) -> f64 {
        2.0 * self.lambda * self.alpha(x, t) + q as f64 * self.log_phi(x, t)
    }
}

/// Weight values at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanValue {
    pub alpha: f64,
    pub phi: f64,
    pub theta: f64,
    /// Set at `t ∈ {0, T}` where the weights take their limits.
    pub singular: bool,
}

/// Evaluate `(α_m, φ_m, θ)` at `(x, t)`.
pub fn carleman_eval(p: &CarlemanParams, x: f64, t: f64) -> CarlemanValue {
    if t <= 0.0 || t >= p.horizon {
        return CarlemanValue {
            alpha: f64::NEG_INFINITY,
            phi: f64::INFINITY,
            theta: 0.0,
            singular: true,
        };
    }
    let alpha = p.alpha(x, t);
    CarlemanValue {
        alpha,
        phi: p.log_phi(x, t).exp(),
        theta: (p.lambda * alpha).exp(),
        singular: false,
    }
}

/// Smallest constants in the two derivative bounds on a sampled grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    /// Constant in `|∂_t(θ*[φ*]^q)| ≤ C λ (φ*)^{1+1/m} θ*[φ*]^q`.
    pub time_constant: f64,
    /// Constant in `|∂_x(θ² φ_m^q)| ≤ C λ φ_m θ² φ_m^q`.
    pub space_constant: f64,
    /// Width of the excluded neighbourhoods of `t = 0` and `t = T`.
    pub excluded: f64,
}

/// Measure the derivative-bound constants by central differences of the
/// logarithm of each weighted quantity, on an `n_x × n_t` grid.
pub fn carleman_bounds_check(p: &CarlemanParams, q: i32, n_x: usize, n_t: usize) -> Result<BoundReport> {
    if q < 1 {
        return Err(Error::param("q", "must be at least 1"));
    }
    if n_x < 3 || n_t < 3 {
        return Err(Error::param("grid", "needs at least 3 points per axis"));
    }
    let t_end = p.horizon;
    let excluded = 0.05 * t_end;
    let inv_m = 1.0 / p.m as f64;
    let qf = q as f64;

    // boundary (starred) weights depend on t only
    let log_star = |t: f64| p.lambda * p.alpha(0.0, t) + qf * p.log_phi(0.0, t);
    let ht = (t_end - 2.0 * excluded) / (n_t - 1) as f64;
    let dt = 1e-4 * ht;
    let mut time_constant = 0.0_f64;
    for j in 0..n_t {
        let t = excluded + j as f64 * ht;
        let dlog = (log_star(t + dt) - log_star(t - dt)) / (2.0 * dt);
        let phi_star = p.log_phi(0.0, t).exp();
        let c = dlog.abs() / (p.lambda * phi_star.powf(1.0 + inv_m));
        time_constant = time_constant.max(c);
    }

    let hx = 1.0 / (n_x - 1) as f64;
    let dx = 1e-3 * hx;
    let mut space_constant = 0.0_f64;
    for j in 0..n_t {
        let t = excluded + j as f64 * ht;
        for i in 0..n_x {
            let x = (i as f64 * hx).clamp(dx, 1.0 - dx);
            let dlog = (p.log_theta2_phi_q(x + dx, t, q) - p.log_theta2_phi_q(x - dx, t, q)) / (2.0 * dx);
            let c = dlog.abs() / (p.lambda * p.log_phi(x, t).exp());
            space_constant = space_constant.max(c);
        }
    }
    if !time_constant.is_finite() || !space_constant.is_finite() {
        return Err(Error::param("grid", "bound constants are not finite on this grid"));
    }
    Ok(BoundReport {
        time_constant,
        space_constant,
        excluded,
    })
}

/// Parameters `(M, P, Q, ζ, T)` of the source-method weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceWeightParams {
    #[serde(rename = "m_const")]
    pub m: f64,
    pub p: f64,
    pub q: f64,
    pub zeta: f64,
    pub horizon: f64,
}

impl Default for SourceWeightParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            p: 4.0,
            q: 1.2,
            zeta: 3.8,
            horizon: 0.5,
        }
    }
}

impl SourceWeightParams {
    pub fn new(m: f64, p: f64, q: f64, zeta: f64, horizon: f64) -> Result<Self> {
        let w = Self { m, p, q, zeta, horizon };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let q2 = self.q * self.q;
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::param("m_const", "must be positive and finite"));
        }
        if !(self.q > 1.0 && q2 < 2.0) {
            return Err(Error::param("q", "must lie in (1, √2)"));
        }
        if !(self.p > q2 / (2.0 - q2)) {
            return Err(Error::param(
                "p",
                format!("must exceed Q²/(2-Q²) = {}", q2 / (2.0 - q2)),
            ));
        }
        let lo = (1.0 + self.p) * q2 / 2.0;
        if !(self.zeta > lo && self.zeta < self.p) {
            return Err(Error::param(
                "zeta",
                format!("must lie in ((1+P)Q²/2, P) = ({lo}, {})", self.p),
            ));
        }
        if !(self.horizon > 0.0 && self.horizon < 1.0) {
            return Err(Error::param("horizon", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn with_m(mut self, m: f64) -> Result<Self> {
        self.m = m;
        self.validate()?;
        Ok(self)
    }

    fn rate(&self) -> f64 {
        self.m / (self.q - 1.0)
    }

    /// `ln γ(t) = M/t`.
    pub fn log_gamma(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(Error::param("t", "γ is undefined for t ≤ 0"));
        }
        Ok(self.m / t)
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        self.log_gamma(t).map(f64::exp)
    }

    /// `ln ρ₀` at remaining time `s = T - t`; `-∞` for `s ≤ 0`.
    pub fn log_rho0(&self, s: f64) -> f64 {
        self.log_weight(self.p, s)
    }

    /// `ln ρ` at remaining time `s`.
    pub fn log_rho(&self, s: f64) -> f64 {
        self.log_weight((1.0 + self.p) * self.q * self.q, s)
    }

    /// `ln ρ̂` at remaining time `s`.
    pub fn log_rho_hat(&self, s: f64) -> f64 {
        self.log_weight(self.zeta, s)
    }

    fn log_weight(&self, c: f64, s: f64) -> f64 {
        if s <= 0.0 {
            f64::NEG_INFINITY
        } else {
            -c * self.rate() / s
        }
    }

    /// Remaining time `T/Q^k` at grid index `k`.
    pub fn grid_remaining(&self, k: usize) -> f64 {
        self.horizon / self.q.powi(k as i32)
    }

    /// `T_k = T - T/Q^k`.
    pub fn grid_time(&self, k: usize) -> f64 {
        self.horizon - self.grid_remaining(k)
    }

    /// Block length `T_{k+1} - T_k`, computed without cancellation.
    pub fn block_length(&self, k: usize) -> f64 {
        self.grid_remaining(k) * (1.0 - 1.0 / self.q)
    }
}

/// Weight values at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceWeights {
    pub gamma: f64,
    pub rho0: f64,
    pub rho: f64,
    pub rho_hat: f64,
}

/// Evaluate `(γ, ρ₀, ρ, ρ̂)` at time `t ∈ (0, T]`.
///
/// ```
/// use kslab::weights::{source_weights_eval, SourceWeightParams};
/// let p = SourceWeightParams::default();
/// let w = source_weights_eval(&p, p.horizon).unwrap();
/// assert_eq!((w.rho0, w.rho, w.rho_hat), (0.0, 0.0, 0.0));
/// assert!(source_weights_eval(&p, 0.0).is_err());
/// ```
pub fn source_weights_eval(p: &SourceWeightParams, t: f64) -> Result<SourceWeights> {
    let gamma = p.gamma(t)?;
    let s = p.horizon - t;
    Ok(SourceWeights {
        gamma,
        rho0: p.log_rho0(s).exp(),
        rho: p.log_rho(s).exp(),
        rho_hat: p.log_rho_hat(s).exp(),
    })
}

/// The first `count` grid times `T_0 = 0 < T_1 < ...`.
pub fn source_grid(p: &SourceWeightParams, count: usize) -> Vec<f64> {
    (0..count).map(|k| p.grid_time(k)).collect()
}

/// Fitted constants in `ρ ≤ C ρ̂`, `ρ₀ ≤ C ρ̂` and `ρ̂² ≤ C ρ`, each the
/// largest ratio on an `n`-point grid of `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightComparison {
    pub rho_over_rho_hat: f64,
    pub rho0_over_rho_hat: f64,
    pub rho_hat_sq_over_rho: f64,
}

pub fn compare_weights(p: &SourceWeightParams, n: usize) -> WeightComparison {
    let mut out = WeightComparison {
        rho_over_rho_hat: 0.0,
        rho0_over_rho_hat: 0.0,
        rho_hat_sq_over_rho: 0.0,
    };
    for i in 0..n {
        let s = p.horizon * (1.0 - i as f64 / n as f64);
        let (r0, r, rh) = (p.log_rho0(s), p.log_rho(s), p.log_rho_hat(s));
        out.rho_over_rho_hat = out.rho_over_rho_hat.max((r - rh).exp());
        out.rho0_over_rho_hat = out.rho0_over_rho_hat.max((r0 - rh).exp());
        out.rho_hat_sq_over_rho = out.rho_hat_sq_over_rho.max((2.0 * rh - r).exp());
    }
    out
}
