//! Riccati equations for the penalised band-kill problem.
//!
//! The state `x ∈ ℝⁿ` is split as `[y-part (m components); rest]`. The control
//! `u ∈ ℝᵐ` enters the `y` rows through a mass matrix `M` and is charged
//! `uᵀ M u` per unit time, so `B = [M; 0]`, `R = M` and `B R⁻¹ Bᵀ = diag(M, 0)`.
//!
//! [`riccati_backward`] integrates the continuous equation
//! `-Ṗ = AᵀP + PA + CᵀPC - P B R⁻¹ Bᵀ P` with an adaptive two-stage Radau IIA
//! method. [`riccati_discrete`] solves the recursion of the semi-implicit
//! scheme used by the simulator, so its gains are exactly optimal for the
//! simulated dynamics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sde::Model;

/// Linear-quadratic problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    /// Stiff diagonal drift, treated implicitly by the scheme.
    pub a_diag: DVector<f64>,
    /// Remaining drift, treated explicitly.
    pub a_off: DMatrix<f64>,
    /// Multiplicative noise matrix `C`.
    pub noise: DMatrix<f64>,
    /// Control mass matrix `M` (size `m × m`).
    pub mass: DMatrix<f64>,
    /// Terminal weight `P(τ)`.
    pub terminal: DMatrix<f64>,
    pub horizon: f64,
}

impl LqProblem {
    /// The band of the first `k` modes of `model`, noise frozen at time `t`,
    /// with terminal weight `(1/ε) I`.
    pub fn band(model: &Model, k: usize, t: f64, epsilon: f64, horizon: f64) -> Self {
        let n = 2 * k;
        let mut a_diag = DVector::zeros(n);
        for i in 0..k {
            a_diag[i] = -model.basis.mu()[i];
            a_diag[k + i] = -model.basis.lambda()[i];
        }
        let c = model.coeffs.couplings;
        let eye = DMatrix::<f64>::identity(k, k);
        let mut a_off = DMatrix::zeros(n, n);
        a_off.view_mut((0, 0), (k, k)).copy_from(&(&eye * c.a1));
        a_off.view_mut((0, k), (k, k)).copy_from(&(&eye * c.a2));
        a_off.view_mut((k, 0), (k, k)).copy_from(&(&eye * c.a3));
        a_off.view_mut((k, k), (k, k)).copy_from(&(&eye * c.a4));
        let penalty = if epsilon.is_infinite() { 0.0 } else { 1.0 / epsilon };
        Self {
            a_diag,
            a_off,
            noise: band_noise(model, k, t),
            mass: model.mass().view((0, 0), (k, k)).into_owned(),
            terminal: DMatrix::identity(n, n) * penalty,
            horizon,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_diag.len()
    }

    pub fn controlled(&self) -> usize {
        self.mass.nrows()
    }

    pub fn drift(&self) -> DMatrix<f64> {
        &self.a_off + DMatrix::from_diagonal(&self.a_diag)
    }

    /// `B R⁻¹ Bᵀ = diag(M, 0)`.
    pub fn control_gram(&self) -> DMatrix<f64> {
        let (n, m) = (self.dim(), self.controlled());
        let mut s = DMatrix::zeros(n, n);
        s.view_mut((0, 0), (m, m)).copy_from(&self.mass);
        s
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let m = self.controlled();
        let square = |a: &DMatrix<f64>| a.nrows() == n && a.ncols() == n;
        if !(square(&self.a_off) && square(&self.noise) && square(&self.terminal)) {
            return Err(Error::Dimension("LQ matrices must be n × n".into()));
        }
        if m > n || self.mass.ncols() != m {
            return Err(Error::Dimension("mass matrix must be m × m with m ≤ n".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        Ok(())
    }
}

/// Noise matrix `[[b1 I, b2 I], [0, b3 I]]` of the first `k` modes at time `t`.
pub fn band_noise(model: &Model, k: usize, t: f64) -> DMatrix<f64> {
    let (b1, b2, b3) = model.coeffs.noise_at(t);
    let mut c = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        c[(i, i)] = b1;
        c[(i, k + i)] = b2;
        c[(k + i, k + i)] = b3;
    }
    c
}

/// Samples of `P(t)` on `[0, τ]`, increasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub epsilon: f64,
}

impl RiccatiSolution {
    /// Linear interpolation between stored samples.
    pub fn p_at(&self, t: f64) -> DMatrix<f64> {
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return self.p[0].clone();
        }
        if i >= self.times.len() {
            return self.p.last().cloned().expect("nonempty solution");
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        &self.p[i - 1] * (1.0 - w) + &self.p[i] * w
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

fn check_psd(p: &DMatrix<f64>, t: f64) -> Result<()> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Riccati {
            t,
            reason: "non-finite entries".into(),
        });
    }
    let scale = p.amax();
    if scale == 0.0 {
        return Ok(());
    }
    let min = p.clone().symmetric_eigenvalues().min();
    if min < -1e-8 * scale {
        return Err(Error::Riccati {
            t,
            reason: format!("lost semidefiniteness (λ_min = {min:e}); reduce the step"),
        });
    }
    Ok(())
}

/// Largest state dimension accepted by the continuous solver.
pub const CONTINUOUS_MAX_DIM: usize = 24;

/// Integrate the continuous Riccati equation backwards from `P(τ)`.
///
/// Adaptive two-stage Radau IIA in the reversed time `s = τ - t` with a
/// simplified Newton iteration and step-doubling error control. Meant for
/// small bands; the state dimension is capped at [`CONTINUOUS_MAX_DIM`].
pub fn riccati_backward(problem: &LqProblem, rtol: f64, epsilon: f64) -> Result<RiccatiSolution> {
    problem.validate()?;
    let n = problem.dim();
    if n > CONTINUOUS_MAX_DIM {
        return Err(Error::param(
            "band",
            format!("continuous solver handles at most {CONTINUOUS_MAX_DIM} states, got {n}"),
        ));
    }
    let a = problem.drift();
    let c = &problem.noise;
    let s_mat = problem.control_gram();
    let f = |p: &DMatrix<f64>| -> DMatrix<f64> { a.transpose() * p + p * &a + c.transpose() * p * c - p * &s_mat * p };
    let tau = problem.horizon;
    let atol = 1e-14;
    let mut p = problem.terminal.clone();
    let mut s = 0.0;
    let mut h = tau * 1e-4;
    let mut rev_times = vec![tau];
    let mut rev_p = vec![p.clone()];
    let mut rejects = 0usize;
    while s < tau * (1.0 - 1e-14) {
        h = h.min(tau - s);
        let big = radau_step(&p, h, &f, &a, c, &s_mat)?;
        let half = radau_step(&p, 0.5 * h, &f, &a, c, &s_mat)?;
        let small = radau_step(&half, 0.5 * h, &f, &a, c, &s_mat)?;
        let err = (&small - &big).amax() / 7.0;
        let tol = atol + rtol * small.amax().max(p.amax());
        if err <= tol || h < tau * 1e-14 {
            p = small;
            symmetrize(&mut p);
            s += h;
            check_psd(&p, tau - s)?;
            rev_times.push((tau - s).max(0.0));
            rev_p.push(p.clone());
            rejects = 0;
        } else {
            rejects += 1;
            if rejects > 50 {
                return Err(Error::Riccati {
                    t: tau - s,
                    reason: "step size collapsed".into(),
                });
            }
        }
        let factor = if err == 0.0 {
            4.0
        } else {
            (0.9 * (tol / err).powf(0.25)).clamp(0.2, 4.0)
        };
        h *= factor;
    }
    rev_times.reverse();
    rev_p.reverse();
    Ok(RiccatiSolution {
        times: rev_times,
        p: rev_p,
        epsilon,
    })
}

fn radau_step(
    p0: &DMatrix<f64>,
    h: f64,
    f: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    s_mat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    const A: [[f64; 2]; 2] = [[5.0 / 12.0, -1.0 / 12.0], [3.0 / 4.0, 1.0 / 4.0]];
    let n = p0.nrows();
    let nn = n * n;
    // Jacobian of F at p0 acting on vec(X): Ābᵀ X + X Āb + Cᵀ X C with Āb = A - S P0
    let abar = a - s_mat * p0;
    let at = abar.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let jac = eye.kronecker(&at) + at.kronecker(&eye) + c.transpose().kronecker(&c.transpose());
    let mut sys = DMatrix::<f64>::identity(2 * nn, 2 * nn);
    for i in 0..2 {
        for j in 0..2 {
            let mut blk = sys.view_mut((i * nn, j * nn), (nn, nn));
            blk -= &jac * (h * A[i][j]);
        }
    }
    let lu = sys.lu();
    let mut y1 = p0.clone();
    let mut y2 = p0.clone();
    let scale = p0.amax().max(1e-300);
    for _ in 0..30 {
        let (f1, f2) = (f(&y1), f(&y2));
        let g1 = &y1 - p0 - (&f1 * A[0][0] + &f2 * A[0][1]) * h;
        let g2 = &y2 - p0 - (&f1 * A[1][0] + &f2 * A[1][1]) * h;
        let mut rhs = DVector::zeros(2 * nn);
        rhs.rows_mut(0, nn).copy_from_slice(g1.as_slice());
        rhs.rows_mut(nn, nn).copy_from_slice(g2.as_slice());
        let delta = lu.solve(&rhs).ok_or_else(|| Error::Riccati {
            t: f64::NAN,
            reason: "singular Newton matrix".into(),
        })?;
        let d1 = DMatrix::from_column_slice(n, n, &delta.as_slice()[..nn]);
        let d2 = DMatrix::from_column_slice(n, n, &delta.as_slice()[nn..]);
        y1 -= &d1;
        y2 -= &d2;
        let size = d1.amax().max(d2.amax());
        if size <= 1e-13 * scale.max(y2.amax()) {
            return Ok(y2);
        }
    }
    Ok(y2)
}

/// Feedback gains and value matrices of the discrete problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLq {
    pub dt: f64,
    /// `K_n` (size `m × n`) for steps `0..n_steps`; the control is `u_n = -K_n x_n`.
    pub gains: Vec<DMatrix<f64>>,
    /// `P_n` for `n = 0..=n_steps`; `x₀ᵀ P₀ x₀` is the optimal expected cost.
    pub p: Vec<DMatrix<f64>>,
}

/// Solve the Riccati recursion of the scheme
/// `x_{n+1} = D[(I + dt A_off) x_n + dt B u_n + C_n x_n ΔW]`,
/// `D = (I - dt diag(a_diag))⁻¹`, with step cost `dt uᵀ M u`.
///
/// `noise_at(n)` supplies `C_n`; pass `None` to use the problem's constant noise.
pub fn riccati_discrete(
    problem: &LqProblem,
    dt: f64,
    n_steps: usize,
    noise_at: Option<&dyn Fn(usize) -> DMatrix<f64>>,
) -> Result<DiscreteLq> {
    problem.validate()?;
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be positive"));
    }
    let n = problem.dim();
    let m = problem.controlled();
    let d = problem.a_diag.map(|a| 1.0 / (1.0 - dt * a));
    let dmat = DMatrix::from_diagonal(&d);
    let phi = &dmat * (DMatrix::identity(n, n) + &problem.a_off * dt);
    let mut g = DMatrix::zeros(n, m);
    for i in 0..m {
        for j in 0..m {
            g[(i, j)] = dt * d[i] * problem.mass[(i, j)];
        }
    }
    let mass = &problem.mass;
    let mut p = problem.terminal.clone();
    symmetrize(&mut p);
    let mut ps = vec![p.clone()];
    let mut gains = Vec::with_capacity(n_steps);
    for step in (0..n_steps).rev() {
        let c_n = match noise_at {
            Some(f) => f(step),
            None => problem.noise.clone(),
        };
        let sigma = &dmat * c_n;
        // W = D P D and (D P Φ) restricted to the controlled rows
        let dp = &dmat * &p;
        let w_mm = (&dp * &dmat).view((0, 0), (m, m)).into_owned();
        let dpphi = (&dp * &phi).rows(0, m).into_owned();
        let lhs = DMatrix::identity(m, m) + &w_mm * mass * dt;
        let k = lhs.lu().solve(&dpphi).ok_or_else(|| Error::Riccati {
            t: step as f64 * dt,
            reason: "singular gain system".into(),
        })?;
        let closed = &phi - &g * &k;
        let mut next =
            closed.transpose() * &p * &closed + k.transpose() * mass * &k * dt + sigma.transpose() * &p * &sigma * dt;
        symmetrize(&mut next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Riccati {
                t: step as f64 * dt,
                reason: "non-finite value matrix".into(),
            });
        }
        p = next;
        ps.push(p.clone());
        gains.push(k);
    }
    gains.reverse();
    ps.reverse();
    Ok(DiscreteLq { dt, gains, p: ps })
}
