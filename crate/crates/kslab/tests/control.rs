use kslab::basis::ModalState;
use kslab::control::{
    band_segment, cost_curve, lebeau_robbiano_synthesize, lr_schedule, partial_spectral_control, riccati_backward,
    ControlPolicy, LqProblem, LrConfig, LrInterval,
};
use kslab::sde::{simulate, BrownianPath, Model, SystemCoefficients};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};

fn model(n: usize, b: (f64, f64, f64)) -> Model {
    Model::new(n, SystemCoefficients::constant(b.0, b.1, b.2), (0.3, 0.7)).unwrap()
}

fn power_data(n: usize) -> ModalState {
    let v: Vec<f64> = (1..=n).map(|i| 1.0 / (i * i) as f64).collect();
    ModalState::new(v.clone(), v).unwrap()
}

#[test]
fn schedule_examples() {
    let b = kslab::basis::SpectralBasis::new(16).unwrap();
    let s = lr_schedule(1.0, 1.0, &b).unwrap();
    assert_eq!((s.intervals[0].tau, s.intervals[0].r), (0.5, 16.0));
    let covered: f64 = s.intervals.iter().map(|i| i.tau).sum();
    let j = s.intervals.len() as i32;
    assert!((covered - (1.0 - 1.0 / 2f64.powi(j))).abs() < 1e-15);
    assert!(s.intervals.windows(2).all(|w| w[1].r > w[0].r));
    let pi2 = std::f64::consts::PI.powi(2);
    let s = lr_schedule(1.0, pi2, &b).unwrap();
    assert_eq!(s.intervals[0].band, 2);
}

#[test]
fn scalar_riccati_closed_form() {
    for &(a, eps, tau) in &[(-3.0, 0.05, 0.5), (1.0, 1e-3, 0.2), (0.0, 0.5, 1.0)] {
        let problem = LqProblem {
            a_diag: DVector::from_element(1, a),
            a_off: DMatrix::zeros(1, 1),
            noise: DMatrix::zeros(1, 1),
            mass: DMatrix::identity(1, 1),
            terminal: DMatrix::from_element(1, 1, 1.0 / eps),
            horizon: tau,
        };
        let sol = riccati_backward(&problem, 1e-12, eps).unwrap();
        for (t, p) in sol.times.iter().zip(&sol.p) {
            // 1/p solves q' = 2aq - 1 backward from q(τ) = ε.
            let q = if a == 0.0 {
                eps + tau - t
            } else {
                1.0 / (2.0 * a) + (eps - 1.0 / (2.0 * a)) * (2.0 * a * (t - tau)).exp()
            };
            assert!((p[(0, 0)] - 1.0 / q).abs() <= 1e-8 * (1.0 / q).max(1.0), "a={a} t={t}");
        }
    }
}

/// Terminal state of the deterministic one-mode penalised problem:
/// `x(τ) = ε (ε I + W)⁻¹ e^{Aτ} x₀` with `W = m ∫ e^{As} e₁e₁ᵀ e^{Aᵀs} ds`.
fn one_mode_oracle(m: &Model, x0: Vector2<f64>, tau: f64, eps: f64) -> Vector2<f64> {
    let (mu, l) = (m.basis.mu()[0], m.basis.lambda()[0]);
    let a = Matrix2::new(-mu, 0.0, 1.0, -l);
    let mass = m.mass()[(0, 0)];
    let n = 20_000;
    let h = tau / n as f64;
    let mut w = Matrix2::zeros();
    for i in 0..n {
        // midpoint rule is ample for this smooth integrand
        let e = (a * ((i as f64 + 0.5) * h)).exp();
        let c = e.column(0).into_owned();
        w += c * c.transpose() * (mass * h);
    }
    let inv = (Matrix2::identity() * eps + w).try_inverse().unwrap();
    inv * ((a * tau).exp() * x0) * eps
}

#[test]
fn one_mode_penalised_kill_matches_lq_oracle() {
    let m = model(1, (0.0, 0.0, 0.0));
    let tau: f64 = 0.1;
    let dt = 1e-5;
    let steps = (tau / dt).round() as usize;
    let x0 = ModalState::new(vec![1.0], vec![1.0]).unwrap();
    let mut prev = f64::INFINITY;
    for eps in [1e-2, 1e-4, 1e-6] {
        let seg = band_segment(&m, 1, 0.0, steps, dt, eps).unwrap();
        let policy = ControlPolicy {
            dt,
            segments: vec![seg],
        };
        let rec = simulate(&m, &x0, 0.0, &BrownianPath::zero(dt, steps), &policy, None).unwrap();
        let x = rec.final_state();
        let oracle = one_mode_oracle(&m, Vector2::new(1.0, 1.0), tau, eps);
        let got = Vector2::new(x.y[0], x.z[0]);
        assert!(
            (got - oracle).norm() <= 0.02 * oracle.norm(),
            "eps {eps}: {got:?} vs {oracle:?}"
        );
        assert!(x.energy() < prev);
        prev = x.energy();
    }
}

/// Deterministic two-mode band `(y₁, y₂, z₁, z₂)` after `t` units of penalised control:
/// `x(t) = ε (ε I + W)⁻¹ e^{At} x₀`, `W = ∫ e^{As} B M⁻¹ Bᵀ e^{Aᵀs} ds`, `B = [M; 0]`.
fn two_mode_oracle(m: &Model, x0: Vector4<f64>, t: f64, eps: f64) -> Vector4<f64> {
    let (mu, l) = (m.basis.mu(), m.basis.lambda());
    let a = Matrix4::new(
        -mu[0], 0.0, 0.0, 0.0, //
        0.0, -mu[1], 0.0, 0.0, //
        1.0, 0.0, -l[0], 0.0, //
        0.0, 1.0, 0.0, -l[1],
    );
    let mass = m.mass();
    let mut g = Matrix4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            g[(i, j)] = mass[(i, j)];
        }
    }
    let n = 20_000;
    let h = t / n as f64;
    let mut w = Matrix4::zeros();
    for i in 0..n {
        let e = (a * ((i as f64 + 0.5) * h)).exp();
        w += e * g * e.transpose() * h;
    }
    let inv = (Matrix4::identity() * eps + w).try_inverse().unwrap();
    inv * ((a * t).exp() * x0) * eps
}

#[test]
fn two_mode_band_kill_follows_lq_oracle() {
    // first interval of the T = 1, β = π² schedule: τ = 0.5, band of two modes
    let m = model(4, (0.0, 0.0, 0.0));
    let b = kslab::basis::SpectralBasis::new(4).unwrap();
    let iv = lr_schedule(1.0, std::f64::consts::PI.powi(2), &b).unwrap().intervals[0];
    assert_eq!((iv.tau, iv.band), (0.5, 2));
    let x0 = power_data(4);
    let x0b = Vector4::new(x0.y[0], x0.y[1], x0.z[0], x0.z[1]);
    let band = |x: &ModalState| x.y.rows(0, 2).norm_squared() + x.z.rows(0, 2).norm_squared();
    let mut ratios = Vec::new();
    for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
        let out = partial_spectral_control(&m, &x0, &iv, eps, &BrownianPath::zero(1e-5, 50_000)).unwrap();
        let got = Vector4::new(
            out.mid_state.y[0],
            out.mid_state.y[1],
            out.mid_state.z[0],
            out.mid_state.z[1],
        );
        let oracle = two_mode_oracle(&m, x0b, 0.25, eps);
        assert!(
            (got - oracle).norm() <= 0.02 * oracle.norm(),
            "eps {eps}: {got:?} vs {oracle:?}"
        );
        ratios.push(band(&out.mid_state) / x0.energy());
        // free second half: modes above the band decay at least like e^{-λ₃ τ/2}
        let high = |x: &ModalState| x.y.rows(2, 2).norm_squared() + x.z.rows(2, 2).norm_squared();
        let decay = (high(&out.end_state) / high(&out.mid_state)).sqrt();
        assert!(decay <= (-m.basis.lambda()[2] * 0.25).exp() * 1.05, "decay {decay}");
    }
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    assert!(ratios[3] <= 1e-4, "{ratios:?}");

    let zero = partial_spectral_control(&m, &ModalState::zeros(4), &iv, 1e-6, &BrownianPath::zero(1e-4, 5000)).unwrap();
    assert_eq!(zero.cost, 0.0);
    assert_eq!(zero.end_state.energy(), 0.0);
}

#[test]
fn smaller_penalty_gives_smaller_band_energy() {
    let m = model(4, (0.1, 0.05, 0.1));
    let iv = LrInterval {
        index: 1,
        start: 0.0,
        end: 0.2,
        tau: 0.2,
        r: m.basis.mu()[1],
        band: 2,
    };
    let x0 = power_data(4);
    let band_mid = |eps: f64| {
        (0..40)
            .map(|p| {
                let path = BrownianPath::generate(6, p, 1e-4, 2000);
                let out = partial_spectral_control(&m, &x0, &iv, eps, &path).unwrap();
                out.mid_state.y.rows(0, 2).norm_squared() + out.mid_state.z.rows(0, 2).norm_squared()
            })
            .sum::<f64>()
            / 40.0
    };
    let e: Vec<f64> = [1e-2, 1e-4, 1e-6].iter().map(|&eps| band_mid(eps)).collect();
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
}

fn small_lr(paths: usize) -> LrConfig {
    LrConfig {
        horizon: 0.5,
        paths,
        ..LrConfig::default()
    }
}

#[test]
fn synthesis_drives_energy_down_and_ledger_adds_up() {
    let m = model(8, (0.1, 0.05, 0.1));
    let x0 = power_data(8);
    let out = lebeau_robbiano_synthesize(&m, &x0, &small_lr(12)).unwrap();
    let r = &out.report;
    assert!(r.contracting);
    assert!(
        r.final_energy <= 1e-6 * r.initial_energy,
        "{} vs {}",
        r.final_energy,
        r.initial_energy
    );
    for w in r.intervals.windows(2) {
        assert!(w[1].energy_end < w[0].energy_end);
    }
    let seq: f64 = r.cost_ledger.iter().sum();
    assert_eq!(seq, r.total_cost);
    let by_interval: f64 = r.intervals.iter().map(|i| i.cost).sum();
    assert!((by_interval - r.total_cost).abs() <= 1e-12 * r.total_cost);
    assert!(r.total_cost.is_finite() && r.total_cost > 0.0);
}

#[test]
fn zero_data_and_quadratic_cost_scaling() {
    let m = model(6, (0.1, 0.05, 0.1));
    let cfg = small_lr(6);
    let zero = lebeau_robbiano_synthesize(&m, &ModalState::zeros(6), &cfg).unwrap();
    assert_eq!(zero.report.total_cost, 0.0);
    assert_eq!(zero.report.final_energy, 0.0);
    let x0 = power_data(6);
    let one = lebeau_robbiano_synthesize(&m, &x0, &cfg).unwrap().report.total_cost;
    let two = lebeau_robbiano_synthesize(&m, &x0.scaled(2.0), &cfg)
        .unwrap()
        .report
        .total_cost;
    assert!((two - 4.0 * one).abs() <= 1e-10 * two);
}

#[test]
fn glued_policy_is_adapted() {
    let m = model(6, (0.1, 0.05, 0.1));
    let cfg = small_lr(2);
    let out = lebeau_robbiano_synthesize(&m, &power_data(6), &cfg).unwrap();
    let n = (cfg.horizon / cfg.dt).round() as usize;
    let a = BrownianPath::generate(1, 0, cfg.dt, n);
    let b = BrownianPath::generate(2, 0, cfg.dt, n);
    for split in [700usize, 2600, 3800] {
        let spliced = a.splice(&b, split);
        let ra = simulate(&m, &power_data(6), 0.0, &a, &out.policy, None).unwrap();
        let rb = simulate(&m, &power_data(6), 0.0, &spliced, &out.policy, None).unwrap();
        // the control applied on step k sees increments before k only
        for k in 0..=split {
            assert_eq!(ra.controls[k], rb.controls[k], "step {k}");
        }
        assert_ne!(ra.controls[split + 200], rb.controls[split + 200]);
    }
}

#[test]
fn cost_grows_as_horizon_shrinks() {
    let m = model(6, (0.1, 0.05, 0.1));
    let base = LrConfig {
        paths: 6,
        ..LrConfig::default()
    };
    let c = cost_curve(&m, &power_data(6), &[0.25, 0.5, 1.0], &base).unwrap();
    assert!(!c.partial, "{:?}", c.failures);
    assert!(c.c_hat().unwrap() > 0.0);
    assert!(c.total_costs[0] > c.total_costs[2]);
}
