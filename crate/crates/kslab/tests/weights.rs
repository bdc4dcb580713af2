use kslab::weights::{compare_weights, psi_build, SourceWeightParams};
use proptest::prelude::*;

fn valid_params() -> impl Strategy<Value = SourceWeightParams> {
    (0.05f64..5.0, 1.05f64..1.4, 0.0f64..1.0, 0.0f64..1.0, 0.05f64..0.95).prop_filter_map(
        "admissible",
        |(m, q, u, v, t)| {
            let q2 = q * q;
            let p_min = q2 / (2.0 - q2);
            let p = p_min + 0.01 + 20.0 * u;
            let lo = (1.0 + p) * q2 / 2.0;
            if lo >= p {
                return None;
            }
            let zeta = lo + (p - lo) * (0.05 + 0.9 * v);
            SourceWeightParams::new(m, p, q, zeta, t).ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rho0_two_steps_ahead_is_rho_times_gamma(p in valid_params()) {
        for k in 0..=40usize {
            let lhs = p.log_rho0(p.grid_remaining(k + 2));
            let rhs = p.log_rho(p.grid_remaining(k)) + p.log_gamma(p.block_length(k + 1)).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs(), "k = {}: {} vs {}", k, lhs, rhs);
        }
    }

    #[test]
    fn weight_exponents_ordered(p in valid_params()) {
        // ρ ≤ ρ̂ and ρ₀ ≤ ρ̂ pointwise
        let c = compare_weights(&p, 2000);
        prop_assert!(c.rho_over_rho_hat <= 1.0);
        prop_assert!(c.rho0_over_rho_hat <= 1.0 + 1e-15);
    }
}

#[test]
fn grid_starts_at_zero_and_accumulates_to_t() {
    let p = SourceWeightParams::default();
    assert_eq!(p.grid_time(0), 0.0);
    let total: f64 = (0..400).map(|k| p.block_length(k)).sum();
    assert!((total - p.horizon).abs() < 1e-12);
}

#[test]
fn psi_derivative_bounded_away_from_zero_outside_d1() {
    let psi = psi_build((0.45, 0.55)).unwrap();
    let min = (0..=10_000)
        .map(|i| i as f64 / 10_000.0)
        .filter(|x| !(0.45..=0.55).contains(x))
        .map(|x| psi.deriv(x).abs())
        .fold(f64::INFINITY, f64::min);
    assert!(min > 0.0);
    assert!((psi.sup_norm() - 1.0).abs() < 1e-12);
}
