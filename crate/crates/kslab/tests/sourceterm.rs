use kslab::basis::ModalState;
use kslab::sde::{BrownianPath, Model, SystemCoefficients};
use kslab::sourceterm::{block_count, source_term_control, SourcePlan, SourceSpec, SourceTermConfig};
use kslab::weights::SourceWeightParams;

/// `Ĉ_cost` fitted on the default cost curve (seed 1, 200 paths, 16 modes).
const M_CALIBRATED: f64 = 1.846;

fn model(n: usize) -> Model {
    Model::new(n, SystemCoefficients::constant(0.1, 0.05, 0.1), (0.3, 0.7)).unwrap()
}

fn cfg(paths: usize, dt: f64) -> SourceTermConfig {
    SourceTermConfig {
        weights: SourceWeightParams::new(M_CALIBRATED, 4.0, 1.2, 3.8, 0.5).unwrap(),
        paths,
        dt,
        ..Default::default()
    }
}

fn data(n: usize) -> ModalState {
    let y: Vec<f64> = (1..=n).map(|i| 1.0 / (i * i * i) as f64).collect();
    let z: Vec<f64> = (1..=n).map(|i| 1.0 / (i * i) as f64).collect();
    ModalState::new(y, z).unwrap()
}

#[test]
fn rho_mode_source_is_controlled_to_zero() {
    let m = model(8);
    let src = SourceSpec::RhoMode {
        mode: 1,
        amplitude: 1.0,
    };
    let out = source_term_control(&m, &data(8), &src, &cfg(8, 1e-4)).unwrap();
    let r = &out.report;
    assert!(r.weighted.finite);
    assert!(
        r.final_energy.sqrt() <= 1e-5 * r.source_scale,
        "final {}",
        r.final_energy
    );
    assert!(r.gluing_residual <= r.gluing_tolerance);
    for b in &r.blocks {
        assert!(
            b.within_bound,
            "block {} cost {} bound e^{}",
            b.index, b.mean_cost, b.log_cost_bound
        );
    }
    assert!(r.regular.ratio.is_finite() && !r.regular.parts.blow_up);
    // block costs become summable: successive ratios below one in the tail
    let costs: Vec<f64> = r.blocks.iter().map(|b| b.mean_cost).collect();
    let tail = &costs[costs.len() / 2..];
    assert!(tail.windows(2).all(|w| w[1] < w[0]), "{costs:?}");
    let sums = &r.cost_partial_sums;
    assert!(sums.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn zero_problem_reports_zero() {
    let m = model(4);
    let out = source_term_control(&m, &ModalState::zeros(4), &SourceSpec::Zero, &cfg(2, 1e-4)).unwrap();
    assert_eq!(out.report.weighted.lhs, 0.0);
    assert_eq!(out.report.final_energy, 0.0);
    assert_eq!(out.report.regular.ratio, 0.0);
}

#[test]
fn glued_state_is_continuous_at_block_edges() {
    let m = model(6);
    let c = cfg(1, 1e-4);
    let plan = SourcePlan::new(&m, &c).unwrap();
    assert_eq!(plan.blocks.len(), block_count(&c.weights, c.stop_ratio));
    let src = SourceSpec::RhoMode {
        mode: 2,
        amplitude: 0.5,
    };
    let f = |k: usize| src.eval(&c.weights, c.dt, k, 6);
    let path = BrownianPath::generate(4, 0, c.dt, plan.n_steps());
    let out = plan.run_path(&m, &data(6), &f, &path).unwrap();
    for (k, b) in plan.blocks.iter().enumerate().skip(1) {
        // data of block k is the glued state at T_k
        assert_eq!(out.blocks[k].data_energy, out.record.states[b.start_step].energy());
        assert_eq!(plan.blocks[k - 1].end_step, b.start_step);
    }
    assert!((plan.horizon_used() - c.weights.grid_time(plan.blocks.len())).abs() <= c.dt);
}

#[test]
fn regularity_ratio_stable_under_refinement() {
    let m = model(6);
    let src = SourceSpec::RhoMode {
        mode: 1,
        amplitude: 1.0,
    };
    let ratio = |dt: f64| {
        source_term_control(&m, &data(6), &src, &cfg(8, dt))
            .unwrap()
            .report
            .regular
            .ratio
    };
    let (a, b) = (ratio(2e-4), ratio(1e-4));
    assert!(a.is_finite() && b.is_finite() && a > 0.0);
    assert!((a / b - 1.0).abs() <= 0.2, "{a} vs {b}");
}

#[test]
fn unbounded_weighted_source_rejected() {
    let m = model(3);
    let c = cfg(1, 1e-3);
    let plan = SourcePlan::new(&m, &c).unwrap();
    let rows = vec![vec![1e200, 0.0, 0.0]; plan.n_steps()];
    let err = source_term_control(&m, &data(3), &SourceSpec::Table { rows }, &c).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
