//! Null control of the linear system with a vanishing source term.
//!
//! Time is cut at `T_k = T - T/Q^k`. On block `[T_k, T_{k+1})` the state is
//! split into a part driven by the source from zero and a part started at the
//! carried-over state and steered to zero by full-band penalised feedback.
//! Blocks stop once `ρ₀(T_K) < stop_ratio · ρ₀(0)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{sobolev_sq, ModalState};
use crate::control::{band_segment, PolicySegment};
use crate::error::{Error, Result};
use crate::sde::{simulate, weighted_sq, BrownianPath, Model, Replay, TrajectoryRecord, XtAccumulator, XtParts};
use crate::stats;
use crate::weights::SourceWeightParams;

/// Blocks shorter than this many steps are refused.
pub const MIN_BLOCK_STEPS: usize = 4;

/// Source field `F` in modal coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceSpec {
    Zero,
    /// `F(t) = amplitude · ρ(t)/ρ(0) · φ_mode`.
    RhoMode {
        mode: usize,
        amplitude: f64,
    },
    /// One row of modal coefficients per time step.
    Table {
        rows: Vec<Vec<f64>>,
    },
}

impl SourceSpec {
    pub fn validate(&self, n_modes: usize, n_steps: usize) -> Result<()> {
        match self {
            SourceSpec::Zero => Ok(()),
            SourceSpec::RhoMode { mode, amplitude } => {
                if *mode == 0 || *mode > n_modes {
                    return Err(Error::param("source.mode", format!("must lie in 1..={n_modes}")));
                }
                if !amplitude.is_finite() {
                    return Err(Error::param("source.amplitude", "must be finite"));
                }
                Ok(())
            }
            SourceSpec::Table { rows } => {
                if rows.len() < n_steps {
                    return Err(Error::param(
                        "source.rows",
                        format!("{} rows given, {n_steps} steps needed", rows.len()),
                    ));
                }
                if let Some(i) = rows.iter().position(|r| r.len() != n_modes) {
                    return Err(Error::param(
                        "source.rows",
                        format!("row {i} does not have {n_modes} entries"),
                    ));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::param("source.rows", "non-finite entry"));
                }
                Ok(())
            }
        }
    }

    /// Coefficients at step `n`.
    pub fn eval(&self, weights: &SourceWeightParams, dt: f64, n: usize, n_modes: usize) -> DVector<f64> {
        let mut f = DVector::zeros(n_modes);
        match self {
            SourceSpec::Zero => {}
            SourceSpec::RhoMode { mode, amplitude } => {
                let s = weights.horizon - n as f64 * dt;
                let ratio = (weights.log_rho(s) - weights.log_rho(weights.horizon)).exp();
                f[mode - 1] = amplitude * ratio;
            }
            SourceSpec::Table { rows } => {
                f.copy_from_slice(&rows[n]);
            }
        }
        f
    }

    /// Size used to normalise the final-state check.
    pub fn scale(&self) -> f64 {
        match self {
            SourceSpec::Zero => 0.0,
            SourceSpec::RhoMode { amplitude, .. } => amplitude.abs(),
            SourceSpec::Table { rows } => rows.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs())),
        }
    }
}

/// Settings of a source-term run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTermConfig {
    pub weights: SourceWeightParams,
    pub epsilon0: f64,
    /// `ε_k = ε₀ / ratio^k` on block `k`.
    pub epsilon_ratio: f64,
    pub stop_ratio: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for SourceTermConfig {
    fn default() -> Self {
        Self {
            weights: SourceWeightParams::default(),
            epsilon0: 1e-12,
            epsilon_ratio: 4.0,
            stop_ratio: 1e-12,
            dt: 1e-4,
            paths: 200,
            seed: 1,
        }
    }
}

impl SourceTermConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.epsilon0 > 0.0) {
            return Err(Error::param("epsilon0", "must be positive"));
        }
        if !(self.epsilon_ratio >= 1.0) {
            return Err(Error::param("epsilon_ratio", "must be at least 1"));
        }
        if !(self.stop_ratio > 0.0 && self.stop_ratio < 1.0) {
            return Err(Error::param("stop_ratio", "must lie in (0, 1)"));
        }
        if !(self.dt > 0.0 && self.dt < self.weights.horizon) {
            return Err(Error::param("dt", "must lie in (0, T)"));
        }
        if self.paths == 0 {
            return Err(Error::param("paths", "must be positive"));
        }
        Ok(())
    }
}

/// One block of the geometric grid with its feedback gains.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub index: usize,
    pub start_step: usize,
    pub end_step: usize,
    /// `T_k`, `T_{k+1}` and `T_{k+1} - T_k`.
    pub start: f64,
    pub end: f64,
    pub length: f64,
    pub epsilon: f64,
    pub segment: PolicySegment,
}

/// Blocks `0..K` with gains; shared by all paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePlan {
    pub dt: f64,
    pub weights: SourceWeightParams,
    pub blocks: Vec<BlockPlan>,
}

/// Number of blocks `K`: the first `k ≥ 1` with `ρ₀(T_k) < stop_ratio · ρ₀(0)`.
pub fn block_count(p: &SourceWeightParams, stop_ratio: f64) -> usize {
    let l0 = p.log_rho0(p.horizon);
    let target = stop_ratio.ln();
    (1..)
        .find(|&k| p.log_rho0(p.grid_remaining(k)) - l0 < target)
        .expect("ρ₀ vanishes at T")
}

impl SourcePlan {
    pub fn new(model: &Model, cfg: &SourceTermConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.weights;
        let dt = cfg.dt;
        let k_max = block_count(&p, cfg.stop_ratio);
        let n = model.n_modes();
        let mut blocks = Vec::with_capacity(k_max);
        for k in 0..k_max {
            let start = p.grid_time(k);
            let end = p.grid_time(k + 1);
            let start_step = (start / dt).round() as usize;
            let end_step = (end / dt).round() as usize;
            if end_step < start_step + MIN_BLOCK_STEPS {
                return Err(Error::Block {
                    block: k,
                    reason: format!(
                        "length {:.3e} is under {MIN_BLOCK_STEPS} steps of dt = {dt:e}; reduce dt",
                        p.block_length(k)
                    ),
                });
            }
            let epsilon = cfg.epsilon0 / cfg.epsilon_ratio.powi(k as i32);
            let segment =
                band_segment(model, n, start_step as f64 * dt, end_step - start_step, dt, epsilon).map_err(|e| {
                    Error::Block {
                        block: k,
                        reason: e.to_string(),
                    }
                })?;
            blocks.push(BlockPlan {
                index: k,
                start_step,
                end_step,
                start,
                end,
                length: p.block_length(k),
                epsilon,
                segment,
            });
        }
        Ok(Self { dt, weights: p, blocks })
    }

    pub fn n_steps(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end_step)
    }

    /// `T_K` on the time grid.
    pub fn horizon_used(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    /// Run one path with source `F(n)` given per step.
    pub fn run_path(
        &self,
        model: &Model,
        x0: &ModalState,
        source: &dyn Fn(usize) -> DVector<f64>,
        path: &BrownianPath,
    ) -> Result<SourcePath> {
        let dt = self.dt;
        let n = model.n_modes();
        if path.n_steps() < self.n_steps() {
            return Err(Error::param("path", "shorter than the block grid"));
        }
        if x0.n_modes() != n {
            return Err(Error::Dimension(format!(
                "initial state has {} modes, model {n}",
                x0.n_modes()
            )));
        }
        let mut rec = TrajectoryRecord::new(0.0, dt, x0.clone());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = x0.clone();
        for b in &self.blocks {
            let data_energy = x.energy();
            let mut y1 = ModalState::zeros(n);
            let mut y2 = x.clone();
            let mut cost = 0.0;
            for step in b.start_step..b.end_step {
                let t = step as f64 * dt;
                let dw = path.increments[step];
                let gain = &b.segment.gains[step - b.start_step];
                let u = -(gain * y2.stacked());
                let f = source(step);
                y1 = model.advance(&y1, t, dt, Some(&(-f)), dw);
                y2 = model.advance(&y2, t, dt, Some(&model.inject(&u)), dw);
                x = y1.add(&y2);
                if !x.is_finite() {
                    return Err(Error::Block {
                        block: b.index,
                        reason: format!("non-finite state at step {step}"),
                    });
                }
                let c = dt * model.control_energy(&u);
                cost += c;
                rec.push(x.clone(), u, c);
            }
            blocks.push(BlockPathStats {
                data_energy,
                cost,
                residual_energy: y2.energy(),
            });
        }
        Ok(SourcePath { record: rec, blocks })
    }
}

/// Per-block quantities on one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockPathStats {
    /// `‖a_k‖² + ‖b_k‖²`.
    pub data_energy: f64,
    pub cost: f64,
    /// Energy left in the controlled part at `T_{k+1}`.
    pub residual_energy: f64,
}

/// A glued trajectory on `[0, T_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePath {
    pub record: TrajectoryRecord,
    pub blocks: Vec<BlockPathStats>,
}

/// Largest modal deviation between the glued trajectory and a direct
/// simulation replaying its controls with the same source and path.
pub fn gluing_residual(
    model: &Model,
    x0: &ModalState,
    source: &dyn Fn(usize) -> DVector<f64>,
    path: &BrownianPath,
    glued: &TrajectoryRecord,
) -> Result<f64> {
    let n = glued.n_steps();
    let window = BrownianPath {
        increments: path.increments[..n].to_vec(),
        ..path.clone()
    };
    let direct = simulate(model, x0, 0.0, &window, &Replay(&glued.controls), Some(source))?;
    Ok(glued
        .states
        .iter()
        .zip(&direct.states)
        .map(|(a, b)| a.sub(b).max_abs())
        .fold(0.0, f64::max))
}

/// `ρ₀`-weighted quantities of one trajectory and the matching right side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WeightedPieces {
    /// `sup ‖y/ρ₀‖²`.
    pub sup_y: f64,
    /// `sup ‖z/ρ₀‖²`.
    pub sup_z: f64,
    /// `∫∫_{D₀} |h/ρ₀|²`.
    pub control: f64,
    /// `‖y₀‖² + ‖z₀‖²`.
    pub data: f64,
    /// `∫ ‖F/ρ‖²`.
    pub source: f64,
}

impl WeightedPieces {
    pub fn lhs(&self) -> f64 {
        self.sup_y + self.sup_z + self.control
    }

    pub fn rhs(&self) -> f64 {
        self.data + self.source
    }
}

/// `∫_0^{t_n} ‖F/ρ‖²` by the left-point rule used by the stepper.
pub fn source_weighted_sq(
    weights: &SourceWeightParams,
    dt: f64,
    n_steps: usize,
    source: &dyn Fn(usize) -> DVector<f64>,
) -> f64 {
    (0..n_steps)
        .map(|n| {
            let s = weights.horizon - n as f64 * dt;
            dt * weighted_sq(source(n).norm_squared(), weights.log_rho(s))
        })
        .sum()
}

/// Weighted pieces of a glued trajectory. The source integral is passed in
/// since it does not depend on the path for deterministic sources.
pub fn weighted_pieces(weights: &SourceWeightParams, rec: &TrajectoryRecord, source_sq: f64) -> WeightedPieces {
    let mut w = WeightedPieces {
        data: rec.states[0].energy(),
        source: source_sq,
        ..Default::default()
    };
    for (n, x) in rec.states.iter().enumerate() {
        let lw = weights.log_rho0(weights.horizon - rec.time(n));
        w.sup_y = w.sup_y.max(weighted_sq(x.y.norm_squared(), lw));
        w.sup_z = w.sup_z.max(weighted_sq(x.z.norm_squared(), lw));
    }
    for (n, c) in rec.cost_increments.iter().enumerate() {
        let lw = weights.log_rho0(weights.horizon - rec.time(n));
        w.control += weighted_sq(*c, lw);
    }
    w
}

/// `ρ̂`-weighted regularity quantities of a trajectory with their right side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularReport {
    pub parts: XtParts,
    /// `‖y₀‖²_{H²} + ‖z₀‖²_{H¹} + ∫ ‖F/ρ‖²`.
    pub rhs: f64,
    pub ratio: f64,
}

pub fn regular_trajectory_report(
    model: &Model,
    weights: &SourceWeightParams,
    rec: &TrajectoryRecord,
    source_sq: f64,
) -> RegularReport {
    let mut acc = XtAccumulator::new(&model.basis, *weights);
    for (n, x) in rec.states.iter().enumerate() {
        acc.push(rec.time(n), x);
    }
    let parts = acc.parts();
    let x0 = &rec.states[0];
    let l = model.basis.lambda();
    let rhs = sobolev_sq(x0.y.as_slice(), l, 2) + sobolev_sq(x0.z.as_slice(), l, 1) + source_sq;
    let lhs = parts.value_sq();
    let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
    RegularReport { parts, rhs, ratio }
}

/// Ensemble summary of one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub mean_data_energy: f64,
    pub mean_cost: f64,
    pub mean_residual_energy: f64,
    /// `ln(γ²(T_{k+1} - T_k) · E(‖a_k‖² + ‖b_k‖²))`.
    pub log_cost_bound: f64,
    pub within_bound: bool,
}

/// Ensemble means of the weighted quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedReport {
    pub sup_y: f64,
    pub sup_z: f64,
    pub control: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `ln(lhs/rhs)`; a lower bound for `C/T`.
    pub log_ratio: f64,
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceTermReport {
    pub weights: SourceWeightParams,
    pub dt: f64,
    pub paths: usize,
    pub horizon_used: f64,
    pub blocks: Vec<BlockReport>,
    pub weighted: WeightedReport,
    pub regular: RegularReport,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub source_scale: f64,
    pub gluing_residual: f64,
    pub gluing_tolerance: f64,
    /// Partial sums of the mean block costs.
    pub cost_partial_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTermOutcome {
    pub report: SourceTermReport,
    /// Path 0, for series output.
    pub sample: TrajectoryRecord,
}

/// Run the block construction over `cfg.paths` paths.
pub fn source_term_control(
    model: &Model,
    x0: &ModalState,
    source: &SourceSpec,
    cfg: &SourceTermConfig,
) -> Result<SourceTermOutcome> {
    let plan = SourcePlan::new(model, cfg)?;
    let n = model.n_modes();
    let n_steps = plan.n_steps();
    source.validate(n, n_steps)?;
    if x0.n_modes() != n {
        return Err(Error::Dimension(format!(
            "initial state has {} modes, model {n}",
            x0.n_modes()
        )));
    }
    let p = cfg.weights;
    let dt = cfg.dt;
    let f = |k: usize| source.eval(&p, dt, k, n);
    let source_sq = source_weighted_sq(&p, dt, n_steps, &f);
    if !source_sq.is_finite() {
        return Err(Error::param("source", "‖F/ρ‖ is not finite"));
    }
    let runs = stats::run_paths(cfg.paths, |i| -> Result<_> {
        let path = BrownianPath::generate(cfg.seed, i as u64, dt, n_steps);
        let out = plan.run_path(model, x0, &f, &path)?;
        let residual = gluing_residual(model, x0, &f, &path, &out.record)?;
        let pieces = weighted_pieces(&p, &out.record, source_sq);
        let regular = regular_trajectory_report(model, &p, &out.record, source_sq);
        Ok((out, residual, pieces, regular))
    });
    let runs: Vec<_> = runs.into_iter().collect::<Result<_>>()?;
    let paths = runs.len() as f64;
    let mean_of =
        |g: &dyn Fn(&(SourcePath, f64, WeightedPieces, RegularReport)) -> f64| runs.iter().map(g).sum::<f64>() / paths;

    let mut blocks = Vec::with_capacity(plan.blocks.len());
    let mut partial = Vec::with_capacity(plan.blocks.len());
    let mut running = 0.0;
    for (k, b) in plan.blocks.iter().enumerate() {
        let data = mean_of(&|r| r.0.blocks[k].data_energy);
        let cost = mean_of(&|r| r.0.blocks[k].cost);
        let residual = mean_of(&|r| r.0.blocks[k].residual_energy);
        let log_bound = 2.0 * p.m / b.length + data.ln();
        let within = if data == 0.0 {
            cost == 0.0
        } else {
            cost.ln() <= log_bound
        };
        running += cost;
        partial.push(running);
        blocks.push(BlockReport {
            index: k,
            start: b.start,
            end: b.end,
            steps: b.end_step - b.start_step,
            epsilon: b.epsilon,
            mean_data_energy: data,
            mean_cost: cost,
            mean_residual_energy: residual,
            log_cost_bound: log_bound,
            within_bound: within,
        });
    }

    let sup_y = mean_of(&|r| r.2.sup_y);
    let sup_z = mean_of(&|r| r.2.sup_z);
    let control = mean_of(&|r| r.2.control);
    let lhs = sup_y + sup_z + control;
    let rhs = mean_of(&|r| r.2.rhs());
    let log_ratio = if lhs == 0.0 {
        f64::NEG_INFINITY
    } else {
        (lhs / rhs).ln()
    };
    let weighted = WeightedReport {
        sup_y,
        sup_z,
        control,
        lhs,
        rhs,
        log_ratio,
        finite: lhs.is_finite() && rhs.is_finite(),
    };

    let mut reg_parts = XtParts::default();
    for r in &runs {
        let q = r.3.parts;
        reg_parts.sup_y_h2 += q.sup_y_h2 / paths;
        reg_parts.sup_z_h1 += q.sup_z_h1 / paths;
        reg_parts.int_y_h4 += q.int_y_h4 / paths;
        reg_parts.int_z_h2 += q.int_z_h2 / paths;
        reg_parts.blow_up |= q.blow_up;
    }
    let reg_rhs = mean_of(&|r| r.3.rhs);
    let reg_lhs = reg_parts.value_sq();
    let regular = RegularReport {
        parts: reg_parts,
        rhs: reg_rhs,
        ratio: if reg_lhs == 0.0 { 0.0 } else { reg_lhs / reg_rhs },
    };

    let report = SourceTermReport {
        weights: p,
        dt,
        paths: cfg.paths,
        horizon_used: plan.horizon_used(),
        blocks,
        weighted,
        regular,
        initial_energy: x0.energy(),
        final_energy: mean_of(&|r| r.0.record.final_state().energy()),
        source_scale: source.scale(),
        gluing_residual: runs.iter().map(|r| r.1).fold(0.0, f64::max),
        gluing_tolerance: 10.0 * dt,
        cost_partial_sums: partial,
    };
    let sample = runs.into_iter().next().map(|r| r.0.record).expect("paths > 0");
    Ok(SourceTermOutcome { report, sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::SystemCoefficients;

    fn model() -> Model {
        Model::new(8, SystemCoefficients::constant(0.1, 0.05, 0.1), (0.3, 0.7)).unwrap()
    }

    fn cfg() -> SourceTermConfig {
        SourceTermConfig {
            weights: SourceWeightParams::new(1.8, 4.0, 1.2, 3.8, 0.5).unwrap(),
            paths: 8,
            ..Default::default()
        }
    }

    #[test]
    fn block_count_matches_stop_rule() {
        let p = cfg().weights;
        let k = block_count(&p, 1e-12);
        let l0 = p.log_rho0(p.horizon);
        assert!(p.log_rho0(p.grid_remaining(k)) - l0 < 1e-12_f64.ln());
        assert!(p.log_rho0(p.grid_remaining(k - 1)) - l0 >= 1e-12_f64.ln());
    }

    #[test]
    fn zero_problem_stays_zero() {
        let m = model();
        let out = source_term_control(&m, &ModalState::zeros(8), &SourceSpec::Zero, &cfg()).unwrap();
        let r = &out.report;
        assert_eq!(r.final_energy, 0.0);
        assert_eq!(r.weighted.lhs, 0.0);
        assert!(r.blocks.iter().all(|b| b.mean_cost == 0.0 && b.within_bound));
    }

    #[test]
    fn rho_mode_source_scales_with_weight() {
        let p = cfg().weights;
        let s = SourceSpec::RhoMode {
            mode: 1,
            amplitude: 2.0,
        };
        let f0 = s.eval(&p, 1e-3, 0, 4);
        assert_eq!(f0[0], 2.0);
        let f = s.eval(&p, 1e-3, 100, 4);
        let expect = 2.0 * (p.log_rho(p.horizon - 0.1) - p.log_rho(p.horizon)).exp();
        assert!((f[0] - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn table_source_validation() {
        let s = SourceSpec::Table {
            rows: vec![vec![0.0; 3]; 5],
        };
        assert!(s.validate(4, 5).is_err());
        assert!(s.validate(3, 6).is_err());
        assert!(s.validate(3, 5).is_ok());
    }
}
