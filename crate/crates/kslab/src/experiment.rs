//! Experiment configuration and the runners behind the `kslab` binary.
//!
//! A config is a TOML (or JSON) document with a `kind` and optional
//! sections; every missing value takes the default shown by
//! [`ExperimentConfig::resolve`]. The report embeds the resolved config.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::ModalState;
use crate::control::{cost_curve, lebeau_robbiano_synthesize, CostCurveReport, LrConfig};
use crate::error::{Error, Result};
use crate::nonlinear::{
    calibrate_regularity, fixed_point_solve, random_data, statistical_certificate, CertificateConfig, FixedPointConfig,
    RegularityCalibration, CALIBRATION_SEED_OFFSET,
};
use crate::obsprobe::{
    band_observability_brute, band_observability_constant, carleman_functionals, clamped_observability_probe,
    duality_control_backward, spectral_inequality_probe, AdjointParams,
};
use crate::report::Series;
use crate::sde::{simulate, BrownianPath, Model, SystemCoefficients, Uncontrolled};
use crate::sourceterm::{source_term_control, SourceSpec, SourceTermConfig};
use crate::stats;
use crate::weights::{psi_build, CarlemanParams, SourceWeightParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    LrControl,
    SourceTerm,
    FixedPoint,
    Certificate,
    Probe,
}

/// Noise, couplings, nonlinearity switch and the control region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(flatten)]
    pub coeffs: SystemCoefficients,
    pub region: (f64, f64),
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            coeffs: SystemCoefficients::constant(0.1, 0.05, 0.1),
            region: (0.3, 0.7),
        }
    }
}

/// Initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialData {
    Zero,
    /// `y_i = amplitude · i^{-y_decay}`, `z_i = amplitude · i^{-z_decay}`.
    Power {
        amplitude: f64,
        y_decay: f64,
        z_decay: f64,
    },
    Modes {
        y: Vec<f64>,
        z: Vec<f64>,
    },
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData::Power {
            amplitude: 1.0,
            y_decay: 2.0,
            z_decay: 2.0,
        }
    }
}

impl InitialData {
    pub fn build(&self, n_modes: usize) -> Result<ModalState> {
        match self {
            InitialData::Zero => Ok(ModalState::zeros(n_modes)),
            InitialData::Power {
                amplitude,
                y_decay,
                z_decay,
            } => {
                if ![amplitude, y_decay, z_decay].iter().all(|v| v.is_finite()) {
                    return Err(Error::param("initial", "power data must be finite"));
                }
                let f = |d: f64| (1..=n_modes).map(|i| amplitude * (i as f64).powf(-d)).collect();
                ModalState::new(f(*y_decay), f(*z_decay))
            }
            InitialData::Modes { y, z } => {
                if y.len() != n_modes || z.len() != n_modes {
                    return Err(Error::param(
                        "initial.y",
                        format!("need {n_modes} coefficients per component"),
                    ));
                }
                ModalState::new(y.clone(), z.clone())
            }
        }
    }
}

/// Prefix the field of a validation error with its config section.
fn scoped<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidParameter { field, reason } if !field.contains('.') => Error::InvalidParameter {
            field: format!("{section}.{field}"),
            reason,
        },
        e => e,
    })
}

/// How `Ĉ` is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// Cost-rate constant; fitted from a cost curve when absent.
    pub c_cost: Option<f64>,
    /// Regularity constant; calibrated when absent (fixed-point and certificate).
    pub c_reg: Option<f64>,
    pub horizons: Vec<f64>,
    /// Paths for the calibration runs; the top-level `paths` when absent.
    pub paths: Option<usize>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            c_cost: None,
            c_reg: None,
            horizons: vec![0.25, 0.5, 1.0],
            paths: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub horizon: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { horizon: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSection {
    pub horizon: f64,
    /// `β₁`; the run uses `β = β₁ / T`.
    pub beta1: f64,
    pub epsilon0: f64,
    pub epsilon_ratio: f64,
    pub max_doublings: u32,
}

impl Default for LrSection {
    fn default() -> Self {
        let d = LrConfig::default();
        Self {
            horizon: d.horizon,
            beta1: d.beta,
            epsilon0: d.epsilon0,
            epsilon_ratio: d.epsilon_ratio,
            max_doublings: d.max_doublings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub horizon: f64,
    pub p: f64,
    pub q: f64,
    pub zeta: f64,
    pub epsilon0: f64,
    pub epsilon_ratio: f64,
    pub stop_ratio: f64,
    pub field: SourceSpec,
}

impl Default for SourceSection {
    fn default() -> Self {
        let w = SourceWeightParams::default();
        let c = SourceTermConfig::default();
        Self {
            horizon: w.horizon,
            p: w.p,
            q: w.q,
            zeta: w.zeta,
            epsilon0: c.epsilon0,
            epsilon_ratio: c.epsilon_ratio,
            stop_ratio: c.stop_ratio,
            field: SourceSpec::RhoMode {
                mode: 1,
                amplitude: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointSection {
    /// Cutoff radius; `e^{-Ĉ/T}/2` when absent.
    pub radius: Option<f64>,
    /// `‖(y₀, z₀)‖`; `δ(ε)` when absent.
    pub data_norm: Option<f64>,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        let d = FixedPointConfig::default();
        Self {
            radius: None,
            data_norm: None,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSection {
    pub epsilon: f64,
    pub z: f64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self { epsilon: 0.1, z: 1.96 }
    }
}

/// Probe selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProbeSection {
    Spectral {
        #[serde(default = "default_max_modes")]
        max_modes: usize,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    Band {
        #[serde(default = "default_band_modes")]
        modes: usize,
        #[serde(default = "default_taus")]
        taus: Vec<f64>,
        /// Random starts of the brute-force check; 0 skips it.
        #[serde(default)]
        brute_samples: usize,
    },
    Clamped {
        #[serde(default = "default_grids")]
        n_points: Vec<usize>,
        #[serde(default)]
        adjoint: AdjointParams,
        #[serde(default = "default_family")]
        family: usize,
    },
    Duality {
        #[serde(default = "default_duality_grid")]
        n_points: usize,
        #[serde(default)]
        adjoint: AdjointParams,
        #[serde(default = "default_kappas")]
        regularizations: Vec<f64>,
    },
    Carleman {
        #[serde(default = "default_carleman_mu")]
        mu: f64,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default = "default_carleman_m")]
        m: u32,
        #[serde(default = "default_carleman_k")]
        k_const: f64,
        #[serde(default = "default_d1")]
        d1: (f64, f64),
        #[serde(default = "default_carleman_horizon")]
        horizon: f64,
    },
}

fn default_max_modes() -> usize {
    32
}
fn default_samples() -> usize {
    200
}
fn default_band_modes() -> usize {
    4
}
fn default_taus() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05, 0.025]
}
fn default_grids() -> Vec<usize> {
    vec![32, 64]
}
fn default_family() -> usize {
    2
}
fn default_duality_grid() -> usize {
    32
}
fn default_kappas() -> Vec<f64> {
    vec![1e-4, 1e-6, 1e-8, 1e-10, 1e-12]
}
fn default_carleman_mu() -> f64 {
    0.1
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}
fn default_carleman_m() -> u32 {
    4
}
fn default_carleman_k() -> f64 {
    5.0
}
fn default_d1() -> (f64, f64) {
    (0.45, 0.55)
}
fn default_carleman_horizon() -> f64 {
    1.0
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection::Spectral {
            max_modes: default_max_modes(),
            samples: default_samples(),
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_paths() -> usize {
    200
}
fn default_n_modes() -> usize {
    16
}
fn default_dt() -> f64 {
    1e-4
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    /// Filled at resolve time; fixed-point and certificate runs default to
    /// the nonlinear system.
    #[serde(default)]
    pub system: Option<SystemSection>,
    #[serde(default)]
    pub initial: InitialData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<LrSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_point: Option<FixedPointSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
}

impl ExperimentConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fill the sections the kind needs with defaults and validate.
    ///
    /// Fixed-point and certificate runs default to `T = 0.9` with the
    /// nonlinearity switched on.
    pub fn resolve(mut self) -> Result<Self> {
        use ExperimentKind::*;
        let nonlinear = matches!(self.kind, FixedPoint | Certificate);
        self.system.get_or_insert_with(|| {
            let mut s = SystemSection::default();
            s.coeffs.nonlinear = nonlinear;
            s
        });
        let needs_cal = matches!(self.kind, SourceTerm | FixedPoint | Certificate);
        if needs_cal {
            let paths = self.paths;
            let cal = self.calibration.get_or_insert_with(CalibrationSection::default);
            cal.paths.get_or_insert(paths);
        }
        match self.kind {
            Simulate => {
                self.simulate.get_or_insert_with(SimulateSection::default);
            }
            LrControl => {
                self.lr.get_or_insert_with(LrSection::default);
            }
            SourceTerm => {
                self.source.get_or_insert_with(SourceSection::default);
            }
            FixedPoint | Certificate => {
                self.source.get_or_insert_with(|| SourceSection {
                    horizon: 0.9,
                    field: SourceSpec::Zero,
                    ..SourceSection::default()
                });
                self.fixed_point.get_or_insert_with(FixedPointSection::default);
                self.certificate.get_or_insert_with(CertificateSection::default);
            }
            Probe => {
                self.probe.get_or_insert_with(ProbeSection::default);
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::param("paths", "must be positive"));
        }
        if self.n_modes == 0 {
            return Err(Error::param("n_modes", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be positive"));
        }
        scoped("system", self.system().coeffs.validate())?;
        scoped("system", self.model())?;
        self.initial.build(self.n_modes)?;
        if let Some(c) = &self.calibration {
            if c.c_cost.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::param("calibration.c_cost", "must be positive"));
            }
            if c.c_reg.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::param("calibration.c_reg", "must be non-negative"));
            }
            if c.c_cost.is_none() && c.horizons.len() < 3 {
                return Err(Error::param("calibration.horizons", "need at least three values"));
            }
            if c.paths == Some(0) {
                return Err(Error::param("calibration.paths", "must be positive"));
            }
        }
        if let Some(s) = &self.simulate {
            if !(s.horizon > self.dt) {
                return Err(Error::param("simulate.horizon", "must exceed dt"));
            }
        }
        if self.lr.is_some() {
            scoped("lr", self.lr_config(self.lr_section().horizon, 1.0)?.validate())?;
        }
        if let Some(s) = &self.source {
            // M is not known yet; any positive value checks the rest.
            let cfg = scoped("source", self.source_config(1.0))?;
            scoped("source", cfg.validate())?;
            let steps = (s.horizon / self.dt).round() as usize;
            scoped("source.field", s.field.validate(self.n_modes, steps))?;
        }
        if let Some(f) = &self.fixed_point {
            if f.radius.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
                return Err(Error::param("fixed_point.radius", "must be positive"));
            }
            if f.data_norm.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
                return Err(Error::param("fixed_point.data_norm", "must be non-negative"));
            }
            if f.max_iters == 0 {
                return Err(Error::param("fixed_point.max_iters", "must be positive"));
            }
            if !(f.tolerance > 0.0 && f.tolerance < 1.0) {
                return Err(Error::param("fixed_point.tolerance", "must lie in (0, 1)"));
            }
        }
        if let Some(c) = &self.certificate {
            if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
                return Err(Error::param("certificate.epsilon", "must lie in (0, 1)"));
            }
            if !(c.z > 0.0) {
                return Err(Error::param("certificate.z", "must be positive"));
            }
        }
        if let Some(p) = &self.probe {
            match p {
                ProbeSection::Band { modes, taus, .. } => {
                    if *modes == 0 {
                        return Err(Error::param("probe.modes", "must be positive"));
                    }
                    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) {
                        return Err(Error::param("probe.taus", "need positive values"));
                    }
                }
                ProbeSection::Clamped { n_points, adjoint, .. } => {
                    scoped("probe.adjoint", adjoint.validate())?;
                    if n_points.iter().any(|&n| n < 5) || n_points.is_empty() {
                        return Err(Error::param("probe.n_points", "need grids of at least 5 points"));
                    }
                }
                ProbeSection::Duality {
                    n_points,
                    adjoint,
                    regularizations,
                } => {
                    scoped("probe.adjoint", adjoint.validate())?;
                    if *n_points < 5 {
                        return Err(Error::param("probe.n_points", "need at least 5 points"));
                    }
                    if regularizations.iter().any(|k| !(*k >= 0.0)) {
                        return Err(Error::param("probe.regularizations", "must be non-negative"));
                    }
                }
                ProbeSection::Carleman {
                    mu,
                    lambdas,
                    m,
                    k_const,
                    d1,
                    horizon,
                } => {
                    let psi = scoped("probe", psi_build(*d1))?;
                    for &l in lambdas {
                        scoped("probe", CarlemanParams::new(*mu, l, *m, *k_const, psi, *horizon))?;
                    }
                    if !(*horizon > self.dt) {
                        return Err(Error::param("probe.horizon", "must exceed dt"));
                    }
                }
                ProbeSection::Spectral { max_modes, .. } => {
                    if *max_modes == 0 {
                        return Err(Error::param("probe.max_modes", "must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn system(&self) -> SystemSection {
        self.system.unwrap_or_default()
    }

    pub fn model(&self) -> Result<Model> {
        let s = self.system();
        Model::new(self.n_modes, s.coeffs, s.region)
    }

    fn lr_section(&self) -> LrSection {
        self.lr.unwrap_or_default()
    }

    /// LR settings at horizon `t` with `β = β₁ / t`, using `paths` paths.
    fn lr_config(&self, t: f64, paths_scale: f64) -> Result<LrConfig> {
        let s = self.lr_section();
        Ok(LrConfig {
            horizon: t,
            beta: s.beta1 / t,
            epsilon0: s.epsilon0,
            epsilon_ratio: s.epsilon_ratio,
            dt: self.dt,
            paths: ((self.paths as f64) * paths_scale).round().max(1.0) as usize,
            seed: self.seed,
            max_doublings: s.max_doublings,
        })
    }

    fn source_config(&self, m: f64) -> Result<SourceTermConfig> {
        let s = self.source.clone().unwrap_or_default();
        Ok(SourceTermConfig {
            weights: SourceWeightParams::new(m, s.p, s.q, s.zeta, s.horizon)?,
            epsilon0: s.epsilon0,
            epsilon_ratio: s.epsilon_ratio,
            stop_ratio: s.stop_ratio,
            dt: self.dt,
            paths: self.paths,
            seed: self.seed,
        })
    }
}

/// How `Ĉ` was obtained for a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CHatReport {
    pub c_cost: f64,
    /// `config` or `cost-curve`.
    pub c_cost_source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_curve: Option<CostCurveReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularity: Option<RegularityCalibration>,
    /// The constant used downstream.
    pub c_hat: f64,
}

/// Report plus series of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: serde_json::Value,
    pub series: Series,
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    kind: ExperimentKind,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_hat: Option<&'a CHatReport>,
    result: R,
}

fn envelope<R: Serialize>(cfg: &ExperimentConfig, c_hat: Option<&CHatReport>, result: R) -> Result<serde_json::Value> {
    serde_json::to_value(Envelope {
        kind: cfg.kind,
        config: cfg,
        c_hat,
        result,
    })
    .map_err(|e| Error::Config(format!("cannot serialise report: {e}")))
}

/// Fit `Ĉ_cost` unless the config fixes it.
fn cost_constant(cfg: &ExperimentConfig, model: &Model, x0: &ModalState) -> Result<(f64, CHatReport)> {
    let cal = cfg.calibration.clone().unwrap_or_default();
    if let Some(c) = cal.c_cost {
        return Ok((
            c,
            CHatReport {
                c_cost: c,
                c_cost_source: "config".into(),
                cost_curve: None,
                c_reg: None,
                regularity: None,
                c_hat: c,
            },
        ));
    }
    let base = LrConfig {
        paths: cal.paths.unwrap_or(cfg.paths),
        ..cfg.lr_config(1.0, 1.0)?
    };
    let base = LrConfig {
        beta: cfg.lr_section().beta1,
        ..base
    };
    let curve = cost_curve(model, x0, &cal.horizons, &base)?;
    let c = curve
        .c_hat()
        .filter(|c| *c > 0.0)
        .ok_or_else(|| Error::Synthesis(format!("cost curve gave no positive rate: {:?}", curve.failures)))?;
    Ok((
        c,
        CHatReport {
            c_cost: c,
            c_cost_source: "cost-curve".into(),
            cost_curve: Some(curve),
            c_reg: None,
            regularity: None,
            c_hat: c,
        },
    ))
}

/// Run a resolved config.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.model()?;
    let x0 = cfg.initial.build(cfg.n_modes)?;
    match cfg.kind {
        ExperimentKind::Simulate => run_simulate(cfg, &model, &x0),
        ExperimentKind::LrControl => run_lr(cfg, &model, &x0),
        ExperimentKind::SourceTerm => run_source(cfg, &model, &x0),
        ExperimentKind::FixedPoint | ExperimentKind::Certificate => run_nonlinear(cfg, &model, &x0),
        ExperimentKind::Probe => run_probe(cfg),
    }
}

#[derive(Serialize)]
struct SimulateResult {
    steps: usize,
    paths: usize,
    initial_energy: f64,
    final_mean_energy: f64,
    max_abs_final: f64,
}

fn run_simulate(cfg: &ExperimentConfig, model: &Model, x0: &ModalState) -> Result<RunOutput> {
    let horizon = cfg.simulate.unwrap_or_default().horizon;
    let steps = (horizon / cfg.dt).round() as usize;
    let n = cfg.n_modes;
    let runs = stats::run_paths(cfg.paths, |i| {
        let path = BrownianPath::generate(cfg.seed, i as u64, cfg.dt, steps);
        simulate(model, x0, 0.0, &path, &Uncontrolled, None)
    });
    let recs: Vec<_> = runs.into_iter().collect::<Result<_>>()?;
    let mut header = vec!["t".to_string(), "mean_energy".to_string()];
    header.extend((1..=n).map(|i| format!("mean_y{i}")));
    header.extend((1..=n).map(|i| format!("mean_z{i}")));
    let mut series = Series::new(header);
    let p = recs.len() as f64;
    for k in 0..=steps {
        let mut row = vec![
            k as f64 * cfg.dt,
            recs.iter().map(|r| r.states[k].energy()).sum::<f64>() / p,
        ];
        let mean = recs
            .iter()
            .fold(DVector::zeros(2 * n), |acc, r| acc + r.states[k].stacked())
            / p;
        row.extend(mean.iter());
        series.push(row);
    }
    let result = SimulateResult {
        steps,
        paths: recs.len(),
        initial_energy: x0.energy(),
        final_mean_energy: recs.iter().map(|r| r.final_state().energy()).sum::<f64>() / p,
        max_abs_final: recs.iter().map(|r| r.final_state().max_abs()).fold(0.0, f64::max),
    };
    Ok(RunOutput {
        report: envelope(cfg, None, result)?,
        series,
    })
}

fn run_lr(cfg: &ExperimentConfig, model: &Model, x0: &ModalState) -> Result<RunOutput> {
    let lr = cfg.lr_config(cfg.lr_section().horizon, 1.0)?;
    let out = lebeau_robbiano_synthesize(model, x0, &lr)?;
    let mut series = Series::new([
        "index",
        "start",
        "end",
        "tau",
        "r",
        "band",
        "epsilon",
        "energy_end",
        "cost",
    ]);
    for iv in &out.report.intervals {
        series.push(vec![
            iv.index as f64,
            iv.start,
            iv.end,
            iv.tau,
            iv.r,
            iv.band as f64,
            iv.epsilon,
            iv.energy_end,
            iv.cost,
        ]);
    }
    Ok(RunOutput {
        report: envelope(cfg, None, &out.report)?,
        series,
    })
}

fn run_source(cfg: &ExperimentConfig, model: &Model, x0: &ModalState) -> Result<RunOutput> {
    let (c, chat) = cost_constant(cfg, model, x0)?;
    let sc = cfg.source_config(c)?;
    let field = cfg.source.clone().unwrap_or_default().field;
    let out = source_term_control(model, x0, &field, &sc)?;
    let mut series = Series::new([
        "block",
        "start",
        "end",
        "epsilon",
        "mean_data_energy",
        "mean_cost",
        "mean_residual_energy",
        "log_cost_bound",
    ]);
    for b in &out.report.blocks {
        series.push(vec![
            b.index as f64,
            b.start,
            b.end,
            b.epsilon,
            b.mean_data_energy,
            b.mean_cost,
            b.mean_residual_energy,
            b.log_cost_bound,
        ]);
    }
    Ok(RunOutput {
        report: envelope(cfg, Some(&chat), &out.report)?,
        series,
    })
}

fn run_nonlinear(cfg: &ExperimentConfig, model: &Model, x0: &ModalState) -> Result<RunOutput> {
    let (c_cost, mut chat) = cost_constant(cfg, model, x0)?;
    let sc = cfg.source_config(c_cost)?;
    let cal = cfg.calibration.clone().unwrap_or_default();
    let c_reg = match cal.c_reg {
        Some(v) => v,
        None => {
            let r = calibrate_regularity(
                model,
                &sc,
                cal.paths.unwrap_or(cfg.paths),
                cfg.seed + CALIBRATION_SEED_OFFSET,
            )?;
            let v = r.c_reg;
            chat.regularity = Some(r);
            v
        }
    };
    let c_hat = c_cost.max(c_reg);
    chat.c_reg = Some(c_reg);
    chat.c_hat = c_hat;
    let fps = cfg.fixed_point.unwrap_or_default();
    let cert = cfg.certificate.unwrap_or_default();
    let t = sc.weights.horizon;
    let fp = FixedPointConfig {
        source: sc,
        radius: fps.radius.unwrap_or(0.5 * (-c_hat / t).exp()),
        max_iters: fps.max_iters,
        tolerance: fps.tolerance,
    };
    if cfg.kind == ExperimentKind::Certificate {
        let cc = CertificateConfig {
            fixed_point: fp,
            epsilon: cert.epsilon,
            c_hat,
            z: cert.z,
        };
        let rep = statistical_certificate(model, &cc)?;
        let mut series = Series::new([
            "paths",
            "exceedance_count",
            "exceedance_fraction",
            "markov_bound",
            "ci_margin",
        ]);
        series.push(vec![
            rep.paths as f64,
            rep.exceedance_count as f64,
            rep.exceedance_fraction,
            rep.markov_bound,
            rep.ci_margin,
        ]);
        return Ok(RunOutput {
            report: envelope(cfg, Some(&chat), &rep)?,
            series,
        });
    }
    let norm = fps.data_norm.unwrap_or((-2.0 * c_hat / t).exp() * cert.epsilon.sqrt());
    let seed = cfg.seed;
    let out = fixed_point_solve(model, &|i| random_data(model, seed, i as u64, norm), &fp, c_hat)?;
    let mut series = Series::new(["path", "iterations", "converged", "final_distance", "xt_sq", "data_sq"]);
    for (i, p) in out.paths.iter().enumerate() {
        series.push(vec![
            i as f64,
            p.iterations as f64,
            if p.converged { 1.0 } else { 0.0 },
            p.distances.last().copied().unwrap_or(0.0),
            p.xt.value_sq(),
            p.data_sq,
        ]);
    }
    Ok(RunOutput {
        report: envelope(cfg, Some(&chat), &out.report)?,
        series,
    })
}

fn run_probe(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let probe = cfg.probe.clone().unwrap_or_default();
    let region = cfg.system().region;
    let couplings = cfg.system().coeffs.couplings;
    let pi = std::f64::consts::PI;
    match probe {
        ProbeSection::Spectral { max_modes, samples } => {
            let r = ((max_modes as f64) * pi).powi(4);
            let rep = spectral_inequality_probe(r, region, samples, cfg.seed)?;
            let mut series = Series::new(["r", "band", "ratio", "sampled"]);
            for row in &rep.rows {
                series.push(vec![row.r, row.band as f64, row.ratio, row.sampled]);
            }
            Ok(RunOutput {
                report: envelope(cfg, None, &rep)?,
                series,
            })
        }
        ProbeSection::Band {
            modes,
            taus,
            brute_samples,
        } => {
            let r = ((modes as f64) * pi).powi(4);
            let mut series = Series::new(["tau", "constant", "brute_force"]);
            let mut rows = Vec::new();
            for &tau in &taus {
                let b = band_observability_constant(r, tau, &couplings, region)?;
                let brute = if brute_samples > 0 {
                    band_observability_brute(r, tau, &couplings, region, brute_samples, 30, cfg.seed)?
                } else {
                    f64::NAN
                };
                series.push(vec![tau, b.constant, brute]);
                rows.push(serde_json::json!({ "tau": tau, "constant": b.constant, "band": b.band,
                    "brute_force": if brute.is_nan() { None } else { Some(brute) } }));
            }
            Ok(RunOutput {
                report: envelope(cfg, None, rows)?,
                series,
            })
        }
        ProbeSection::Clamped {
            n_points,
            adjoint,
            family,
        } => {
            let mut series = Series::new(["n_points", "constant", "ensemble_estimate", "ensemble_std_error"]);
            let mut rows = Vec::new();
            for &n in &n_points {
                let p = clamped_observability_probe(n, &adjoint, family, cfg.paths, cfg.seed)?;
                series.push(vec![n as f64, p.constant, p.ensemble_estimate, p.ensemble_std_error]);
                rows.push(p);
            }
            Ok(RunOutput {
                report: envelope(cfg, None, rows)?,
                series,
            })
        }
        ProbeSection::Duality {
            n_points,
            adjoint,
            regularizations,
        } => {
            let grid: Vec<f64> = (1..=n_points).map(|i| i as f64 / (n_points + 1) as f64).collect();
            let yt: Vec<f64> = grid.iter().map(|x| (pi * x).sin()).collect();
            let zt: Vec<f64> = grid.iter().map(|x| x * (1.0 - x)).collect();
            let mut series = Series::new([
                "regularization",
                "control_energy",
                "residual",
                "residual_bound",
                "identity_residual",
            ]);
            let mut rows = Vec::new();
            for &k in &regularizations {
                let d = duality_control_backward(n_points, &adjoint, &yt, &zt, Some(k), 4, cfg.seed)?;
                series.push(vec![
                    k,
                    d.control_energy,
                    d.residual,
                    d.residual_bound,
                    d.identity_residual,
                ]);
                rows.push(d);
            }
            Ok(RunOutput {
                report: envelope(cfg, None, rows)?,
                series,
            })
        }
        ProbeSection::Carleman {
            mu,
            lambdas,
            m,
            k_const,
            d1,
            horizon,
        } => {
            let model = cfg.model()?;
            let x0 = cfg.initial.build(cfg.n_modes)?;
            let steps = (horizon / cfg.dt).round() as usize;
            let path = BrownianPath::generate(cfg.seed, 0, cfg.dt, steps);
            let rec = simulate(&model, &x0, 0.0, &path, &Uncontrolled, None)?;
            let psi = psi_build(d1)?;
            let mut series = Series::new(["lambda", "i_ks", "i_h"]);
            let mut rows = Vec::new();
            for &l in &lambdas {
                let p = CarlemanParams::new(mu, l, m, k_const, psi, horizon)?;
                let f = carleman_functionals(&rec, &p, 16, None)?;
                series.push(vec![l, f.i_ks, f.i_h]);
                rows.push(serde_json::json!({ "lambda": l, "functionals": f }));
            }
            Ok(RunOutput {
                report: envelope(cfg, None, rows)?,
                series,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves() {
        let cfg = ExperimentConfig::parse("kind = \"simulate\"")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.simulate, Some(SimulateSection::default()));
        assert_eq!(cfg.paths, 200);
        assert!(cfg.lr.is_none());
    }

    #[test]
    fn json_accepted() {
        let cfg = ExperimentConfig::parse(r#"{"kind": "probe", "probe": {"probe": "band"}}"#).unwrap();
        assert!(matches!(cfg.probe, Some(ProbeSection::Band { modes: 4, .. })));
    }

    #[test]
    fn invalid_field_is_named() {
        let cfg = ExperimentConfig::parse("kind = \"source-term\"\n[source]\nq = 1.5").unwrap();
        match cfg.resolve() {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "source.q"),
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::parse("kind = \"simulate\"\nbogus = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(err.is_validation());
    }

    #[test]
    fn nonlinear_kinds_default_to_t_09() {
        let cfg = ExperimentConfig::parse("kind = \"certificate\"")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.source.as_ref().unwrap().horizon, 0.9);
        assert_eq!(cfg.certificate.unwrap().epsilon, 0.1);
        assert!(cfg.system().coeffs.nonlinear);
    }
}
