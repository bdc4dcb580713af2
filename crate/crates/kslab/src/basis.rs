//! Sine eigenbasis of the hinged fourth-order / Dirichlet second-order pair on (0, 1).
//!
//! Mode `i` (numbered from 1) has eigenfunction `√2 sin(iπx)`, heat eigenvalue
//! `λ_i = (iπ)²` and fourth-order eigenvalue `μ_i = λ_i²`. Internally vectors are
//! zero-indexed, so slot `k` holds mode `k + 1`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues of the first `n_modes` sine modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    n_modes: usize,
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::param("n_modes", "must be at least 1"));
        }
        let lambda: Vec<f64> = (1..=n_modes).map(|i| heat_eigenvalue(i)).collect();
        let mu = lambda.iter().map(|l| l * l).collect();
        Ok(Self { n_modes, lambda, mu })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Number of leading modes with `μ_i ≤ r`, up to a relative rounding slack of `1e-12`.
    pub fn band_size(&self, r: f64) -> usize {
        let r = r * (1.0 + 1e-12);
        self.mu.iter().take_while(|&&m| m <= r).count()
    }

    /// Evaluate `Σ c_i φ_i` on a uniform grid of `n_points` points.
    pub fn synthesize(&self, coeffs: &[f64], n_points: usize) -> Result<FieldOnGrid> {
        FieldOnGrid::from_fn(n_points, |x| {
            coeffs.iter().enumerate().map(|(k, c)| c * phi(k + 1, x)).sum()
        })
    }

    /// Modal coefficients of a grid field by composite quadrature.
    pub fn analyze(&self, field: &FieldOnGrid) -> Vec<f64> {
        (1..=self.n_modes)
            .map(|i| field.integrate_with(|x, v| v * phi(i, x)))
            .collect()
    }
}

fn heat_eigenvalue(i: usize) -> f64 {
    let w = i as f64 * PI;
    w * w
}

/// `φ_i(x) = √2 sin(iπx)`.
pub fn phi(i: usize, x: f64) -> f64 {
    SQRT_2 * (i as f64 * PI * x).sin()
}

/// `φ_i'(x) = √2 iπ cos(iπx)`.
pub fn phi_x(i: usize, x: f64) -> f64 {
    let w = i as f64 * PI;
    SQRT_2 * w * (w * x).cos()
}

/// One eigenpair of the hinged problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenpair {
    pub index: usize,
    pub lambda: f64,
    pub mu: f64,
}

impl Eigenpair {
    pub fn eval(&self, x: f64) -> f64 {
        phi(self.index, x)
    }
}

/// Eigenvalues and eigenfunction of mode `i`.
///
/// ```
/// let e = kslab::basis::eigenpair(1).unwrap();
/// assert!((e.lambda - std::f64::consts::PI.powi(2)).abs() < 1e-12);
/// assert_eq!(e.eval(0.0), 0.0);
/// assert!(kslab::basis::eigenpair(0).is_err());
/// ```
pub fn eigenpair(i: i64) -> Result<Eigenpair> {
    if i < 1 {
        return Err(Error::InvalidMode(i));
    }
    let lambda = heat_eigenvalue(i as usize);
    Ok(Eigenpair {
        index: i as usize,
        lambda,
        mu: lambda * lambda,
    })
}

/// Paired mode coefficients `(y, z)` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalState {
    pub y: DVector<f64>,
    pub z: DVector<f64>,
}

impl ModalState {
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            y: DVector::zeros(n_modes),
            z: DVector::zeros(n_modes),
        }
    }

    pub fn new(y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if y.len() != z.len() {
            return Err(Error::Dimension(format!(
                "y has {} modes but z has {}",
                y.len(),
                z.len()
            )));
        }
        Ok(Self {
            y: DVector::from_vec(y),
            z: DVector::from_vec(z),
        })
    }

    pub fn n_modes(&self) -> usize {
        self.y.len()
    }

    /// `[y; z]` as one vector of length `2n`.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.n_modes();
        DVector::from_fn(2 * n, |k, _| if k < n { self.y[k] } else { self.z[k - n] })
    }

    pub fn from_stacked(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            y: x.rows(0, n).into_owned(),
            z: x.rows(n, n).into_owned(),
        }
    }

    /// Plain `‖y‖² + ‖z‖²` in L².
    pub fn energy(&self) -> f64 {
        self.y.norm_squared() + self.z.norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().chain(self.z.iter()).all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            y: &self.y * s,
            z: &self.z * s,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            y: &self.y + &other.y,
            z: &self.z + &other.z,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            y: &self.y - &other.y,
            z: &self.z - &other.z,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.y.iter().chain(self.z.iter()).fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Zero every mode with `μ_i > r` in both components.
///
/// ```
/// use kslab::basis::{project_band, ModalState, SpectralBasis};
/// let b = SpectralBasis::new(4).unwrap();
/// let s = ModalState::new(vec![1.0; 4], vec![1.0; 4]).unwrap();
/// let p = project_band(&s, &b, b.mu()[1]);
/// assert_eq!(p.y.as_slice(), &[1.0, 1.0, 0.0, 0.0]);
/// ```
pub fn project_band(state: &ModalState, basis: &SpectralBasis, r: f64) -> ModalState {
    let keep = basis.band_size(r);
    let mut out = state.clone();
    for k in keep..state.n_modes() {
        out.y[k] = 0.0;
        out.z[k] = 0.0;
    }
    out
}

/// Which half of a [`ModalState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Y,
    Z,
}

/// Discrete `H^s` norm `(Σ (1+λ_i)^s c_i²)^{1/2}`.
///
/// `y` accepts `s ∈ {0, 1, 2, 4}`, `z` accepts `s ∈ {0, 1, 2}`.
pub fn sobolev_norm(state: &ModalState, basis: &SpectralBasis, order: u32, component: Component) -> Result<f64> {
    let ok = match component {
        Component::Y => matches!(order, 0 | 1 | 2 | 4),
        Component::Z => order <= 2,
    };
    if !ok {
        return Err(Error::param(
            "order",
            format!("H^{order} is not available for component {component:?}"),
        ));
    }
    let c = match component {
        Component::Y => &state.y,
        Component::Z => &state.z,
    };
    Ok(sobolev_sq(c.as_slice(), basis.lambda(), order).sqrt())
}

pub(crate) fn sobolev_sq(c: &[f64], lambda: &[f64], order: u32) -> f64 {
    c.iter()
        .zip(lambda)
        .map(|(v, l)| (1.0 + l).powi(order as i32) * v * v)
        .sum()
}

/// Samples of a function on a uniform grid of [0, 1], endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOnGrid {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl FieldOnGrid {
    pub fn from_fn(n_points: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::param("n_points", "grid needs at least 2 points"));
        }
        let h = 1.0 / (n_points - 1) as f64;
        let grid: Vec<f64> = (0..n_points).map(|k| k as f64 * h).collect();
        let values = grid.iter().map(|&x| f(x)).collect();
        Ok(Self { grid, values })
    }

    /// Composite Simpson on an odd point count, trapezoid otherwise.
    pub fn integrate_with(&self, g: impl Fn(f64, f64) -> f64) -> f64 {
        let n = self.grid.len();
        let h = self.grid[1] - self.grid[0];
        let v: Vec<f64> = self.grid.iter().zip(&self.values).map(|(&x, &u)| g(x, u)).collect();
        if n % 2 == 1 && n >= 3 {
            let mut s = v[0] + v[n - 1];
            for (k, w) in v.iter().enumerate().take(n - 1).skip(1) {
                s += if k % 2 == 1 { 4.0 * w } else { 2.0 * w };
            }
            s * h / 3.0
        } else {
            let inner: f64 = v[1..n - 1].iter().sum();
            h * (inner + 0.5 * (v[0] + v[n - 1]))
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.integrate_with(|_, u| u * u).sqrt()
    }
}

/// Mass matrix of the control region: `M_ij = ∫_a^b φ_i φ_j dx`.
///
/// Injecting a control field `Σ u_j φ_j` multiplied by the indicator of
/// `(a, b)` gives the modal forcing `M u`, and `∫_a^b |h|² = uᵀ M u`.
pub fn region_mass_matrix(n_modes: usize, a: f64, b: f64) -> DMatrix<f64> {
    // ∫ 2 sin(iπx) sin(jπx) = ∫ cos((i-j)πx) - cos((i+j)πx)
    let int_cos = |m: usize| -> f64 {
        if m == 0 {
            b - a
        } else {
            let w = m as f64 * PI;
            ((w * b).sin() - (w * a).sin()) / w
        }
    };
    DMatrix::from_fn(n_modes, n_modes, |r, c| {
        let (i, j) = (r + 1, c + 1);
        int_cos(i.abs_diff(j)) - int_cos(i + j)
    })
}

/// Modal coefficients of `y·y_x`, truncated to the same number of modes.
///
/// The product of two sine series is expanded exactly, so the result equals
/// a fully dealiased Galerkin projection.
///
/// ```
/// let c = kslab::basis::transport_product(&[1.0, 0.0, 0.0]);
/// let expected = std::f64::consts::PI / std::f64::consts::SQRT_2;
/// assert!((c[1] - expected).abs() < 1e-14);
/// assert_eq!(c[0], 0.0);
/// ```
pub fn transport_product(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let mut out = vec![0.0; n];
    for i in 1..=n {
        let ci = c[i - 1];
        if ci == 0.0 {
            continue;
        }
        for j in 1..=n {
            let w = ci * c[j - 1] * j as f64;
            if w == 0.0 {
                continue;
            }
            if i + j <= n {
                out[i + j - 1] += w;
            }
            if i != j {
                let d = i.abs_diff(j);
                if d <= n {
                    out[d - 1] += if i > j { w } else { -w };
                }
            }
        }
    }
    let s = PI / SQRT_2;
    out.iter_mut().for_each(|v| *v *= s);
    out
}
