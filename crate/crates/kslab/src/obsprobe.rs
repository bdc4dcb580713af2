//! Observability probes: spectral inequality, finite-band observability,
//! a clamped finite-difference adjoint, duality control and Carleman
//! functionals.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{phi, region_mass_matrix};
use crate::error::{Error, Result};
use crate::sde::{Couplings, TrajectoryRecord};
use crate::stats::{self, LinearFit};
use crate::weights::CarlemanParams;

const GL8_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_W: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Eight-point Gauss–Legendre nodes and weights on `[a, b]`.
fn gauss8(a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    (0..8).map(move |i| {
        let (x, w) = (GL8_X[i / 2], GL8_W[i / 2]);
        let s = if i % 2 == 0 { -1.0 } else { 1.0 };
        (c + s * r * x, r * w)
    })
}

fn check_region(region: (f64, f64)) -> Result<()> {
    let (a, b) = region;
    if !(0.0 <= a && a < b && b <= 1.0) {
        return Err(Error::param("region", "must satisfy 0 ≤ a < b ≤ 1"));
    }
    Ok(())
}

/// Number of sine modes with `μ_i = (iπ)^4 ≤ r`, with the same relative
/// slack as the basis.
fn modes_below(r: f64) -> usize {
    let mut k = 0;
    while ((k + 1) as f64 * std::f64::consts::PI).powi(4) <= r * (1.0 + 1e-12) {
        k += 1;
    }
    k
}

/// Relative eigenvalue floor of the scaled observation form below which
/// directions are treated as numerically unobserved when Cholesky fails.
pub const GRAMIAN_FLOOR: f64 = 1e-14;

/// Largest `λ` with `H w = λ G w` for symmetric `H ⪰ 0` and `G ≻ 0`.
///
/// With `H = F Fᵀ` and `S G S = L Lᵀ` (`S` the diagonal scaling to unit
/// diagonal) the answer is `σ_max(L⁻¹ S F)²`. When `S G S` is only
/// semidefinite in floating point, its eigenvalues below
/// `GRAMIAN_FLOOR · max` are dropped instead.
pub fn max_generalized_ratio(h: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    generalized_max(h, g, GRAMIAN_FLOOR).map(|(v, _)| v)
}

/// Value and maximising vector of [`max_generalized_ratio`] with an
/// explicit floor.
pub fn generalized_max(h: &DMatrix<f64>, g: &DMatrix<f64>, floor: f64) -> Result<(f64, DVector<f64>)> {
    let n = h.nrows();
    if h.shape() != (n, n) || g.shape() != (n, n) {
        return Err(Error::Dimension("forms must be square and equal in size".into()));
    }
    let eh = (0.5 * (h + h.transpose())).symmetric_eigen();
    let mut f = eh.eigenvectors;
    for (j, &l) in eh.eigenvalues.iter().enumerate() {
        f.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    let s = DVector::from_iterator(
        n,
        g.diagonal()
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { f64::NAN }),
    );
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Unobservable(
            "observation form has a non-positive diagonal entry".into(),
        ));
    }
    let scale = DMatrix::from_diagonal(&s);
    let gs = &scale * g * &scale;
    let gs = 0.5 * (&gs + gs.transpose());
    let sf = &scale * f;
    // Whitening map W with Wᵀ W = (S G S)⁻¹ on the retained space.
    let (m, back): (DMatrix<f64>, Box<dyn Fn(&DVector<f64>) -> DVector<f64>>) = match gs.clone().cholesky() {
        Some(chol) => {
            let l = chol.l();
            let m = l
                .solve_lower_triangular(&sf)
                .ok_or_else(|| Error::LinearAlgebra("triangular solve failed".into()))?;
            let lt = l.transpose();
            (
                m,
                Box::new(move |u| lt.solve_upper_triangular(u).unwrap_or_else(|| u.clone())),
            )
        }
        None => {
            let eg = gs.symmetric_eigen();
            let top = eg.eigenvalues.max();
            let keep: Vec<usize> = (0..n).filter(|&i| eg.eigenvalues[i] > floor * top).collect();
            if keep.is_empty() {
                return Err(Error::Unobservable("observation form vanishes".into()));
            }
            let w = DMatrix::from_fn(keep.len(), n, |r, c| {
                eg.eigenvectors[(c, keep[r])] / eg.eigenvalues[keep[r]].sqrt()
            });
            let m = &w * sf;
            (m, Box::new(move |u| w.transpose() * u))
        }
    };
    let svd = m.svd(true, false);
    let i = svd.singular_values.imax();
    let sigma = svd.singular_values[i];
    let u = svd.u.as_ref().expect("requested").column(i).into_owned();
    let x = &scale * back(&u);
    let norm = x.norm();
    Ok((sigma * sigma, if norm > 0.0 { x / norm } else { x }))
}

/// One row of the spectral-inequality sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralRow {
    pub r: f64,
    pub band: usize,
    /// `max ‖z‖² / ‖z‖²_{L²(D₀)}` over the band.
    pub ratio: f64,
    /// Largest ratio among random samples; never above `ratio`.
    pub sampled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralProbe {
    pub region: (f64, f64),
    pub rows: Vec<SpectralRow>,
    /// `ln ratio ≈ intercept + slope · r^{1/4}`.
    pub fit: Option<LinearFit>,
    pub nondecreasing: bool,
}

/// Sweep `r` over `μ_1, …, μ_K ≤ r`; each band's worst ratio is the
/// reciprocal of the smallest eigenvalue of the `D₀` mass matrix.
pub fn spectral_inequality_probe(r: f64, region: (f64, f64), samples: usize, seed: u64) -> Result<SpectralProbe> {
    check_region(region)?;
    let k_max = modes_below(r);
    if k_max == 0 {
        return Err(Error::param("r", format!("band is empty: r = {r} < μ₁")));
    }
    // Rows √w_q φ_i(x_q) on Gauss panels of D₀, so that AᵀA is the mass
    // matrix; σ_min(A)² resolves far below the rounding floor of the mass
    // matrix eigenvalues.
    let panels = 64;
    let hx = (region.1 - region.0) / panels as f64;
    let nodes: Vec<(f64, f64)> = (0..panels)
        .flat_map(|i| gauss8(region.0 + i as f64 * hx, region.0 + (i + 1) as f64 * hx))
        .collect();
    let full = region_mass_matrix(k_max, region.0, region.1);
    let quad = DMatrix::from_fn(nodes.len(), k_max, |q, i| nodes[q].1.sqrt() * phi(i + 1, nodes[q].0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let m = full.view((0, 0), (k, k)).into_owned();
        let a = quad.columns(0, k).into_owned();
        let smin = a.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
        let min = smin * smin;
        if !(min > 0.0) {
            return Err(Error::Unobservable(format!(
                "band of {k} modes has a null combination on D₀"
            )));
        }
        let mut sampled: f64 = 0.0;
        for _ in 0..samples {
            let c = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            sampled = sampled.max(c.norm_squared() / (c.transpose() * &m * &c)[0]);
        }
        rows.push(SpectralRow {
            r: ((k as f64) * std::f64::consts::PI).powi(4),
            band: k,
            ratio: 1.0 / min,
            sampled,
        });
    }
    let x: Vec<f64> = rows.iter().map(|w| w.r.powf(0.25)).collect();
    let y: Vec<f64> = rows.iter().map(|w| w.ratio.ln()).collect();
    let nondecreasing = rows.windows(2).all(|w| w[1].ratio >= w[0].ratio * (1.0 - 1e-12));
    Ok(SpectralProbe {
        region,
        rows,
        fit: stats::linear_fit(&x, &y),
        nondecreasing,
    })
}

/// Per-mode backward dynamics of the band adjoint in reversed time `s = τ - t`,
/// `d(u_i, v_i)/ds = B_i (u_i, v_i)` with `B_i = [[-μ_i + a1, a3], [a2, -λ_i + a4]]`.
fn mode_matrix(i: usize, c: &Couplings) -> Matrix2<f64> {
    let l = ((i as f64) * std::f64::consts::PI).powi(2);
    Matrix2::new(-l * l + c.a1, c.a3, c.a2, -l + c.a4)
}

/// Real eigen-decomposition of a 2×2 matrix with distinct real eigenvalues.
fn eigen2(b: &Matrix2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    let tr = b.trace();
    let det = b.determinant();
    let disc = 0.25 * tr * tr - det;
    let scale = 0.25 * tr * tr;
    if disc <= 1e-24 * scale {
        return Err(Error::param(
            "couplings",
            "modal exponents are complex or repeated; the closed-form band Gramian needs distinct real ones",
        ));
    }
    let sq = disc.sqrt();
    // Stable pair: the larger-magnitude root first, the other from det.
    let k1 = 0.5 * tr + if tr >= 0.0 { sq } else { -sq };
    let k2 = det / k1;
    let vec_for = |k: f64| -> Vector2<f64> {
        // (B - kI) v = 0; pick the better-conditioned row.
        let r0 = Vector2::new(b[(0, 1)], k - b[(0, 0)]);
        let r1 = Vector2::new(k - b[(1, 1)], b[(1, 0)]);
        let v = if r0.norm() >= r1.norm() { r0 } else { r1 };
        v / v.norm()
    };
    let v = Matrix2::from_columns(&[vec_for(k1), vec_for(k2)]);
    Ok((Vector2::new(k1, k2), v))
}

/// Closed-form band observability forms for terminal data `w = (u_τ, v_τ)`
/// ordered `[u_1..u_k, v_1..v_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramianPair {
    /// `w ↦ ∫_0^τ ∫_{D₀} |u|²`.
    pub obs: DMatrix<f64>,
    /// `w ↦ ‖u(0)‖² + ‖v(0)‖²` (or terminal energy for forward probes).
    pub terminal: DMatrix<f64>,
}

pub fn band_gramians(k: usize, tau: f64, couplings: &Couplings, region: (f64, f64)) -> Result<GramianPair> {
    let mass = region_mass_matrix(k, region.0, region.1);
    let mut kappa = Vec::with_capacity(k);
    let mut vecs = Vec::with_capacity(k);
    let mut inv = Vec::with_capacity(k);
    for i in 1..=k {
        let (kv, v) = eigen2(&mode_matrix(i, couplings))?;
        let vi = v
            .try_inverse()
            .ok_or_else(|| Error::LinearAlgebra(format!("mode {i} eigenvectors are dependent")))?;
        kappa.push(kv);
        vecs.push(v);
        inv.push(vi);
    }
    // ξ = T w with ξ_(i,p) = (V_i^{-1} (u_i, v_i))_p, stored at 2i + p.
    let n = 2 * k;
    let mut t = DMatrix::zeros(n, n);
    for i in 0..k {
        for p in 0..2 {
            t[(2 * i + p, i)] = inv[i][(p, 0)];
            t[(2 * i + p, k + i)] = inv[i][(p, 1)];
        }
    }
    let mut g_xi = DMatrix::zeros(n, n);
    for i in 0..k {
        for p in 0..2 {
            for j in 0..k {
                for q in 0..2 {
                    let s = kappa[i][p] + kappa[j][q];
                    let integral = if s == 0.0 { tau } else { (s * tau).exp_m1() / s };
                    g_xi[(2 * i + p, 2 * j + q)] = mass[(i, j)] * vecs[i][(0, p)] * vecs[j][(0, q)] * integral;
                }
            }
        }
    }
    let obs = t.transpose() * g_xi * &t;
    let mut e = DMatrix::zeros(n, n);
    for i in 0..k {
        let d = Matrix2::from_diagonal(&Vector2::new((kappa[i][0] * tau).exp(), (kappa[i][1] * tau).exp()));
        let m = vecs[i] * d * inv[i];
        for (r, rr) in [i, k + i].into_iter().enumerate() {
            for (c, cc) in [i, k + i].into_iter().enumerate() {
                e[(rr, cc)] = m[(r, c)];
            }
        }
    }
    let terminal = e.transpose() * e;
    Ok(GramianPair {
        obs: 0.5 * (&obs + obs.transpose()),
        terminal: 0.5 * (&terminal + terminal.transpose()),
    })
}

/// Band adjoint at reversed time `s` from terminal data `w` (ordered
/// `[u_1..u_k, v_1..v_k]`), by the per-mode eigen-decomposition used for the
/// Gramians.
pub fn band_adjoint_state(k: usize, couplings: &Couplings, w: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
    if w.len() != 2 * k {
        return Err(Error::Dimension(format!("terminal data must have {} entries", 2 * k)));
    }
    let mut out = DVector::zeros(2 * k);
    for i in 0..k {
        let (kv, v) = eigen2(&mode_matrix(i + 1, couplings))?;
        let vi = v
            .try_inverse()
            .ok_or_else(|| Error::LinearAlgebra(format!("mode {} eigenvectors are dependent", i + 1)))?;
        let d = Matrix2::from_diagonal(&Vector2::new((kv[0] * s).exp(), (kv[1] * s).exp()));
        let x = v * d * vi * Vector2::new(w[i], w[k + i]);
        out[i] = x[0];
        out[k + i] = x[1];
    }
    Ok(out)
}

/// Drift matrix of the band adjoint in reversed time, same ordering.
pub fn band_adjoint_matrix(k: usize, couplings: &Couplings) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        let m = mode_matrix(i + 1, couplings);
        b[(i, i)] = m[(0, 0)];
        b[(i, k + i)] = m[(0, 1)];
        b[(k + i, i)] = m[(1, 0)];
        b[(k + i, k + i)] = m[(1, 1)];
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandObservability {
    pub band: usize,
    pub tau: f64,
    /// Smallest `C` with `‖u(0)‖² + ‖v(0)‖² ≤ C ∫_0^τ∫_{D₀}|u|²` on the band.
    pub constant: f64,
}

/// Observability constant of the band adjoint. Terminal data and
/// coefficients are deterministic, so the martingale parts vanish and the
/// noise coefficients drop out.
pub fn band_observability_constant(
    r: f64,
    tau: f64,
    couplings: &Couplings,
    region: (f64, f64),
) -> Result<BandObservability> {
    check_region(region)?;
    if !(tau > 0.0) {
        return Err(Error::param("tau", "must be positive"));
    }
    let k = modes_below(r);
    if k == 0 {
        return Err(Error::param("r", "band is empty"));
    }
    let g = band_gramians(k, tau, couplings, region)?;
    let constant = max_generalized_ratio(&g.terminal, &g.obs)?;
    Ok(BandObservability { band: k, tau, constant })
}

/// Ratio `(‖u(0)‖² + ‖v(0)‖²) / ∫∫_{D₀}|u|²` for one terminal datum, by
/// matrix exponentials and Gauss quadrature on geometric time panels.
pub fn band_ratio_quadrature(w: &DVector<f64>, k: usize, tau: f64, couplings: &Couplings, region: (f64, f64)) -> f64 {
    let bs: Vec<Matrix2<f64>> = (1..=k).map(|i| mode_matrix(i, couplings)).collect();
    let at = |s: f64| -> Vec<Vector2<f64>> {
        (0..k)
            .map(|i| (bs[i] * s).exp() * Vector2::new(w[i], w[k + i]))
            .collect()
    };
    let x_nodes: Vec<(f64, f64)> = {
        let panels = 16;
        let h = (region.1 - region.0) / panels as f64;
        (0..panels)
            .flat_map(|p| gauss8(region.0 + p as f64 * h, region.0 + (p + 1) as f64 * h))
            .collect()
    };
    let basis: Vec<Vec<f64>> = x_nodes
        .iter()
        .map(|&(x, _)| (1..=k).map(|i| phi(i, x)).collect())
        .collect();
    let levels = 48;
    let mut edges = vec![0.0];
    edges.extend((0..=levels).rev().map(|j| tau * 0.5_f64.powi(j)));
    let mut obs = 0.0;
    for win in edges.windows(2) {
        for (s, ws) in gauss8(win[0], win[1]) {
            let uv = at(s);
            let mut acc = 0.0;
            for (b, &(_, wx)) in basis.iter().zip(&x_nodes) {
                let u: f64 = (0..k).map(|i| uv[i][0] * b[i]).sum();
                acc += wx * u * u;
            }
            obs += ws * acc;
        }
    }
    let end: f64 = at(tau).iter().map(|v| v.norm_squared()).sum();
    end / obs
}

/// Brute-force maximisation of the band ratio: `samples` random terminal
/// data with log-uniform component magnitudes, then `sweeps` rounds of
/// coordinate line searches over a multiplicative grid.
pub fn band_observability_brute(
    r: f64,
    tau: f64,
    couplings: &Couplings,
    region: (f64, f64),
    samples: usize,
    sweeps: usize,
    seed: u64,
) -> Result<f64> {
    band_brute_argmax(r, tau, couplings, region, samples, sweeps, seed).map(|(v, _)| v)
}

pub fn band_brute_argmax(
    r: f64,
    tau: f64,
    couplings: &Couplings,
    region: (f64, f64),
    samples: usize,
    sweeps: usize,
    seed: u64,
) -> Result<(f64, DVector<f64>)> {
    check_region(region)?;
    let k = modes_below(r);
    if k == 0 {
        return Err(Error::param("r", "band is empty"));
    }
    let n = 2 * k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |w: &DVector<f64>| band_ratio_quadrature(w, k, tau, couplings, region);
    let mut best = DVector::zeros(n);
    let mut best_val = f64::NEG_INFINITY;
    for _ in 0..samples {
        let w = DVector::from_fn(n, |_, _| {
            let mag = 10f64.powf(-8.0 * rng.gen::<f64>());
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        });
        let v = eval(&w);
        if v > best_val {
            best_val = v;
            best = w;
        }
    }
    let steps: Vec<f64> = (-12..=4).map(|e| 10f64.powi(e)).collect();
    for _ in 0..sweeps {
        let before = best_val;
        for j in 0..n {
            let scale = best.amax();
            for &s in &steps {
                for sign in [1.0, -1.0] {
                    let mut trial = best.clone();
                    trial[j] += sign * s * scale;
                    let v = eval(&trial);
                    if v > best_val {
                        best_val = v;
                        best = trial;
                    }
                }
            }
        }
        if best_val <= before * (1.0 + 1e-9) {
            break;
        }
    }
    Ok((best_val, best))
}

/// Second-order finite differences on `n` interior points of (0, 1) with
/// `u = u_x = 0` at both ends (ghost points `u_{-1} = u_1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClampedDiscretization {
    pub n_points: usize,
    pub h: f64,
    /// `u_xxxx`.
    pub d4: DMatrix<f64>,
    /// `-u_xx` with Dirichlet ends.
    pub d2: DMatrix<f64>,
    /// `u_x`.
    pub d1: DMatrix<f64>,
    /// `u_xxx`.
    pub d3: DMatrix<f64>,
}

impl ClampedDiscretization {
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < 5 {
            return Err(Error::param("n_points", "need at least 5 interior points"));
        }
        let n = n_points;
        let h = 1.0 / (n + 1) as f64;
        // Values at interior index j, with boundary zeros and clamped ghosts.
        let pick = |j: isize| -> Option<(usize, f64)> {
            if j >= 0 && (j as usize) < n {
                Some((j as usize, 1.0))
            } else if j == -2 {
                Some((0, 1.0))
            } else if j == n as isize + 1 {
                Some((n - 1, 1.0))
            } else {
                None
            }
        };
        let stencil = |coef: &[(isize, f64)], scale: f64, ghost: bool| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                for &(off, c) in coef {
                    let j = i as isize + off;
                    let hit = if ghost {
                        pick(j)
                    } else if j >= 0 && (j as usize) < n {
                        Some((j as usize, 1.0))
                    } else {
                        None
                    };
                    if let Some((col, s)) = hit {
                        m[(i, col)] += c * s * scale;
                    }
                }
            }
            m
        };
        let h2 = h * h;
        let d4 = stencil(
            &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
            1.0 / (h2 * h2),
            true,
        );
        let d3 = stencil(
            &[(-2, -1.0), (-1, 2.0), (1, -2.0), (2, 1.0)],
            1.0 / (2.0 * h2 * h),
            true,
        );
        let d2 = stencil(&[(-1, -1.0), (0, 2.0), (1, -1.0)], 1.0 / h2, false);
        let d1 = stencil(&[(-1, -1.0), (1, 1.0)], 1.0 / (2.0 * h), false);
        Ok(Self {
            n_points,
            h,
            d4,
            d2,
            d1,
            d3,
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        (1..=self.n_points).map(|i| i as f64 * self.h).collect()
    }

    pub fn min_d4_eigenvalue(&self) -> f64 {
        self.d4
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// `k₁⁴` for the first positive root of `cosh k cos k = 1`.
pub fn clamped_beam_ground_eigenvalue() -> f64 {
    let f = |k: f64| k.cosh() * k.cos() - 1.0;
    let (mut a, mut b) = (4.0, 5.0);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(a) * f(m) <= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    let k = 0.5 * (a + b);
    k.powi(4)
}

/// Parameters of the forward adjoint system on the clamped grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointParams {
    pub gamma: f64,
    #[serde(rename = "gamma_heat")]
    pub big_gamma: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub horizon: f64,
    pub steps: usize,
    pub region: (f64, f64),
}

impl Default for AdjointParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            big_gamma: 1.0,
            d1: 0.1,
            d2: 0.1,
            d3: 0.1,
            horizon: 0.1,
            steps: 200,
            region: (0.3, 0.7),
        }
    }
}

impl AdjointParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.big_gamma > 0.0) {
            return Err(Error::param("gamma", "diffusion coefficients must be positive"));
        }
        if ![self.d1, self.d2, self.d3].iter().all(|d| d.is_finite()) {
            return Err(Error::param("d", "must be finite"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::param("horizon", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::param("steps", "must be positive"));
        }
        check_region(self.region)
    }
}

/// Implicit Euler–Maruyama for `dX = L X dt + N X dW` with `X = (u, v)`:
/// `X_{n+1} = A (X_n + N X_n ΔW)`, `A = (I - dt L)^{-1}`.
///
/// Moment recursions run in spectral coordinates `ξ = Bᵀ X`, where `B`
/// stacks the orthonormal eigenvectors of `D4` (for `u`) and `D2` (for `v`).
/// Strongly damped directions then keep their small entries to relative
/// rather than absolute precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointScheme {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    /// Step matrix on the grid.
    pub a: DMatrix<f64>,
    pub d: (f64, f64, f64),
    /// Grid-L² weight of `∫_{D₀}|u|²` (diagonal, grid coordinates).
    pub w_obs: DVector<f64>,
    /// Orthogonal change of basis, spectral to grid.
    pub basis: DMatrix<f64>,
    a_s: DMatrix<f64>,
    w_s: DMatrix<f64>,
    /// `Q_vᵀ Q_u`, the `d2` noise block in spectral coordinates.
    c: DMatrix<f64>,
}

impl AdjointScheme {
    pub fn new(disc: &ClampedDiscretization, p: &AdjointParams) -> Result<Self> {
        p.validate()?;
        let n = disc.n_points;
        let mut l = DMatrix::zeros(2 * n, 2 * n);
        let uu = -p.gamma * &disc.d4 - &disc.d3 + &disc.d2;
        l.view_mut((0, 0), (n, n)).copy_from(&uu);
        l.view_mut((0, n), (n, n)).copy_from(&disc.d1);
        l.view_mut((n, 0), (n, n)).copy_from(&disc.d1);
        let vv = -p.big_gamma * &disc.d2 + &disc.d1;
        l.view_mut((n, n), (n, n)).copy_from(&vv);
        let dt = p.horizon / p.steps as f64;
        let a = (DMatrix::identity(2 * n, 2 * n) - dt * l)
            .try_inverse()
            .ok_or_else(|| Error::LinearAlgebra("implicit step matrix is singular".into()))?;
        let w_obs = DVector::from_fn(2 * n, |i, _| {
            let x = (i + 1) as f64 * disc.h;
            if i < n && x > p.region.0 && x < p.region.1 {
                disc.h
            } else {
                0.0
            }
        });
        let qu = (0.5 * (&disc.d4 + disc.d4.transpose())).symmetric_eigen().eigenvectors;
        let qv = disc.d2.clone().symmetric_eigen().eigenvectors;
        let mut basis = DMatrix::zeros(2 * n, 2 * n);
        basis.view_mut((0, 0), (n, n)).copy_from(&qu);
        basis.view_mut((n, n), (n, n)).copy_from(&qv);
        let a_s = basis.transpose() * &a * &basis;
        let w_s = basis.transpose() * DMatrix::from_diagonal(&w_obs) * &basis;
        let c = qv.transpose() * &qu;
        Ok(Self {
            n,
            h: disc.h,
            dt,
            steps: p.steps,
            a,
            d: (p.d1, p.d2, p.d3),
            w_obs,
            basis,
            a_s,
            w_s: 0.5 * (&w_s + w_s.transpose()),
            c,
        })
    }

    /// `N X` for the noise `(d1 u, d2 u + d3 v)` in grid coordinates.
    fn noise(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let (d1, d2, d3) = self.d;
        DVector::from_fn(2 * n, |i, _| if i < n { d1 * x[i] } else { d2 * x[i - n] + d3 * x[i] })
    }

    /// Noise matrix in spectral coordinates.
    fn noise_spectral(&self) -> DMatrix<f64> {
        let n = self.n;
        let (d1, d2, d3) = self.d;
        let mut nm = DMatrix::zeros(2 * n, 2 * n);
        nm.view_mut((n, 0), (n, n)).copy_from(&(d2 * &self.c));
        for i in 0..n {
            nm[(i, i)] = d1;
            nm[(n + i, n + i)] = d3;
        }
        nm
    }

    /// `Nᵀ S N` in spectral coordinates, using the block structure of `N`.
    fn noise_congruence(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let (d1, d2, d3) = self.d;
        let c = &self.c;
        let suu = s.view((0, 0), (n, n));
        let suv = s.view((0, n), (n, n));
        let svu = s.view((n, 0), (n, n));
        let svv = s.view((n, n), (n, n));
        let svv_c = svv * c;
        let ct_svv = c.transpose() * svv;
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        let top = d1 * d1 * suu + d1 * d2 * (suv * c + c.transpose() * svu) + d2 * d2 * (c.transpose() * &svv_c);
        out.view_mut((0, 0), (n, n)).copy_from(&top);
        out.view_mut((0, n), (n, n))
            .copy_from(&((d1 * d3) * suv + (d2 * d3) * ct_svv));
        out.view_mut((n, 0), (n, n))
            .copy_from(&((d1 * d3) * svu + (d2 * d3) * svv_c));
        out.view_mut((n, n), (n, n)).copy_from(&((d3 * d3) * svv));
        out
    }

    /// One backward moment step in spectral coordinates:
    /// `E[ξ_{n+1}ᵀ W ξ_{n+1} | ξ_n] = ξ_nᵀ 𝓛(W) ξ_n`.
    pub fn moment_step(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.a_s.transpose() * w * &self.a_s;
        let out = &p + self.dt * self.noise_congruence(&p);
        0.5 * (&out + out.transpose())
    }

    /// Forward second-moment step in spectral coordinates:
    /// `E[ξ_{n+1} η_{n+1}ᵀ]` from `E[ξ_n η_nᵀ]`.
    pub fn joint_step(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        let nm = self.noise_spectral();
        let inner = j + self.dt * (&nm * j * nm.transpose());
        &self.a_s * inner * self.a_s.transpose()
    }

    /// Observation weight in spectral coordinates.
    pub fn obs_weight(&self) -> &DMatrix<f64> {
        &self.w_s
    }

    /// Observation and terminal-energy forms on initial data, in spectral
    /// coordinates (map with [`AdjointScheme::basis`]).
    pub fn gramians(&self) -> GramianPair {
        let n2 = 2 * self.n;
        let mut obs = DMatrix::zeros(n2, n2);
        // G = dt Σ_{n<N} 𝓛ⁿ(W_obs), by Horner: G = dt (W + 𝓛(W + 𝓛(...))).
        for _ in 0..self.steps {
            obs = self.moment_step(&obs) + &self.w_s;
        }
        obs *= self.dt;
        let mut term = DMatrix::identity(n2, n2) * self.h;
        for _ in 0..self.steps {
            term = self.moment_step(&term);
        }
        GramianPair {
            obs: 0.5 * (&obs + obs.transpose()),
            terminal: term,
        }
    }

    /// Mean propagator `E ξ_N = Φ ξ_0` in spectral coordinates.
    pub fn mean_propagator(&self) -> DMatrix<f64> {
        let mut m = DMatrix::identity(2 * self.n, 2 * self.n);
        for _ in 0..self.steps {
            m = &self.a_s * m;
        }
        m
    }

    /// Simulate one path on the grid; returns (observed energy, terminal energy).
    pub fn simulate_energies(&self, x0: &DVector<f64>, seed: u64, path: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        let sq = self.dt.sqrt();
        let mut x = x0.clone();
        let mut obs = 0.0;
        for _ in 0..self.steps {
            obs += self.dt * x.iter().zip(self.w_obs.iter()).map(|(v, w)| w * v * v).sum::<f64>();
            let dw = sq * rng.sample::<f64, _>(StandardNormal);
            x = &self.a * (&x + self.noise(&x) * dw);
        }
        (obs, self.h * x.norm_squared())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClampedProbe {
    pub n_points: usize,
    pub horizon: f64,
    pub region: (f64, f64),
    /// Exact constant of the discretised second moments.
    pub constant: f64,
    /// Largest ensemble ratio over the sampled family, with its standard error.
    pub ensemble_estimate: f64,
    pub ensemble_std_error: f64,
    pub family: usize,
    pub paths: usize,
}

/// Observability constant `E‖(u,v)(T)‖² ≤ C E∫∫_{D₀}|u|²` of the clamped
/// adjoint, exactly from moment forms and by ensemble simulation along the
/// maximising datum plus `family` random data.
pub fn clamped_observability_probe(
    n_points: usize,
    p: &AdjointParams,
    family: usize,
    paths: usize,
    seed: u64,
) -> Result<ClampedProbe> {
    let disc = ClampedDiscretization::new(n_points)?;
    let scheme = AdjointScheme::new(&disc, p)?;
    let g = scheme.gramians();
    let (constant, argmax) = generalized_max(&g.terminal, &g.obs, GRAMIAN_FLOOR)?;
    let mut data = vec![&scheme.basis * argmax];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e);
    for _ in 0..family {
        // Smooth random data: a few low sine modes in u and v.
        let grid = disc.grid();
        let c: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = DVector::from_fn(2 * n_points, |i, _| {
            let (off, x) = if i < n_points {
                (0, grid[i])
            } else {
                (4, grid[i - n_points])
            };
            (0..4).map(|m| c[off + m] * phi(m + 1, x)).sum::<f64>()
        });
        data.push(x);
    }
    let mut best = (0.0, 0.0);
    for (k, x0) in data.iter().enumerate() {
        let runs = stats::run_paths(paths, |i| scheme.simulate_energies(x0, seed, (k * paths + i) as u64));
        let obs: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let term: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (mo, mt) = (stats::mean(&obs), stats::mean(&term));
        let ratio = mt / mo;
        // Delta-method error of a ratio of means.
        let n = paths as f64;
        let cov = if paths > 1 {
            obs.iter().zip(&term).map(|(a, b)| (a - mo) * (b - mt)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let var = (stats::variance(&term) / (mo * mo) + mt * mt * stats::variance(&obs) / mo.powi(4)
            - 2.0 * mt * cov / mo.powi(3))
            / n;
        if ratio > best.0 {
            best = (ratio, var.max(0.0).sqrt());
        }
    }
    Ok(ClampedProbe {
        n_points,
        horizon: p.horizon,
        region: p.region,
        constant,
        ensemble_estimate: best.0,
        ensemble_std_error: best.1,
        family,
        paths,
    })
}

/// Least-norm control of the backward system through the adjoint Gramian.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityControl {
    pub n_points: usize,
    /// Tikhonov weight actually used (0 for a plain solve).
    pub regularization: f64,
    /// `E ∫∫_{D₀} |h|²` with `h = χ_{D₀} û`.
    pub control_energy: f64,
    /// Grid-L² norm of the reached state `(y(0), z(0))`.
    pub residual: f64,
    /// Grid-L² norm of the terminal data.
    pub data_norm: f64,
    /// Observability constant of the same discretisation.
    pub observability: f64,
    /// `½ √(κ C / h) ‖data‖`, which bounds `residual` for `κ > 0`.
    pub residual_bound: f64,
    /// Largest relative gap in the duality identity over the test data.
    pub identity_residual: f64,
    pub tests: usize,
    /// The adjoint initial datum generating the control.
    #[serde(skip)]
    pub adjoint_initial: DVector<f64>,
}

/// Control the backward system from terminal data `(y_T, z_T)` on the clamped
/// grid. The control is `h = χ_{D₀} û` with `û` the adjoint started at `û₀`
/// solving `(G + κ I) û₀ = h Φᵀ (y_T, z_T)`; `(y(0), z(0))` is what the
/// discrete duality pairing leaves over.
///
/// `regularization = None` tries a plain Cholesky solve and falls back to
/// `κ = 1e-10 · max diag G`.
pub fn duality_control_backward(
    n_points: usize,
    p: &AdjointParams,
    y_t: &[f64],
    z_t: &[f64],
    regularization: Option<f64>,
    tests: usize,
    seed: u64,
) -> Result<DualityControl> {
    let disc = ClampedDiscretization::new(n_points)?;
    let scheme = AdjointScheme::new(&disc, p)?;
    if y_t.len() != n_points || z_t.len() != n_points {
        return Err(Error::Dimension(format!(
            "terminal data must have {n_points} grid values per component"
        )));
    }
    let n2 = 2 * n_points;
    let h = disc.h;
    let data = scheme.basis.transpose() * DVector::from_iterator(n2, y_t.iter().chain(z_t).copied());
    let data_norm = (h * data.norm_squared()).sqrt();
    let forms = scheme.gramians();
    let observability = max_generalized_ratio(&forms.terminal, &forms.obs)?;
    let g = forms.obs;
    let phi_t = scheme.mean_propagator();
    let b = h * phi_t.transpose() * &data;
    let solve = |kappa: f64| {
        let m = &g + DMatrix::identity(n2, n2) * kappa;
        m.cholesky().map(|c| c.solve(&b))
    };
    let (kappa, u0) = match regularization {
        Some(k) if k < 0.0 => return Err(Error::param("regularization", "must be non-negative")),
        Some(k) => (
            k,
            solve(k).ok_or_else(|| Error::LinearAlgebra("regularised Gramian is not positive definite".into()))?,
        ),
        None => match solve(0.0) {
            Some(u) if (&g * &u - &b).norm() <= 1e-8 * b.norm().max(f64::MIN_POSITIVE) => (0.0, u),
            _ => {
                let k = 1e-10 * g.diagonal().max();
                (
                    k,
                    solve(k)
                        .ok_or_else(|| Error::LinearAlgebra("regularised Gramian is not positive definite".into()))?,
                )
            }
        },
    };
    let r = &b - &g * &u0;
    let residual = (r.norm_squared() / h).sqrt();
    let control_energy = (u0.transpose() * &g * &u0)[0];

    // Duality check against the forward joint moments E[û_n u_nᵀ].
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..tests {
        let t0 = DVector::from_fn(n2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut j = &u0 * t0.transpose();
        let mut rhs = 0.0;
        for _ in 0..scheme.steps {
            rhs += scheme.dt * scheme.obs_weight().component_mul(&j.transpose()).sum();
            j = scheme.joint_step(&j);
        }
        let terminal = h * data.dot(&(&phi_t * &t0));
        let start = r.dot(&t0);
        let lhs = terminal - start;
        let scale = terminal.abs().max(start.abs()).max(rhs.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(DualityControl {
        n_points,
        regularization: kappa,
        control_energy,
        residual,
        data_norm,
        observability,
        residual_bound: 0.5 * (kappa * observability / h).sqrt() * data_norm,
        identity_residual: worst,
        tests,
        adjoint_initial: &scheme.basis * u0,
    })
}

/// Values of the Carleman functionals and their separate terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarlemanFunctionals {
    pub i_ks: f64,
    pub i_h: f64,
    /// `θ²λφ·|p_xxx|²`, `θ²λ³φ³|p_xx|²`, `θ²λ⁵φ⁵|p_x|²`, `θ²λ⁷φ⁷|p|²`.
    pub ks_terms: [f64; 4],
    /// `θ²λφ|q_x|²`, `θ²λ³φ³|q|²`.
    pub h_terms: [f64; 2],
}

/// `I_KS` of the `y` component and `I_H` of the `z` component of a modal
/// trajectory. Derivatives are exact for the sine basis; space uses Gauss
/// panels, time the trapezoid rule on the record grid. Times outside `(0, T)`
/// contribute 0. `theta_lambda` freezes `θ = e^{λ' α}` at `λ'` so the
/// explicit powers of `λ` can be isolated.
pub fn carleman_functionals(
    rec: &TrajectoryRecord,
    p: &CarlemanParams,
    x_panels: usize,
    theta_lambda: Option<f64>,
) -> Result<CarlemanFunctionals> {
    p.validate()?;
    if x_panels == 0 {
        return Err(Error::param("x_panels", "must be positive"));
    }
    let n = rec.states[0].n_modes();
    let pi = std::f64::consts::PI;
    let hx = 1.0 / x_panels as f64;
    let nodes: Vec<(f64, f64)> = (0..x_panels)
        .flat_map(|i| gauss8(i as f64 * hx, (i + 1) as f64 * hx))
        .collect();
    let sq2 = std::f64::consts::SQRT_2;
    // Per node: sin and cos factors of every mode.
    let trig: Vec<(Vec<f64>, Vec<f64>)> = nodes
        .iter()
        .map(|&(x, _)| {
            (
                (1..=n).map(|i| sq2 * (i as f64 * pi * x).sin()).collect(),
                (1..=n).map(|i| sq2 * (i as f64 * pi * x).cos()).collect(),
            )
        })
        .collect();
    let lam = p.lambda;
    let lam_theta = theta_lambda.unwrap_or(lam);
    let mut ks = [0.0; 4];
    let mut hh = [0.0; 2];
    let mut prev: Option<(f64, [f64; 4], [f64; 2])> = None;
    for (k, x) in rec.states.iter().enumerate() {
        let t = rec.time(k);
        let mut cur_ks = [0.0; 4];
        let mut cur_h = [0.0; 2];
        if t > 0.0 && t < p.horizon {
            for (&(xn, wx), (s, c)) in nodes.iter().zip(&trig) {
                let (mut p0, mut p1, mut p2, mut p3, mut q0, mut q1) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    let w = (i + 1) as f64 * pi;
                    let (yi, zi) = (x.y[i], x.z[i]);
                    p0 += yi * s[i];
                    p1 += yi * w * c[i];
                    p2 -= yi * w * w * s[i];
                    p3 -= yi * w * w * w * c[i];
                    q0 += zi * s[i];
                    q1 += zi * w * c[i];
                }
                let la = p.alpha(xn, t);
                let lphi = p.log_phi(xn, t);
                let base = 2.0 * lam_theta * la + lam.ln() + lphi;
                let pw = |j: i32| (base + f64::from(j) * (lam.ln() + lphi)).exp();
                cur_ks[0] += wx * pw(0) * p3 * p3;
                cur_ks[1] += wx * pw(2) * p2 * p2;
                cur_ks[2] += wx * pw(4) * p1 * p1;
                cur_ks[3] += wx * pw(6) * p0 * p0;
                cur_h[0] += wx * pw(0) * q1 * q1;
                cur_h[1] += wx * pw(2) * q0 * q0;
            }
        }
        if let Some((tp, pk, ph)) = prev {
            let dt = t - tp;
            for j in 0..4 {
                ks[j] += 0.5 * dt * (pk[j] + cur_ks[j]);
            }
            for j in 0..2 {
                hh[j] += 0.5 * dt * (ph[j] + cur_h[j]);
            }
        }
        prev = Some((t, cur_ks, cur_h));
    }
    Ok(CarlemanFunctionals {
        i_ks: ks.iter().sum(),
        i_h: hh.iter().sum(),
        ks_terms: ks,
        h_terms: hh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_one_ratio_matches_closed_form() {
        let p = spectral_inequality_probe(std::f64::consts::PI.powi(4), (0.3, 0.7), 10, 1).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let mass = 0.4 + ((two_pi * 0.7).sin() - (two_pi * 0.3).sin()) / -two_pi;
        assert!((p.rows[0].ratio - 1.0 / mass).abs() < 1e-12);
    }

    #[test]
    fn full_region_ratio_is_one() {
        let p = spectral_inequality_probe(1e6, (0.0, 1.0), 5, 1).unwrap();
        assert!(p.rows.iter().all(|r| (r.ratio - 1.0).abs() < 1e-10));
    }

    #[test]
    fn empty_band_rejected() {
        assert!(spectral_inequality_probe(1.0, (0.3, 0.7), 1, 1).is_err());
    }

    #[test]
    fn eigen_form_matches_matrix_exponential() {
        let c = Couplings::default();
        for i in 1..=4 {
            let b = mode_matrix(i, &c);
            let (k, v) = eigen2(&b).unwrap();
            let s = 0.013;
            let d = Matrix2::from_diagonal(&Vector2::new((k[0] * s).exp(), (k[1] * s).exp()));
            let e1 = v * d * v.try_inverse().unwrap();
            let e2 = (b * s).exp();
            assert!((e1 - e2).abs().max() < 1e-10 * e2.abs().max().max(1e-300), "mode {i}");
        }
    }

    #[test]
    fn beam_root_oracle() {
        let e = clamped_beam_ground_eigenvalue();
        assert!((e.powf(0.25) - 4.730_040_7).abs() < 1e-7);
        assert!((e - 500.564).abs() < 1e-3);
    }

    #[test]
    fn clamped_first_row_stencil() {
        let d = ClampedDiscretization::new(10).unwrap();
        let h4 = d.h.powi(4);
        assert!((d.d4[(0, 0)] * h4 - 7.0).abs() < 1e-9);
        assert!((d.d4[(0, 1)] * h4 + 4.0).abs() < 1e-9);
        assert!((d.d4[(0, 2)] * h4 - 1.0).abs() < 1e-9);
        assert!((d.d4.clone() - d.d4.transpose()).abs().max() < 1e-6);
    }
}
