//! Homogenized coefficients from stationary Lagrangian correlations.
//!
//! The observables are `v_p(η_t)` (the velocity seen by a unit-scale
//! particle) and the centered `Φ_m(η_t)`. Every limit constant is a time
//! integral of a correlation between two of them:
//!
//! * `A = ∫ (C_vv + C_vvᵀ)`: covariance rate of the effective Brownian motion.
//! * `lambda[p][m] = ∫ E[v_p(0) Φ_m(t)]`, `mu[m][n] = ∫ E[Φ_m(0) Φ_n(t)]`.
//! * `kappa_v[j][m] = ∫ (E[Φ_m(0) v_j(t)] + E[v_j(0) Φ_m(t)])`.
//! * `kappa0 = ∫ (C_ΦΦ + C_ΦΦᵀ)`.
//!
//! With `f = Σ g_m Φ_m` the limit SDE coefficients are
//! `b = Σ_m ∇_y g_m · lambda[·][m] + Σ_{m,n} g_m ∂_u g_n mu[m][n]`,
//! `c̃ = S⁺ kappa_v g` with `S = √A`, and `c̃₀² = gᵀ Q g` where
//! `Q = kappa0 − kappa_vᵀ A⁺ kappa_v`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::SpectralMeasure;
use crate::linalg::{zero_null_axes, PsdDecomposition};
use crate::microscale::{sample_environment, MicroConfig};
use crate::nonlinearity::{Coords, Jet, NonlinearitySpec};
use smallvec::{smallvec, SmallVec};
use crate::rng::{Level, StreamFactory};

/// Relative eigenvalue cut for degenerate directions of `A`.
pub const EIG_TOL_REL: f64 = 1e-8;
/// Number of jackknife groups used for the error of `Q`'s spectrum.
const JACKKNIFE_GROUPS: usize = 20;
/// Paths per parallel work unit.
const CHUNK: usize = 16;

/// Estimated correlation curves of the observable vector `(v_1..v_d, Φ_1..Φ_M)`.
#[derive(Debug, Clone)]
pub struct CorrelatorTable {
    pub time_grid: Vec<f64>,
    pub dim: usize,
    pub num_phi: usize,
    pub n_paths: usize,
    pub alpha_star: f64,
    /// `mean[(lag * n + a) * n + b] = E[o_a(0) o_b(t_lag)]`.
    mean: Vec<f64>,
    se: Vec<f64>,
    /// Per path, the `n × n` integrals (trapezoid plus exponential tail).
    path_integrals: Vec<Vec<f64>>,
}

impl CorrelatorTable {
    pub fn n_obs(&self) -> usize {
        self.dim + self.num_phi
    }

    pub fn t_gk(&self) -> f64 {
        *self.time_grid.last().expect("non-empty grid")
    }

    pub fn num_lags(&self) -> usize {
        self.time_grid.len()
    }

    fn idx(&self, lag: usize, a: usize, b: usize) -> usize {
        let n = self.n_obs();
        (lag * n + a) * n + b
    }

    /// `E[o_a(0) o_b(t_lag)]` with observables indexed `v` first, then `Φ`.
    pub fn entry(&self, lag: usize, a: usize, b: usize) -> f64 {
        self.mean[self.idx(lag, a, b)]
    }

    pub fn std_error(&self, lag: usize, a: usize, b: usize) -> f64 {
        self.se[self.idx(lag, a, b)]
    }

    fn block(&self, lag: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.entry(lag, rows.start + i, cols.start + j))
    }

    pub fn c_vv(&self, lag: usize) -> DMatrix<f64> {
        self.block(lag, 0..self.dim, 0..self.dim)
    }

    pub fn c_vphi(&self, lag: usize) -> DMatrix<f64> {
        self.block(lag, 0..self.dim, self.dim..self.n_obs())
    }

    pub fn c_phiv(&self, lag: usize) -> DMatrix<f64> {
        self.block(lag, self.dim..self.n_obs(), 0..self.dim)
    }

    pub fn c_phiphi(&self, lag: usize) -> DMatrix<f64> {
        self.block(lag, self.dim..self.n_obs(), self.dim..self.n_obs())
    }

    pub fn path_integrals(&self) -> &[Vec<f64>] {
        &self.path_integrals
    }

    /// Mean over paths of the integrated correlators, as an `n × n` matrix.
    pub fn integral_mean(&self) -> DMatrix<f64> {
        mean_matrix(&self.path_integrals, self.n_obs(), |_| true)
    }

    fn labels(&self) -> Vec<String> {
        (0..self.dim)
            .map(|p| format!("v{}", p + 1))
            .chain((0..self.num_phi).map(|m| format!("phi{}", m + 1)))
            .collect()
    }

    /// Correlator curves, one column per ordered observable pair plus its SE.
    pub fn to_csv(&self) -> String {
        let labels = self.labels();
        let n = self.n_obs();
        let mut out = String::from("t");
        for a in &labels {
            for b in &labels {
                out.push_str(&format!(",C_{a}_{b},se_{a}_{b}"));
            }
        }
        out.push('\n');
        for (lag, t) in self.time_grid.iter().enumerate() {
            out.push_str(&t.to_string());
            for a in 0..n {
                for b in 0..n {
                    out.push_str(&format!(",{},{}", self.entry(lag, a, b), self.std_error(lag, a, b)));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn mean_matrix(samples: &[Vec<f64>], n: usize, keep: impl Fn(usize) -> bool) -> DMatrix<f64> {
    let mut acc = vec![0.0; n * n];
    let mut count = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if keep(i) {
            for (a, x) in acc.iter_mut().zip(s) {
                *a += x;
            }
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    DMatrix::from_row_slice(n, n, &acc).map(|x| x / c)
}

/// Sampling plan derived from the requested horizon and step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GkGrid {
    /// Output spacing of the correlation curves.
    pub dtau_out: f64,
    /// Integrator steps per output interval.
    pub stride: usize,
    /// Number of lag intervals, `t_gk = lags * dtau_out`.
    pub lags: usize,
}

impl GkGrid {
    pub fn new(alpha_star: f64, t_gk: f64, dtau: f64) -> Self {
        let target = (0.05 / alpha_star).min(10.0 * dtau);
        let lags = ((t_gk / target) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let dtau_out = t_gk / lags as f64;
        let stride = ((dtau_out / dtau) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self { dtau_out, stride, lags }
    }

    pub fn step(&self) -> f64 {
        self.dtau_out / self.stride as f64
    }
}

#[derive(Default)]
struct Accum {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    integrals: Vec<Vec<f64>>,
}

impl Accum {
    fn add(&mut self, other: Accum) {
        if self.sum.is_empty() {
            self.sum = other.sum;
            self.sumsq = other.sumsq;
        } else {
            for (a, b) in self.sum.iter_mut().zip(&other.sum) {
                *a += b;
            }
            for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
                *a += b;
            }
        }
        self.integrals.extend(other.integrals);
    }
}

/// Estimates the correlation curves on `[0, t_gk]` from `n_paths` independent
/// stationary environment paths. Each path is simulated on `[0, 2 t_gk]` and
/// the products are averaged over all window starts in `[0, t_gk]`.
pub fn estimate_correlators(
    measure: &SpectralMeasure,
    spec: Option<&NonlinearitySpec>,
    n_paths: usize,
    t_gk: f64,
    dtau: f64,
    streams: &StreamFactory,
) -> Result<CorrelatorTable> {
    let alpha_star = measure.alpha_star();
    if !(t_gk >= 5.0 / alpha_star) {
        return Err(LabError::validation(
            "T_GK",
            format!(
                "correlation horizon {t_gk} is below 5/alpha_star = {}; the truncated tail would not be bounded by e^(-alpha_star T_GK)",
                5.0 / alpha_star
            ),
        ));
    }
    if n_paths < 2 {
        return Err(LabError::validation("n_paths", "need at least two Green-Kubo paths"));
    }
    let max = MicroConfig::max_dtau(measure);
    if !(dtau > 0.0 && dtau <= max * (1.0 + 1e-12)) {
        return Err(LabError::validation("dtau", format!("fast-time step {dtau} outside (0, {max}]")));
    }
    if let Some(s) = spec {
        if s.dim() != measure.dim() {
            return Err(LabError::validation("f", "nonlinearity dimension differs from the field's"));
        }
    }
    let d = measure.dim();
    let m = spec.map_or(0, NonlinearitySpec::num_terms);
    let n = d + m;
    let grid = GkGrid::new(alpha_star, t_gk, dtau);
    let lags = grid.lags;
    let h_out = grid.dtau_out;
    let block = (lags + 1) * n * n;

    let one_path = |path: usize, acc: &mut Accum| -> Result<()> {
        let mut rng = streams.stream(Level::GreenKubo, path as u64);
        let env = sample_environment(measure, spec, 2.0 * t_gk, grid.step(), grid.stride, &mut rng)?;
        if env.len() < 2 * lags + 1 {
            return Err(LabError::numeric("environment series shorter than the correlation window"));
        }
        let obs: Vec<f64> = (0..=2 * lags)
            .flat_map(|k| env.v_at(k).iter().chain(env.phi_at(k)).copied().collect::<Vec<_>>())
            .collect();
        let mut prod = vec![0.0; block];
        let w = 1.0 / (lags + 1) as f64;
        for lag in 0..=lags {
            let row = &mut prod[lag * n * n..(lag + 1) * n * n];
            for k in 0..=lags {
                let o0 = &obs[k * n..(k + 1) * n];
                let o1 = &obs[(k + lag) * n..(k + lag + 1) * n];
                for a in 0..n {
                    for b in 0..n {
                        row[a * n + b] += o0[a] * o1[b];
                    }
                }
            }
            row.iter_mut().for_each(|x| *x *= w);
        }
        let mut integral = vec![0.0; n * n];
        for lag in 0..=lags {
            let wt = if lag == 0 || lag == lags { 0.5 * h_out } else { h_out };
            for (i, x) in integral.iter_mut().enumerate() {
                *x += wt * prod[lag * n * n + i];
            }
        }
        for (i, x) in integral.iter_mut().enumerate() {
            *x += prod[lags * n * n + i] / alpha_star;
        }
        for (i, p) in prod.iter().enumerate() {
            acc.sum[i] += p;
            acc.sumsq[i] += p * p;
        }
        acc.integrals.push(integral);
        Ok(())
    };

    let n_chunks = n_paths.div_ceil(CHUNK);
    let chunks: Vec<Accum> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Accum {
                sum: vec![0.0; block],
                sumsq: vec![0.0; block],
                integrals: Vec::with_capacity(CHUNK),
            };
            for path in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                one_path(path, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Accum::default();
    for c in chunks {
        total.add(c);
    }

    let np = n_paths as f64;
    let mean: Vec<f64> = total.sum.iter().map(|s| s / np).collect();
    let se: Vec<f64> = total
        .sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| ((sq / np - mu * mu).max(0.0) * np / (np - 1.0) / np).sqrt())
        .collect();
    let table = CorrelatorTable {
        time_grid: (0..=lags).map(|l| l as f64 * h_out).collect(),
        dim: d,
        num_phi: m,
        n_paths,
        alpha_star,
        mean,
        se,
        path_integrals: total.integrals,
    };
    check_tail(&table)?;
    Ok(table)
}

fn check_tail(table: &CorrelatorTable) -> Result<()> {
    let n = table.n_obs();
    let last = table.num_lags() - 1;
    let maxvar = (0..n).map(|a| table.entry(0, a, a)).fold(0.0, f64::max);
    let decay = maxvar * (-table.alpha_star * table.t_gk()).exp();
    for a in 0..n {
        for b in 0..n {
            let c = table.entry(last, a, b);
            let bound = decay + 4.0 * table.std_error(last, a, b);
            if c.abs() > bound {
                return Err(LabError::numeric(format!(
                    "correlator ({a}, {b}) at T_GK = {} is {c}, above the tail bound {bound}; increase T_GK",
                    table.t_gk()
                )));
            }
        }
    }
    Ok(())
}

fn se_matrix(samples: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = samples.len() as f64;
    let (r, c) = samples[0].shape();
    let mean = samples.iter().fold(DMatrix::zeros(r, c), |acc, s| acc + s) / n;
    let var = samples
        .iter()
        .fold(DMatrix::zeros(r, c), |acc, s| acc + (s - &mean).map(|x| x * x))
        / (n - 1.0);
    var.map(|v| (v / n).sqrt())
}

/// Splits a per-path integral into its `(vv, vΦ, Φv, ΦΦ)` blocks.
fn blocks(i: &DMatrix<f64>, d: usize) -> [DMatrix<f64>; 4] {
    let n = i.nrows();
    let m = n - d;
    [
        i.view((0, 0), (d, d)).into_owned(),
        i.view((0, d), (d, m)).into_owned(),
        i.view((d, 0), (m, d)).into_owned(),
        i.view((d, d), (m, m)).into_owned(),
    ]
}

/// Effective diffusivity with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct Diffusivity {
    pub a: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    /// Most negative eigenvalue of the raw estimate (0 if none).
    pub clamped_eigenvalue: f64,
}

/// `Â = ∫ (C_vv + C_vvᵀ)` with the PSD projection described on
/// [`HomogenizedCoefficients`].
pub fn effective_diffusivity(table: &CorrelatorTable) -> Result<Diffusivity> {
    let d = table.dim;
    let n = table.n_obs();
    let samples: Vec<DMatrix<f64>> = table
        .path_integrals
        .iter()
        .map(|p| {
            let vv = DMatrix::from_row_slice(n, n, p).view((0, 0), (d, d)).into_owned();
            &vv + vv.transpose()
        })
        .collect();
    let raw = samples.iter().fold(DMatrix::zeros(d, d), |acc, s| acc + s) / samples.len() as f64;
    let se = se_matrix(&samples);
    let max_se = se.iter().copied().fold(0.0, f64::max);
    let (a, neg) = project_psd(&raw, EIG_TOL_REL * raw.trace().abs(), 4.0 * max_se, "effective diffusivity")?;
    Ok(Diffusivity { a, std_error: se, clamped_eigenvalue: neg })
}

/// Clamps eigenvalues at or below `tol` to zero. Negative eigenvalues beyond
/// `allowed` (plus a rounding floor) are an error.
fn project_psd(raw: &DMatrix<f64>, tol: f64, allowed: f64, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let scale = raw.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let dec = PsdDecomposition::new(raw, tol);
    let neg = dec.most_negative;
    if -neg > allowed + 1e-12 * scale {
        return Err(LabError::numeric(format!(
            "{what} has eigenvalue {neg}, beyond the statistical tolerance {allowed}"
        )));
    }
    if -neg > 1e-12 * scale {
        warn!("{what}: clamping negative eigenvalue {neg} to zero (within statistical error {allowed})");
    }
    let mut out = dec.matrix();
    zero_null_axes(&mut out, raw);
    Ok((out, neg))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nr: usize, nc: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(LabError::validation(name, format!("expected a {nr}x{nc} matrix")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMeta {
    #[serde(rename = "T_GK")]
    pub t_gk: f64,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientErrors {
    pub a: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub kappa_v: DMatrix<f64>,
    pub kappa0: DMatrix<f64>,
    /// Jackknife errors of `Q`'s eigenvalues (ascending).
    pub q_eigen: Vec<f64>,
}

impl CoefficientErrors {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            a: DMatrix::zeros(d, d),
            lambda: DMatrix::zeros(d, m),
            mu: DMatrix::zeros(m, m),
            kappa_v: DMatrix::zeros(d, m),
            kappa0: DMatrix::zeros(m, m),
            q_eigen: vec![0.0; m],
        }
    }
}

/// Limit coefficients evaluated at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientValues {
    pub b: f64,
    pub b_u: f64,
    /// `c̃_1..c̃_d`.
    pub c: Coords,
    pub c_u: Coords,
    pub c0: f64,
    pub c0_u: f64,
    /// `c̃₀²` was at the zero clamp, so `∂_u c̃₀` was set to 0.
    pub clamped: bool,
}

/// Scalar Green–Kubo constants plus the derived matrices `S = √A`, `A⁺`,
/// `S⁺` and `Q`. Eigen-directions of `A` below `1e-8·trace(A)` are treated as
/// degenerate and axes with `A_ii = 0` are zeroed exactly in every derived
/// matrix.
#[derive(Debug, Clone)]
pub struct HomogenizedCoefficients {
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub kappa_v: DMatrix<f64>,
    pub kappa0: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub a_pinv: DMatrix<f64>,
    pub s_pinv: DMatrix<f64>,
    pub rank: usize,
    pub std_errors: CoefficientErrors,
    pub meta: CoefficientMeta,
    /// `S⁺ kappa_v`, cached for [`HomogenizedCoefficients::evaluate`].
    c_map: DMatrix<f64>,
}

impl HomogenizedCoefficients {
    /// Builds the derived matrices from the constants.
    pub fn from_constants(
        a: DMatrix<f64>,
        lambda: DMatrix<f64>,
        mu: DMatrix<f64>,
        kappa_v: DMatrix<f64>,
        kappa0: DMatrix<f64>,
        std_errors: CoefficientErrors,
        meta: CoefficientMeta,
    ) -> Result<Self> {
        let d = a.nrows();
        let m = mu.nrows();
        if a.ncols() != d
            || lambda.shape() != (d, m)
            || mu.ncols() != m
            || kappa_v.shape() != (d, m)
            || kappa0.shape() != (m, m)
        {
            return Err(LabError::validation("coefficients", "inconsistent coefficient shapes"));
        }
        if a.iter().chain(lambda.iter()).chain(mu.iter()).chain(kappa_v.iter()).chain(kappa0.iter()).any(|x| !x.is_finite()) {
            return Err(LabError::numeric("non-finite homogenized coefficient"));
        }
        let max_se = std_errors.a.iter().copied().fold(0.0, f64::max);
        let (a, _) = project_psd(&a, EIG_TOL_REL * a.trace().abs(), 4.0 * max_se, "effective diffusivity")?;
        let dec = PsdDecomposition::new(&a, EIG_TOL_REL * a.trace().abs());
        let mut s = dec.sqrt();
        let mut a_pinv = dec.pinv();
        let mut s_pinv = dec.pinv_sqrt();
        for mat in [&mut s, &mut a_pinv, &mut s_pinv] {
            zero_null_axes(mat, &a);
        }
        let q_raw = q_matrix(&kappa0, &kappa_v, &a_pinv);
        let q_tol = EIG_TOL_REL * kappa0.trace().abs();
        let q_allowed = 4.0 * std_errors.q_eigen.iter().copied().fold(0.0, f64::max);
        let (q, _) = project_psd(&q_raw, q_tol, q_allowed, "noise covariance c0^2")?;
        Ok(Self {
            c_map: &s_pinv * &kappa_v,
            rank: dec.rank(),
            a,
            s,
            lambda,
            mu,
            kappa_v,
            kappa0,
            q,
            a_pinv,
            s_pinv,
            std_errors,
            meta,
        })
    }

    /// Coefficients of the linear problem: only `A` is set.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        Self::from_constants(
            a,
            DMatrix::zeros(d, 0),
            DMatrix::zeros(0, 0),
            DMatrix::zeros(d, 0),
            DMatrix::zeros(0, 0),
            CoefficientErrors::zeros(d, 0),
            CoefficientMeta { t_gk: 0.0, n_paths: 0, seed: 0 },
        )
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_phi(&self) -> usize {
        self.mu.nrows()
    }

    pub fn check_compatible(&self, spec: &NonlinearitySpec) -> Result<()> {
        if spec.dim() != self.dim() || spec.num_terms() != self.num_phi() {
            return Err(LabError::validation(
                "f",
                format!(
                    "coefficients were computed for d = {}, M = {} but the nonlinearity has d = {}, M = {}",
                    self.dim(),
                    self.num_phi(),
                    spec.dim(),
                    spec.num_terms()
                ),
            ));
        }
        Ok(())
    }

    /// `b`, `c̃`, `c̃₀` and their `u`-derivatives at `(s, y, u)`.
    pub fn evaluate(&self, spec: &NonlinearitySpec, s: f64, y: &[f64], u: f64) -> CoefficientValues {
        let d = self.dim();
        let jets: SmallVec<[Jet; 4]> = spec.terms().iter().map(|t| t.g.jet(s, y, u)).collect();

        let mut b = 0.0;
        let mut b_u = 0.0;
        for (mi, jm) in jets.iter().enumerate() {
            for p in 0..d {
                b += jm.dx[p] * self.lambda[(p, mi)];
                b_u += jm.dxu[p] * self.lambda[(p, mi)];
            }
            for (ni, jn) in jets.iter().enumerate() {
                let w = self.mu[(mi, ni)];
                b += jm.value * jn.du * w;
                b_u += (jm.du * jn.du + jm.value * jn.duu) * w;
            }
        }

        let mut c: Coords = smallvec![0.0; d];
        let mut c_u: Coords = smallvec![0.0; d];
        for (mi, j) in jets.iter().enumerate() {
            for p in 0..d {
                c[p] += self.c_map[(p, mi)] * j.value;
                c_u[p] += self.c_map[(p, mi)] * j.du;
            }
        }
        let (mut c0sq, mut qg_gu, mut g2) = (0.0, 0.0, 0.0);
        for (mi, jm) in jets.iter().enumerate() {
            g2 += jm.value * jm.value;
            for (ni, jn) in jets.iter().enumerate() {
                let w = self.q[(mi, ni)];
                c0sq += jm.value * w * jn.value;
                qg_gu += jm.du * w * jn.value;
            }
        }
        let floor = 1e-12 * self.kappa0.trace().abs().max(f64::MIN_POSITIVE) * g2;
        let (c0, c0_u, clamped) = if c0sq > floor {
            let c0 = c0sq.sqrt();
            (c0, qg_gu / c0, false)
        } else {
            (0.0, 0.0, true)
        };
        CoefficientValues { b, b_u, c, c_u, c0, c0_u, clamped }
    }

    /// `C₀ = gᵀ kappa0 g` and `c = kappa_v g` (before the `S⁺` solve).
    pub fn raw_noise(&self, spec: &NonlinearitySpec, s: f64, y: &[f64], u: f64) -> (f64, Vec<f64>) {
        let g = DVector::from_iterator(self.num_phi(), spec.terms().iter().map(|t| t.g.value_du(s, y, u).0));
        let c0 = g.dot(&(&self.kappa0 * &g));
        let c = &self.kappa_v * &g;
        (c0, c.iter().copied().collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let se = &self.std_errors;
        let file = CoefficientFile {
            a: to_rows(&self.a),
            s: to_rows(&self.s),
            lambda: to_rows(&self.lambda),
            mu: to_rows(&self.mu),
            kappa_v: to_rows(&self.kappa_v),
            kappa0: to_rows(&self.kappa0),
            std_errors: ErrorFile {
                a: to_rows(&se.a),
                lambda: to_rows(&se.lambda),
                mu: to_rows(&se.mu),
                kappa_v: to_rows(&se.kappa_v),
                kappa0: to_rows(&se.kappa0),
                q_eigen: se.q_eigen.clone(),
            },
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CoefficientFile = serde_json::from_str(text)?;
        let d = f.a.len();
        let m = f.mu.len();
        let e = &f.std_errors;
        let errors = CoefficientErrors {
            a: from_rows(&e.a, d, d, "std_errors.A")?,
            lambda: from_rows(&e.lambda, d, m, "std_errors.lambda")?,
            mu: from_rows(&e.mu, m, m, "std_errors.mu")?,
            kappa_v: from_rows(&e.kappa_v, d, m, "std_errors.kappa_v")?,
            kappa0: from_rows(&e.kappa0, m, m, "std_errors.kappa0")?,
            q_eigen: e.q_eigen.clone(),
        };
        Self::from_constants(
            from_rows(&f.a, d, d, "A")?,
            from_rows(&f.lambda, d, m, "lambda")?,
            from_rows(&f.mu, m, m, "mu")?,
            from_rows(&f.kappa_v, d, m, "kappa_v")?,
            from_rows(&f.kappa0, m, m, "kappa0")?,
            errors,
            f.meta,
        )
    }
}

fn q_matrix(kappa0: &DMatrix<f64>, kappa_v: &DMatrix<f64>, a_pinv: &DMatrix<f64>) -> DMatrix<f64> {
    let q = kappa0 - kappa_v.transpose() * a_pinv * kappa_v;
    (&q + q.transpose()) * 0.5
}

#[derive(Debug, Serialize, Deserialize)]
struct ErrorFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    kappa_v: Vec<Vec<f64>>,
    kappa0: Vec<Vec<f64>>,
    #[serde(rename = "Q_eigen", default)]
    q_eigen: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CoefficientFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    kappa_v: Vec<Vec<f64>>,
    kappa0: Vec<Vec<f64>>,
    std_errors: ErrorFile,
    meta: CoefficientMeta,
}

struct Constants {
    a: DMatrix<f64>,
    lambda: DMatrix<f64>,
    mu: DMatrix<f64>,
    kappa_v: DMatrix<f64>,
    kappa0: DMatrix<f64>,
}

fn constants_from(i: &DMatrix<f64>, d: usize) -> Constants {
    let [vv, vp, pv, pp] = blocks(i, d);
    Constants {
        a: &vv + vv.transpose(),
        kappa_v: pv.transpose() + &vp,
        kappa0: &pp + pp.transpose(),
        lambda: vp,
        mu: pp,
    }
}

fn sorted_eigenvalues(q: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = q.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Assembles every limit constant from a correlator table.
pub fn assemble_coefficients(spec: &NonlinearitySpec, table: &CorrelatorTable, seed: u64) -> Result<HomogenizedCoefficients> {
    let d = table.dim;
    let m = table.num_phi;
    let n = d + m;
    if spec.dim() != d || spec.num_terms() != m {
        return Err(LabError::validation("f", "correlator table does not match the nonlinearity"));
    }
    let diff = effective_diffusivity(table)?;
    let mean = constants_from(&table.integral_mean(), d);

    let per_path: Vec<Constants> = table
        .path_integrals
        .iter()
        .map(|p| constants_from(&DMatrix::from_row_slice(n, n, p), d))
        .collect();
    let se_of = |f: fn(&Constants) -> &DMatrix<f64>| se_matrix(&per_path.iter().map(|c| f(c).clone()).collect::<Vec<_>>());

    // grouped jackknife for the spectrum of Q
    let groups = JACKKNIFE_GROUPS.min(table.n_paths);
    let q_eigen = if m > 0 && groups >= 2 {
        let replicates: Vec<Vec<f64>> = (0..groups)
            .map(|gidx| {
                let c = constants_from(&mean_matrix(&table.path_integrals, n, |i| i % groups != gidx), d);
                let tol = EIG_TOL_REL * c.a.trace().abs();
                let mut a_pinv = PsdDecomposition::new(&c.a, tol).pinv();
                zero_null_axes(&mut a_pinv, &c.a);
                sorted_eigenvalues(&q_matrix(&c.kappa0, &c.kappa_v, &a_pinv))
            })
            .collect();
        let g = groups as f64;
        (0..m)
            .map(|k| {
                let avg = replicates.iter().map(|r| r[k]).sum::<f64>() / g;
                ((g - 1.0) / g * replicates.iter().map(|r| (r[k] - avg).powi(2)).sum::<f64>()).sqrt()
            })
            .collect()
    } else {
        vec![0.0; m]
    };

    let errors = CoefficientErrors {
        a: diff.std_error.clone(),
        lambda: se_of(|c| &c.lambda),
        mu: se_of(|c| &c.mu),
        kappa_v: se_of(|c| &c.kappa_v),
        kappa0: se_of(|c| &c.kappa0),
        q_eigen,
    };
    HomogenizedCoefficients::from_constants(
        diff.a,
        mean.lambda,
        mean.mu,
        mean.kappa_v,
        mean.kappa0,
        errors,
        CoefficientMeta {
            t_gk: table.t_gk(),
            n_paths: table.n_paths,
            seed,
        },
    )
}
