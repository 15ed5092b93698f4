//! Stationary, incompressible Gaussian velocity fields built from a finite
//! set of Fourier modes with Ornstein–Uhlenbeck time dynamics.
//!
//! The field is
//!
//! ```text
//! V(t, x) = Σ_j [ A_j(t) cos(k_j·x) + B_j(t) sin(k_j·x) ]
//! ```
//!
//! where `A_j`, `B_j` are independent stationary OU processes in ℝ^d with
//! covariance `σ_j Γ(k_j)` and relaxation rate `α_j`, and
//! `Γ(k) = I − k kᵀ / |k|²`. Since every amplitude is orthogonal to its
//! wavevector, the field is divergence free at every point. The two-point
//! covariance is `R(t, x) = Σ_j σ_j Γ(k_j) e^{−α_j |t|} cos(k_j·x)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::dot;

/// One Fourier mode of the discrete spectral measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMode {
    pub k: Vec<f64>,
    pub sigma: f64,
    pub alpha: f64,
}

/// Time decay profile `α(k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaProfile {
    /// Uniform spectral gap.
    Constant(f64),
    /// `α(k) = α_* + (A_* − α_*) |k| / K0`.
    Linear { alpha_star: f64, a_star: f64 },
}

impl AlphaProfile {
    fn at(&self, k_norm: f64, k0: f64) -> f64 {
        match *self {
            AlphaProfile::Constant(a) => a,
            AlphaProfile::Linear { alpha_star, a_star } => {
                alpha_star + (a_star - alpha_star) * k_norm / k0
            }
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            AlphaProfile::Constant(a) => (a, a),
            AlphaProfile::Linear { alpha_star, a_star } => (alpha_star, a_star),
        }
    }
}

/// Discrete spectral measure: defines the law of the field.
#[derive(Debug, Clone)]
pub struct SpectralMeasure {
    dim: usize,
    modes: Vec<SpectralMode>,
    k0: f64,
    alpha_star: f64,
    a_star: f64,
    // flat caches for the hot loops
    k_flat: Vec<f64>,
    k_norm2: Vec<f64>,
    sqrt_sigma: Vec<f64>,
}

/// Computes `Γ(k) = I − k kᵀ / |k|²`.
pub fn projector(k: &[f64]) -> Result<DMatrix<f64>> {
    let n2 = dot(k, k);
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(LabError::validation("k", "projector needs a non-zero finite wavevector"));
    }
    let d = k.len();
    Ok(DMatrix::from_fn(d, d, |i, l| {
        let delta = if i == l { 1.0 } else { 0.0 };
        delta - k[i] * k[l] / n2
    }))
}

/// Writes `Γ(k) g` into `g` in place.
#[inline]
fn project_in_place(k: &[f64], k_norm2: f64, g: &mut [f64]) {
    let c = dot(k, g) / k_norm2;
    for (gi, ki) in g.iter_mut().zip(k) {
        *gi -= c * ki;
    }
}

impl SpectralMeasure {
    /// Validates and builds a measure with explicit bounds.
    pub fn new(
        dim: usize,
        modes: Vec<SpectralMode>,
        k0: f64,
        alpha_star: f64,
        a_star: f64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(LabError::validation("measure.dim", "dimension must be at least 2"));
        }
        if !(alpha_star > 0.0 && alpha_star <= a_star && a_star.is_finite()) {
            return Err(LabError::validation(
                "measure",
                format!("need 0 < alpha_star <= A_star, got {alpha_star}, {a_star}"),
            ));
        }
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(LabError::validation("measure.K0", "spectral cutoff must be positive"));
        }
        if modes.is_empty() {
            return Err(LabError::validation("measure.modes", "at least one mode is required"));
        }
        // slack for K0 derived from float-computed norms
        let k0_slack = k0 * (1.0 + 1e-12);
        for (j, m) in modes.iter().enumerate() {
            let path = format!("measure.modes[{j}]");
            if m.k.len() != dim {
                return Err(LabError::validation(path, format!("wavevector must have {dim} components")));
            }
            let n = dot(&m.k, &m.k).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(LabError::validation(path, "zero wavevector"));
            }
            if n > k0_slack {
                return Err(LabError::validation(path, format!("|k| = {n} exceeds K0 = {k0}")));
            }
            if !(m.sigma > 0.0) || !m.sigma.is_finite() {
                return Err(LabError::validation(path, "sigma must be positive"));
            }
            if !(m.alpha >= alpha_star * (1.0 - 1e-12) && m.alpha <= a_star * (1.0 + 1e-12)) {
                return Err(LabError::validation(
                    path,
                    format!("alpha = {} outside [{alpha_star}, {a_star}]", m.alpha),
                ));
            }
        }
        for i in 0..modes.len() {
            for j in (i + 1)..modes.len() {
                let (a, b) = (&modes[i].k, &modes[j].k);
                let same = a.iter().zip(b).all(|(x, y)| x == y);
                let opposite = a.iter().zip(b).all(|(x, y)| *x == -*y);
                if same || opposite {
                    return Err(LabError::validation(
                        format!("measure.modes[{j}]"),
                        format!("duplicates the wavevector of mode {i} (k and -k share a mode)"),
                    ));
                }
            }
        }
        Ok(Self::assemble(dim, modes, k0, alpha_star, a_star))
    }

    fn assemble(dim: usize, modes: Vec<SpectralMode>, k0: f64, alpha_star: f64, a_star: f64) -> Self {
        let k_flat: Vec<f64> = modes.iter().flat_map(|m| m.k.iter().copied()).collect();
        let k_norm2 = modes.iter().map(|m| dot(&m.k, &m.k)).collect();
        let sqrt_sigma = modes.iter().map(|m| m.sigma.sqrt()).collect();
        Self {
            dim,
            modes,
            k0,
            alpha_star,
            a_star,
            k_flat,
            k_norm2,
            sqrt_sigma,
        }
    }

    /// Builds a measure whose bounds are read off the modes.
    pub fn from_modes(dim: usize, modes: Vec<SpectralMode>) -> Result<Self> {
        let k0 = modes
            .iter()
            .map(|m| dot(&m.k, &m.k).sqrt())
            .fold(0.0, f64::max);
        let alpha_star = modes.iter().map(|m| m.alpha).fold(f64::INFINITY, f64::min);
        let a_star = modes.iter().map(|m| m.alpha).fold(0.0, f64::max);
        Self::new(dim, modes, k0, alpha_star, a_star)
    }

    /// Shear flow in d = 2: a single mode `k = (κ, 0)`, so `V_1 ≡ 0` and `V_2`
    /// depends on `x_1` only.
    pub fn shear(kappa: f64, sigma: f64, alpha: f64) -> Result<Self> {
        Self::from_modes(
            2,
            vec![SpectralMode {
                k: vec![kappa, 0.0],
                sigma,
                alpha,
            }],
        )
    }

    /// Isotropic shell in d = 2. `num_modes` (even) directions are equally
    /// spaced on the half circle (a mode at `k` also covers `−k`); the `M =
    /// num_modes / 2` magnitudes are drawn uniformly from `[K0/2, K0]` and
    /// shared by directions a quarter turn apart, which makes the measure
    /// invariant under 90° rotations. Weights are equal with `Σ σ_j = energy`.
    pub fn isotropic_shell<R: Rng + ?Sized>(
        num_modes: usize,
        k0: f64,
        energy: f64,
        alpha: AlphaProfile,
        rng: &mut R,
    ) -> Result<Self> {
        if num_modes < 2 || num_modes % 2 != 0 {
            return Err(LabError::validation(
                "measure.num_modes",
                "isotropic-shell needs an even number of modes (at least 2)",
            ));
        }
        if !(k0 > 0.0) {
            return Err(LabError::validation("measure.K0", "spectral cutoff must be positive"));
        }
        if !(energy > 0.0) {
            return Err(LabError::validation("measure.energy", "energy must be positive"));
        }
        let half = num_modes / 2;
        let mags: Vec<f64> = (0..half)
            .map(|_| k0 * (0.5 + 0.5 * rng.random::<f64>()))
            .collect();
        let sigma = energy / num_modes as f64;
        let modes = (0..num_modes)
            .map(|j| {
                let theta = std::f64::consts::PI * j as f64 / num_modes as f64;
                let r = mags[j % half];
                SpectralMode {
                    k: vec![r * theta.cos(), r * theta.sin()],
                    sigma,
                    alpha: alpha.at(r, k0),
                }
            })
            .collect();
        let (alpha_star, a_star) = alpha.bounds();
        Self::new(2, modes, k0, alpha_star, a_star)
    }

    /// A field that is identically zero. Only meant for testing the integrators.
    pub fn null(dim: usize) -> Self {
        Self::assemble(dim, Vec::new(), 1.0, 1.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[SpectralMode] {
        &self.modes
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn alpha_star(&self) -> f64 {
        self.alpha_star
    }

    pub fn a_star(&self) -> f64 {
        self.a_star
    }

    #[inline]
    fn k(&self, j: usize) -> &[f64] {
        &self.k_flat[j * self.dim..(j + 1) * self.dim]
    }

    /// One-point covariance `R(0, 0) = Σ_j σ_j Γ(k_j)`.
    pub fn one_point_covariance(&self) -> DMatrix<f64> {
        covariance_exact(self, 0.0, &vec![0.0; self.dim])
    }

    /// RMS speed `√(tr R(0,0))`.
    pub fn rms_speed(&self) -> f64 {
        self.one_point_covariance().trace().sqrt()
    }

    /// Returns a copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let modes = self
            .modes
            .iter()
            .map(|m| SpectralMode {
                sigma: m.sigma * factor,
                ..m.clone()
            })
            .collect();
        Self::new(self.dim, modes, self.k0, self.alpha_star, self.a_star)
    }

    pub fn to_spec(&self) -> MeasureSpec {
        MeasureSpec::Explicit {
            dim: self.dim,
            modes: self.modes.clone(),
            k0: Some(self.k0),
            alpha_star: Some(self.alpha_star),
            a_star: Some(self.a_star),
        }
    }
}

/// `R(t, x) = Σ_j σ_j Γ(k_j) e^{−α_j |t|} cos(k_j·x)`.
pub fn covariance_exact(measure: &SpectralMeasure, t: f64, x: &[f64]) -> DMatrix<f64> {
    let d = measure.dim;
    let mut r = DMatrix::zeros(d, d);
    for (j, m) in measure.modes.iter().enumerate() {
        let k = measure.k(j);
        let w = m.sigma * (-m.alpha * t.abs()).exp() * dot(k, x).cos();
        let n2 = measure.k_norm2[j];
        for i in 0..d {
            for l in 0..d {
                let delta = if i == l { 1.0 } else { 0.0 };
                r[(i, l)] += w * (delta - k[i] * k[l] / n2);
            }
        }
    }
    r
}

/// The entire random environment at one instant: a pair of d-vectors
/// `(A_j, B_j)` per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    /// Fast time.
    pub time: f64,
    amps: Vec<f64>,
    dim: usize,
}

impl FieldState {
    /// Draws a state from the stationary law.
    pub fn sample_stationary<R: Rng + ?Sized>(measure: &SpectralMeasure, rng: &mut R) -> Self {
        let d = measure.dim;
        let mut amps = vec![0.0; 2 * d * measure.num_modes()];
        for j in 0..measure.num_modes() {
            let k = measure.k(j);
            let s = measure.sqrt_sigma[j];
            for part in amps[2 * d * j..2 * d * (j + 1)].chunks_mut(d) {
                for a in part.iter_mut() {
                    *a = s * rng.sample::<f64, _>(StandardNormal);
                }
                project_in_place(k, measure.k_norm2[j], part);
            }
        }
        Self { time: 0.0, amps, dim: d }
    }

    /// Builds a state from explicit amplitudes, projecting them onto the
    /// divergence-free subspace.
    pub fn from_amplitudes(measure: &SpectralMeasure, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        let d = measure.dim;
        if a.len() != measure.num_modes() || b.len() != measure.num_modes() {
            return Err(LabError::validation("amps", "one (A, B) pair per mode is required"));
        }
        let mut amps = Vec::with_capacity(2 * d * a.len());
        for j in 0..a.len() {
            for src in [&a[j], &b[j]] {
                if src.len() != d {
                    return Err(LabError::validation("amps", format!("amplitudes must have {d} components")));
                }
                let mut v = src.clone();
                project_in_place(measure.k(j), measure.k_norm2[j], &mut v);
                amps.extend(v);
            }
        }
        Ok(Self { time: 0.0, amps, dim: d })
    }

    pub fn num_modes(&self) -> usize {
        self.amps.len() / (2 * self.dim)
    }

    pub fn a(&self, j: usize) -> &[f64] {
        let d = self.dim;
        &self.amps[2 * d * j..2 * d * j + d]
    }

    pub fn b(&self, j: usize) -> &[f64] {
        let d = self.dim;
        &self.amps[2 * d * j + d..2 * d * (j + 1)]
    }

    /// Exact OU transition over `dt`. Always draws one Gaussian d-vector per
    /// amplitude, including for `dt = 0`, so the stream position after a call
    /// does not depend on `dt`.
    pub fn evolve<R: Rng + ?Sized>(&mut self, measure: &SpectralMeasure, dt: f64, rng: &mut R) -> Result<()> {
        if !(dt >= 0.0) {
            return Err(LabError::validation("dt", format!("time step must be non-negative, got {dt}")));
        }
        let d = self.dim;
        let mut z = vec![0.0; d];
        for (j, m) in measure.modes.iter().enumerate() {
            let decay = (-m.alpha * dt).exp();
            let noise = (-(-2.0 * m.alpha * dt).exp_m1()).sqrt() * measure.sqrt_sigma[j];
            let k = measure.k(j);
            for part in self.amps[2 * d * j..2 * d * (j + 1)].chunks_mut(d) {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                project_in_place(k, measure.k_norm2[j], &mut z);
                for (a, zi) in part.iter_mut().zip(&z) {
                    *a = decay * *a + noise * zi;
                }
            }
        }
        self.time += dt;
        Ok(())
    }

    /// Writes `V(x)` into `out`.
    #[inline]
    pub fn evaluate_into(&self, measure: &SpectralMeasure, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for j in 0..measure.num_modes() {
            let (s, c) = dot(measure.k(j), x).sin_cos();
            let ab = &self.amps[2 * d * j..2 * d * (j + 1)];
            for i in 0..d {
                out[i] += ab[i] * c + ab[d + i] * s;
            }
        }
    }

    pub fn evaluate(&self, measure: &SpectralMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(measure, x, &mut out);
        out
    }

    /// Jacobian `∂V_i/∂x_l`; its trace is the divergence.
    pub fn evaluate_gradient(&self, measure: &SpectralMeasure, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut g = DMatrix::zeros(d, d);
        for j in 0..measure.num_modes() {
            let k = measure.k(j);
            let (s, c) = dot(k, x).sin_cos();
            let ab = &self.amps[2 * d * j..2 * d * (j + 1)];
            for i in 0..d {
                let w = -ab[i] * s + ab[d + i] * c;
                for l in 0..d {
                    g[(i, l)] += w * k[l];
                }
            }
        }
        g
    }
}

/// Serialized form of a spectral measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSpec {
    Preset(MeasurePreset),
    Explicit {
        dim: usize,
        modes: Vec<SpectralMode>,
        #[serde(rename = "K0", default, skip_serializing_if = "Option::is_none")]
        k0: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha_star: Option<f64>,
        #[serde(rename = "A_star", default, skip_serializing_if = "Option::is_none")]
        a_star: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", deny_unknown_fields)]
pub enum MeasurePreset {
    #[serde(rename = "shear")]
    Shear {
        #[serde(default = "one")]
        kappa: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default = "one")]
        alpha: f64,
    },
    #[serde(rename = "isotropic-shell")]
    IsotropicShell {
        num_modes: usize,
        #[serde(rename = "K0")]
        k0: f64,
        energy: f64,
        alpha: f64,
        /// Upper rate for the linear profile; constant profile when absent.
        #[serde(rename = "A_star", default, skip_serializing_if = "Option::is_none")]
        a_star: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

impl MeasureSpec {
    pub fn build(&self) -> Result<SpectralMeasure> {
        match self {
            MeasureSpec::Explicit {
                dim,
                modes,
                k0,
                alpha_star,
                a_star,
            } => {
                let derived = SpectralMeasure::from_modes(*dim, modes.clone())?;
                SpectralMeasure::new(
                    *dim,
                    modes.clone(),
                    k0.unwrap_or(derived.k0),
                    alpha_star.unwrap_or(derived.alpha_star),
                    a_star.unwrap_or(derived.a_star),
                )
            }
            MeasureSpec::Preset(MeasurePreset::Shear { kappa, sigma, alpha }) => {
                SpectralMeasure::shear(*kappa, *sigma, *alpha)
            }
            MeasureSpec::Preset(MeasurePreset::IsotropicShell {
                num_modes,
                k0,
                energy,
                alpha,
                a_star,
                seed,
            }) => {
                let profile = match a_star {
                    Some(a) => AlphaProfile::Linear {
                        alpha_star: *alpha,
                        a_star: *a,
                    },
                    None => AlphaProfile::Constant(*alpha),
                };
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                SpectralMeasure::isotropic_shell(*num_modes, *k0, *energy, profile, &mut rng)
            }
        }
    }
}
