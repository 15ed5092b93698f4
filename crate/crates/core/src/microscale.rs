//! ε-level simulation: characteristics, the semilinear solution along them,
//! the solution flow map with its variational flow, flow inversion and the
//! unit-scale environment process.
//!
//! Everything is integrated in fast time `τ = s/ε²`. The characteristic ODE
//! becomes `dX/dτ = ε V(τ, X/ε)`; the reaction enters as
//! `dU/dτ = ε f` (zero-mean scaling) or `dU/dτ = ε² f` (mean scaling). The
//! field is advanced with its exact OU transition, never interpolated.

use rand::Rng;

use crate::error::{LabError, Result};
use crate::field::{FieldState, SpectralMeasure};
use crate::nonlinearity::NonlinearitySpec;

/// How the reaction term is scaled relative to the advection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `∂_t u + ε⁻¹ V·∇u = f_ε`: the mean `f̄` survives in the limit.
    Mean,
    /// `∂_t u + ε⁻¹ V·∇u = ε⁻¹ f_ε`, only for centered `f`.
    ZeroMean,
}

impl Regime {
    fn reaction_factor(self, eps: f64) -> f64 {
        match self {
            Regime::Mean => eps * eps,
            Regime::ZeroMean => eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroConfig {
    pub epsilon: f64,
    /// Fast-time step.
    pub dtau: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Record every `out_stride` steps (the final step is always recorded).
    pub out_stride: usize,
    /// Number of exact OU sub-steps per integrator step. Running with
    /// `(2h, 2)` and `(h, 1)` sees the same field realization.
    pub field_substeps: usize,
}

impl MicroConfig {
    pub fn new(epsilon: f64, dtau: f64, t_start: f64, t_end: f64) -> Self {
        Self {
            epsilon,
            dtau,
            t_start,
            t_end,
            out_stride: usize::MAX,
            field_substeps: 1,
        }
    }

    /// Largest admissible step: `min(0.1/A_*, 0.1 (2π/K0) / V_rms)`.
    pub fn max_dtau(measure: &SpectralMeasure) -> f64 {
        let temporal = 0.1 / measure.a_star();
        let vrms = measure.rms_speed();
        if vrms > 0.0 {
            temporal.min(0.1 * (2.0 * std::f64::consts::PI / measure.k0()) / vrms)
        } else {
            temporal
        }
    }

    pub fn validate(&self, measure: &SpectralMeasure) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(LabError::validation("epsilon", format!("must lie in (0, 1], got {}", self.epsilon)));
        }
        if !(self.t_end > self.t_start) {
            return Err(LabError::validation("T", "terminal time must exceed the start time"));
        }
        let max = Self::max_dtau(measure);
        if !(self.dtau > 0.0) || self.dtau > max * (1.0 + 1e-12) {
            return Err(LabError::validation(
                "dtau",
                format!("fast-time step {} outside (0, {max}]", self.dtau),
            ));
        }
        if self.out_stride == 0 || self.field_substeps == 0 {
            return Err(LabError::validation("out_stride", "strides must be positive"));
        }
        Ok(())
    }

    /// Number of steps and the effective step so that they tile the horizon.
    pub fn steps(&self) -> (usize, f64) {
        let horizon = (self.t_end - self.t_start) / (self.epsilon * self.epsilon);
        let n = ((horizon / self.dtau) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        (n, horizon / n as f64)
    }
}

/// Output of one microscale run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Macro times.
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub u_values: Option<Vec<f64>>,
    pub xi_values: Option<Vec<f64>>,
    pub seed_id: u64,
}

impl TrajectoryRecord {
    pub fn final_position(&self) -> &[f64] {
        self.positions.last().expect("record holds the start point")
    }

    /// CSV dump with columns `s, x1..xd, u, xi`.
    pub fn to_csv(&self) -> String {
        let d = self.positions.first().map_or(0, Vec::len);
        let mut out = String::from("s");
        for i in 1..=d {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",u,xi\n");
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&t.to_string());
            for x in &self.positions[k] {
                out.push_str(&format!(",{x}"));
            }
            let u = self.u_values.as_ref().map_or(String::new(), |u| u[k].to_string());
            let xi = self.xi_values.as_ref().map_or(String::new(), |v| v[k].to_string());
            out.push_str(&format!(",{u},{xi}\n"));
        }
        out
    }
}

/// Flow map `u ↦ 𝔖(s, u)` sampled on a grid, with its derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub u_grid: Vec<f64>,
    /// Macro output times.
    pub times: Vec<f64>,
    /// `values[k][i] = 𝔖(times[k], u_grid[i])`.
    pub values: Vec<Vec<f64>>,
    /// `xi[k][i] = ∂_u 𝔖(times[k], u_grid[i])`.
    pub xi: Vec<Vec<f64>>,
    /// The shared characteristic.
    pub positions: Vec<Vec<f64>>,
    pub seed_id: u64,
}

impl FlowTable {
    pub fn final_values(&self) -> &[f64] {
        self.values.last().expect("flow table has at least one time")
    }

    pub fn final_xi(&self) -> &[f64] {
        self.xi.last().expect("flow table has at least one time")
    }

    pub fn final_position(&self) -> &[f64] {
        self.positions.last().expect("flow table has at least one time")
    }

    /// Solves `𝔖(T, u) = target` (see [`invert_flow`]).
    pub fn invert(&self, target: f64) -> Result<f64> {
        invert_flow(&self.u_grid, self.final_values(), Some(self.final_xi()), target)
    }
}

/// Default inversion grid: 41 points on `[−2‖u₀‖∞ − 1, 2‖u₀‖∞ + 1]`.
pub fn default_u_grid(u0_sup: f64) -> Vec<f64> {
    let half = 2.0 * u0_sup.abs() + 1.0;
    (0..41).map(|i| -half + 2.0 * half * i as f64 / 40.0).collect()
}

fn check_strictly_increasing(values: &[f64], what: &str) -> Result<()> {
    for i in 1..values.len() {
        if !(values[i] > values[i - 1]) {
            return Err(LabError::numeric(format!(
                "{what} is not strictly increasing at grid index {i}: {} then {}",
                values[i - 1],
                values[i]
            )));
        }
    }
    Ok(())
}

/// Inverts a monotone flow table: returns `u` with `𝔖(u) = target`.
///
/// Interpolates monotonically between grid images (cubic Hermite when the
/// derivative `xi` is supplied, linear otherwise) and solves on the bracketing
/// cell by bisection. Targets outside the range of grid images are returned
/// unchanged: the flow is the identity beyond the support of the reaction.
pub fn invert_flow(u_grid: &[f64], values: &[f64], xi: Option<&[f64]>, target: f64) -> Result<f64> {
    if u_grid.len() != values.len() || u_grid.len() < 2 {
        return Err(LabError::validation("u_grid", "flow table needs at least two matching points"));
    }
    check_strictly_increasing(u_grid, "u grid")?;
    check_strictly_increasing(values, "flow table")?;
    let n = values.len();
    if target < values[0] || target > values[n - 1] {
        return Ok(target);
    }
    // first index with values[i] >= target
    let hi = values.partition_point(|v| *v < target).max(1);
    if values[hi] == target {
        return Ok(u_grid[hi]);
    }
    if values[hi - 1] == target {
        return Ok(u_grid[hi - 1]);
    }
    let lo = hi - 1;
    let (u0, u1) = (u_grid[lo], u_grid[hi]);
    let (s0, s1) = (values[lo], values[hi]);
    if s0 == u0 && s1 == u1 && xi.is_none_or(|d| d[lo] == 1.0 && d[hi] == 1.0) {
        return Ok(target);
    }
    let h = u1 - u0;
    let interp = |u: f64| -> f64 {
        let z = (u - u0) / h;
        match xi {
            Some(d) => {
                let (z2, z3) = (z * z, z * z * z);
                let h00 = 2.0 * z3 - 3.0 * z2 + 1.0;
                let h10 = z3 - 2.0 * z2 + z;
                let h01 = -2.0 * z3 + 3.0 * z2;
                let h11 = z3 - z2;
                h00 * s0 + h10 * h * d[lo] + h01 * s1 + h11 * h * d[hi]
            }
            None => s0 + z * (s1 - s0),
        }
    };
    let (mut a, mut b) = (u0, u1);
    while b - a > 1e-12 * (1.0 + a.abs().max(b.abs())) {
        let m = 0.5 * (a + b);
        if interp(m) < target {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

struct Integration<'a> {
    measure: &'a SpectralMeasure,
    cfg: &'a MicroConfig,
    spec: Option<&'a NonlinearitySpec>,
    regime: Regime,
    track_xi: bool,
    check_monotone: bool,
}

struct RawRun {
    times: Vec<f64>,
    positions: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    xi: Vec<Vec<f64>>,
}

impl Integration<'_> {
    fn run<R: Rng + ?Sized>(&self, x0: &[f64], u_init: &[f64], rng: &mut R, seed_id: u64) -> Result<RawRun> {
        let measure = self.measure;
        let d = measure.dim();
        if x0.len() != d {
            return Err(LabError::validation("x", format!("start point must have {d} components")));
        }
        let cfg = self.cfg;
        let eps = cfg.epsilon;
        let (n_steps, dtau) = cfg.steps();
        let sub_dt = dtau / cfg.field_substeps as f64;
        let react = self.regime.reaction_factor(eps);
        let ncol = u_init.len();

        let mut state = FieldState::sample_stationary(measure, rng);
        state.time = cfg.t_start / (eps * eps);

        let mut x = x0.to_vec();
        let mut u = u_init.to_vec();
        let mut xi = vec![1.0; if self.track_xi { ncol } else { 0 }];
        let mut shift = vec![0.0; d];
        let mut v0 = vec![0.0; d];
        let mut v1 = vec![0.0; d];
        let mut x_pred = vec![0.0; d];
        let mut k1u = vec![0.0; ncol];
        let mut k1xi = vec![0.0; xi.len()];
        let mut u_pred = vec![0.0; ncol];

        let mut out = RawRun {
            times: vec![cfg.t_start],
            positions: vec![x.clone()],
            u: vec![u.clone()],
            xi: vec![xi.clone()],
        };

        for step in 0..n_steps {
            let s0 = cfg.t_start + eps * eps * dtau * step as f64;
            let s1 = cfg.t_start + eps * eps * dtau * (step + 1) as f64;

            for (si, xi_) in shift.iter_mut().zip(&x) {
                *si = xi_ / eps;
            }
            state.evaluate_into(measure, &shift, &mut v0);
            for i in 0..d {
                x_pred[i] = x[i] + dtau * eps * v0[i];
            }
            if let Some(spec) = self.spec {
                for c in 0..ncol {
                    let (f, fu) = spec.f_du_with_velocity(s0, &x, u[c], &v0);
                    k1u[c] = react * f;
                    u_pred[c] = u[c] + dtau * k1u[c];
                    if self.track_xi {
                        k1xi[c] = react * fu * xi[c];
                    }
                }
            }

            for _ in 0..cfg.field_substeps {
                state.evolve(measure, sub_dt, rng)?;
            }

            for (si, xp) in shift.iter_mut().zip(&x_pred) {
                *si = xp / eps;
            }
            state.evaluate_into(measure, &shift, &mut v1);
            if let Some(spec) = self.spec {
                for c in 0..ncol {
                    let (f, fu) = spec.f_du_with_velocity(s1, &x_pred, u_pred[c], &v1);
                    if self.track_xi {
                        let xi_pred = xi[c] + dtau * k1xi[c];
                        xi[c] += 0.5 * dtau * (k1xi[c] + react * fu * xi_pred);
                    }
                    u[c] += 0.5 * dtau * (k1u[c] + react * f);
                }
            }
            for i in 0..d {
                x[i] += 0.5 * dtau * eps * (v0[i] + v1[i]);
            }

            let last = step + 1 == n_steps;
            if last || (step + 1) % cfg.out_stride == 0 {
                let t_out = if last { cfg.t_end } else { s1 };
                if self.check_monotone {
                    if let Err(e) = check_strictly_increasing(&u, "flow map") {
                        return Err(LabError::numeric(format!("{e} (s = {t_out}, seed id {seed_id})")));
                    }
                    if let Some(bad) = xi.iter().position(|v| !(*v > 0.0)) {
                        return Err(LabError::numeric(format!(
                            "variational flow not positive at grid index {bad} (s = {t_out}, seed id {seed_id})"
                        )));
                    }
                }
                out.times.push(t_out);
                out.positions.push(x.clone());
                out.u.push(u.clone());
                out.xi.push(xi.clone());
            }
        }
        Ok(out)
    }
}

/// Integrates the characteristic `dX/ds = ε⁻¹ V(s/ε², X/ε)`, `X(t) = x0`.
pub fn simulate_characteristic<R: Rng + ?Sized>(
    measure: &SpectralMeasure,
    cfg: &MicroConfig,
    x0: &[f64],
    rng: &mut R,
    seed_id: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate(measure)?;
    let raw = Integration {
        measure,
        cfg,
        spec: None,
        regime: Regime::Mean,
        track_xi: false,
        check_monotone: false,
    }
    .run(x0, &[], rng, seed_id)?;
    Ok(TrajectoryRecord {
        times: raw.times,
        positions: raw.positions,
        u_values: None,
        xi_values: None,
        seed_id,
    })
}

/// Final positions of characteristics from several starts, all driven by
/// one field realization. With a single start this reproduces
/// [`simulate_characteristic`] exactly.
pub fn simulate_characteristic_bundle<R: Rng + ?Sized>(
    measure: &SpectralMeasure,
    cfg: &MicroConfig,
    starts: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate(measure)?;
    let d = measure.dim();
    if starts.iter().any(|x| x.len() != d) {
        return Err(LabError::validation("x", format!("start points must have {d} components")));
    }
    let eps = cfg.epsilon;
    let (n_steps, dtau) = cfg.steps();
    let sub_dt = dtau / cfg.field_substeps as f64;
    let mut state = FieldState::sample_stationary(measure, rng);
    let mut xs: Vec<Vec<f64>> = starts.to_vec();
    let mut v0 = vec![vec![0.0; d]; xs.len()];
    let mut shift = vec![0.0; d];
    let mut v1 = vec![0.0; d];
    let mut x_pred = vec![0.0; d];
    for _ in 0..n_steps {
        for (x, v) in xs.iter().zip(v0.iter_mut()) {
            for (si, xi_) in shift.iter_mut().zip(x) {
                *si = xi_ / eps;
            }
            state.evaluate_into(measure, &shift, v);
        }
        for _ in 0..cfg.field_substeps {
            state.evolve(measure, sub_dt, rng)?;
        }
        for (x, v) in xs.iter_mut().zip(&v0) {
            for i in 0..d {
                x_pred[i] = x[i] + dtau * eps * v[i];
                shift[i] = x_pred[i] / eps;
            }
            state.evaluate_into(measure, &shift, &mut v1);
            for i in 0..d {
                x[i] += 0.5 * dtau * eps * (v[i] + v1[i]);
            }
        }
    }
    Ok(xs)
}

fn check_regime(spec: &NonlinearitySpec, regime: Regime) -> Result<()> {
    if regime == Regime::ZeroMean && !spec.centered() {
        return Err(LabError::validation(
            "f",
            "the zero-mean scaling requires a centered nonlinearity (no non-zero constant-Φ term)",
        ));
    }
    Ok(())
}

/// Integrates `(X_ε, U_ε)` forward from `U(t) = u0`, recording `U` and the
/// variational flow `ξ = ∂U/∂u0`.
pub fn simulate_semilinear<R: Rng + ?Sized>(
    measure: &SpectralMeasure,
    cfg: &MicroConfig,
    spec: &NonlinearitySpec,
    regime: Regime,
    x0: &[f64],
    u0: f64,
    rng: &mut R,
    seed_id: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate(measure)?;
    check_regime(spec, regime)?;
    let raw = Integration {
        measure,
        cfg,
        spec: Some(spec),
        regime,
        track_xi: true,
        check_monotone: false,
    }
    .run(x0, &[u0], rng, seed_id)?;
    Ok(TrajectoryRecord {
        times: raw.times,
        positions: raw.positions,
        u_values: Some(raw.u.iter().map(|r| r[0]).collect()),
        xi_values: Some(raw.xi.iter().map(|r| r[0]).collect()),
        seed_id,
    })
}

/// Flow map on a grid of initial values, all driven by one field realization
/// and one characteristic. Fails if the columns cross or `ξ ≤ 0` at any
/// output time.
pub fn simulate_flow_map<R: Rng + ?Sized>(
    measure: &SpectralMeasure,
    cfg: &MicroConfig,
    spec: &NonlinearitySpec,
    regime: Regime,
    u_grid: &[f64],
    x0: &[f64],
    rng: &mut R,
    seed_id: u64,
) -> Result<FlowTable> {
    cfg.validate(measure)?;
    check_regime(spec, regime)?;
    check_strictly_increasing(u_grid, "u grid")?;
    let raw = Integration {
        measure,
        cfg,
        spec: Some(spec),
        regime,
        track_xi: true,
        check_monotone: true,
    }
    .run(x0, u_grid, rng, seed_id)?;
    Ok(FlowTable {
        u_grid: u_grid.to_vec(),
        times: raw.times,
        values: raw.u,
        xi: raw.xi,
        positions: raw.positions,
        seed_id,
    })
}

/// Lagrangian observables along a unit-scale particle.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSeries {
    pub times: Vec<f64>,
    pub dim: usize,
    pub num_phi: usize,
    /// `v[k*dim + p] = V_p(t_k, X(t_k))`.
    pub v: Vec<f64>,
    /// Centered `Φ_m(η_{t_k})`, row-major.
    pub phi: Vec<f64>,
}

impl EnvironmentSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn v_at(&self, k: usize) -> &[f64] {
        &self.v[k * self.dim..(k + 1) * self.dim]
    }

    pub fn phi_at(&self, k: usize) -> &[f64] {
        &self.phi[k * self.num_phi..(k + 1) * self.num_phi]
    }
}

/// Simulates the environment seen from a particle at ε = 1, starting from
/// a stationary field draw, and records `v(η_t)` and the centered `Φ_m(η_t)`
/// every `out_every` steps of size `dtau` up to `horizon`.
pub fn sample_environment<R: Rng + ?Sized>(
    measure: &SpectralMeasure,
    spec: Option<&NonlinearitySpec>,
    horizon: f64,
    dtau: f64,
    out_every: usize,
    rng: &mut R,
) -> Result<EnvironmentSeries> {
    if !(dtau > 0.0 && horizon >= 0.0) || out_every == 0 {
        return Err(LabError::validation("dtau", "need dtau > 0, horizon >= 0 and a positive output stride"));
    }
    let d = measure.dim();
    let n_phi = spec.map_or(0, NonlinearitySpec::num_terms);
    let n_steps = ((horizon / dtau) * (1.0 - 1e-12)).ceil() as usize;
    let n_out = n_steps / out_every + 1;
    let mut series = EnvironmentSeries {
        times: Vec::with_capacity(n_out),
        dim: d,
        num_phi: n_phi,
        v: Vec::with_capacity(n_out * d),
        phi: Vec::with_capacity(n_out * n_phi),
    };
    let mut state = FieldState::sample_stationary(measure, rng);
    let mut x = vec![0.0; d];
    let mut v0 = vec![0.0; d];
    let mut v1 = vec![0.0; d];
    let mut x_pred = vec![0.0; d];
    let record = |k: usize, v: &[f64], series: &mut EnvironmentSeries| {
        series.times.push(k as f64 * dtau);
        series.v.extend_from_slice(v);
        if let Some(spec) = spec {
            for m in 0..n_phi {
                series.phi.push(spec.centered_phi_value(m, v));
            }
        }
    };
    for step in 0..=n_steps {
        state.evaluate_into(measure, &x, &mut v0);
        if step % out_every == 0 {
            record(step, &v0, &mut series);
        }
        if step == n_steps {
            break;
        }
        for i in 0..d {
            x_pred[i] = x[i] + dtau * v0[i];
        }
        state.evolve(measure, dtau, rng)?;
        state.evaluate_into(measure, &x_pred, &mut v1);
        for i in 0..d {
            x[i] += 0.5 * dtau * (v0[i] + v1[i]);
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MeasureSpec;
    use crate::nonlinearity::{ChaosFunctional, Expr, TermSpec};
    use crate::rng::{Level, StreamFactory};

    fn shell() -> SpectralMeasure {
        serde_json::from_str::<MeasureSpec>(
            r#"{"preset": "isotropic-shell", "num_modes": 8, "K0": 1.0, "energy": 1.0, "alpha": 1.0, "seed": 5}"#,
        )
        .unwrap()
        .build()
        .unwrap()
    }

    fn streams() -> StreamFactory {
        StreamFactory::new(11, 0)
    }

    #[test]
    fn config_validation() {
        let m = shell();
        assert!(MicroConfig::new(0.1, 0.05, 0.0, 1.0).validate(&m).is_ok());
        assert!(MicroConfig::new(0.0, 0.05, 0.0, 1.0).validate(&m).is_err());
        assert!(MicroConfig::new(1.5, 0.05, 0.0, 1.0).validate(&m).is_err());
        assert!(MicroConfig::new(0.1, 0.5, 0.0, 1.0).validate(&m).is_err());
        assert!(MicroConfig::new(0.1, 0.05, 1.0, 1.0).validate(&m).is_err());
        let (n, dt) = MicroConfig::new(0.1, 0.1, 0.0, 1.0).steps();
        assert_eq!(n, 1000);
        assert!((dt - 0.1).abs() < 1e-12);
    }

    #[test]
    fn null_field_freezes_characteristics() {
        let m = SpectralMeasure::null(2);
        let mut cfg = MicroConfig::new(0.2, 0.1, 0.0, 1.0);
        cfg.out_stride = 10;
        let rec = simulate_characteristic(&m, &cfg, &[0.3, -0.4], &mut streams().stream(Level::Custom(0), 0), 0).unwrap();
        assert!(rec.positions.iter().all(|p| p == &vec![0.3, -0.4]));
        assert_eq!(rec.times[0], 0.0);
        assert_eq!(*rec.times.last().unwrap(), 1.0);
        assert!(rec.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn shear_keeps_first_coordinate() {
        let m = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let mut cfg = MicroConfig::new(0.2, 0.1, 0.0, 1.0);
        cfg.out_stride = 7;
        let rec = simulate_characteristic(&m, &cfg, &[0.25, 0.0], &mut streams().stream(Level::Custom(0), 1), 1).unwrap();
        assert!(rec.positions.iter().all(|p| p[0] == 0.25));
        assert!(rec.final_position()[1] != 0.0);
        let csv = rec.to_csv();
        assert!(csv.starts_with("s,x1,x2,u,xi\n"));
    }

    #[test]
    fn bundle_matches_single_runs() {
        let m = shell();
        let cfg = MicroConfig::new(0.3, 0.1, 0.0, 0.5);
        let starts = vec![vec![0.0, 0.0], vec![1.0, -0.5]];
        let bundle = simulate_characteristic_bundle(&m, &cfg, &starts, &mut streams().stream(Level::Custom(8), 0)).unwrap();
        let single = simulate_characteristic(&m, &cfg, &starts[0], &mut streams().stream(Level::Custom(8), 0), 0).unwrap();
        assert_eq!(bundle[0], single.final_position());
        let one = simulate_characteristic_bundle(&m, &cfg, &starts[1..], &mut streams().stream(Level::Custom(8), 0)).unwrap();
        assert_eq!(bundle[1], one[0]);
    }

    #[test]
    fn step_halving_with_shared_field() {
        let m = shell();
        let (fine, coarse) = (0.002, 0.004);
        let mut rel = Vec::new();
        for i in 0..8 {
            let mut cf = MicroConfig::new(0.5, fine, 0.0, 0.25);
            cf.field_substeps = 1;
            let mut cc = MicroConfig::new(0.5, coarse, 0.0, 0.25);
            cc.field_substeps = 2;
            let a = simulate_characteristic(&m, &cf, &[0.0, 0.0], &mut streams().stream(Level::Custom(3), i), i).unwrap();
            let b = simulate_characteristic(&m, &cc, &[0.0, 0.0], &mut streams().stream(Level::Custom(3), i), i).unwrap();
            let (xa, xb) = (a.final_position(), b.final_position());
            let diff = ((xa[0] - xb[0]).powi(2) + (xa[1] - xb[1]).powi(2)).sqrt();
            let disp = (xa[0].powi(2) + xa[1].powi(2)).sqrt();
            rel.push(diff / disp);
        }
        rel.sort_by(f64::total_cmp);
        assert!(rel[rel.len() / 2] < 1e-2, "median relative change {rel:?}");
    }

    #[test]
    fn zero_reaction_and_constant_reaction() {
        let m = shell();
        let cfg = MicroConfig::new(0.3, 0.1, 0.0, 1.0);
        let zero = NonlinearitySpec::zero(2);
        let r = simulate_semilinear(&m, &cfg, &zero, Regime::ZeroMean, &[0.0, 0.0], 0.7, &mut streams().stream(Level::Custom(4), 0), 0).unwrap();
        assert!(r.u_values.unwrap().iter().all(|u| *u == 0.7));
        assert!(r.xi_values.unwrap().iter().all(|x| *x == 1.0));

        let c = NonlinearitySpec::new(&[TermSpec { g: Expr::constant(0.8), phi: ChaosFunctional::Constant }], &m).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.t_start = 0.2;
        cfg2.out_stride = 50;
        let r = simulate_semilinear(&m, &cfg2, &c, Regime::Mean, &[0.0, 0.0], 0.1, &mut streams().stream(Level::Custom(4), 1), 1).unwrap();
        for (s, u) in r.times.iter().zip(r.u_values.as_ref().unwrap()) {
            assert!((u - (0.1 + 0.8 * (s - 0.2))).abs() < 1e-10, "{s}: {u}");
        }
        assert!(simulate_semilinear(&m, &cfg, &c, Regime::ZeroMean, &[0.0, 0.0], 0.0, &mut streams().stream(Level::Custom(4), 2), 2).is_err());
    }

    #[test]
    fn flow_map_identity_and_monotone() {
        let m = shell();
        let mut cfg = MicroConfig::new(0.3, 0.1, 0.0, 1.0);
        cfg.out_stride = 20;
        let grid = default_u_grid(1.0);
        let t = simulate_flow_map(&m, &cfg, &NonlinearitySpec::zero(2), Regime::ZeroMean, &grid, &[0.0, 0.0], &mut streams().stream(Level::Custom(5), 0), 0).unwrap();
        assert!(t.values.iter().all(|row| row == &grid));
        assert!(t.xi.iter().all(|row| row.iter().all(|x| *x == 1.0)));
        for target in [-0.5, 0.0, 0.3, 4.0] {
            assert!((t.invert(target).unwrap() - target).abs() < 1e-9);
        }

        let spec = NonlinearitySpec::demo_zero_u(&m).unwrap();
        let fine: Vec<f64> = (0..201).map(|i| -2.0 + 0.02 * i as f64).collect();
        let t = simulate_flow_map(&m, &cfg, &spec, Regime::ZeroMean, &fine, &[0.0, 0.0], &mut streams().stream(Level::Custom(5), 1), 1).unwrap();
        for (row, xi) in t.values.iter().zip(&t.xi) {
            assert!(row.windows(2).all(|w| w[1] > w[0]));
            assert!(xi.iter().all(|x| *x > 0.0));
        }
        let (vals, xi) = (t.final_values(), t.final_xi());
        for i in 1..fine.len() - 1 {
            let fd = (vals[i + 1] - vals[i - 1]) / (fine[i + 1] - fine[i - 1]);
            assert!((fd - xi[i]).abs() / xi[i] < 0.05, "i={i}: fd {fd} xi {}", xi[i]);
        }
        for (i, &u) in fine.iter().enumerate() {
            assert!((t.invert(vals[i]).unwrap() - u).abs() < 1e-9);
        }
    }

    #[test]
    fn invert_flow_contract() {
        let grid = [-1.0, 0.0, 1.0, 2.0];
        let vals = [-0.5, 0.5, 1.5, 2.5];
        assert!((invert_flow(&grid, &vals, None, 1.0).unwrap() - 0.5).abs() < 1e-10);
        assert_eq!(invert_flow(&grid, &vals, None, 3.0).unwrap(), 3.0);
        assert_eq!(invert_flow(&grid, &vals, None, -0.7).unwrap(), -0.7);
        assert!(invert_flow(&grid, &[0.0, 1.0, 0.5, 2.0], None, 0.7).is_err());
        // compactly supported reaction in u: identity outside the image range
        let m = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let spec = NonlinearitySpec::new(
            &[TermSpec { g: Expr::BumpU { amp: 0.5, center: 0.0, radius: 0.8 }, phi: ChaosFunctional::FieldComponent { p: 1 } }],
            &m,
        )
        .unwrap();
        let grid: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
        let t = simulate_flow_map(&m, &MicroConfig::new(0.3, 0.1, 0.0, 1.0), &spec, Regime::ZeroMean, &grid, &[0.0, 0.0], &mut streams().stream(Level::Custom(6), 0), 0).unwrap();
        assert_eq!(t.final_values()[0], -2.0);
        assert_eq!(t.invert(-2.5).unwrap(), -2.5);
        assert!((t.invert(1.9).unwrap() - 1.9).abs() < 1e-9);
    }

    #[test]
    fn environment_of_shear_flow() {
        let m = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let spec = NonlinearitySpec::demo_zero(&m).unwrap();
        let n = 4000;
        let lags = [0usize, 5, 10, 20];
        let mut acc = vec![Vec::with_capacity(n); lags.len()];
        for i in 0..n {
            let s = sample_environment(&m, Some(&spec), 2.0, 0.05, 1, &mut streams().stream(Level::Custom(7), i as u64)).unwrap();
            assert!(s.v.chunks(2).all(|v| v[0] == 0.0));
            assert_eq!(s.phi_at(3)[0], s.v_at(3)[1]);
            for (j, &l) in lags.iter().enumerate() {
                acc[j].push(s.v_at(0)[1] * s.v_at(l)[1]);
            }
        }
        for (j, &l) in lags.iter().enumerate() {
            let mean = acc[j].iter().sum::<f64>() / n as f64;
            let var = acc[j].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let expect = (-(l as f64) * 0.05).exp();
            assert!((mean - expect).abs() < 4.0 * se, "lag {l}: {mean} vs {expect}");
        }
    }
}
