//! Limit objects: the effective Brownian motion, the linear limit, the
//! integral equation of the mean regime and the limit SDE flow of the
//! zero-mean regime with its derivative flow.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::green_kubo::HomogenizedCoefficients;
use crate::microscale::FlowTable;
use crate::nonlinearity::NonlinearitySpec;

/// One realization of the `d + 1` limit drivers on `[t, T]`.
///
/// Driver 0 is the extra noise `β̃₀`; drivers `1..=d` generate
/// `X = x + S β̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitPath {
    pub times: Vec<f64>,
    dim: usize,
    /// `increments[k * (d + 1) + j]`, already scaled by `√Δs`.
    increments: Vec<f64>,
    pub x_path: Vec<Vec<f64>>,
}

impl LimitPath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Driver increments over step `k`.
    pub fn increment(&self, k: usize) -> &[f64] {
        let w = self.dim + 1;
        &self.increments[k * w..(k + 1) * w]
    }

    pub fn start(&self) -> &[f64] {
        &self.x_path[0]
    }

    pub fn final_position(&self) -> &[f64] {
        self.x_path.last().expect("path has a start point")
    }

    /// The same Brownian realization on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize, s: &nalgebra::DMatrix<f64>) -> Result<LimitPath> {
        let n = self.n_steps();
        if factor == 0 || n % factor != 0 {
            return Err(LabError::validation("n_steps", format!("{n} steps are not divisible by {factor}")));
        }
        let w = self.dim + 1;
        let mut inc = vec![0.0; (n / factor) * w];
        for k in 0..n {
            let dst = (k / factor) * w;
            for j in 0..w {
                inc[dst + j] += self.increments[k * w + j];
            }
        }
        let times = self.times.iter().step_by(factor).copied().collect();
        Ok(build_path(self.start(), times, inc, s))
    }
}

fn build_path(x: &[f64], times: Vec<f64>, increments: Vec<f64>, s: &nalgebra::DMatrix<f64>) -> LimitPath {
    let d = x.len();
    let w = d + 1;
    let n = times.len() - 1;
    let mut x_path = Vec::with_capacity(n + 1);
    let mut cur = x.to_vec();
    x_path.push(cur.clone());
    for k in 0..n {
        let dw = &increments[k * w + 1..(k + 1) * w];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                let sij = s[(i, j)];
                if sij != 0.0 {
                    acc += sij * dw[j];
                }
            }
            cur[i] += acc;
        }
        x_path.push(cur.clone());
    }
    LimitPath {
        times,
        dim: d,
        increments,
        x_path,
    }
}

/// Samples the drivers and the effective Brownian path started at `x`.
/// Increments are exact Gaussians, so the path law at grid times carries no
/// discretization error.
pub fn sample_effective_bm<R: Rng + ?Sized>(
    coeffs: &HomogenizedCoefficients,
    x: &[f64],
    t: f64,
    t_end: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<LimitPath> {
    let d = coeffs.dim();
    if x.len() != d {
        return Err(LabError::validation("x", format!("start point must have {d} components")));
    }
    if !(t_end > t) || n_steps == 0 {
        return Err(LabError::validation("n_steps", "need T > t and at least one step"));
    }
    let ds = (t_end - t) / n_steps as f64;
    let sq = ds.sqrt();
    let increments: Vec<f64> = (0..n_steps * (d + 1))
        .map(|_| sq * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let times = (0..=n_steps)
        .map(|k| if k == n_steps { t_end } else { t + k as f64 * ds })
        .collect();
    Ok(build_path(x, times, increments, &coeffs.s))
}

/// `u₀(X(T))`.
pub fn solve_linear_limit(u0: impl Fn(&[f64]) -> f64, path: &LimitPath) -> f64 {
    u0(path.final_position())
}

/// Solves `d𝒰/ds = f̄(s, X(s), 𝒰)`, `𝒰(T) = terminal`, backward with RK4
/// along the piecewise-linear path, and returns `𝒰(t)`.
pub fn solve_terminal_ode(fbar: impl Fn(f64, &[f64], f64) -> f64, path: &LimitPath, terminal: f64) -> f64 {
    let d = path.dim();
    let mut mid = vec![0.0; d];
    let mut u = terminal;
    for k in (0..path.n_steps()).rev() {
        let (s0, s1) = (path.times[k], path.times[k + 1]);
        let (x0, x1) = (&path.x_path[k], &path.x_path[k + 1]);
        for i in 0..d {
            mid[i] = 0.5 * (x0[i] + x1[i]);
        }
        let sm = 0.5 * (s0 + s1);
        let h = s1 - s0;
        // integrate from s1 down to s0
        let k1 = fbar(s1, x1, u);
        let k2 = fbar(sm, &mid, u - 0.5 * h * k1);
        let k3 = fbar(sm, &mid, u - 0.5 * h * k2);
        let k4 = fbar(s0, x0, u - h * k3);
        u -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    u
}

/// `𝒰(t; t, x)` for the mean regime: `f̄` is the constant-Φ part of `spec`.
pub fn solve_integral_equation(spec: &NonlinearitySpec, path: &LimitPath, u0: impl Fn(&[f64]) -> f64) -> f64 {
    let terminal = solve_linear_limit(u0, path);
    solve_terminal_ode(|s, x, u| spec.mean_f(s, x, u), path, terminal)
}

/// Euler–Maruyama for the limit flow `u ↦ U^{t,x,u}(s)` on a grid of initial
/// values, all columns driven by the same path. `ξ = exp(Z)` with
/// `dZ = (∂_u b − ½ Σ γ_j²) ds + Σ γ_j dβ̃_j`, `γ_j = ∂_u c̃_j`.
///
/// Columns are checked for strict ordering after every step. The table keeps
/// every `out_stride`-th step and the final one.
pub fn simulate_limit_flow(
    coeffs: &HomogenizedCoefficients,
    spec: &NonlinearitySpec,
    u_grid: &[f64],
    path: &LimitPath,
    out_stride: usize,
    seed_id: u64,
) -> Result<FlowTable> {
    coeffs.check_compatible(spec)?;
    if path.dim() != coeffs.dim() {
        return Err(LabError::validation("x", "path dimension differs from the coefficients'"));
    }
    if u_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(LabError::validation("u_grid", "must be strictly increasing"));
    }
    let out_stride = out_stride.max(1);
    let d = path.dim();
    let n = path.n_steps();
    let mut u = u_grid.to_vec();
    let mut z = vec![0.0; u.len()];
    let mut clamped_steps = 0usize;
    let mut table = FlowTable {
        u_grid: u_grid.to_vec(),
        times: vec![path.times[0]],
        values: vec![u.clone()],
        xi: vec![vec![1.0; u.len()]],
        positions: vec![path.x_path[0].clone()],
        seed_id,
    };
    for k in 0..n {
        let s = path.times[k];
        let ds = path.times[k + 1] - s;
        let x = &path.x_path[k];
        let dw = path.increment(k);
        for c in 0..u.len() {
            let v = coeffs.evaluate(spec, s, x, u[c]);
            if v.clamped && v.c0_u == 0.0 && coeffs.q.iter().any(|q| *q != 0.0) {
                clamped_steps += 1;
            }
            let mut du = v.b * ds + v.c0 * dw[0];
            let mut dz = v.c0_u * dw[0];
            let mut gamma2 = v.c0_u * v.c0_u;
            for j in 0..d {
                du += v.c[j] * dw[j + 1];
                dz += v.c_u[j] * dw[j + 1];
                gamma2 += v.c_u[j] * v.c_u[j];
            }
            dz += (v.b_u - 0.5 * gamma2) * ds;
            u[c] += du;
            z[c] += dz;
        }
        if let Some(i) = (1..u.len()).find(|&i| !(u[i] > u[i - 1])) {
            return Err(LabError::numeric(format!(
                "limit flow columns {} and {i} crossed at s = {} (seed id {seed_id}); reduce the step",
                i - 1,
                path.times[k + 1]
            )));
        }
        if k + 1 == n || (k + 1) % out_stride == 0 {
            table.times.push(path.times[k + 1]);
            table.values.push(u.clone());
            table.xi.push(z.iter().map(|z| z.exp()).collect());
            table.positions.push(path.x_path[k + 1].clone());
        }
    }
    if clamped_steps > 0 {
        log::debug!("limit flow {seed_id}: c0 at the zero clamp on {clamped_steps} column-steps");
    }
    Ok(table)
}

/// `(𝔖_T)⁻¹(u₀(X(T)))`.
pub fn invert_limit_flow(table: &FlowTable, u0: impl Fn(&[f64]) -> f64) -> Result<f64> {
    table.invert(u0(table.final_position()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SpectralMeasure;
    use crate::green_kubo::{CoefficientErrors, CoefficientMeta};
    use crate::nonlinearity::{ChaosFunctional, Expr, TermSpec};
    use crate::rng::{Level, StreamFactory};
    use nalgebra::DMatrix;

    fn rng(i: u64) -> crate::rng::Stream {
        StreamFactory::new(99, 0).stream(Level::Custom(1), i)
    }

    /// Shear coefficients for a single field-component term with `∫C = a/2`.
    fn shear_coeffs(a: f64) -> HomogenizedCoefficients {
        let m2 = |r: &[f64]| DMatrix::from_row_slice(2, 1, r);
        let m1 = |x: f64| DMatrix::from_element(1, 1, x);
        HomogenizedCoefficients::from_constants(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, a]),
            m2(&[0.0, a / 2.0]),
            m1(a / 2.0),
            m2(&[0.0, a]),
            m1(a),
            CoefficientErrors {
                a: DMatrix::zeros(2, 2),
                lambda: DMatrix::zeros(2, 1),
                mu: DMatrix::zeros(1, 1),
                kappa_v: DMatrix::zeros(2, 1),
                kappa0: DMatrix::zeros(1, 1),
                q_eigen: vec![0.0],
            },
            CoefficientMeta { t_gk: 0.0, n_paths: 0, seed: 0 },
        )
        .unwrap()
    }

    #[test]
    fn effective_bm_covariance() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = HomogenizedCoefficients::linear(a.clone()).unwrap();
        let n = 10_000;
        let mut ends = Vec::with_capacity(n);
        let mut r = rng(0);
        for _ in 0..n {
            let p = sample_effective_bm(&c, &[1.0, -1.0], 0.0, 0.5, 4, &mut r).unwrap();
            ends.push([p.final_position()[0] - 1.0, p.final_position()[1] + 1.0]);
        }
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let prods: Vec<f64> = ends.iter().map(|e| e[i] * e[j]).collect();
            let mean = prods.iter().sum::<f64>() / n as f64;
            let var = prods.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((mean - 0.5 * a[(i, j)]).abs() < 4.0 * (var / n as f64).sqrt(), "({i},{j}) {mean}");
        }
        let id = HomogenizedCoefficients::linear(DMatrix::identity(2, 2)).unwrap();
        let p = sample_effective_bm(&id, &[0.0, 0.0], 0.0, 1.0, 8, &mut r).unwrap();
        for k in 0..8 {
            let dx: Vec<f64> = (0..2).map(|i| p.x_path[k + 1][i] - p.x_path[k][i]).collect();
            assert!((dx[0] - p.increment(k)[1]).abs() < 1e-15 && (dx[1] - p.increment(k)[2]).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_and_trivial_linear_limits() {
        let c = shear_coeffs(2.0);
        let p = sample_effective_bm(&c, &[0.3, 0.0], 0.0, 1.0, 64, &mut rng(1)).unwrap();
        assert!(p.x_path.iter().all(|x| x[0] == 0.3));
        assert_eq!(solve_linear_limit(|_| 1.5, &p), 1.5);
        let zero = HomogenizedCoefficients::linear(DMatrix::zeros(2, 2)).unwrap();
        let p = sample_effective_bm(&zero, &[0.3, 0.2], 0.0, 1.0, 64, &mut rng(2)).unwrap();
        assert_eq!(solve_linear_limit(|x| x[0] + 10.0 * x[1], &p), 2.3);
    }

    #[test]
    fn coarsening_keeps_the_endpoint() {
        let c = HomogenizedCoefficients::linear(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap();
        let p = sample_effective_bm(&c, &[0.0, 0.0], 0.0, 1.0, 64, &mut rng(3)).unwrap();
        let q = p.coarsen(4, &c.s).unwrap();
        assert_eq!(q.n_steps(), 16);
        for i in 0..2 {
            assert!((q.final_position()[i] - p.final_position()[i]).abs() < 1e-12);
            assert!((q.x_path[5][i] - p.x_path[20][i]).abs() < 1e-12);
        }
        assert!(p.coarsen(3, &c.s).is_err());
    }

    #[test]
    fn integral_equation_closed_forms() {
        let frozen = HomogenizedCoefficients::linear(DMatrix::zeros(2, 2)).unwrap();
        let p = sample_effective_bm(&frozen, &[0.0, 0.0], 0.25, 1.0, 512, &mut rng(4)).unwrap();
        assert_eq!(solve_terminal_ode(|_, _, _| 0.0, &p, 0.7), 0.7);
        assert!((solve_terminal_ode(|_, _, _| 0.4, &p, 0.7) - (0.7 - 0.4 * 0.75)).abs() < 1e-12);
        let decay = solve_terminal_ode(|_, _, u| -u, &p, 1.0);
        assert!((decay - 0.75f64.exp()).abs() < 1e-10, "{decay}");
        let growth = solve_terminal_ode(|_, _, u| u, &p, 1.0);
        assert!((growth - (-0.75f64).exp()).abs() < 1e-10, "{growth}");
    }

    #[test]
    fn integral_equation_grid_halving() {
        let m = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let spec = NonlinearitySpec::demo_mean(&m).unwrap();
        let c = HomogenizedCoefficients::linear(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let u0 = |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1])).exp();
        for i in 0..10 {
            let fine = sample_effective_bm(&c, &[0.2, 0.0], 0.0, 1.0, 1024, &mut rng(10 + i)).unwrap();
            let coarse = fine.coarsen(2, &c.s).unwrap();
            let a = solve_integral_equation(&spec, &fine, u0);
            let b = solve_integral_equation(&spec, &coarse, u0);
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn trivial_limit_flows() {
        let m = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let c = shear_coeffs(2.0);
        let grid: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let p = sample_effective_bm(&c, &[0.0, 0.0], 0.0, 1.0, 256, &mut rng(20)).unwrap();

        let null = NonlinearitySpec::new(
            &[TermSpec { g: Expr::constant(0.0), phi: ChaosFunctional::FieldComponent { p: 1 } }],
            &m,
        )
        .unwrap();
        let t = simulate_limit_flow(&c, &null, &grid, &p, 1, 0).unwrap();
        assert!(t.values.iter().all(|r| r == &grid));
        assert!(t.xi.iter().all(|r| r.iter().all(|x| *x == 1.0)));
        assert!((invert_limit_flow(&t, |x| x[1]).unwrap() - p.final_position()[1]).abs() < 1e-9);

        let spec = NonlinearitySpec::demo_zero(&m).unwrap();
        let t = simulate_limit_flow(&c, &spec, &grid, &p, 16, 0).unwrap();
        for (row, xi) in t.values.iter().zip(&t.xi) {
            let shift = row[0] - grid[0];
            assert!(row.iter().zip(&grid).all(|(r, g)| ((r - g) - shift).abs() < 1e-12));
            assert!(xi.iter().all(|x| *x == 1.0));
        }
        let fin = t.final_values()[0] - grid[0];
        assert!((fin - 0.4 * (p.final_position()[1])).abs() < 1e-12);
        for (i, g) in grid.iter().enumerate() {
            assert!((t.invert(t.final_values()[i]).unwrap() - g).abs() < 1e-9);
        }
    }

    /// Exact Stratonovich flow `dU = g(U) ∘ dY`: solve `dU/dy = g(U)` accurately.
    fn exact_flow(u: f64, y: f64) -> f64 {
        let g = |u: f64| 0.3 + 0.2 * u.sin();
        let n = 2000;
        let h = y / n as f64;
        let mut v = u;
        for _ in 0..n {
            let k1 = g(v);
            let k2 = g(v + 0.5 * h * k1);
            let k3 = g(v + 0.5 * h * k2);
            let k4 = g(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    }

    #[test]
    fn derivative_flow_matches_finite_differences() {
        let m = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let spec = NonlinearitySpec::demo_zero_u(&m).unwrap();
        let c = shear_coeffs(2.0);
        let grid: Vec<f64> = (0..201).map(|i| -2.0 + 0.02 * i as f64).collect();
        let mut rel = Vec::new();
        for i in 0..5 {
            let p = sample_effective_bm(&c, &[0.0, 0.0], 0.0, 1.0, 2048, &mut rng(30 + i)).unwrap();
            let t = simulate_limit_flow(&c, &spec, &grid, &p, 2048, i).unwrap();
            let (v, xi) = (t.final_values(), t.final_xi());
            for j in 1..grid.len() - 1 {
                let fd = (v[j + 1] - v[j - 1]) / (grid[j + 1] - grid[j - 1]);
                rel.push((xi[j] - fd).abs() / fd);
            }
            let y = p.final_position()[1];
            assert!((v[100] - exact_flow(grid[100], y)).abs() < 0.05);
        }
        rel.sort_by(f64::total_cmp);
        assert!(rel[rel.len() / 2] < 0.05, "median {}", rel[rel.len() / 2]);
    }
}
