//! Experiment pipelines. Each returns metric rows and sample sets in memory;
//! writing files is left to the caller.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::config::{BumpSpec, ExperimentConfig, ExperimentKind, Resolved};
use crate::error::{LabError, Result};
use crate::green_kubo::{assemble_coefficients, estimate_correlators, CorrelatorTable, HomogenizedCoefficients};
use crate::linalg::PsdDecomposition;
use crate::macroscale::{invert_limit_flow, sample_effective_bm, simulate_limit_flow, solve_integral_equation};
use crate::microscale::{
    simulate_characteristic, simulate_characteristic_bundle, simulate_flow_map, FlowTable, MicroConfig, Regime,
};
use crate::nonlinearity::NonlinearitySpec;
use crate::rng::{Level, StreamFactory};
use crate::stats::{
    bootstrap_ci, correlation_ci, gaussian_expectation, ks_with_ci, mean_se, sample_variance, w1_with_ci,
    weak_average, ConvergenceLadder, Estimate, SampleSet,
};

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// An ε value, or `limit`, `gk`, `ladder`, `field`.
    pub epsilon: String,
    pub metric: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

impl MetricRow {
    fn point(epsilon: &str, metric: &str, value: f64, n: usize) -> Self {
        Self::with_ci(epsilon, metric, Estimate { value, ci_lo: value, ci_hi: value }, n)
    }

    fn with_ci(epsilon: &str, metric: &str, e: Estimate, n: usize) -> Self {
        Self {
            epsilon: epsilon.to_string(),
            metric: metric.to_string(),
            value: e.value,
            ci_lo: e.ci_lo,
            ci_hi: e.ci_hi,
            n,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.value, ci_lo: self.ci_lo, ci_hi: self.ci_hi }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub metrics: Vec<MetricRow>,
    /// `(label, values)`; written as `samples_<label>.csv`.
    pub samples: Vec<(String, Vec<f64>)>,
    pub coefficients: Option<HomogenizedCoefficients>,
    pub correlators: Option<CorrelatorTable>,
    /// Wall time per stage in seconds.
    pub timings: Vec<(String, f64)>,
}

impl PipelineOutput {
    pub fn metric(&self, epsilon: &str, name: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|r| r.epsilon == epsilon && r.metric == name)
    }

    pub fn samples(&self, label: &str) -> Option<&[f64]> {
        self.samples.iter().find(|(l, _)| l == label).map(|(_, v)| v.as_slice())
    }
}

pub fn eps_label(eps: f64) -> String {
    format!("{eps}")
}

fn normal_ci(mean: f64, se: f64) -> Estimate {
    Estimate { value: mean, ci_lo: mean - 1.96 * se, ci_hi: mean + 1.96 * se }
}

fn par_collect<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    res: &'a Resolved,
    streams: StreamFactory,
    out: PipelineOutput,
    clock: Instant,
}

/// Runs the configured experiment on the current rayon pool.
pub fn execute(cfg: &ExperimentConfig, res: &Resolved) -> Result<PipelineOutput> {
    let mut ctx = Ctx {
        cfg,
        res,
        streams: StreamFactory::new(cfg.seed, cfg.experiment_id),
        out: PipelineOutput::default(),
        clock: Instant::now(),
    };
    match cfg.experiment {
        ExperimentKind::FieldCheck => ctx.field_check()?,
        ExperimentKind::Diffusivity => ctx.diffusivity()?,
        ExperimentKind::Linear => ctx.linear()?,
        ExperimentKind::TwoPoint => ctx.two_point()?,
        ExperimentKind::WeakAverage => ctx.weak()?,
        ExperimentKind::SemilinearMean => ctx.semilinear_mean()?,
        ExperimentKind::SemilinearZero => ctx.semilinear_zero()?,
        ExperimentKind::Coefficients => {
            ctx.coefficients(true)?;
        }
    }
    Ok(ctx.out)
}

impl<'a> Ctx<'a> {
    fn lap(&mut self, stage: impl Into<String>) {
        let now = Instant::now();
        self.out.timings.push((stage.into(), (now - self.clock).as_secs_f64()));
        self.clock = now;
    }

    fn micro(&self, eps: f64) -> MicroConfig {
        MicroConfig::new(eps, self.res.dtau, self.cfg.t, self.cfg.t_end)
    }

    fn u0(&self) -> &'a BumpSpec {
        self.cfg.u0.as_ref().expect("validated: u0 present")
    }

    fn spec(&self) -> &'a NonlinearitySpec {
        self.res.spec.as_ref().expect("validated: f present")
    }

    fn bootstrap_rng(&self, slot: u64) -> crate::rng::Stream {
        self.streams.stream(Level::Bootstrap, slot)
    }

    /// Loads the coefficient file when present, otherwise runs Green–Kubo.
    /// With `with_spec` the Φ observables of `f` are included.
    fn coefficients(&mut self, with_spec: bool) -> Result<HomogenizedCoefficients> {
        let zero = NonlinearitySpec::zero(self.res.measure.dim());
        let spec = if with_spec { self.res.spec.as_ref().unwrap_or(&zero) } else { &zero };
        if self.cfg.experiment != ExperimentKind::Coefficients {
            if let Some(path) = &self.cfg.coefficients_file {
                let p = std::path::Path::new(path);
                if p.exists() {
                    let c = HomogenizedCoefficients::from_json(&std::fs::read_to_string(p)?)?;
                    if c.dim() != self.res.measure.dim() {
                        return Err(LabError::validation("coefficients_file", "dimension differs from the measure"));
                    }
                    if with_spec {
                        c.check_compatible(spec)?;
                    }
                    self.lap("coefficients (file)");
                    return Ok(c);
                }
            }
        }
        let phi = if with_spec { self.res.spec.as_ref() } else { None };
        let table = estimate_correlators(
            &self.res.measure,
            phi,
            self.cfg.numerics.gk_paths,
            self.res.t_gk,
            self.res.gk_dtau,
            &self.streams,
        )?;
        let c = assemble_coefficients(spec, &table, self.cfg.seed)?;
        let n = table.n_paths;
        let d = c.dim();
        for i in 0..d {
            for j in i..d {
                let e = normal_ci(c.a[(i, j)], c.std_errors.a[(i, j)]);
                self.out.metrics.push(MetricRow::with_ci("gk", &format!("A_{}{}", i + 1, j + 1), e, n));
            }
        }
        for m in 0..c.num_phi() {
            for p in 0..d {
                let e = normal_ci(c.lambda[(p, m)], c.std_errors.lambda[(p, m)]);
                self.out.metrics.push(MetricRow::with_ci("gk", &format!("lambda_{}{}", p + 1, m + 1), e, n));
                let e = normal_ci(c.kappa_v[(p, m)], c.std_errors.kappa_v[(p, m)]);
                self.out.metrics.push(MetricRow::with_ci("gk", &format!("kappa_v_{}{}", p + 1, m + 1), e, n));
            }
            for k in 0..c.num_phi() {
                let e = normal_ci(c.mu[(m, k)], c.std_errors.mu[(m, k)]);
                self.out.metrics.push(MetricRow::with_ci("gk", &format!("mu_{}{}", m + 1, k + 1), e, n));
                let e = normal_ci(c.kappa0[(m, k)], c.std_errors.kappa0[(m, k)]);
                self.out.metrics.push(MetricRow::with_ci("gk", &format!("kappa0_{}{}", m + 1, k + 1), e, n));
            }
        }
        self.out.coefficients = Some(c.clone());
        self.out.correlators = Some(table);
        self.lap("green-kubo");
        Ok(c)
    }

    fn limit_linear(&self, coeffs: &HomogenizedCoefficients, level: Level, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let u0 = self.u0();
        par_collect(cfg.n_paths, |i| {
            let mut rng = self.streams.stream(level, i as u64);
            let path = sample_effective_bm(coeffs, x, cfg.t, cfg.t_end, cfg.numerics.n_steps, &mut rng)?;
            Ok(u0.eval(path.final_position()))
        })
    }

    /// KS, W1 and mean rows for every ε plus the limit self-distance.
    fn compare_ladder(&mut self, eps_samples: Vec<(f64, Vec<f64>)>, limit: Vec<f64>, replica: Vec<f64>) -> Result<()> {
        let nb = self.cfg.numerics.bootstrap;
        let seed = self.cfg.seed;
        let lim = SampleSet::new(limit, "limit", seed)?;
        let rep = SampleSet::new(replica, "limit-replica", seed)?;
        let mut ks = Vec::new();
        let mut w1 = Vec::new();
        for (ie, (eps, values)) in eps_samples.into_iter().enumerate() {
            let label = eps_label(eps);
            let s = SampleSet::new(values, label.clone(), seed)?;
            let n = s.len();
            let k = ks_with_ci(&s, &lim, nb, &mut self.bootstrap_rng(4 * ie as u64))?;
            let w = w1_with_ci(&s, &lim, nb, &mut self.bootstrap_rng(4 * ie as u64 + 1))?;
            let (m, se) = mean_se(s.values());
            self.out.metrics.push(MetricRow::with_ci(&label, "ks", k, n));
            self.out.metrics.push(MetricRow::with_ci(&label, "w1", w, n));
            self.out.metrics.push(MetricRow::with_ci(&label, "mean", normal_ci(m, se), n));
            ks.push(k);
            w1.push(w);
            self.out.samples.push((label, s.values().to_vec()));
        }
        let n = lim.len();
        let k = ks_with_ci(&rep, &lim, nb, &mut self.bootstrap_rng(1 << 20))?;
        let w = w1_with_ci(&rep, &lim, nb, &mut self.bootstrap_rng((1 << 20) + 1))?;
        let (m, se) = mean_se(lim.values());
        self.out.metrics.push(MetricRow::with_ci("limit", "ks", k, n));
        self.out.metrics.push(MetricRow::with_ci("limit", "w1", w, n));
        self.out.metrics.push(MetricRow::with_ci("limit", "mean", normal_ci(m, se), n));
        let eps = self.cfg.epsilons.clone();
        let ks_ladder = ConvergenceLadder::new(eps.clone(), ks)?;
        let w1_ladder = ConvergenceLadder::new(eps, w1)?;
        let count = self.cfg.epsilons.len();
        self.out.metrics.push(MetricRow::point("ladder", "ks_monotone", f64::from(u8::from(ks_ladder.monotone_trend())), count));
        self.out.metrics.push(MetricRow::point("ladder", "w1_monotone", f64::from(u8::from(w1_ladder.monotone_trend())), count));
        self.out.samples.push(("limit".into(), lim.values().to_vec()));
        Ok(())
    }

    fn field_check(&mut self) -> Result<()> {
        use crate::field::{covariance_exact, FieldState};
        let m = &self.res.measure;
        let d = m.dim();
        let n_div = 1000;
        let divs = par_collect(n_div, |i| {
            let mut rng = self.streams.stream(Level::Field, i as u64);
            let state = FieldState::sample_stationary(m, &mut rng);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            Ok(state.evaluate_gradient(m, &x).trace().abs())
        })?;
        let max_div = divs.iter().copied().fold(0.0, f64::max);
        self.out.metrics.push(MetricRow::point("field", "divergence_max", max_div, n_div));

        let a = m.alpha_star();
        let times = [0.0, 0.25 / a, 0.5 / a, 1.0 / a, 2.0 / a];
        let lags = [0.0, 0.5 / m.k0(), 1.0 / m.k0(), 2.0 / m.k0(), 4.0 / m.k0()];
        let n = self.cfg.numerics.field_samples;
        let per = times.len() * lags.len() * d * d;
        let prods = par_collect(n, |i| {
            let mut rng = self.streams.stream(Level::Field, (1 << 30) + i as u64);
            let mut state = FieldState::sample_stationary(m, &mut rng);
            let v00 = state.evaluate(m, &vec![0.0; d]);
            let mut out = Vec::with_capacity(per);
            let mut now = 0.0;
            for &t in &times {
                state.evolve(m, t - now, &mut rng)?;
                now = t;
                for &l in &lags {
                    let mut x = vec![0.0; d];
                    x[0] = l;
                    let v = state.evaluate(m, &x);
                    for p in 0..d {
                        for q in 0..d {
                            out.push(v[p] * v00[q]);
                        }
                    }
                }
            }
            Ok(out)
        })?;
        let mut max_z = 0.0f64;
        let mut within = 0usize;
        for (ti, &t) in times.iter().enumerate() {
            for (li, &l) in lags.iter().enumerate() {
                let mut x = vec![0.0; d];
                x[0] = l;
                let exact = covariance_exact(m, t, &x);
                for p in 0..d {
                    for q in 0..d {
                        let k = ((ti * lags.len() + li) * d + p) * d + q;
                        let col: Vec<f64> = prods.iter().map(|r| r[k]).collect();
                        let (mean, se) = mean_se(&col);
                        let diff = (mean - exact[(p, q)]).abs();
                        let z = if se > 0.0 { diff / se } else if diff < 1e-12 { 0.0 } else { f64::INFINITY };
                        max_z = max_z.max(z);
                        if z <= 4.0 {
                            within += 1;
                        }
                    }
                }
            }
        }
        let total = times.len() * lags.len() * d * d;
        self.out.metrics.push(MetricRow::point("field", "cov_max_z", max_z, n));
        self.out.metrics.push(MetricRow::point("field", "cov_frac_within_4se", within as f64 / total as f64, n));
        self.lap("field-check");
        Ok(())
    }

    fn diffusivity(&mut self) -> Result<()> {
        self.coefficients(false)?;
        let cfg = self.cfg;
        let m = &self.res.measure;
        let d = m.dim();
        let span = cfg.t_end - cfg.t;
        for (ie, &eps) in cfg.epsilons.iter().enumerate() {
            let mc = self.micro(eps);
            let disp = par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(Level::Epsilon(ie), i as u64);
                let r = simulate_characteristic(m, &mc, &cfg.x, &mut rng, i as u64)?;
                Ok(r.final_position().iter().zip(&cfg.x).map(|(a, b)| a - b).collect::<Vec<f64>>())
            })?;
            let label = eps_label(eps);
            for p in 0..d {
                for q in p..d {
                    let mp = disp.iter().map(|v| v[p]).sum::<f64>() / disp.len() as f64;
                    let mq = disp.iter().map(|v| v[q]).sum::<f64>() / disp.len() as f64;
                    let col: Vec<f64> = disp.iter().map(|v| (v[p] - mp) * (v[q] - mq) / span).collect();
                    let (_, se) = mean_se(&col);
                    let nn = col.len() as f64;
                    let cov = col.iter().sum::<f64>() / (nn - 1.0);
                    self.out.metrics.push(MetricRow::with_ci(&label, &format!("msd_{}{}", p + 1, q + 1), normal_ci(cov, se), col.len()));
                }
            }
            self.out.samples.push((label, disp.iter().map(|v| v[d - 1]).collect()));
            self.lap(format!("microscale eps={eps}"));
        }
        Ok(())
    }

    fn linear(&mut self) -> Result<()> {
        let coeffs = self.coefficients(false)?;
        let cfg = self.cfg;
        let limit = self.limit_linear(&coeffs, Level::Limit, &cfg.x)?;
        let replica = self.limit_linear(&coeffs, Level::LimitReplica, &cfg.x)?;
        self.lap("limit");
        let m = &self.res.measure;
        let u0 = self.u0();
        let mut eps_samples = Vec::new();
        for (ie, &eps) in cfg.epsilons.iter().enumerate() {
            let mc = self.micro(eps);
            let v = par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(Level::Epsilon(ie), i as u64);
                let r = simulate_characteristic(m, &mc, &cfg.x, &mut rng, i as u64)?;
                Ok(u0.eval(r.final_position()))
            })?;
            eps_samples.push((eps, v));
        }
        self.lap("microscale");
        self.compare_ladder(eps_samples, limit, replica)
    }

    fn two_point(&mut self) -> Result<()> {
        let coeffs = self.coefficients(false)?;
        let cfg = self.cfg;
        let x2 = cfg.x2.clone().expect("validated: x2 present");
        let m = &self.res.measure;
        let u0 = self.u0();
        let starts = vec![cfg.x.clone(), x2.clone()];
        let mut abs = Vec::new();
        for (ie, &eps) in cfg.epsilons.iter().enumerate() {
            let mc = self.micro(eps);
            let pairs = par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(Level::Epsilon(ie), i as u64);
                let ends = simulate_characteristic_bundle(m, &mc, &starts, &mut rng)?;
                Ok((u0.eval(&ends[0]), u0.eval(&ends[1])))
            })?;
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let label = eps_label(eps);
            let c = correlation_ci(
                &SampleSet::new(a.clone(), label.clone(), cfg.seed)?,
                &SampleSet::new(b.clone(), label.clone(), cfg.seed)?,
                &mut self.bootstrap_rng(4 * ie as u64 + 2),
            )?;
            let ac = abs_estimate(c);
            self.out.metrics.push(MetricRow::with_ci(&label, "corr", c, a.len()));
            self.out.metrics.push(MetricRow::with_ci(&label, "abs_corr", ac, a.len()));
            abs.push(ac);
            self.out.samples.push((label.clone(), a));
            self.out.samples.push((format!("{label}_x2"), b));
        }
        self.lap("microscale");
        let la = self.limit_linear(&coeffs, Level::Limit, &cfg.x)?;
        let lb = self.limit_linear(&coeffs, Level::LimitReplica, &x2)?;
        let c = correlation_ci(
            &SampleSet::new(la.clone(), "limit", cfg.seed)?,
            &SampleSet::new(lb.clone(), "limit", cfg.seed)?,
            &mut self.bootstrap_rng(1 << 21),
        )?;
        self.out.metrics.push(MetricRow::with_ci("limit", "corr", c, la.len()));
        self.out.metrics.push(MetricRow::with_ci("limit", "abs_corr", abs_estimate(c), la.len()));
        let ladder = ConvergenceLadder::new(cfg.epsilons.clone(), abs)?;
        self.out.metrics.push(MetricRow::point("ladder", "abs_corr_monotone", f64::from(u8::from(ladder.monotone_trend())), cfg.epsilons.len()));
        self.out.samples.push(("limit".into(), la));
        self.out.samples.push(("limit_x2".into(), lb));
        self.lap("limit");
        Ok(())
    }

    fn weak_grid(&self) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
        let w = &self.res.weak;
        let x = &self.cfg.x;
        let d = x.len();
        let n = w.grid_n;
        let half = (n as f64 - 1.0) / 2.0;
        let mut starts = Vec::with_capacity(n.pow(d as u32));
        let mut idx = vec![0usize; d];
        'outer: loop {
            starts.push((0..d).map(|i| x[i] + w.spacing * (idx[i] as f64 - half)).collect::<Vec<f64>>());
            for i in 0..d {
                idx[i] += 1;
                if idx[i] < n {
                    continue 'outer;
                }
                idx[i] = 0;
            }
            break;
        }
        let radius = w.phi_radius.unwrap_or(w.spacing * n as f64 / 2.0 * (d as f64).sqrt());
        let bump = BumpSpec { center: x.clone(), radius, height: 1.0 };
        let cell = w.spacing.powi(d as i32);
        let raw: Vec<f64> = starts.iter().map(|s| bump.eval(s)).collect();
        let mass = raw.iter().sum::<f64>() * cell;
        (starts, raw.iter().map(|p| p / mass).collect(), cell)
    }

    fn weak(&mut self) -> Result<()> {
        let coeffs = self.coefficients(false)?;
        let cfg = self.cfg;
        let m = &self.res.measure;
        let u0 = self.u0();
        let (starts, phi, cell) = self.weak_grid();
        let reals = self.res.weak.realizations;
        let mut vars = Vec::new();
        for (ie, &eps) in cfg.epsilons.iter().enumerate() {
            let mc = self.micro(eps);
            let vals = par_collect(reals, |r| {
                let mut rng = self.streams.stream(Level::Epsilon(ie), r as u64);
                let ends = simulate_characteristic_bundle(m, &mc, &starts, &mut rng)?;
                let u: Vec<f64> = ends.iter().map(|e| u0.eval(e)).collect();
                weak_average(&u, &phi, cell)
            })?;
            let label = eps_label(eps);
            let (mean, se) = mean_se(&vals);
            let var = bootstrap_ci(&vals, cfg.numerics.bootstrap, &mut self.bootstrap_rng(4 * ie as u64 + 3), sample_variance);
            self.out.metrics.push(MetricRow::with_ci(&label, "weak_mean", normal_ci(mean, se), reals));
            self.out.metrics.push(MetricRow::with_ci(&label, "weak_var", var, reals));
            vars.push(var.value);
            self.out.samples.push((label, vals));
        }
        self.lap("microscale");
        if let (Some(first), Some(last)) = (vars.first(), vars.last()) {
            self.out.metrics.push(MetricRow::point("ladder", "weak_var_ratio", last / first, cfg.epsilons.len()));
        }
        // deterministic limit ⟨ū, φ⟩ by Gauss–Hermite quadrature, bracketed by A ± 1.96 SE
        let span = cfg.t_end - cfg.t;
        let oracle = |a: &DMatrix<f64>| -> f64 {
            let dec = PsdDecomposition::new(a, 0.0);
            let root = dec.sqrt() * span.sqrt();
            starts
                .iter()
                .zip(&phi)
                .map(|(s, p)| p * cell * gaussian_expectation(s, &root, 16, |y| u0.eval(y)))
                .sum()
        };
        let se = &coeffs.std_errors.a;
        let values = [oracle(&coeffs.a), oracle(&(&coeffs.a - se * 1.96)), oracle(&(&coeffs.a + se * 1.96))];
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.out.metrics.push(MetricRow::with_ci("limit", "weak_mean", Estimate { value: values[0], ci_lo: lo, ci_hi: hi }, starts.len()));
        self.lap("quadrature");
        Ok(())
    }

    fn semilinear_mean(&mut self) -> Result<()> {
        let coeffs = self.coefficients(false)?;
        let cfg = self.cfg;
        let spec = self.spec();
        let u0 = self.u0();
        let limit_sample = |level: Level| {
            par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(level, i as u64);
                let path = sample_effective_bm(&coeffs, &cfg.x, cfg.t, cfg.t_end, cfg.numerics.ode_steps, &mut rng)?;
                Ok(solve_integral_equation(spec, &path, |y| u0.eval(y)))
            })
        };
        let limit = limit_sample(Level::Limit)?;
        let replica = limit_sample(Level::LimitReplica)?;
        self.lap("limit");
        let m = &self.res.measure;
        let grid = &self.res.u_grid;
        let mut eps_samples = Vec::new();
        for (ie, &eps) in cfg.epsilons.iter().enumerate() {
            let mc = self.micro(eps);
            let v = par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(Level::Epsilon(ie), i as u64);
                let flow = simulate_flow_map(m, &mc, spec, Regime::Mean, grid, &cfg.x, &mut rng, i as u64)?;
                flow.invert(u0.eval(flow.final_position()))
            })?;
            eps_samples.push((eps, v));
        }
        self.lap("microscale");
        self.compare_ladder(eps_samples, limit, replica)
    }

    fn semilinear_zero(&mut self) -> Result<()> {
        let coeffs = self.coefficients(true)?;
        let cfg = self.cfg;
        let spec = self.spec();
        let u0 = self.u0();
        let grid = &self.res.u_grid;
        let center = nearest_index(grid, 0.0);
        let n_steps = cfg.numerics.n_steps;
        let limit_sample = |level: Level| {
            par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(level, i as u64);
                let path = sample_effective_bm(&coeffs, &cfg.x, cfg.t, cfg.t_end, n_steps, &mut rng)?;
                let table = simulate_limit_flow(&coeffs, spec, grid, &path, n_steps, i as u64)?;
                let u = invert_limit_flow(&table, |y| u0.eval(y))?;
                Ok((u, table.final_values()[center] - grid[center], xi_fd_errors(&table)))
            })
        };
        let lim = limit_sample(Level::Limit)?;
        let replica: Vec<f64> = limit_sample(Level::LimitReplica)?.into_iter().map(|r| r.0).collect();
        let mut fd: Vec<f64> = lim.iter().flat_map(|r| r.2.iter().copied()).collect();
        fd.sort_by(f64::total_cmp);
        let lim_incr: Vec<f64> = lim.iter().map(|r| r.1).collect();
        let limit: Vec<f64> = lim.into_iter().map(|r| r.0).collect();
        self.lap("limit");

        let m = &self.res.measure;
        let mut eps_samples = Vec::new();
        for (ie, &eps) in cfg.epsilons.iter().enumerate() {
            let mc = self.micro(eps);
            let rows = par_collect(cfg.n_paths, |i| {
                let mut rng = self.streams.stream(Level::Epsilon(ie), i as u64);
                let flow = simulate_flow_map(m, &mc, spec, Regime::ZeroMean, grid, &cfg.x, &mut rng, i as u64)?;
                Ok((flow.invert(u0.eval(flow.final_position()))?, flow.final_values()[center] - grid[center]))
            })?;
            let (v, incr): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
            self.push_flow_var(&eps_label(eps), &incr, 4 * ie as u64 + 3);
            self.out.metrics.push(MetricRow::point(&eps_label(eps), "flow_runs_ok", cfg.n_paths as f64, cfg.n_paths));
            eps_samples.push((eps, v));
        }
        self.lap("microscale");
        self.push_flow_var("limit", &lim_incr, (1 << 20) + 3);
        self.out.metrics.push(MetricRow::point("limit", "flow_runs_ok", cfg.n_paths as f64, cfg.n_paths));
        if !fd.is_empty() {
            self.out.metrics.push(MetricRow::point("limit", "xi_fd_median_rel", fd[fd.len() / 2], fd.len()));
        }
        self.compare_ladder(eps_samples, limit, replica)
    }

    fn push_flow_var(&mut self, label: &str, incr: &[f64], slot: u64) {
        let e = bootstrap_ci(incr, self.cfg.numerics.bootstrap, &mut self.bootstrap_rng(slot), sample_variance);
        self.out.metrics.push(MetricRow::with_ci(label, "flow_var", e, incr.len()));
    }
}

fn nearest_index(grid: &[f64], u: f64) -> usize {
    (0..grid.len())
        .min_by(|&a, &b| (grid[a] - u).abs().total_cmp(&(grid[b] - u).abs()))
        .expect("non-empty grid")
}

/// Relative gap between `ξ` and the centered difference of adjacent columns.
pub fn xi_fd_errors(table: &FlowTable) -> Vec<f64> {
    let (u, v, xi) = (&table.u_grid, table.final_values(), table.final_xi());
    (1..u.len().saturating_sub(1))
        .map(|j| {
            let fd = (v[j + 1] - v[j - 1]) / (u[j + 1] - u[j - 1]);
            (xi[j] - fd).abs() / fd.abs()
        })
        .collect()
}

fn abs_estimate(c: Estimate) -> Estimate {
    let (lo, hi) = (c.ci_lo.abs(), c.ci_hi.abs());
    if c.ci_lo <= 0.0 && c.ci_hi >= 0.0 {
        Estimate { value: c.value.abs(), ci_lo: 0.0, ci_hi: lo.max(hi) }
    } else {
        Estimate { value: c.value.abs(), ci_lo: lo.min(hi), ci_hi: lo.max(hi) }
    }
}
