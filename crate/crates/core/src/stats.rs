//! Sample comparison and convergence diagnostics.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{LabError, Result};

/// Number of bootstrap resamples for confidence intervals.
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
    pub label: String,
    pub seed: u64,
}

impl SampleSet {
    pub fn new(values: Vec<f64>, label: impl Into<String>, seed: u64) -> Result<Self> {
        let label = label.into();
        if values.is_empty() {
            return Err(LabError::validation("samples", format!("sample set '{label}' is empty")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::numeric(format!("sample set '{label}' has a non-finite value at index {i}")));
        }
        Ok(Self { values, label, seed })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean_se(&self.values).0
    }

    fn sorted(&self) -> Vec<f64> {
        sorted(&self.values)
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(v: &[f64]) -> f64 {
    let (_, se) = mean_se(v);
    se * se * v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `Q_KS(λ) = 2 Σ_{j≥1} (−1)^{j−1} e^{−2 j² λ²}` truncated after 100 terms.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let jf = j as f64;
        sum += sign * (-2.0 * jf * jf * lambda * lambda).exp();
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Two-sample Kolmogorov–Smirnov statistic with the asymptotic p-value.
pub fn ks_two_sample(a: &SampleSet, b: &SampleSet) -> Result<KsResult> {
    if a.len() < 50 || b.len() < 50 {
        return Err(LabError::validation("n_paths", "the KS comparison needs at least 50 samples per set"));
    }
    let d = ks_statistic_sorted(&a.sorted(), &b.sorted());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let en = (na * nb / (na + nb)).sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((en + 0.12 + 0.11 / en) * d),
    })
}

/// Wasserstein-1 distance between the empirical laws, computed exactly as
/// `∫₀¹ |F_a⁻¹(q) − F_b⁻¹(q)| dq`.
pub fn wasserstein1(a: &SampleSet, b: &SampleSet) -> f64 {
    let (sa, sb) = (a.sorted(), b.sorted());
    if sa.len() == sb.len() {
        return sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64;
    }
    // merge the quantile breakpoints i/na and j/nb (integer arithmetic)
    let (na, nb) = (sa.len() as u128, sb.len() as u128);
    let total = na * nb;
    let (mut i, mut j) = (0u128, 0u128);
    let mut q_prev = 0u128;
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) * nb;
        let next_b = (j + 1) * na;
        let q = next_a.min(next_b);
        acc += (q - q_prev) as f64 * (sa[i as usize] - sb[j as usize]).abs();
        q_prev = q;
        if next_a == q {
            i += 1;
        }
        if next_b == q {
            j += 1;
        }
    }
    acc / total as f64
}

/// Pearson correlation; 0 when either sample is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// A point estimate with a percentile confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Estimate {
    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_lo <= other.ci_hi && other.ci_lo <= self.ci_hi
    }
}

fn percentile_ci(mut reps: Vec<f64>, level: f64) -> (f64, f64) {
    reps.sort_by(f64::total_cmp);
    let n = reps.len();
    let lo = ((1.0 - level) / 2.0 * n as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * n as f64).ceil() as usize).min(n) - 1;
    (reps[lo], reps[hi])
}

/// Pearson correlation of paired samples with a 95% percentile bootstrap CI.
pub fn correlation_ci<R: Rng + ?Sized>(x: &SampleSet, y: &SampleSet, rng: &mut R) -> Result<Estimate> {
    if x.len() != y.len() {
        return Err(LabError::validation("samples", "paired samples must have equal sizes"));
    }
    if x.len() < 100 {
        return Err(LabError::validation("n_paths", "correlation needs at least 100 pairs"));
    }
    let n = x.len();
    let value = pearson(x.values(), y.values());
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    let reps: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            for k in 0..n {
                let i = rng.random_range(0..n);
                bx[k] = x.values[i];
                by[k] = y.values[i];
            }
            pearson(&bx, &by)
        })
        .collect();
    let (ci_lo, ci_hi) = percentile_ci(reps, 0.95);
    Ok(Estimate { value, ci_lo, ci_hi })
}

/// KS statistic with a 95% bootstrap CI (both sets resampled independently).
pub fn ks_with_ci<R: Rng + ?Sized>(a: &SampleSet, b: &SampleSet, n_boot: usize, rng: &mut R) -> Result<Estimate> {
    let value = ks_two_sample(a, b)?.statistic;
    let mut ra = vec![0.0; a.len()];
    let mut rb = vec![0.0; b.len()];
    let reps: Vec<f64> = (0..n_boot.max(1))
        .map(|_| {
            resample_sorted(a.values(), &mut ra, rng);
            resample_sorted(b.values(), &mut rb, rng);
            ks_statistic_sorted(&ra, &rb)
        })
        .collect();
    let (ci_lo, ci_hi) = percentile_ci(reps, 0.95);
    Ok(Estimate { value, ci_lo, ci_hi })
}

/// W1 with a 95% bootstrap CI.
pub fn w1_with_ci<R: Rng + ?Sized>(a: &SampleSet, b: &SampleSet, n_boot: usize, rng: &mut R) -> Result<Estimate> {
    let value = wasserstein1(a, b);
    let mut ra = vec![0.0; a.len()];
    let mut rb = vec![0.0; b.len()];
    let reps: Vec<f64> = (0..n_boot.max(1))
        .map(|_| {
            resample_sorted(a.values(), &mut ra, rng);
            resample_sorted(b.values(), &mut rb, rng);
            let sa = SampleSet { values: ra.clone(), label: String::new(), seed: 0 };
            let sb = SampleSet { values: rb.clone(), label: String::new(), seed: 0 };
            wasserstein1(&sa, &sb)
        })
        .collect();
    let (ci_lo, ci_hi) = percentile_ci(reps, 0.95);
    Ok(Estimate { value, ci_lo, ci_hi })
}

/// Any scalar statistic with a 95% percentile bootstrap CI.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    values: &[f64],
    n_boot: usize,
    rng: &mut R,
    stat: impl Fn(&[f64]) -> f64,
) -> Estimate {
    let value = stat(values);
    let mut buf = vec![0.0; values.len()];
    let reps: Vec<f64> = (0..n_boot.max(1))
        .map(|_| {
            for x in buf.iter_mut() {
                *x = values[rng.random_range(0..values.len())];
            }
            stat(&buf)
        })
        .collect();
    let (ci_lo, ci_hi) = percentile_ci(reps, 0.95);
    Estimate { value, ci_lo, ci_hi }
}

fn resample_sorted<R: Rng + ?Sized>(src: &[f64], dst: &mut [f64], rng: &mut R) {
    for x in dst.iter_mut() {
        *x = src[rng.random_range(0..src.len())];
    }
    dst.sort_by(f64::total_cmp);
}

/// A metric tracked along a decreasing ε ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceLadder {
    pub epsilons: Vec<f64>,
    pub metrics: Vec<Estimate>,
}

impl ConvergenceLadder {
    pub fn new(epsilons: Vec<f64>, metrics: Vec<Estimate>) -> Result<Self> {
        if epsilons.len() != metrics.len() {
            return Err(LabError::validation("epsilons", "one metric per epsilon"));
        }
        if epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(LabError::validation("epsilons", "must be strictly decreasing"));
        }
        Ok(Self { epsilons, metrics })
    }

    /// Non-increasing along the ladder up to noise: an increase whose CI
    /// overlaps the predecessor's is tolerated once; any other increase fails.
    pub fn monotone_trend(&self) -> bool {
        let mut soft = 0;
        for w in self.metrics.windows(2) {
            if w[1].value > w[0].value {
                if w[1].overlaps(&w[0]) {
                    soft += 1;
                } else {
                    return false;
                }
            }
        }
        soft <= 1
    }

    pub fn last(&self) -> &Estimate {
        self.metrics.last().expect("ladder is non-empty")
    }
}

/// `Σ_i u(x_i) φ(x_i) ΔA`: the quadrature of `⟨u, φ⟩` over a start grid.
pub fn weak_average(u_values: &[f64], phi_values: &[f64], cell_area: f64) -> Result<f64> {
    if u_values.len() != phi_values.len() {
        return Err(LabError::validation("samples", "one weight per grid start"));
    }
    if u_values.len() < 20 {
        warn!("weak average over only {} starts; quadrature bias may dominate", u_values.len());
    }
    Ok(u_values.iter().zip(phi_values).map(|(u, p)| u * p).sum::<f64>() * cell_area)
}

/// Nodes and weights with `Σ w_i f(z_i) ≈ E[f(Z)]`, `Z ~ N(0, 1)`, from the
/// Golub–Welsch eigenproblem of the probabilists' Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[f(x + L Z)]` for `Z ~ N(0, I_d)` with `L Lᵀ = cov`, by tensor-product
/// Gauss–Hermite quadrature with `n` nodes per axis.
pub fn gaussian_expectation(x: &[f64], cov_sqrt: &DMatrix<f64>, n: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let d = x.len();
    let (nodes, weights) = gauss_hermite(n);
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (i, p) in point.iter_mut().enumerate() {
            *p = x[i];
            for (j, &k) in idx.iter().enumerate() {
                *p += cov_sqrt[(i, j)] * nodes[k];
            }
        }
        for &k in &idx {
            w *= weights[k];
        }
        total += w * f(&point);
        let mut axis = 0;
        loop {
            if axis == d {
                return total;
            }
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}
