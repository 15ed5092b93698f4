//! Reaction terms `f(t, x, u, w) = Σ_m g_m(t, x, u) Φ_m(w)`.
//!
//! Each `g_m` comes from a small closed-form expression library with analytic
//! derivatives; each `Φ_m` is a polynomial functional of the field value at
//! the shift point. The separable form lets the limit coefficients factor
//! into analytic functions of `(t, x, u)` times scalar correlation integrals.

use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{LabError, Result};
use crate::field::{covariance_exact, FieldState, SpectralMeasure};

pub type Coords = SmallVec<[f64; 4]>;

/// Value and derivatives of a coefficient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub du: f64,
    pub duu: f64,
    pub dx: Coords,
    pub dxu: Coords,
}

impl Jet {
    fn constant(value: f64, dim: usize) -> Self {
        Self {
            value,
            du: 0.0,
            duu: 0.0,
            dx: smallvec![0.0; dim],
            dxu: smallvec![0.0; dim],
        }
    }

    fn add_assign(&mut self, o: &Jet) {
        self.value += o.value;
        self.du += o.du;
        self.duu += o.duu;
        for (a, b) in self.dx.iter_mut().zip(&o.dx) {
            *a += b;
        }
        for (a, b) in self.dxu.iter_mut().zip(&o.dxu) {
            *a += b;
        }
    }

    fn mul(&self, o: &Jet) -> Jet {
        let (f, g) = (self, o);
        Jet {
            value: f.value * g.value,
            du: f.du * g.value + f.value * g.du,
            duu: f.duu * g.value + 2.0 * f.du * g.du + f.value * g.duu,
            dx: f.dx.iter().zip(&g.dx).map(|(fx, gx)| fx * g.value + f.value * gx).collect(),
            dxu: (0..f.dx.len())
                .map(|p| f.dxu[p] * g.value + f.dx[p] * g.du + f.du * g.dx[p] + f.value * g.dxu[p])
                .collect(),
        }
    }
}

/// Expression library for the `g_m` factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "expr", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expr {
    Const {
        c: f64,
    },
    /// `amp · cos(wt·t + wx·x + wu·u + phase)`.
    Cos {
        amp: f64,
        #[serde(default)]
        wx: Vec<f64>,
        #[serde(default)]
        wu: f64,
        #[serde(default)]
        wt: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `amp · sin(wt·t + wx·x + wu·u + phase)`.
    Sin {
        amp: f64,
        #[serde(default)]
        wx: Vec<f64>,
        #[serde(default)]
        wu: f64,
        #[serde(default)]
        wt: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `amp · exp(−(|x − cx|² + (u − cu)²) / (2 width²))`; an empty `cx`
    /// drops the x-dependence.
    Gaussian {
        amp: f64,
        #[serde(default)]
        cx: Vec<f64>,
        #[serde(default)]
        cu: f64,
        width: f64,
    },
    /// Compactly supported bump in `u`: `amp · exp(1 − 1/(1 − z²))`, `z = (u − center)/radius`.
    BumpU {
        amp: f64,
        center: f64,
        radius: f64,
    },
    Sum {
        terms: Vec<Expr>,
    },
    Product {
        factors: Vec<Expr>,
    },
}

fn affine(t: f64, x: &[f64], u: f64, wx: &[f64], wu: f64, wt: f64, phase: f64) -> f64 {
    wt * t + wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wu * u + phase
}

fn bump(z: f64) -> (f64, f64, f64) {
    if z.abs() >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let q = 1.0 - z * z;
    let psi = (1.0 - 1.0 / q).exp();
    let d1 = psi * (-2.0 * z / (q * q));
    let d2 = psi * (4.0 * z * z / q.powi(4) - 2.0 / (q * q) - 8.0 * z * z / q.powi(3));
    (psi, d1, d2)
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const { c }
    }

    fn validate(&self, dim: usize, path: &str) -> Result<()> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(LabError::validation(path, format!("{what} must be finite")))
            }
        };
        match self {
            Expr::Const { c } => finite(*c, "c"),
            Expr::Cos { amp, wx, wu, wt, phase } | Expr::Sin { amp, wx, wu, wt, phase } => {
                if wx.len() > dim {
                    return Err(LabError::validation(path, format!("wx has more than {dim} entries")));
                }
                for v in wx.iter().chain([amp, wu, wt, phase]) {
                    finite(*v, "coefficients")?;
                }
                Ok(())
            }
            Expr::Gaussian { amp, cx, cu, width } => {
                if cx.len() > dim {
                    return Err(LabError::validation(path, format!("cx has more than {dim} entries")));
                }
                if !(*width > 0.0) {
                    return Err(LabError::validation(path, "width must be positive"));
                }
                for v in cx.iter().chain([amp, cu]) {
                    finite(*v, "coefficients")?;
                }
                Ok(())
            }
            Expr::BumpU { amp, center, radius } => {
                if !(*radius > 0.0) {
                    return Err(LabError::validation(path, "radius must be positive"));
                }
                finite(*amp, "amp")?;
                finite(*center, "center")
            }
            Expr::Sum { terms: items } | Expr::Product { factors: items } => {
                if items.is_empty() {
                    return Err(LabError::validation(path, "empty sum/product"));
                }
                for (i, e) in items.iter().enumerate() {
                    e.validate(dim, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
        }
    }

    /// `true` if the expression is the literal constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const { c } if *c == 0.0)
    }

    /// Value and `∂/∂u` only.
    pub fn value_du(&self, t: f64, x: &[f64], u: f64) -> (f64, f64) {
        match self {
            Expr::Const { c } => (*c, 0.0),
            Expr::Cos { amp, wx, wu, wt, phase } => {
                let (s, c) = affine(t, x, u, wx, *wu, *wt, *phase).sin_cos();
                (amp * c, -amp * wu * s)
            }
            Expr::Sin { amp, wx, wu, wt, phase } => {
                let (s, c) = affine(t, x, u, wx, *wu, *wt, *phase).sin_cos();
                (amp * s, amp * wu * c)
            }
            Expr::Gaussian { amp, cx, cu, width } => {
                let w2 = width * width;
                let r2 = cx.iter().zip(x).map(|(c, xi)| (xi - c).powi(2)).sum::<f64>() + (u - cu).powi(2);
                let v = amp * (-r2 / (2.0 * w2)).exp();
                (v, -v * (u - cu) / w2)
            }
            Expr::BumpU { amp, center, radius } => {
                let (p, d1, _) = bump((u - center) / radius);
                (amp * p, amp * d1 / radius)
            }
            Expr::Sum { terms } => terms.iter().fold((0.0, 0.0), |(v, d), e| {
                let (ev, ed) = e.value_du(t, x, u);
                (v + ev, d + ed)
            }),
            Expr::Product { factors } => factors.iter().fold((1.0, 0.0), |(v, d), e| {
                let (ev, ed) = e.value_du(t, x, u);
                (v * ev, d * ev + v * ed)
            }),
        }
    }

    /// Full jet: value, `∂_u`, `∂_uu`, `∇_x`, `∇_x ∂_u`.
    pub fn jet(&self, t: f64, x: &[f64], u: f64) -> Jet {
        let dim = x.len();
        match self {
            Expr::Const { c } => Jet::constant(*c, dim),
            Expr::Cos { amp, wx, wu, wt, phase } | Expr::Sin { amp, wx, wu, wt, phase } => {
                let mut arg = affine(t, x, u, wx, *wu, *wt, *phase);
                if matches!(self, Expr::Sin { .. }) {
                    arg -= std::f64::consts::FRAC_PI_2;
                }
                let (s, c) = arg.sin_cos();
                let w = |p: usize| wx.get(p).copied().unwrap_or(0.0);
                Jet {
                    value: amp * c,
                    du: -amp * wu * s,
                    duu: -amp * wu * wu * c,
                    dx: (0..dim).map(|p| -amp * w(p) * s).collect(),
                    dxu: (0..dim).map(|p| -amp * w(p) * wu * c).collect(),
                }
            }
            Expr::Gaussian { amp, cx, cu, width } => {
                let w2 = width * width;
                let off = |p: usize| if p < cx.len() { x[p] - cx[p] } else { 0.0 };
                let r2 = (0..cx.len()).map(|p| off(p).powi(2)).sum::<f64>() + (u - cu).powi(2);
                let v = amp * (-r2 / (2.0 * w2)).exp();
                let du_ = u - cu;
                Jet {
                    value: v,
                    du: -v * du_ / w2,
                    duu: v * (du_ * du_ / (w2 * w2) - 1.0 / w2),
                    dx: (0..dim).map(|p| -v * off(p) / w2).collect(),
                    dxu: (0..dim).map(|p| v * off(p) * du_ / (w2 * w2)).collect(),
                }
            }
            Expr::BumpU { amp, center, radius } => {
                let (p, d1, d2) = bump((u - center) / radius);
                Jet {
                    value: amp * p,
                    du: amp * d1 / radius,
                    duu: amp * d2 / (radius * radius),
                    dx: smallvec![0.0; dim],
                    dxu: smallvec![0.0; dim],
                }
            }
            Expr::Sum { terms } => {
                let mut acc = Jet::constant(0.0, dim);
                for e in terms {
                    acc.add_assign(&e.jet(t, x, u));
                }
                acc
            }
            Expr::Product { factors } => {
                let mut acc = Jet::constant(1.0, dim);
                for e in factors {
                    acc = acc.mul(&e.jet(t, x, u));
                }
                acc
            }
        }
    }
}

/// A bounded smooth scalar coefficient `g(t, x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothCoefficient {
    expr: Expr,
    dim: usize,
}

impl SmoothCoefficient {
    /// Validates parameters and samples the coefficient and its first
    /// partials on a coarse grid to confirm they are finite and bounded.
    pub fn new(expr: Expr, dim: usize) -> Result<Self> {
        expr.validate(dim, "g")?;
        let g = Self { expr, dim };
        let pts: [f64; 9] = [-50.0, -7.3, -1.0, -0.2, 0.0, 0.4, 1.3, 9.1, 50.0];
        let mut x = vec![0.0; dim];
        for (i, &a) in pts.iter().enumerate() {
            for &u in &pts {
                for (p, xp) in x.iter_mut().enumerate() {
                    *xp = pts[(i + 3 * p) % pts.len()];
                }
                let j = g.jet(a.abs() * 0.1, &x, u);
                let bad = !j.value.is_finite()
                    || !j.du.is_finite()
                    || j.dx.iter().any(|v| !v.is_finite())
                    || j.value.abs() > 1e8;
                if bad {
                    return Err(LabError::validation("g", "coefficient is not bounded on the sample grid"));
                }
            }
        }
        Ok(g)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn value_du(&self, t: f64, x: &[f64], u: f64) -> (f64, f64) {
        self.expr.value_du(t, x, u)
    }

    pub fn jet(&self, t: f64, x: &[f64], u: f64) -> Jet {
        self.expr.jet(t, x, u)
    }
}

/// Polynomial functional of the field value at the shift point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChaosFunctional {
    /// `Φ = 1`.
    Constant,
    /// `Φ = V_p` (0-based axis).
    FieldComponent { p: usize },
    /// `Φ = V_p V_q − R_pq(0, 0)`.
    CenteredQuadratic { p: usize, q: usize },
}

impl ChaosFunctional {
    fn validate(&self, dim: usize, path: &str) -> Result<()> {
        let check = |i: usize| {
            if i < dim {
                Ok(())
            } else {
                Err(LabError::validation(path, format!("axis index {i} out of range for d = {dim}")))
            }
        };
        match *self {
            ChaosFunctional::Constant => Ok(()),
            ChaosFunctional::FieldComponent { p } => check(p),
            ChaosFunctional::CenteredQuadratic { p, q } => check(p).and(check(q)),
        }
    }
}

/// Serialized form of one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub g: Expr,
    pub phi: ChaosFunctional,
}

#[derive(Debug, Clone)]
pub struct Term {
    pub g: SmoothCoefficient,
    pub phi: ChaosFunctional,
    /// `R_pq(0,0)` for centered quadratics, zero otherwise.
    offset: f64,
}

/// `f = Σ_m g_m Φ_m`.
#[derive(Debug, Clone)]
pub struct NonlinearitySpec {
    terms: Vec<Term>,
    dim: usize,
}

impl NonlinearitySpec {
    pub fn new(terms: &[TermSpec], measure: &SpectralMeasure) -> Result<Self> {
        let dim = measure.dim();
        let r0 = covariance_exact(measure, 0.0, &vec![0.0; dim]);
        let mut out = Vec::with_capacity(terms.len());
        for (m, t) in terms.iter().enumerate() {
            let path = format!("f[{m}]");
            t.phi.validate(dim, &format!("{path}.phi"))?;
            t.g.validate(dim, &format!("{path}.g"))?;
            let offset = match t.phi {
                ChaosFunctional::CenteredQuadratic { p, q } => r0[(p, q)],
                _ => 0.0,
            };
            out.push(Term {
                g: SmoothCoefficient::new(t.g.clone(), dim)?,
                phi: t.phi,
                offset,
            });
        }
        Ok(Self { terms: out, dim })
    }

    /// `f ≡ 0`.
    pub fn zero(dim: usize) -> Self {
        Self { terms: Vec::new(), dim }
    }

    /// `{(0.5 cos u, 1), (0.3 cos x_1, V_2)}`: non-centered.
    pub fn demo_mean(measure: &SpectralMeasure) -> Result<Self> {
        Self::new(&demo_mean_terms(), measure)
    }

    /// `{(0.4, V_2)}`.
    pub fn demo_zero(measure: &SpectralMeasure) -> Result<Self> {
        Self::new(&demo_zero_terms(), measure)
    }

    /// `{(0.3 + 0.2 sin u, V_2)}`.
    pub fn demo_zero_u(measure: &SpectralMeasure) -> Result<Self> {
        Self::new(&demo_zero_u_terms(), measure)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_specs(&self) -> Vec<TermSpec> {
        self.terms
            .iter()
            .map(|t| TermSpec {
                g: t.g.expr().clone(),
                phi: t.phi,
            })
            .collect()
    }

    /// True when the mean `f̄` vanishes identically, i.e. no term pairs a
    /// non-zero `g` with `Φ = 1`.
    pub fn centered(&self) -> bool {
        !self
            .terms
            .iter()
            .any(|t| t.phi == ChaosFunctional::Constant && !t.g.expr().is_zero())
    }

    /// `Φ_m` evaluated on the field value `v` at the shift point.
    #[inline]
    pub fn phi_value(&self, m: usize, v: &[f64]) -> f64 {
        let t = &self.terms[m];
        match t.phi {
            ChaosFunctional::Constant => 1.0,
            ChaosFunctional::FieldComponent { p } => v[p],
            ChaosFunctional::CenteredQuadratic { p, q } => v[p] * v[q] - t.offset,
        }
    }

    /// `Φ_m − E_π Φ_m`, the observable entering the correlation integrals.
    #[inline]
    pub fn centered_phi_value(&self, m: usize, v: &[f64]) -> f64 {
        match self.terms[m].phi {
            ChaosFunctional::Constant => 0.0,
            _ => self.phi_value(m, v),
        }
    }

    /// `(f, ∂f/∂u)` given the field value at the shift point.
    #[inline]
    pub fn f_du_with_velocity(&self, t: f64, x: &[f64], u: f64, v: &[f64]) -> (f64, f64) {
        let mut f = 0.0;
        let mut fu = 0.0;
        for (m, term) in self.terms.iter().enumerate() {
            let phi = self.phi_value(m, v);
            let (g, gu) = term.g.value_du(t, x, u);
            f += g * phi;
            fu += gu * phi;
        }
        (f, fu)
    }

    /// `f(t, x, u, τ_shift V)`.
    pub fn evaluate_f(
        &self,
        t: f64,
        x: &[f64],
        u: f64,
        state: &FieldState,
        measure: &SpectralMeasure,
        shift: &[f64],
    ) -> f64 {
        let v = state.evaluate(measure, shift);
        self.f_du_with_velocity(t, x, u, &v).0
    }

    /// `f̄(t, x, u)`: the sum of the `g_m` paired with `Φ = 1`.
    pub fn mean_f(&self, t: f64, x: &[f64], u: f64) -> f64 {
        self.terms
            .iter()
            .filter(|term| term.phi == ChaosFunctional::Constant)
            .map(|term| term.g.value_du(t, x, u).0)
            .sum()
    }

    /// `(∇_x f, ∂_u f)` at the given field state and shift.
    pub fn partials_f(
        &self,
        t: f64,
        x: &[f64],
        u: f64,
        state: &FieldState,
        measure: &SpectralMeasure,
        shift: &[f64],
    ) -> (Vec<f64>, f64) {
        let v = state.evaluate(measure, shift);
        let mut dx = vec![0.0; self.dim];
        let mut du = 0.0;
        for (m, term) in self.terms.iter().enumerate() {
            let phi = self.phi_value(m, &v);
            let j = term.g.jet(t, x, u);
            du += j.du * phi;
            for (a, b) in dx.iter_mut().zip(&j.dx) {
                *a += b * phi;
            }
        }
        (dx, du)
    }
}

pub fn demo_mean_terms() -> Vec<TermSpec> {
    vec![
        TermSpec {
            g: Expr::Cos { amp: 0.5, wx: vec![], wu: 1.0, wt: 0.0, phase: 0.0 },
            phi: ChaosFunctional::Constant,
        },
        TermSpec {
            g: Expr::Cos { amp: 0.3, wx: vec![1.0, 0.0], wu: 0.0, wt: 0.0, phase: 0.0 },
            phi: ChaosFunctional::FieldComponent { p: 1 },
        },
    ]
}

pub fn demo_zero_terms() -> Vec<TermSpec> {
    vec![TermSpec {
        g: Expr::constant(0.4),
        phi: ChaosFunctional::FieldComponent { p: 1 },
    }]
}

pub fn demo_zero_u_terms() -> Vec<TermSpec> {
    vec![TermSpec {
        g: Expr::Sum {
            terms: vec![
                Expr::constant(0.3),
                Expr::Sin { amp: 0.2, wx: vec![], wu: 1.0, wt: 0.0, phase: 0.0 },
            ],
        },
        phi: ChaosFunctional::FieldComponent { p: 1 },
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MeasureSpec;
    use crate::rng::{Level, StreamFactory};

    fn shell() -> SpectralMeasure {
        serde_json::from_str::<MeasureSpec>(
            r#"{"preset": "isotropic-shell", "num_modes": 8, "K0": 1.0, "energy": 1.0, "alpha": 1.0, "seed": 5}"#,
        )
        .unwrap()
        .build()
        .unwrap()
    }

    fn library() -> Vec<Expr> {
        vec![
            Expr::Cos { amp: 0.7, wx: vec![0.3, -1.1], wu: 0.8, wt: 0.2, phase: 0.4 },
            Expr::Sin { amp: -0.4, wx: vec![1.2], wu: 1.5, wt: 0.0, phase: -0.3 },
            Expr::Gaussian { amp: 1.3, cx: vec![0.2, -0.5], cu: 0.1, width: 0.9 },
            Expr::BumpU { amp: 0.6, center: 0.2, radius: 1.4 },
            Expr::Product {
                factors: vec![
                    Expr::Cos { amp: 1.0, wx: vec![0.5, 0.5], wu: 0.3, wt: 0.0, phase: 0.0 },
                    Expr::Gaussian { amp: 1.0, cx: vec![], cu: 0.5, width: 1.2 },
                    Expr::Sum {
                        terms: vec![Expr::constant(0.3), Expr::Sin { amp: 0.2, wx: vec![], wu: 1.0, wt: 0.0, phase: 0.0 }],
                    },
                ],
            },
        ]
    }

    #[test]
    fn jets_match_finite_differences() {
        let h = 1e-5;
        let (t, x, u) = (0.3, [0.4, -0.7], 0.25);
        for e in library() {
            let j = e.jet(t, &x, u);
            let (v, du) = e.value_du(t, &x, u);
            assert!((v - j.value).abs() < 1e-14 && (du - j.du).abs() < 1e-12);
            let fd_u = (e.jet(t, &x, u + h).value - e.jet(t, &x, u - h).value) / (2.0 * h);
            let fd_uu = (e.jet(t, &x, u + h).du - e.jet(t, &x, u - h).du) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
            assert!(rel(fd_u, j.du) < 1e-6, "{e:?}: du {fd_u} vs {}", j.du);
            assert!(rel(fd_uu, j.duu) < 1e-6, "{e:?}: duu {fd_uu} vs {}", j.duu);
            for p in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[p] += h;
                xm[p] -= h;
                let fd_x = (e.jet(t, &xp, u).value - e.jet(t, &xm, u).value) / (2.0 * h);
                let fd_xu = (e.jet(t, &xp, u).du - e.jet(t, &xm, u).du) / (2.0 * h);
                assert!(rel(fd_x, j.dx[p]) < 1e-6, "{e:?}: dx {fd_x} vs {}", j.dx[p]);
                assert!(rel(fd_xu, j.dxu[p]) < 1e-6, "{e:?}: dxu {fd_xu} vs {}", j.dxu[p]);
            }
        }
    }

    #[test]
    fn bump_is_compactly_supported() {
        let e = Expr::BumpU { amp: 1.0, center: 0.0, radius: 1.0 };
        assert_eq!(e.value_du(0.0, &[0.0, 0.0], 1.5), (0.0, 0.0));
        assert!((e.value_du(0.0, &[0.0, 0.0], 0.0).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn construction_errors() {
        let m = shell();
        let bad_axis = [TermSpec { g: Expr::constant(1.0), phi: ChaosFunctional::FieldComponent { p: 2 } }];
        assert!(NonlinearitySpec::new(&bad_axis, &m).is_err());
        let bad_q = [TermSpec { g: Expr::constant(1.0), phi: ChaosFunctional::CenteredQuadratic { p: 0, q: 5 } }];
        assert!(NonlinearitySpec::new(&bad_q, &m).is_err());
        let bad_width = [TermSpec {
            g: Expr::Gaussian { amp: 1.0, cx: vec![], cu: 0.0, width: 0.0 },
            phi: ChaosFunctional::Constant,
        }];
        assert!(NonlinearitySpec::new(&bad_width, &m).is_err());
        let bad_amp = [TermSpec { g: Expr::constant(f64::NAN), phi: ChaosFunctional::Constant }];
        assert!(NonlinearitySpec::new(&bad_amp, &m).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let shear = SpectralMeasure::shear(1.0, 1.0, 1.0).unwrap();
        let state = FieldState::from_amplitudes(&shear, &[vec![0.0, 0.8]], &[vec![0.0, 0.1]]).unwrap();
        let c = NonlinearitySpec::new(&[TermSpec { g: Expr::constant(2.5), phi: ChaosFunctional::Constant }], &shear).unwrap();
        assert_eq!(c.evaluate_f(0.0, &[1.0, 2.0], 3.0, &state, &shear, &[0.3, 0.1]), 2.5);
        assert!(!c.centered());
        assert_eq!(c.mean_f(0.2, &[0.0, 0.0], 1.0), 2.5);
        let one = NonlinearitySpec::new(&[TermSpec { g: Expr::constant(1.0), phi: ChaosFunctional::FieldComponent { p: 1 } }], &shear).unwrap();
        assert_eq!(one.evaluate_f(0.0, &[0.0, 0.0], 0.0, &state, &shear, &[0.0, 0.0]), 0.8);
        assert!(one.centered());
        assert_eq!(one.mean_f(0.0, &[0.0, 0.0], 0.0), 0.0);
        // g(u) = u via a product would be unbounded; use sin(u) ≈ u near 0 for ∂_u
        let lin = NonlinearitySpec::new(
            &[TermSpec { g: Expr::Sin { amp: 1.0, wx: vec![], wu: 1.0, wt: 0.0, phase: 0.0 }, phi: ChaosFunctional::FieldComponent { p: 1 } }],
            &shear,
        )
        .unwrap();
        let (_, du) = lin.partials_f(0.0, &[0.0, 0.0], 0.0, &state, &shear, &[0.0, 0.0]);
        assert!((du - 0.8).abs() < 1e-15);
        let (dx, du) = one.partials_f(0.0, &[0.0, 0.0], 0.0, &state, &shear, &[0.0, 0.0]);
        assert_eq!((dx, du), (vec![0.0, 0.0], 0.0));
        assert!(NonlinearitySpec::demo_mean(&shear).unwrap().centered() == false);
        assert!(NonlinearitySpec::demo_zero(&shear).unwrap().centered());
        assert!(NonlinearitySpec::demo_zero_u(&shear).unwrap().centered());
        let zero_const = NonlinearitySpec::new(&[TermSpec { g: Expr::constant(0.0), phi: ChaosFunctional::Constant }], &shear).unwrap();
        assert!(zero_const.centered());
    }

    #[test]
    fn partials_match_finite_differences() {
        let m = shell();
        let spec = NonlinearitySpec::new(
            &[
                TermSpec { g: library()[0].clone(), phi: ChaosFunctional::FieldComponent { p: 0 } },
                TermSpec { g: library()[2].clone(), phi: ChaosFunctional::CenteredQuadratic { p: 0, q: 1 } },
                TermSpec { g: library()[4].clone(), phi: ChaosFunctional::Constant },
            ],
            &m,
        )
        .unwrap();
        let mut rng = StreamFactory::new(1, 0).stream(Level::Custom(0), 0);
        let state = FieldState::sample_stationary(&m, &mut rng);
        let (t, x, u, shift) = (0.1, [0.3, 0.2], -0.4, [1.7, -2.2]);
        let h = 1e-5;
        let (dx, du) = spec.partials_f(t, &x, u, &state, &m, &shift);
        let f = |x: &[f64], u: f64| spec.evaluate_f(t, x, u, &state, &m, &shift);
        let fd_u = (f(&x, u + h) - f(&x, u - h)) / (2.0 * h);
        assert!((fd_u - du).abs() / du.abs().max(1e-3) < 1e-6);
        for p in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[p] += h;
            xm[p] -= h;
            let fd = (f(&xp, u) - f(&xm, u)) / (2.0 * h);
            assert!((fd - dx[p]).abs() / dx[p].abs().max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn centered_specs_have_zero_mean_and_mean_f_matches_sampling() {
        let m = shell();
        let centered = NonlinearitySpec::new(
            &[
                TermSpec { g: Expr::constant(0.7), phi: ChaosFunctional::FieldComponent { p: 0 } },
                TermSpec { g: Expr::constant(1.1), phi: ChaosFunctional::CenteredQuadratic { p: 1, q: 1 } },
                TermSpec { g: Expr::constant(-0.6), phi: ChaosFunctional::CenteredQuadratic { p: 0, q: 1 } },
            ],
            &m,
        )
        .unwrap();
        let mixed = NonlinearitySpec::demo_mean(&m).unwrap();
        let n = 10_000;
        let f = StreamFactory::new(9, 0);
        let (t, x, u) = (0.0, [0.3, -0.2], 0.6);
        for (spec, shift) in [(&centered, [0.0, 0.0]), (&centered, [3.1, -7.4]), (&mixed, [0.5, 0.5])] {
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    let mut rng = f.stream(Level::Custom(2), i);
                    let s = FieldState::sample_stationary(&m, &mut rng);
                    spec.evaluate_f(t, &x, u, &s, &m, &shift)
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let expect = spec.mean_f(t, &x, u);
            assert!((mean - expect).abs() < 4.0 * se, "mean {mean} vs {expect} (se {se})");
        }
    }

    #[test]
    fn term_spec_json() {
        let json = r#"[{"g": {"expr": "sum", "terms": [{"expr": "const", "c": 0.3}, {"expr": "sin", "amp": 0.2, "wu": 1.0}]},
                        "phi": {"kind": "field_component", "p": 1}}]"#;
        let terms: Vec<TermSpec> = serde_json::from_str(json).unwrap();
        assert_eq!(terms, demo_zero_u_terms());
        assert!(serde_json::from_str::<Vec<TermSpec>>(r#"[{"g": {"expr": "poly", "c": 1}, "phi": {"kind": "constant"}}]"#).is_err());
    }
}
