//! Declarative experiment description and its validation.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{MeasureSpec, SpectralMeasure};
use crate::microscale::{default_u_grid, MicroConfig};
use crate::nonlinearity::{NonlinearitySpec, TermSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FieldCheck,
    Diffusivity,
    Linear,
    TwoPoint,
    WeakAverage,
    SemilinearMean,
    SemilinearZero,
    Coefficients,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FieldCheck => "field-check",
            ExperimentKind::Diffusivity => "diffusivity",
            ExperimentKind::Linear => "linear",
            ExperimentKind::TwoPoint => "two-point",
            ExperimentKind::WeakAverage => "weak-average",
            ExperimentKind::SemilinearMean => "semilinear-mean",
            ExperimentKind::SemilinearZero => "semilinear-zero",
            ExperimentKind::Coefficients => "coefficients",
        }
    }

    fn uses_epsilons(self) -> bool {
        !matches!(self, ExperimentKind::FieldCheck | ExperimentKind::Coefficients)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonlinearityPreset {
    DemoMean,
    DemoZero,
    DemoZeroU,
    Zero,
}

/// `f` block: a named demo or an explicit list of terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NonlinearityBlock {
    Preset(NonlinearityPreset),
    Terms(Vec<TermSpec>),
}

impl NonlinearityBlock {
    pub fn build(&self, measure: &SpectralMeasure) -> Result<NonlinearitySpec> {
        match self {
            NonlinearityBlock::Preset(NonlinearityPreset::DemoMean) => NonlinearitySpec::demo_mean(measure),
            NonlinearityBlock::Preset(NonlinearityPreset::DemoZero) => NonlinearitySpec::demo_zero(measure),
            NonlinearityBlock::Preset(NonlinearityPreset::DemoZeroU) => NonlinearitySpec::demo_zero_u(measure),
            NonlinearityBlock::Preset(NonlinearityPreset::Zero) => Ok(NonlinearitySpec::zero(measure.dim())),
            NonlinearityBlock::Terms(t) => NonlinearitySpec::new(t, measure),
        }
    }
}

/// Smooth compactly supported bump `h·exp(1 − 1/(1 − r²/R²))` for `r < R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "one")]
    pub height: f64,
}

fn one() -> f64 {
    1.0
}

impl BumpSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        let z = r2 / (self.radius * self.radius);
        if z >= 1.0 {
            0.0
        } else {
            self.height * (1.0 - 1.0 / (1.0 - z)).exp()
        }
    }

    fn validate(&self, path: &str, dim: usize) -> Result<()> {
        if self.center.len() != dim {
            return Err(LabError::validation(format!("{path}.center"), format!("must have {dim} components")));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(LabError::validation(format!("{path}.radius"), "must be positive"));
        }
        if !self.height.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return Err(LabError::validation(path, "must be finite"));
        }
        Ok(())
    }
}

/// Numerical parameters; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Fast-time step of the microscale integrator (default: largest admissible).
    pub dtau: Option<f64>,
    /// Euler steps of the limit SDE.
    pub n_steps: usize,
    /// RK4 steps of the integral equation.
    pub ode_steps: usize,
    #[serde(rename = "T_GK")]
    pub t_gk: Option<f64>,
    pub gk_paths: usize,
    pub gk_dtau: Option<f64>,
    pub u_grid: Option<Vec<f64>>,
    pub bootstrap: usize,
    /// Field draws for the covariance check.
    pub field_samples: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            dtau: None,
            n_steps: 2048,
            ode_steps: 512,
            t_gk: None,
            gk_paths: 2000,
            gk_dtau: None,
            u_grid: None,
            bootstrap: 1000,
            field_samples: 10_000,
        }
    }
}

/// Start grid and weight of the weak-average experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakSpec {
    #[serde(default = "five")]
    pub grid_n: usize,
    #[serde(default = "quarter")]
    pub spacing: f64,
    #[serde(default = "two_hundred")]
    pub realizations: usize,
    /// Weight, normalized on the grid to unit mass; centered at `x` when absent.
    #[serde(default)]
    pub phi_radius: Option<f64>,
}

fn five() -> usize {
    5
}
fn quarter() -> f64 {
    0.25
}
fn two_hundred() -> usize {
    200
}

impl Default for WeakSpec {
    fn default() -> Self {
        Self {
            grid_n: 5,
            spacing: 0.25,
            realizations: 200,
            phi_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Keys the random streams together with the seed.
    #[serde(default)]
    pub experiment_id: u64,
    pub measure: MeasureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<NonlinearityBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<BumpSpec>,
    #[serde(default)]
    pub t: f64,
    #[serde(rename = "T", default = "one")]
    pub t_end: f64,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients_file: Option<String>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<WeakSpec>,
}

/// Validated configuration with every default resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub measure: SpectralMeasure,
    pub spec: Option<NonlinearitySpec>,
    pub dtau: f64,
    pub t_gk: f64,
    pub gk_dtau: f64,
    pub u_grid: Vec<f64>,
    pub weak: WeakSpec,
}

impl ExperimentConfig {
    /// Parses JSON; schema errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            LabError::validation(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<Resolved> {
        let measure = self.measure.build().map_err(|e| match e {
            LabError::Validation { path, message } => LabError::validation(format!("measure.{path}"), message),
            other => other,
        })?;
        let dim = measure.dim();
        let kind = self.experiment;
        if self.x.len() != dim {
            return Err(LabError::validation("x", format!("must have {dim} components")));
        }
        if !(self.t_end > self.t) {
            return Err(LabError::validation("T", "terminal time must exceed t"));
        }
        if self.n_paths < 100 {
            return Err(LabError::validation("n_paths", "must be at least 100"));
        }
        if kind.uses_epsilons() {
            if self.epsilons.is_empty() {
                return Err(LabError::validation("epsilons", "at least one epsilon is required"));
            }
            for (i, e) in self.epsilons.iter().enumerate() {
                if !(*e > 0.0 && *e <= 1.0) {
                    return Err(LabError::validation(format!("epsilons[{i}]"), "must lie in (0, 1]"));
                }
            }
            if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(LabError::validation("epsilons", "must be strictly decreasing"));
            }
        }

        let spec = match (&self.f, kind) {
            (Some(_), ExperimentKind::Linear | ExperimentKind::TwoPoint | ExperimentKind::WeakAverage | ExperimentKind::Diffusivity | ExperimentKind::FieldCheck) => {
                return Err(LabError::validation("f", format!("the {} experiment takes no nonlinearity", kind.name())));
            }
            (None, ExperimentKind::SemilinearMean | ExperimentKind::SemilinearZero) => {
                return Err(LabError::validation("f", format!("the {} experiment needs a nonlinearity", kind.name())));
            }
            (Some(b), _) => Some(b.build(&measure).map_err(|e| match e {
                LabError::Validation { path, message } => LabError::validation(format!("f.{path}"), message),
                other => other,
            })?),
            (None, _) => None,
        };
        if let Some(s) = &spec {
            match kind {
                ExperimentKind::SemilinearMean if s.centered() => {
                    return Err(LabError::validation("f", "the mean regime needs a non-zero mean part (a constant-phi term)"));
                }
                ExperimentKind::SemilinearZero if !s.centered() => {
                    return Err(LabError::validation("f", "the zero-mean regime needs a centered nonlinearity"));
                }
                _ => {}
            }
        }

        let needs_u0 = matches!(
            kind,
            ExperimentKind::Linear | ExperimentKind::TwoPoint | ExperimentKind::WeakAverage | ExperimentKind::SemilinearMean | ExperimentKind::SemilinearZero
        );
        match (&self.u0, needs_u0) {
            (Some(b), _) => b.validate("u0", dim)?,
            (None, true) => return Err(LabError::validation("u0", "terminal condition required")),
            _ => {}
        }

        if kind == ExperimentKind::TwoPoint {
            let x2 = self.x2.as_ref().ok_or_else(|| LabError::validation("x2", "second point required"))?;
            if x2.len() != dim {
                return Err(LabError::validation("x2", format!("must have {dim} components")));
            }
            if x2 == &self.x {
                return Err(LabError::validation("x2", "must differ from x"));
            }
        }

        let num = &self.numerics;
        let max = MicroConfig::max_dtau(&measure);
        let dtau = num.dtau.unwrap_or(max);
        if !(dtau > 0.0 && dtau <= max * (1.0 + 1e-12)) {
            return Err(LabError::validation("numerics.dtau", format!("must lie in (0, {max}]")));
        }
        let gk_dtau = num.gk_dtau.unwrap_or(max);
        if !(gk_dtau > 0.0 && gk_dtau <= max * (1.0 + 1e-12)) {
            return Err(LabError::validation("numerics.gk_dtau", format!("must lie in (0, {max}]")));
        }
        let t_gk = num.t_gk.unwrap_or(10.0 / measure.alpha_star());
        if !(t_gk >= 5.0 / measure.alpha_star()) {
            return Err(LabError::validation(
                "numerics.T_GK",
                format!("must be at least 5/alpha_star = {}", 5.0 / measure.alpha_star()),
            ));
        }
        if num.n_steps == 0 || num.ode_steps == 0 {
            return Err(LabError::validation("numerics.n_steps", "must be positive"));
        }
        if num.gk_paths < 2 {
            return Err(LabError::validation("numerics.gk_paths", "must be at least 2"));
        }
        if num.bootstrap < 100 {
            return Err(LabError::validation("numerics.bootstrap", "must be at least 100"));
        }
        let sup = self.u0.as_ref().map_or(0.0, |b| b.height.abs());
        let u_grid = match &num.u_grid {
            Some(g) => {
                if g.len() < 2 || g.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(LabError::validation("numerics.u_grid", "must be strictly increasing with at least two points"));
                }
                g.clone()
            }
            None => default_u_grid(sup),
        };
        let weak = self.weak.clone().unwrap_or_default();
        if kind == ExperimentKind::WeakAverage {
            if weak.grid_n < 1 || !(weak.spacing > 0.0) {
                return Err(LabError::validation("weak", "grid_n and spacing must be positive"));
            }
            if weak.realizations < 2 {
                return Err(LabError::validation("weak.realizations", "must be at least 2"));
            }
        } else if self.weak.is_some() {
            return Err(LabError::validation("weak", "only the weak-average experiment takes a weak block"));
        }
        Ok(Resolved {
            measure,
            spec,
            dtau,
            t_gk,
            gk_dtau,
            u_grid,
            weak,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"{
        "experiment": "linear",
        "measure": {"preset": "shear"},
        "u0": {"center": [0.0, 0.0], "radius": 2.0},
        "T": 1.0, "x": [0.0, 0.0],
        "epsilons": [0.4, 0.2], "n_paths": 200, "seed": 3
    }"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let c = ExperimentConfig::from_json(LINEAR).unwrap();
        let r = c.validate().unwrap();
        assert_eq!(r.u_grid.len(), 41);
        assert_eq!(r.u_grid[0], -3.0);
        assert!((r.dtau - 0.1).abs() < 1e-12);
        assert_eq!(r.t_gk, 10.0);
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_field_paths() {
        let bad = LINEAR.replace("\"radius\": 2.0", "\"radius\": \"wide\"");
        match ExperimentConfig::from_json(&bad).unwrap_err() {
            LabError::Validation { path, .. } => assert_eq!(path, "u0.radius"),
            e => panic!("{e}"),
        }
        let typo = LINEAR.replace("\"seed\"", "\"sead\"");
        assert_eq!(ExperimentConfig::from_json(&typo).unwrap_err().exit_code(), 2);

        let with_f = LINEAR.replace("\"T\"", "\"f\": \"demo-zero\", \"T\"");
        match ExperimentConfig::from_json(&with_f).unwrap().validate().unwrap_err() {
            LabError::Validation { path, .. } => assert_eq!(path, "f"),
            e => panic!("{e}"),
        }
        let eps = LINEAR.replace("[0.4, 0.2]", "[0.2, 0.4]");
        assert!(ExperimentConfig::from_json(&eps).unwrap().validate().is_err());
        let few = LINEAR.replace("200", "50");
        assert!(ExperimentConfig::from_json(&few).unwrap().validate().is_err());
        let dt = LINEAR.replace("\"seed\": 3", "\"seed\": 3, \"numerics\": {\"dtau\": 0.5}");
        match ExperimentConfig::from_json(&dt).unwrap().validate().unwrap_err() {
            LabError::Validation { path, .. } => assert_eq!(path, "numerics.dtau"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn regime_checks() {
        let zero = LINEAR
            .replace("\"linear\"", "\"semilinear-zero\"")
            .replace("\"T\"", "\"f\": \"demo-mean\", \"T\"");
        assert!(ExperimentConfig::from_json(&zero).unwrap().validate().is_err());
        let ok = zero.replace("demo-mean", "demo-zero-u");
        assert!(ExperimentConfig::from_json(&ok).unwrap().validate().is_ok());
        let mean = ok.replace("semilinear-zero", "semilinear-mean");
        assert!(ExperimentConfig::from_json(&mean).unwrap().validate().is_err());
        let two = LINEAR.replace("\"linear\"", "\"two-point\"");
        assert!(ExperimentConfig::from_json(&two).unwrap().validate().is_err());
        let two = two.replace("\"x\":", "\"x2\": [0.0, 0.0], \"x\":");
        assert!(ExperimentConfig::from_json(&two).unwrap().validate().is_err());
    }

    #[test]
    fn bump_shape() {
        let b = BumpSpec { center: vec![0.0, 0.0], radius: 2.0, height: 3.0 };
        assert_eq!(b.eval(&[0.0, 0.0]), 3.0);
        assert_eq!(b.eval(&[2.0, 0.0]), 0.0);
        assert!(b.eval(&[1.0, 1.0]) > 0.0 && b.eval(&[1.0, 1.0]) < 3.0);
    }
}
