//! JSON model configuration (`schema: 1`) and the bundled presets.
//!
//! Infinite interval ends are written as `null`. See `presets/README.md`
//! in the crate for the full key list.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::domain::{Domain, DomainKind, Exhaustion};
use super::fields::{CovarianceField, Exp, ScalarField};
use super::presets::*;
use super::MarketModel;
use crate::error::{Error, Result};
use crate::quadrature::Tol;
use crate::rank::{self, CutoffSpec, KappaSpec, QSpec, RankInputs, ThetaParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Names of the bundled preset configs.
pub const BUNDLED: [&str; 7] =
    ["cir_a3_b2", "unit_interval_flat", "gaussian", "cir_a1", "zero_growth", "gradient_2d", "rank_demo"];

pub fn bundled_json(name: &str) -> Option<&'static str> {
    Some(match name {
        "cir_a3_b2" => include_str!("../../presets/cir_a3_b2.json"),
        "unit_interval_flat" => include_str!("../../presets/unit_interval_flat.json"),
        "gaussian" => include_str!("../../presets/gaussian.json"),
        "cir_a1" => include_str!("../../presets/cir_a1.json"),
        "zero_growth" => include_str!("../../presets/zero_growth.json"),
        "gradient_2d" => include_str!("../../presets/gradient_2d.json"),
        "rank_demo" => include_str!("../../presets/rank_demo.json"),
        _ => return None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Interval {
        lower: Option<f64>,
        upper: Option<f64>,
        #[serde(default)]
        exhaustion: Option<Exhaustion>,
    },
    Box {
        axes: Vec<(Option<f64>, Option<f64>)>,
        #[serde(default)]
        exhaustion: Option<Exhaustion>,
    },
    Simplex {
        d: usize,
        #[serde(default)]
        exhaustion: Option<Exhaustion>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceConfig {
    Cir { xi: f64 },
    Constant { matrix: Vec<Vec<f64>> },
    Cosh { scale: f64 },
    Polynomial { coeffs: Vec<f64> },
    Theta {
        #[serde(rename = "A")]
        a: f64,
        #[serde(rename = "B")]
        b: f64,
        #[serde(rename = "C")]
        c: f64,
    },
    Ranked { kappa: KappaSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Gamma { shape: f64, rate: f64 },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Uniform,
    /// p proportional to 1/c (one dimension).
    Reciprocal,
    Power { exponents: Vec<f64> },
    Ranked { q: QSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    Zero,
    LogCovariance,
    SumLog { scale: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub theta: ThetaParams,
    pub cutoff: CutoffSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Exhaustion level of the element discretized by the variational solver.
    pub exhaustion_level: usize,
    /// Cells per chart axis at grid level 0.
    pub cells: usize,
    /// Grid level used for single solves; cells double per level.
    #[serde(default)]
    pub grid_level: usize,
    /// Number of levels in the refinement study.
    #[serde(default = "default_refinements")]
    pub refinements: usize,
}

fn default_refinements() -> usize {
    4
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { exhaustion_level: 3, cells: 200, grid_level: 0, refinements: 4 }
    }
}

/// Histogram bins on one coordinate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BinsConfig {
    pub axis: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Divergence-free flux perturbations γ = (∂₂ψ, −∂₁ψ), d = 2 only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationConfig {
    /// ψ = s · p.
    DensityRotation { strength: f64 },
    /// ψ = s · x¹ · p.
    DensityShear { strength: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub stationary_start: bool,
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default)]
    pub bins: Option<BinsConfig>,
    #[serde(default)]
    pub perturbations: Vec<PerturbationConfig>,
}

fn default_burn_in() -> f64 {
    0.1
}

fn default_batches() -> usize {
    20
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            x0: None,
            stationary_start: false,
            dt: 1e-3,
            horizon: 2000.0,
            paths: 8,
            seed: 1,
            burn_in: default_burn_in(),
            batches: default_batches(),
            bins: None,
            perturbations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: u32,
    pub name: String,
    pub domain: DomainConfig,
    pub covariance: CovarianceConfig,
    pub density: DensityConfig,
    #[serde(default)]
    pub potential: Option<PotentialConfig>,
    #[serde(default)]
    pub rank: Option<RankConfig>,
    #[serde(default = "default_mass_tolerance")]
    pub mass_tolerance: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

fn default_mass_tolerance() -> f64 {
    1e-3
}

fn section<T: DeserializeOwned>(value: &serde_json::Value, key: &str) -> Result<Option<T>> {
    match value.get(key) {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(|e| Error::config(key, e.to_string())),
    }
}

impl ModelConfig {
    /// Parses and validates a config, reporting the offending key on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config("$", e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| Error::config("$", "expected a JSON object"))?;
        match obj.get("schema").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::config("schema", format!("unsupported schema version {v}"))),
            None => return Err(Error::config("schema", "missing required `schema: 1`")),
        }
        for key in ["domain", "covariance", "density", "name"] {
            if !obj.contains_key(key) {
                return Err(Error::config(key, "missing required key"));
            }
        }
        let known = [
            "schema", "name", "domain", "covariance", "density", "potential", "rank", "mass_tolerance", "solver", "simulation",
        ];
        if let Some(k) = obj.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown key"));
        }
        let cfg = ModelConfig {
            schema: SCHEMA_VERSION,
            name: section(&value, "name")?.unwrap_or_default(),
            domain: section(&value, "domain")?.unwrap(),
            covariance: section(&value, "covariance")?.unwrap(),
            density: section(&value, "density")?.unwrap(),
            potential: section(&value, "potential")?,
            rank: section(&value, "rank")?,
            mass_tolerance: section(&value, "mass_tolerance")?.unwrap_or_else(default_mass_tolerance),
            solver: section(&value, "solver")?.unwrap_or_default(),
            simulation: section(&value, "simulation")?.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn validate(&self) -> Result<()> {
        let s = &self.simulation;
        if !(s.dt > 0.0 && s.horizon >= s.dt) {
            return Err(Error::config("simulation.dt", "need 0 < dt ≤ horizon"));
        }
        if s.paths == 0 || s.batches < 2 || !(0.0..1.0).contains(&s.burn_in) {
            return Err(Error::config("simulation", "need paths ≥ 1, batches ≥ 2, 0 ≤ burn_in < 1"));
        }
        if self.solver.cells < 2 {
            return Err(Error::config("solver.cells", "need at least 2 cells"));
        }
        if !(self.mass_tolerance > 0.0 && self.mass_tolerance < 0.5) {
            return Err(Error::config("mass_tolerance", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

fn inf_or(v: Option<f64>, default: f64) -> f64 {
    v.unwrap_or(default)
}

fn build_domain(cfg: &DomainConfig) -> Result<Domain> {
    match cfg {
        DomainConfig::Interval { lower, upper, exhaustion } => Domain::new(
            DomainKind::Interval { lower: inf_or(*lower, f64::NEG_INFINITY), upper: inf_or(*upper, f64::INFINITY) },
            exhaustion.unwrap_or_default(),
        ),
        DomainConfig::Box { axes, exhaustion } => Domain::new(
            DomainKind::Box {
                axes: axes.iter().map(|(lo, hi)| (inf_or(*lo, f64::NEG_INFINITY), inf_or(*hi, f64::INFINITY))).collect(),
            },
            exhaustion.unwrap_or_default(),
        ),
        DomainConfig::Simplex { d, exhaustion } => {
            Domain::new(DomainKind::Simplex { d: *d }, exhaustion.unwrap_or(Exhaustion { margin0: 0.1, radius0: 1.0, levels: 12 }))
        }
    }
}

/// Normalizes a log-specified density to unit mass over the full domain.
fn log_mass(domain: &Domain, log_p: &(dyn Fn(&[f64]) -> f64 + Sync)) -> f64 {
    domain.full().integrate(&|y| log_p(&domain.embed(y)).exp(), Tol::default()).ln()
}

/// Builds the model described by a config.
pub fn build(cfg: &ModelConfig) -> Result<MarketModel> {
    let domain = build_domain(&cfg.domain)?;
    let d = domain.ambient_dim();
    if let (CovarianceConfig::Ranked { kappa }, DensityConfig::Ranked { q }) = (&cfg.covariance, &cfg.density) {
        let DomainKind::Simplex { .. } = domain.kind else {
            return Err(Error::config("domain", "ranked inputs need a simplex domain"));
        };
        let inputs = RankInputs::from_specs(d, kappa, q)?;
        let inputs = match &cfg.rank {
            Some(r) => rank::modify(&inputs, &r.cutoff, &r.theta)?,
            None => inputs,
        };
        return rank::symmetrize(&inputs, &cfg.name, domain, cfg.mass_tolerance);
    }
    let c: Arc<dyn CovarianceField> = match &cfg.covariance {
        CovarianceConfig::Cir { xi } => Arc::new(CirCovariance { xi: *xi }),
        CovarianceConfig::Constant { matrix } => {
            if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                return Err(Error::config("covariance.matrix", format!("expected a {d}×{d} matrix")));
            }
            Arc::new(ConstantCovariance { matrix: DMatrix::from_fn(d, d, |i, j| matrix[i][j]) })
        }
        CovarianceConfig::Cosh { scale } => Arc::new(CoshCovariance { scale: *scale }),
        CovarianceConfig::Polynomial { coeffs } => Arc::new(PolynomialCovariance { coeffs: coeffs.clone() }),
        CovarianceConfig::Theta { a, b, c } => Arc::new(rank::Theta::new(ThetaParams::new(*a, *b, *c), d)?),
        CovarianceConfig::Ranked { .. } => return Err(Error::config("density", "ranked covariance needs a ranked density")),
    };
    let p: Arc<dyn ScalarField> = match &cfg.density {
        DensityConfig::Gamma { shape, rate } => {
            if !(*shape > 0.0 && *rate > 0.0) {
                return Err(Error::config("density", "gamma needs positive shape and rate"));
            }
            Arc::new(Exp(GammaDensity { shape: *shape, rate: *rate }))
        }
        DensityConfig::Gaussian { mean, std } => {
            if mean.len() != d || std.len() != d || std.iter().any(|s| *s <= 0.0) {
                return Err(Error::config("density", format!("gaussian needs {d} means and positive stds")));
            }
            Arc::new(Exp(GaussianDensity { mean: mean.clone(), std: std.clone() }))
        }
        DensityConfig::Uniform => {
            let lm = log_mass(&domain, &|_| 0.0);
            Arc::new(Exp(UniformDensity { dim: d, log_value: -lm }))
        }
        DensityConfig::Reciprocal => {
            if d != 1 {
                return Err(Error::config("density", "reciprocal density is one-dimensional"));
            }
            let raw = ReciprocalDensity { c: c.clone(), log_norm: 0.0 };
            let lm = log_mass(&domain, &|x| super::fields::LogScalarField::log_eval(&raw, x));
            Arc::new(Exp(ReciprocalDensity { c: c.clone(), log_norm: -lm }))
        }
        DensityConfig::Power { exponents } => {
            if exponents.len() != d {
                return Err(Error::config("density.exponents", format!("expected {d} exponents")));
            }
            let raw = PowerDensity { exponents: exponents.clone(), log_norm: 0.0 };
            let lm = log_mass(&domain, &|x| super::fields::LogScalarField::log_eval(&raw, x));
            Arc::new(Exp(PowerDensity { exponents: exponents.clone(), log_norm: -lm }))
        }
        DensityConfig::Ranked { .. } => return Err(Error::config("covariance", "ranked density needs a ranked covariance")),
    };
    let mut model = MarketModel::new(cfg.name.clone(), domain, c.clone(), p, cfg.mass_tolerance)?;
    model.potential = match &cfg.potential {
        None => None,
        Some(PotentialConfig::Zero) => Some(zero_potential(d)),
        Some(PotentialConfig::LogCovariance) => {
            if d != 1 {
                return Err(Error::config("potential", "log_covariance potential is one-dimensional"));
            }
            Some(Arc::new(LogCovariancePotential { c }))
        }
        Some(PotentialConfig::SumLog { scale }) => Some(Arc::new(SumLogPotential { dim: d, scale: *scale })),
    };
    Ok(model)
}

pub fn load_bundled_config(name: &str) -> Result<ModelConfig> {
    let text = bundled_json(name).ok_or_else(|| Error::config("$", format!("no bundled preset named `{name}`")))?;
    ModelConfig::from_json(text)
}

pub fn load_bundled(name: &str) -> Result<MarketModel> {
    build(&load_bundled_config(name)?)
}

/// CIR model with covariance ξ² x and Gamma(A, B) density on (0, ∞).
pub fn cir_config(a: f64, b: f64, xi: f64) -> ModelConfig {
    let mut cfg = load_bundled_config("cir_a3_b2").expect("bundled preset parses");
    cfg.name = format!("cir_a{a}_b{b}_xi{xi}");
    cfg.covariance = CovarianceConfig::Cir { xi };
    cfg.density = DensityConfig::Gamma { shape: a, rate: b };
    cfg
}

pub fn cir_model(a: f64, b: f64, xi: f64) -> Result<MarketModel> {
    build(&cir_config(a, b, xi))
}

pub fn gaussian_model() -> Result<MarketModel> {
    load_bundled("gaussian")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_presets_parse_and_round_trip() {
        for name in BUNDLED {
            let cfg = load_bundled_config(name).unwrap();
            let again = ModelConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(cfg, again, "{name}");
            build(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn schema_is_required() {
        let err = ModelConfig::from_json(r#"{"name":"x","domain":{"kind":"interval","lower":0,"upper":1},"covariance":{"kind":"cir","xi":1},"density":{"kind":"uniform"}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "schema"));
    }

    #[test]
    fn errors_name_the_section() {
        let err = ModelConfig::from_json(r#"{"schema":1,"name":"x","domain":{"kind":"interval","lower":0,"upper":1},"covariance":{"kind":"cir"},"density":{"kind":"uniform"}}"#)
            .unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "covariance");
                assert!(message.contains("xi"), "{message}");
            }
            other => panic!("{other}"),
        }
    }
}
