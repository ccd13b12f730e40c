//! Market models: a domain, a covariance field c and a limiting density p,
//! together with the derived field ℓ = ∇p/p + c⁻¹ div c.
//!
//! On the simplex all integrals and solves run in the chart y = (x¹, …, x^{d−1}).
//! There the covariance is that of the first d − 1 coordinates under the
//! tangent restriction Π c Π, and chart vectors are lifted back to zero-sum
//! ambient vectors.

pub mod config;
pub mod domain;
pub mod fields;
pub mod presets;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use domain::{Domain, DomainKind, Element, Exhaustion};
pub use fields::{CovarianceField, Exp, LogScalarField, ScalarField, VectorField};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, tail_verdict, Tail, TailRule, Tol};

/// The triple (E, c, p) plus optional side information.
#[derive(Clone)]
pub struct MarketModel {
    pub name: String,
    pub domain: Domain,
    pub c: Arc<dyn CovarianceField>,
    pub p: Arc<dyn ScalarField>,
    pub mass_tolerance: f64,
    /// A potential H with c⁻¹ div c = ∇H, when one is known.
    pub potential: Option<Arc<dyn ScalarField>>,
    /// Largest admissible condition number of the chart covariance.
    pub condition_cap: f64,
    /// T with C_chart = T c Tᵀ; its transpose lifts chart vectors.
    restrict: DMatrix<f64>,
    /// dx/dy of the chart embedding.
    tangent: DMatrix<f64>,
}

impl std::fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarketModel").field("name", &self.name).field("domain", &self.domain).finish_non_exhaustive()
    }
}

impl MarketModel {
    /// Builds a model and checks dimensions and the mass of p.
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        c: Arc<dyn CovarianceField>,
        p: Arc<dyn ScalarField>,
        mass_tolerance: f64,
    ) -> Result<Self> {
        let d = domain.ambient_dim();
        if c.dim() != d || p.dim() != d {
            return Err(Error::config("model", format!("field dimensions ({}, {}) differ from domain dimension {d}", c.dim(), p.dim())));
        }
        let m = domain.chart_dim();
        let (restrict, tangent) = if domain.is_simplex() {
            let proj = DMatrix::identity(d, d) - DMatrix::from_element(d, d, 1.0 / d as f64);
            let restrict = proj.rows(0, m).into_owned();
            let mut tangent = DMatrix::zeros(d, m);
            for k in 0..m {
                tangent[(k, k)] = 1.0;
                tangent[(d - 1, k)] = -1.0;
            }
            (restrict, tangent)
        } else {
            (DMatrix::identity(d, d), DMatrix::identity(d, d))
        };
        let model = MarketModel {
            name: name.into(),
            domain,
            c,
            p,
            mass_tolerance,
            potential: None,
            condition_cap: 1e12,
            restrict,
            tangent,
        };
        let mass = model.mass(model.domain.levels() - 1);
        if !(mass >= 1.0 - mass_tolerance && mass <= 1.0 + 1e-8) {
            return Err(Error::config("density", format!("mass over the largest exhaustion element is {mass:.9}")));
        }
        Ok(model)
    }

    pub fn with_potential(mut self, h: Arc<dyn ScalarField>) -> Self {
        self.potential = Some(h);
        self
    }

    pub fn dim(&self) -> usize {
        self.domain.ambient_dim()
    }

    pub fn chart_dim(&self) -> usize {
        self.domain.chart_dim()
    }

    /// ∫ p over E_n.
    pub fn mass(&self, n: usize) -> f64 {
        self.domain.element(n).integrate(&|y| self.density(y), Tol::default())
    }

    /// p at a chart point.
    pub fn density(&self, y: &[f64]) -> f64 {
        self.p.log_eval(&self.domain.embed(y)).exp()
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        self.p.log_eval(&self.domain.embed(y))
    }

    pub fn chart_cov(&self, y: &[f64]) -> DMatrix<f64> {
        let c = self.c.eval(&self.domain.embed(y));
        if self.domain.is_simplex() {
            &self.restrict * c * self.restrict.transpose()
        } else {
            c
        }
    }

    /// ∂_{y_k} of the chart covariance.
    pub fn chart_cov_partial(&self, y: &[f64], k: usize) -> DMatrix<f64> {
        let x = self.domain.embed(y);
        if self.domain.is_simplex() {
            let d = self.dim();
            let dk = self.c.partial(&x, k) - self.c.partial(&x, d - 1);
            &self.restrict * dk * self.restrict.transpose()
        } else {
            self.c.partial(&x, k)
        }
    }

    pub fn chart_cov_div(&self, y: &[f64]) -> DVector<f64> {
        if !self.domain.is_simplex() {
            return self.c.div(y);
        }
        let m = self.chart_dim();
        let mut out = DVector::zeros(m);
        for l in 0..m {
            let pl = self.chart_cov_partial(y, l);
            for k in 0..m {
                out[k] += pl[(k, l)];
            }
        }
        out
    }

    pub fn chart_div_div(&self, y: &[f64]) -> f64 {
        if !self.domain.is_simplex() {
            return self.c.div_div(y);
        }
        let mut z = y.to_vec();
        let mut total = 0.0;
        for i in 0..y.len() {
            let h = 1e-5 * y[i].abs().max(1e-2);
            z[i] = y[i] + h;
            let up = self.chart_cov_div(&z)[i];
            z[i] = y[i] - h;
            let dn = self.chart_cov_div(&z)[i];
            z[i] = y[i];
            total += (up - dn) / (2.0 * h);
        }
        total
    }

    pub fn chart_grad_log_p(&self, y: &[f64]) -> DVector<f64> {
        let g = self.p.grad_log(&self.domain.embed(y));
        if self.domain.is_simplex() {
            self.tangent.transpose() * g
        } else {
            g
        }
    }

    pub fn chart_hess_log_p(&self, y: &[f64]) -> DMatrix<f64> {
        let h = self.p.hess_log(&self.domain.embed(y));
        if self.domain.is_simplex() {
            self.tangent.transpose() * h * &self.tangent
        } else {
            h
        }
    }

    /// Solves C v = rhs after checking the conditioning of C.
    pub fn chart_solve(&self, y: &[f64], cov: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let (lo, hi) = fields::eig_range(cov);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= self.condition_cap) {
            return Err(Error::SingularCovariance { point: self.domain.embed(y), condition });
        }
        cov.clone()
            .cholesky()
            .map(|ch| ch.solve(rhs))
            .ok_or(Error::SingularCovariance { point: self.domain.embed(y), condition })
    }

    /// ℓ in chart coordinates.
    pub fn chart_ell(&self, y: &[f64]) -> Result<DVector<f64>> {
        let lp = self.log_density(y);
        if !lp.is_finite() {
            return Err(Error::NonpositiveDensity { point: self.domain.embed(y), value: lp.exp() });
        }
        let cov = self.chart_cov(y);
        let div = self.chart_cov_div(y);
        Ok(self.chart_grad_log_p(y) + self.chart_solve(y, &cov, &div)?)
    }

    /// p C ℓ = C ∇p + p div C in chart coordinates.
    pub fn chart_flux(&self, y: &[f64]) -> DVector<f64> {
        let p = self.density(y);
        if p == 0.0 {
            return DVector::zeros(self.chart_dim());
        }
        (self.chart_cov(y) * self.chart_grad_log_p(y) + self.chart_cov_div(y)) * p
    }

    /// ∇·(p c ℓ) = tr(c D²p) + 2 ∇p·div c + p div div c.
    pub fn chart_flux_divergence(&self, y: &[f64]) -> f64 {
        let p = self.density(y);
        if p == 0.0 {
            return 0.0;
        }
        let c = self.chart_cov(y);
        let g = self.chart_grad_log_p(y);
        let d2 = self.chart_hess_log_p(y) + &g * g.transpose();
        let tr = (c * d2).trace();
        p * (tr + 2.0 * g.dot(&self.chart_cov_div(y)) + self.chart_div_div(y))
    }

    /// Pulls an ambient gradient back to chart coordinates.
    pub fn chart_grad(&self, g: &DVector<f64>) -> DVector<f64> {
        if self.domain.is_simplex() {
            self.tangent.transpose() * g
        } else {
            g.clone()
        }
    }

    /// Maps a chart displacement to the ambient displacement dx = M dy.
    pub fn push_forward(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.domain.is_simplex() {
            &self.tangent * v
        } else {
            v.clone()
        }
    }

    /// Pulls an ambient Hessian back to chart coordinates.
    pub fn chart_hess(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        if self.domain.is_simplex() {
            self.tangent.transpose() * h * &self.tangent
        } else {
            h.clone()
        }
    }

    /// Lifts a chart vector to the ambient coordinates (zero-sum on the simplex).
    pub fn lift(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.domain.is_simplex() {
            self.restrict.transpose() * v
        } else {
            v.clone()
        }
    }

    /// ℓ at an ambient interior point.
    pub fn ell(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.lift(&self.chart_ell(&self.domain.chart(x))?))
    }

    /// Covariance field acting on the tangent space of the domain.
    pub fn effective_cov(&self) -> Arc<dyn CovarianceField> {
        if self.domain.is_simplex() {
            Arc::new(TangentCovariance { c: self.c.clone(), d: self.dim() })
        } else {
            self.c.clone()
        }
    }

    /// A central point of E_0 used as default start.
    pub fn center(&self) -> Vec<f64> {
        match self.domain.element(0) {
            Element::Bounds(b) => b.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
            Element::SimplexSlice { d, .. } => vec![1.0 / d as f64; d],
        }
    }
}

/// Π c Π with Π the projector onto zero-sum vectors.
pub struct TangentCovariance {
    pub c: Arc<dyn CovarianceField>,
    pub d: usize,
}

impl TangentCovariance {
    fn proj(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) - DMatrix::from_element(self.d, self.d, 1.0 / self.d as f64)
    }
}

impl CovarianceField for TangentCovariance {
    fn dim(&self) -> usize {
        self.d
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let p = self.proj();
        &p * self.c.eval(x) * &p
    }
    fn partial(&self, x: &[f64], k: usize) -> DMatrix<f64> {
        let p = self.proj();
        &p * self.c.partial(x, k) * &p
    }
}

/// ℓ as a vector field; evaluation errors surface as NaN components.
pub struct EllField {
    model: MarketModel,
}

impl EllField {
    pub fn try_eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.model.ell(x)
    }
}

impl VectorField for EllField {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn eval(&self, x: &[f64]) -> DVector<f64> {
        self.model.ell(x).unwrap_or_else(|_| DVector::from_element(self.model.dim(), f64::NAN))
    }
}

pub fn ell_field(model: &MarketModel) -> EllField {
    EllField { model: model.clone() }
}

/// A truncated-integral check backed by its level values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegralCheck {
    pub holds: bool,
    pub verdict: Tail,
    #[serde(with = "crate::quadrature::float_seq")]
    pub levels: Vec<f64>,
}

impl IntegralCheck {
    fn from_levels(levels: Vec<f64>, rule: &TailRule) -> Result<Self> {
        let verdict = tail_verdict(&levels, rule)?;
        Ok(IntegralCheck { holds: verdict == Tail::Converged, verdict, levels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certification {
    /// Decided from the divergence of ∫ 1/(pc) at both endpoints.
    Exact,
    /// No exits observed over a finite simulation budget.
    Empirical,
    NotRun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonExplosionCheck {
    pub certification: Certification,
    pub holds: Option<bool>,
    /// ∫ 1/(pc) towards the lower endpoint; `holds` means it diverges.
    pub lower: Option<IntegralCheck>,
    pub upper: Option<IntegralCheck>,
    pub exploded_paths: Option<usize>,
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ell_energy: IntegralCheck,
    pub flux_positive: IntegralCheck,
    pub non_explosion: NonExplosionCheck,
    pub mass: f64,
    pub notes: Vec<String>,
}

impl Diagnostics {
    pub fn all_hold(&self) -> bool {
        self.ell_energy.holds && self.flux_positive.holds && self.non_explosion.holds == Some(true)
    }
}

/// Simulation budget for the empirical non-explosion check in d ≥ 2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmpiricalBudget {
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for EmpiricalBudget {
    fn default() -> Self {
        EmpiricalBudget { paths: 4, horizon: 20.0, dt: 1e-3, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AssumptionOptions {
    pub tol: Tol,
    pub rule: TailRule,
    pub empirical: Option<EmpiricalBudget>,
}

impl Default for AssumptionOptions {
    fn default() -> Self {
        AssumptionOptions { tol: Tol::default(), rule: TailRule::default(), empirical: Some(EmpiricalBudget::default()) }
    }
}

/// Integrals of a 1-D integrand over the shells between the exhaustion
/// endpoints and a fixed interior point, one sequence per endpoint.
fn endpoint_levels(domain: &Domain, f: &dyn Fn(f64) -> f64, tol: Tol) -> (Vec<f64>, Vec<f64>) {
    let ends: Vec<(f64, f64)> = (0..domain.levels())
        .map(|n| match domain.element(n) {
            Element::Bounds(b) => b[0],
            Element::SimplexSlice { .. } => unreachable!("endpoint levels are one-dimensional"),
        })
        .collect();
    let x0 = 0.5 * (ends[0].0 + ends[0].1);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let (mut lo_acc, mut hi_acc) = (0.0, 0.0);
    for n in 0..ends.len() {
        let (a_prev, b_prev) = if n == 0 { (x0, x0) } else { ends[n - 1] };
        lo_acc += integrate(f, ends[n].0, a_prev, tol).value;
        hi_acc += integrate(f, b_prev, ends[n].1, tol).value;
        lower.push(lo_acc);
        upper.push(hi_acc);
    }
    (lower, upper)
}

/// Runtime checks of the three integrability and non-explosion conditions.
pub fn check_assumptions(model: &MarketModel, opts: &AssumptionOptions) -> Result<Diagnostics> {
    let mut notes = Vec::new();
    let energy = model.domain.level_integrals(
        &|y| {
            let p = model.density(y);
            if p == 0.0 {
                return 0.0;
            }
            match model.chart_ell(y) {
                Ok(l) => (l.transpose() * model.chart_cov(y) * &l)[(0, 0)] * p,
                Err(_) => f64::NAN,
            }
        },
        opts.tol,
    );
    if energy.iter().any(|v| v.is_nan()) {
        notes.push("ell could not be evaluated everywhere on the exhaustion".into());
    }
    let ell_energy = IntegralCheck::from_levels(energy, &opts.rule)?;
    let flux = model.domain.level_integrals(&|y| model.chart_flux_divergence(y).max(0.0), opts.tol);
    let flux_positive = IntegralCheck::from_levels(flux, &opts.rule)?;

    let non_explosion = if model.dim() == 1 {
        let inv = |x: f64| (-model.p.log_eval(&[x]) - model.c.eval(&[x])[(0, 0)].ln()).exp();
        let (lo, hi) = endpoint_levels(&model.domain, &inv, opts.tol);
        let lo_v = tail_verdict(&lo, &opts.rule)?;
        let hi_v = tail_verdict(&hi, &opts.rule)?;
        let holds = match (lo_v, hi_v) {
            (Tail::Diverged, Tail::Diverged) => Some(true),
            (Tail::Converged, _) | (_, Tail::Converged) => Some(false),
            _ => None,
        };
        NonExplosionCheck {
            certification: Certification::Exact,
            holds,
            lower: Some(IntegralCheck { holds: lo_v == Tail::Diverged, verdict: lo_v, levels: lo }),
            upper: Some(IntegralCheck { holds: hi_v == Tail::Diverged, verdict: hi_v, levels: hi }),
            exploded_paths: None,
            paths: None,
        }
    } else if let Some(budget) = opts.empirical {
        let (exploded, paths) = crate::simulate::reversing_explosions(model, &budget)?;
        notes.push(format!("non-explosion is empirical: {exploded} of {paths} reversing paths left the guard"));
        NonExplosionCheck {
            certification: Certification::Empirical,
            holds: Some(exploded == 0),
            lower: None,
            upper: None,
            exploded_paths: Some(exploded),
            paths: Some(paths),
        }
    } else {
        NonExplosionCheck {
            certification: Certification::NotRun,
            holds: None,
            lower: None,
            upper: None,
            exploded_paths: None,
            paths: None,
        }
    };
    Ok(Diagnostics {
        ell_energy,
        flux_positive,
        non_explosion,
        mass: model.mass(model.domain.levels() - 1),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cir_ell_hand_value() {
        let m = config::cir_model(2.0, 1.0, 1.0).unwrap();
        let l = m.ell(&[1.0]).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_ell_hand_value() {
        let m = config::gaussian_model().unwrap();
        assert!((m.ell(&[0.5]).unwrap()[0] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn constant_fields_give_zero_ell() {
        let m = config::build(&config::ModelConfig::from_json(
            r#"{"schema":1,"name":"flat_box","domain":{"kind":"box","axes":[[0,2],[0,1]]},
                "covariance":{"kind":"constant","matrix":[[1.0,0.2],[0.2,0.5]]},
                "density":{"kind":"uniform"}}"#,
        )
        .unwrap())
        .unwrap();
        let l = m.ell(&[0.3, 0.7]).unwrap();
        assert!(l.norm() == 0.0);
    }

    #[test]
    fn nonpositive_density_is_reported() {
        let m = config::cir_model(3.0, 2.0, 1.0).unwrap();
        assert!(matches!(m.chart_ell(&[-1.0]), Err(Error::NonpositiveDensity { .. })));
    }

    #[test]
    fn cir_a2_assumptions_hold() {
        let m = config::cir_model(2.0, 1.0, 1.0).unwrap();
        let d = check_assumptions(&m, &AssumptionOptions::default()).unwrap();
        assert!(d.ell_energy.holds && d.flux_positive.holds, "{d:?}");
        assert_eq!(d.non_explosion.holds, Some(true));
    }

    #[test]
    fn cir_a1_energy_diverges() {
        let m = config::cir_model(1.0, 1.0, 1.0).unwrap();
        let d = check_assumptions(&m, &AssumptionOptions::default()).unwrap();
        assert!(!d.ell_energy.holds);
        assert_eq!(d.ell_energy.verdict, Tail::Diverged);
    }

    #[test]
    fn flat_unit_interval_is_explosive() {
        let m = config::load_bundled("unit_interval_flat").unwrap();
        let d = check_assumptions(&m, &AssumptionOptions::default()).unwrap();
        assert_eq!(d.non_explosion.holds, Some(false));
        assert_eq!(d.non_explosion.lower.as_ref().unwrap().verdict, Tail::Converged);
    }

    #[test]
    fn mass_is_nondecreasing() {
        for name in config::BUNDLED {
            let m = config::load_bundled(name).unwrap();
            let masses: Vec<f64> = (0..m.domain.levels()).map(|n| m.mass(n)).collect();
            for w in masses.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{name}: {masses:?}");
            }
            assert!(*masses.last().unwrap() <= 1.0 + m.mass_tolerance);
        }
    }
}
