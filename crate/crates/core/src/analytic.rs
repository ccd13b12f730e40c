//! Closed-form solutions, candidate lower bounds and classification.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{AssumptionItem, Error, Result};
use crate::model::config::SolverConfig;
use crate::model::{check_assumptions, AssumptionOptions, Diagnostics, Element, Exp, IntegralCheck, LogScalarField, MarketModel, ScalarField, VectorField};
use crate::quadrature::{integrate, tail_verdict, Tail, Tol};
use crate::variational::{self, PotentialField};

/// û = exp(φ/2) together with the strategy it generates.
#[derive(Clone)]
pub struct GeneratingFunction {
    pub phi: Arc<dyn ScalarField>,
    /// On the simplex the strategy is shifted to full investment.
    pub simplex: bool,
}

struct HalfLog(Arc<dyn ScalarField>);

impl LogScalarField for HalfLog {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        0.5 * self.0.eval(x)
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        self.0.grad(x) * 0.5
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        self.0.hess(x) * 0.5
    }
}

/// ϑ̂ as a vector field.
pub struct Strategy {
    generating: GeneratingFunction,
}

impl VectorField for Strategy {
    fn dim(&self) -> usize {
        self.generating.phi.dim()
    }
    fn eval(&self, x: &[f64]) -> DVector<f64> {
        self.generating.strategy_at(x)
    }
}

impl GeneratingFunction {
    pub fn new(phi: Arc<dyn ScalarField>, simplex: bool) -> Self {
        GeneratingFunction { phi, simplex }
    }

    pub fn u(&self) -> Arc<dyn ScalarField> {
        Arc::new(Exp(HalfLog(self.phi.clone())))
    }

    pub fn log_u(&self, x: &[f64]) -> f64 {
        0.5 * self.phi.eval(x)
    }

    /// ½∇φ, plus (1 − x·ϑ)𝟙 on the simplex so that x·ϑ = 1.
    pub fn strategy_at(&self, x: &[f64]) -> DVector<f64> {
        let theta = self.phi.grad(x) * 0.5;
        if !self.simplex {
            return theta;
        }
        let shift = 1.0 - theta.iter().zip(x).map(|(t, v)| t * v).sum::<f64>();
        theta.add_scalar(shift)
    }

    pub fn strategy(&self) -> Strategy {
        Strategy { generating: self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Finite,
    Infinite,
    IllPosedOrEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "closed_form_1d")]
    ClosedForm1d,
    #[serde(rename = "gradient_case")]
    GradientCase,
    #[serde(rename = "variational")]
    Variational,
    #[serde(rename = "candidate_bound")]
    CandidateBound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthReport {
    pub model: String,
    pub classification: Classification,
    /// Present iff the classification is Finite.
    pub lambda: Option<f64>,
    pub method: Option<Method>,
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn violated(d: &Diagnostics) -> Option<Error> {
    let (item, detail) = if !d.ell_energy.holds {
        (AssumptionItem::EllEnergy, format!("{:?}", d.ell_energy.verdict))
    } else if !d.flux_positive.holds {
        (AssumptionItem::FluxDivergence, format!("{:?}", d.flux_positive.verdict))
    } else if d.non_explosion.holds != Some(true) {
        (AssumptionItem::NonExplosion, format!("{:?} ({:?})", d.non_explosion.holds, d.non_explosion.certification))
    } else {
        return None;
    };
    Some(Error::AssumptionViolated { item, detail })
}

/// φ = log p + log c in one dimension.
struct LogPc {
    model: MarketModel,
}

impl ScalarField for LogPc {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.model.p.log_eval(x) + self.model.c.eval(x)[(0, 0)].ln()
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        let c = self.model.c.eval(x)[(0, 0)];
        self.model.p.grad_log(x) + DVector::from_element(1, self.model.c.partial(x, 0)[(0, 0)] / c)
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let c = self.model.c.eval(x)[(0, 0)];
        let c1 = self.model.c.partial(x, 0)[(0, 0)] / c;
        self.model.p.hess_log(x) + DMatrix::from_element(1, 1, self.model.c.div_div(x) / c - c1 * c1)
    }
}

/// φ = log p + H.
struct LogPPlusH {
    p: Arc<dyn ScalarField>,
    h: Arc<dyn ScalarField>,
}

impl ScalarField for LogPPlusH {
    fn dim(&self) -> usize {
        self.p.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.p.log_eval(x) + self.h.eval(x)
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        self.p.grad_log(x) + self.h.grad(x)
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        self.p.hess_log(x) + self.h.hess(x)
    }
}

fn interval_ends(model: &MarketModel) -> Result<(f64, f64)> {
    match model.domain.full() {
        Element::Bounds(b) if b.len() == 1 => Ok(b[0]),
        _ => Err(Error::config("domain", "a one-dimensional interval domain is required")),
    }
}

/// û = √(p c), with λ = (1/8) ∫ ℓ² c p over the whole interval.
pub fn solve_one_dim(model: &MarketModel) -> Result<(GeneratingFunction, GrowthReport)> {
    let (lo, hi) = interval_ends(model)?;
    let diagnostics = check_assumptions(model, &AssumptionOptions::default())?;
    if let Some(e) = violated(&diagnostics) {
        return Err(e);
    }
    let lambda = one_dim_lambda(model, lo, hi);
    let gen = GeneratingFunction::new(Arc::new(LogPc { model: model.clone() }), false);
    let report = GrowthReport {
        model: model.name.clone(),
        classification: Classification::Finite,
        lambda: Some(lambda),
        method: Some(Method::ClosedForm1d),
        diagnostics,
        notes: Vec::new(),
    };
    Ok((gen, report))
}

fn one_dim_lambda(model: &MarketModel, lo: f64, hi: f64) -> f64 {
    integrate(
        |x| {
            let p = model.density(&[x]);
            if p == 0.0 {
                return 0.0;
            }
            let l = model.chart_ell(&[x]).map(|l| l[0]).unwrap_or(f64::NAN);
            l * l * model.chart_cov(&[x])[(0, 0)] * p
        },
        lo,
        hi,
        Tol::default(),
    )
    .value
        / 8.0
}

/// Uniform random points of an exhaustion element in chart coordinates.
pub fn sample_element(element: &Element, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        match element {
            Element::Bounds(b) => out.push(b.iter().map(|(lo, hi)| lo + (hi - lo) * unit.sample(&mut rng)).collect()),
            Element::SimplexSlice { d, eps } => {
                let e: Vec<f64> = (0..*d).map(|_| Exp1.sample(&mut rng)).collect();
                let s: f64 = e.iter().sum();
                let x: Vec<f64> = e.iter().map(|v| v / s).collect();
                if x.iter().all(|v| *v >= *eps) {
                    out.push(x[..d - 1].to_vec());
                }
            }
        }
    }
    out
}

/// Largest ‖c⁻¹ div c − ∇H‖ relative to max(1, ‖∇H‖) at random points of
/// the largest exhaustion element (ambient coordinates).
pub fn gradient_defect(model: &MarketModel, h: &dyn ScalarField, points: usize, seed: u64) -> f64 {
    sample_element(&model.domain.largest(), points, seed)
        .iter()
        .map(|y| {
            let x = model.domain.embed(y);
            let c = model.c.eval(&x);
            let div = model.c.div(&x);
            let gh = h.grad(&x);
            match c.cholesky() {
                Some(ch) => (ch.solve(&div) - &gh).norm() / gh.norm().max(1.0),
                None => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

/// φ̂ = log p + H when c⁻¹ div c = ∇H; λ = (1/8) ∫ ∇φ̂ᵀ c ∇φ̂ p.
pub fn solve_gradient_case(model: &MarketModel, h: Arc<dyn ScalarField>) -> Result<(GeneratingFunction, GrowthReport)> {
    let max_defect = gradient_defect(model, h.as_ref(), 200, 11);
    if !(max_defect <= 1e-6) {
        return Err(Error::NotGradientCase { max_defect });
    }
    let phi: Arc<dyn ScalarField> = Arc::new(LogPPlusH { p: model.p.clone(), h });
    let tol = if model.chart_dim() == 1 { Tol::default() } else { Tol::loose() };
    let lambda = model.domain.full().integrate(
        &|y| {
            let p = model.density(y);
            if p == 0.0 {
                return 0.0;
            }
            let g = model.chart_grad(&phi.grad(&model.domain.embed(y)));
            (g.transpose() * model.chart_cov(y) * &g)[(0, 0)] * p
        },
        tol,
    ) / 8.0;
    let diagnostics = check_assumptions(model, &AssumptionOptions::default())?;
    let mut notes = Vec::new();
    if let Some(e) = violated(&diagnostics) {
        notes.push(format!("assumption check: {e}"));
    }
    let report = GrowthReport {
        model: model.name.clone(),
        classification: Classification::Finite,
        lambda: Some(lambda),
        method: Some(Method::GradientCase),
        diagnostics,
        notes,
    };
    Ok((GeneratingFunction::new(phi, model.domain.is_simplex()), report))
}

/// L^c u / u = ½ tr(c (D² log u + ∇log u ∇log uᵀ)) at a chart point.
pub fn generator_ratio(model: &MarketModel, u: &dyn ScalarField, y: &[f64]) -> f64 {
    let x = model.domain.embed(y);
    let g = model.chart_grad(&u.grad_log(&x));
    let h = model.chart_hess(&u.hess_log(&x));
    0.5 * (model.chart_cov(y) * (h + &g * g.transpose())).trace()
}

/// −∫ (L^c u / u) p, possibly +∞.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateGrowth {
    pub value: f64,
    pub positive: IntegralCheck,
    pub negative: IntegralCheck,
}

pub fn candidate_growth(model: &MarketModel, u: &dyn ScalarField) -> Result<CandidateGrowth> {
    let opts = AssumptionOptions::default();
    let tol = if model.chart_dim() == 1 { opts.tol } else { Tol::loose() };
    let weighted = |y: &[f64]| -> f64 {
        let p = model.density(y);
        if p == 0.0 {
            0.0
        } else {
            generator_ratio(model, u, y) * p
        }
    };
    let pos_levels = model.domain.level_integrals(&|y| weighted(y).max(0.0), tol);
    let neg_levels = model.domain.level_integrals(&|y| (-weighted(y)).max(0.0), tol);
    let pos_verdict = tail_verdict(&pos_levels, &opts.rule)?;
    let neg_verdict = tail_verdict(&neg_levels, &opts.rule)?;
    if pos_verdict == Tail::Diverged {
        return Err(Error::NotInDomainD { positive_part: *pos_levels.last().unwrap_or(&f64::NAN) });
    }
    let value = if neg_verdict == Tail::Diverged {
        f64::INFINITY
    } else if model.chart_dim() == 1 {
        let (lo, hi) = interval_ends(model)?;
        -integrate(|x| weighted(&[x]), lo, hi, tol).value
    } else {
        -model.domain.full().integrate(&weighted, tol)
    };
    Ok(CandidateGrowth {
        value,
        positive: IntegralCheck { holds: pos_verdict == Tail::Converged, verdict: pos_verdict, levels: pos_levels },
        negative: IntegralCheck { holds: neg_verdict == Tail::Converged, verdict: neg_verdict, levels: neg_levels },
    })
}

/// λ from the variational solver on the configured grid.
pub fn solve_variational(model: &MarketModel, solver: &SolverConfig) -> Result<(GeneratingFunction, f64)> {
    let (grid, phi) = variational::solve_on(model, solver.exhaustion_level, solver.cells << solver.grid_level)?;
    let lambda = variational::lambda_from_phi(&phi, model, &grid)?;
    let field = PotentialField { grid: Arc::new(grid), phi: Arc::new(phi), model: model.clone() };
    Ok((GeneratingFunction::new(Arc::new(field), model.domain.is_simplex()), lambda))
}

/// Classifies the robust growth problem with the default solver settings.
pub fn classify(model: &MarketModel) -> GrowthReport {
    classify_with(model, &SolverConfig::default())
}

fn empty_diagnostics(model: &MarketModel, note: String) -> Diagnostics {
    let empty = IntegralCheck { holds: false, verdict: Tail::Unclear, levels: Vec::new() };
    Diagnostics {
        ell_energy: empty.clone(),
        flux_positive: empty,
        non_explosion: crate::model::NonExplosionCheck {
            certification: crate::model::Certification::NotRun,
            holds: None,
            lower: None,
            upper: None,
            exploded_paths: None,
            paths: None,
        },
        mass: model.mass(model.domain.levels() - 1),
        notes: vec![note],
    }
}

/// Decision tree: ill-posed if ∫ 1/(pc) is finite at an endpoint (1-D);
/// infinite if √(pc) has divergent negative generator part (1-D); finite
/// when all assumptions hold, using the most explicit solver available.
pub fn classify_with(model: &MarketModel, solver: &SolverConfig) -> GrowthReport {
    solve(model, solver).0
}

/// Classification together with û whenever λ is finite.
pub fn solve(model: &MarketModel, solver: &SolverConfig) -> (GrowthReport, Option<GeneratingFunction>) {
    let mut notes = Vec::new();
    let diagnostics = match check_assumptions(model, &AssumptionOptions::default()) {
        Ok(d) => d,
        Err(e) => empty_diagnostics(model, format!("assumption check failed: {e}")),
    };
    let report = |classification, lambda, method, notes| GrowthReport {
        model: model.name.clone(),
        classification,
        lambda,
        method,
        diagnostics: diagnostics.clone(),
        notes,
    };
    let one_dim = model.dim() == 1;
    if one_dim && diagnostics.non_explosion.holds == Some(false) {
        notes.push("∫ 1/(pc) is finite at an endpoint: either no admissible model exists or growth is unbounded".into());
        return (report(Classification::IllPosedOrEmpty, None, None, notes), None);
    }
    if one_dim {
        let u = GeneratingFunction::new(Arc::new(LogPc { model: model.clone() }), false).u();
        match candidate_growth(model, u.as_ref()) {
            Ok(c) if c.value == f64::INFINITY => {
                notes.push("the negative part of L^c u/u for u = √(pc) is not integrable".into());
                return (report(Classification::Infinite, None, Some(Method::CandidateBound), notes), None);
            }
            Ok(_) => {}
            Err(e) => notes.push(format!("candidate √(pc): {e}")),
        }
    }
    if diagnostics.all_hold() {
        if one_dim {
            if let Ok((lo, hi)) = interval_ends(model) {
                let lambda = one_dim_lambda(model, lo, hi);
                let gen = GeneratingFunction::new(Arc::new(LogPc { model: model.clone() }), false);
                return (report(Classification::Finite, Some(lambda), Some(Method::ClosedForm1d), notes), Some(gen));
            }
        }
        if let Some(h) = &model.potential {
            let defect = gradient_defect(model, h.as_ref(), 200, 11);
            if defect <= 1e-6 {
                match solve_gradient_case(model, h.clone()) {
                    Ok((gen, r)) => {
                        return (report(Classification::Finite, r.lambda, Some(Method::GradientCase), notes), Some(gen))
                    }
                    Err(e) => notes.push(format!("gradient case: {e}")),
                }
            } else {
                notes.push(format!("potential supplied but gradient defect is {defect:.3e}"));
            }
        }
        match solve_variational(model, solver) {
            Ok((gen, lambda)) => {
                return (report(Classification::Finite, Some(lambda), Some(Method::Variational), notes), Some(gen))
            }
            Err(e) => notes.push(format!("variational solve failed: {e}")),
        }
    }
    notes.push("assumptions not verified; growth may be infinite (unknown)".into());
    (report(Classification::Infinite, None, None, notes), None)
}
