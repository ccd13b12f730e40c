//! Euler–Maruyama simulation of the worst-case, reversing and perturbed
//! diffusions, with wealth accounting and occupancy statistics.
//!
//! Every path owns a ChaCha8 stream selected by its index, so results do not
//! depend on the number of worker threads.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analytic::{self, GeneratingFunction};
use crate::error::{Error, Result};
use crate::model::config::{BinsConfig, PerturbationConfig, SimulationConfig};
use crate::model::fields::FnVectorField;
use crate::model::{CovarianceField, Domain, EmpiricalBudget, Element, MarketModel, ScalarField, VectorField};
use crate::quadrature::{integrate, iterated, Tol};

/// Largest allowed |div γ| in the perturbation check.
pub const DIVERGENCE_TOL: f64 = 1e-6;

/// Initial states for the paths of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Starts {
    Fixed(Vec<f64>),
    PerPath(Vec<Vec<f64>>),
}

impl Starts {
    fn get(&self, i: usize) -> &[f64] {
        match self {
            Starts::Fixed(x) => x,
            Starts::PerPath(xs) => &xs[i],
        }
    }
}

/// An SDE dX = b dt + √cov dW in ambient coordinates.
#[derive(Clone)]
pub struct SdeSpec {
    pub drift: Arc<dyn VectorField>,
    pub cov: Arc<dyn CovarianceField>,
    pub starts: Starts,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub domain: Domain,
    /// Leaving this region ends the path and marks it exploded.
    pub guard: Element,
    /// Rescale onto Σx = 1 after every step.
    pub renormalize: bool,
    /// Record every `stride`-th state.
    pub stride: usize,
}

impl SdeSpec {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn alive(&self, x: &[f64]) -> bool {
        if x.iter().any(|v| !v.is_finite()) || !self.guard.contains_ambient(x) {
            return false;
        }
        if self.domain.is_simplex() {
            x.iter().all(|v| *v > 0.0)
        } else {
            self.domain.contains(x)
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.horizon && self.horizon.is_finite()) {
            return Err(Error::config("simulation.dt", "need 0 < dt ≤ horizon < ∞"));
        }
        if self.stride == 0 {
            return Err(Error::config("simulation.stride", "stride must be positive"));
        }
        let d = self.domain.ambient_dim();
        if self.drift.dim() != d || self.cov.dim() != d {
            return Err(Error::config("simulation", format!("drift and covariance must have dimension {d}")));
        }
        if let Starts::PerPath(xs) = &self.starts {
            if xs.len() < n {
                return Err(Error::config("simulation.x0", format!("{} starts for {n} paths", xs.len())));
            }
        }
        for i in 0..n {
            let x = self.starts.get(i);
            if x.len() != d || !self.alive(x) {
                return Err(Error::config("simulation.x0", format!("start {x:?} is not interior to the guard element")));
            }
            if let Starts::Fixed(_) = self.starts {
                break;
            }
        }
        Ok(())
    }
}

/// One trajectory, recorded every `stride` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Path {
    pub index: usize,
    pub dim: usize,
    /// Row-major recorded states; row k is the state at time k·stride·dt.
    pub states: Vec<f64>,
    /// Time of the first step outside the guard, if any.
    pub exit_time: Option<f64>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn exploded(&self) -> bool {
        self.exit_time.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathBundle {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub stride: usize,
    pub paths: Vec<Path>,
}

impl PathBundle {
    pub fn exploded_count(&self) -> usize {
        self.paths.iter().filter(|p| p.exploded()).count()
    }

    /// Spacing of the recorded states.
    pub fn record_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }

    /// Writes `path,t,x0,…` rows, keeping every `every`-th recorded state.
    pub fn write_csv<W: Write>(&self, out: W, every: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.paths.first().map_or(0, |p| p.dim);
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for p in &self.paths {
            for k in (0..p.len()).step_by(every.max(1)) {
                let mut row = vec![p.index.to_string(), (k as f64 * self.record_dt()).to_string()];
                row.extend(p.state(k).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn run_path(spec: &SdeSpec, index: usize) -> Path {
    let mut rng = path_rng(spec.seed, index);
    let mut x = spec.starts.get(index).to_vec();
    let d = x.len();
    let steps = spec.steps();
    let sqrt_dt = spec.dt.sqrt();
    let mut states = Vec::with_capacity((steps / spec.stride + 1) * d);
    states.extend_from_slice(&x);
    let mut exit_time = None;
    let mut z = DVector::zeros(d);
    for k in 0..steps {
        let b = spec.drift.eval(&x);
        let s = spec.cov.sqrt(&x);
        for zi in z.iter_mut() {
            *zi = rng.sample::<f64, _>(StandardNormal);
        }
        let noise = s * &z;
        let mut next: Vec<f64> = (0..d).map(|i| x[i] + b[i] * spec.dt + noise[i] * sqrt_dt).collect();
        if spec.renormalize {
            let sum: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= sum);
        }
        if !spec.alive(&next) {
            exit_time = Some((k + 1) as f64 * spec.dt);
            break;
        }
        x = next;
        if (k + 1) % spec.stride == 0 {
            states.extend_from_slice(&x);
        }
    }
    Path { index, dim: d, states, exit_time }
}

/// Simulates without the all-exploded check.
pub fn simulate_unchecked(spec: &SdeSpec, n_paths: usize) -> Result<PathBundle> {
    spec.validate(n_paths)?;
    let paths: Vec<Path> = (0..n_paths).into_par_iter().map(|i| run_path(spec, i)).collect();
    Ok(PathBundle { seed: spec.seed, dt: spec.dt, horizon: spec.horizon, stride: spec.stride, paths })
}

/// Simulates `n_paths` paths; fails if every path leaves the guard before T/2.
pub fn simulate(spec: &SdeSpec, n_paths: usize) -> Result<PathBundle> {
    let bundle = simulate_unchecked(spec, n_paths)?;
    let half = 0.5 * spec.horizon;
    if n_paths > 0 && bundle.paths.iter().all(|p| p.exit_time.is_some_and(|t| t < half)) {
        return Err(Error::AllPathsExploded { paths: n_paths });
    }
    Ok(bundle)
}

struct WorstCaseDrift {
    model: MarketModel,
    phi: Arc<dyn ScalarField>,
}

impl VectorField for WorstCaseDrift {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn eval(&self, x: &[f64]) -> DVector<f64> {
        let y = self.model.domain.chart(x);
        let g = self.model.chart_grad(&self.phi.grad(x));
        self.model.push_forward(&(self.model.chart_cov(&y) * g * 0.5))
    }
}

/// x ↦ ½ c ∇φ̂, restricted to the tangent space on the simplex.
pub fn worst_case_drift(model: &MarketModel, gen: &GeneratingFunction) -> Arc<dyn VectorField> {
    Arc::new(WorstCaseDrift { model: model.clone(), phi: gen.phi.clone() })
}

fn chart_reversing(model: &MarketModel, y: &[f64]) -> DVector<f64> {
    (model.chart_cov(y) * model.chart_grad_log_p(y) + model.chart_cov_div(y)) * 0.5
}

struct ReversingDrift {
    model: MarketModel,
}

impl VectorField for ReversingDrift {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn eval(&self, x: &[f64]) -> DVector<f64> {
        self.model.push_forward(&chart_reversing(&self.model, &self.model.domain.chart(x)))
    }
}

/// x ↦ ½(c ∇p/p + div c).
pub fn reversing_drift(model: &MarketModel) -> Arc<dyn VectorField> {
    Arc::new(ReversingDrift { model: model.clone() })
}

struct PerturbedDrift {
    model: MarketModel,
    gamma: Arc<dyn VectorField>,
}

impl VectorField for PerturbedDrift {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn eval(&self, x: &[f64]) -> DVector<f64> {
        let y = self.model.domain.chart(x);
        let v = chart_reversing(&self.model, &y) + self.gamma.eval(&y) / self.model.density(&y);
        self.model.push_forward(&v)
    }
}

/// Largest central-difference |div γ| at random points of E_n (chart coordinates).
pub fn max_divergence(model: &MarketModel, gamma: &dyn VectorField, points: usize, seed: u64) -> f64 {
    let level = 2.min(model.domain.levels() - 1);
    let m = model.chart_dim();
    analytic::sample_element(&model.domain.element(level), points, seed)
        .iter()
        .map(|y| {
            (0..m)
                .map(|k| {
                    let h = 1e-5 * y[k].abs().max(1.0);
                    let mut a = y.clone();
                    let mut b = y.clone();
                    a[k] += h;
                    b[k] -= h;
                    (gamma.eval(&a)[k] - gamma.eval(&b)[k]) / (2.0 * h)
                })
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// Reversing drift plus γ/p for a flux γ given in chart coordinates.
pub fn perturbed_drift(model: &MarketModel, gamma: Arc<dyn VectorField>) -> Result<Arc<dyn VectorField>> {
    if gamma.dim() != model.chart_dim() {
        return Err(Error::config("simulation.perturbations", "flux dimension differs from the chart dimension"));
    }
    let max_divergence = max_divergence(model, gamma.as_ref(), 200, 31);
    if !(max_divergence <= DIVERGENCE_TOL) {
        return Err(Error::NotDivergenceFree { max_divergence });
    }
    Ok(Arc::new(PerturbedDrift { model: model.clone(), gamma }))
}

/// The flux γ = (∂₂ψ, −∂₁ψ) of a configured stream function (chart dimension 2).
pub fn perturbation_flux(model: &MarketModel, cfg: &PerturbationConfig) -> Result<Arc<dyn VectorField>> {
    if model.chart_dim() != 2 {
        return Err(Error::config("simulation.perturbations", "perturbations need a two-dimensional chart"));
    }
    let m = model.clone();
    let f: Box<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync> = match *cfg {
        PerturbationConfig::DensityRotation { strength: s } => Box::new(move |y: &[f64]| {
            let g = m.chart_grad_log_p(y);
            DVector::from_vec(vec![g[1], -g[0]]) * (s * m.density(y))
        }),
        PerturbationConfig::DensityShear { strength: s } => Box::new(move |y: &[f64]| {
            let g = m.chart_grad_log_p(y);
            DVector::from_vec(vec![y[0] * g[1], -1.0 - y[0] * g[0]]) * (s * m.density(y))
        }),
    };
    Ok(Arc::new(FnVectorField { dim: 2, f }))
}

fn uniform_in(element: &Element, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        match element {
            Element::Bounds(b) => return b.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect(),
            Element::SimplexSlice { d, eps } => {
                let e: Vec<f64> = (0..*d).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let s: f64 = e.iter().sum();
                if e.iter().all(|v| v / s >= *eps) {
                    return e[..d - 1].iter().map(|v| v / s).collect();
                }
            }
        }
    }
}

/// Draws `n` ambient starts from p: inverse CDF in one dimension, rejection
/// from the smallest exhaustion element holding mass ≥ 1 − 1e-6 otherwise.
pub fn stationary_starts(model: &MarketModel, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let domain = &model.domain;
    let stream = |i: usize| path_rng(seed ^ 0x9e37_79b9_7f4a_7c15, i);
    if model.chart_dim() == 1 {
        let Element::Bounds(b) = domain.largest() else { unreachable!("one-dimensional charts are intervals") };
        let (lo, hi) = b[0];
        let p = |t: f64| model.density(&[t]);
        let total = integrate(p, lo, hi, Tol::default()).value;
        return Ok((0..n)
            .map(|i| {
                let target = stream(i).random::<f64>() * total;
                let (mut a, mut c) = (lo, hi);
                for _ in 0..80 {
                    let mid = 0.5 * (a + c);
                    if integrate(p, lo, mid, Tol::loose()).value < target {
                        a = mid;
                    } else {
                        c = mid;
                    }
                }
                domain.embed(&[0.5 * (a + c)])
            })
            .collect());
    }
    let level = (0..domain.levels()).find(|&k| model.mass(k) >= 1.0 - 1e-6).unwrap_or(domain.levels() - 1);
    let element = domain.element(level);
    let mut probe = stream(usize::MAX >> 1);
    let center = domain.chart(&model.center());
    let log_max = (0..4096)
        .map(|_| uniform_in(&element, &mut probe))
        .chain(std::iter::once(center))
        .map(|y| model.log_density(&y))
        .fold(f64::NEG_INFINITY, f64::max)
        + 0.5f64.ln().abs();
    (0..n)
        .map(|i| {
            let mut rng = stream(i);
            for _ in 0..10_000_000 {
                let y = uniform_in(&element, &mut rng);
                if rng.random::<f64>().ln() < model.log_density(&y) - log_max {
                    return Ok(domain.embed(&y));
                }
            }
            Err(Error::config("simulation.stationary_start", "rejection sampling did not accept a start"))
        })
        .collect()
}

/// Runs the reversing diffusion from the center of E_0 and counts paths
/// leaving the largest exhaustion element: (exploded, paths).
pub fn reversing_explosions(model: &MarketModel, budget: &EmpiricalBudget) -> Result<(usize, usize)> {
    let spec = SdeSpec {
        drift: reversing_drift(model),
        cov: model.effective_cov(),
        starts: Starts::Fixed(model.center()),
        dt: budget.dt,
        horizon: budget.horizon,
        seed: budget.seed,
        domain: model.domain.clone(),
        guard: model.domain.largest(),
        renormalize: model.domain.is_simplex(),
        stride: usize::MAX,
    };
    let bundle = simulate_unchecked(&spec, budget.paths)?;
    Ok((bundle.exploded_count(), budget.paths))
}

/// Burn-in fraction and batch count for batch-means intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMeans {
    pub burn_in: f64,
    pub batches: usize,
    pub confidence: f64,
}

impl Default for BatchMeans {
    fn default() -> Self {
        BatchMeans { burn_in: 0.1, batches: 20, confidence: 0.95 }
    }
}

/// Mean and t-based confidence half-width of a sample.
pub fn mean_ci(values: &[f64], confidence: f64) -> (f64, f64) {
    let n = values.len();
    if n < 2 {
        return (values.first().copied().unwrap_or(f64::NAN), f64::INFINITY);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    (mean, t.inverse_cdf(0.5 + 0.5 * confidence) * (var / n as f64).sqrt())
}

/// Log-wealth of the strategy generated by u along each surviving path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WealthSeries {
    /// Times of the decimated series.
    pub times: Vec<f64>,
    /// Indices of the non-exploded paths used.
    pub path_indices: Vec<usize>,
    /// Σ ϑ'ΔX − ½ Σ ϑ'cϑ dt, one decimated series per path.
    pub log_wealth_ito: Vec<Vec<f64>>,
    /// log u(X_t)/u(X_0) − Σ (L^c u/u) dt, one decimated series per path.
    pub log_wealth_functional: Vec<Vec<f64>>,
    /// Mean over paths of (1/T) log V_T (Itô form).
    pub growth_estimate: f64,
    /// Same with the functional form.
    pub growth_functional: f64,
    /// Mean of the pooled batch growth rates after burn-in.
    pub batch_mean: f64,
    /// Confidence half-width of `batch_mean`.
    pub batch_ci: f64,
    /// Largest terminal |Itô − functional| over paths.
    pub terminal_gap: f64,
}

impl WealthSeries {
    pub fn ci_contains(&self, value: f64) -> bool {
        (self.batch_mean - value).abs() <= self.batch_ci + 1e-12
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "t", "log_wealth_ito", "log_wealth_functional"])?;
        for (j, idx) in self.path_indices.iter().enumerate() {
            for (k, t) in self.times.iter().enumerate() {
                w.write_record([
                    idx.to_string(),
                    t.to_string(),
                    self.log_wealth_ito[j][k].to_string(),
                    self.log_wealth_functional[j][k].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of points kept in the decimated wealth series.
const WEALTH_POINTS: usize = 1000;

/// Both log-wealth forms along a path, at every recorded state.
fn path_wealth(path: &Path, gen: &GeneratingFunction, model: &MarketModel, h: f64) -> (Vec<f64>, Vec<f64>) {
    let u = gen.u();
    let cov = model.effective_cov();
    let n = path.len();
    let mut ito = Vec::with_capacity(n);
    let mut fun = Vec::with_capacity(n);
    let (mut wi, mut drift_sum) = (0.0, 0.0);
    let log_u0 = gen.log_u(path.state(0));
    for k in 0..n {
        let x = path.state(k);
        ito.push(wi);
        fun.push(gen.log_u(x) - log_u0 - drift_sum);
        if k + 1 < n {
            let th = gen.strategy_at(x);
            let dx = DVector::from_iterator(x.len(), path.state(k + 1).iter().zip(x).map(|(b, a)| b - a));
            wi += th.dot(&dx) - 0.5 * (th.transpose() * cov.eval(x) * &th)[(0, 0)] * h;
            drift_sum += analytic::generator_ratio(model, u.as_ref(), &model.domain.chart(x)) * h;
        }
    }
    (ito, fun)
}

/// Log-wealth of ϑ = ∇u/u on the recorded grid of every non-exploded path,
/// with pooled batch means after burn-in.
pub fn wealth(paths: &PathBundle, gen: &GeneratingFunction, model: &MarketModel, batch: &BatchMeans) -> WealthSeries {
    let h = paths.record_dt();
    let alive: Vec<&Path> = paths.paths.iter().filter(|p| !p.exploded()).collect();
    let series: Vec<(Vec<f64>, Vec<f64>)> = alive.par_iter().map(|p| path_wealth(p, gen, model, h)).collect();
    let n = series.first().map_or(0, |s| s.0.len());
    let every = (n / WEALTH_POINTS).max(1);
    let keep: Vec<usize> = (0..n).step_by(every).chain((n > 0 && (n - 1) % every != 0).then(|| n - 1)).collect();
    let times = keep.iter().map(|k| *k as f64 * h).collect();
    let horizon = n.saturating_sub(1) as f64 * h;
    let mut batches = Vec::new();
    let start = (batch.burn_in * n.saturating_sub(1) as f64).ceil() as usize;
    let per = n.saturating_sub(1 + start) / batch.batches.max(1);
    for (ito, _) in &series {
        if per == 0 {
            break;
        }
        for b in 0..batch.batches {
            let (i0, i1) = (start + b * per, start + (b + 1) * per);
            batches.push((ito[i1] - ito[i0]) / (per as f64 * h));
        }
    }
    let (batch_mean, batch_ci) = mean_ci(&batches, batch.confidence);
    let terminal = |pick: fn(&(Vec<f64>, Vec<f64>)) -> f64| {
        series.iter().map(pick).sum::<f64>() / (series.len() as f64 * horizon)
    };
    WealthSeries {
        times,
        path_indices: alive.iter().map(|p| p.index).collect(),
        log_wealth_ito: series.iter().map(|s| keep.iter().map(|k| s.0[*k]).collect()).collect(),
        log_wealth_functional: series.iter().map(|s| keep.iter().map(|k| s.1[*k]).collect()).collect(),
        growth_estimate: terminal(|s| *s.0.last().unwrap_or(&f64::NAN)),
        growth_functional: terminal(|s| *s.1.last().unwrap_or(&f64::NAN)),
        batch_mean,
        batch_ci,
        terminal_gap: series
            .iter()
            .map(|(a, b)| (a.last().unwrap_or(&0.0) - b.last().unwrap_or(&0.0)).abs())
            .fold(0.0, f64::max),
    }
}

/// Time-averaged bin masses on one coordinate versus the mass of p.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OccupancyHistogram {
    pub axis: usize,
    pub edges: Vec<f64>,
    pub empirical: Vec<f64>,
    pub reference: Vec<f64>,
    /// Mass outside [edges[0], edges[last]].
    pub outside_empirical: f64,
    pub outside_reference: f64,
    pub tv_distance: f64,
    pub samples: usize,
}

impl OccupancyHistogram {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin", "lower", "upper", "empirical", "reference"])?;
        for i in 0..self.empirical.len() {
            w.write_record([
                i.to_string(),
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                self.empirical[i].to_string(),
                self.reference[i].to_string(),
            ])?;
        }
        w.write_record([
            "outside".to_string(),
            String::new(),
            String::new(),
            self.outside_empirical.to_string(),
            self.outside_reference.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// ∫ p over the part of the domain where chart coordinate `axis` lies in [lo, hi].
fn slab_mass(model: &MarketModel, axis: usize, lo: f64, hi: f64) -> f64 {
    let full = model.domain.full();
    let bounds = |k: usize, prefix: &[f64]| {
        let (a, b) = full.bounds(k, prefix);
        if k != axis {
            return (a, b);
        }
        let (a, b) = (a.max(lo), b.min(hi));
        if a < b {
            (a, b)
        } else {
            (a, a)
        }
    };
    iterated(&|y: &[f64]| model.density(y), &bounds, model.chart_dim(), Tol::loose())
}

/// Occupancy of the non-exploded paths after the burn-in fraction.
pub fn occupancy(paths: &PathBundle, model: &MarketModel, bins: &BinsConfig, burn_in: f64) -> Result<OccupancyHistogram> {
    if bins.axis >= model.chart_dim() || bins.count == 0 || !(bins.lower < bins.upper) {
        return Err(Error::config("simulation.bins", "need axis < chart dimension, count ≥ 1 and lower < upper"));
    }
    let width = (bins.upper - bins.lower) / bins.count as f64;
    let edges: Vec<f64> = (0..=bins.count).map(|i| bins.lower + i as f64 * width).collect();
    let mut counts = vec![0usize; bins.count];
    let mut outside = 0usize;
    for p in paths.paths.iter().filter(|p| !p.exploded()) {
        let start = (burn_in * (p.len() - 1) as f64).ceil() as usize;
        for k in start..p.len() {
            let v = p.state(k)[bins.axis];
            if v >= bins.lower && v < bins.upper {
                counts[(((v - bins.lower) / width) as usize).min(bins.count - 1)] += 1;
            } else {
                outside += 1;
            }
        }
    }
    let samples = counts.iter().sum::<usize>() + outside;
    let total = samples.max(1) as f64;
    let empirical: Vec<f64> = counts.iter().map(|c| *c as f64 / total).collect();
    let reference: Vec<f64> = edges.windows(2).map(|e| slab_mass(model, bins.axis, e[0], e[1])).collect();
    let outside_reference = (1.0 - reference.iter().sum::<f64>()).max(0.0);
    let outside_empirical = outside as f64 / total;
    let tv_distance = 0.5
        * (empirical.iter().zip(&reference).map(|(e, r)| (e - r).abs()).sum::<f64>()
            + (outside_empirical - outside_reference).abs());
    Ok(OccupancyHistogram { axis: bins.axis, edges, empirical, reference, outside_empirical, outside_reference, tv_distance, samples })
}

/// Which diffusion a scenario simulates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    WorstCase,
    Reversing,
    Perturbed { perturbation: PerturbationConfig },
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::WorstCase => "worst_case".into(),
            Scenario::Reversing => "reversing".into(),
            Scenario::Perturbed { perturbation: PerturbationConfig::DensityRotation { .. } } => "density_rotation".into(),
            Scenario::Perturbed { perturbation: PerturbationConfig::DensityShear { .. } } => "density_shear".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub label: String,
    pub paths: usize,
    pub exploded: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub lambda: f64,
    pub growth_estimate: f64,
    pub growth_functional: f64,
    pub batch_mean: f64,
    pub batch_ci: f64,
    pub lambda_in_ci: bool,
    pub terminal_gap: f64,
    pub occupancy_tv: Option<f64>,
}

pub struct ScenarioResult {
    pub summary: ScenarioSummary,
    pub wealth: WealthSeries,
    pub occupancy: Option<OccupancyHistogram>,
}

/// SDE for a scenario of `model`, guarded by the largest exhaustion element.
pub fn scenario_spec(model: &MarketModel, gen: &GeneratingFunction, scenario: &Scenario, cfg: &SimulationConfig, seed: u64) -> Result<SdeSpec> {
    let drift = match scenario {
        Scenario::WorstCase => worst_case_drift(model, gen),
        Scenario::Reversing => reversing_drift(model),
        Scenario::Perturbed { perturbation } => perturbed_drift(model, perturbation_flux(model, perturbation)?)?,
    };
    let starts = if cfg.stationary_start {
        Starts::PerPath(stationary_starts(model, cfg.paths, seed)?)
    } else {
        Starts::Fixed(cfg.x0.clone().unwrap_or_else(|| model.center()))
    };
    Ok(SdeSpec {
        drift,
        cov: model.effective_cov(),
        starts,
        dt: cfg.dt,
        horizon: cfg.horizon,
        seed,
        domain: model.domain.clone(),
        guard: model.domain.largest(),
        renormalize: model.domain.is_simplex(),
        stride: 1,
    })
}

/// Simulates one scenario and evaluates the strategy of `gen` on it.
pub fn run_scenario(
    model: &MarketModel,
    gen: &GeneratingFunction,
    lambda: f64,
    scenario: Scenario,
    cfg: &SimulationConfig,
    seed: u64,
) -> Result<ScenarioResult> {
    let spec = scenario_spec(model, gen, &scenario, cfg, seed)?;
    let bundle = simulate(&spec, cfg.paths)?;
    let batch = BatchMeans { burn_in: cfg.burn_in, batches: cfg.batches, ..Default::default() };
    let wealth = wealth(&bundle, gen, model, &batch);
    let occupancy = cfg.bins.as_ref().map(|b| occupancy(&bundle, model, b, cfg.burn_in)).transpose()?;
    let summary = ScenarioSummary {
        scenario,
        label: scenario.label(),
        paths: cfg.paths,
        exploded: bundle.exploded_count(),
        dt: cfg.dt,
        horizon: cfg.horizon,
        seed,
        lambda,
        growth_estimate: wealth.growth_estimate,
        growth_functional: wealth.growth_functional,
        batch_mean: wealth.batch_mean,
        batch_ci: wealth.batch_ci,
        lambda_in_ci: wealth.ci_contains(lambda),
        terminal_gap: wealth.terminal_gap,
        occupancy_tv: occupancy.as_ref().map(|o| o.tv_distance),
    };
    Ok(ScenarioResult { summary, wealth, occupancy })
}

/// The worst case followed by every configured perturbation.
pub fn run_scenarios(model: &MarketModel, gen: &GeneratingFunction, lambda: f64, cfg: &SimulationConfig) -> Result<Vec<ScenarioResult>> {
    std::iter::once(Scenario::WorstCase)
        .chain(cfg.perturbations.iter().map(|p| Scenario::Perturbed { perturbation: *p }))
        .enumerate()
        .map(|(i, s)| run_scenario(model, gen, lambda, s, cfg, cfg.seed.wrapping_add(i as u64)))
        .collect()
}
