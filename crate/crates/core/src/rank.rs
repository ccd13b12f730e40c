//! Rank-based models on the open simplex.
//!
//! Inputs live on the ordered simplex {0 < z₁ ≤ … ≤ z_d} and are extended to
//! the whole simplex by permuting indices by rank. Near the boundary of the
//! ordered region the inputs are blended into the θ-matrix model, which is
//! permutation equivariant, so the extended fields stay smooth across ties.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analytic::GeneratingFunction;
use crate::error::{Error, Result};
use crate::model::config::SolverConfig;
use crate::model::fields::{ConstantScalar, FnVectorField};
use crate::model::presets::{PowerDensity, SumLogPotential};
use crate::model::{CovarianceField, Domain, Exp, LogScalarField, MarketModel, ScalarField, VectorField};
use crate::quadrature::{iterated, Tol};
use crate::simulate::{self, SdeSpec, Starts};
use crate::variational::{self, DiscretePotential, Grid, PotentialField};

/// Distance below which two coordinates count as tied.
pub const TIE_TOL: f64 = 1e-9;

/// Sorts ascending. `perm[k]` is the source index of the k-th smallest
/// coordinate; ties keep their original index order.
pub fn order(x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    (perm.iter().map(|&k| x[k]).collect(), perm)
}

/// `ranks[i]` is the position of coordinate i in the ascending order.
pub fn ranks(perm: &[usize]) -> Vec<usize> {
    let mut r = vec![0; perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        r[i] = k;
    }
    r
}

fn near_tie(sorted: &[f64], tol: f64) -> bool {
    sorted.windows(2).any(|w| w[1] - w[0] <= tol)
}

fn factorial(d: usize) -> f64 {
    (1..=d).product::<usize>() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaParams {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    /// Exponent of the near-boundary generating function (∏ xⁱ)^K.
    #[serde(rename = "K", default)]
    pub k: Option<f64>,
}

impl ThetaParams {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        ThetaParams { a, b, c, k: None }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.c >= 0.0) {
            bad.push(format!("C ≥ 0 fails (C = {})", self.c));
        }
        if !(self.b <= self.a && self.a < 2.0 * self.b) {
            bad.push(format!("B ≤ A < 2B fails (A = {}, B = {})", self.a, self.b));
        }
        if !(self.a + self.c >= 2.0) {
            bad.push(format!("A + C ≥ 2 fails (A + C = {})", self.a + self.c));
        }
        if let Some(k) = self.k {
            if !(k > 0.0 && k * (d as f64) < 1.0) {
                bad.push(format!("0 < K < 1/d fails (K = {k}, d = {d})"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::BadParams(bad))
        }
    }

    /// K, defaulting to min((A + C)/2, 0.9/d).
    pub fn k_value(&self, d: usize) -> f64 {
        self.k.unwrap_or_else(|| (0.5 * (self.a + self.c)).min(0.9 / d as f64))
    }
}

/// The θ matrix:
/// θⁱⁱ = (xⁱ)^A ∏ (xˡ)^C and θⁱʲ = (xⁱ)^B (xʲ)^B ∏ (xˡ)^{A+C−B} for i ≠ j.
///
/// Every entry is a monomial, so ∂_m θⁱʲ = (e_m / x_m) θⁱʲ with e the
/// entry's exponent vector; divergence and its divergence are closed form.
#[derive(Debug, Clone, Copy)]
pub struct Theta {
    pub params: ThetaParams,
    pub d: usize,
}

impl Theta {
    pub fn new(params: ThetaParams, d: usize) -> Result<Theta> {
        params.validate(d)?;
        Ok(Theta { params, d })
    }

    fn exponent(&self, i: usize, j: usize, l: usize) -> f64 {
        let ThetaParams { a, b, c, .. } = self.params;
        if i == j {
            c + if l == i { a } else { 0.0 }
        } else {
            a + c - b + if l == i || l == j { b } else { 0.0 }
        }
    }

    fn entry(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let ThetaParams { a, b, c, .. } = self.params;
        if i == j {
            x[i].powf(a) * x.iter().map(|v| v.powf(c)).product::<f64>()
        } else {
            x[i].powf(b) * x[j].powf(b) * x.iter().map(|v| v.powf(a + c - b)).product::<f64>()
        }
    }

    /// Lower eigenvalue bound k(x) = ∏(xˡ)^C (1 − x̄^{2B−A}) min{1, x_min^A}.
    pub fn k_bound(&self, x: &[f64]) -> f64 {
        let ThetaParams { a, b, c, .. } = self.params;
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        let min = x.iter().cloned().fold(f64::MAX, f64::min);
        x.iter().map(|v| v.powf(c)).product::<f64>() * (1.0 - max.powf(2.0 * b - a)) * min.powf(a).min(1.0)
    }

    /// Yᵢ with (div θ)ⁱ = xⁱ Yᵢ.
    pub fn y_factors(&self, x: &[f64]) -> Vec<f64> {
        let div = self.div(x);
        (0..self.d).map(|i| div[i] / x[i]).collect()
    }

    /// Zᵢ ≥ 0 with θⁱⁱ = (xⁱ Zᵢ)².
    pub fn z_factors(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d).map(|i| self.entry(x, i, i).sqrt() / x[i]).collect()
    }
}

impl CovarianceField for Theta {
    fn dim(&self) -> usize {
        self.d
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.entry(x, i, j))
    }
    fn partial(&self, x: &[f64], m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.entry(x, i, j) * self.exponent(i, j, m) / x[m])
    }
    fn div(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| (0..self.d).map(|j| self.entry(x, i, j) * self.exponent(i, j, j) / x[j]).sum())
    }
    fn div_div(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.d {
            for j in 0..self.d {
                let (ei, ej) = (self.exponent(i, j, i), self.exponent(i, j, j));
                let second = if i == j { ei * (ei - 1.0) } else { ei * ej };
                total += self.entry(x, i, j) * second / (x[i] * x[j]);
            }
        }
        total
    }
}

/// H(x) = (A + C) Σ log xˡ, for which θ⁻¹ div θ = ∇H.
pub fn theta_potential(params: &ThetaParams, d: usize) -> SumLogPotential {
    SumLogPotential { dim: d, scale: params.a + params.c }
}

/// ϑⁱ = K/xⁱ + (1 − K d): the log-gradient of (∏ xⁱ)^K made fully invested.
pub fn boundary_strategy(params: &ThetaParams, d: usize) -> impl VectorField {
    let k = params.k_value(d);
    FnVectorField { dim: d, f: move |x: &[f64]| DVector::from_iterator(d, x.iter().map(|v| k / v + (1.0 - k * d as f64))) }
}

/// Smooth cutoff on the ordered simplex.
///
/// With gaps g₀ = z₁ and gₖ = z_{k+1} − z_k, χ = ∏ S(gₖ/δ) where S is the
/// quintic smoothstep that is 0 below 1/3 and 1 above 1. So χ = 1 when every
/// gap is at least δ and χ = 0 within δ/3 of a tie or of the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSpec {
    pub delta: f64,
}

fn smoothstep(t: f64) -> (f64, f64, f64) {
    let s = (t - 1.0 / 3.0) * 1.5;
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let v = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let d1 = 30.0 * s * s * (1.0 - s) * (1.0 - s) * 1.5;
    let d2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) * 2.25;
    (v, d1, d2)
}

impl CutoffSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.delta > 0.0 && self.delta * (d as f64) < 1.0 {
            Ok(())
        } else {
            Err(Error::config("rank.cutoff.delta", format!("need 0 < delta < 1/d, got {}", self.delta)))
        }
    }

    fn gaps(z: &[f64]) -> Vec<f64> {
        (0..z.len()).map(|k| if k == 0 { z[0] } else { z[k] - z[k - 1] }).collect()
    }

    /// χ, ∇χ and D²χ at an ordered point (derivatives in z).
    pub fn chi_derivatives(&self, z: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = z.len();
        let parts: Vec<(f64, f64, f64)> = Self::gaps(z).iter().map(|g| smoothstep(g / self.delta)).collect();
        let prod_except = |skip: &[usize]| -> f64 {
            parts.iter().enumerate().filter(|(k, _)| !skip.contains(k)).map(|(_, p)| p.0).product()
        };
        let value = prod_except(&[]);
        let inv = 1.0 / self.delta;
        let gg = DVector::from_fn(d, |k, _| parts[k].1 * inv * prod_except(&[k]));
        let hg = DMatrix::from_fn(d, d, |k, l| {
            if k == l {
                parts[k].2 * inv * inv * prod_except(&[k])
            } else {
                parts[k].1 * parts[l].1 * inv * inv * prod_except(&[k, l])
            }
        });
        // g = G z with G lower bidiagonal.
        let g_mat = DMatrix::from_fn(d, d, |k, m| {
            if k == m {
                1.0
            } else if k >= 1 && m == k - 1 {
                -1.0
            } else {
                0.0
            }
        });
        let grad = g_mat.transpose() * gg;
        let hess = g_mat.transpose() * hg * &g_mat;
        (value, grad, hess)
    }

    pub fn chi(&self, z: &[f64]) -> f64 {
        Self::gaps(z).iter().map(|g| smoothstep(g / self.delta).0).product()
    }
}

/// Covariance on the ordered simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KappaSpec {
    /// κ = diag(s_k z_k).
    DiagLinear { scales: Vec<f64> },
    Constant { matrix: Vec<Vec<f64>> },
    Theta {
        #[serde(rename = "A")]
        a: f64,
        #[serde(rename = "B")]
        b: f64,
        #[serde(rename = "C")]
        c: f64,
    },
}

/// Density on the ordered simplex; normalized to unit mass there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QSpec {
    Power { exponents: Vec<f64> },
    Uniform,
}

struct DiagLinear {
    scales: Vec<f64>,
}

impl CovarianceField for DiagLinear {
    fn dim(&self) -> usize {
        self.scales.len()
    }
    fn eval(&self, z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.dim(), self.scales.iter().zip(z).map(|(s, v)| s * v)))
    }
    fn partial(&self, _: &[f64], m: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        out[(m, m)] = self.scales[m];
        out
    }
    fn div_div(&self, _: &[f64]) -> f64 {
        0.0
    }
}

/// ∫ f over the ordered simplex, f taking chart points (first d − 1 coordinates).
pub fn ordered_integral(d: usize, f: &(dyn Fn(&[f64]) -> f64 + Sync), tol: Tol) -> f64 {
    let bounds = |k: usize, prefix: &[f64]| -> (f64, f64) {
        let lo = if k == 0 { 0.0 } else { prefix[k - 1] };
        let used: f64 = prefix.iter().sum();
        (lo, (1.0 - used) / (d - k) as f64)
    };
    iterated(f, &bounds, d - 1, tol)
}

fn embed(y: &[f64]) -> Vec<f64> {
    let mut z = y.to_vec();
    z.push(1.0 - y.iter().sum::<f64>());
    z
}

/// Ordered-simplex inputs (κ, q).
#[derive(Clone)]
pub struct RankInputs {
    pub d: usize,
    pub kappa: Arc<dyn CovarianceField>,
    pub q: Arc<dyn ScalarField>,
    /// Whether the symmetrized fields are C² across rank ties.
    pub tie_smooth: bool,
    /// The θ blend, when one was applied.
    pub blend: Option<(CutoffSpec, ThetaParams)>,
}

impl std::fmt::Debug for RankInputs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RankInputs").field("d", &self.d).field("tie_smooth", &self.tie_smooth).finish_non_exhaustive()
    }
}

fn all_equal(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

impl RankInputs {
    pub fn from_specs(d: usize, kappa: &KappaSpec, q: &QSpec) -> Result<RankInputs> {
        if d < 2 {
            return Err(Error::config("domain.d", "rank inputs need d ≥ 2"));
        }
        let (kappa, kappa_symmetric): (Arc<dyn CovarianceField>, bool) = match kappa {
            KappaSpec::DiagLinear { scales } => {
                if scales.len() != d || scales.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::config("covariance.kappa.scales", format!("expected {d} positive scales")));
                }
                (Arc::new(DiagLinear { scales: scales.clone() }), all_equal(scales))
            }
            KappaSpec::Constant { matrix } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(Error::config("covariance.kappa.matrix", format!("expected a {d}×{d} matrix")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
                let diag: Vec<f64> = (0..d).map(|i| m[(i, i)]).collect();
                let off: Vec<f64> = (0..d).flat_map(|i| (0..d).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
                let sym = all_equal(&diag) && all_equal(&off);
                (Arc::new(crate::model::presets::ConstantCovariance { matrix: m }), sym)
            }
            KappaSpec::Theta { a, b, c } => (Arc::new(Theta::new(ThetaParams::new(*a, *b, *c), d)?), true),
        };
        let (log_q, q_symmetric): (Box<dyn LogScalarField>, bool) = match q {
            QSpec::Power { exponents } => {
                if exponents.len() != d {
                    return Err(Error::config("density.q.exponents", format!("expected {d} exponents")));
                }
                (Box::new(PowerDensity { exponents: exponents.clone(), log_norm: 0.0 }), all_equal(exponents))
            }
            QSpec::Uniform => (Box::new(crate::model::presets::UniformDensity { dim: d, log_value: 0.0 }), true),
        };
        let mass = ordered_integral(d, &|y| log_q.log_eval(&embed(y)).exp(), Tol::default());
        let q: Arc<dyn ScalarField> = match q {
            QSpec::Power { exponents } => Arc::new(Exp(PowerDensity { exponents: exponents.clone(), log_norm: -mass.ln() })),
            QSpec::Uniform => Arc::new(Exp(crate::model::presets::UniformDensity { dim: d, log_value: -mass.ln() })),
        };
        Ok(RankInputs { d, kappa, q, tie_smooth: kappa_symmetric && q_symmetric, blend: None })
    }

    /// ∫ q over the ordered simplex.
    pub fn mass(&self) -> f64 {
        ordered_integral(self.d, &|y| self.q.eval(&embed(y)), Tol::default())
    }
}

/// χ κ + (1 − χ) θ.
struct BlendedKappa {
    kappa: Arc<dyn CovarianceField>,
    theta: Theta,
    cutoff: CutoffSpec,
}

impl CovarianceField for BlendedKappa {
    fn dim(&self) -> usize {
        self.theta.d
    }
    fn eval(&self, z: &[f64]) -> DMatrix<f64> {
        let chi = self.cutoff.chi(z);
        if chi == 1.0 {
            self.kappa.eval(z)
        } else if chi == 0.0 {
            self.theta.eval(z)
        } else {
            self.kappa.eval(z) * chi + self.theta.eval(z) * (1.0 - chi)
        }
    }
    fn partial(&self, z: &[f64], m: usize) -> DMatrix<f64> {
        let (chi, grad, _) = self.cutoff.chi_derivatives(z);
        if chi == 1.0 && grad[m] == 0.0 {
            return self.kappa.partial(z, m);
        }
        if chi == 0.0 && grad[m] == 0.0 {
            return self.theta.partial(z, m);
        }
        (self.kappa.eval(z) - self.theta.eval(z)) * grad[m]
            + self.kappa.partial(z, m) * chi
            + self.theta.partial(z, m) * (1.0 - chi)
    }
}

/// χ q + (1 − χ) k with k fixed by unit mass.
struct BlendedQ {
    q: Arc<dyn ScalarField>,
    level: f64,
    cutoff: CutoffSpec,
}

impl ScalarField for BlendedQ {
    fn dim(&self) -> usize {
        self.q.dim()
    }
    fn eval(&self, z: &[f64]) -> f64 {
        let chi = self.cutoff.chi(z);
        if chi == 1.0 {
            self.q.eval(z)
        } else if chi == 0.0 {
            self.level
        } else {
            chi * self.q.eval(z) + (1.0 - chi) * self.level
        }
    }
    fn grad(&self, z: &[f64]) -> DVector<f64> {
        let (chi, gc, _) = self.cutoff.chi_derivatives(z);
        if chi == 0.0 && gc.iter().all(|v| *v == 0.0) {
            return DVector::zeros(z.len());
        }
        gc * (self.q.eval(z) - self.level) + self.q.grad(z) * chi
    }
    fn hess(&self, z: &[f64]) -> DMatrix<f64> {
        let (chi, gc, hc) = self.cutoff.chi_derivatives(z);
        if chi == 0.0 && gc.iter().all(|v| *v == 0.0) {
            return DMatrix::zeros(z.len(), z.len());
        }
        let gq = self.q.grad(z);
        hc * (self.q.eval(z) - self.level) + &gc * gq.transpose() + &gq * gc.transpose() + self.q.hess(z) * chi
    }
}

/// Blends the inputs into the θ model near the boundary of the ordered
/// simplex. Where χ = 1 the original fields are returned unchanged.
pub fn modify(inputs: &RankInputs, cutoff: &CutoffSpec, params: &ThetaParams) -> Result<RankInputs> {
    let d = inputs.d;
    cutoff.validate(d)?;
    let theta = Theta::new(*params, d)?;
    let tol = Tol::default();
    let chi_q = ordered_integral(d, &|y| {
        let z = embed(y);
        cutoff.chi(&z) * inputs.q.eval(&z)
    }, tol);
    let rest = ordered_integral(d, &|y| 1.0 - cutoff.chi(&embed(y)), tol);
    let level = (1.0 - chi_q) / rest;
    if !(level > 0.0) {
        return Err(Error::config("rank.cutoff", format!("blended density level {level} is not positive")));
    }
    Ok(RankInputs {
        d,
        kappa: Arc::new(BlendedKappa { kappa: inputs.kappa.clone(), theta, cutoff: *cutoff }),
        q: Arc::new(BlendedQ { q: inputs.q.clone(), level, cutoff: *cutoff }),
        tie_smooth: true,
        blend: Some((*cutoff, *params)),
    })
}

/// cⁱʲ(x) = κ^{r(i) r(j)}(x₍₎).
pub struct SymmetrizedCovariance {
    kappa: Arc<dyn CovarianceField>,
    d: usize,
    tie_smooth: bool,
}

fn permute_matrix(m: &DMatrix<f64>, r: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(r.len(), r.len(), |i, j| m[(r[i], r[j])])
}

impl SymmetrizedCovariance {
    /// ∂_m c, refusing to differentiate across a tie when the inputs are
    /// not smooth there.
    pub fn checked_partial(&self, x: &[f64], m: usize) -> Result<DMatrix<f64>> {
        let (z, perm) = order(x);
        if !self.tie_smooth && near_tie(&z, TIE_TOL) {
            return Err(Error::TieDerivative { point: x.to_vec() });
        }
        let r = ranks(&perm);
        Ok(permute_matrix(&self.kappa.partial(&z, r[m]), &r))
    }
}

impl CovarianceField for SymmetrizedCovariance {
    fn dim(&self) -> usize {
        self.d
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let (z, perm) = order(x);
        permute_matrix(&self.kappa.eval(&z), &ranks(&perm))
    }
    /// NaN where `checked_partial` would fail.
    fn partial(&self, x: &[f64], m: usize) -> DMatrix<f64> {
        self.checked_partial(x, m).unwrap_or_else(|_| DMatrix::from_element(self.d, self.d, f64::NAN))
    }
}

/// p(x) = q(x₍₎) / d!.
pub struct SymmetrizedDensity {
    q: Arc<dyn ScalarField>,
    d: usize,
    log_factorial: f64,
}

impl LogScalarField for SymmetrizedDensity {
    fn dim(&self) -> usize {
        self.d
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| *v <= 0.0) {
            return f64::NEG_INFINITY;
        }
        self.q.log_eval(&order(x).0) - self.log_factorial
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        let (z, perm) = order(x);
        let r = ranks(&perm);
        let g = self.q.grad_log(&z);
        DVector::from_fn(self.d, |i, _| g[r[i]])
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        let (z, perm) = order(x);
        permute_matrix(&self.q.hess_log(&z), &ranks(&perm))
    }
}

/// The model on the simplex induced by ordered-simplex inputs.
pub fn symmetrize(inputs: &RankInputs, name: &str, domain: Domain, mass_tolerance: f64) -> Result<MarketModel> {
    if domain.ambient_dim() != inputs.d || !domain.is_simplex() {
        return Err(Error::config("domain", format!("rank inputs need the simplex of dimension {}", inputs.d)));
    }
    let c = SymmetrizedCovariance { kappa: inputs.kappa.clone(), d: inputs.d, tie_smooth: inputs.tie_smooth };
    let p = SymmetrizedDensity { q: inputs.q.clone(), d: inputs.d, log_factorial: factorial(inputs.d).ln() };
    MarketModel::new(name, domain, Arc::new(c), Arc::new(Exp(p)), mass_tolerance)
}

/// A potential on the simplex evaluated at the ordered point, so that it is
/// exactly permutation invariant.
pub struct OrderedPotential {
    pub inner: Arc<dyn ScalarField>,
}

impl ScalarField for OrderedPotential {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.inner.eval(&order(x).0)
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        let (z, perm) = order(x);
        let r = ranks(&perm);
        let g = self.inner.grad(&z);
        DVector::from_fn(x.len(), |i, _| g[r[i]])
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let (z, perm) = order(x);
        permute_matrix(&self.inner.hess(&z), &ranks(&perm))
    }
    fn smoothness(&self) -> u32 {
        self.inner.smoothness()
    }
}

/// Weight of a cell in the ordered-region sum: 0 outside the closed ordered
/// region, 1/∏(tie multiplicity)! on its facets, 1 inside.
fn ordered_weight(x: &[f64]) -> f64 {
    let tol = 1e-12;
    if x.windows(2).any(|w| w[0] > w[1] + tol) {
        return 0.0;
    }
    let mut weight = 1.0;
    let mut run = 1;
    for w in x.windows(2) {
        if (w[1] - w[0]).abs() <= tol {
            run += 1;
        } else {
            weight /= factorial(run);
            run = 1;
        }
    }
    weight / factorial(run)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub name: String,
    /// λ as the integral over the whole simplex.
    pub lambda_simplex: f64,
    /// λ as d! times the integral over the ordered simplex.
    pub lambda_ranked: f64,
    pub relative_gap: f64,
    pub theta_params: Option<ThetaParams>,
    pub cutoff: Option<CutoffSpec>,
    pub k: Option<f64>,
    /// Max |φ − φ∘τ| of the raw solve before averaging over permutations.
    pub equivariance_defect: f64,
    pub cells_per_axis: usize,
    pub iterations: usize,
}

pub struct RankOutcome {
    pub model: MarketModel,
    pub grid: Arc<Grid>,
    pub phi: Arc<DiscretePotential>,
    pub generating: GeneratingFunction,
    pub report: RankReport,
}

/// Solves the rank model on the simplex, averages φ over permutations and
/// reports λ both over Δ⁺ and over the ordered simplex.
pub fn rank_pipeline(model: &MarketModel, inputs: &RankInputs, solver: &SolverConfig) -> Result<RankOutcome> {
    let d = inputs.d;
    let grid = Grid::new(model, solver.exhaustion_level, solver.cells << solver.grid_level)?;
    let system = variational::assemble(&grid, model)?;
    let raw = variational::solve_phi(&grid, &system, 1e-12, 20 * grid.node_count() + 100)?;
    let phi = raw.symmetrized(&grid);
    let equivariance_defect = grid
        .node_permutations()
        .map(|perms| {
            perms
                .iter()
                .flat_map(|map| (0..grid.node_count()).map(|i| (raw.values[map[i]] - raw.values[i]).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);
    let energies = variational::cell_energies(&phi, &grid, &system.coefficients);
    let lambda_simplex = energies.iter().sum::<f64>() / 8.0;
    let ordered: f64 = grid
        .cells
        .iter()
        .zip(&energies)
        .map(|(cell, e)| ordered_weight(&model.domain.embed(&cell.centroid)) * e)
        .sum();
    let lambda_ranked = factorial(d) * ordered / 8.0;
    let grid = Arc::new(grid);
    let phi = Arc::new(phi);
    let field = PotentialField { grid: grid.clone(), phi: phi.clone(), model: model.clone() };
    let generating = GeneratingFunction::new(Arc::new(OrderedPotential { inner: Arc::new(field) }), true);
    let (cutoff, theta_params) = match inputs.blend {
        Some((c, t)) => (Some(c), Some(t)),
        None => (None, None),
    };
    let report = RankReport {
        name: model.name.clone(),
        lambda_simplex,
        lambda_ranked,
        relative_gap: (lambda_simplex - lambda_ranked).abs() / lambda_simplex.abs().max(1e-300),
        theta_params,
        cutoff,
        k: theta_params.map(|t| t.k_value(d)),
        equivariance_defect,
        cells_per_axis: grid.n,
        iterations: phi.iterations,
    };
    Ok(RankOutcome { model: model.clone(), grid, phi, generating, report })
}

/// Simulation budget for the θ market.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThetaMarketBudget {
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for ThetaMarketBudget {
    fn default() -> Self {
        ThetaMarketBudget { paths: 8, horizon: 200.0, dt: 1e-3, seed: 17 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaMarketRun {
    pub paths: usize,
    pub exploded: usize,
    /// Smallest coordinate seen on the recorded states.
    pub min_coordinate: f64,
}

/// Simulates dX = ½ div θ dt + √θ dW from the barycenter, renormalizing onto
/// the simplex after each step, and counts paths that leave Δ⁺.
pub fn simulate_theta_market(params: &ThetaParams, d: usize, budget: &ThetaMarketBudget) -> Result<ThetaMarketRun> {
    let theta = Theta::new(*params, d)?;
    let drift = FnVectorField { dim: d, f: move |x: &[f64]| theta.div(x) * 0.5 };
    let domain = Domain::new(crate::model::DomainKind::Simplex { d }, Default::default())?;
    let spec = SdeSpec {
        drift: Arc::new(drift),
        cov: Arc::new(theta),
        starts: Starts::Fixed(vec![1.0 / d as f64; d]),
        dt: budget.dt,
        horizon: budget.horizon,
        seed: budget.seed,
        guard: domain.full(),
        domain,
        renormalize: true,
        stride: 100,
    };
    let bundle = simulate::simulate_unchecked(&spec, budget.paths)?;
    let min_coordinate = bundle
        .paths
        .iter()
        .flat_map(|p| p.states.iter().copied())
        .fold(f64::INFINITY, f64::min);
    Ok(ThetaMarketRun { paths: budget.paths, exploded: bundle.exploded_count(), min_coordinate })
}

/// Worst violations of the θ properties over random simplex points.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThetaSuite {
    pub points: usize,
    /// Max |θ(τx) − τθ(x)τᵀ| over random permutations τ.
    pub equivariance_defect: f64,
    /// Min of λ_min(θ(x)) − k(x), relative to max(1, |k(x)|).
    pub eigen_margin: f64,
    /// Max |θ∇H − div θ| relative to max(1, |div θ|).
    pub potential_defect: f64,
}

/// Checks permutation equivariance, the eigenvalue bound k and θ∇H = div θ.
pub fn theta_property_suite(params: &ThetaParams, d: usize, points: usize, seed: u64) -> Result<ThetaSuite> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let theta = Theta::new(*params, d)?;
    let h = theta_potential(params, d);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut suite = ThetaSuite { points, equivariance_defect: 0.0, eigen_margin: f64::INFINITY, potential_defect: 0.0 };
    for _ in 0..points {
        let e: Vec<f64> = (0..d).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = e.iter().sum();
        let x: Vec<f64> = e.iter().map(|v| v / s).collect();
        let m = theta.eval(&x);
        let mut tau: Vec<usize> = (0..d).collect();
        tau.shuffle(&mut rng);
        let moved: Vec<f64> = tau.iter().map(|&i| x[i]).collect();
        let mt = theta.eval(&moved);
        for i in 0..d {
            for j in 0..d {
                suite.equivariance_defect = suite.equivariance_defect.max((mt[(i, j)] - m[(tau[i], tau[j])]).abs());
            }
        }
        let k = theta.k_bound(&x);
        let low = m.clone().symmetric_eigen().eigenvalues.min();
        suite.eigen_margin = suite.eigen_margin.min((low - k) / k.abs().max(1.0));
        let div = theta.div(&x);
        let defect = (&m * h.grad(&x) - &div).abs().max() / div.abs().max().max(1.0);
        suite.potential_defect = suite.potential_defect.max(defect);
    }
    Ok(suite)
}

/// Constant potential on the simplex (û ≡ 1).
pub fn flat_potential(d: usize) -> ConstantScalar {
    ConstantScalar { dim: d, value: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..d).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn order_examples() {
        assert_eq!(order(&[0.5, 0.2, 0.3]), (vec![0.2, 0.3, 0.5], vec![1, 2, 0]));
        assert_eq!(order(&[0.5, 0.5]).1, vec![0, 1]);
        assert_eq!(order(&[0.1, 0.2, 0.7]).1, vec![0, 1, 2]);
        assert_eq!(ranks(&[1, 2, 0]), vec![2, 0, 1]);
    }

    #[test]
    fn theta_hand_values() {
        let t = Theta::new(ThetaParams::new(2.0, 2.0, 0.0), 2).unwrap();
        let x = [0.5, 0.5];
        let m = t.eval(&x);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.25, 0.0625, 0.0625, 0.25]));
        assert_eq!(t.div(&x), DVector::from_vec(vec![1.25, 1.25]));
        assert_eq!(t.k_bound(&x), 0.1875);
        let grad_h = theta_potential(&t.params, 2).grad(&x);
        assert_eq!(grad_h, DVector::from_vec(vec![4.0, 4.0]));
        let h3 = theta_potential(&ThetaParams::new(2.0, 2.0, 0.0), 3).eval(&[1.0 / 3.0; 3]);
        assert!((h3 + 6.591673732008658).abs() < 1e-12);
    }

    #[test]
    fn theta_bad_params_are_listed() {
        let Err(Error::BadParams(list)) = Theta::new(ThetaParams::new(1.0, 2.0, -1.0), 2) else { panic!() };
        assert_eq!(list.len(), 3);
    }

    #[test]
    fn theta_derivatives_match_finite_differences() {
        let t = Theta::new(ThetaParams { a: 2.5, b: 1.5, c: 0.5, k: None }, 3).unwrap();
        let x = [0.2, 0.3, 0.5];
        let h = 1e-6;
        for m in 0..3 {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[m] += h;
            dn[m] -= h;
            let fd = (t.eval(&up) - t.eval(&dn)) / (2.0 * h);
            assert!((fd - t.partial(&x, m)).amax() < 1e-7);
        }
        let fd_div: f64 = (0..3)
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (t.div(&up)[i] - t.div(&dn)[i]) / (2.0 * h)
            })
            .sum();
        assert!((fd_div - t.div_div(&x)).abs() < 1e-5 * t.div_div(&x).abs().max(1.0));
    }

    #[test]
    fn cutoff_profile_and_derivatives() {
        let c = CutoffSpec { delta: 0.06 };
        assert_eq!(c.chi(&[0.3, 0.7]), 1.0);
        assert_eq!(c.chi(&[0.01, 0.99]), 0.0);
        assert_eq!(c.chi(&[0.495, 0.505]), 0.0);
        let z = [0.25, 0.29, 0.46];
        let (v, g, hs) = c.chi_derivatives(&z);
        assert!(v > 0.0 && v < 1.0);
        let h = 1e-6;
        for m in 0..3 {
            let mut up = z.to_vec();
            let mut dn = z.to_vec();
            up[m] += h;
            dn[m] -= h;
            assert!(((c.chi(&up) - c.chi(&dn)) / (2.0 * h) - g[m]).abs() < 1e-6);
            let dg = (c.chi_derivatives(&up).1 - c.chi_derivatives(&dn).1) / (2.0 * h);
            for l in 0..3 {
                assert!((dg[l] - hs[(m, l)]).abs() < 1e-4 * (1.0 + hs[(m, l)].abs()));
            }
        }
    }

    #[test]
    fn boundary_strategy_example() {
        let s = boundary_strategy(&ThetaParams { a: 2.0, b: 2.0, c: 0.0, k: Some(0.1) }, 2);
        let v = s.eval(&[0.2, 0.8]);
        assert!((v[0] - 1.3).abs() < 1e-14 && (v[1] - 0.925).abs() < 1e-14);
        assert!((0.2 * v[0] + 0.8 * v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn default_k() {
        assert_eq!(ThetaParams::new(2.0, 2.0, 0.0).k_value(2), 0.45);
        assert_eq!(ThetaParams::new(2.0, 2.0, 0.0).k_value(3), 0.3);
    }

    #[test]
    fn uniform_q_symmetrizes_to_constant_p() {
        let inputs = RankInputs::from_specs(2, &KappaSpec::DiagLinear { scales: vec![1.0, 1.0] }, &QSpec::Uniform).unwrap();
        assert!((inputs.mass() - 1.0).abs() < 1e-10);
        let domain = Domain::new(crate::model::DomainKind::Simplex { d: 2 }, Default::default()).unwrap();
        let m = symmetrize(&inputs, "flat", domain, 1e-3).unwrap();
        assert!((m.p.eval(&[0.3, 0.7]) - 1.0).abs() < 1e-10);
        assert!((m.p.eval(&[0.9, 0.1]) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn modified_inputs_keep_originals_on_v() {
        let cfg = config::load_bundled_config("rank_demo").unwrap();
        let (config::CovarianceConfig::Ranked { kappa }, config::DensityConfig::Ranked { q }) = (&cfg.covariance, &cfg.density) else {
            panic!()
        };
        let raw = RankInputs::from_specs(2, kappa, q).unwrap();
        let r = cfg.rank.unwrap();
        let m = modify(&raw, &r.cutoff, &r.theta).unwrap();
        let z = [0.3, 0.7];
        assert_eq!(m.kappa.eval(&z), raw.kappa.eval(&z));
        assert_eq!(m.q.eval(&z), raw.q.eval(&z));
        let edge = [0.01, 0.99];
        assert_eq!(m.kappa.eval(&edge), Theta::new(r.theta, 2).unwrap().eval(&edge));
        assert!((m.mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetrized_fields_are_equivariant() {
        let m = config::load_bundled("rank_demo").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = random_simplex(&mut rng, 2);
            let swapped = [x[1], x[0]];
            let c = m.c.eval(&x);
            let cs = m.c.eval(&swapped);
            assert_eq!(c[(0, 0)], cs[(1, 1)]);
            assert_eq!(c[(0, 1)], cs[(1, 0)]);
            assert_eq!(m.p.eval(&x), m.p.eval(&swapped));
        }
    }

    #[test]
    fn tie_derivatives_need_smooth_inputs() {
        let inputs = RankInputs::from_specs(2, &KappaSpec::DiagLinear { scales: vec![1.0, 0.5] }, &QSpec::Uniform).unwrap();
        let c = SymmetrizedCovariance { kappa: inputs.kappa.clone(), d: 2, tie_smooth: inputs.tie_smooth };
        assert!(matches!(c.checked_partial(&[0.5, 0.5], 0), Err(Error::TieDerivative { .. })));
        assert!(c.checked_partial(&[0.4, 0.6], 0).is_ok());
    }

    #[test]
    fn theta_properties_hold_at_random_points() {
        for (params, d) in [(ThetaParams::new(2.0, 2.0, 0.0), 2), (ThetaParams::new(2.5, 1.5, 0.5), 3), (ThetaParams::new(3.0, 2.0, 0.0), 4)] {
            let s = theta_property_suite(&params, d, 1000, 9).unwrap();
            assert!(s.equivariance_defect <= 1e-12, "{s:?}");
            assert!(s.eigen_margin >= -1e-12, "{s:?}");
            assert!(s.potential_defect <= 1e-10, "{s:?}");
        }
    }

    #[test]
    fn ordered_weights() {
        assert_eq!(ordered_weight(&[0.2, 0.8]), 1.0);
        assert_eq!(ordered_weight(&[0.8, 0.2]), 0.0);
        assert_eq!(ordered_weight(&[0.5, 0.5]), 0.5);
        assert_eq!(ordered_weight(&[0.2, 0.4, 0.4]), 0.5);
        assert_eq!(ordered_weight(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), 1.0 / 6.0);
    }

    #[test]
    fn pure_theta_solve_matches_one_dim_closed_form() {
        // On the d = 2 simplex the chart is one-dimensional, so φ̂ = log(p C)
        // with C the chart covariance.
        let inputs = RankInputs::from_specs(2, &KappaSpec::Theta { a: 2.0, b: 2.0, c: 0.0 }, &QSpec::Uniform).unwrap();
        let domain = Domain::new(crate::model::DomainKind::Simplex { d: 2 }, crate::model::Exhaustion { margin0: 0.1, radius0: 1.0, levels: 12 }).unwrap();
        let model = symmetrize(&inputs, "pure_theta", domain, 1e-3).unwrap();
        let solver = SolverConfig { exhaustion_level: 3, cells: 400, grid_level: 0, refinements: 2 };
        let out = rank_pipeline(&model, &inputs, &solver).unwrap();
        let exact: Vec<f64> = out.grid.nodes.iter().map(|y| model.log_density(y) + model.chart_cov(y)[(0, 0)].ln()).collect();
        let mean = exact.iter().sum::<f64>() / exact.len() as f64;
        let err = exact.iter().zip(&out.phi.values).map(|(e, v)| (e - mean - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
        assert!(out.report.relative_gap < 1e-6);
    }
}
