//! Closed-form coefficient fields with analytic derivatives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::fields::{CovarianceField, LogScalarField, ScalarField};

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn v1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

/// c(x) = ξ² x on (0, ∞).
pub struct CirCovariance {
    pub xi: f64,
}

impl CovarianceField for CirCovariance {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        m1(self.xi * self.xi * x[0])
    }
    fn partial(&self, _: &[f64], _: usize) -> DMatrix<f64> {
        m1(self.xi * self.xi)
    }
    fn div_div(&self, _: &[f64]) -> f64 {
        0.0
    }
}

/// Constant matrix.
pub struct ConstantCovariance {
    pub matrix: DMatrix<f64>,
}

impl CovarianceField for ConstantCovariance {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn eval(&self, _: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
    fn partial(&self, _: &[f64], _: usize) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }
    fn div(&self, _: &[f64]) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
    fn div_div(&self, _: &[f64]) -> f64 {
        0.0
    }
}

/// c(x) = s · cosh(x) on the real line.
pub struct CoshCovariance {
    pub scale: f64,
}

impl CovarianceField for CoshCovariance {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        m1(self.scale * x[0].cosh())
    }
    fn partial(&self, x: &[f64], _: usize) -> DMatrix<f64> {
        m1(self.scale * x[0].sinh())
    }
    fn div_div(&self, x: &[f64]) -> f64 {
        self.scale * x[0].cosh()
    }
}

/// c(x) = Σ_k a_k x^k in one dimension.
pub struct PolynomialCovariance {
    pub coeffs: Vec<f64>,
}

impl PolynomialCovariance {
    fn horner(coeffs: &[f64], x: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, a| acc * x + a)
    }
    fn derivative(coeffs: &[f64]) -> Vec<f64> {
        coeffs.iter().enumerate().skip(1).map(|(k, a)| k as f64 * a).collect()
    }
}

impl CovarianceField for PolynomialCovariance {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        m1(Self::horner(&self.coeffs, x[0]))
    }
    fn partial(&self, x: &[f64], _: usize) -> DMatrix<f64> {
        m1(Self::horner(&Self::derivative(&self.coeffs), x[0]))
    }
    fn div_div(&self, x: &[f64]) -> f64 {
        Self::horner(&Self::derivative(&Self::derivative(&self.coeffs)), x[0])
    }
}

/// Gamma(shape A, rate B) density on (0, ∞).
pub struct GammaDensity {
    pub shape: f64,
    pub rate: f64,
}

impl GammaDensity {
    pub fn log_norm(&self) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape)
    }
}

impl LogScalarField for GammaDensity {
    fn dim(&self) -> usize {
        1
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        if x[0] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.log_norm() + (self.shape - 1.0) * x[0].ln() - self.rate * x[0]
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        v1((self.shape - 1.0) / x[0] - self.rate)
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        m1(-(self.shape - 1.0) / (x[0] * x[0]))
    }
}

/// Product of independent normal densities.
pub struct GaussianDensity {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LogScalarField for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - half_log_2pi
            })
            .sum()
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| -(x[i] - self.mean[i]) / (self.std[i] * self.std[i])))
    }
    fn hess_log(&self, _: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.dim(), self.std.iter().map(|s| -1.0 / (s * s))))
    }
}

/// Constant density exp(log_value).
pub struct UniformDensity {
    pub dim: usize,
    pub log_value: f64,
}

impl LogScalarField for UniformDensity {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_eval(&self, _: &[f64]) -> f64 {
        self.log_value
    }
    fn grad_log(&self, _: &[f64]) -> DVector<f64> {
        DVector::zeros(self.dim)
    }
    fn hess_log(&self, _: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }
}

/// p = k / c in one dimension.
pub struct ReciprocalDensity {
    pub c: Arc<dyn CovarianceField>,
    pub log_norm: f64,
}

impl LogScalarField for ReciprocalDensity {
    fn dim(&self) -> usize {
        1
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        self.log_norm - self.c.eval(x)[(0, 0)].ln()
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        v1(-self.c.partial(x, 0)[(0, 0)] / self.c.eval(x)[(0, 0)])
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        let c = self.c.eval(x)[(0, 0)];
        let c1 = self.c.partial(x, 0)[(0, 0)] / c;
        m1(-self.c.div_div(x) / c + c1 * c1)
    }
}

/// ∏_i (x^i)^{a_i} · exp(log_norm).
pub struct PowerDensity {
    pub exponents: Vec<f64>,
    pub log_norm: f64,
}

impl LogScalarField for PowerDensity {
    fn dim(&self) -> usize {
        self.exponents.len()
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        self.log_norm + self.exponents.iter().zip(x).map(|(a, v)| if *a == 0.0 { 0.0 } else { a * v.ln() }).sum::<f64>()
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.exponents.iter().zip(x).map(|(a, v)| a / v))
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.exponents.iter().zip(x).map(|(a, v)| -a / (v * v)),
        ))
    }
}

/// H(x) = s · Σ_i log x^i.
pub struct SumLogPotential {
    pub dim: usize,
    pub scale: f64,
}

impl ScalarField for SumLogPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.scale * x.iter().map(|v| v.ln()).sum::<f64>()
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim, x.iter().map(|v| self.scale / v))
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.dim, x.iter().map(|v| -self.scale / (v * v))))
    }
}

/// H = log c in one dimension; always a valid potential there.
pub struct LogCovariancePotential {
    pub c: Arc<dyn CovarianceField>,
}

impl ScalarField for LogCovariancePotential {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.c.eval(x)[(0, 0)].ln()
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        v1(self.c.partial(x, 0)[(0, 0)] / self.c.eval(x)[(0, 0)])
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let c = self.c.eval(x)[(0, 0)];
        let c1 = self.c.partial(x, 0)[(0, 0)] / c;
        m1(self.c.div_div(x) / c - c1 * c1)
    }
}

/// H = 0.
pub fn zero_potential(dim: usize) -> Arc<dyn ScalarField> {
    Arc::new(super::fields::ConstantScalar { dim, value: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fields::Exp;

    fn fd_check(f: &dyn ScalarField, x: &[f64]) {
        let h = 1e-5;
        let g = f.grad(x);
        let hs = f.hess(x);
        for i in 0..x.len() {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (f.eval(&up) - f.eval(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "grad {i}: {fd} vs {}", g[i]);
            let gu = f.grad(&up);
            let gd = f.grad(&dn);
            for j in 0..x.len() {
                let fd2 = (gu[j] - gd[j]) / (2.0 * h);
                assert!((fd2 - hs[(i, j)]).abs() <= 1e-5 * (1.0 + hs[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn gamma_normalizes_and_differentiates() {
        let g = Exp(GammaDensity { shape: 3.0, rate: 2.0 });
        let mass = crate::quadrature::integrate(|x| g.eval(&[x]), 0.0, f64::INFINITY, Default::default()).value;
        assert!((mass - 1.0).abs() < 1e-10);
        fd_check(&g, &[0.7]);
    }

    #[test]
    fn gaussian_and_power_derivatives() {
        fd_check(&Exp(GaussianDensity { mean: vec![0.1, -0.2], std: vec![1.0, 0.7] }), &[0.3, 0.4]);
        fd_check(&Exp(PowerDensity { exponents: vec![2.0, 1.5, 0.0], log_norm: 0.3 }), &[0.2, 0.3, 0.5]);
        fd_check(&SumLogPotential { dim: 3, scale: 2.0 }, &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn reciprocal_density_of_cosh() {
        let c: Arc<dyn CovarianceField> = Arc::new(CoshCovariance { scale: std::f64::consts::PI });
        let p = Exp(ReciprocalDensity { c: c.clone(), log_norm: 0.0 });
        fd_check(&p, &[0.4]);
        fd_check(&LogCovariancePotential { c }, &[-0.3]);
        let mass = crate::quadrature::integrate(|x| p.eval(&[x]), f64::NEG_INFINITY, f64::INFINITY, Default::default()).value;
        assert!((mass - 1.0).abs() < 1e-10);
    }
}
