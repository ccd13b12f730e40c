use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// A twice differentiable real function on the ambient coordinates.
pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> DVector<f64>;
    fn hess(&self, x: &[f64]) -> DMatrix<f64>;

    /// Declared differentiability order.
    fn smoothness(&self) -> u32 {
        2
    }

    fn log_eval(&self, x: &[f64]) -> f64 {
        self.eval(x).ln()
    }

    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        self.grad(x) / self.eval(x)
    }

    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        let v = self.eval(x);
        let g = self.grad(x) / v;
        self.hess(x) / v - &g * g.transpose()
    }
}

/// A positive field specified through its logarithm. Wrap in [`Exp`] to use
/// it as a [`ScalarField`]; the log-derivatives stay exact far in the tails
/// where the field itself underflows.
pub trait LogScalarField: Send + Sync {
    fn dim(&self) -> usize;
    fn log_eval(&self, x: &[f64]) -> f64;
    fn grad_log(&self, x: &[f64]) -> DVector<f64>;
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64>;
}

pub struct Exp<T>(pub T);

impl<T: LogScalarField> ScalarField for Exp<T> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.0.log_eval(x).exp()
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        self.0.grad_log(x) * self.eval(x)
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let g = self.0.grad_log(x);
        (self.0.hess_log(x) + &g * g.transpose()) * self.eval(x)
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        self.0.log_eval(x)
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        self.0.grad_log(x)
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        self.0.hess_log(x)
    }
}

/// Symmetric matrix field with (div c)^i = Σ_j ∂_j c^{ij}.
pub trait CovarianceField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> DMatrix<f64>;
    /// Entrywise partial derivative ∂_k c.
    fn partial(&self, x: &[f64], k: usize) -> DMatrix<f64>;

    fn div(&self, x: &[f64]) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(d);
        for j in 0..d {
            let pj = self.partial(x, j);
            for i in 0..d {
                out[i] += pj[(i, j)];
            }
        }
        out
    }

    /// Σ_{ij} ∂_{ij} c^{ij}; centered differences of `div` unless overridden.
    fn div_div(&self, x: &[f64]) -> f64 {
        let mut y = x.to_vec();
        let mut total = 0.0;
        for i in 0..self.dim() {
            let h = 1e-5 * x[i].abs().max(1e-2);
            y[i] = x[i] + h;
            let up = self.div(&y)[i];
            y[i] = x[i] - h;
            let dn = self.div(&y)[i];
            y[i] = x[i];
            total += (up - dn) / (2.0 * h);
        }
        total
    }

    fn sqrt(&self, x: &[f64]) -> DMatrix<f64> {
        sym_sqrt(&self.eval(x))
    }
}

pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> DVector<f64>;
}

/// Symmetric positive semidefinite square root; negative eigenvalues from
/// rounding are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    if m.nrows() == 2 {
        // √M = (M + √det I) / √(tr M + 2√det) for 2×2 PSD matrices.
        let s = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).max(0.0).sqrt();
        let t = (m[(0, 0)] + m[(1, 1)] + 2.0 * s).max(0.0).sqrt();
        if t > 0.0 {
            let mut out = m.clone();
            out[(0, 0)] += s;
            out[(1, 1)] += s;
            return out / t;
        }
    }
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 1 {
        return (m[(0, 0)], m[(0, 0)]);
    }
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    (ev.min(), ev.max())
}

/// Constant field.
pub struct ConstantScalar {
    pub dim: usize,
    pub value: f64,
}

impl ScalarField for ConstantScalar {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _: &[f64]) -> f64 {
        self.value
    }
    fn grad(&self, _: &[f64]) -> DVector<f64> {
        DVector::zeros(self.dim)
    }
    fn hess(&self, _: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }
    fn smoothness(&self) -> u32 {
        u32::MAX
    }
}

/// Multiplies a field by a positive constant.
pub struct Scaled<F> {
    pub factor: f64,
    pub field: F,
}

impl<F: ScalarField> ScalarField for Scaled<F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.factor * self.field.eval(x)
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        self.field.grad(x) * self.factor
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        self.field.hess(x) * self.factor
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        self.factor.ln() + self.field.log_eval(x)
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        self.field.grad_log(x)
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        self.field.hess_log(x)
    }
}

/// Vector field given by a closure.
pub struct FnVectorField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> DVector<f64> + Send + Sync> VectorField for FnVectorField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> DVector<f64> {
        (self.f)(x)
    }
}
