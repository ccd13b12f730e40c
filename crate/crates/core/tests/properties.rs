//! Property tests for the model, solver, simulation and rank invariants.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use robust_growth::analytic::{self, GeneratingFunction};
use robust_growth::model::config;
use robust_growth::model::fields::Scaled;
use robust_growth::model::{CovarianceField, MarketModel, ScalarField, VectorField};
use robust_growth::rank::{self, Theta, ThetaParams};
use robust_growth::simulate::{self, BatchMeans, Scenario};
use robust_growth::variational::{self, DiscretePotential};

fn model(name: &str) -> MarketModel {
    config::load_bundled(name).unwrap()
}

/// Point of E_level at fractions `t` of each axis.
fn point_in(m: &MarketModel, level: usize, t: &[f64]) -> Vec<f64> {
    match m.domain.element(level) {
        robust_growth::model::Element::Bounds(b) => b.iter().zip(t).map(|((lo, hi), s)| lo + s * (hi - lo)).collect(),
        robust_growth::model::Element::SimplexSlice { d, eps } => {
            let side = 1.0 - d as f64 * eps;
            let mut y: Vec<f64> = t.iter().take(d - 1).map(|s| eps + s * side).collect();
            let total: f64 = y.iter().map(|v| v - eps).sum();
            if total > side {
                y.iter_mut().for_each(|v| *v = eps + (*v - eps) * side / total * 0.999);
            }
            y
        }
    }
}

/// ∇log p + C⁻¹ div C from central differences in chart coordinates.
fn ell_by_differences(m: &MarketModel, y: &[f64]) -> DVector<f64> {
    let k = y.len();
    let h = 1e-5;
    let shifted = |i: usize, s: f64| {
        let mut z = y.to_vec();
        z[i] += s * h;
        z
    };
    let grad_log_p = DVector::from_fn(k, |i, _| (m.log_density(&shifted(i, 1.0)) - m.log_density(&shifted(i, -1.0))) / (2.0 * h));
    let div = DVector::from_fn(k, |i, _| {
        (0..k)
            .map(|j| (m.chart_cov(&shifted(j, 1.0))[(i, j)] - m.chart_cov(&shifted(j, -1.0))[(i, j)]) / (2.0 * h))
            .sum::<f64>()
    });
    grad_log_p + m.chart_cov(y).lu().solve(&div).unwrap()
}

struct ScaledPhi {
    s: f64,
    phi: Arc<dyn ScalarField>,
}

impl ScalarField for ScaledPhi {
    fn dim(&self) -> usize {
        self.phi.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.s * self.phi.eval(x)
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        self.phi.grad(x) * self.s
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        self.phi.hess(x) * self.s
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ell_matches_finite_differences(
        which in 0usize..4,
        t in proptest::collection::vec(0.05f64..0.95, 2),
    ) {
        let name = ["cir_a3_b2", "gaussian", "zero_growth", "gradient_2d"][which];
        let m = model(name);
        let y = point_in(&m, 2, &t[..m.chart_dim()]);
        let exact = m.chart_ell(&y).unwrap();
        let approx = ell_by_differences(&m, &y);
        let scale = exact.norm().max(1.0);
        prop_assert!((&exact - &approx).norm() <= 1e-6 * scale, "{name} at {y:?}: {exact} vs {approx}");
    }

    #[test]
    fn simplex_ell_is_tangent(t in 0.02f64..0.98) {
        let m = model("rank_demo");
        let x = vec![t, 1.0 - t];
        let l = m.ell(&x).unwrap();
        prop_assert!(l.sum().abs() <= 1e-10 * l.norm().max(1.0));
    }

    #[test]
    fn candidate_growth_ignores_scale(k in 0.01f64..100.0) {
        let m = model("cir_a3_b2");
        let (gen, _) = analytic::solve_one_dim(&m).unwrap();
        let u = gen.u();
        let base = analytic::candidate_growth(&m, u.as_ref()).unwrap().value;
        let scaled = analytic::candidate_growth(&m, &Scaled { factor: k, field: ExpOf(gen.clone()) }).unwrap().value;
        prop_assert!((base - scaled).abs() <= 1e-10 * base.abs());
    }

    #[test]
    fn theta_factorizations_are_bounded(
        a in 2.0f64..3.0,
        b_frac in 0.51f64..1.0,
        c in 0.0f64..1.0,
        w in proptest::collection::vec(0.01f64..1.0, 3),
    ) {
        let b = a * b_frac;
        prop_assume!(b <= a && a < 2.0 * b);
        let params = ThetaParams::new(a, b, c);
        let theta = Theta::new(params, 3).unwrap();
        let s: f64 = w.iter().sum();
        let x: Vec<f64> = w.iter().map(|v| v / s).collect();
        let div = theta.div(&x);
        let m = theta.eval(&x);
        for (i, (y, z)) in theta.y_factors(&x).iter().zip(theta.z_factors(&x)).enumerate() {
            prop_assert!((div[i] - x[i] * y).abs() <= 1e-12 * div[i].abs().max(1.0));
            prop_assert!(*y >= 0.0 && *y <= 3.0 * (a + c) + 1e-12);
            prop_assert!((m[(i, i)] - x[i] * x[i] * z * z).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&z));
        }
    }

    #[test]
    fn boundary_strategy_is_fully_invested(w in proptest::collection::vec(0.01f64..1.0, 2..5)) {
        let d = w.len();
        let s: f64 = w.iter().sum();
        let x: Vec<f64> = w.iter().map(|v| v / s).collect();
        let field = rank::boundary_strategy(&ThetaParams::new(2.0, 2.0, 0.0), d);
        let theta = field.eval(&x);
        let invested: f64 = theta.iter().zip(&x).map(|(t, v)| t * v).sum();
        prop_assert!((invested - 1.0).abs() <= 1e-12);
    }
}

/// u = exp(φ/2) wrapped so it can be scaled.
struct ExpOf(GeneratingFunction);

impl ScalarField for ExpOf {
    fn dim(&self) -> usize {
        self.0.phi.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.0.u().eval(x)
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        self.0.u().grad(x)
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        self.0.u().hess(x)
    }
    fn log_eval(&self, x: &[f64]) -> f64 {
        self.0.u().log_eval(x)
    }
    fn grad_log(&self, x: &[f64]) -> DVector<f64> {
        self.0.u().grad_log(x)
    }
    fn hess_log(&self, x: &[f64]) -> DMatrix<f64> {
        self.0.u().hess_log(x)
    }
}

#[test]
fn one_dim_candidate_matches_closed_form() {
    for name in ["cir_a3_b2", "gaussian"] {
        let m = model(name);
        let (gen, r) = analytic::solve_one_dim(&m).unwrap();
        let lambda = r.lambda.unwrap();
        let g = analytic::candidate_growth(&m, gen.u().as_ref()).unwrap().value;
        assert!((g - lambda).abs() <= 1e-8 * lambda, "{name}: {g} vs {lambda}");
    }
}

#[test]
fn finite_lambdas_are_nonnegative() {
    for name in config::BUNDLED {
        let r = analytic::classify(&model(name));
        if let Some(l) = r.lambda {
            assert!(l >= 0.0, "{name}: {l}");
        }
    }
}

#[test]
fn lambda_agrees_with_the_energy_split() {
    let m = model("gaussian");
    let (grid, phi) = variational::solve_on(&m, 2, 128).unwrap();
    let e = variational::energy_breakdown(&phi, &m, &grid).unwrap();
    let lambda = variational::lambda_from_phi(&phi, &m, &grid).unwrap();
    assert!((lambda - e.grad_energy / 8.0).abs() <= 1e-12 * lambda);
    let split = (e.ell_energy - e.objective) / 8.0;
    assert!((lambda - split).abs() <= 5.0 * e.h * e.ell_energy / 8.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn discrete_objective_is_minimal(seed in any::<u64>(), size in 1e-4f64..1e-2) {
        use rand::{Rng, SeedableRng};
        let m = model("gradient_2d");
        let (grid, phi) = variational::solve_on(&m, 0, 16).unwrap();
        let base = variational::objective(&phi, &m, &grid).unwrap().j;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = phi.values.iter().map(|v| v + size * (rng.random::<f64>() - 0.5)).collect();
        let moved = DiscretePotential::from_values(&grid, values, 0, 0.0);
        let j = variational::objective(&moved, &m, &grid).unwrap().j;
        prop_assert!(j >= base - 1e-12 * base.abs().max(1.0), "{j} < {base}");
    }

    #[test]
    fn constants_do_not_change_lambda(shift in -10.0f64..10.0) {
        let m = model("gaussian");
        let (grid, phi) = variational::solve_on(&m, 2, 64).unwrap();
        let lambda = variational::lambda_from_phi(&phi, &m, &grid).unwrap();
        let moved = DiscretePotential::from_values(&grid, phi.values.iter().map(|v| v + shift).collect(), 0, 0.0);
        let again = variational::lambda_from_phi(&moved, &m, &grid).unwrap();
        prop_assert!((lambda - again).abs() <= 1e-12 * lambda);
    }
}

#[test]
fn paths_do_not_depend_on_thread_count() {
    let m = model("gradient_2d");
    let cfg = config::load_bundled_config("gradient_2d").unwrap();
    let (_, gen) = analytic::solve(&m, &cfg.solver);
    let mut sim = cfg.simulation.clone();
    sim.horizon = 2.0;
    sim.paths = 5;
    let spec = simulate::scenario_spec(&m, &gen.unwrap(), &Scenario::WorstCase, &sim, 3).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate::simulate(&spec, sim.paths).unwrap())
    };
    let (one, three) = (run(1), run(3));
    for (a, b) in one.paths.iter().zip(&three.paths) {
        assert_eq!(a.states, b.states);
        assert_eq!(a.exit_time, b.exit_time);
    }
}

#[test]
fn scaled_generators_grow_no_faster_under_the_worst_case() {
    let cfg = config::load_bundled_config("cir_a3_b2").unwrap();
    let m = config::build(&cfg).unwrap();
    let (r, gen) = analytic::solve(&m, &cfg.solver);
    let (gen, lambda) = (gen.unwrap(), r.lambda.unwrap());
    let mut sim = cfg.simulation.clone();
    sim.horizon = 200.0;
    sim.paths = 4;
    let spec = simulate::scenario_spec(&m, &gen, &Scenario::WorstCase, &sim, 5).unwrap();
    let bundle = simulate::simulate(&spec, sim.paths).unwrap();
    let batch = BatchMeans::default();
    let optimal = simulate::wealth(&bundle, &gen, &m, &batch);
    assert!(optimal.ci_contains(lambda));
    for s in [0.0, 0.5, 0.8, 1.25, 1.6] {
        let other = GeneratingFunction::new(Arc::new(ScaledPhi { s, phi: gen.phi.clone() }), false);
        let w = simulate::wealth(&bundle, &other, &m, &batch);
        assert!(
            w.batch_mean <= lambda + w.batch_ci,
            "scale {s}: {:.4} ± {:.4} exceeds λ = {lambda:.4}",
            w.batch_mean,
            w.batch_ci
        );
    }
}
