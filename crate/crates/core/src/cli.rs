//! Command-line front end: loads a config or bundled preset, applies
//! overrides and writes JSON reports and CSV tables to the output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytic::{self, Classification, GeneratingFunction, GrowthReport};
use crate::error::{Error, Result};
use crate::model::config::{self, CovarianceConfig, DensityConfig, ModelConfig};
use crate::model::{Element, MarketModel, VectorField};
use crate::quadrature::{integrate, Tol};
use crate::rank::{self, RankInputs, RankReport, ThetaMarketBudget, ThetaMarketRun, ThetaSuite};
use crate::simulate::{self, Scenario, ScenarioSummary};
use crate::variational::{self, ConvergenceTable, EnergyBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Classify and solve; writes report.json and strategy.csv.
    Solve,
    /// Classify only; writes report.json.
    Classify,
    /// Simulate the worst case and configured perturbations.
    Simulate,
    /// Run the checks that apply to the model and print PASS/FAIL lines.
    Verify,
    /// Rank-based pipeline, θ checks and θ-market simulation.
    RankDemo,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "robust-growth", version, about = "Robust growth-optimal portfolios for ergodic diffusion markets")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Model config (JSON, `schema: 1`).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Bundled preset used when no config is given.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long = "grid-level", global = true, value_name = "N")]
    pub grid_level: Option<usize>,
    #[arg(long, global = true, value_name = "X")]
    pub dt: Option<f64>,
    #[arg(long, global = true, value_name = "T")]
    pub horizon: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

impl RunConfig {
    /// The model config with command-line overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ModelConfig::from_json(&fs::read_to_string(path)?)?,
            (None, Some(name)) => config::load_bundled_config(name)?,
            (None, None) => {
                config::load_bundled_config(if self.command == Command::RankDemo { "rank_demo" } else { "gaussian" })?
            }
        };
        if let Some(seed) = self.seed {
            cfg.simulation.seed = seed;
        }
        if let Some(level) = self.grid_level {
            if level > 8 {
                return Err(Error::config("--grid-level", "must be at most 8"));
            }
            cfg.solver.grid_level = level;
        }
        if let Some(dt) = self.dt {
            cfg.simulation.dt = dt;
        }
        if let Some(t) = self.horizon {
            cfg.simulation.horizon = t;
        }
        if let Some(n) = self.paths {
            cfg.simulation.paths = n;
        }
        let s = &cfg.simulation;
        if !(s.dt > 0.0 && s.dt <= s.horizon && s.horizon.is_finite()) {
            return Err(Error::config("--dt", "need 0 < dt ≤ horizon < ∞"));
        }
        if s.paths == 0 || s.paths > 100_000 {
            return Err(Error::config("--paths", "must lie in 1..=100000"));
        }
        Ok(cfg)
    }
}

/// One PASS/FAIL line of `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: &str, passed: bool, detail: String) -> Self {
        Check { criterion, name: name.into(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("criterion {} {}: {} ({})", self.criterion, self.name, if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub model: String,
    pub seed: u64,
    pub classification: Classification,
    pub lambda: Option<f64>,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub model: String,
    pub lambda: f64,
    pub scenarios: Vec<ScenarioSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankDemoReport {
    pub rank: RankReport,
    pub theta: Option<ThetaSuite>,
    pub theta_market: Option<ThetaMarketRun>,
    /// Max |û(τx) − û(x)| over sampled points and permutations.
    pub invariance_defect: f64,
    /// Max |ϑⁱ − ϑʲ| over sampled points with xⁱ = xʲ.
    pub tie_defect: f64,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Strategy and log û on a regular grid of E_level in chart coordinates.
pub fn write_strategy_csv<W: std::io::Write>(model: &MarketModel, gen: &GeneratingFunction, level: usize, out: W) -> Result<()> {
    let element = model.domain.element(level);
    let m = model.chart_dim();
    let per_axis = if m == 1 { 201 } else { 41 };
    let mut w = csv::Writer::from_writer(out);
    let d = model.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("log_u".into());
    header.extend((0..d).map(|i| format!("theta{i}")));
    w.write_record(&header)?;
    let strategy = gen.strategy();
    let mut idx = vec![0usize; m];
    'outer: loop {
        let mut y = Vec::with_capacity(m);
        let mut inside = true;
        for k in 0..m {
            let (lo, hi) = element.bounds(k, &y);
            if lo >= hi {
                inside = false;
                break;
            }
            y.push(lo + (hi - lo) * idx[k] as f64 / (per_axis - 1) as f64);
        }
        if inside {
            let x = model.domain.embed(&y);
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(gen.log_u(&x).to_string());
            row.extend(strategy.eval(&x).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        for k in (0..m).rev() {
            idx[k] += 1;
            if idx[k] < per_axis {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    w.flush()?;
    Ok(())
}

fn solved(model: &MarketModel, cfg: &ModelConfig) -> Result<(GrowthReport, GeneratingFunction, f64)> {
    let (report, gen) = analytic::solve(model, &cfg.solver);
    match (report.lambda, gen) {
        (Some(l), Some(g)) => Ok((report, g, l)),
        _ => Err(Error::config("model", format!("robust growth is not finite ({:?}); nothing to simulate", report.classification))),
    }
}

/// ⅛ ∫ ℓ² c p over E_level: the exact truncated λ of a one-dimensional model.
pub fn truncated_lambda_1d(model: &MarketModel, level: usize) -> Result<f64> {
    let Element::Bounds(b) = model.domain.element(level) else {
        return Err(Error::config("domain", "a one-dimensional interval domain is required"));
    };
    let (lo, hi) = b[0];
    let f = |x: f64| {
        let y = [x];
        let p = model.density(&y);
        model.chart_ell(&y).map(|l| l[0] * l[0] * model.chart_cov(&y)[(0, 0)] * p / 8.0).unwrap_or(f64::NAN)
    };
    Ok(integrate(f, lo, hi, Tol::default()).value)
}

/// Energy identity on the configured grid.
pub fn energy_check(model: &MarketModel, cfg: &ModelConfig) -> Result<EnergyBreakdown> {
    let s = &cfg.solver;
    let (grid, phi) = variational::solve_on(model, s.exhaustion_level, s.cells << s.grid_level)?;
    variational::energy_breakdown(&phi, model, &grid)
}

fn rank_inputs(cfg: &ModelConfig) -> Result<Option<RankInputs>> {
    let (CovarianceConfig::Ranked { kappa }, DensityConfig::Ranked { q }) = (&cfg.covariance, &cfg.density) else {
        return Ok(None);
    };
    let d = match cfg.domain {
        config::DomainConfig::Simplex { d, .. } => d,
        _ => return Err(Error::config("domain", "ranked inputs need a simplex domain")),
    };
    let inputs = RankInputs::from_specs(d, kappa, q)?;
    Ok(Some(match &cfg.rank {
        Some(r) => rank::modify(&inputs, &r.cutoff, &r.theta)?,
        None => inputs,
    }))
}

fn theta_params(cfg: &ModelConfig) -> Option<(rank::ThetaParams, usize)> {
    let d = match cfg.domain {
        config::DomainConfig::Simplex { d, .. } => d,
        config::DomainConfig::Interval { .. } => 1,
        config::DomainConfig::Box { ref axes, .. } => axes.len(),
    };
    match (&cfg.covariance, &cfg.rank) {
        (CovarianceConfig::Theta { a, b, c }, _) => Some((rank::ThetaParams::new(*a, *b, *c), d)),
        (_, Some(r)) => Some((r.theta, d)),
        _ => None,
    }
}

/// Runs the rank pipeline with its invariance checks and the θ market.
pub fn rank_demo(model: &MarketModel, cfg: &ModelConfig) -> Result<(RankDemoReport, rank::RankOutcome)> {
    let inputs = rank_inputs(cfg)?.ok_or_else(|| Error::config("covariance", "rank-demo needs ranked covariance and density"))?;
    let outcome = rank::rank_pipeline(model, &inputs, &cfg.solver)?;
    let d = inputs.d;
    let gen = &outcome.generating;
    let points = analytic::sample_element(&model.domain.element(cfg.solver.exhaustion_level), 200, cfg.simulation.seed);
    let mut invariance_defect = 0.0f64;
    let mut tie_defect = 0.0f64;
    for y in &points {
        let x = model.domain.embed(y);
        let base = gen.u().eval(&x);
        for shift in 1..d {
            let moved: Vec<f64> = (0..d).map(|i| x[(i + shift) % d]).collect();
            invariance_defect = invariance_defect.max((gen.u().eval(&moved) - base).abs());
        }
        // Tie the two smallest coordinates and compare their weights.
        let (z, _) = rank::order(&x);
        let mut tied = z.clone();
        let mean = 0.5 * (z[0] + z[1]);
        tied[0] = mean;
        tied[1] = mean;
        let th = gen.strategy_at(&tied);
        tie_defect = tie_defect.max((th[0] - th[1]).abs());
    }
    let theta = theta_params(cfg).map(|(p, d)| rank::theta_property_suite(&p, d, 1000, cfg.simulation.seed)).transpose()?;
    let theta_market = theta_params(cfg)
        .map(|(p, d)| rank::simulate_theta_market(&p, d, &ThetaMarketBudget::default()))
        .transpose()?;
    let report = RankDemoReport { rank: outcome.report.clone(), theta, theta_market, invariance_defect, tie_defect };
    Ok((report, outcome))
}

/// Relative difference, absolute when the reference vanishes.
fn rel(a: f64, b: f64) -> f64 {
    if b.abs() > 1e-12 {
        (a - b).abs() / b.abs()
    } else {
        (a - b).abs()
    }
}

/// Runs every check that applies to the model.
pub fn verify(model: &MarketModel, cfg: &ModelConfig, quiet: bool) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        if !quiet {
            println!("{}", c.line());
        }
        checks.push(c);
    };
    let (report, gen) = analytic::solve(model, &cfg.solver);
    let finite = report.classification == Classification::Finite;
    let one_dim = model.chart_dim() == 1 && !model.domain.is_simplex();

    if finite && one_dim {
        let lambda = report.lambda.unwrap_or(f64::NAN);
        if let (CovarianceConfig::Cir { xi }, DensityConfig::Gamma { shape, rate }) = (&cfg.covariance, &cfg.density) {
            let exact = xi * xi * shape * rate / (8.0 * (shape - 1.0));
            let e = rel(lambda, exact);
            push(Check::new(1, "closed form", e <= 1e-6, format!("λ = {lambda:.10}, ξ²AB/(8(A−1)) = {exact:.10}, rel {e:.2e}")));
        } else if let Some(h) = &model.potential {
            let (_, r) = analytic::solve_gradient_case(model, h.clone())?;
            let g = r.lambda.unwrap_or(f64::NAN);
            let e = rel(lambda, g);
            push(Check::new(1, "closed form", e <= 1e-6, format!("√(pc) gives {lambda:.10}, log p + H gives {g:.10}, rel {e:.2e}")));
        }
    }

    if finite {
        let s = &cfg.solver;
        if one_dim {
            let table: ConvergenceTable = variational::refinement_study(model, s.exhaustion_level, s.cells, s.refinements.max(2))?;
            let target = truncated_lambda_1d(model, s.exhaustion_level)?;
            let finest = table.rows.last().map_or(f64::NAN, |r| r.lambda);
            let err = (finest - target).abs();
            let order = table.observed_order.unwrap_or(f64::NAN);
            // An exact discretization has no measurable order.
            let order_ok = table.rows.len() < 3 || order >= 1.5 || err <= 1e-12;
            push(Check::new(
                2,
                "variational vs analytic",
                err <= 1e-3 && order_ok,
                format!("λ_h = {finest:.8}, truncated λ = {target:.8}, |error| {err:.2e}, order {order:.2}"),
            ));
        } else if let (Some(h), false) = (&model.potential, model.domain.is_simplex()) {
            let (_, r) = analytic::solve_gradient_case(model, h.clone())?;
            let (_, lv) = analytic::solve_variational(model, s)?;
            let g = r.lambda.unwrap_or(f64::NAN);
            push(Check::new(2, "variational vs analytic", (lv - g).abs() <= 1e-2, format!("variational {lv:.6}, gradient case {g:.6}")));
        }
    }

    if model.chart_dim() <= 2 {
        let e = energy_check(model, cfg)?;
        push(Check::new(
            3,
            "energy identity",
            e.defect() <= e.bound(),
            format!("defect {:.3e} ≤ 5h·∫ℓ'cℓp = {:.3e}", e.defect(), e.bound()),
        ));
    }

    if let (true, Some(gen), Some(lambda)) = (finite, gen.as_ref(), report.lambda) {
        let sims = simulate::run_scenarios(model, gen, lambda, &cfg.simulation)?;
        for r in &sims {
            let s = &r.summary;
            let detail = format!(
                "{}: batch mean {:.5} ± {:.5}, λ = {:.5}, exploded {}/{}",
                s.label, s.batch_mean, s.batch_ci, lambda, s.exploded, s.paths
            );
            match s.scenario {
                Scenario::WorstCase => {
                    push(Check::new(4, "Monte Carlo growth", s.lambda_in_ci && s.batch_ci <= 0.04, detail));
                    if let Some(tv) = s.occupancy_tv {
                        push(Check::new(6, "occupancy", tv <= 0.05, format!("total variation {tv:.4}")));
                    }
                }
                _ => push(Check::new(5, "robustness", s.lambda_in_ci, detail)),
            }
        }
    }

    let consistent = match report.classification {
        Classification::Finite => report.lambda.is_some_and(|l| l.is_finite() && l >= -1e-9),
        _ => report.lambda.is_none(),
    };
    push(Check::new(
        7,
        "classification",
        consistent,
        format!("{:?}{}", report.classification, report.lambda.map(|l| format!(", λ = {l:.8}")).unwrap_or_default()),
    ));

    if let Some((params, d)) = theta_params(cfg) {
        let s = rank::theta_property_suite(&params, d, 1000, cfg.simulation.seed)?;
        push(Check::new(
            8,
            "θ properties",
            s.equivariance_defect <= 1e-12 && s.eigen_margin >= -1e-12 && s.potential_defect <= 1e-10,
            format!("equivariance {:.1e}, eigen margin {:.2e}, θ∇H − div θ {:.1e}", s.equivariance_defect, s.eigen_margin, s.potential_defect),
        ));
    }

    if rank_inputs(cfg)?.is_some() {
        let (r, _) = rank_demo(model, cfg)?;
        let exploded = r.theta_market.as_ref().map_or(0, |m| m.exploded);
        push(Check::new(
            9,
            "rank pipeline",
            r.rank.relative_gap <= 1e-6 && r.invariance_defect <= 1e-8 && r.tie_defect <= 1e-6 && exploded == 0,
            format!(
                "gap {:.1e}, invariance {:.1e}, ties {:.1e}, θ-market explosions {exploded}",
                r.rank.relative_gap, r.invariance_defect, r.tie_defect
            ),
        ));
    }

    Ok(VerifyReport { model: model.name.clone(), seed: cfg.simulation.seed, classification: report.classification, lambda: report.lambda, checks })
}

/// Executes one command; returns whether every verify check passed.
pub fn run(args: &RunConfig) -> Result<bool> {
    let cfg = args.model_config()?;
    let model = config::build(&cfg)?;
    fs::create_dir_all(&args.out)?;
    let out = args.out.as_path();
    let say = |s: String| {
        if !args.quiet {
            println!("{s}");
        }
    };
    match args.command {
        Command::Classify => {
            let report = analytic::classify_with(&model, &cfg.solver);
            say(format!("{}: {:?} λ = {:?}", report.model, report.classification, report.lambda));
            write_json(out, "report.json", &report)?;
        }
        Command::Solve => {
            let (report, gen) = analytic::solve(&model, &cfg.solver);
            say(format!("{}: {:?} λ = {:?} via {:?}", report.model, report.classification, report.lambda, report.method));
            write_json(out, "report.json", &report)?;
            if let Some(gen) = gen {
                write_strategy_csv(&model, &gen, cfg.solver.exhaustion_level, create(out, "strategy.csv")?)?;
            }
        }
        Command::Simulate => {
            let (_, gen, lambda) = solved(&model, &cfg)?;
            let results = simulate::run_scenarios(&model, &gen, lambda, &cfg.simulation)?;
            for r in &results {
                let label = &r.summary.label;
                say(format!(
                    "{label}: growth {:.5} (batch {:.5} ± {:.5}), λ = {lambda:.5}",
                    r.summary.growth_estimate, r.summary.batch_mean, r.summary.batch_ci
                ));
                r.wealth.write_csv(create(out, &format!("wealth_{label}.csv"))?)?;
                if let Some(h) = &r.occupancy {
                    h.write_csv(create(out, &format!("occupancy_{label}.csv"))?)?;
                }
            }
            let report = SimulationReport { model: model.name.clone(), lambda, scenarios: results.into_iter().map(|r| r.summary).collect() };
            write_json(out, "summary.json", &report)?;
        }
        Command::Verify => {
            let report = verify(&model, &cfg, args.quiet)?;
            write_json(out, "verify.json", &report)?;
            return Ok(report.all_passed());
        }
        Command::RankDemo => {
            let (report, outcome) = rank_demo(&model, &cfg)?;
            say(format!(
                "λ on the simplex {:.8}, on the ordered simplex {:.8} (gap {:.1e})",
                report.rank.lambda_simplex, report.rank.lambda_ranked, report.rank.relative_gap
            ));
            write_json(out, "rank_report.json", &report)?;
            outcome.phi.write_csv(&outcome.grid, create(out, "phi.csv")?)?;
            write_strategy_csv(&model, &outcome.generating, cfg.solver.exhaustion_level, create(out, "strategy.csv")?)?;
        }
    }
    Ok(true)
}

/// Process entry point; maps errors to exit codes 1 (validation) and 2 (numerical).
pub fn main_with(args: RunConfig) -> i32 {
    match run(&args) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn args(cmd: &[&str]) -> RunConfig {
        RunConfig::try_parse_from(std::iter::once("robust-growth").chain(cmd.iter().copied())).unwrap()
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = args(&["simulate", "--preset", "cir_a3_b2", "--dt", "0.01", "--paths", "3", "--seed", "5"]).model_config().unwrap();
        assert_eq!((cfg.simulation.dt, cfg.simulation.paths, cfg.simulation.seed), (0.01, 3, 5));
        let bad = args(&["simulate", "--dt=-1"]).model_config().unwrap_err();
        assert_eq!(bad.exit_code(), 1);
        assert!(bad.to_string().contains("--dt"));
        assert!(args(&["solve", "--preset", "nope"]).model_config().is_err());
    }

    #[test]
    fn classify_writes_a_reparsable_report() {
        let dir = std::env::temp_dir().join(format!("rg-cli-{}", std::process::id()));
        let a = args(&["classify", "--preset", "unit_interval_flat", "--quiet", "--out", dir.to_str().unwrap()]);
        assert!(run(&a).unwrap());
        let text = fs::read_to_string(dir.join("report.json")).unwrap();
        let r: GrowthReport = serde_json::from_str(&text).unwrap();
        assert_eq!(r.classification, Classification::IllPosedOrEmpty);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn strategy_table_covers_the_element() {
        let model = config::gaussian_model().unwrap();
        let (gen, _) = analytic::solve_one_dim(&model).unwrap();
        let mut buf = Vec::new();
        write_strategy_csv(&model, &gen, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 202);
        assert!(text.starts_with("x0,log_u,theta0"));
        let two = config::load_bundled("rank_demo").unwrap();
        let flat = GeneratingFunction::new(Arc::new(rank::flat_potential(2)), true);
        let mut buf = Vec::new();
        write_strategy_csv(&two, &flat, 0, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 202);
    }
}
