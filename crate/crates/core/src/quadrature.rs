//! Adaptive Gauss–Kronrod quadrature, iterated integration over nested
//! regions, and the tail test applied to integrals over exhaustion levels.

#![allow(clippy::excessive_precision)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_208_745_815_573,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Tolerances for adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Tol {
    pub abs: f64,
    pub rel: f64,
    pub max_segments: usize,
}

impl Default for Tol {
    fn default() -> Self {
        Tol { abs: 1e-13, rel: 1e-11, max_segments: 4000 }
    }
}

impl Tol {
    pub fn loose() -> Self {
        Tol { abs: 1e-11, rel: 1e-8, max_segments: 1000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = res_k * 0.5;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    res_asc *= half.abs();
    res_abs *= half.abs();
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (value, err)
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: Tol) -> Quad {
    const INITIAL: usize = 4;
    let mut heap = BinaryHeap::new();
    let mut done: Vec<Segment> = Vec::new();
    let w = (b - a) / INITIAL as f64;
    for k in 0..INITIAL {
        let lo = a + w * k as f64;
        let hi = if k + 1 == INITIAL { b } else { a + w * (k + 1) as f64 };
        let (value, error) = gk21(f, lo, hi);
        heap.push(Segment { a: lo, b: hi, value, error });
    }
    let mut evals = 21 * INITIAL;
    let mut total: f64 = heap.iter().map(|s| s.value).sum();
    let mut err: f64 = heap.iter().map(|s| s.error).sum();
    loop {
        if !total.is_finite() || err <= tol.abs.max(tol.rel * total.abs()) {
            break;
        }
        if heap.len() + done.len() >= tol.max_segments {
            break;
        }
        let Some(seg) = heap.pop() else { break };
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b || (seg.b - seg.a) < 1e-14 * (1.0 + seg.a.abs()) {
            done.push(seg);
            continue;
        }
        let (v1, e1) = gk21(f, seg.a, mid);
        let (v2, e2) = gk21(f, mid, seg.b);
        evals += 42;
        total += v1 + v2 - seg.value;
        err += e1 + e2 - seg.error;
        heap.push(Segment { a: seg.a, b: mid, value: v1, error: e1 });
        heap.push(Segment { a: mid, b: seg.b, value: v2, error: e2 });
    }
    let mut all: Vec<Segment> = heap.into_vec();
    all.extend(done);
    all.sort_by(|x, y| x.a.total_cmp(&y.a));
    Quad {
        value: all.iter().map(|s| s.value).sum(),
        error: all.iter().map(|s| s.error).sum(),
        evals,
    }
}

/// Integrates `f` over `(a, b)`; either endpoint may be infinite.
/// The endpoints themselves are never evaluated.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tol) -> Quad {
    integrate_dyn(&f, a, b, tol)
}

fn integrate_dyn(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: Tol) -> Quad {
    if a == b {
        return Quad { value: 0.0, error: 0.0, evals: 0 };
    }
    if a > b {
        let q = integrate_dyn(f, b, a, tol);
        return Quad { value: -q.value, ..q };
    }
    match (a.is_finite(), b.is_finite()) {
        (true, true) => adaptive(&|x| f(x), a, b, tol),
        (true, false) => {
            let g = |t: f64| {
                let s = 1.0 - t;
                f(a + t / s) / (s * s)
            };
            adaptive(&g, 0.0, 1.0, tol)
        }
        (false, true) => {
            let g = |t: f64| f(b - (1.0 - t) / t) / (t * t);
            adaptive(&g, 0.0, 1.0, tol)
        }
        (false, false) => {
            let lo = integrate_dyn(f, f64::NEG_INFINITY, 0.0, tol);
            let hi = integrate_dyn(f, 0.0, f64::INFINITY, tol);
            Quad {
                value: lo.value + hi.value,
                error: lo.error + hi.error,
                evals: lo.evals + hi.evals,
            }
        }
    }
}

/// Iterated integral over a region described axis by axis: `bounds(k, prefix)`
/// returns the limits of coordinate `k` given the first `k` coordinates.
pub fn iterated<F, B>(f: &F, bounds: &B, dim: usize, tol: Tol) -> f64
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    B: Fn(usize, &[f64]) -> (f64, f64) + ?Sized,
{
    fn rec<F, B>(f: &F, bounds: &B, dim: usize, prefix: &[f64], tol: Tol) -> f64
    where
        F: Fn(&[f64]) -> f64 + ?Sized,
        B: Fn(usize, &[f64]) -> (f64, f64) + ?Sized,
    {
        let k = prefix.len();
        let (a, b) = bounds(k, prefix);
        let inner_tol = if k + 1 == dim { tol } else { Tol { rel: tol.rel * 0.1, abs: tol.abs * 0.1, ..tol } };
        integrate(
            |t| {
                let mut p = Vec::with_capacity(dim);
                p.extend_from_slice(prefix);
                p.push(t);
                if k + 1 == dim {
                    f(&p)
                } else {
                    rec(f, bounds, dim, &p, inner_tol)
                }
            },
            a,
            b,
            tol,
        )
        .value
    }
    rec(f, bounds, dim, &[], tol)
}

/// Verdict on the limit of a nondecreasing sequence of truncated integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    Converged,
    Diverged,
    Unclear,
}

/// Thresholds for [`tail_verdict`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailRule {
    /// Any level above this counts as divergence.
    pub cap: f64,
    /// Minimum relative increase per level for a slow divergence.
    pub growth: f64,
    /// Successive increment ratio at or above which increments are not decaying.
    pub stall_ratio: f64,
    /// Increment ratio below which the tail is treated as geometrically summable.
    pub decay_ratio: f64,
    /// Relative increment below which the sequence has settled.
    pub settle: f64,
}

impl Default for TailRule {
    fn default() -> Self {
        TailRule { cap: 1e6, growth: 0.01, stall_ratio: 0.9, decay_ratio: 0.75, settle: 1e-9 }
    }
}

/// Classifies the cumulative integrals `levels[n]` over E_0 ⊂ E_1 ⊂ ….
/// Fails with `GridTooCoarse` if the sequence decreases beyond rounding noise,
/// which a nonnegative integrand cannot do.
pub fn tail_verdict(levels: &[f64], rule: &TailRule) -> Result<Tail> {
    if levels.iter().any(|v| !v.is_finite()) {
        return Ok(Tail::Diverged);
    }
    let Some(&last) = levels.last() else { return Ok(Tail::Unclear) };
    let scale = levels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for w in levels.windows(2) {
        if w[1] < w[0] - 1e-8 * scale.max(1e-300) {
            return Err(Error::GridTooCoarse(format!(
                "truncated integrals decrease from {:.6e} to {:.6e}",
                w[0], w[1]
            )));
        }
    }
    if last > rule.cap {
        return Ok(Tail::Diverged);
    }
    if scale == 0.0 {
        return Ok(Tail::Converged);
    }
    if levels.len() < 4 {
        return Ok(Tail::Unclear);
    }
    let n = levels.len();
    let d: Vec<f64> = (n - 3..n).map(|k| (levels[k] - levels[k - 1]).max(0.0)).collect();
    if d[2] <= rule.settle * last.abs() {
        return Ok(Tail::Converged);
    }
    let r1 = d[1] / d[0].max(1e-300);
    let r2 = d[2] / d[1].max(1e-300);
    if r1 >= rule.stall_ratio && r2 >= rule.stall_ratio && d[2] > rule.growth * last.abs() {
        return Ok(Tail::Diverged);
    }
    if r2 < rule.decay_ratio {
        return Ok(Tail::Converged);
    }
    Ok(Tail::Unclear)
}

/// Serde for float sequences that may hold non-finite values, which are
/// written as the strings "inf", "-inf" and "nan" so the JSON re-parses.
pub mod float_seq {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        values.iter().map(|v| to_repr(*v)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<Repr>::deserialize(d)?;
        raw.into_iter()
            .map(|r| match r {
                Repr::Num(v) => Ok(v),
                Repr::Text(t) => match t.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        // Kronrod 21 integrates degree 31 exactly.
        let q = integrate(|x| x.powi(7) - 3.0 * x * x + 1.0, -1.0, 2.0, Tol::default());
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0) + 3.0;
        assert!((q.value - exact).abs() < 1e-12);
    }

    #[test]
    fn gaussian_over_real_line() {
        let q = integrate(|x: f64| (-0.5 * x * x).exp(), f64::NEG_INFINITY, f64::INFINITY, Tol::default());
        assert!((q.value - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn integrable_endpoint_singularity() {
        let q = integrate(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, Tol::default());
        assert!((q.value - 2.0).abs() < 1e-8, "{}", q.value);
    }

    #[test]
    fn iterated_triangle_area() {
        let area = iterated(&|_: &[f64]| 1.0, &|k: usize, p: &[f64]| if k == 0 { (0.0, 1.0) } else { (0.0, 1.0 - p[0]) }, 2, Tol::default());
        assert!((area - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tail_rules() {
        let rule = TailRule::default();
        let conv: Vec<f64> = (0..12).map(|n| 1.0 - 0.5f64.powi(n)).collect();
        assert_eq!(tail_verdict(&conv, &rule).unwrap(), Tail::Converged);
        let log_div: Vec<f64> = (0..12).map(|n| 0.1 * n as f64 + 0.05).collect();
        assert_eq!(tail_verdict(&log_div, &rule).unwrap(), Tail::Diverged);
        let fast: Vec<f64> = (0..12).map(|n| 2f64.powi(n)).collect();
        assert_eq!(tail_verdict(&fast, &rule).unwrap(), Tail::Diverged);
        let bad = [1.0, 2.0, 1.0, 3.0];
        assert!(matches!(tail_verdict(&bad, &rule), Err(Error::GridTooCoarse(_))));
    }
}
