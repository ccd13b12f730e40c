use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{iterated, Tol};

/// Points on the simplex must sum to one within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum DomainKind {
    /// Open interval; either end may be infinite.
    Interval { lower: f64, upper: f64 },
    /// Product of open intervals.
    Box { axes: Vec<(f64, f64)> },
    /// Open unit simplex in d coordinates.
    Simplex { d: usize },
}

/// Parameters of the nested truncations E_0 ⊂ E_1 ⊂ …
///
/// Finite endpoints move inward by `margin0 · 2^{-n}`, infinite ones sit at
/// `± radius0 · 2^n`. On the simplex E_n = {min x ≥ margin0 · 2^{-n}}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exhaustion {
    pub margin0: f64,
    pub radius0: f64,
    pub levels: usize,
}

impl Default for Exhaustion {
    fn default() -> Self {
        Exhaustion { margin0: 0.25, radius0: 1.0, levels: 12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub kind: DomainKind,
    pub exhaustion: Exhaustion,
}

/// A region in chart coordinates: an axis-aligned box, or the slice
/// {y_k ≥ eps, 1 − Σ y ≥ eps} of the simplex in its first d − 1 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Bounds(Vec<(f64, f64)>),
    SimplexSlice { d: usize, eps: f64 },
}

fn axis_level(lo: f64, hi: f64, ex: &Exhaustion, n: usize) -> (f64, f64) {
    let shrink = ex.margin0 * 0.5f64.powi(n as i32);
    let grow = ex.radius0 * 2f64.powi(n as i32);
    let a = if lo.is_finite() { lo + shrink } else { -grow };
    let b = if hi.is_finite() { hi - shrink } else { grow };
    (a, b)
}

impl Domain {
    pub fn interval(lower: f64, upper: f64, exhaustion: Exhaustion) -> Result<Self> {
        Self::new(DomainKind::Interval { lower, upper }, exhaustion)
    }

    pub fn new(kind: DomainKind, exhaustion: Exhaustion) -> Result<Self> {
        let dom = Domain { kind, exhaustion };
        dom.validate()?;
        Ok(dom)
    }

    fn validate(&self) -> Result<()> {
        let ex = &self.exhaustion;
        if ex.levels < 2 || !(ex.margin0 > 0.0) || !(ex.radius0 > 0.0) {
            return Err(Error::config("domain", "exhaustion needs levels ≥ 2 and positive margin0, radius0"));
        }
        match &self.kind {
            DomainKind::Simplex { d } => {
                if *d < 2 {
                    return Err(Error::config("domain.d", "simplex needs d ≥ 2"));
                }
                if ex.margin0 * *d as f64 >= 1.0 {
                    return Err(Error::config("domain.margin0", "margin0 · d must be below 1"));
                }
            }
            _ => {
                for (k, (lo, hi)) in self.axes().iter().enumerate() {
                    if !(lo < hi) {
                        return Err(Error::config(format!("domain.axes[{k}]"), "lower must be below upper"));
                    }
                    let (a, b) = axis_level(*lo, *hi, ex, 0);
                    if !(a < b) || a <= *lo || b >= *hi {
                        return Err(Error::config(
                            format!("domain.axes[{k}]"),
                            "first exhaustion element is empty; reduce margin0 or grow radius0",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn axes(&self) -> Vec<(f64, f64)> {
        match &self.kind {
            DomainKind::Interval { lower, upper } => vec![(*lower, *upper)],
            DomainKind::Box { axes } => axes.clone(),
            DomainKind::Simplex { .. } => Vec::new(),
        }
    }

    /// Dimension of the points fields are evaluated at.
    pub fn ambient_dim(&self) -> usize {
        match &self.kind {
            DomainKind::Interval { .. } => 1,
            DomainKind::Box { axes } => axes.len(),
            DomainKind::Simplex { d } => *d,
        }
    }

    /// Dimension of the chart used for integration and discretization.
    pub fn chart_dim(&self) -> usize {
        match &self.kind {
            DomainKind::Simplex { d } => d - 1,
            _ => self.ambient_dim(),
        }
    }

    pub fn is_simplex(&self) -> bool {
        matches!(self.kind, DomainKind::Simplex { .. })
    }

    pub fn levels(&self) -> usize {
        self.exhaustion.levels
    }

    /// Exhaustion element E_n.
    pub fn element(&self, n: usize) -> Element {
        match &self.kind {
            DomainKind::Simplex { d } => {
                Element::SimplexSlice { d: *d, eps: self.exhaustion.margin0 * 0.5f64.powi(n as i32) }
            }
            _ => Element::Bounds(self.axes().iter().map(|(lo, hi)| axis_level(*lo, *hi, &self.exhaustion, n)).collect()),
        }
    }

    pub fn largest(&self) -> Element {
        self.element(self.levels() - 1)
    }

    /// The whole open domain as an element (bounds may be infinite).
    pub fn full(&self) -> Element {
        match &self.kind {
            DomainKind::Simplex { d } => Element::SimplexSlice { d: *d, eps: 0.0 },
            _ => Element::Bounds(self.axes()),
        }
    }

    /// Membership in the open domain.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.ambient_dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match &self.kind {
            DomainKind::Simplex { .. } => {
                x.iter().all(|v| *v > 0.0) && (x.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
            }
            _ => self.axes().iter().zip(x).all(|((lo, hi), v)| lo < v && v < hi),
        }
    }

    /// Chart point to ambient point.
    pub fn embed(&self, y: &[f64]) -> Vec<f64> {
        match &self.kind {
            DomainKind::Simplex { .. } => {
                let mut x = y.to_vec();
                x.push(1.0 - y.iter().sum::<f64>());
                x
            }
            _ => y.to_vec(),
        }
    }

    /// Ambient point to chart point.
    pub fn chart(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            DomainKind::Simplex { d } => x[..d - 1].to_vec(),
            _ => x.to_vec(),
        }
    }

    /// Cumulative integrals of `f` (in chart coordinates) over E_0, …, E_{levels-1}.
    /// Each level adds only the shell E_n \ E_{n-1}, so the sequence is
    /// nondecreasing for nonnegative integrands.
    pub fn level_integrals(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync), tol: Tol) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.levels());
        let mut acc = 0.0;
        for n in 0..self.levels() {
            let inc = match (&self.element(n), n) {
                (e, 0) => e.integrate(f, tol),
                (Element::Bounds(outer), _) => {
                    let Element::Bounds(inner) = self.element(n - 1) else { unreachable!() };
                    shell_boxes(&inner, outer).iter().map(|b| Element::Bounds(b.clone()).integrate(f, tol)).sum()
                }
                // Differencing two full integrals; a negative result is quadrature noise.
                (e, _) => (e.integrate(f, tol) - acc).max(0.0),
            };
            acc += inc;
            out.push(acc);
        }
        out
    }
}

/// Disjoint boxes covering `outer \ inner` for nested boxes.
fn shell_boxes(inner: &[(f64, f64)], outer: &[(f64, f64)]) -> Vec<Vec<(f64, f64)>> {
    let m = inner.len();
    let mut out = Vec::new();
    for k in 0..m {
        for piece in [(outer[k].0, inner[k].0), (inner[k].1, outer[k].1)] {
            if piece.0 >= piece.1 {
                continue;
            }
            let b: Vec<(f64, f64)> = (0..m)
                .map(|j| match j.cmp(&k) {
                    std::cmp::Ordering::Less => inner[j],
                    std::cmp::Ordering::Equal => piece,
                    std::cmp::Ordering::Greater => outer[j],
                })
                .collect();
            out.push(b);
        }
    }
    out
}

impl Element {
    pub fn dim(&self) -> usize {
        match self {
            Element::Bounds(b) => b.len(),
            Element::SimplexSlice { d, .. } => d - 1,
        }
    }

    /// Limits of chart coordinate `k` given the preceding ones.
    pub fn bounds(&self, k: usize, prefix: &[f64]) -> (f64, f64) {
        match self {
            Element::Bounds(b) => b[k],
            Element::SimplexSlice { d, eps } => {
                let m = d - 1;
                let used: f64 = prefix.iter().sum();
                (*eps, 1.0 - used - (m - k) as f64 * eps)
            }
        }
    }

    pub fn integrate(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync), tol: Tol) -> f64 {
        iterated(f, &|k: usize, p: &[f64]| self.bounds(k, p), self.dim(), tol)
    }

    /// Closed-region membership test for an ambient point.
    pub fn contains_ambient(&self, x: &[f64]) -> bool {
        match self {
            Element::Bounds(b) => b.iter().zip(x).all(|((lo, hi), v)| *lo <= *v && *v <= *hi),
            Element::SimplexSlice { eps, .. } => x.iter().all(|v| *v >= *eps),
        }
    }

    /// Volume in chart coordinates.
    pub fn volume(&self) -> f64 {
        match self {
            Element::Bounds(b) => b.iter().map(|(lo, hi)| hi - lo).product(),
            Element::SimplexSlice { d, eps } => {
                let m = d - 1;
                let side = 1.0 - *d as f64 * eps;
                side.powi(m as i32) / (1..=m).product::<usize>() as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_exhaustion_is_nested() {
        let d = Domain::interval(0.0, f64::INFINITY, Exhaustion { margin0: 0.8, radius0: 1.25, levels: 12 }).unwrap();
        let mut prev: Option<(f64, f64)> = None;
        for n in 0..12 {
            let Element::Bounds(b) = d.element(n) else { panic!() };
            let (a, bb) = b[0];
            assert!(a > 0.0 && a < bb);
            if let Some((pa, pb)) = prev {
                assert!(a < pa && bb > pb);
            }
            prev = Some((a, bb));
        }
        assert_eq!(d.element(4), Element::Bounds(vec![(0.05, 20.0)]));
    }

    #[test]
    fn shells_add_up() {
        let d = Domain::new(
            DomainKind::Box { axes: vec![(f64::NEG_INFINITY, f64::INFINITY), (0.0, 1.0)] },
            Exhaustion { margin0: 0.25, radius0: 1.0, levels: 5 },
        )
        .unwrap();
        let levels = d.level_integrals(&|_| 1.0, Tol::default());
        for (n, v) in levels.iter().enumerate() {
            assert!((v - d.element(n).volume()).abs() < 1e-9, "{n}: {v}");
        }
    }

    #[test]
    fn simplex_slice_volume() {
        let e = Element::SimplexSlice { d: 3, eps: 0.05 };
        let v = e.integrate(&|_| 1.0, Tol::default());
        assert!((v - e.volume()).abs() < 1e-12);
    }
}
