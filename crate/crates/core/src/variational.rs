//! Discretization of the minimization of J(φ) = ∫ (∇φ − ℓ)ᵀ c (∇φ − ℓ) p on an
//! exhaustion element, whose stationarity condition is the divergence-form
//! equation ∇·(p c (∇φ − ℓ)) = 0 with zero conormal flux on the boundary.
//!
//! The element is covered by a structured lattice split into simplices
//! (segments in 1-D, right triangles in 2-D) with piecewise-linear φ. Each cell
//! contributes |e| (Gφ − ℓ_e)ᵀ K_e (Gφ − ℓ_e) with K_e = p c at its centroid, so
//! the assembled matrix is the flux balance over the dual control volumes of
//! the nodes. It is symmetric positive semidefinite with the constants as
//! kernel.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Element, MarketModel, ScalarField};
use crate::quadrature::Tol;

/// One simplex of the mesh.
#[derive(Debug, Clone)]
pub struct Cell {
    pub vertices: Vec<usize>,
    pub volume: f64,
    pub centroid: Vec<f64>,
    /// Maps the vertex values to the (constant) gradient on the cell.
    pub grad_op: DMatrix<f64>,
}

/// A boundary facet with outward unit normal.
#[derive(Debug, Clone)]
pub struct Face {
    pub midpoint: Vec<f64>,
    pub normal: Vec<f64>,
    pub area: f64,
}

/// Structured mesh of an exhaustion element in chart coordinates.
#[derive(Debug, Clone)]
pub struct Grid {
    pub element: Element,
    pub exhaustion_level: usize,
    pub dim: usize,
    pub h: Vec<f64>,
    pub origin: Vec<f64>,
    /// Cells per axis.
    pub n: usize,
    pub nodes: Vec<Vec<f64>>,
    /// Integer lattice coordinates of each node.
    pub lattice: Vec<Vec<usize>>,
    pub cells: Vec<Cell>,
    pub boundary: Vec<Face>,
    index: Vec<Option<usize>>,
    /// Lower and upper cell of each lattice square, row-major (2-D only).
    squares: Vec<[Option<usize>; 2]>,
}

fn make_cell(nodes: &[Vec<f64>], vertices: Vec<usize>) -> Cell {
    let m = nodes[vertices[0]].len();
    let v0 = &nodes[vertices[0]];
    let e = DMatrix::from_fn(m, m, |r, c| nodes[vertices[c + 1]][r] - v0[r]);
    let det = e.determinant();
    let volume = det.abs() / (1..=m).product::<usize>() as f64;
    let inv_t = e.try_inverse().expect("nondegenerate cell").transpose();
    let mut diff = DMatrix::zeros(m, m + 1);
    for k in 0..m {
        diff[(k, 0)] = -1.0;
        diff[(k, k + 1)] = 1.0;
    }
    let grad_op = inv_t * diff;
    let centroid = (0..m).map(|r| vertices.iter().map(|&v| nodes[v][r]).sum::<f64>() / (m + 1) as f64).collect();
    Cell { vertices, volume, centroid, grad_op }
}

impl Grid {
    /// Mesh of E_level with `n` cells per chart axis (`n` is rounded up to an
    /// even number on the simplex so that rank ties fall on nodes).
    pub fn new(model: &MarketModel, exhaustion_level: usize, n: usize) -> Result<Grid> {
        let element = model.domain.element(exhaustion_level);
        let m = element.dim();
        if !(1..=2).contains(&m) {
            return Err(Error::config("solver", format!("the variational solver supports chart dimension 1 or 2, got {m}")));
        }
        if n < 2 {
            return Err(Error::GridTooCoarse(format!("{n} cells per axis")));
        }
        match &element {
            Element::Bounds(b) => {
                let origin: Vec<f64> = b.iter().map(|(lo, _)| *lo).collect();
                let h: Vec<f64> = b.iter().map(|(lo, hi)| (hi - lo) / n as f64).collect();
                Ok(Self::lattice(element.clone(), exhaustion_level, origin, h, n, |_| true))
            }
            Element::SimplexSlice { d, eps } => {
                let n = n + n % 2;
                let h = (1.0 - *d as f64 * eps) / n as f64;
                let origin = vec![*eps; m];
                Ok(Self::lattice(element.clone(), exhaustion_level, origin, vec![h; m], n, |idx: &[usize]| {
                    idx.iter().sum::<usize>() <= n
                }))
            }
        }
    }

    fn lattice(
        element: Element,
        exhaustion_level: usize,
        origin: Vec<f64>,
        h: Vec<f64>,
        n: usize,
        inside: impl Fn(&[usize]) -> bool,
    ) -> Grid {
        let m = origin.len();
        let side = n + 1;
        let total = side.pow(m as u32);
        let mut index = vec![None; total];
        let mut nodes = Vec::new();
        let mut lattice = Vec::new();
        let unflat = |mut k: usize| -> Vec<usize> {
            let mut idx = vec![0; m];
            for a in 0..m {
                idx[a] = k % side;
                k /= side;
            }
            idx
        };
        let flat = |idx: &[usize]| -> usize { idx.iter().rev().fold(0, |acc, i| acc * side + i) };
        for k in 0..total {
            let idx = unflat(k);
            if inside(&idx) {
                index[k] = Some(nodes.len());
                nodes.push((0..m).map(|a| origin[a] + idx[a] as f64 * h[a]).collect::<Vec<f64>>());
                lattice.push(idx);
            }
        }
        let at = |idx: &[usize]| -> Option<usize> {
            if idx.iter().any(|&i| i > n) {
                return None;
            }
            index[flat(idx)]
        };
        let mut cells = Vec::new();
        let mut boundary = Vec::new();
        let mut squares = Vec::new();
        if m == 1 {
            for i in 0..n {
                cells.push(make_cell(&nodes, vec![i, i + 1]));
            }
            boundary.push(Face { midpoint: nodes[0].clone(), normal: vec![-1.0], area: 1.0 });
            boundary.push(Face { midpoint: nodes[n].clone(), normal: vec![1.0], area: 1.0 });
        } else {
            for j in 0..n {
                for i in 0..n {
                    let (a, b, c, d) = (at(&[i, j]), at(&[i + 1, j]), at(&[i, j + 1]), at(&[i + 1, j + 1]));
                    let mut sq = [None, None];
                    if let (Some(a), Some(b), Some(c)) = (a, b, c) {
                        sq[0] = Some(cells.len());
                        cells.push(make_cell(&nodes, vec![a, b, c]));
                        if let Some(d) = d {
                            sq[1] = Some(cells.len());
                            cells.push(make_cell(&nodes, vec![b, d, c]));
                        }
                    }
                    squares.push(sq);
                }
            }
            // Boundary edges are the cell edges used by exactly one cell.
            let mut edges: std::collections::BTreeMap<(usize, usize), (usize, usize)> = Default::default();
            for (ci, cell) in cells.iter().enumerate() {
                for (p, q) in [(0, 1), (1, 2), (2, 0)] {
                    let (u, v) = (cell.vertices[p], cell.vertices[q]);
                    let key = (u.min(v), u.max(v));
                    edges.entry(key).and_modify(|e| e.1 += 1).or_insert((ci, 1));
                }
            }
            for ((u, v), (ci, count)) in edges {
                if count != 1 {
                    continue;
                }
                let (pu, pv) = (&nodes[u], &nodes[v]);
                let t = [pv[0] - pu[0], pv[1] - pu[1]];
                let len = (t[0] * t[0] + t[1] * t[1]).sqrt();
                let mut normal = vec![t[1] / len, -t[0] / len];
                let mid = vec![0.5 * (pu[0] + pv[0]), 0.5 * (pu[1] + pv[1])];
                let cen = &cells[ci].centroid;
                if normal[0] * (mid[0] - cen[0]) + normal[1] * (mid[1] - cen[1]) < 0.0 {
                    normal = vec![-normal[0], -normal[1]];
                }
                boundary.push(Face { midpoint: mid, normal, area: len });
            }
        }
        Grid { element, exhaustion_level, dim: m, h, origin, n, nodes, lattice, cells, boundary, index, squares }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Largest spacing.
    pub fn spacing(&self) -> f64 {
        self.h.iter().cloned().fold(0.0, f64::max)
    }

    pub fn node_at(&self, idx: &[usize]) -> Option<usize> {
        if idx.len() != self.dim || idx.iter().any(|&i| i > self.n) {
            return None;
        }
        let side = self.n + 1;
        self.index[idx.iter().rev().fold(0, |acc, i| acc * side + i)]
    }

    /// For simplex grids, the node maps induced by all coordinate
    /// permutations of the full barycentric lattice index.
    pub fn node_permutations(&self) -> Option<Vec<Vec<usize>>> {
        let Element::SimplexSlice { d, .. } = self.element else { return None };
        let perms = permutations(d);
        let mut out = Vec::with_capacity(perms.len());
        for perm in &perms {
            let map = self
                .lattice
                .iter()
                .map(|idx| {
                    let mut full = idx.clone();
                    full.push(self.n - idx.iter().sum::<usize>());
                    let permuted: Vec<usize> = perm.iter().map(|&k| full[k]).collect();
                    self.node_at(&permuted[..d - 1]).expect("lattice is permutation invariant")
                })
                .collect();
            out.push(map);
        }
        Some(out)
    }

    /// Locates the cell containing a chart point, clamping to the mesh.
    pub fn locate(&self, y: &[f64]) -> (usize, Vec<f64>) {
        let m = self.dim;
        let mut idx = vec![0usize; m];
        let mut frac = vec![0.0; m];
        for a in 0..m {
            let t = ((y[a] - self.origin[a]) / self.h[a]).clamp(0.0, self.n as f64);
            let i = (t.floor() as usize).min(self.n - 1);
            idx[a] = i;
            frac[a] = t - i as f64;
        }
        if m == 1 {
            return (idx[0], vec![1.0 - frac[0], frac[0]]);
        }
        let (i, j) = (idx[0], idx[1]);
        let (fx, fy) = (frac[0], frac[1]);
        let cell_of = |upper: bool| -> Option<usize> { self.square_cell(i, j, upper) };
        if fx + fy <= 1.0 {
            if let Some(c) = cell_of(false) {
                return (c, vec![1.0 - fx - fy, fx, fy]);
            }
        } else if let Some(c) = cell_of(true) {
            return (c, vec![1.0 - fy, fx + fy - 1.0, 1.0 - fx]);
        }
        // Outside the triangular mesh: project onto the hypotenuse cell.
        let s = fx + fy;
        let (fx, fy) = if s > 0.0 { (fx / s, fy / s) } else { (0.5, 0.5) };
        let (mut ii, mut jj) = (i, j);
        while ii + jj + 1 > self.n {
            if ii >= jj && ii > 0 {
                ii -= 1;
            } else if jj > 0 {
                jj -= 1;
            } else {
                break;
            }
        }
        let c = self.square_cell(ii, jj, false).expect("lower cell exists inside the triangle");
        (c, vec![1.0 - fx - fy, fx, fy])
    }

    fn square_cell(&self, i: usize, j: usize, upper: bool) -> Option<usize> {
        if i >= self.n || j >= self.n {
            return None;
        }
        self.squares[j * self.n + i][upper as usize]
    }
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..left.len() {
            let v = left.remove(k);
            prefix.push(v);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(k, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..d).collect(), &mut out);
    out
}

/// Per-cell coefficients p·c and ℓ at the centroid.
#[derive(Debug, Clone)]
pub struct CellCoefficients {
    pub k: DMatrix<f64>,
    pub ell: DVector<f64>,
}

/// Compressed sparse rows.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub ptr: Vec<usize>,
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: Vec<std::collections::BTreeMap<usize, f64>>) -> Csr {
        let n = rows.len();
        let mut ptr = Vec::with_capacity(n + 1);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        ptr.push(0);
        for row in rows {
            for (c, v) in row {
                idx.push(c);
                val.push(v);
            }
            ptr.push(idx.len());
        }
        Csr { n, ptr, idx, val }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| (self.ptr[i]..self.ptr[i + 1]).map(|k| self.val[k] * x[self.idx[k]]).sum()).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.idx[self.ptr[i]..self.ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.val[self.ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Largest |a_ij − a_ji| relative to the largest entry.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self.val.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for k in self.ptr[i]..self.ptr[i + 1] {
                worst = worst.max((self.val[k] - self.get(self.idx[k], i)).abs());
            }
        }
        worst / scale
    }

    /// Drops row and column 0.
    fn grounded(&self) -> Csr {
        let rows = (1..self.n)
            .map(|i| {
                (self.ptr[i]..self.ptr[i + 1])
                    .filter(|&k| self.idx[k] != 0)
                    .map(|k| (self.idx[k] - 1, self.val[k]))
                    .collect()
            })
            .collect();
        Csr::from_rows(rows)
    }
}

/// The assembled discrete Euler–Lagrange system A φ = b.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: Csr,
    pub rhs: Vec<f64>,
    pub coefficients: Vec<CellCoefficients>,
}

/// Evaluates p·c and ℓ at every cell centroid.
pub fn cell_coefficients(grid: &Grid, model: &MarketModel) -> Result<Vec<CellCoefficients>> {
    grid.cells
        .par_iter()
        .map(|cell| {
            let y = &cell.centroid;
            let p = model.density(y);
            let ell = model.chart_ell(y)?;
            Ok(CellCoefficients { k: model.chart_cov(y) * p, ell })
        })
        .collect()
}

pub fn assemble(grid: &Grid, model: &MarketModel) -> Result<LinearSystem> {
    let coefficients = cell_coefficients(grid, model)?;
    let n = grid.node_count();
    let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    let mut rhs = vec![0.0; n];
    for (cell, coef) in grid.cells.iter().zip(&coefficients) {
        let gk = cell.grad_op.transpose() * &coef.k;
        let local = &gk * &cell.grad_op * cell.volume;
        let local_rhs = &gk * &coef.ell * cell.volume;
        let nv = cell.vertices.len();
        for a in 0..nv {
            let va = cell.vertices[a];
            rhs[va] += local_rhs[a];
            for b in 0..nv {
                // Mirror the upper triangle so the assembly is symmetric bit for bit.
                let v = if a <= b { local[(a, b)] } else { local[(b, a)] };
                *rows[va].entry(cell.vertices[b]).or_insert(0.0) += v;
            }
        }
    }
    let matrix = Csr::from_rows(rows);
    let defect = matrix.symmetry_defect();
    if defect > 1e-10 {
        return Err(Error::NonSymmetricAssembly { defect });
    }
    Ok(LinearSystem { matrix, rhs, coefficients })
}

/// Incomplete Cholesky factor with the sparsity of the lower triangle.
struct Ic0 {
    l: Csr,
    diag: Vec<f64>,
}

impl Ic0 {
    fn new(a: &Csr) -> Ic0 {
        let n = a.n;
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut diag = vec![0.0; n];
        let mut work = vec![0.0; n];
        for i in 0..n {
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut aii = 0.0;
            for k in a.ptr[i]..a.ptr[i + 1] {
                let j = a.idx[k];
                if j < i {
                    let mut s = a.val[k];
                    for &(c, v) in &rows[j] {
                        s -= work[c] * v;
                    }
                    let lij = s / diag[j];
                    work[j] = lij;
                    row.push((j, lij));
                } else if j == i {
                    aii = a.val[k];
                }
            }
            let mut s = aii;
            for &(_, v) in &row {
                s -= v * v;
            }
            diag[i] = if s > 1e-12 * aii.abs() { s.sqrt() } else { (1e-6 * aii.abs()).sqrt().max(1e-300) };
            for &(c, _) in &row {
                work[c] = 0.0;
            }
            rows.push(row);
        }
        let mut ptr = vec![0];
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for row in rows {
            for (c, v) in row {
                idx.push(c);
                val.push(v);
            }
            ptr.push(idx.len());
        }
        Ic0 { l: Csr { n, ptr, idx, val }, diag }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let n = self.l.n;
        let mut y = r.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in self.l.ptr[i]..self.l.ptr[i + 1] {
                s -= self.l.val[k] * y[self.l.idx[k]];
            }
            y[i] = s / self.diag[i];
        }
        for i in (0..n).rev() {
            y[i] /= self.diag[i];
            let xi = y[i];
            for k in self.l.ptr[i]..self.l.ptr[i + 1] {
                y[self.l.idx[k]] -= self.l.val[k] * xi;
            }
        }
        y
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nodal potential normalized to mean zero, with per-cell gradients and
/// recovered nodal gradients (volume-weighted averages of adjacent cells).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretePotential {
    pub values: Vec<f64>,
    pub cell_gradients: Vec<Vec<f64>>,
    pub node_gradients: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

impl DiscretePotential {
    pub fn from_values(grid: &Grid, mut values: Vec<f64>, iterations: usize, residual: f64) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        let m = grid.dim;
        let cell_gradients: Vec<Vec<f64>> = grid
            .cells
            .iter()
            .map(|c| {
                let local = DVector::from_iterator(c.vertices.len(), c.vertices.iter().map(|&v| values[v]));
                (&c.grad_op * local).iter().cloned().collect()
            })
            .collect();
        let mut acc = vec![vec![0.0; m]; grid.node_count()];
        let mut weight = vec![0.0; grid.node_count()];
        for (c, g) in grid.cells.iter().zip(&cell_gradients) {
            for &v in &c.vertices {
                for a in 0..m {
                    acc[v][a] += c.volume * g[a];
                }
                weight[v] += c.volume;
            }
        }
        let node_gradients = acc.into_iter().zip(weight).map(|(g, w)| g.into_iter().map(|x| x / w).collect()).collect();
        DiscretePotential { values, cell_gradients, node_gradients, iterations, residual }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Averages the potential over all coordinate permutations (simplex grids).
    pub fn symmetrized(&self, grid: &Grid) -> Self {
        let Some(perms) = grid.node_permutations() else { return self.clone() };
        let values = (0..grid.node_count())
            .map(|i| {
                let mut vals: Vec<f64> = perms.iter().map(|map| self.values[map[i]]).collect();
                // Summing in sorted order makes the average identical across the orbit.
                vals.sort_by(f64::total_cmp);
                vals.iter().sum::<f64>() / perms.len() as f64
            })
            .collect();
        DiscretePotential::from_values(grid, values, self.iterations, self.residual)
    }

    pub fn write_csv<W: Write>(&self, grid: &Grid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..grid.dim).map(|a| format!("y{a}")).collect();
        header.extend(["phi".to_string(), "grad_norm".to_string()]);
        w.write_record(&header)?;
        for (i, node) in grid.nodes.iter().enumerate() {
            let mut rec: Vec<String> = node.iter().map(|v| format!("{v:.10e}")).collect();
            rec.push(format!("{:.10e}", self.values[i]));
            let g = &self.node_gradients[i];
            rec.push(format!("{:.10e}", g.iter().map(|v| v * v).sum::<f64>().sqrt()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Conjugate gradients with an incomplete Cholesky preconditioner on the
/// quotient by constants: node 0 is grounded and the result re-centred.
pub fn solve_phi(grid: &Grid, system: &LinearSystem, tol: f64, max_iter: usize) -> Result<DiscretePotential> {
    let n = system.matrix.n;
    let b_norm = dot(&system.rhs, &system.rhs).sqrt();
    let scale = system.matrix.val.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if b_norm <= 1e-300 || b_norm <= 1e-15 * scale * (n as f64).sqrt() * 1e-10 {
        return Ok(DiscretePotential::from_values(grid, vec![0.0; n], 0, 0.0));
    }
    // The range of the singular matrix is the mean-zero subspace; drop the
    // rounding-level constant component of the right-hand side.
    let mean = system.rhs.iter().sum::<f64>() / n as f64;
    let rhs: Vec<f64> = system.rhs.iter().map(|v| v - mean).collect();
    let a = system.matrix.grounded();
    let b: Vec<f64> = rhs[1..].to_vec();
    let pre = Ic0::new(&a);
    let mut x = vec![0.0; n - 1];
    let mut r = b.clone();
    let r0 = dot(&r, &r).sqrt();
    let mut z = pre.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = r0;
    let mut iterations = 0;
    while iterations < max_iter {
        if res <= tol * r0 {
            break;
        }
        iterations += 1;
        let ap = a.mul(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n - 1 {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt();
        z = pre.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n - 1 {
            p[i] = z[i] + beta * p[i];
        }
    }
    let mut full = Vec::with_capacity(n);
    full.push(0.0);
    full.extend(x);
    // Residual of the full singular system on the mean-zero subspace.
    let ax = system.matrix.mul(&full);
    let true_res = ax.iter().zip(&rhs).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    // Rounding in badly scaled systems caps the attainable residual near 1e-9.
    if !(true_res <= (10.0 * tol).max(1e-8) * b_norm) {
        return Err(Error::NoConvergence { iterations, residual: true_res / b_norm });
    }
    Ok(DiscretePotential::from_values(grid, full, iterations, true_res / b_norm))
}

/// J(φ) = ∫ (∇φ − ℓ)ᵀ c (∇φ − ℓ) p on the grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub j: f64,
}

/// The three terms of the energy identity ∫∇φᵀc∇φ p + J(φ) = ∫ℓᵀcℓ p.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub grad_energy: f64,
    pub objective: f64,
    /// ∫ ℓᵀcℓ p over the element by adaptive quadrature.
    pub ell_energy: f64,
    pub h: f64,
}

impl EnergyBreakdown {
    pub fn defect(&self) -> f64 {
        (self.objective + self.grad_energy - self.ell_energy).abs()
    }

    /// The admissible defect 5 h ∫ ℓᵀcℓ p.
    pub fn bound(&self) -> f64 {
        5.0 * self.h * self.ell_energy
    }
}

fn cell_sums(phi: &DiscretePotential, grid: &Grid, coefs: &[CellCoefficients], f: impl Fn(&DVector<f64>, &CellCoefficients) -> f64) -> f64 {
    grid.cells
        .iter()
        .zip(&phi.cell_gradients)
        .zip(coefs)
        .map(|((c, g), k)| c.volume * f(&DVector::from_column_slice(g), k))
        .sum()
}

pub fn objective(phi: &DiscretePotential, model: &MarketModel, grid: &Grid) -> Result<ObjectiveValue> {
    let coefs = cell_coefficients(grid, model)?;
    Ok(ObjectiveValue { j: objective_with(phi, grid, &coefs) })
}

fn objective_with(phi: &DiscretePotential, grid: &Grid, coefs: &[CellCoefficients]) -> f64 {
    cell_sums(phi, grid, coefs, |g, k| {
        let e = g - &k.ell;
        (e.transpose() * &k.k * &e)[(0, 0)]
    })
}

/// Per-cell weighted energy |e| ∇φᵀ p c ∇φ.
pub fn cell_energies(phi: &DiscretePotential, grid: &Grid, coefs: &[CellCoefficients]) -> Vec<f64> {
    grid.cells
        .iter()
        .zip(&phi.cell_gradients)
        .zip(coefs)
        .map(|((c, g), k)| {
            let g = DVector::from_column_slice(g);
            c.volume * (g.transpose() * &k.k * &g)[(0, 0)]
        })
        .collect()
}

/// λ = (1/8) Σ_cells ∇φᵀ c ∇φ p |e|.
pub fn lambda_from_phi(phi: &DiscretePotential, model: &MarketModel, grid: &Grid) -> Result<f64> {
    let coefs = cell_coefficients(grid, model)?;
    Ok(cell_energies(phi, grid, &coefs).iter().sum::<f64>() / 8.0)
}

pub fn energy_breakdown(phi: &DiscretePotential, model: &MarketModel, grid: &Grid) -> Result<EnergyBreakdown> {
    let coefs = cell_coefficients(grid, model)?;
    let grad_energy = cell_energies(phi, grid, &coefs).iter().sum();
    let objective = objective_with(phi, grid, &coefs);
    let ell_energy = grid.element.integrate(
        &|y| {
            let p = model.density(y);
            if p == 0.0 {
                return 0.0;
            }
            model.chart_ell(y).map(|l| (l.transpose() * model.chart_cov(y) * &l)[(0, 0)] * p).unwrap_or(f64::NAN)
        },
        Tol::loose(),
    );
    Ok(EnergyBreakdown { grad_energy, objective, ell_energy, h: grid.spacing() })
}

/// Net outward flux of p c ℓ through the boundary of the grid's element.
pub fn flux_balance_diagnostic(model: &MarketModel, grid: &Grid) -> f64 {
    grid.boundary
        .iter()
        .map(|f| {
            let flux = model.chart_flux(&f.midpoint);
            f.area * flux.iter().zip(&f.normal).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

/// Assembles and solves on E_level with `cells` per axis.
pub fn solve_on(model: &MarketModel, exhaustion_level: usize, cells: usize) -> Result<(Grid, DiscretePotential)> {
    let grid = Grid::new(model, exhaustion_level, cells)?;
    let system = assemble(&grid, model)?;
    let phi = solve_phi(&grid, &system, 1e-12, 20 * grid.node_count() + 100)?;
    Ok((grid, phi))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub cells: usize,
    pub h: f64,
    pub lambda: f64,
    /// |λ_level − λ_{level−1}|.
    pub increment: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub exhaustion_level: usize,
    pub rows: Vec<ConvergenceRow>,
    /// log2 of successive increment ratios.
    pub orders: Vec<f64>,
    pub observed_order: Option<f64>,
    /// Set when the last increment exceeds the one before it.
    pub non_monotone: bool,
}

impl ConvergenceTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "cells", "h", "lambda", "increment"])?;
        for r in &self.rows {
            w.write_record([
                r.level.to_string(),
                r.cells.to_string(),
                format!("{:.10e}", r.h),
                format!("{:.12e}", r.lambda),
                r.increment.map(|v| format!("{v:.6e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// λ on a fixed exhaustion element with the spacing halved per level.
pub fn refinement_study(model: &MarketModel, exhaustion_level: usize, base_cells: usize, levels: usize) -> Result<ConvergenceTable> {
    if levels < 2 {
        return Err(Error::config("solver.refinements", "need at least 2 levels"));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for level in 0..levels {
        let cells = base_cells << level;
        let (grid, phi) = solve_on(model, exhaustion_level, cells)?;
        let lambda = lambda_from_phi(&phi, model, &grid)?;
        let increment = rows.last().map(|r| (lambda - r.lambda).abs());
        rows.push(ConvergenceRow { level, cells: grid.n, h: grid.spacing(), lambda, increment });
    }
    let incs: Vec<f64> = rows.iter().filter_map(|r| r.increment).collect();
    let orders: Vec<f64> = incs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let non_monotone = incs.len() >= 2 && incs[incs.len() - 1] > incs[incs.len() - 2];
    Ok(ConvergenceTable { exhaustion_level, observed_order: orders.last().copied(), orders, rows, non_monotone })
}

/// Piecewise-linear interpolant of a discrete potential as an ambient field.
/// Its gradient interpolates the recovered nodal gradients, so it is
/// continuous and inherits the symmetry of the nodal data.
pub struct PotentialField {
    pub grid: Arc<Grid>,
    pub phi: Arc<DiscretePotential>,
    pub model: MarketModel,
}

impl PotentialField {
    fn interp(&self, x: &[f64]) -> (usize, Vec<f64>) {
        self.grid.locate(&self.model.domain.chart(x))
    }

    /// Pads a chart vector with zeros to ambient length.
    fn pad(&self, g: DVector<f64>) -> DVector<f64> {
        let d = self.model.dim();
        let mut out = DVector::zeros(d);
        out.rows_mut(0, g.len()).copy_from(&g);
        out
    }
}

impl ScalarField for PotentialField {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        let (c, w) = self.interp(x);
        self.grid.cells[c].vertices.iter().zip(&w).map(|(&v, w)| w * self.phi.values[v]).sum()
    }
    fn grad(&self, x: &[f64]) -> DVector<f64> {
        let (c, w) = self.interp(x);
        let m = self.grid.dim;
        let mut g = DVector::zeros(m);
        for (&v, w) in self.grid.cells[c].vertices.iter().zip(&w) {
            for a in 0..m {
                g[a] += w * self.phi.node_gradients[v][a];
            }
        }
        self.pad(g)
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let (c, _) = self.interp(x);
        let cell = &self.grid.cells[c];
        let m = self.grid.dim;
        let d = self.model.dim();
        let mut h = DMatrix::zeros(d, d);
        for a in 0..m {
            let comp = DVector::from_iterator(cell.vertices.len(), cell.vertices.iter().map(|&v| self.phi.node_gradients[v][a]));
            let row = &cell.grad_op * comp;
            for b in 0..m {
                h[(a, b)] = row[b];
            }
        }
        (&h + h.transpose()) * 0.5
    }
    fn smoothness(&self) -> u32 {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config;

    #[test]
    fn constant_vector_is_in_the_kernel() {
        for name in config::BUNDLED {
            let m = config::load_bundled(name).unwrap();
            let grid = Grid::new(&m, 2, 16).unwrap();
            let sys = assemble(&grid, &m).unwrap();
            let ones = vec![1.0; grid.node_count()];
            let scale = sys.matrix.val.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let r = sys.matrix.mul(&ones);
            assert!(r.iter().all(|v| v.abs() <= 1e-12 * scale), "{name}");
            assert!(sys.matrix.symmetry_defect() == 0.0);
        }
    }

    #[test]
    fn flat_model_has_zero_rhs_and_solution() {
        let m = config::load_bundled("unit_interval_flat").unwrap();
        let grid = Grid::new(&m, 3, 50).unwrap();
        let sys = assemble(&grid, &m).unwrap();
        assert!(sys.rhs.iter().all(|v| *v == 0.0));
        let phi = solve_phi(&grid, &sys, 1e-12, 10).unwrap();
        assert!(phi.iterations <= 1);
        assert!(phi.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cir_matches_log_pc() {
        let m = config::cir_model(3.0, 2.0, 1.0).unwrap();
        let (grid, phi) = solve_on(&m, 4, 19950).unwrap();
        assert!((grid.h[0] - 1e-3).abs() < 1e-12);
        let exact: Vec<f64> = grid.nodes.iter().map(|y| m.log_density(y) + m.chart_cov(y)[(0, 0)].ln()).collect();
        let mean = exact.iter().sum::<f64>() / exact.len() as f64;
        let err = exact.iter().zip(&phi.values).map(|(e, v)| (e - mean - v).abs()).fold(0.0, f64::max);
        assert!(err <= 5e-3, "max error {err}");
        assert!(phi.mean().abs() < 1e-12);
        // In one dimension φ' = ℓ on any truncation, so λ on E_4 = [0.05, 20]
        // is ⅛∫ ℓ² c p there with ℓ = 3/x − 2.
        let truncated = crate::quadrature::integrate(
            |x| (3.0 / x - 2.0).powi(2) * x * m.density(&[x]) / 8.0,
            0.05,
            20.0,
            crate::quadrature::Tol::default(),
        )
        .value;
        let lambda = lambda_from_phi(&phi, &m, &grid).unwrap();
        assert!((lambda - truncated).abs() < 1e-4, "{lambda} vs {truncated}");
        assert!((lambda - 0.375).abs() < 6e-3, "{lambda}");
    }

    #[test]
    fn gaussian_lambda_and_energy_identity() {
        let m = config::gaussian_model().unwrap();
        let (grid, phi) = solve_on(&m, 3, 1280).unwrap();
        let lambda = lambda_from_phi(&phi, &m, &grid).unwrap();
        assert!((lambda - 0.125).abs() < 1e-3, "{lambda}");
        let e = energy_breakdown(&phi, &m, &grid).unwrap();
        assert!((e.ell_energy - e.objective) / 8.0 - lambda < 1e-3);
        assert!(e.defect() <= e.bound(), "{e:?}");
    }

    #[test]
    fn gradient_2d_matches_log_p() {
        let m = config::load_bundled("gradient_2d").unwrap();
        let (grid, phi) = solve_on(&m, 2, 256).unwrap();
        let exact: Vec<f64> = grid.nodes.iter().map(|y| m.log_density(y)).collect();
        let mean = exact.iter().sum::<f64>() / exact.len() as f64;
        let shift = phi.values.iter().sum::<f64>() / exact.len() as f64 - mean;
        // The weight p ~ e^{-24} in the corners of E_2 leaves φ loosely pinned there.
        let err = grid
            .nodes
            .iter()
            .zip(exact.iter().zip(&phi.values))
            .filter(|(y, _)| y.iter().all(|v| v.abs() <= 2.0))
            .map(|(_, (e, v))| e + shift - v)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        assert!(err.1 - err.0 <= 1e-2, "error spread {err:?}");
    }

    #[test]
    fn flux_through_cir_truncation() {
        // (pc)'(x) = K (A/x − B) x^A e^{−Bx} with K = B^A / Γ(A) = 4.
        let m = config::cir_model(3.0, 2.0, 1.0).unwrap();
        let grid = Grid::new(&m, 4, 100).unwrap();
        let hand = |x: f64| 4.0 * (3.0 / x - 2.0) * x.powi(3) * (-2.0 * x).exp();
        let expected = hand(20.0) - hand(0.05);
        let got = flux_balance_diagnostic(&m, &grid);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        let coarse = flux_balance_diagnostic(&m, &Grid::new(&m, 2, 100).unwrap()).abs();
        let fine = flux_balance_diagnostic(&m, &Grid::new(&m, 8, 100).unwrap()).abs();
        assert!(fine < coarse * 1e-3);
    }

    #[test]
    fn simplex_grid_permutations_are_bijections() {
        let m = config::load_bundled("rank_demo").unwrap();
        let grid = Grid::new(&m, 4, 20).unwrap();
        for map in grid.node_permutations().unwrap() {
            let mut seen = vec![false; grid.node_count()];
            for &k in &map {
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
    }
}
