//! Neumann problems `div(A grad u) = -f` on a rectangle, zero conormal flux,
//! mean-zero normalization.
//!
//! The discrete operator is the Hessian of a quadrature of the energy
//! `1/2 int grad(u)^T A grad(u)`: diagonal coefficients live on grid edges
//! (boundary edges carry half weight), the off-diagonal coefficient on
//! cells. The natural boundary condition of the energy is the conormal
//! condition, so no ghost nodes appear explicitly and the matrix is
//! symmetric by construction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::demand_model::BoxDomain;
use crate::error::{Error, Result};

/// Uniform node lattice on a rectangle, `n` points per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    domain: BoxDomain,
    n: usize,
    h: [f64; 2],
}

impl Grid2D {
    pub const MIN_POINTS: usize = 17;

    pub fn new(domain: BoxDomain, n: usize) -> Result<Self> {
        if domain.dim() != 2 {
            return Err(Error::Unsupported(format!("grids are two-dimensional, got a {}-d box", domain.dim())));
        }
        if n < Self::MIN_POINTS || !(n - 1).is_power_of_two() {
            return Err(Error::Config(format!("grid size must be 2^k + 1 and at least 17, got {n}")));
        }
        let h = [domain.width(0) / (n - 1) as f64, domain.width(1) / (n - 1) as f64];
        Ok(Self { domain, n, h })
    }

    pub fn unit(n: usize) -> Result<Self> {
        Self::new(BoxDomain::cube(2, 0.0, 1.0)?, n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> [f64; 2] {
        self.h
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let lo = self.domain.lower();
        [lo[0] + i as f64 * self.h[0], lo[1] + j as f64 * self.h[1]]
    }

    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.n).flat_map(move |j| (0..self.n).map(move |i| self.node(i, j)))
    }

    pub fn on_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }

    /// Trapezoid weights times cell area.
    pub fn weights(&self) -> Vec<f64> {
        let last = self.n - 1;
        let axis = |k: usize| if k == 0 || k == last { 0.5 } else { 1.0 };
        let area = self.h[0] * self.h[1];
        (0..self.n).flat_map(|j| (0..self.n).map(move |i| area * axis(i) * axis(j))).collect()
    }

    /// Cell containing `z` (clamped) and local coordinates in `[0, 1]^2`.
    fn locate(&self, z: &[f64]) -> (usize, usize, f64, f64) {
        let lo = self.domain.lower();
        let locate_axis = |k: usize| {
            let s = ((z[k] - lo[k]) / self.h[k]).clamp(0.0, (self.n - 1) as f64);
            let c = (s.floor() as usize).min(self.n - 2);
            (c, s - c as f64)
        };
        let (i, tx) = locate_axis(0);
        let (j, ty) = locate_axis(1);
        (i, j, tx, ty)
    }

    pub fn from_fn<F: Fn([f64; 2]) -> f64>(&self, f: F) -> ScalarGridField {
        ScalarGridField { grid: self.clone(), values: self.nodes().map(f).collect() }
    }
}

/// Node values of a scalar field with bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGridField {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl ScalarGridField {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    /// Bilinear value; queries outside the box are clamped onto it.
    pub fn interpolate(&self, z: &[f64]) -> f64 {
        let (i, j, tx, ty) = self.grid.locate(z);
        let g = &self.grid;
        let v = &self.values;
        let a = v[g.index(i, j)] * (1.0 - tx) + v[g.index(i + 1, j)] * tx;
        let b = v[g.index(i, j + 1)] * (1.0 - tx) + v[g.index(i + 1, j + 1)] * tx;
        a * (1.0 - ty) + b * ty
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Quadrature mean with trapezoid weights.
    pub fn weighted_mean(&self) -> f64 {
        let w = self.grid.weights();
        let total: f64 = w.iter().sum();
        self.values.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / total
    }
}

/// Node values of a planar vector field with bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGridField {
    pub grid: Grid2D,
    pub values: Vec<[f64; 2]>,
}

impl VectorGridField {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self { grid: grid.clone(), values: vec![[0.0; 2]; grid.len()] }
    }

    pub fn interpolate(&self, z: &[f64]) -> [f64; 2] {
        let (i, j, tx, ty) = self.grid.locate(z);
        let g = &self.grid;
        let corner = |a: usize, b: usize| self.values[g.index(a, b)];
        let (c00, c10, c01, c11) = (corner(i, j), corner(i + 1, j), corner(i, j + 1), corner(i + 1, j + 1));
        let mut out = [0.0; 2];
        for k in 0..2 {
            let a = c00[k] * (1.0 - tx) + c10[k] * tx;
            let b = c01[k] * (1.0 - tx) + c11[k] * tx;
            out[k] = a * (1.0 - ty) + b * ty;
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v[0] == 0.0 && v[1] == 0.0)
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v[0].hypot(v[1])))
    }

    /// Largest operator 2-norm (Frobenius bound) of the difference Jacobian
    /// over all grid cells.
    pub fn lipschitz_estimate(&self) -> f64 {
        let g = &self.grid;
        let [h1, h2] = g.h();
        let mut best: f64 = 0.0;
        for j in 0..g.n() - 1 {
            for i in 0..g.n() - 1 {
                let c = |a, b| self.values[g.index(a, b)];
                let (c00, c10, c01, c11) = (c(i, j), c(i + 1, j), c(i, j + 1), c(i + 1, j + 1));
                let mut frob = 0.0;
                for k in 0..2 {
                    let dx = 0.5 * ((c10[k] - c00[k]) + (c11[k] - c01[k])) / h1;
                    let dy = 0.5 * ((c01[k] - c00[k]) + (c11[k] - c10[k])) / h2;
                    frob += dx * dx + dy * dy;
                }
                best = best.max(frob.sqrt());
            }
        }
        best
    }
}

/// Coefficient `A` of the elliptic operator.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Identity,
    /// `[a11, a12, a22]`.
    Constant([f64; 3]),
    /// `[a11, a12, a22]` per node.
    Nodal(Vec<[f64; 3]>),
}

impl Coefficient {
    fn at(&self, idx: usize) -> [f64; 3] {
        match self {
            Coefficient::Identity => [1.0, 0.0, 1.0],
            Coefficient::Constant(a) => *a,
            Coefficient::Nodal(v) => v[idx],
        }
    }
}

fn check_spd(a: [f64; 3]) -> Result<()> {
    let [a11, a12, a22] = a;
    let tr = 0.5 * (a11 + a22);
    let disc = (0.25 * (a11 - a22) * (a11 - a22) + a12 * a12).sqrt();
    let (lo, hi) = (tr - disc, tr + disc);
    if !(lo >= 1e-6 && hi <= 1e6) {
        return Err(Error::Config(format!("coefficient {a:?} has eigenvalues [{lo:e}, {hi:e}] outside [1e-6, 1e6]")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub coefficient: Coefficient,
    pub rhs: ScalarGridField,
}

impl EllipticProblem {
    pub fn new(coefficient: Coefficient, rhs: ScalarGridField) -> Result<Self> {
        match &coefficient {
            Coefficient::Identity => {}
            Coefficient::Constant(a) => check_spd(*a)?,
            Coefficient::Nodal(v) => {
                if v.len() != rhs.grid.len() {
                    return Err(Error::Config("nodal coefficient length does not match the grid".into()));
                }
                v.iter().try_for_each(|a| check_spd(*a))?;
            }
        }
        if rhs.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite right-hand side".into()));
        }
        Ok(Self { coefficient, rhs })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.rhs.grid
    }
}

/// Assembled edge and cell weights of the discrete operator `K`.
#[derive(Debug, Clone)]
pub struct Operator {
    n: usize,
    hx: Vec<f64>,
    hy: Vec<f64>,
    cross: Vec<f64>,
    h: [f64; 2],
    diag: Vec<f64>,
}

impl Operator {
    pub fn assemble(grid: &Grid2D, coefficient: &Coefficient) -> Self {
        let n = grid.n();
        let [h1, h2] = grid.h();
        let edge_factor = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        let a = |i: usize, j: usize| coefficient.at(grid.index(i, j));
        let mut hx = vec![0.0; (n - 1) * n];
        let mut hy = vec![0.0; n * (n - 1)];
        for j in 0..n {
            for i in 0..n - 1 {
                let avg = 0.5 * (a(i, j)[0] + a(i + 1, j)[0]);
                hx[j * (n - 1) + i] = avg * edge_factor(j) * h2 / h1;
            }
        }
        for j in 0..n - 1 {
            for i in 0..n {
                let avg = 0.5 * (a(i, j)[2] + a(i, j + 1)[2]);
                hy[j * n + i] = avg * edge_factor(i) * h1 / h2;
            }
        }
        let mut cross = vec![0.0; (n - 1) * (n - 1)];
        if !matches!(coefficient, Coefficient::Identity) {
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    let avg = 0.25 * (a(i, j)[1] + a(i + 1, j)[1] + a(i, j + 1)[1] + a(i + 1, j + 1)[1]);
                    cross[j * (n - 1) + i] = avg * h1 * h2;
                }
            }
        }
        let mut op = Self { n, hx, hy, cross, h: [h1, h2], diag: Vec::new() };
        op.diag = op.diagonal();
        op
    }

    fn diagonal(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n - 1 {
                let w = self.hx[j * (n - 1) + i];
                d[j * n + i] += w;
                d[j * n + i + 1] += w;
            }
        }
        for j in 0..n - 1 {
            for i in 0..n {
                let w = self.hy[j * n + i];
                d[j * n + i] += w;
                d[(j + 1) * n + i] += w;
            }
        }
        let [h1, h2] = self.h;
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                // d^2/du^2 of c gx gy at each corner: c * 2 * (+-1/2h1)(+-1/2h2).
                let c = self.cross[j * (n - 1) + i] * 0.5 / (h1 * h2);
                d[j * n + i] += c;
                d[(j + 1) * n + i + 1] += c;
                d[j * n + i + 1] -= c;
                d[(j + 1) * n + i] -= c;
            }
        }
        d
    }

    /// `out = K u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let row = j * n;
            for i in 0..n - 1 {
                let flux = self.hx[j * (n - 1) + i] * (u[row + i + 1] - u[row + i]);
                out[row + i] -= flux;
                out[row + i + 1] += flux;
            }
        }
        for j in 0..n - 1 {
            for i in 0..n {
                let flux = self.hy[j * n + i] * (u[(j + 1) * n + i] - u[j * n + i]);
                out[j * n + i] -= flux;
                out[(j + 1) * n + i] += flux;
            }
        }
        let [h1, h2] = self.h;
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let c = self.cross[j * (n - 1) + i];
                if c == 0.0 {
                    continue;
                }
                let (k00, k10, k01, k11) = (j * n + i, j * n + i + 1, (j + 1) * n + i, (j + 1) * n + i + 1);
                let gx = 0.5 * ((u[k10] - u[k00]) + (u[k11] - u[k01])) / h1;
                let gy = 0.5 * ((u[k01] - u[k00]) + (u[k11] - u[k10])) / h2;
                let sx = c * gy * 0.5 / h1;
                let sy = c * gx * 0.5 / h2;
                out[k00] += -sx - sy;
                out[k10] += sx - sy;
                out[k01] += -sx + sy;
                out[k11] += sx + sy;
            }
        }
    }
}

/// Solve outcome with the diagnostics the invariants refer to.
#[derive(Debug, Clone)]
pub struct NeumannSolution {
    pub u: ScalarGridField,
    pub iterations: usize,
    /// `||W f - K u|| / ||W f||`.
    pub relative_residual: f64,
    /// Trapezoid mean of f removed before solving.
    pub removed_mean: f64,
    /// Largest boundary-row residual per unit boundary length.
    pub boundary_flux: f64,
}

/// `div(A grad u) = -f` with zero conormal flux and `sum W u = 0`.
pub fn solve_neumann(prob: &EllipticProblem, tol: f64) -> Result<NeumannSolution> {
    if !(tol > 0.0 && tol <= 1e-3) {
        return Err(Error::Config(format!("solver tolerance must lie in (0, 1e-3], got {tol}")));
    }
    let grid = prob.grid();
    let weights = grid.weights();
    let fmax = prob.rhs.max_abs();
    let mean = prob.rhs.weighted_mean();
    if mean.abs() > 1e-3 * fmax {
        return Err(Error::Compatibility { mean, bound: 1e-3 * fmax });
    }
    let b: Vec<f64> = prob.rhs.values.iter().zip(&weights).map(|(f, w)| w * (f - mean)).collect();
    let op = Operator::assemble(grid, &prob.coefficient);
    let bnorm = norm(&b);
    let len = grid.len();
    let mut u = vec![0.0; len];
    let mut iterations = 0;
    let mut relres = 0.0;
    if bnorm > 0.0 {
        let max_iter = 10 * grid.n() * grid.n();
        let mut r = b.clone();
        let mut z = precondition(&op.diag, &r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut kp = vec![0.0; len];
        loop {
            relres = norm(&r) / bnorm;
            if relres <= tol {
                break;
            }
            if iterations >= max_iter {
                return Err(Error::Numeric(format!(
                    "conjugate gradient stalled at relative residual {relres:e} after {iterations} iterations"
                )));
            }
            op.apply(&p, &mut kp);
            let alpha = rz / dot(&p, &kp);
            for k in 0..len {
                u[k] += alpha * p[k];
                r[k] -= alpha * kp[k];
            }
            z = precondition(&op.diag, &r);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..len {
                p[k] = z[k] + beta * p[k];
            }
            iterations += 1;
        }
    }
    let wsum: f64 = weights.iter().sum();
    let umean = u.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() / wsum;
    u.iter_mut().for_each(|v| *v -= umean);

    let mut ku = vec![0.0; len];
    op.apply(&u, &mut ku);
    let [h1, h2] = grid.h();
    let n = grid.n();
    let mut boundary_flux: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            if !grid.on_boundary(i, j) {
                continue;
            }
            let idx = grid.index(i, j);
            let along_x = if j == 0 || j == n - 1 { if i == 0 || i == n - 1 { 0.5 * h1 } else { h1 } } else { 0.0 };
            let along_y = if i == 0 || i == n - 1 { if j == 0 || j == n - 1 { 0.5 * h2 } else { h2 } } else { 0.0 };
            boundary_flux = boundary_flux.max((b[idx] - ku[idx]).abs() / (along_x + along_y));
        }
    }
    Ok(NeumannSolution {
        u: ScalarGridField { grid: grid.clone(), values: u },
        iterations,
        relative_residual: relres,
        removed_mean: mean,
        boundary_flux,
    })
}

/// Jacobi step followed by projection onto mean-zero vectors, which is the
/// range of `K`.
fn precondition(diag: &[f64], r: &[f64]) -> Vec<f64> {
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let m = z.iter().sum::<f64>() / z.len() as f64;
    z.iter_mut().for_each(|v| *v -= m);
    z
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The discrete operator `L = W^{-1} K` applied to node values.
pub fn apply_operator(grid: &Grid2D, coefficient: &Coefficient, u: &[f64]) -> Vec<f64> {
    let op = Operator::assemble(grid, coefficient);
    let mut ku = vec![0.0; u.len()];
    op.apply(u, &mut ku);
    ku.iter().zip(grid.weights()).map(|(k, w)| -k / w).collect()
}

/// Gradient with its boundary diagnostic.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub field: VectorGridField,
    /// Largest `|grad u . normal|` over boundary nodes.
    pub boundary_normal: f64,
}

/// Central differences inside, second-order one-sided differences on edges.
pub fn grad_field(u: &ScalarGridField) -> Gradient {
    let g = &u.grid;
    let n = g.n();
    let [h1, h2] = g.h();
    let v = &u.values;
    let diff = |at: &dyn Fn(usize) -> f64, k: usize, h: f64| {
        if k == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if k == n - 1 {
            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * h)
        }
    };
    let mut values = vec![[0.0; 2]; g.len()];
    let mut boundary_normal: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let gx = diff(&|a| v[g.index(a, j)], i, h1);
            let gy = diff(&|b| v[g.index(i, b)], j, h2);
            values[g.index(i, j)] = [gx, gy];
            if i == 0 || i == n - 1 {
                boundary_normal = boundary_normal.max(gx.abs());
            }
            if j == 0 || j == n - 1 {
                boundary_normal = boundary_normal.max(gy.abs());
            }
        }
    }
    Gradient { field: VectorGridField { grid: g.clone(), values }, boundary_normal }
}

/// Manufactured Neumann problems on the unit square with known solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manufactured {
    /// `A = I`, `u = cos(pi x) cos(pi y)`.
    Cosine,
    /// `A = diag(4, 1)`, same `u`.
    Anisotropic,
    /// `A = [[1, b], [b, 1]]` with `b = 0.5 sin(pi x) sin(pi y)`, same `u`.
    CrossTerm,
    /// `f = 0`, `u = 0`.
    Zero,
}

impl Manufactured {
    pub fn exact(self, z: [f64; 2]) -> f64 {
        match self {
            Manufactured::Zero => 0.0,
            _ => (PI * z[0]).cos() * (PI * z[1]).cos(),
        }
    }

    pub fn problem(self, n: usize) -> Result<EllipticProblem> {
        let grid = Grid2D::unit(n)?;
        let pi2 = PI * PI;
        let (coef, rhs) = match self {
            Manufactured::Cosine => (Coefficient::Identity, grid.from_fn(|z| 2.0 * pi2 * self.exact(z))),
            Manufactured::Anisotropic => {
                (Coefficient::Constant([4.0, 0.0, 1.0]), grid.from_fn(|z| 5.0 * pi2 * self.exact(z)))
            }
            Manufactured::CrossTerm => {
                let coef = Coefficient::Nodal(
                    grid.nodes()
                        .map(|z| [1.0, 0.5 * (PI * z[0]).sin() * (PI * z[1]).sin(), 1.0])
                        .collect(),
                );
                let rhs = grid.from_fn(|z| {
                    let (s1, c1) = (PI * z[0]).sin_cos();
                    let (s2, c2) = (PI * z[1]).sin_cos();
                    2.0 * pi2 * c1 * c2 + 0.5 * pi2 * (c1 * c1 * s2 * s2 + s1 * s1 * c2 * c2 - 2.0 * s1 * s1 * s2 * s2)
                });
                (coef, rhs)
            }
            Manufactured::Zero => (Coefficient::Identity, ScalarGridField::zeros(&grid)),
        };
        EllipticProblem::new(coef, rhs)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub sizes: Vec<usize>,
    pub errors: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Least-squares slope of `log error` against `log h`; `None` when every
    /// error is exactly zero.
    pub order: Option<f64>,
}

impl ConvergenceReport {
    pub fn order_label(&self) -> String {
        match self.order {
            Some(o) => format!("{o:.4}"),
            None => "exact".into(),
        }
    }
}

/// L-infinity error of the mean-zero discrete solution for each size, and
/// the observed order.
pub fn convergence_check(problem: Manufactured, sizes: &[usize], tol: f64) -> Result<ConvergenceReport> {
    if sizes.len() < 3 {
        return Err(Error::Config(format!("insufficient sizes: need at least 3 grid sizes, got {}", sizes.len())));
    }
    let mut errors = Vec::with_capacity(sizes.len());
    let mut iterations = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let prob = problem.problem(n)?;
        let sol = solve_neumann(&prob, tol)?;
        let exact = prob.grid().from_fn(|z| problem.exact(z));
        let shift = exact.weighted_mean();
        let err = sol.u.values.iter().zip(&exact.values).fold(0.0f64, |m, (a, b)| m.max((a - (b - shift)).abs()));
        errors.push(err);
        iterations.push(sol.iterations);
    }
    let order = if errors.iter().all(|e| *e == 0.0) {
        None
    } else {
        let pts: Vec<(f64, f64)> =
            sizes.iter().zip(&errors).map(|(n, e)| ((1.0 / (*n - 1) as f64).ln(), e.max(1e-300).ln())).collect();
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    };
    Ok(ConvergenceReport { sizes: sizes.to_vec(), errors, iterations, order })
}
