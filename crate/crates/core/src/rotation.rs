//! Step two: a compactly supported field `w_x` with `div(rho_x w_x) = 0` and
//! prescribed moments `int w_i q_j dmu_x = a_ij(x)`, added to the income leg
//! so that the average Slutsky matrix of the constructed system hits a
//! chosen member `S = T/2 + C` of the identified set.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::demand_model::{reference_sample, sample_at, BoxDomain, DemandFamily, PriceIncome};
use crate::error::{Error, Result};
use crate::identification::moments_or_fd;
use crate::seed;
use crate::stats::MeanSe;
use crate::transport::{leg_knot_positions, spline_slopes, CompositeFlow, CorrectionBuilder, Leg, LegCorrection};

/// Surface area of the unit sphere in `R^d`.
fn sphere_area(d: usize) -> f64 {
    match d {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI / (d - 2) as f64 * sphere_area(d - 2),
    }
}

/// Radial `C^inf` bump `exp(-1/(1 - |(w - c)/r|^2))`, normalized to unit
/// mass on the reference support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BumpFunction {
    center: Vec<f64>,
    radius: f64,
    norm: f64,
}

impl BumpFunction {
    /// The closed ball must sit inside `support` with margin `0.25 r`.
    pub fn new(center: Vec<f64>, radius: f64, support: &BoxDomain) -> Result<Self> {
        if center.len() != support.dim() || !(radius > 0.0) {
            return Err(Error::Config("bump center dimension or radius invalid".into()));
        }
        for (i, c) in center.iter().enumerate() {
            let slack = 1e-12 * support.width(i);
            if c - 1.25 * radius < support.lower()[i] - slack || c + 1.25 * radius > support.upper()[i] + slack {
                return Err(Error::Config(format!(
                    "bump ball B({center:?}, {radius}) is not inside the reference support with margin 0.25r"
                )));
            }
        }
        let d = center.len();
        let radial = quadrature::double_exponential::integrate(
            |s| if s >= 1.0 { 0.0 } else { (-1.0 / (1.0 - s * s)).exp() * s.powi(d as i32 - 1) },
            0.0,
            1.0,
            1e-14,
        )
        .integral;
        let norm = radius.powi(d as i32) * sphere_area(d) * radial;
        Ok(Self { center, radius, norm })
    }

    /// Centered on the support with the largest radius the margin allows.
    pub fn standard(support: &BoxDomain) -> Result<Self> {
        let half = (0..support.dim()).map(|i| 0.5 * support.width(i)).fold(f64::INFINITY, f64::min);
        Self::new(support.center(), 0.8 * half, support)
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn scaled_sq(&self, omega: &[f64]) -> f64 {
        omega.iter().zip(&self.center).map(|(w, c)| (w - c) * (w - c)).sum::<f64>() / (self.radius * self.radius)
    }

    /// Open-ball membership; the bump vanishes elsewhere.
    pub fn contains(&self, omega: &[f64]) -> bool {
        self.scaled_sq(omega) < 1.0
    }

    pub fn value(&self, omega: &[f64]) -> f64 {
        let u = self.scaled_sq(omega);
        if u >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - u)).exp() / self.norm
        }
    }

    pub fn gradient(&self, omega: &[f64], out: &mut [f64]) {
        let u = self.scaled_sq(omega);
        if u >= 1.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let v = (-1.0 / (1.0 - u)).exp() / self.norm;
        let scale = -v / ((1.0 - u) * (1.0 - u)) * 2.0 / (self.radius * self.radius);
        for (o, (w, c)) in out.iter_mut().zip(omega.iter().zip(&self.center)) {
            *o = scale * (w - c);
        }
    }
}

/// `psi_x(q) = psi(T_x^{-1} q)` and its `q`-gradient `A_x^T grad psi`.
/// Not divided by the mass `Z_x` (see [`bump_mass`]).
pub fn bump_eval(bump: &BumpFunction, f: &dyn DemandFamily, x: &PriceIncome, q: &[f64]) -> (f64, Vec<f64>) {
    let d = f.dim();
    let mut omega = vec![0.0; d];
    f.inverse(x.coords(), q, &mut omega);
    let mut grad = vec![0.0; d];
    if !bump.contains(&omega) {
        return (0.0, grad);
    }
    let mut g = vec![0.0; d];
    bump.gradient(&omega, &mut g);
    let a = inverse_jacobian(f, x.coords(), &omega);
    for (i, gi) in grad.iter_mut().enumerate() {
        *gi = (0..d).map(|k| a[(k, i)] * g[k]).sum();
    }
    (bump.value(&omega), grad)
}

fn inverse_jacobian(f: &dyn DemandFamily, x: &[f64], omega: &[f64]) -> DMatrix<f64> {
    let d = f.dim();
    let mut jac = vec![0.0; d * d];
    f.jacobian(x, omega, &mut jac);
    DMatrix::from_row_slice(d, d, &jac).try_inverse().expect("support map is a diffeomorphism")
}

/// `Z_x = int psi_x dq = int psi |det DT_x| dw`, midpoint rule on a
/// `128^d` grid over the ball's bounding box.
pub fn bump_mass(bump: &BumpFunction, f: &dyn DemandFamily, x: &PriceIncome) -> f64 {
    let d = f.dim();
    let m = 128usize;
    let r = bump.radius;
    let h = 2.0 * r / m as f64;
    let mut omega = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut total = 0.0;
    for idx in 0..m.pow(d as u32) {
        let mut rest = idx;
        for (k, w) in omega.iter_mut().enumerate() {
            *w = bump.center[k] - r + h * ((rest % m) as f64 + 0.5);
            rest /= m;
        }
        let v = bump.value(&omega);
        if v == 0.0 {
            continue;
        }
        f.jacobian(x.coords(), &omega, &mut jac);
        total += v * DMatrix::from_row_slice(d, d, &jac).determinant().abs();
    }
    total * h.powi(d as i32)
}

/// Antisymmetric part `C(x)` of a Slutsky target.
#[derive(Debug, Clone)]
pub enum TargetC {
    Constant(DMatrix<f64>),
    Lattice(LatticeTarget),
}

/// `C` tabulated on a rectangular lattice over the price-income box,
/// multilinear in between and clamped outside.
#[derive(Debug, Clone)]
pub struct LatticeTarget {
    axes: Vec<Vec<f64>>,
    /// Upper-triangle entries `c_ij`, `i < j`, per lattice node in
    /// row-major order over `axes`.
    values: Vec<Vec<f64>>,
    d: usize,
}

impl LatticeTarget {
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let dims = self.axes.len();
        let mut lo_idx = vec![0usize; dims];
        let mut frac = vec![0.0; dims];
        for (k, axis) in self.axes.iter().enumerate() {
            if axis.len() == 1 {
                continue;
            }
            let v = x[k].clamp(axis[0], axis[axis.len() - 1]);
            let i = axis.partition_point(|a| *a <= v).clamp(1, axis.len() - 1) - 1;
            lo_idx[k] = i;
            frac[k] = (v - axis[i]) / (axis[i + 1] - axis[i]);
        }
        let pairs = self.d * (self.d - 1) / 2;
        let mut acc = vec![0.0; pairs];
        for corner in 0..1usize << dims {
            let mut weight = 1.0;
            let mut flat = 0;
            for k in 0..dims {
                let up = corner >> k & 1 == 1;
                let len = self.axes[k].len();
                if len == 1 && up {
                    weight = 0.0;
                    break;
                }
                weight *= if up { frac[k] } else { 1.0 - frac[k] };
                flat = flat * len + lo_idx[k] + usize::from(up);
            }
            if weight == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(&self.values[flat]) {
                *a += weight * v;
            }
        }
        antisymmetric_from_upper(self.d, &acc)
    }
}

fn antisymmetric_from_upper(d: usize, upper: &[f64]) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i + 1..d {
            c[(i, j)] = upper[k];
            c[(j, i)] = -upper[k];
            k += 1;
        }
    }
    c
}

/// A member `S(x) = T(x)/2 + C(x)` of the identified set.
#[derive(Debug, Clone)]
pub struct SlutskyTarget {
    c: TargetC,
}

impl SlutskyTarget {
    pub fn symmetric(d: usize) -> Self {
        Self { c: TargetC::Constant(DMatrix::zeros(d, d)) }
    }

    /// Constant `C` with `C_12 = c` for two goods.
    pub fn constant_c12(c: f64) -> Self {
        Self { c: TargetC::Constant(antisymmetric_from_upper(2, &[c])) }
    }

    pub fn constant(c: DMatrix<f64>) -> Result<Self> {
        if !c.is_square() || (&c + c.transpose()).amax() != 0.0 {
            return Err(Error::Config("target C must be square and exactly antisymmetric".into()));
        }
        Ok(Self { c: TargetC::Constant(c) })
    }

    /// CSV with columns `p1..pd, y, c12, c13, ..., c(d-1)d` on a complete
    /// lattice.
    pub fn from_csv(path: &Path, d: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let pairs = d * (d - 1) / 2;
        let mut expected: Vec<String> = (1..=d).map(|i| format!("p{i}")).collect();
        expected.push("y".into());
        for i in 1..=d {
            for j in i + 1..=d {
                expected.push(format!("c{i}{j}"));
            }
        }
        if header != expected {
            return Err(Error::Parse { row: 1, msg: format!("expected header {}, found {}", expected.join(","), header.join(",")) });
        }
        let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = k + 2;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Parse { row, msg: "non-numeric or non-finite value".into() })?;
            if vals.len() != d + 1 + pairs {
                return Err(Error::Parse { row, msg: format!("expected {} columns, found {}", d + 1 + pairs, vals.len()) });
            }
            rows.push((vals[..=d].to_vec(), vals[d + 1..].to_vec()));
        }
        let lattice = Lattice::from_points(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())?;
        let mut values = vec![Vec::new(); lattice.len()];
        for (pt, v) in rows {
            values[lattice.flat_index(&pt).expect("lattice built from these points")] = v;
        }
        Ok(Self { c: TargetC::Lattice(LatticeTarget { axes: lattice.axes, values, d }) })
    }

    pub fn c(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.c {
            TargetC::Constant(c) => c.clone(),
            TargetC::Lattice(l) => l.eval(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(&self.c, TargetC::Constant(c) if c.iter().all(|v| *v == 0.0))
    }

    /// `S = T/2 + C`.
    pub fn s(&self, x: &[f64], t: &DMatrix<f64>) -> DMatrix<f64> {
        t * 0.5 + self.c(x)
    }
}

/// Rectangular lattice recovered from scattered rows.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub axes: Vec<Vec<f64>>,
}

impl Lattice {
    /// Every combination of the distinct per-axis values must appear
    /// exactly once.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dims = points.first().map_or(0, Vec::len);
        let mut axes = vec![Vec::new(); dims];
        for p in points {
            for (k, v) in p.iter().enumerate() {
                axes[k].push(*v);
            }
        }
        for a in axes.iter_mut() {
            a.sort_by(f64::total_cmp);
            a.dedup();
        }
        let lat = Self { axes };
        let mut seen = vec![false; lat.len()];
        for (k, p) in points.iter().enumerate() {
            let i = lat.flat_index(p).expect("axis values come from the points");
            if seen[i] {
                return Err(Error::Parse { row: k + 2, msg: format!("duplicate lattice node {p:?}") });
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse {
                row: points.len() + 1,
                msg: format!("missing lattice node (p, y) = {:?}", lat.point(missing)),
            });
        }
        Ok(lat)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, p: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for (k, axis) in self.axes.iter().enumerate() {
            let i = axis.iter().position(|a| *a == p[k])?;
            flat = flat * axis.len() + i;
        }
        Some(flat)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for k in (0..self.axes.len()).rev() {
            idx[k] = flat % self.axes[k].len();
            flat /= self.axes[k].len();
        }
        idx
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).iter().zip(&self.axes).map(|(i, a)| a[*i]).collect()
    }
}

/// Coefficients `a_ij(x)` of the rotation field, with the Monte Carlo
/// diagnostics of the pre-symmetrization estimate.
#[derive(Debug, Clone)]
pub struct RotationCoeffs {
    pub x: PriceIncome,
    /// Exactly antisymmetric; entries at round-off level flushed to zero.
    pub a: DMatrix<f64>,
    /// Estimate before antisymmetrization.
    pub raw: DMatrix<f64>,
    /// `raw_ij + raw_ji` off the diagonal, `raw_ii` on it.
    pub defect: DMatrix<f64>,
    /// Standard errors of `defect`.
    pub defect_se: DMatrix<f64>,
    /// Standard errors of `raw`.
    pub raw_se: DMatrix<f64>,
    pub n: usize,
}

impl RotationCoeffs {
    /// Largest `|defect| / se`, ignoring entries with zero spread.
    pub fn worst_defect_ratio(&self) -> f64 {
        self.defect.iter().zip(self.defect_se.iter()).fold(0.0, |m, (d, s)| if *s > 0.0 { m.max(d.abs() / s) } else { m })
    }
}

/// `vbar_i q_j` for one draw, with `vbar = d_y T_x(psi) + DT_x(psi) v(y, psi)`
/// the step-one income-leg velocity in `q` coordinates.
fn vbar_products(f: &dyn DemandFamily, x: &[f64], leg: &Leg, psi: &[f64; 2], q: &[f64]) -> Vec<f64> {
    let d = f.dim();
    let base = leg.velocity(x[d], psi);
    let mut dty = vec![0.0; d];
    f.forward_dx(x, psi, d, &mut dty);
    let mut jac = vec![0.0; d * d];
    f.jacobian(x, psi, &mut jac);
    let vbar: Vec<f64> = (0..d).map(|i| dty[i] + (0..d).map(|k| jac[i * d + k] * base[k]).sum::<f64>()).collect();
    (0..d * d).map(|ij| vbar[ij / d] * q[ij % d]).collect()
}

/// `a_ij = S_ij - D_{p_j} m_i - E[vbar_i(Q) Q_j]` with `vbar` the
/// step-one income-leg velocity in `q` coordinates, over `n` reference
/// draws pushed through the step-one flow.
pub fn compute_coeffs(
    f: &dyn DemandFamily,
    target: &SlutskyTarget,
    flow: &CompositeFlow,
    x: &PriceIncome,
    n: usize,
    seed: u64,
) -> Result<RotationCoeffs> {
    if n < 2 {
        return Err(Error::Config("coefficient estimation needs at least 2 draws".into()));
    }
    let prep = flow.prepare_step1(x)?;
    let omegas = reference_sample(f, n, seed::derive(seed, "coeffs"))?;
    let products: Vec<Vec<f64>> = omegas
        .par_iter()
        .map(|w| {
            let pt = flow.eval_prepared(&prep, w, false)?;
            Ok(vbar_products(f, x.coords(), prep.final_leg(), &pt.reference, &pt.q))
        })
        .collect::<Result<_>>()?;
    coeffs_from_products(f, target, x, &products, seed)
}

/// [`compute_coeffs`] at every income knot of the flow for prices `p`,
/// following each draw along the income leg once.
pub fn compute_coeffs_along(
    f: &dyn DemandFamily,
    target: &SlutskyTarget,
    flow: &CompositeFlow,
    p: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<RotationCoeffs>> {
    if n < 2 {
        return Err(Error::Config("coefficient estimation needs at least 2 draws".into()));
    }
    let d = f.dim();
    let mut start = p.to_vec();
    start.push(f.domain().lower()[d]);
    let prep = flow.prepare_step1(&PriceIncome::from_coords(start))?;
    let leg = prep.final_leg();
    let points: Vec<Vec<f64>> = leg.knots.iter().map(|y| leg.point(*y)).collect();
    let omegas = reference_sample(f, n, seed::derive(seed, "coeffs"))?;
    let per_draw: Vec<Vec<Vec<f64>>> = omegas
        .par_iter()
        .map(|w| {
            let z0 = flow.eval_prepared(&prep, w, true)?.reference;
            let path = leg_knot_positions(leg, &z0, flow.config().steps)?;
            Ok(path
                .iter()
                .zip(&points)
                .map(|(psi, x)| {
                    let mut q = [0.0; 2];
                    f.forward(x, psi, &mut q);
                    vbar_products(f, x, leg, psi, &q)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    points
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let products: Vec<Vec<f64>> = per_draw.iter().map(|r| r[k].clone()).collect();
            coeffs_from_products(f, target, &PriceIncome::from_coords(x.clone()), &products, seed)
        })
        .collect()
}

fn coeffs_from_products(
    f: &dyn DemandFamily,
    target: &SlutskyTarget,
    x: &PriceIncome,
    products: &[Vec<f64>],
    seed: u64,
) -> Result<RotationCoeffs> {
    let d = f.dim();
    let moments = moments_or_fd(f, x, 20_000, seed::derive(seed, "moments"))?;
    let t = moments.t_matrix();
    let s = target.s(x.coords(), &t);
    let dpm = moments.price_jacobian();
    let stat = |ij: &dyn Fn(&[f64]) -> f64| MeanSe::from_iter(products.iter().map(|p| ij(p)));
    let mut raw = DMatrix::zeros(d, d);
    let mut raw_se = DMatrix::zeros(d, d);
    let mut defect = DMatrix::zeros(d, d);
    let mut defect_se = DMatrix::zeros(d, d);
    let mut scale: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = stat(&|p| p[i * d + j]);
            raw[(i, j)] = s[(i, j)] - dpm[(i, j)] - e.mean;
            raw_se[(i, j)] = e.se;
            scale = scale.max(s[(i, j)].abs()).max(dpm[(i, j)].abs()).max(e.mean.abs());
        }
    }
    for i in 0..d {
        for j in 0..d {
            if i == j {
                defect[(i, i)] = raw[(i, i)];
                defect_se[(i, i)] = raw_se[(i, i)];
            } else {
                defect[(i, j)] = raw[(i, j)] + raw[(j, i)];
                defect_se[(i, j)] = stat(&|p| p[i * d + j] + p[j * d + i]).se;
            }
        }
    }
    let flush = 1e-12 * (1.0 + scale);
    for (dv, sv) in defect.iter().zip(defect_se.iter()) {
        if dv.abs() > 5.0 * sv + flush {
            return Err(Error::Inconsistency(format!(
                "rotation coefficients at {:?}: symmetric defect {dv:e} exceeds 5 standard errors ({sv:e})",
                x.coords()
            )));
        }
    }
    let mut a = (&raw - raw.transpose()) * 0.5;
    a.iter_mut().for_each(|v| {
        if v.abs() <= flush {
            *v = 0.0;
        }
    });
    Ok(RotationCoeffs { x: x.clone(), a, raw, defect, defect_se, raw_se, n: products.len() })
}

/// `w_i = (rho Z)^{-1} (-sum_{k>=i} a_ik D_k psi_x + sum_{k<i} a_ki D_k psi_x)`
/// at `q`; zero outside the bump image.
pub fn rotation_field(
    a: &DMatrix<f64>,
    bump: &BumpFunction,
    f: &dyn DemandFamily,
    x: &PriceIncome,
    mass: f64,
    q: &[f64],
) -> Result<Vec<f64>> {
    let d = f.dim();
    let (value, g) = bump_eval(bump, f, x, q);
    if value == 0.0 {
        return Ok(vec![0.0; d]);
    }
    let rho = f.density(x.coords(), q);
    if !(rho >= f.density_floor()) {
        return Err(Error::Regularity(format!("density {rho:e} below floor inside the bump at {q:?}")));
    }
    Ok(stream_combination(a, &g, 1.0 / (rho * mass)))
}

fn stream_combination(a: &DMatrix<f64>, g: &[f64], scale: f64) -> Vec<f64> {
    let d = g.len();
    (0..d)
        .map(|i| {
            let neg: f64 = (i..d).map(|k| a[(i, k)] * g[k]).sum();
            let pos: f64 = (0..i).map(|k| a[(k, i)] * g[k]).sum();
            scale * (pos - neg)
        })
        .collect()
}

/// Income-leg correction for fixed prices (two goods): `A_x(w) w_x(T_x w)`
/// in reference coordinates, with `a_12` and `Z` splined across the income
/// knots.
pub struct RotationCorrection {
    family: Arc<dyn DemandFamily>,
    bump: BumpFunction,
    p: [f64; 2],
    y0: f64,
    dy: f64,
    a12: Vec<f64>,
    a12_slope: Vec<f64>,
    mass: Vec<f64>,
    mass_slope: Vec<f64>,
    coeffs: Vec<RotationCoeffs>,
    lipschitz: f64,
}

impl RotationCorrection {
    /// `a_12` and the bump mass at income `y`.
    pub fn coefficients_at(&self, y: f64) -> (f64, f64) {
        let k = self.a12.len();
        let s = ((y - self.y0) / self.dy).clamp(0.0, (k - 1) as f64);
        let i = (s.floor() as usize).min(k - 2);
        let w = s - i as f64;
        let (w2, w3) = (w * w, w * w * w);
        let c = [2.0 * w3 - 3.0 * w2 + 1.0, (w3 - 2.0 * w2 + w) * self.dy, -2.0 * w3 + 3.0 * w2, (w3 - w2) * self.dy];
        let mix = |v: &[f64], sl: &[f64]| c[0] * v[i] + c[1] * sl[i] + c[2] * v[i + 1] + c[3] * sl[i + 1];
        (mix(&self.a12, &self.a12_slope), mix(&self.mass, &self.mass_slope))
    }

    /// Per-knot coefficient estimates.
    pub fn knot_coeffs(&self) -> &[RotationCoeffs] {
        &self.coeffs
    }

    pub fn bump(&self) -> &BumpFunction {
        &self.bump
    }
}

impl LegCorrection for RotationCorrection {
    fn velocity(&self, y: f64, omega: &[f64; 2]) -> [f64; 2] {
        let (c, r) = (self.bump.center(), self.bump.radius());
        let (d0, d1) = (omega[0] - c[0], omega[1] - c[1]);
        let u = (d0 * d0 + d1 * d1) / (r * r);
        if u >= 1.0 {
            return [0.0; 2];
        }
        let f = self.family.as_ref();
        let x = [self.p[0], self.p[1], y];
        let (a12, z) = self.coefficients_at(y);
        let psi = (-1.0 / (1.0 - u)).exp() / self.bump.norm;
        let dpsi = -psi / ((1.0 - u) * (1.0 - u)) * 2.0 / (r * r);
        let g = [dpsi * d0, dpsi * d1];
        let mut j = [0.0; 4];
        f.jacobian(&x, omega, &mut j);
        let det = j[0] * j[3] - j[1] * j[2];
        let inv = [j[3] / det, -j[1] / det, -j[2] / det, j[0] / det];
        // q-gradient of the bump, then w = (a / (rho Z)) (-g2, g1) with
        // rho(T w) = rho~(w) / |det DT|.
        let gq = [inv[0] * g[0] + inv[2] * g[1], inv[1] * g[0] + inv[3] * g[1]];
        let scale = a12 * det.abs() / (f.pullback_density(&x, omega) * z);
        let w = [-scale * gq[1], scale * gq[0]];
        [inv[0] * w[0] + inv[1] * w[1], inv[2] * w[0] + inv[3] * w[1]]
    }

    fn may_act(&self, omega: &[f64; 2]) -> bool {
        self.bump.contains(omega)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Builds [`RotationCorrection`]s for a target.
pub struct RotationBuilder {
    target: SlutskyTarget,
    bump: BumpFunction,
    n: usize,
    seed: u64,
}

impl RotationBuilder {
    /// `n` reference draws per knot for the coefficient estimates.
    pub fn new(f: &dyn DemandFamily, target: SlutskyTarget, n: usize, seed: u64) -> Result<Self> {
        if f.dim() != 2 {
            return Err(Error::Unsupported(format!("the income-leg correction is implemented for d = 2, family has d = {}", f.dim())));
        }
        Ok(Self { target, bump: BumpFunction::standard(&f.reference_support())?, n, seed })
    }

    pub fn bump(&self) -> &BumpFunction {
        &self.bump
    }

    /// Correction for prices `p`, or `None` when `a` vanishes at every knot.
    pub fn modified_leg(&self, flow: &CompositeFlow, p: &[f64]) -> Result<Option<RotationCorrection>> {
        let f = flow.family().clone();
        let coeffs = compute_coeffs_along(f.as_ref(), &self.target, flow, p, self.n, self.seed)?;
        if coeffs.iter().all(|c| c.a.iter().all(|v| *v == 0.0)) {
            return Ok(None);
        }
        let y0 = coeffs[0].x.y();
        let dy = coeffs[1].x.y() - y0;
        let a12: Vec<f64> = coeffs.iter().map(|c| c.a[(0, 1)]).collect();
        let mass: Vec<f64> = coeffs.iter().map(|c| bump_mass(&self.bump, f.as_ref(), &c.x)).collect();
        let mut corr = RotationCorrection {
            family: f.clone(),
            bump: self.bump.clone(),
            p: [p[0], p[1]],
            y0,
            dy,
            a12_slope: spline_slopes(&a12, dy),
            a12,
            mass_slope: spline_slopes(&mass, dy),
            mass,
            coeffs,
            lipschitz: 0.0,
        };
        corr.lipschitz = correction_lipschitz(&corr);
        Ok(Some(corr))
    }
}

/// Largest difference-quotient Jacobian norm of the correction over a
/// lattice covering the bump ball, at every income knot.
fn correction_lipschitz(c: &RotationCorrection) -> f64 {
    let m = 41usize;
    let r = c.bump.radius;
    let h = 2.0 * r / (m - 1) as f64;
    let ctr = c.bump.center();
    let mut best: f64 = 0.0;
    for k in 0..c.a12.len() {
        let y = c.y0 + k as f64 * c.dy;
        let grid: Vec<[f64; 2]> = (0..m * m)
            .map(|idx| c.velocity(y, &[ctr[0] - r + h * (idx % m) as f64, ctr[1] - r + h * (idx / m) as f64]))
            .collect();
        for j in 0..m - 1 {
            for i in 0..m - 1 {
                let (v00, v10, v01) = (grid[j * m + i], grid[j * m + i + 1], grid[(j + 1) * m + i]);
                let frob: f64 = (0..2).map(|q| ((v10[q] - v00[q]) / h).powi(2) + ((v01[q] - v00[q]) / h).powi(2)).sum();
                best = best.max(frob.sqrt());
            }
        }
    }
    best.max(1e-12)
}

impl CorrectionBuilder for RotationBuilder {
    fn build(&self, flow: &CompositeFlow, p: &[f64]) -> Result<Option<Arc<dyn LegCorrection>>> {
        Ok(self.modified_leg(flow, p)?.map(|c| Arc::new(c) as Arc<dyn LegCorrection>))
    }
}

/// Monte Carlo `E[w_i(Q) q_j]` under `mu_x`, with the bump image center
/// subtracted from `q_j` as a control variate (`E[w] = 0`).
pub fn moment_identity(
    a: &DMatrix<f64>,
    bump: &BumpFunction,
    f: &dyn DemandFamily,
    x: &PriceIncome,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = f.dim();
    let mass = bump_mass(bump, f, x);
    let mut center = vec![0.0; d];
    f.forward(x.coords(), bump.center(), &mut center);
    let draws = sample_at(f, x, n, seed)?;
    let rows: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|q| {
            let w = rotation_field(a, bump, f, x, mass, q)?;
            Ok((0..d * d).map(|ij| w[ij / d] * (q[ij % d] - center[ij % d])).collect())
        })
        .collect::<Result<_>>()?;
    let mut est = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for ij in 0..d * d {
        let s = MeanSe::from_iter(rows.iter().map(|r| r[ij]));
        est[(ij / d, ij % d)] = s.mean;
        se[(ij / d, ij % d)] = s.se;
    }
    Ok((est, se))
}

/// Divergence diagnostics of `rho_x w_x` on a `m x m` node lattice over
/// the support `Omega_x`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DivergenceReport {
    /// `||div(rho w)||_2` over `||d_1 (rho w)_1||_2 + ||d_2 (rho w)_2||_2`,
    /// central differences throughout.
    pub relative_divergence: f64,
    /// Largest `|w|` on boundary nodes.
    pub boundary_max: f64,
}

pub fn weighted_divergence(
    a: &DMatrix<f64>,
    bump: &BumpFunction,
    f: &dyn DemandFamily,
    x: &PriceIncome,
    m: usize,
) -> Result<DivergenceReport> {
    if f.dim() != 2 {
        return Err(Error::Unsupported("divergence check is two-dimensional".into()));
    }
    let support = f.support(x.coords());
    let mass = bump_mass(bump, f, x);
    let h = [support.width(0) / (m - 1) as f64, support.width(1) / (m - 1) as f64];
    let node = |i: usize, j: usize| [support.lower()[0] + i as f64 * h[0], support.lower()[1] + j as f64 * h[1]];
    let mut flux = vec![[0.0; 2]; m * m];
    let mut boundary_max: f64 = 0.0;
    for j in 0..m {
        for i in 0..m {
            let q = node(i, j);
            let w = rotation_field(a, bump, f, x, mass, &q)?;
            let rho = f.density(x.coords(), &q);
            flux[j * m + i] = [rho * w[0], rho * w[1]];
            if i == 0 || j == 0 || i == m - 1 || j == m - 1 {
                boundary_max = boundary_max.max(w[0].abs()).max(w[1].abs());
            }
        }
    }
    let (mut div2, mut d1sq, mut d2sq) = (0.0, 0.0, 0.0);
    for j in 1..m - 1 {
        for i in 1..m - 1 {
            let d1 = (flux[j * m + i + 1][0] - flux[j * m + i - 1][0]) / (2.0 * h[0]);
            let d2 = (flux[(j + 1) * m + i][1] - flux[(j - 1) * m + i][1]) / (2.0 * h[1]);
            div2 += (d1 + d2) * (d1 + d2);
            d1sq += d1 * d1;
            d2sq += d2 * d2;
        }
    }
    let scale = d1sq.sqrt() + d2sq.sqrt();
    let relative_divergence = if scale == 0.0 { 0.0 } else { div2.sqrt() / scale };
    Ok(DivergenceReport { relative_divergence, boundary_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand_model::CobbDouglas;

    #[test]
    fn bump_integrates_to_one_on_the_reference_support() {
        let f = CobbDouglas::standard();
        let b = BumpFunction::standard(&f.reference_support()).unwrap();
        let z = bump_mass(&b, &f, &f.reference_point());
        assert!((z - 1.0).abs() < 1e-4, "{z}");
    }

    #[test]
    fn bump_margin_is_enforced() {
        let s = BoxDomain::cube(2, 0.2, 0.4).unwrap();
        assert!(BumpFunction::new(vec![0.3, 0.3], 0.09, &s).is_err());
        assert!(BumpFunction::new(vec![0.3, 0.3], 0.08, &s).is_ok());
    }

    #[test]
    fn gradient_matches_differences() {
        let s = BoxDomain::cube(2, 0.2, 0.4).unwrap();
        let b = BumpFunction::standard(&s).unwrap();
        let w = [0.31, 0.27];
        let mut g = [0.0; 2];
        b.gradient(&w, &mut g);
        let h = 1e-7;
        for k in 0..2 {
            let mut wp = w;
            let mut wm = w;
            wp[k] += h;
            wm[k] -= h;
            let fd = (b.value(&wp) - b.value(&wm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0), "{fd} {}", g[k]);
        }
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((sphere_area(4) - 2.0 * std::f64::consts::PI.powi(2)).abs() < 1e-12);
    }
}
