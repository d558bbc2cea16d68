//! Price-income domain, the demand-distribution family contract, and the
//! built-in families.
//!
//! A family is a map `x -> mu_x` from price-income points to distributions
//! over demand vectors `q`. Every family carries a support diffeomorphism
//! `T_x` from the reference support (the support at the lower corner `x_lo`
//! of the domain) onto the support at `x`, with `T_{x_lo}` the identity.
//! Transport is always carried out on the fixed reference support using the
//! pulled-back density `rho_x(T_x w) |det DT_x(w)|`, then mapped forward.

mod cobb_douglas;
mod tilt;

pub use cobb_douglas::CobbDouglas;
pub use tilt::Tilt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Axis-aligned box `prod_i [lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Config(format!(
                "box bounds have mismatched dimensions {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("box axis {i}: need lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    /// Closed-box membership.
    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Largest per-axis excursion of `z` outside the box (0 when inside).
    pub fn excess(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, z: &mut [f64]) {
        for (v, (lo, hi)) in z.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Corners in lexicographic order, lower bound first.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| (0..d).map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] }).collect())
            .collect()
    }
}

/// A price-income pair `x = (p_1, ..., p_d, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceIncome {
    coords: Vec<f64>,
}

impl PriceIncome {
    pub fn new(p: &[f64], y: f64) -> Self {
        let mut coords = p.to_vec();
        coords.push(y);
        Self { coords }
    }

    /// Build from the flat layout `(p_1, ..., p_d, y)`.
    pub fn from_coords(coords: Vec<f64>) -> Self {
        assert!(coords.len() >= 2, "price-income point needs at least one price and an income");
        Self { coords }
    }

    /// Number of goods `d`.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn p(&self) -> &[f64] {
        &self.coords[..self.dim()]
    }

    pub fn y(&self) -> f64 {
        self.coords[self.dim()]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn with_coord(&self, k: usize, value: f64) -> Self {
        let mut coords = self.coords.clone();
        coords[k] = value;
        Self { coords }
    }
}

/// Closed-form (or quadrature) moments of `mu_x` and their gradients in `x`.
///
/// `d_mean[k]` and `d_second[k]` hold derivatives with respect to the k-th
/// coordinate of `x` (prices first, income last).
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
    pub d_mean: Vec<DVector<f64>>,
    pub d_second: Vec<DMatrix<f64>>,
}

impl Moments {
    /// `T_ij = D_{p_i} m_j + D_{p_j} m_i + D_y M_ij`.
    pub fn t_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |i, j| self.d_mean[i][j] + self.d_mean[j][i] + self.d_second[d][(i, j)])
    }

    /// `D_{p_j} m_i` laid out as `(i, j)`.
    pub fn price_jacobian(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |i, j| self.d_mean[j][i])
    }
}

/// A parametric family `(mu_x)` with the regularity data the transport needs.
///
/// Only `name` through `jacobian` are required. The derivative hooks fall
/// back to central differences with step `1e-4` relative to the coordinate
/// scale; samplers and oracles default to [`Error::Unsupported`].
pub trait DemandFamily: Send + Sync {
    fn name(&self) -> &str;

    /// Number of goods `d`.
    fn dim(&self) -> usize;

    /// The price-income box, `d + 1` axes.
    fn domain(&self) -> &BoxDomain;

    /// Axis-aligned support of `mu_x`.
    fn support(&self, x: &[f64]) -> BoxDomain;

    /// `rho_x(q)`, zero outside the support.
    fn density(&self, x: &[f64], q: &[f64]) -> f64;

    /// `T_x(w)`.
    fn forward(&self, x: &[f64], omega: &[f64], out: &mut [f64]);

    /// `T_x^{-1}(q)`.
    fn inverse(&self, x: &[f64], q: &[f64], out: &mut [f64]);

    /// `DT_x(w)`, row-major `d x d`.
    fn jacobian(&self, x: &[f64], omega: &[f64], out: &mut [f64]);

    /// Positive lower bound on the density inside the support.
    fn density_floor(&self) -> f64 {
        1e-6
    }

    fn reference_point(&self) -> PriceIncome {
        PriceIncome::from_coords(self.domain().lower().to_vec())
    }

    fn reference_support(&self) -> BoxDomain {
        self.support(self.domain().lower())
    }

    /// `d/dx_k T_x(w)`.
    fn forward_dx(&self, x: &[f64], omega: &[f64], k: usize, out: &mut [f64]) {
        let d = self.dim();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        let (xp, xm, span) = fd_pair(self.domain(), x, k);
        self.forward(&xp, omega, &mut plus);
        self.forward(&xm, omega, &mut minus);
        for i in 0..d {
            out[i] = (plus[i] - minus[i]) / span;
        }
    }

    /// Density of `(T_x^{-1})_# mu_x` on the reference support.
    fn pullback_density(&self, x: &[f64], omega: &[f64]) -> f64 {
        let d = self.dim();
        let mut q = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        self.forward(x, omega, &mut q);
        self.jacobian(x, omega, &mut jac);
        let det = DMatrix::from_row_slice(d, d, &jac).determinant().abs();
        self.density(x, &q) * det
    }

    /// `d/dx_k` of [`DemandFamily::pullback_density`].
    fn pullback_density_dx(&self, x: &[f64], omega: &[f64], k: usize) -> f64 {
        let (xp, xm, span) = fd_pair(self.domain(), x, k);
        (self.pullback_density(&xp, omega) - self.pullback_density(&xm, omega)) / span
    }

    /// Maps `u` in the unit cube to a draw from `mu_x` (Rosenblatt-style).
    fn quantile_map(&self, _x: &[f64], _u: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported(format!("family `{}` has no quantile sampler", self.name())))
    }

    /// CDF of the i-th coordinate of `mu_x`.
    fn marginal_cdf(&self, _x: &[f64], _i: usize, _v: f64) -> Result<f64> {
        Err(Error::Unsupported(format!("family `{}` has no marginal CDF oracle", self.name())))
    }

    fn moments(&self, _x: &[f64]) -> Result<Moments> {
        Err(Error::Unsupported(format!("family `{}` has no moment oracle", self.name())))
    }
}

const FD_STEP: f64 = 1e-4;

/// Perturbed copies of `x` along axis `k`; one-sided at the domain edge.
fn fd_pair(domain: &BoxDomain, x: &[f64], k: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let h = FD_STEP * x[k].abs().max(1.0);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    let lo = domain.lower()[k];
    let hi = domain.upper()[k];
    if x[k] - h < lo {
        xp[k] = x[k] + h;
        (xp, xm, h)
    } else if x[k] + h > hi {
        xm[k] = x[k] - h;
        (xp, xm, h)
    } else {
        xp[k] = x[k] + h;
        xm[k] = x[k] - h;
        (xp, xm, 2.0 * h)
    }
}

fn check_point(f: &dyn DemandFamily, x: &PriceIncome) -> Result<()> {
    if x.dim() != f.dim() || !f.domain().contains(x.coords()) {
        return Err(Error::Domain(x.coords().to_vec()));
    }
    Ok(())
}

/// `rho_x(q)`; zero outside the support.
pub fn family_density(f: &dyn DemandFamily, x: &PriceIncome, q: &[f64]) -> Result<f64> {
    check_point(f, x)?;
    Ok(f.density(x.coords(), q))
}

pub fn family_support(f: &dyn DemandFamily, x: &PriceIncome) -> Result<BoxDomain> {
    check_point(f, x)?;
    Ok(f.support(x.coords()))
}

pub fn support_map(f: &dyn DemandFamily, x: &PriceIncome, omega: &[f64]) -> Result<Vec<f64>> {
    check_point(f, x)?;
    let mut out = vec![0.0; f.dim()];
    f.forward(x.coords(), omega, &mut out);
    Ok(out)
}

pub fn support_map_inverse(f: &dyn DemandFamily, x: &PriceIncome, q: &[f64]) -> Result<Vec<f64>> {
    check_point(f, x)?;
    let mut out = vec![0.0; f.dim()];
    f.inverse(x.coords(), q, &mut out);
    Ok(out)
}

/// `A_x(w) = (DT_x(w))^{-1}`.
pub fn support_map_a(f: &dyn DemandFamily, x: &PriceIncome, omega: &[f64]) -> Result<DMatrix<f64>> {
    check_point(f, x)?;
    let d = f.dim();
    let mut jac = vec![0.0; d * d];
    f.jacobian(x.coords(), omega, &mut jac);
    DMatrix::from_row_slice(d, d, &jac)
        .try_inverse()
        .ok_or_else(|| Error::Numeric(format!("singular support-map Jacobian at {:?}", x.coords())))
}

/// Pulled-back density and its rate of change along coordinate `k` of `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pullback {
    pub density: f64,
    pub rate: f64,
}

pub fn pullback_density(f: &dyn DemandFamily, x: &PriceIncome, k: usize, omega: &[f64]) -> Result<Pullback> {
    check_point(f, x)?;
    if k > f.dim() {
        return Err(Error::Config(format!("leg coordinate {k} out of range")));
    }
    Ok(Pullback {
        density: f.pullback_density(x.coords(), omega),
        rate: f.pullback_density_dx(x.coords(), omega, k),
    })
}

/// i.i.d. draws from `mu_{x_lo}`. Uses the family's quantile map when it
/// has one, otherwise rejection sampling on the reference box.
pub fn reference_sample(f: &dyn DemandFamily, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let x0 = f.reference_point();
    sample_at(f, &x0, n, seed)
}

/// i.i.d. draws from `mu_x` on the stream `(seed, "sample")`.
pub fn sample_at(f: &dyn DemandFamily, x: &PriceIncome, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    check_point(f, x)?;
    let d = f.dim();
    let mut rng = seed::stream(seed, "sample");
    let mut u = vec![0.0; d];
    let mut out = Vec::with_capacity(n);
    let mut q = vec![0.0; d];
    for _ in 0..n {
        u.iter_mut().for_each(|v| *v = rng.random::<f64>());
        match f.quantile_map(x.coords(), &u, &mut q) {
            Ok(()) => out.push(q.clone()),
            Err(Error::Unsupported(_)) => return rejection_sample(f, x, n, seed),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn rejection_sample(f: &dyn DemandFamily, x: &PriceIncome, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let support = f.support(x.coords());
    let d = f.dim();
    // Envelope from a coarse scan of the support, padded.
    let per_axis = 33usize;
    let mut peak: f64 = 0.0;
    let mut z = vec![0.0; d];
    for idx in 0..per_axis.pow(d as u32) {
        let mut r = idx;
        for (i, zi) in z.iter_mut().enumerate() {
            let k = r % per_axis;
            r /= per_axis;
            *zi = support.lower()[i] + support.width(i) * k as f64 / (per_axis - 1) as f64;
        }
        peak = peak.max(f.density(x.coords(), &z));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Regularity("density vanishes on the support scan".into()));
    }
    let bound = 1.25 * peak;
    let mut rng = seed::stream(seed, "rejection");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = support.lower()[i] + support.width(i) * rng.random::<f64>();
        }
        if rng.random::<f64>() * bound <= f.density(x.coords(), &z) {
            out.push(z.clone());
        }
    }
    Ok(out)
}

pub fn moments_oracle(f: &dyn DemandFamily, x: &PriceIncome) -> Result<Moments> {
    check_point(f, x)?;
    f.moments(x.coords())
}

/// Select a built-in family by name.
pub fn builtin(name: &str) -> Result<std::sync::Arc<dyn DemandFamily>> {
    match name {
        "cd0" => Ok(std::sync::Arc::new(CobbDouglas::standard())),
        "tilt" => Ok(std::sync::Arc::new(Tilt::standard())),
        other => Err(Error::Config(format!("unknown family `{other}` (expected `cd0` or `tilt`)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(BoxDomain::new(vec![1.0], vec![0.5]).is_err());
        assert!(BoxDomain::new(vec![1.0, 2.0], vec![3.0]).is_err());
    }

    #[test]
    fn box_corners_and_excess() {
        let b = BoxDomain::cube(2, 0.0, 1.0).unwrap();
        assert_eq!(b.corners().len(), 4);
        assert_eq!(b.corners()[0], vec![0.0, 0.0]);
        assert_eq!(b.excess(&[1.5, 0.5]), 0.5);
        assert_eq!(b.excess(&[0.5, 0.5]), 0.0);
    }

    #[test]
    fn price_income_layout() {
        let x = PriceIncome::new(&[1.5, 1.2], 1.4);
        assert_eq!(x.dim(), 2);
        assert_eq!(x.p(), &[1.5, 1.2]);
        assert_eq!(x.y(), 1.4);
        assert_eq!(x.with_coord(2, 2.0).y(), 2.0);
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!(builtin("nope"), Err(Error::Config(_))));
    }
}
