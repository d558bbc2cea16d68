use nalgebra::{DMatrix, DVector};

use super::{BoxDomain, DemandFamily, Moments};
use crate::error::{Error, Result};

/// Random Cobb-Douglas demand `q_i = y * eta_i / p_i` with independent
/// uniform budget shares `eta_i ~ U[a_i, b_i]`.
#[derive(Debug, Clone)]
pub struct CobbDouglas {
    name: String,
    share_lo: Vec<f64>,
    share_hi: Vec<f64>,
    domain: BoxDomain,
}

impl CobbDouglas {
    /// Shares on `[0.2, 0.4]^2`, prices and income on `[1, 2]`.
    pub fn standard() -> Self {
        Self::new(vec![0.2; 2], vec![0.4; 2], BoxDomain::cube(3, 1.0, 2.0).expect("static box"))
            .expect("static family")
    }

    pub fn new(share_lo: Vec<f64>, share_hi: Vec<f64>, domain: BoxDomain) -> Result<Self> {
        let d = share_lo.len();
        if d < 2 || share_hi.len() != d || domain.dim() != d + 1 {
            return Err(Error::Config(format!(
                "Cobb-Douglas needs d >= 2 share intervals and a (d+1)-dimensional domain, got d = {d}, domain dim {}",
                domain.dim()
            )));
        }
        for i in 0..d {
            if !(share_lo[i] > 0.0 && share_lo[i] < share_hi[i]) {
                return Err(Error::Config(format!("share interval {i} must satisfy 0 < lo < hi")));
            }
        }
        if domain.lower().iter().any(|v| *v <= 0.0) {
            return Err(Error::Config("prices and income must be positive".into()));
        }
        // p.q = y * sum(eta), so the budget holds iff the largest share total is below one.
        let total: f64 = share_hi.iter().sum();
        if total >= 1.0 {
            return Err(Error::Config(format!("share upper bounds sum to {total}, budget requires < 1")));
        }
        Ok(Self { name: "cd0".into(), share_lo, share_hi, domain })
    }

    fn share_density(&self) -> f64 {
        self.share_lo.iter().zip(&self.share_hi).map(|(a, b)| 1.0 / (b - a)).product()
    }

    fn share_mean(&self, i: usize) -> f64 {
        0.5 * (self.share_lo[i] + self.share_hi[i])
    }

    fn share_square(&self, i: usize) -> f64 {
        let (a, b) = (self.share_lo[i], self.share_hi[i]);
        (a * a + a * b + b * b) / 3.0
    }

    /// Scale factor of `T_x` along axis i.
    fn scale(&self, x: &[f64], i: usize) -> f64 {
        let d = self.dim();
        let lo = self.domain.lower();
        x[d] * lo[i] / (x[i] * lo[d])
    }
}

impl DemandFamily for CobbDouglas {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.share_lo.len()
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn support(&self, x: &[f64]) -> BoxDomain {
        let d = self.dim();
        let y = x[d];
        let lo = (0..d).map(|i| y * self.share_lo[i] / x[i]).collect();
        let hi = (0..d).map(|i| y * self.share_hi[i] / x[i]).collect();
        BoxDomain::new(lo, hi).expect("positive prices give a proper box")
    }

    fn density(&self, x: &[f64], q: &[f64]) -> f64 {
        let d = self.dim();
        let y = x[d];
        let mut jac = 1.0;
        for i in 0..d {
            let eta = x[i] * q[i] / y;
            if eta < self.share_lo[i] || eta > self.share_hi[i] {
                return 0.0;
            }
            jac *= x[i] / y;
        }
        self.share_density() * jac
    }

    fn density_floor(&self) -> f64 {
        // Pullback density is constant; the floor only guards the division.
        0.5 * self.share_density() * self.domain.lower().iter().take(self.dim()).product::<f64>()
            / self.domain.upper()[self.dim()].powi(self.dim() as i32)
    }

    fn forward(&self, x: &[f64], omega: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = self.scale(x, i) * omega[i];
        }
    }

    fn inverse(&self, x: &[f64], q: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = q[i] / self.scale(x, i);
        }
    }

    fn jacobian(&self, x: &[f64], _omega: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            out[i * d + i] = self.scale(x, i);
        }
    }

    fn forward_dx(&self, x: &[f64], omega: &[f64], k: usize, out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let t = self.scale(x, i) * omega[i];
            out[i] = if k == d {
                t / x[d]
            } else if k == i {
                -t / x[i]
            } else {
                0.0
            };
        }
    }

    fn pullback_density(&self, _x: &[f64], omega: &[f64]) -> f64 {
        let x0 = self.domain.lower();
        if self.reference_support().contains(omega) {
            self.density(x0, omega)
        } else {
            0.0
        }
    }

    fn pullback_density_dx(&self, _x: &[f64], _omega: &[f64], _k: usize) -> f64 {
        0.0
    }

    fn quantile_map(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        for i in 0..d {
            let eta = self.share_lo[i] + (self.share_hi[i] - self.share_lo[i]) * u[i];
            out[i] = x[d] * eta / x[i];
        }
        Ok(())
    }

    fn marginal_cdf(&self, x: &[f64], i: usize, v: f64) -> Result<f64> {
        let d = self.dim();
        let eta = v * x[i] / x[d];
        Ok(((eta - self.share_lo[i]) / (self.share_hi[i] - self.share_lo[i])).clamp(0.0, 1.0))
    }

    fn moments(&self, x: &[f64]) -> Result<Moments> {
        let d = self.dim();
        let y = x[d];
        let mean = DVector::from_fn(d, |i, _| self.share_mean(i) * y / x[i]);
        let second = DMatrix::from_fn(d, d, |i, j| {
            let e = if i == j { self.share_square(i) } else { self.share_mean(i) * self.share_mean(j) };
            y * y * e / (x[i] * x[j])
        });
        let mut d_mean = Vec::with_capacity(d + 1);
        let mut d_second = Vec::with_capacity(d + 1);
        for k in 0..d {
            d_mean.push(DVector::from_fn(d, |i, _| if i == k { -mean[i] / x[k] } else { 0.0 }));
            d_second.push(DMatrix::from_fn(d, d, |i, j| {
                let hits = f64::from(u8::from(i == k) + u8::from(j == k));
                -hits * second[(i, j)] / x[k]
            }));
        }
        d_mean.push(&mean / y);
        d_second.push(&second * (2.0 / y));
        Ok(Moments { mean, second, d_mean, d_second })
    }
}
