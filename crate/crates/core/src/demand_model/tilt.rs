use nalgebra::{DMatrix, DVector};

use super::{BoxDomain, DemandFamily, Moments};
use crate::error::Result;

const LO: f64 = 0.2;
const HI: f64 = 0.4;
const MID: f64 = 0.3;
const HALF: f64 = 0.1;
const RATE: f64 = 5.0;

/// Two goods on the fixed support `[0.2, 0.4]^2`. The first coordinate is
/// exponentially tilted with `theta = 5 (y - p1)`, the second is uniform.
#[derive(Debug, Clone)]
pub struct Tilt {
    domain: BoxDomain,
    support: BoxDomain,
}

impl Default for Tilt {
    fn default() -> Self {
        Self::standard()
    }
}

impl Tilt {
    pub fn standard() -> Self {
        Self {
            domain: BoxDomain::cube(3, 1.0, 1.2).expect("static box"),
            support: BoxDomain::cube(2, LO, HI).expect("static box"),
        }
    }

    pub fn theta(x: &[f64]) -> f64 {
        RATE * (x[2] - x[0])
    }

    /// `d theta / d x_k`.
    fn theta_dx(k: usize) -> f64 {
        match k {
            0 => -RATE,
            2 => RATE,
            _ => 0.0,
        }
    }

    /// Density of `s = q1 - 0.3` on `[-0.1, 0.1]`: `theta e^{theta s} / (2 sinh(0.1 theta))`.
    fn tilt_density(theta: f64, s: f64) -> f64 {
        let z = HALF * theta;
        // 2 sinh(z) / theta = 0.2 (1 + z^2/6 + z^4/120 + ...)
        let norm = if z.abs() < 1e-4 { 2.0 * HALF * (1.0 + z * z / 6.0) } else { 2.0 * z.sinh() / theta };
        (theta * s).exp() / norm
    }

    /// `d/dtheta log(2 sinh(0.1 theta) / theta)` with the sign flipped.
    fn log_norm_slope(theta: f64) -> f64 {
        if theta.abs() < 1e-3 {
            -HALF * HALF * theta / 3.0 + HALF.powi(4) * theta.powi(3) / 45.0
        } else {
            1.0 / theta - HALF / (HALF * theta).tanh()
        }
    }

    /// `E[s^k]` for k = 1, 2, 3 under the tilted law.
    fn centered_moments(theta: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let p = (k + 1) as i32;
            *slot = quadrature::double_exponential::integrate(
                |s| s.powi(p) * Self::tilt_density(theta, s),
                -HALF,
                HALF,
                1e-12,
            )
            .integral;
        }
        out
    }
}

impl DemandFamily for Tilt {
    fn name(&self) -> &str {
        "tilt"
    }

    fn dim(&self) -> usize {
        2
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn support(&self, _x: &[f64]) -> BoxDomain {
        self.support.clone()
    }

    fn density(&self, x: &[f64], q: &[f64]) -> f64 {
        if !self.support.contains(q) {
            return 0.0;
        }
        Self::tilt_density(Self::theta(x), q[0] - MID) / (HI - LO)
    }

    fn density_floor(&self) -> f64 {
        // theta in [-1, 1] keeps the density above 25 e^{-0.2} / (1 + ...) > 20.
        1.0
    }

    fn forward(&self, _x: &[f64], omega: &[f64], out: &mut [f64]) {
        out.copy_from_slice(omega);
    }

    fn inverse(&self, _x: &[f64], q: &[f64], out: &mut [f64]) {
        out.copy_from_slice(q);
    }

    fn jacobian(&self, _x: &[f64], _omega: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }

    fn forward_dx(&self, _x: &[f64], _omega: &[f64], _k: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn pullback_density(&self, x: &[f64], omega: &[f64]) -> f64 {
        self.density(x, omega)
    }

    fn pullback_density_dx(&self, x: &[f64], omega: &[f64], k: usize) -> f64 {
        let dt = Self::theta_dx(k);
        if dt == 0.0 {
            return 0.0;
        }
        let theta = Self::theta(x);
        let rho = self.density(x, omega);
        rho * (omega[0] - MID + Self::log_norm_slope(theta)) * dt
    }

    fn quantile_map(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let theta = Self::theta(x);
        out[0] = if theta.abs() < 1e-12 {
            LO + (HI - LO) * u[0]
        } else {
            LO + (u[0] * ((HI - LO) * theta).exp_m1()).ln_1p() / theta
        };
        out[1] = LO + (HI - LO) * u[1];
        Ok(())
    }

    fn marginal_cdf(&self, x: &[f64], i: usize, v: f64) -> Result<f64> {
        let v = v.clamp(LO, HI);
        let theta = Self::theta(x);
        if i == 1 || theta.abs() < 1e-12 {
            return Ok((v - LO) / (HI - LO));
        }
        Ok((theta * (v - LO)).exp_m1() / (theta * (HI - LO)).exp_m1())
    }

    fn moments(&self, x: &[f64]) -> Result<Moments> {
        let theta = Self::theta(x);
        let [s1, s2, s3] = Self::centered_moments(theta);
        let u2 = MID * MID + (HI - LO) * (HI - LO) / 12.0;
        let m1 = MID + s1;
        let mean = DVector::from_vec(vec![m1, MID]);
        let second = DMatrix::from_row_slice(2, 2, &[MID * MID + 2.0 * MID * s1 + s2, MID * m1, MID * m1, u2]);
        // d/dtheta E[h(s)] = Cov(h(s), s).
        let var = s2 - s1 * s1;
        let dm1 = var;
        let dm11 = 2.0 * MID * var + s3 - s2 * s1;
        let mut d_mean = Vec::with_capacity(3);
        let mut d_second = Vec::with_capacity(3);
        for k in 0..3 {
            let c = Self::theta_dx(k);
            d_mean.push(DVector::from_vec(vec![c * dm1, 0.0]));
            let cross = c * MID * dm1;
            d_second.push(DMatrix::from_row_slice(2, 2, &[c * dm11, cross, cross, 0.0]));
        }
        Ok(Moments { mean, second, d_mean, d_second })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_and_direct_normalizers_agree() {
        for theta in [-1e-4, 2e-4, 5e-4] {
            let z = HALF * theta;
            let direct = 2.0 * z.sinh() / theta;
            let series = 2.0 * HALF * (1.0 + z * z / 6.0);
            assert!((direct - series).abs() < 1e-15);
        }
        for theta in [9e-4f64, -9.9e-4] {
            let direct = 1.0 / theta - HALF / (HALF * theta).tanh();
            assert!((direct - Tilt::log_norm_slope(theta)).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_form_mean_matches_quadrature() {
        // E[s] = 0.1 coth(0.1 theta) - 1/theta
        let theta = 0.8;
        let s = Tilt::centered_moments(theta);
        let exact = HALF / (HALF * theta).tanh() - 1.0 / theta;
        assert!((s[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let f = Tilt::standard();
        let x = [1.0, 1.1, 1.2];
        let mut q = [0.0; 2];
        for u in [0.05, 0.3, 0.77, 0.99] {
            f.quantile_map(&x, &[u, 0.5], &mut q).unwrap();
            assert!((f.marginal_cdf(&x, 0, q[0]).unwrap() - u).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_gradients_match_differences() {
        let f = Tilt::standard();
        let x = [1.05, 1.15, 1.1];
        let m = f.moments(&x).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let (a, b) = (f.moments(&xp).unwrap(), f.moments(&xm).unwrap());
            assert!(((&a.mean - &b.mean) / (2.0 * h) - &m.d_mean[k]).amax() < 1e-8);
            assert!(((&a.second - &b.second) / (2.0 * h) - &m.d_second[k]).amax() < 1e-8);
        }
    }
}
