//! Identified functionals `m`, `M`, `T` and the (unidentified) average
//! Slutsky matrix of a constructed system.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::demand_model::{moments_oracle, reference_sample, sample_at, DemandFamily, Moments, PriceIncome};
use crate::error::{Error, Result};
use crate::rotation::{RotationBuilder, SlutskyTarget};
use crate::seed;
use crate::stats::{energy_distance, ks_one_sample, ks_two_sample, MeanSe};
use crate::transport::{CompositeFlow, FlowConfig, JacobianStencil, Stencil};

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

fn serialize_opt_matrix<S: serde::Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(matrix_rows).serialize(s)
}

fn serialize_vector<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

/// How the functionals were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalSource {
    Oracle,
    MonteCarlo,
}

/// `m(x)`, `M(x)`, `T(x)` and `D_{p_j} m_i`.
#[derive(Debug, Clone, Serialize)]
pub struct IdentifiedFunctionals {
    pub x: Vec<f64>,
    pub source: FunctionalSource,
    #[serde(serialize_with = "serialize_vector")]
    pub m: DVector<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub second: DMatrix<f64>,
    #[serde(rename = "T", serialize_with = "serialize_matrix")]
    pub t: DMatrix<f64>,
    /// `(i, j) = D_{p_j} m_i`.
    #[serde(serialize_with = "serialize_matrix")]
    pub price_jacobian: DMatrix<f64>,
    /// Standard errors of `T`; `None` for oracle values.
    #[serde(rename = "T_se", serialize_with = "serialize_opt_matrix")]
    pub t_se: Option<DMatrix<f64>>,
    pub n: usize,
    pub h: f64,
    pub one_sided: Vec<bool>,
}

/// Common-random-number difference stencils of MC moments.
struct DrawStencil {
    center: Vec<Vec<f64>>,
    /// Per coordinate `k`, per draw: the difference estimate of `d q / d x_k`.
    dq: Vec<Vec<Vec<f64>>>,
    /// Per coordinate `k`, per draw: `d (q q^T) / d x_k`, row-major.
    dqq: Vec<Vec<Vec<f64>>>,
    one_sided: Vec<bool>,
}

fn draw_stencil(f: &dyn DemandFamily, x: &PriceIncome, n: usize, h: f64, seed_value: u64) -> Result<DrawStencil> {
    let d = f.dim();
    let dom = f.domain();
    let center = sample_at(f, x, n, seed_value)?;
    let mut dq = Vec::with_capacity(d + 1);
    let mut dqq = Vec::with_capacity(d + 1);
    let mut one_sided = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let st = Stencil::choose(x.coords()[k], h, dom.lower()[k], dom.upper()[k])?;
        one_sided.push(st != Stencil::Central);
        let taps: &[(f64, f64)] = match st {
            Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::Forward => &[(0.0, -1.5), (1.0, 2.0), (2.0, -0.5)],
            Stencil::Backward => &[(0.0, 1.5), (-1.0, -2.0), (-2.0, 0.5)],
        };
        let mut acc_q = vec![vec![0.0; d]; n];
        let mut acc_qq = vec![vec![0.0; d * d]; n];
        for &(off, wt) in taps {
            let draws =
                if off == 0.0 { center.clone() } else { sample_at(f, &x.with_coord(k, x.coords()[k] + off * h), n, seed_value)? };
            for (r, q) in draws.iter().enumerate() {
                for i in 0..d {
                    acc_q[r][i] += wt / h * q[i];
                    for j in 0..d {
                        acc_qq[r][i * d + j] += wt / h * q[i] * q[j];
                    }
                }
            }
        }
        dq.push(acc_q);
        dqq.push(acc_qq);
    }
    Ok(DrawStencil { center, dq, dqq, one_sided })
}

fn mean_of(rows: &[Vec<f64>], idx: usize) -> MeanSe {
    MeanSe::from_iter(rows.iter().map(|r| r[idx]))
}

/// Oracle moments when the family has them, otherwise central differences
/// of MC moments with common random numbers (`h = 1e-3`).
pub fn moments_or_fd(f: &dyn DemandFamily, x: &PriceIncome, n: usize, seed_value: u64) -> Result<Moments> {
    match moments_oracle(f, x) {
        Ok(m) => Ok(m),
        Err(Error::Unsupported(_)) => {
            let d = f.dim();
            let st = draw_stencil(f, x, n, 1e-3, seed_value)?;
            let mean = DVector::from_fn(d, |i, _| mean_of(&st.center, i).mean);
            let second = DMatrix::from_fn(d, d, |i, j| MeanSe::from_iter(st.center.iter().map(|q| q[i] * q[j])).mean);
            let d_mean = (0..=d).map(|k| DVector::from_fn(d, |i, _| mean_of(&st.dq[k], i).mean)).collect();
            let d_second = (0..=d).map(|k| DMatrix::from_fn(d, d, |i, j| mean_of(&st.dqq[k], i * d + j).mean)).collect();
            Ok(Moments { mean, second, d_mean, d_second })
        }
        Err(e) => Err(e),
    }
}

/// `T_ij = D_{p_i} m_j + D_{p_j} m_i + D_y M_ij`, by oracle or by CRN
/// differences of `n` draws with step `h`.
pub fn estimate_functionals(
    f: &dyn DemandFamily,
    x: &PriceIncome,
    n: usize,
    h: f64,
    seed_value: u64,
    use_oracle: bool,
) -> Result<IdentifiedFunctionals> {
    let d = f.dim();
    if use_oracle {
        match moments_oracle(f, x) {
            Ok(m) => {
                return Ok(IdentifiedFunctionals {
                    x: x.coords().to_vec(),
                    source: FunctionalSource::Oracle,
                    t: m.t_matrix(),
                    price_jacobian: m.price_jacobian(),
                    m: m.mean,
                    second: m.second,
                    t_se: None,
                    n: 0,
                    h: 0.0,
                    one_sided: vec![false; d + 1],
                })
            }
            Err(Error::Unsupported(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if n < 1000 {
        return Err(Error::Config(format!("functional estimation needs n >= 1000, got {n}")));
    }
    let st = draw_stencil(f, x, n, h, seed_value)?;
    let m = DVector::from_fn(d, |i, _| mean_of(&st.center, i).mean);
    let second = DMatrix::from_fn(d, d, |i, j| MeanSe::from_iter(st.center.iter().map(|q| q[i] * q[j])).mean);
    let price_jacobian = DMatrix::from_fn(d, d, |i, j| mean_of(&st.dq[j], i).mean);
    let mut t = DMatrix::zeros(d, d);
    let mut t_se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s = MeanSe::from_iter((0..n).map(|r| st.dq[i][r][j] + st.dq[j][r][i] + st.dqq[d][r][i * d + j]));
            t[(i, j)] = s.mean;
            t[(j, i)] = s.mean;
            t_se[(i, j)] = s.se;
            t_se[(j, i)] = s.se;
        }
    }
    Ok(IdentifiedFunctionals {
        x: x.coords().to_vec(),
        source: FunctionalSource::MonteCarlo,
        m,
        second,
        t,
        price_jacobian,
        t_se: Some(t_se),
        n,
        h,
        one_sided: st.one_sided,
    })
}

/// MC average Slutsky matrix `E[D_p Phi + D_y Phi Phi^T]` of a flow.
#[derive(Debug, Clone, Serialize)]
pub struct SlutskyEstimate {
    pub x: Vec<f64>,
    #[serde(rename = "S_hat", serialize_with = "serialize_matrix")]
    pub s_hat: DMatrix<f64>,
    #[serde(rename = "S_se", serialize_with = "serialize_matrix")]
    pub s_se: DMatrix<f64>,
    /// `S_ij - S_ji`.
    #[serde(serialize_with = "serialize_matrix")]
    pub asymmetry: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub asymmetry_se: DMatrix<f64>,
    /// `S_ij + S_ji`.
    #[serde(serialize_with = "serialize_matrix")]
    pub symmetric_sum: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub symmetric_sum_se: DMatrix<f64>,
    pub n: usize,
    pub h_p: f64,
    pub h_y: f64,
    pub one_sided: Vec<bool>,
}

pub fn estimate_average_slutsky(flow: &CompositeFlow, x: &PriceIncome, n: usize, h_p: f64, h_y: f64, seed_value: u64) -> Result<SlutskyEstimate> {
    let f = flow.family();
    let d = f.dim();
    if n < 1000 {
        return Err(Error::Config(format!("average Slutsky estimation needs n >= 1000, got {n}")));
    }
    let mut h = vec![h_p; d];
    h.push(h_y);
    let stencil = JacobianStencil::new(flow, x, &h)?;
    let omegas = reference_sample(f.as_ref(), n, seed::derive(seed_value, "slutsky"))?;
    let rows: Vec<Vec<f64>> = omegas
        .par_iter()
        .map(|w| {
            let j = stencil.eval(w)?;
            Ok((0..d * d).map(|ij| j.dp[(ij / d, ij % d)] + j.dy[ij / d] * j.value[ij % d]).collect())
        })
        .collect::<Result<_>>()?;
    let mut s_hat = DMatrix::zeros(d, d);
    let mut s_se = DMatrix::zeros(d, d);
    let mut asymmetry = DMatrix::zeros(d, d);
    let mut asymmetry_se = DMatrix::zeros(d, d);
    let mut symmetric_sum = DMatrix::zeros(d, d);
    let mut symmetric_sum_se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let s = mean_of(&rows, i * d + j);
            s_hat[(i, j)] = s.mean;
            s_se[(i, j)] = s.se;
            let diff = MeanSe::from_iter(rows.iter().map(|r| r[i * d + j] - r[j * d + i]));
            asymmetry[(i, j)] = diff.mean;
            asymmetry_se[(i, j)] = diff.se;
            let sum = MeanSe::from_iter(rows.iter().map(|r| r[i * d + j] + r[j * d + i]));
            symmetric_sum[(i, j)] = sum.mean;
            symmetric_sum_se[(i, j)] = sum.se;
        }
    }
    Ok(SlutskyEstimate {
        x: x.coords().to_vec(),
        s_hat,
        s_se,
        asymmetry,
        asymmetry_se,
        symmetric_sum,
        symmetric_sum_se,
        n,
        h_p,
        h_y,
        one_sided: stencil.one_sided(),
    })
}

/// Thresholds for [`marginal_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalThresholds {
    pub ks: f64,
    /// Pushforward energy distance over the oracle-vs-oracle baseline.
    pub energy_ratio: f64,
    /// Subsample size cap for the energy distance.
    pub energy_cap: usize,
    /// Oracle replications averaged in both energy terms.
    pub replications: usize,
}

impl Default for MarginalThresholds {
    fn default() -> Self {
        Self { ks: 0.02, energy_ratio: 2.0, energy_cap: 5000, replications: 4 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalDistanceReport {
    pub x: Vec<f64>,
    /// Two-sample KS per coordinate, pushforward vs an oracle sample.
    pub ks: Vec<f64>,
    /// One-sample KS per coordinate against the oracle CDF, if available.
    pub ks_cdf: Option<Vec<f64>>,
    pub energy: f64,
    pub energy_baseline: f64,
    pub n: usize,
    pub clamped: usize,
    pub escaped: usize,
    pub thresholds: MarginalThresholds,
    pub pass: bool,
}

/// Compares the pushforward of `n` reference draws at `x` with oracle
/// draws from `mu_x`. `skip_final` drops the income leg (negative control).
pub fn marginal_distance(
    flow: &CompositeFlow,
    x: &PriceIncome,
    n: usize,
    seed_value: u64,
    skip_final: bool,
    thresholds: MarginalThresholds,
) -> Result<MarginalDistanceReport> {
    let f = flow.family();
    let d = f.dim();
    let omegas = reference_sample(f.as_ref(), n, seed::derive(seed_value, "push"))?;
    let (pushed, clamp) = flow.push_samples(x, &omegas, skip_final)?;
    let pushed: Vec<Vec<f64>> = pushed.iter().map(|q| q.to_vec()).collect();
    let reps = thresholds.replications.max(1);
    let oracles: Vec<Vec<Vec<f64>>> = (0..=reps)
        .map(|r| sample_at(f.as_ref(), x, n, seed::derive(seed_value, &format!("oracle-{r}"))))
        .collect::<Result<_>>()?;
    let column = |s: &[Vec<f64>], i: usize| s.iter().map(|q| q[i]).collect::<Vec<f64>>();
    let ks: Vec<f64> = (0..d).map(|i| ks_two_sample(&column(&pushed, i), &column(&oracles[0], i))).collect();
    let ks_cdf = (0..d)
        .map(|i| {
            f.marginal_cdf(x.coords(), i, 0.0)?;
            let cdf = |v: f64| f.marginal_cdf(x.coords(), i, v).unwrap_or(f64::NAN);
            Ok(ks_one_sample(&column(&pushed, i), cdf))
        })
        .collect::<Result<Vec<f64>>>()
        .ok();
    let cap = thresholds.energy_cap;
    let es = seed::derive(seed_value, "energy");
    let pairs: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            (
                energy_distance(&pushed, &oracles[r], cap, es.wrapping_add(r as u64)),
                energy_distance(&oracles[r], &oracles[r + 1], cap, es.wrapping_add(r as u64)),
            )
        })
        .collect();
    let energy = pairs.iter().map(|p| p.0).sum::<f64>() / reps as f64;
    let energy_baseline = pairs.iter().map(|p| p.1).sum::<f64>() / reps as f64;
    let pass = ks.iter().all(|k| *k <= thresholds.ks) && energy <= thresholds.energy_ratio * energy_baseline && clamp.escaped == 0;
    Ok(MarginalDistanceReport {
        x: x.coords().to_vec(),
        ks,
        ks_cdf,
        energy,
        energy_baseline,
        n,
        clamped: clamp.clamped,
        escaped: clamp.escaped,
        thresholds,
        pass,
    })
}

/// Run sizes and seeds for [`nonid_demo`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonidConfig {
    /// Draws for the average Slutsky estimates.
    pub n: usize,
    /// Draws for the marginal checks.
    pub n_marginal: usize,
    /// Draws per income knot for the rotation coefficients.
    pub n_coeffs: usize,
    /// Draws for MC functionals when no oracle exists.
    pub n_functionals: usize,
    pub h_p: f64,
    pub h_y: f64,
    pub seed: u64,
    pub flow: FlowConfig,
    pub thresholds: MarginalThresholds,
}

impl Default for NonidConfig {
    fn default() -> Self {
        Self {
            n: 50_000,
            n_marginal: 20_000,
            n_coeffs: 20_000,
            n_functionals: 50_000,
            h_p: 1e-3,
            h_y: 1e-3,
            seed: 20_240_601,
            flow: FlowConfig::default(),
            thresholds: MarginalThresholds::default(),
        }
    }
}

/// One constructed system at one test point.
#[derive(Debug, Clone, Serialize)]
pub struct SystemReport {
    pub c: f64,
    pub marginals: MarginalDistanceReport,
    pub slutsky: SlutskyEstimate,
    /// `|S_ij + S_ji - T_ij|` over `max(4 combined SE, 1e-2)`, worst entry.
    pub membership_ratio: f64,
    /// `|S_12 - S_21 - 2c|` over `max(4 SE, 1e-2)`.
    pub asymmetry_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonidPoint {
    pub x: Vec<f64>,
    pub functionals: IdentifiedFunctionals,
    pub symmetric: SystemReport,
    pub corrected: SystemReport,
    /// Both systems met the same marginal thresholds.
    pub equal_marginals: bool,
    /// The asymmetries differ by more than 4 combined SE.
    pub distinct_slutsky: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonidReport {
    pub family: String,
    pub c: f64,
    pub config: NonidConfig,
    pub points: Vec<NonidPoint>,
    /// First failing section, if any.
    pub failure: Option<String>,
    pub pass: bool,
}

/// Marginal check, average Slutsky estimate and the identified-set and
/// asymmetry ratios for one flow at `x`; `c` is the targeted `C_12`.
pub fn system_report(
    flow: &CompositeFlow,
    x: &PriceIncome,
    c: f64,
    fun: &IdentifiedFunctionals,
    cfg: &NonidConfig,
) -> Result<SystemReport> {
    let d = flow.family().dim();
    let marginals = marginal_distance(flow, x, cfg.n_marginal, cfg.seed, false, cfg.thresholds)?;
    let slutsky = estimate_average_slutsky(flow, x, cfg.n, cfg.h_p, cfg.h_y, cfg.seed)?;
    let mut membership_ratio: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let t_se = fun.t_se.as_ref().map_or(0.0, |s| s[(i, j)]);
            let se = slutsky.symmetric_sum_se[(i, j)].hypot(t_se);
            let tol = (4.0 * se).max(1e-2);
            membership_ratio = membership_ratio.max((slutsky.symmetric_sum[(i, j)] - fun.t[(i, j)]).abs() / tol);
        }
    }
    let asymmetry_ratio = (slutsky.asymmetry[(0, 1)] - 2.0 * c).abs() / (4.0 * slutsky.asymmetry_se[(0, 1)]).max(1e-2);
    let pass = marginals.pass && membership_ratio <= 1.0 && asymmetry_ratio <= 1.0;
    Ok(SystemReport { c, marginals, slutsky, membership_ratio, asymmetry_ratio, pass })
}

/// Builds the symmetric system (`C = 0`) and the corrected one
/// (`C_12 = c`) and checks, at each test point, that both reproduce the
/// marginals while their average Slutsky matrices differ by `2c`.
pub fn nonid_demo(f: Arc<dyn DemandFamily>, c: f64, xs: &[PriceIncome], cfg: &NonidConfig) -> Result<NonidReport> {
    if f.dim() != 2 {
        return Err(Error::Unsupported("the nonidentification demo is two-dimensional".into()));
    }
    if !(c.abs() <= 0.1) {
        return Err(Error::Config(format!("|c| must be at most 0.1 for stable legs, got {c}")));
    }
    if xs.is_empty() {
        return Err(Error::Config("no test points".into()));
    }
    // The symmetric member needs its own correction unless the step-one
    // flow already has a symmetric average Slutsky matrix (it then comes
    // back as the step-one flow bitwise).
    let step1 = CompositeFlow::new(f.clone(), cfg.flow)?;
    let rotation_seed = seed::derive(cfg.seed, "rotation");
    let build = |c: f64| -> Result<CompositeFlow> {
        let builder = RotationBuilder::new(f.as_ref(), SlutskyTarget::constant_c12(c), cfg.n_coeffs, rotation_seed)?;
        Ok(step1.with_correction(Arc::new(builder)))
    };
    let base = build(0.0)?;
    let corrected = if c == 0.0 { None } else { Some(build(c)?) };
    let mut points = Vec::with_capacity(xs.len());
    let mut failure = None;
    for x in xs {
        let fun = estimate_functionals(f.as_ref(), x, cfg.n_functionals, cfg.h_p, cfg.seed, true)?;
        let symmetric = system_report(&base, x, 0.0, &fun, cfg)?;
        let corr = match &corrected {
            Some(flow) => system_report(flow, x, c, &fun, cfg)?,
            None => SystemReport { c, ..symmetric.clone() },
        };
        let equal_marginals = symmetric.marginals.pass && corr.marginals.pass;
        let gap = (corr.slutsky.asymmetry[(0, 1)] - symmetric.slutsky.asymmetry[(0, 1)]).abs();
        let gap_se = corr.slutsky.asymmetry_se[(0, 1)].hypot(symmetric.slutsky.asymmetry_se[(0, 1)]);
        let distinct_slutsky = c == 0.0 || gap > 4.0 * gap_se;
        let pass = symmetric.pass && corr.pass && equal_marginals && distinct_slutsky;
        if !pass && failure.is_none() {
            let section = if !equal_marginals {
                "marginals"
            } else if symmetric.membership_ratio > 1.0 || corr.membership_ratio > 1.0 {
                "identified-set membership"
            } else if symmetric.asymmetry_ratio > 1.0 {
                "symmetric-system asymmetry"
            } else if corr.asymmetry_ratio > 1.0 {
                "corrected-system asymmetry"
            } else {
                "distinct Slutsky matrices"
            };
            failure = Some(format!("{section} at x = {:?}", x.coords()));
        }
        points.push(NonidPoint { x: x.coords().to_vec(), functionals: fun, symmetric, corrected: corr, equal_marginals, distinct_slutsky, pass });
    }
    let pass = points.iter().all(|p| p.pass);
    Ok(NonidReport { family: f.name().to_string(), c, config: *cfg, points, failure, pass })
}

/// Default test points for the built-in families.
pub fn default_test_points(family: &str) -> Vec<PriceIncome> {
    let raw: &[[f64; 3]] = match family {
        "tilt" => &[[1.0, 1.0, 1.0], [1.1, 1.1, 1.15], [1.05, 1.15, 1.1], [1.15, 1.05, 1.05], [1.18, 1.02, 1.18]],
        _ => &[[1.0, 1.0, 1.0], [1.5, 1.2, 1.4], [1.25, 1.75, 1.2], [1.8, 1.3, 1.1], [1.2, 1.6, 1.3]],
    };
    raw.iter().map(|c| PriceIncome::from_coords(c.to_vec())).collect()
}
