//! Step-one transport: Neumann-Poisson velocities on the reference support,
//! legs along one price-income coordinate at a time, RK4 flows, and the
//! composite map `Phi(x, w)`.
//!
//! Every leg transports the pulled-back density `rho~_t` on the fixed
//! reference support, so the Neumann problem is always posed on the same
//! rectangle and `int d_t rho~ = 0` holds by construction. The composite
//! runs the legs `p_1, ..., p_d, y` and maps the result forward by `T_x`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::demand_model::{DemandFamily, PriceIncome};
use crate::elliptic::{grad_field, solve_neumann, Coefficient, EllipticProblem, Grid2D, ScalarGridField, VectorGridField};
use crate::error::{Error, Result};

/// `grad u / rho` node by node.
pub fn velocity_from_potential(u: &ScalarGridField, rho: &ScalarGridField, floor: f64) -> Result<VectorGridField> {
    if u.grid != rho.grid {
        return Err(Error::Config("potential and density live on different grids".into()));
    }
    if let Some((k, r)) = rho.values.iter().enumerate().find(|(_, r)| !(**r >= floor)) {
        return Err(Error::Regularity(format!("density {r:e} below floor {floor:e} at node {k}")));
    }
    let grad = grad_field(u).field;
    let values = grad.values.iter().zip(&rho.values).map(|(g, r)| [g[0] / r, g[1] / r]).collect();
    Ok(VectorGridField { grid: u.grid.clone(), values })
}

/// McShane extension `sup_y (v_i(y) - L |z - y|)` over grid nodes, per
/// component. Inside the grid box the bilinear interpolant is returned.
pub fn lipschitz_extend(v: &VectorGridField, lipschitz: f64, query: &[f64]) -> [f64; 2] {
    let dom = v.grid.domain();
    if dom.contains(query) {
        return v.interpolate(query);
    }
    let mut best = [f64::NEG_INFINITY; 2];
    for (node, val) in v.grid.nodes().zip(&v.values) {
        let dist = (query[0] - node[0]).hypot(query[1] - node[1]);
        for k in 0..2 {
            best[k] = best[k].max(val[k] - lipschitz * dist);
        }
    }
    best
}

/// Tensor-product natural cubic spline of a node field, stored as bicubic
/// Hermite data `[f, f_x, f_y, f_xy]` per node and component.
#[derive(Debug, Clone)]
pub struct SplineField {
    grid: Grid2D,
    data: Vec<[[f64; 4]; 2]>,
}

/// Node derivatives of the natural cubic spline through `f` with spacing `h`.
pub(crate) fn spline_slopes(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    // Second derivatives: natural ends, Thomas algorithm on the interior.
    let mut m = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        let rhs = 6.0 * (f[i + 1] - 2.0 * f[i] + f[i - 1]) / (h * h);
        let denom = 4.0 - c[i - 1];
        c[i] = 1.0 / denom;
        d[i] = (rhs - d[i - 1]) / denom;
    }
    for i in (1..n - 1).rev() {
        m[i] = d[i] - c[i] * m[i + 1];
    }
    let mut s = vec![0.0; n];
    for i in 0..n - 1 {
        s[i] = (f[i + 1] - f[i]) / h - h * (2.0 * m[i] + m[i + 1]) / 6.0;
    }
    s[n - 1] = (f[n - 1] - f[n - 2]) / h + h * (m[n - 2] + 2.0 * m[n - 1]) / 6.0;
    s
}

impl SplineField {
    pub fn new(v: &VectorGridField) -> Self {
        let g = &v.grid;
        let n = g.n();
        let [h1, h2] = g.h();
        let mut data = vec![[[0.0; 4]; 2]; g.len()];
        for c in 0..2 {
            let vals: Vec<f64> = v.values.iter().map(|a| a[c]).collect();
            let mut fx = vec![0.0; g.len()];
            let mut fy = vec![0.0; g.len()];
            let mut fxy = vec![0.0; g.len()];
            for j in 0..n {
                let row: Vec<f64> = (0..n).map(|i| vals[g.index(i, j)]).collect();
                for (i, s) in spline_slopes(&row, h1).into_iter().enumerate() {
                    fx[g.index(i, j)] = s;
                }
            }
            for i in 0..n {
                let col: Vec<f64> = (0..n).map(|j| vals[g.index(i, j)]).collect();
                let colx: Vec<f64> = (0..n).map(|j| fx[g.index(i, j)]).collect();
                for (j, (s, sx)) in spline_slopes(&col, h2).into_iter().zip(spline_slopes(&colx, h2)).enumerate() {
                    fy[g.index(i, j)] = s;
                    fxy[g.index(i, j)] = sx;
                }
            }
            for k in 0..g.len() {
                data[k][c] = [vals[k], fx[k], fy[k], fxy[k]];
            }
        }
        Self { grid: g.clone(), data }
    }

    /// Spline value; queries outside the box are clamped onto it.
    pub fn interpolate(&self, z: &[f64]) -> [f64; 2] {
        let g = &self.grid;
        let lo = g.domain().lower();
        let [h1, h2] = g.h();
        let n = g.n();
        let cell = |k: usize, h: f64| {
            let s = ((z[k] - lo[k]) / h).clamp(0.0, (n - 1) as f64);
            let c = (s.floor() as usize).min(n - 2);
            (c, s - c as f64)
        };
        let (i, tx) = cell(0, h1);
        let (j, ty) = cell(1, h2);
        // Hermite basis: value and slope weights at both ends.
        let basis = |t: f64, h: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            [2.0 * t3 - 3.0 * t2 + 1.0, (t3 - 2.0 * t2 + t) * h, -2.0 * t3 + 3.0 * t2, (t3 - t2) * h]
        };
        let bx = basis(tx, h1);
        let by = basis(ty, h2);
        let mut out = [0.0; 2];
        for (a, wx_v, wx_d) in [(0usize, bx[0], bx[1]), (1, bx[2], bx[3])] {
            for (b, wy_v, wy_d) in [(0usize, by[0], by[1]), (1, by[2], by[3])] {
                let node = &self.data[g.index(i + a, j + b)];
                for c in 0..2 {
                    let [f, fx, fy, fxy] = node[c];
                    out[c] += wx_v * wy_v * f + wx_d * wy_v * fx + wx_v * wy_d * fy + wx_d * wy_d * fxy;
                }
            }
        }
        out
    }
}

/// Tunables shared by every leg of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowConfig {
    /// Points per axis of the reference grid.
    pub grid_n: usize,
    /// Knots per leg.
    pub knots: usize,
    /// RK4 steps per leg.
    pub steps: usize,
    /// Relative residual for the Neumann solves. Tight by default: a
    /// looser stop makes the fields jitter as the leg base moves, which
    /// finite differences in prices would pick up.
    pub tol: f64,
    /// Largest `h * L` for the corrected income leg, `L` the correction's
    /// Lipschitz bound.
    pub stiffness: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { grid_n: 65, knots: 17, steps: 64, tol: 1e-12, stiffness: 0.5 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knots < 9 {
            return Err(Error::Config(format!("legs need at least 9 knots, got {}", self.knots)));
        }
        if self.steps == 0 {
            return Err(Error::Config("RK4 step count must be positive".into()));
        }
        Grid2D::unit(self.grid_n)?;
        if !(self.stiffness > 0.0 && self.stiffness <= 2.0) {
            return Err(Error::Config(format!("stiffness must lie in (0, 2], got {}", self.stiffness)));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-3) {
            return Err(Error::Config(format!("solver tolerance must lie in (0, 1e-3], got {}", self.tol)));
        }
        Ok(())
    }
}

/// One leg: coordinate `coord` of `x` runs over its full domain interval
/// with the remaining coordinates held at `base`.
#[derive(Debug, Clone)]
pub struct Leg {
    pub coord: usize,
    pub base: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub knots: Vec<f64>,
    pub fields: Vec<VectorGridField>,
    splines: Vec<SplineField>,
    /// Spline slopes `dv/dt` at the knots.
    slopes: Vec<SplineField>,
    /// 1.5x the largest grid Lipschitz estimate over knots.
    pub lipschitz: f64,
    zero: bool,
}

impl Leg {
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// Natural cubic spline in `t` across knots, cubic spline in space,
    /// McShane (linear in `t`) outside the reference box.
    pub fn velocity(&self, t: f64, omega: &[f64; 2]) -> [f64; 2] {
        if self.zero {
            return [0.0; 2];
        }
        let k = self.knots.len();
        let dt = (self.t1 - self.t0) / (k - 1) as f64;
        let s = ((t - self.t0) / dt).clamp(0.0, (k - 1) as f64);
        let i = (s.floor() as usize).min(k - 2);
        let w = s - i as f64;
        if !self.fields[i].grid.domain().contains(omega) {
            let a = lipschitz_extend(&self.fields[i], self.lipschitz, omega);
            let b = lipschitz_extend(&self.fields[i + 1], self.lipschitz, omega);
            return [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])];
        }
        let (w2, w3) = (w * w, w * w * w);
        let c = [
            2.0 * w3 - 3.0 * w2 + 1.0,
            (w3 - 2.0 * w2 + w) * dt,
            -2.0 * w3 + 3.0 * w2,
            (w3 - w2) * dt,
        ];
        let terms = [
            self.splines[i].interpolate(omega),
            self.slopes[i].interpolate(omega),
            self.splines[i + 1].interpolate(omega),
            self.slopes[i + 1].interpolate(omega),
        ];
        let mut out = [0.0; 2];
        for (ck, v) in c.iter().zip(&terms) {
            out[0] += ck * v[0];
            out[1] += ck * v[1];
        }
        out
    }

    /// Price-income point at leg time `t`.
    pub fn point(&self, t: f64) -> Vec<f64> {
        let mut x = self.base.clone();
        x[self.coord] = t;
        x
    }
}

/// Knot-wise Neumann solves for one leg.
pub fn build_leg(f: &dyn DemandFamily, coord: usize, base: &[f64], cfg: &FlowConfig) -> Result<Leg> {
    cfg.validate()?;
    if f.dim() != 2 {
        return Err(Error::Unsupported(format!("transport is implemented for d = 2, family has d = {}", f.dim())));
    }
    let dom = f.domain();
    if coord > f.dim() || base.len() != f.dim() + 1 {
        return Err(Error::Config(format!("leg coordinate {coord} or base length {} invalid", base.len())));
    }
    let (t0, t1) = (dom.lower()[coord], dom.upper()[coord]);
    let mut probe = base.to_vec();
    probe[coord] = t0;
    if !dom.contains(&probe) {
        return Err(Error::Domain(probe));
    }
    let grid = Grid2D::new(f.reference_support(), cfg.grid_n)?;
    let knots: Vec<f64> = (0..cfg.knots).map(|k| t0 + (t1 - t0) * k as f64 / (cfg.knots - 1) as f64).collect();
    let floor = f.density_floor();
    let mut fields = Vec::with_capacity(knots.len());
    let mut lip: f64 = 0.0;
    for &t in &knots {
        let mut x = base.to_vec();
        x[coord] = t;
        let rate = grid.from_fn(|w| f.pullback_density_dx(&x, &w, coord));
        if rate.values.iter().all(|v| *v == 0.0) {
            fields.push(VectorGridField::zeros(&grid));
            continue;
        }
        let rho = grid.from_fn(|w| f.pullback_density(&x, &w));
        let prob = EllipticProblem::new(Coefficient::Identity, rate)?;
        let sol = solve_neumann(&prob, cfg.tol)?;
        let mut v = velocity_from_potential(&sol.u, &rho, floor)?;
        // Zero-flux condition imposed exactly so trajectories stay inside.
        let n = grid.n();
        for j in 0..n {
            for i in 0..n {
                let idx = grid.index(i, j);
                if i == 0 || i == n - 1 {
                    v.values[idx][0] = 0.0;
                }
                if j == 0 || j == n - 1 {
                    v.values[idx][1] = 0.0;
                }
            }
        }
        lip = lip.max(v.lipschitz_estimate());
        fields.push(v);
    }
    let zero = fields.iter().all(VectorGridField::is_zero);
    let splines = fields.iter().map(SplineField::new).collect();
    let slopes = time_slopes(&fields, (t1 - t0) / (cfg.knots - 1) as f64).iter().map(SplineField::new).collect();
    Ok(Leg { coord, base: base.to_vec(), t0, t1, knots, fields, splines, slopes, lipschitz: (1.5 * lip).max(1e-12), zero })
}

/// Natural-spline slopes in `t` of a knot sequence of fields, node by node.
fn time_slopes(fields: &[VectorGridField], dt: f64) -> Vec<VectorGridField> {
    let mut out: Vec<VectorGridField> = fields.iter().map(|f| VectorGridField::zeros(&f.grid)).collect();
    let len = fields[0].values.len();
    let mut seq = vec![0.0; fields.len()];
    for node in 0..len {
        for c in 0..2 {
            for (k, f) in fields.iter().enumerate() {
                seq[k] = f.values[node][c];
            }
            for (k, s) in spline_slopes(&seq, dt).into_iter().enumerate() {
                out[k].values[node][c] = s;
            }
        }
    }
    out
}

/// Extra reference-coordinate velocity carried by the final leg.
pub trait LegCorrection: Send + Sync {
    fn velocity(&self, t: f64, omega: &[f64; 2]) -> [f64; 2];

    /// False when the correction vanishes at `omega` for every `t`.
    fn may_act(&self, omega: &[f64; 2]) -> bool;

    /// Bound on the spatial Lipschitz constant of [`LegCorrection::velocity`].
    fn lipschitz(&self) -> f64;
}

/// Classical RK4 on `dX/dt = v(t, X)` from the leg start to `t_target`,
/// `ceil(steps / (K - 1))` uniform steps inside each knot interval.
pub fn leg_integrate(leg: &Leg, t_target: f64, omega: &[f64], steps: usize) -> Result<[f64; 2]> {
    integrate(leg, None, t_target, [omega[0], omega[1]], steps)
}

fn integrate(
    leg: &Leg,
    correction: Option<&dyn LegCorrection>,
    t_target: f64,
    omega: [f64; 2],
    steps: usize,
) -> Result<[f64; 2]> {
    if t_target == leg.t0 {
        return Ok(omega);
    }
    if leg.zero && correction.is_none_or(|c| !c.may_act(&omega)) {
        return Ok(omega);
    }
    if steps == 0 {
        return Err(Error::Config("RK4 step count must be positive".into()));
    }
    // Steps are laid out per knot interval so that RK4 never straddles a
    // knot of the time spline; a full leg gets about `steps` steps and the
    // output stays smooth in `t_target`.
    let per_interval = steps.div_ceil(leg.knots.len() - 1);
    let mut z = omega;
    for win in leg.knots.windows(2) {
        let (a, b) = (win[0], win[1].min(t_target));
        if a >= t_target {
            break;
        }
        z = rk4_interval(leg, correction, a, b, per_interval, z, &omega)?;
    }
    Ok(z)
}

fn rk4_interval(
    leg: &Leg,
    correction: Option<&dyn LegCorrection>,
    a: f64,
    b: f64,
    steps: usize,
    mut z: [f64; 2],
    origin: &[f64],
) -> Result<[f64; 2]> {
    let field = |t: f64, z: &[f64; 2]| {
        let mut v = leg.velocity(t, z);
        if let Some(c) = correction {
            let w = c.velocity(t, z);
            v[0] += w[0];
            v[1] += w[1];
        }
        v
    };
    let h = (b - a) / steps as f64;
    for s in 0..steps {
        let t = a + s as f64 * h;
        let k1 = field(t, &z);
        let k2 = field(t + 0.5 * h, &[z[0] + 0.5 * h * k1[0], z[1] + 0.5 * h * k1[1]]);
        let k3 = field(t + 0.5 * h, &[z[0] + 0.5 * h * k2[0], z[1] + 0.5 * h * k2[1]]);
        let k4 = field(t + h, &[z[0] + h * k3[0], z[1] + h * k3[1]]);
        for k in 0..2 {
            z[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
        if !(z[0].is_finite() && z[1].is_finite()) {
            return Err(Error::Integration(format!("trajectory from {origin:?} diverged at t = {}", t + h)));
        }
    }
    Ok(z)
}

/// Positions at every knot of `leg` from its start, matching
/// [`leg_integrate`] to each knot bitwise.
pub fn leg_knot_positions(leg: &Leg, omega: &[f64], steps: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(leg.knots.len());
    let mut z = [omega[0], omega[1]];
    out.push(z);
    let per_interval = steps.div_ceil(leg.knots.len() - 1);
    for win in leg.knots.windows(2) {
        if !leg.zero {
            z = rk4_interval(leg, None, win[0], win[1], per_interval, z, omega)?;
        }
        out.push(z);
    }
    Ok(out)
}

/// Builds the final-leg correction for a fixed price vector.
pub trait CorrectionBuilder: Send + Sync {
    /// `None` when the correction vanishes identically for these prices.
    fn build(&self, flow: &CompositeFlow, p: &[f64]) -> Result<Option<Arc<dyn LegCorrection>>>;
}

type LegKey = (usize, Vec<i64>);

const KEY_QUANTUM: f64 = 1e-9;

fn quantize(v: &[f64]) -> Vec<i64> {
    v.iter().map(|a| (a / KEY_QUANTUM).round() as i64).collect()
}

/// The map `Phi(x, w)`, optionally with a rotation correction on the final
/// leg. Legs and corrections are built on demand and cached.
pub struct CompositeFlow {
    family: Arc<dyn DemandFamily>,
    cfg: FlowConfig,
    builder: Option<Arc<dyn CorrectionBuilder>>,
    legs: Mutex<HashMap<LegKey, Arc<Leg>>>,
    corrections: Mutex<HashMap<Vec<i64>, Option<Arc<dyn LegCorrection>>>>,
}

impl std::fmt::Debug for CompositeFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompositeFlow")
            .field("family", &self.family.name())
            .field("cfg", &self.cfg)
            .field("corrected", &self.builder.is_some())
            .finish()
    }
}

/// Legs resolved for one price-income point.
#[derive(Clone)]
pub struct PreparedPoint {
    x: PriceIncome,
    legs: Vec<Arc<Leg>>,
    correction: Option<Arc<dyn LegCorrection>>,
    final_steps: usize,
    identity: bool,
}

impl PreparedPoint {
    pub fn x(&self) -> &PriceIncome {
        &self.x
    }

    pub fn final_steps(&self) -> usize {
        self.final_steps
    }

    pub fn is_corrected(&self) -> bool {
        self.correction.is_some()
    }

    pub fn final_leg(&self) -> &Leg {
        self.legs.last().expect("at least one leg")
    }
}

/// Output of one composite evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    /// Position on the reference support after the legs.
    pub reference: [f64; 2],
    pub q: [f64; 2],
    /// Pulled back into the support by at most 1e-9.
    pub clamped: bool,
    /// Left the support by more than 1e-9.
    pub escaped: bool,
}

/// Counters for a pushed batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClampStats {
    pub clamped: usize,
    pub escaped: usize,
}

impl CompositeFlow {
    pub fn new(family: Arc<dyn DemandFamily>, cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        if family.dim() != 2 {
            return Err(Error::Unsupported(format!("transport is implemented for d = 2, family has d = {}", family.dim())));
        }
        Ok(Self { family, cfg, builder: None, legs: Mutex::default(), corrections: Mutex::default() })
    }

    /// Same legs, with a final-leg correction attached.
    pub fn with_correction(&self, builder: Arc<dyn CorrectionBuilder>) -> Self {
        let legs = self.legs.lock().expect("leg cache poisoned").clone();
        Self {
            family: self.family.clone(),
            cfg: self.cfg,
            builder: Some(builder),
            legs: Mutex::new(legs),
            corrections: Mutex::default(),
        }
    }

    pub fn family(&self) -> &Arc<dyn DemandFamily> {
        &self.family
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn is_corrected(&self) -> bool {
        self.builder.is_some()
    }

    fn leg(&self, coord: usize, base: &[f64]) -> Result<Arc<Leg>> {
        let key = (coord, quantize(&base[..coord]));
        let mut cache = self.legs.lock().expect("leg cache poisoned");
        if let Some(leg) = cache.get(&key) {
            return Ok(leg.clone());
        }
        let leg = Arc::new(build_leg(self.family.as_ref(), coord, base, &self.cfg)?);
        cache.insert(key, leg.clone());
        Ok(leg)
    }

    fn check(&self, x: &PriceIncome) -> Result<()> {
        if x.dim() != self.family.dim() || !self.family.domain().contains(x.coords()) {
            return Err(Error::Domain(x.coords().to_vec()));
        }
        Ok(())
    }

    fn prepare_legs(&self, x: &PriceIncome) -> Result<Vec<Arc<Leg>>> {
        let lower = self.family.domain().lower();
        let d = self.family.dim();
        (0..=d)
            .map(|k| {
                let base: Vec<f64> = (0..=d).map(|i| if i < k { x.coords()[i] } else { lower[i] }).collect();
                self.leg(k, &base)
            })
            .collect()
    }

    /// Step-one legs only, ignoring any attached correction.
    pub fn prepare_step1(&self, x: &PriceIncome) -> Result<PreparedPoint> {
        self.check(x)?;
        let identity = x.coords() == self.family.domain().lower();
        Ok(PreparedPoint {
            x: x.clone(),
            legs: self.prepare_legs(x)?,
            correction: None,
            final_steps: self.cfg.steps,
            identity,
        })
    }

    /// Legs and correction for `x`. The final-leg step count follows the
    /// correction's stiffness unless `final_steps` pins it.
    pub fn prepare_with_steps(&self, x: &PriceIncome, final_steps: Option<usize>) -> Result<PreparedPoint> {
        let mut prep = self.prepare_step1(x)?;
        let Some(builder) = &self.builder else {
            return Ok(prep);
        };
        let p = x.p().to_vec();
        let key = quantize(&p);
        let correction = {
            let mut cache = self.corrections.lock().expect("correction cache poisoned");
            match cache.get(&key) {
                Some(c) => c.clone(),
                None => {
                    let c = builder.build(self, &p)?;
                    cache.insert(key, c.clone());
                    c
                }
            }
        };
        if let Some(c) = &correction {
            let d = self.family.dim();
            let span = x.y() - self.family.domain().lower()[d];
            let stiff = (c.lipschitz() * span / self.cfg.stiffness).ceil() as usize;
            prep.final_steps = final_steps.unwrap_or(self.cfg.steps.max(stiff));
        }
        prep.correction = correction;
        Ok(prep)
    }

    pub fn prepare(&self, x: &PriceIncome) -> Result<PreparedPoint> {
        self.prepare_with_steps(x, None)
    }

    /// Runs the legs and maps forward. `skip_final` stops before the income
    /// leg and reports the point at `(p, y_lo)`.
    pub fn eval_prepared(&self, prep: &PreparedPoint, omega: &[f64], skip_final: bool) -> Result<FlowPoint> {
        let start = [omega[0], omega[1]];
        if prep.identity {
            return Ok(FlowPoint { reference: start, q: start, clamped: false, escaped: false });
        }
        let d = self.family.dim();
        let coords = prep.x.coords();
        let mut z = start;
        for (k, leg) in prep.legs.iter().enumerate() {
            if k == d {
                if skip_final {
                    break;
                }
                z = integrate(leg, prep.correction.as_deref(), coords[k], z, prep.final_steps)?;
            } else {
                z = integrate(leg, None, coords[k], z, self.cfg.steps)?;
            }
        }
        let mut at = coords.to_vec();
        if skip_final {
            at[d] = self.family.domain().lower()[d];
        }
        let mut q = [0.0; 2];
        self.family.forward(&at, &z, &mut q);
        let support = self.family.support(&at);
        let excess = support.excess(&q);
        let (clamped, escaped) = if excess == 0.0 {
            (false, false)
        } else if excess <= 1e-9 {
            support.clamp(&mut q);
            (true, false)
        } else {
            (false, true)
        };
        Ok(FlowPoint { reference: z, q, clamped, escaped })
    }

    pub fn eval(&self, x: &PriceIncome, omega: &[f64]) -> Result<FlowPoint> {
        let prep = self.prepare(x)?;
        self.eval_prepared(&prep, omega, false)
    }

    /// Pushes a batch of reference points through the flow at `x`.
    pub fn push_samples(&self, x: &PriceIncome, omegas: &[Vec<f64>], skip_final: bool) -> Result<(Vec<[f64; 2]>, ClampStats)> {
        use rayon::prelude::*;
        let prep = self.prepare(x)?;
        let pts: Vec<FlowPoint> =
            omegas.par_iter().map(|w| self.eval_prepared(&prep, w, skip_final)).collect::<Result<_>>()?;
        let mut stats = ClampStats::default();
        for p in &pts {
            stats.clamped += usize::from(p.clamped);
            stats.escaped += usize::from(p.escaped);
        }
        Ok((pts.into_iter().map(|p| p.q).collect(), stats))
    }
}

/// `composite_eval` on a fresh preparation.
pub fn composite_eval(flow: &CompositeFlow, x: &PriceIncome, omega: &[f64]) -> Result<[f64; 2]> {
    Ok(flow.eval(x, omega)?.q)
}

/// Finite-difference scheme along one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stencil {
    Central,
    /// `(-3 f0 + 4 f1 - f2) / 2h`.
    Forward,
    /// `(3 f0 - 4 f-1 + f-2) / 2h`.
    Backward,
}

impl Stencil {
    /// Offsets (in units of h) and weights (in units of 1/h).
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::Forward => &[(0.0, -1.5), (1.0, 2.0), (2.0, -0.5)],
            Stencil::Backward => &[(0.0, 1.5), (-1.0, -2.0), (-2.0, 0.5)],
        }
    }

    /// Central when `x +- h` fits in `[lo, hi]`, one-sided otherwise.
    pub fn choose(x: f64, h: f64, lo: f64, hi: f64) -> Result<Self> {
        if x - h >= lo && x + h <= hi {
            Ok(Stencil::Central)
        } else if x + 2.0 * h <= hi {
            Ok(Stencil::Forward)
        } else if x - 2.0 * h >= lo {
            Ok(Stencil::Backward)
        } else {
            Err(Error::Config(format!("step {h} too large for the interval [{lo}, {hi}]")))
        }
    }
}

/// Differences of a flow at a fixed `x`, with every perturbed point
/// prepared once and reused across `w`.
pub struct JacobianStencil<'a> {
    flow: &'a CompositeFlow,
    center: PreparedPoint,
    taps: Vec<(Stencil, f64, Vec<(f64, PreparedPoint)>)>,
}

/// `D_p Phi` laid out `(i, j) = d Phi_i / d p_j`, and `D_y Phi`.
#[derive(Debug, Clone)]
pub struct FlowJacobian {
    pub value: [f64; 2],
    pub dp: DMatrix<f64>,
    pub dy: DVector<f64>,
}

impl<'a> JacobianStencil<'a> {
    /// `h[k]` is the step along coordinate `k`.
    pub fn new(flow: &'a CompositeFlow, x: &PriceIncome, h: &[f64]) -> Result<Self> {
        let center = flow.prepare(x)?;
        let dom = flow.family().domain();
        let steps = center.final_steps();
        let mut taps = Vec::with_capacity(h.len());
        for (k, &hk) in h.iter().enumerate() {
            if !(hk > 0.0) {
                return Err(Error::Config(format!("finite-difference step {hk} must be positive")));
            }
            let st = Stencil::choose(x.coords()[k], hk, dom.lower()[k], dom.upper()[k])?;
            let mut pts = Vec::new();
            for &(off, wt) in st.taps() {
                let prep = if off == 0.0 {
                    center.clone()
                } else {
                    let xp = x.with_coord(k, x.coords()[k] + off * hk);
                    flow.prepare_with_steps(&xp, center.is_corrected().then_some(steps))?
                };
                pts.push((wt / hk, prep));
            }
            taps.push((st, hk, pts));
        }
        Ok(Self { flow, center, taps })
    }

    pub fn one_sided(&self) -> Vec<bool> {
        self.taps.iter().map(|t| t.0 != Stencil::Central).collect()
    }

    pub fn center(&self) -> &PreparedPoint {
        &self.center
    }

    pub fn eval(&self, omega: &[f64]) -> Result<FlowJacobian> {
        let d = self.flow.family().dim();
        let value = self.flow.eval_prepared(&self.center, omega, false)?.q;
        let mut cols = Vec::with_capacity(d + 1);
        for (_, _, pts) in &self.taps {
            let mut acc = [0.0; 2];
            for (wt, prep) in pts {
                let q = self.flow.eval_prepared(prep, omega, false)?.q;
                acc[0] += wt * q[0];
                acc[1] += wt * q[1];
            }
            cols.push(acc);
        }
        let dp = DMatrix::from_fn(d, d, |i, j| cols[j][i]);
        let dy = DVector::from_fn(d, |i, _| cols[d][i]);
        Ok(FlowJacobian { value, dp, dy })
    }
}

/// `D_p Phi` and `D_y Phi` at one `(x, w)` with steps `h_p`, `h_y`.
#[derive(Debug, Clone)]
pub struct FlowJacobianReport {
    pub jacobian: FlowJacobian,
    pub one_sided: Vec<bool>,
}

pub fn flow_jacobian_fd(flow: &CompositeFlow, x: &PriceIncome, omega: &[f64], h_p: f64, h_y: f64) -> Result<FlowJacobianReport> {
    let d = flow.family().dim();
    let mut h = vec![h_p; d];
    h.push(h_y);
    let st = JacobianStencil::new(flow, x, &h)?;
    Ok(FlowJacobianReport { jacobian: st.eval(omega)?, one_sided: st.one_sided() })
}

/// `(D_h - D_{h/2}) / (D_{h/2} - D_{h/4})` per entry of `[D_p Phi | D_y Phi]`.
/// Entries whose differences sit at round-off level (the derivative is
/// resolved exactly by every step) are `None`.
pub fn richardson_ratios(flow: &CompositeFlow, x: &PriceIncome, omega: &[f64], h: f64) -> Result<Vec<Option<f64>>> {
    let at = |s: f64| -> Result<Vec<f64>> {
        let j = flow_jacobian_fd(flow, x, omega, s, s)?.jacobian;
        let mut v: Vec<f64> = j.dp.iter().copied().collect();
        v.extend(j.dy.iter());
        Ok(v)
    };
    let (a, b, c) = (at(h)?, at(0.5 * h)?, at(0.25 * h)?);
    Ok(a.iter()
        .zip(&b)
        .zip(&c)
        .map(|((a, b), c)| {
            let (num, den) = (a - b, b - c);
            let floor = 1e-11 * (1.0 + c.abs());
            (den.abs() > floor).then(|| num / den)
        })
        .collect())
}
