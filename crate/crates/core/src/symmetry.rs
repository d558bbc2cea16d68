//! Income-elasticity-bound intervals for the asymmetry of the average
//! Slutsky matrix.
//!
//! With `l_i <= eps_i <= u_i` and `M_ij >= 0`,
//! `E[S_ij - S_ji] = D_{p_j} m_i - D_{p_i} m_j + E[D_y q_i q_j - D_y q_j q_i]`
//! lies in `center + [l_i - u_j, u_i - l_j] M_ij / y`, which must contain
//! zero under a symmetric Slutsky matrix.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::demand_model::{BoxDomain, DemandFamily, PriceIncome};
use crate::error::{Error, Result};
use crate::identification::{moments_or_fd, IdentifiedFunctionals};
use crate::rotation::Lattice;
use crate::seed;

/// Bounds on the income elasticities `eps_i = D_y q_i y / q_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ElasticityBounds {
    /// The same `[l, u]` for every good.
    Uniform { lower: f64, upper: f64 },
    /// `[l_i, u_i]` per good.
    PerGood { lower: Vec<f64>, upper: Vec<f64> },
}

impl ElasticityBounds {
    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        let b = Self::Uniform { lower, upper };
        b.validate(1)?;
        Ok(b)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let ok = |l: f64, u: f64| l.is_finite() && u.is_finite() && l <= u;
        match self {
            Self::Uniform { lower, upper } => {
                if !ok(*lower, *upper) {
                    return Err(Error::Config(format!("elasticity bounds need lower <= upper, got [{lower}, {upper}]")));
                }
            }
            Self::PerGood { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(Error::Config(format!("per-good bounds need {d} entries each")));
                }
                if let Some(i) = (0..d).find(|&i| !ok(lower[i], upper[i])) {
                    return Err(Error::Config(format!("good {}: lower bound {} exceeds upper {}", i + 1, lower[i], upper[i])));
                }
            }
        }
        Ok(())
    }

    pub fn good(&self, i: usize) -> (f64, f64) {
        match self {
            Self::Uniform { lower, upper } => (*lower, *upper),
            Self::PerGood { lower, upper } => (lower[i], upper[i]),
        }
    }
}

/// Moments at one price-income point, with `price_jacobian[(i, j)] = D_{p_j} m_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMoments {
    pub x: Vec<f64>,
    pub m: DVector<f64>,
    pub second: DMatrix<f64>,
    pub price_jacobian: DMatrix<f64>,
    /// Per-node bounds overriding the global ones.
    pub bounds: Option<(f64, f64)>,
}

impl From<&IdentifiedFunctionals> for NodeMoments {
    fn from(f: &IdentifiedFunctionals) -> Self {
        Self { x: f.x.clone(), m: f.m.clone(), second: f.second.clone(), price_jacobian: f.price_jacobian.clone(), bounds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymmetryInterval {
    pub x: Vec<f64>,
    /// One-based goods, `i < j`.
    pub i: usize,
    pub j: usize,
    /// `D_{p_j} m_i - D_{p_i} m_j`.
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    pub halfwidth: f64,
    /// Distance from zero to the nearer end, negative when zero is outside.
    pub margin: f64,
    pub contains_zero: bool,
}

/// `I_ij(x)` for zero-based `i < j`.
pub fn interval_compute(node: &NodeMoments, bounds: &ElasticityBounds, i: usize, j: usize) -> Result<AsymmetryInterval> {
    let d = node.m.len();
    if !(i < j && j < d) {
        return Err(Error::Config(format!("interval needs i < j < {d}, got ({i}, {j})")));
    }
    bounds.validate(d)?;
    let ((li, ui), (lj, uj)) = match node.bounds {
        Some((l, u)) => {
            if !(l <= u) {
                return Err(Error::Config(format!("node bounds at {:?} have lower {l} > upper {u}", node.x)));
            }
            ((l, u), (l, u))
        }
        None => (bounds.good(i), bounds.good(j)),
    };
    let y = node.x[d];
    let center = node.price_jacobian[(i, j)] - node.price_jacobian[(j, i)];
    let scale = node.second[(i, j)] / y;
    let (lower, upper) = (center + (li - uj) * scale, center + (ui - lj) * scale);
    let halfwidth = 0.5 * (upper - lower);
    let margin = (-lower).min(upper);
    Ok(AsymmetryInterval { x: node.x.clone(), i: i + 1, j: j + 1, center, lower, upper, halfwidth, margin, contains_zero: margin >= 0.0 })
}

/// Moments on a rectangular lattice over price-income space.
#[derive(Debug, Clone)]
pub struct MomentGrid {
    pub lattice: Lattice,
    pub nodes: Vec<NodeMoments>,
    /// Per node and price axis: whether the difference was one-sided.
    pub one_sided: Vec<Vec<bool>>,
}

/// Three-point Lagrange derivative at `t[at]`.
fn three_point(t: [f64; 3], v: [f64; 3], at: usize) -> f64 {
    let x = t[at];
    (0..3)
        .map(|k| {
            let (a, b) = ((k + 1) % 3, (k + 2) % 3);
            // d/dx of the k-th basis polynomial.
            let num = if at == k { (x - t[a]) + (x - t[b]) } else if at == a { x - t[b] } else { x - t[a] };
            v[k] * num / ((t[k] - t[a]) * (t[k] - t[b]))
        })
        .sum()
}

impl MomentGrid {
    /// Fills `D_{p_j} m_i` by three-point differences along each price
    /// axis: centered inside, one-sided at lattice edges.
    fn from_raw(lattice: Lattice, mut nodes: Vec<NodeMoments>, d: usize) -> Result<Self> {
        for k in 0..d {
            if lattice.axes[k].len() < 3 {
                return Err(Error::Parse {
                    row: nodes.len() + 1,
                    msg: format!("insufficient nodes for differentiation: axis p{} has {} value(s), need 3", k + 1, lattice.axes[k].len()),
                });
            }
        }
        let mut one_sided = vec![vec![false; d]; nodes.len()];
        let mut jac = vec![DMatrix::zeros(d, d); nodes.len()];
        for flat in 0..nodes.len() {
            let idx = lattice.multi_index(flat);
            for k in 0..d {
                let axis = &lattice.axes[k];
                let n = axis.len();
                let (first, at) = match idx[k] {
                    0 => (0, 0),
                    i if i == n - 1 => (n - 3, 2),
                    i => (i - 1, 1),
                };
                one_sided[flat][k] = at != 1;
                let mut pts = [0usize; 3];
                for (s, slot) in pts.iter_mut().enumerate() {
                    let mut nb = idx.clone();
                    nb[k] = first + s;
                    let p: Vec<f64> = nb.iter().zip(&lattice.axes).map(|(i, a)| a[*i]).collect();
                    *slot = lattice.flat_index(&p).expect("lattice neighbor");
                }
                let t = [axis[first], axis[first + 1], axis[first + 2]];
                for i in 0..d {
                    jac[flat][(i, k)] = three_point(t, [nodes[pts[0]].m[i], nodes[pts[1]].m[i], nodes[pts[2]].m[i]], at);
                }
            }
        }
        for (node, j) in nodes.iter_mut().zip(jac) {
            node.price_jacobian = j;
        }
        Ok(Self { lattice, nodes, one_sided })
    }
}

/// Reads `p1,...,pd,y,m1,...,md,M11,M12,...,Mdd[,lower,upper]`.
pub fn moments_ingest(path: &Path) -> Result<MomentGrid> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let d = header.iter().take_while(|h| h.starts_with('p')).count();
    if d == 0 {
        return Err(Error::Parse { row: 1, msg: "header must start with p1,...,pd".into() });
    }
    let mut expected: Vec<String> = (1..=d).map(|i| format!("p{i}")).collect();
    expected.push("y".into());
    expected.extend((1..=d).map(|i| format!("m{i}")));
    for i in 1..=d {
        for j in 1..=d {
            expected.push(format!("M{i}{j}"));
        }
    }
    let with_bounds = header.len() == expected.len() + 2;
    let mut full = expected.clone();
    if with_bounds {
        full.push("lower".into());
        full.push("upper".into());
    }
    if header != full {
        return Err(Error::Parse { row: 1, msg: format!("expected header {}[,lower,upper], found {}", expected.join(","), header.join(",")) });
    }
    let mut nodes = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != full.len() {
            return Err(Error::Parse { row, msg: format!("expected {} columns, found {}", full.len(), rec.len()) });
        }
        let vals: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { row, msg: format!("column {}: non-numeric or non-finite value {s:?}", full[c]) })
            })
            .collect::<Result<_>>()?;
        let x = vals[..=d].to_vec();
        let m = DVector::from_column_slice(&vals[d + 1..2 * d + 1]);
        let second = DMatrix::from_row_slice(d, d, &vals[2 * d + 1..2 * d + 1 + d * d]);
        let bounds = with_bounds.then(|| (vals[vals.len() - 2], vals[vals.len() - 1]));
        nodes.push(NodeMoments { x, m, second, price_jacobian: DMatrix::zeros(d, d), bounds });
    }
    if nodes.is_empty() {
        return Err(Error::Parse { row: 2, msg: "no data rows".into() });
    }
    let lattice = Lattice::from_points(&nodes.iter().map(|n| n.x.clone()).collect::<Vec<_>>())?;
    let mut ordered: Vec<Option<NodeMoments>> = vec![None; lattice.len()];
    for n in nodes {
        let i = lattice.flat_index(&n.x).expect("lattice built from these nodes");
        ordered[i] = Some(n);
    }
    MomentGrid::from_raw(lattice, ordered.into_iter().map(|n| n.expect("complete lattice")).collect(), d)
}

/// Writes a moment grid in the ingestion format.
pub fn write_moments_csv(grid: &MomentGrid, path: &Path) -> Result<()> {
    let d = grid.nodes[0].m.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=d).map(|i| format!("p{i}")).collect();
    header.push("y".into());
    header.extend((1..=d).map(|i| format!("m{i}")));
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("M{i}{j}"));
        }
    }
    w.write_record(&header)?;
    for n in &grid.nodes {
        let mut row: Vec<String> = n.x.iter().map(|v| format!("{v:e}")).collect();
        row.extend(n.m.iter().map(|v| format!("{v:e}")));
        row.extend(n.second.transpose().iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Equally spaced lattice, `nodes` points per axis, over the intersection of
/// `[lower, upper]` (default: the whole domain) with the domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeSpec {
    pub nodes: usize,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl LatticeSpec {
    pub fn whole(nodes: usize) -> Self {
        Self { nodes, lower: None, upper: None }
    }

    pub fn resolve(&self, domain: &BoxDomain) -> Result<Lattice> {
        let dims = domain.lower().len();
        if self.nodes < 3 {
            return Err(Error::Config(format!("lattice needs at least 3 nodes per axis, got {}", self.nodes)));
        }
        let mut axes = Vec::with_capacity(dims);
        for k in 0..dims {
            let lo = self.lower.as_ref().map_or(domain.lower()[k], |l| l[k].max(domain.lower()[k]));
            let hi = self.upper.as_ref().map_or(domain.upper()[k], |u| u[k].min(domain.upper()[k]));
            if !(lo < hi) {
                return Err(Error::Config(format!("lattice box does not intersect the domain along axis {}", k + 1)));
            }
            axes.push((0..self.nodes).map(|i| lo + (hi - lo) * i as f64 / (self.nodes - 1) as f64).collect());
        }
        Ok(Lattice { axes })
    }
}

/// Moments of a family on a lattice (oracle, or CRN differences).
pub fn family_moment_grid(f: &dyn DemandFamily, lattice: &Lattice, seed_value: u64) -> Result<MomentGrid> {
    let d = f.dim();
    let nodes = (0..lattice.len())
        .map(|flat| {
            let x = PriceIncome::from_coords(lattice.point(flat));
            let m = moments_or_fd(f, &x, 20_000, seed::derive(seed_value, "grid"))?;
            Ok(NodeMoments { x: x.coords().to_vec(), price_jacobian: m.price_jacobian(), m: m.mean, second: m.second, bounds: None })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentGrid { lattice: lattice.clone(), one_sided: vec![vec![false; d]; nodes.len()], nodes })
}

/// CD0 moments with `m_1 += c p_2` and `m_2 -= c p_1`: the cross-price
/// center becomes `2c` while `M` is untouched.
pub fn injected_asymmetry_grid(f: &dyn DemandFamily, lattice: &Lattice, c: f64) -> Result<MomentGrid> {
    if f.dim() != 2 {
        return Err(Error::Unsupported("injected asymmetry is defined for two goods".into()));
    }
    let mut g = family_moment_grid(f, lattice, 0)?;
    for n in g.nodes.iter_mut() {
        n.m[0] += c * n.x[1];
        n.m[1] -= c * n.x[0];
        n.price_jacobian[(0, 1)] += c;
        n.price_jacobian[(1, 0)] -= c;
    }
    Ok(g)
}

/// Where the moments come from.
pub enum GridSource {
    Family(Arc<dyn DemandFamily>, LatticeSpec),
    Moments(MomentGrid),
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstLocation {
    pub x: Vec<f64>,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    /// `consistent` or `reject`.
    pub verdict: String,
    pub worst_margin: f64,
    pub worst_location: WorstLocation,
    pub slack: f64,
    pub bounds: ElasticityBounds,
    pub nodes: usize,
    #[serde(skip)]
    pub rows: Vec<AsymmetryInterval>,
}

impl SymmetryReport {
    pub fn rejects(&self) -> bool {
        self.verdict == "reject"
    }

    /// `i,j,p1,...,pd,y,center,halfwidth,margin,contains_zero`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let d = self.rows.first().map_or(0, |r| r.x.len() - 1);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["i".to_string(), "j".to_string()];
        header.extend((1..=d).map(|k| format!("p{k}")));
        header.extend(["y", "center", "halfwidth", "margin", "contains_zero"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.i.to_string(), r.j.to_string()];
            rec.extend(r.x.iter().map(|v| format!("{v:e}")));
            rec.extend([r.center, r.halfwidth, r.margin].map(|v| format!("{v:e}")));
            rec.push(r.contains_zero.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `H0: 0 in I_ij(x)` for all `i < j` and lattice nodes; rejected when
/// some margin falls below `-slack`.
pub fn grid_test(source: GridSource, bounds: &ElasticityBounds, slack: f64, seed_value: u64) -> Result<SymmetryReport> {
    if !(slack >= 0.0) {
        return Err(Error::Config(format!("slack must be nonnegative, got {slack}")));
    }
    let grid = match source {
        GridSource::Family(f, spec) => family_moment_grid(f.as_ref(), &spec.resolve(f.domain())?, seed_value)?,
        GridSource::Moments(g) => g,
    };
    let d = grid.nodes.first().map_or(0, |n| n.m.len());
    bounds.validate(d)?;
    let mut rows = Vec::new();
    for node in &grid.nodes {
        for i in 0..d {
            for j in i + 1..d {
                rows.push(interval_compute(node, bounds, i, j)?);
            }
        }
    }
    let worst = rows
        .iter()
        .min_by(|a, b| a.margin.total_cmp(&b.margin))
        .ok_or_else(|| Error::Config("grid test needs at least two goods and one node".into()))?;
    let verdict = if worst.margin < -slack { "reject" } else { "consistent" };
    Ok(SymmetryReport {
        verdict: verdict.into(),
        worst_margin: worst.margin,
        worst_location: WorstLocation { x: worst.x.clone(), i: worst.i, j: worst.j },
        slack,
        bounds: bounds.clone(),
        nodes: grid.nodes.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_is_exact_for_quadratics() {
        let t = [1.0, 1.3, 2.0];
        let f = |x: f64| 2.0 * x * x - x + 0.5;
        let v = t.map(f);
        for at in 0..3 {
            assert!((three_point(t, v, at) - (4.0 * t[at] - 1.0)).abs() < 1e-12);
        }
    }
}
