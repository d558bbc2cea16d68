use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use slutsky_forge::demand_model::{builtin, BoxDomain, CobbDouglas, DemandFamily, PriceIncome};
use slutsky_forge::elliptic::Manufactured;
use slutsky_forge::error::{Error, Result};
use slutsky_forge::identification::{default_test_points, MarginalThresholds, NonidConfig};
use slutsky_forge::rotation::SlutskyTarget;
use slutsky_forge::symmetry::{ElasticityBounds, LatticeSpec};
use slutsky_forge::transport::FlowConfig;

/// Numeric overrides for the Cobb-Douglas family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyOverrides {
    pub share_lower: Option<Vec<f64>>,
    pub share_upper: Option<Vec<f64>>,
    pub domain_lower: Option<Vec<f64>>,
    pub domain_upper: Option<Vec<f64>>,
}

impl FamilyOverrides {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: String,
    pub overrides: FamilyOverrides,
    pub grid_n: usize,
    pub knots: usize,
    pub steps: usize,
    pub leg_tol: f64,
    pub stiffness: f64,
    /// Monte Carlo draws for samples and Slutsky estimates.
    pub n: usize,
    /// Draws for marginal checks; `n` when absent.
    pub n_marginal: Option<usize>,
    pub n_coeffs: usize,
    pub n_functionals: usize,
    pub h_p: f64,
    pub h_y: f64,
    pub seed: u64,
    /// Test points as `(p_1, .., p_d, y)`; empty means the family defaults.
    pub x: Vec<Vec<f64>>,
    pub target_c: Option<f64>,
    pub target_file: Option<PathBuf>,
    /// Shift used by `nonid-demo`.
    pub c: f64,
    pub skip_final: bool,
    pub ks: f64,
    pub energy_ratio: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_per_good: Option<Vec<f64>>,
    pub upper_per_good: Option<Vec<f64>>,
    pub lattice_nodes: usize,
    pub lattice_lower: Option<Vec<f64>>,
    pub lattice_upper: Option<Vec<f64>>,
    pub moments: Option<PathBuf>,
    pub slack: f64,
    pub problems: Vec<Manufactured>,
    pub sizes: Vec<usize>,
    pub poisson_tol: f64,
    pub samples: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        let nonid = NonidConfig::default();
        let thr = MarginalThresholds::default();
        Self {
            family: "cd0".into(),
            overrides: FamilyOverrides::default(),
            grid_n: flow.grid_n,
            knots: flow.knots,
            steps: flow.steps,
            leg_tol: flow.tol,
            stiffness: flow.stiffness,
            n: 20_000,
            n_marginal: None,
            n_coeffs: nonid.n_coeffs,
            n_functionals: nonid.n_functionals,
            h_p: nonid.h_p,
            h_y: nonid.h_y,
            seed: nonid.seed,
            x: Vec::new(),
            target_c: None,
            target_file: None,
            c: 0.05,
            skip_final: false,
            ks: thr.ks,
            energy_ratio: thr.energy_ratio,
            lower: 1.0,
            upper: 1.0,
            lower_per_good: None,
            upper_per_good: None,
            lattice_nodes: 5,
            lattice_lower: None,
            lattice_upper: None,
            moments: None,
            slack: 0.0,
            problems: vec![Manufactured::Cosine, Manufactured::Anisotropic, Manufactured::CrossTerm],
            sizes: vec![33, 65, 129],
            poisson_tol: 1e-8,
            samples: None,
            report: None,
            csv: None,
        }
    }
}

/// Parses `p1=1.5,p2=1.2,y=1.4` into `(p_1, .., p_d, y)`.
pub fn parse_point(text: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::Config(format!("bad --x `{text}`: {msg}"));
    let mut prices: Vec<Option<f64>> = Vec::new();
    let mut y = None;
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{part}`")))?;
        let value: f64 = value.trim().parse().map_err(|_| bad(format!("`{value}` is not a number")))?;
        let key = key.trim();
        if key == "y" {
            if y.replace(value).is_some() {
                return Err(bad("y given twice".into()));
            }
            continue;
        }
        let idx: usize = key
            .strip_prefix('p')
            .and_then(|k| k.parse().ok())
            .filter(|k| *k >= 1)
            .ok_or_else(|| bad(format!("unknown key `{key}`")))?;
        if prices.len() < idx {
            prices.resize(idx, None);
        }
        if prices[idx - 1].replace(value).is_some() {
            return Err(bad(format!("{key} given twice")));
        }
    }
    let mut out = prices
        .iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| bad(format!("missing p{}", i + 1))))
        .collect::<Result<Vec<f64>>>()?;
    out.push(y.ok_or_else(|| bad("missing y".into()))?);
    Ok(out)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn family(&self) -> Result<Arc<dyn DemandFamily>> {
        if self.overrides.is_empty() {
            return builtin(&self.family);
        }
        if self.family != "cd0" {
            return Err(Error::Config(format!("family `{}` takes no numeric overrides", self.family)));
        }
        let base = builtin("cd0")?;
        let d = base.dim();
        let o = &self.overrides;
        let domain = BoxDomain::new(
            o.domain_lower.clone().unwrap_or_else(|| base.domain().lower().to_vec()),
            o.domain_upper.clone().unwrap_or_else(|| base.domain().upper().to_vec()),
        )?;
        let lo = o.share_lower.clone().unwrap_or_else(|| vec![0.2; d]);
        let hi = o.share_upper.clone().unwrap_or_else(|| vec![0.4; d]);
        Ok(Arc::new(CobbDouglas::new(lo, hi, domain)?))
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig { grid_n: self.grid_n, knots: self.knots, steps: self.steps, tol: self.leg_tol, stiffness: self.stiffness }
    }

    pub fn n_marginal(&self) -> usize {
        self.n_marginal.unwrap_or(self.n)
    }

    /// KS threshold at the given sample size. The configured value applies
    /// at 2e4 draws and above and grows like `1/sqrt(n)` below.
    pub fn thresholds(&self, n: usize) -> MarginalThresholds {
        let scale = (20_000.0 / n as f64).sqrt().max(1.0);
        MarginalThresholds { ks: self.ks * scale, energy_ratio: self.energy_ratio, ..MarginalThresholds::default() }
    }

    pub fn points(&self, f: &dyn DemandFamily) -> Result<Vec<PriceIncome>> {
        let pts: Vec<PriceIncome> = if self.x.is_empty() {
            default_test_points(&self.family)
        } else {
            self.x.iter().map(|c| PriceIncome::from_coords(c.clone())).collect()
        };
        for x in &pts {
            if x.coords().len() != f.dim() + 1 {
                return Err(Error::Config(format!(
                    "test point {:?} has {} coordinates, family `{}` needs {}",
                    x.coords(),
                    x.coords().len(),
                    f.name(),
                    f.dim() + 1
                )));
            }
            if !f.domain().contains(x.coords()) {
                return Err(Error::Domain(x.coords().to_vec()));
            }
        }
        Ok(pts)
    }

    pub fn target(&self, f: &dyn DemandFamily) -> Result<Option<SlutskyTarget>> {
        match (&self.target_c, &self.target_file) {
            (Some(_), Some(_)) => Err(Error::Config("give either target_c or target_file, not both".into())),
            (Some(c), None) => {
                if !c.is_finite() {
                    return Err(Error::Config(format!("target_c must be finite, got {c}")));
                }
                Ok(Some(SlutskyTarget::constant_c12(*c)))
            }
            (None, Some(path)) => Ok(Some(SlutskyTarget::from_csv(path, f.dim())?)),
            (None, None) => Ok(None),
        }
    }

    pub fn bounds(&self, d: usize) -> Result<ElasticityBounds> {
        let b = match (&self.lower_per_good, &self.upper_per_good) {
            (None, None) => ElasticityBounds::uniform(self.lower, self.upper)?,
            (Some(l), Some(u)) => ElasticityBounds::PerGood { lower: l.clone(), upper: u.clone() },
            _ => return Err(Error::Config("per-good bounds need both lower_per_good and upper_per_good".into())),
        };
        b.validate(d)?;
        Ok(b)
    }

    pub fn lattice(&self) -> LatticeSpec {
        LatticeSpec { nodes: self.lattice_nodes, lower: self.lattice_lower.clone(), upper: self.lattice_upper.clone() }
    }

    pub fn nonid(&self) -> NonidConfig {
        NonidConfig {
            n: self.n,
            n_marginal: self.n_marginal(),
            n_coeffs: self.n_coeffs,
            n_functionals: self.n_functionals,
            h_p: self.h_p,
            h_y: self.h_y,
            seed: self.seed,
            flow: self.flow(),
            thresholds: self.thresholds(self.n_marginal()),
        }
    }

    /// Checks shared by every command that touches a family.
    pub fn validate_common(&self) -> Result<()> {
        self.flow().validate()?;
        positive("h_p", self.h_p)?;
        positive("h_y", self.h_y)?;
        positive("ks", self.ks)?;
        positive("energy_ratio", self.energy_ratio)?;
        for (name, v) in [("n", self.n), ("n_marginal", self.n_marginal()), ("n_coeffs", self.n_coeffs), ("n_functionals", self.n_functionals)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
