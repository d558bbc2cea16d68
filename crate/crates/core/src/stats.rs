//! Sample summaries and distribution distances.

use rand::seq::index::sample;
use serde::Serialize;

use crate::seed;

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_iter(values: impl IntoIterator<Item = f64>) -> Self {
        // Welford.
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        let se = if n > 1 { (m2 / (n - 1) as f64 / n as f64).sqrt() } else { 0.0 };
        Self { mean, se, n }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(a: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let a = sorted(a);
    let n = a.len() as f64;
    a.iter().enumerate().fold(0.0, |best, (i, v)| {
        let c = cdf(*v);
        best.max((c - i as f64 / n).abs()).max(((i + 1) as f64 / n - c).abs())
    })
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` (V-statistic) between
/// two samples in `R^d`, each subsampled to at most `cap` points.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>], cap: usize, seed_value: u64) -> f64 {
    let pick = |v: &[Vec<f64>], tag: &str| -> Vec<Vec<f64>> {
        if v.len() <= cap {
            return v.to_vec();
        }
        let mut rng = seed::stream(seed_value, tag);
        sample(&mut rng, v.len(), cap).iter().map(|i| v[i].clone()).collect()
    };
    let (a, b) = (pick(a, "energy-a"), pick(b, "energy-b"));
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let mean_pair = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in x {
            for q in y {
                s += dist(p, q);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    (2.0 * mean_pair(&a, &b) - mean_pair(&a, &a) - mean_pair(&b, &b)).max(0.0)
}
