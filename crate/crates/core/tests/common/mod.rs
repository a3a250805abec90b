#![allow(dead_code)]

pub mod checks;
pub mod invariants;
pub mod oracle;

use hdlm::data::{Dataset, ModifierKind, ModifierSchema, ModifierSpec};
use hdlm::rng::rng_from_seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Schema with one modifier of each kind.
pub fn mixed_schema() -> ModifierSchema {
    ModifierSchema::new(vec![
        ModifierSpec::continuous("age"),
        ModifierSpec::binary("smoker"),
        ModifierSpec::categorical("race", ModifierKind::Nominal, &["a", "b", "c"]),
        ModifierSpec::categorical("educ", ModifierKind::Ordinal, &["lo", "mid", "hi"]),
    ])
    .unwrap()
}

/// Random codes for `schema`; continuous values are rounded to two decimals so
/// that thresholds repeat.
pub fn random_modifiers<G: Rng>(schema: &ModifierSchema, n: usize, rng: &mut G) -> Vec<f64> {
    let mut m = Vec::with_capacity(n * schema.len());
    for _ in 0..n {
        for spec in &schema.modifiers {
            m.push(match spec.levels() {
                None => (rng.random::<f64>() * 100.0).round() / 100.0,
                Some(k) => rng.random_range(0..k) as f64,
            });
        }
    }
    m
}

/// Pure-noise dataset with intercept plus one covariate.
pub fn noise_dataset(n: usize, lags: usize, schema: ModifierSchema, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let x: Vec<f64> = (0..n * lags).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut z = Vec::with_capacity(2 * n);
    for _ in 0..n {
        z.push(1.0);
        z.push(StandardNormal.sample(&mut rng));
    }
    let m = random_modifiers(&schema, n, &mut rng);
    let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Dataset::new(y, x, lags, z, 2, m, schema).unwrap()
}

/// Dataset whose lag effect over weeks 2..=3 is 1 for `age >= 0.5` and 0
/// otherwise, plus unit noise.
pub fn effect_dataset(n: usize, lags: usize, seed: u64) -> Dataset {
    let mut ds = noise_dataset(n, lags, mixed_schema(), seed);
    for i in 0..n {
        if ds.m_row(i)[0] >= 0.5 {
            let s: f64 = ds.x_row(i)[1..3.min(lags)].iter().sum();
            ds.y[i] += 1.5 * s;
        }
    }
    ds
}

/// Kolmogorov–Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of the one-sample KS statistic at level 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Pointwise posterior mean of `θ(m)` with a batch-means Monte Carlo
/// standard error (20 batches).
pub fn curve_mean_se(post: &hdlm::samplers::PosteriorDraws, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let curves = hdlm::posterior::theta_draws(post, m).unwrap();
    let d = curves.len();
    let lags = curves[0].len();
    let batches = 20.min(d);
    let size = d / batches;
    let mut mean = vec![0.0; lags];
    let mut se = vec![0.0; lags];
    for t in 0..lags {
        let bm: Vec<f64> = (0..batches)
            .map(|b| curves[b * size..(b + 1) * size].iter().map(|c| c[t]).sum::<f64>() / size as f64)
            .collect();
        let m = bm.iter().sum::<f64>() / batches as f64;
        let var = bm.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        mean[t] = m;
        se[t] = (var / batches as f64).sqrt();
    }
    (mean, se)
}

/// Whether two curves agree within `z` combined standard errors at every lag.
pub fn within_se(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>), z: f64) -> bool {
    a.0.iter()
        .zip(&b.0)
        .zip(a.1.iter().zip(&b.1))
        .all(|((x, y), (s, t))| (x - y).abs() <= z * (s * s + t * t).sqrt() + 1e-12)
}
