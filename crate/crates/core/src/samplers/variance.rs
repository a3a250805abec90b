//! Variance-scale updates and the GP range parameter.
//!
//! A half-Cauchy scale `τ ~ C⁺(0, 1)` is written as `τ² | ω ~ IG(1/2, 1/ω)`,
//! `ω ~ IG(1/2, 1)`; both full conditionals are then inverse-gamma.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::likelihood::{sample_inv_gamma, PriorCov};

/// Scales and their auxiliaries for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceState {
    pub tau2: Vec<f64>,
    pub tau_aux: Vec<f64>,
    pub nu2: f64,
    pub nu_aux: f64,
    pub sigma2: f64,
    pub sigma_aux: f64,
}

impl VarianceState {
    pub fn new(trees: usize, sigma2: f64) -> Self {
        Self {
            tau2: vec![1.0; trees],
            tau_aux: vec![1.0; trees],
            nu2: 1.0,
            nu_aux: 1.0,
            sigma2,
            sigma_aux: 1.0,
        }
    }
}

fn aux_draw<G: Rng + ?Sized>(scale2: f64, rng: &mut G) -> f64 {
    sample_inv_gamma(1.0, 1.0 + 1.0 / scale2, rng)
}

/// `τ_a² | · ~ IG(1/2 + k/2, 1/ω + quad/(2ν²σ²))`, then `ω | τ_a²`.
///
/// `k` is the tree's effect count and `quad = Σ δ'K⁻¹δ`.
pub fn update_tau<G: Rng + ?Sized>(k: usize, quad: f64, nu2: f64, sigma2: f64, aux: f64, rng: &mut G) -> (f64, f64) {
    let tau2 = sample_inv_gamma(0.5 + 0.5 * k as f64, 1.0 / aux + quad / (2.0 * nu2 * sigma2), rng);
    (tau2, aux_draw(tau2, rng))
}

/// Global scale over all trees.
pub fn update_nu<G: Rng + ?Sized>(
    ks: &[usize],
    quads: &[f64],
    tau2: &[f64],
    sigma2: f64,
    aux: f64,
    rng: &mut G,
) -> (f64, f64) {
    let k: usize = ks.iter().sum();
    let s: f64 = quads.iter().zip(tau2).map(|(q, t)| q / t).sum();
    let nu2 = sample_inv_gamma(0.5 + 0.5 * k as f64, 1.0 / aux + s / (2.0 * sigma2), rng);
    (nu2, aux_draw(nu2, rng))
}

/// `σ² | · ~ IG(1/2 + n/2 + K/2, 1/ξ + rss/2 + scaled/2)` where `scaled` is
/// `Σ_a δ_a'K⁻¹δ_a / (τ_a²ν²)`.
pub fn update_sigma<G: Rng + ?Sized>(
    n: usize,
    rss: f64,
    k_total: usize,
    scaled: f64,
    aux: f64,
    rng: &mut G,
) -> (f64, f64) {
    let sigma2 = sample_inv_gamma(
        0.5 + 0.5 * (n + k_total) as f64,
        1.0 / aux + 0.5 * rss + 0.5 * scaled,
        rng,
    );
    (sigma2, aux_draw(sigma2, rng))
}

/// Updates every `τ_a`, then `ν`, then `σ`.
pub fn update_variances<G: Rng + ?Sized>(
    state: &mut VarianceState,
    ks: &[usize],
    quads: &[f64],
    n: usize,
    rss: f64,
    rng: &mut G,
) {
    for a in 0..state.tau2.len() {
        let (t, w) = update_tau(ks[a], quads[a], state.nu2, state.sigma2, state.tau_aux[a], rng);
        state.tau2[a] = t;
        state.tau_aux[a] = w;
    }
    let (nu2, w) = update_nu(ks, quads, &state.tau2, state.sigma2, state.nu_aux, rng);
    state.nu2 = nu2;
    state.nu_aux = w;
    let scaled: f64 = quads.iter().zip(&state.tau2).map(|(q, t)| q / (t * nu2)).sum();
    let (s, w) = update_sigma(n, rss, ks.iter().sum(), scaled, state.sigma_aux, rng);
    state.sigma2 = s;
    state.sigma_aux = w;
}

/// Admissible range of `φ`: `exp(−φ) ∈ (0.05, 0.95)`.
pub fn phi_bounds() -> (f64, f64) {
    (-(0.95f64.ln()), -(0.05f64.ln()))
}

/// `Σ log N(δ | 0, v·Σ(φ))` over `(δ, v)` pairs, up to a constant.
pub fn phi_log_likelihood(phi: f64, leaves: &[(Vec<f64>, f64)]) -> f64 {
    let cov = PriorCov::Exponential { phi };
    leaves
        .iter()
        .map(|(d, v)| -0.5 * cov.log_det(d.len()) - cov.quad(d) / (2.0 * v))
        .sum()
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    // fold into [lo, lo + 2·width) then mirror the upper half
    x = (x - lo).rem_euclid(2.0 * width);
    if x > width {
        x = 2.0 * width - x;
    }
    lo + x
}

/// Random walk on `log φ` reflected into the admissible range; the target is
/// the `Gamma(1/2, rate 1/2)` prior times `loglik`.
pub fn update_phi<G: Rng + ?Sized>(
    phi: f64,
    step: f64,
    loglik: impl Fn(f64) -> f64,
    rng: &mut G,
) -> (f64, bool) {
    let (lo, hi) = phi_bounds();
    let z: f64 = StandardNormal.sample(rng);
    let x = reflect(phi.ln() + step * z, lo.ln(), hi.ln());
    let prop = x.exp().clamp(lo, hi);
    // density on the log scale: prior · likelihood · φ
    let target = |p: f64| -0.5 * p.ln() - 0.5 * p + p.ln() + loglik(p);
    let la = target(prop) - target(phi);
    if la >= 0.0 || rng.random::<f64>().ln() < la {
        (prop, true)
    } else {
        (phi, false)
    }
}
