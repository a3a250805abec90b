//! Distributional checks shared by the module suites and the acceptance run.

use hdlm::likelihood::{gibbs_draw_effects, integrated_log_marginal, CellStats, PriorCov, SigmaTreatment};
use hdlm::rng::rng_from_seed;
use hdlm::samplers::{phi_bounds, update_phi, update_sigma, update_tau, update_variances, VarianceState};
use hdlm::trees::Segment;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Gamma, InverseGamma, Normal};

use super::oracle::{self, Fixture, State};
use super::{ks_critical_01, ks_statistic, normals};

/// One KS comparison: statistic and its 0.01 critical value.
#[derive(Debug, Clone)]
pub struct Ks {
    pub name: String,
    pub stat: f64,
    pub crit: f64,
}

impl Ks {
    pub fn pass(&self) -> bool {
        self.stat <= self.crit
    }
}

fn ks(name: impl Into<String>, sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> Ks {
    Ks {
        name: name.into(),
        stat: ks_statistic(sample, cdf),
        crit: ks_critical_01(sample.len()),
    }
}

/// Largest `|exp(Δ_impl − Δ_oracle) − 1|` over `pairs` random state pairs,
/// treed first and then a few GP pairs.
pub fn oracle_ratio_errors(pairs: usize, seed: u64) -> Vec<f64> {
    let fx = oracle::fixture(seed);
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let rr = fx.r.norm_squared();
    let mut out = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let gp = (p % 5 == 4).then(|| rng.random_range(0.06..2.9));
        let a = oracle::random_state(&fx, gp, &mut rng);
        let b = oracle::random_state(&fx, gp, &mut rng);
        let scale = rng.random_range(0.2..3.0);
        let sigma = if p % 2 == 0 {
            SigmaTreatment::Integrated {
                shape: rng.random_range(0.5..5.0),
                rate: rng.random_range(0.5..5.0),
            }
        } else {
            SigmaTreatment::Fixed {
                sigma2: rng.random_range(0.5..3.0),
            }
        };
        let imp = |s: &State| {
            let cells = s.cells(&fx);
            let refs: Vec<&CellStats> = cells.iter().collect();
            integrated_log_marginal(&refs, rr, scale, s.cov, sigma, fx.ds.n).unwrap().log_marginal
        };
        let d_imp = imp(&a) - imp(&b);
        let d_orc = oracle::log_marginal(&fx, &a, scale, sigma) - oracle::log_marginal(&fx, &b, scale, sigma);
        out.push(((d_imp - d_orc).exp() - 1.0).abs());
    }
    out
}

/// Three single-segment leaves of the oracle fixture.
fn three_cells(fx: &Fixture) -> State {
    let n = fx.ds.n as u32;
    let leaves = (0..3)
        .map(|g| {
            let rows: Vec<u32> = (0..n).filter(|i| i % 3 == g).collect();
            (rows, vec![Segment { start: 1 + g as usize, end: 2 + g as usize }])
        })
        .collect();
    State { leaves, cov: PriorCov::Identity }
}

fn analytic_conditional(fx: &Fixture, s: &State, scale: f64, sigma2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let u = oracle::design(fx, s);
    let k = u.ncols();
    let kinv = oracle::prior_corr(s).try_inverse().unwrap();
    debug_assert_eq!(kinv.nrows(), k);
    let v = (u.transpose() * &u + kinv / scale).try_inverse().unwrap() * sigma2;
    let mean = &v * (u.transpose() * &fx.r) / sigma2;
    (mean, v)
}

/// Marginal KS of every effect component plus one random projection.
pub fn gibbs_effects_ks(draws: usize, seed: u64) -> Vec<Ks> {
    let fx = oracle::fixture(seed);
    let mut out = Vec::new();
    let gp = State {
        leaves: vec![((0..fx.ds.n as u32).collect(), (1..=4).map(|t| Segment { start: t, end: t }).collect())],
        cov: PriorCov::Exponential { phi: 0.4 },
    };
    // two GP leaves are coupled through the fixed-effect projection
    let n = fx.ds.n as u32;
    let lags: Vec<Segment> = (1..=4).map(|t| Segment { start: t, end: t }).collect();
    let gp2 = State {
        leaves: vec![
            ((0..n).filter(|i| i % 2 == 0).collect(), lags.clone()),
            ((0..n).filter(|i| i % 2 == 1).collect(), lags),
        ],
        cov: PriorCov::Exponential { phi: 0.9 },
    };
    for (label, state) in [("treed", three_cells(&fx)), ("gp", gp), ("gp two-leaf", gp2)] {
        let (scale, sigma2) = (0.7, 1.3);
        let cells = state.cells(&fx);
        let refs: Vec<&CellStats> = cells.iter().collect();
        let mut rng = rng_from_seed(seed ^ 11);
        let samples: Vec<Vec<f64>> = (0..draws)
            .map(|_| gibbs_draw_effects(&refs, scale, sigma2, state.cov, &mut rng).unwrap())
            .collect();
        let (mean, v) = analytic_conditional(&fx, &state, scale, sigma2);
        let k = mean.len();
        for j in 0..k {
            let nd = Normal::new(mean[j], v[(j, j)].sqrt()).unwrap();
            let mut col: Vec<f64> = samples.iter().map(|d| d[j]).collect();
            out.push(ks(format!("{label} δ{j}"), &mut col, |x| nd.cdf(x)));
        }
        let dir = normals(k, seed ^ 3);
        let dv = DVector::from_vec(dir.clone());
        let nd = Normal::new(dv.dot(&mean), (dv.transpose() * &v * &dv)[(0, 0)].sqrt()).unwrap();
        let mut proj: Vec<f64> = samples.iter().map(|d| d.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
        out.push(ks(format!("{label} projection"), &mut proj, |x| nd.cdf(x)));
    }
    out
}

/// `σ²` and `τ²` conditionals, alone and through `update_variances` via the
/// probability integral transform with the parameters in force at each draw.
pub fn variance_ks(draws: usize, seed: u64) -> Vec<Ks> {
    let mut rng = rng_from_seed(seed);
    let n = 200;
    let resid = normals(n, seed ^ 1);
    let rss: f64 = resid.iter().map(|e| 1.7 * e * e).sum();
    let (k_total, scaled, aux) = (12, 3.4, 0.8);

    let mut s: Vec<f64> = (0..draws).map(|_| update_sigma(n, rss, k_total, scaled, aux, &mut rng).0).collect();
    let ig = InverseGamma::new(0.5 + 0.5 * (n + k_total) as f64, 1.0 / aux + 0.5 * rss + 0.5 * scaled).unwrap();
    let mut out = vec![ks("sigma2 conditional", &mut s, |x| ig.cdf(x))];

    let (k, quad, nu2, sigma2) = (6, 2.5, 0.9, 1.4);
    let mut t: Vec<f64> = (0..draws).map(|_| update_tau(k, quad, nu2, sigma2, aux, &mut rng).0).collect();
    let ig = InverseGamma::new(0.5 + 0.5 * k as f64, 1.0 / aux + quad / (2.0 * nu2 * sigma2)).unwrap();
    out.push(ks("tau2 conditional", &mut t, |x| ig.cdf(x)));

    let init = VarianceState {
        tau2: vec![0.7, 1.9],
        tau_aux: vec![1.1, 0.6],
        nu2: 0.8,
        nu_aux: 1.3,
        sigma2: 1.2,
        sigma_aux: 0.9,
    };
    let ks_ = [4usize, 7];
    let quads = [1.3, 5.2];
    let mut pit_tau = Vec::with_capacity(draws);
    let mut pit_sigma = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut st = init.clone();
        update_variances(&mut st, &ks_, &quads, n, rss, &mut rng);
        let ig_tau = InverseGamma::new(
            0.5 + 0.5 * ks_[0] as f64,
            1.0 / init.tau_aux[0] + quads[0] / (2.0 * init.nu2 * init.sigma2),
        )
        .unwrap();
        pit_tau.push(ig_tau.cdf(st.tau2[0]));
        let scaled: f64 = quads.iter().zip(&st.tau2).map(|(q, t)| q / (t * st.nu2)).sum();
        let ig_sigma = InverseGamma::new(
            0.5 + 0.5 * (n + ks_.iter().sum::<usize>()) as f64,
            1.0 / init.sigma_aux + 0.5 * rss + 0.5 * scaled,
        )
        .unwrap();
        pit_sigma.push(ig_sigma.cdf(st.sigma2));
    }
    out.push(ks("update_variances tau", &mut pit_tau, |x| x.clamp(0.0, 1.0)));
    out.push(ks("update_variances sigma", &mut pit_sigma, |x| x.clamp(0.0, 1.0)));
    out
}

/// Prior-only `φ` chain against the truncated `Gamma(1/2, rate 1/2)`.
pub fn phi_prior_ks(draws: usize, seed: u64) -> Ks {
    let (lo, hi) = phi_bounds();
    let g = Gamma::new(0.5, 0.5).unwrap();
    let (glo, ghi) = (g.cdf(lo), g.cdf(hi));
    let mut rng = rng_from_seed(seed);
    let thin = 50;
    let mut phi = 1.0;
    for _ in 0..1000 {
        phi = update_phi(phi, 1.2, |_| 0.0, &mut rng).0;
    }
    let mut sample = Vec::with_capacity(draws);
    for _ in 0..draws {
        for _ in 0..thin {
            phi = update_phi(phi, 1.2, |_| 0.0, &mut rng).0;
        }
        sample.push(phi);
    }
    ks("phi prior", &mut sample, |x| (g.cdf(x) - glo) / (ghi - glo))
}
