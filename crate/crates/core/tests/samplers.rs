mod common;

use hdlm::data::Dataset;
use hdlm::likelihood::{integrated_log_marginal, residualize, CellStats, PriorCov, SigmaTreatment};
use hdlm::posterior::quantile_sorted;
use hdlm::rng::rng_from_seed;
use hdlm::samplers::{
    audit_chain, draw_fit, fit, metropolis_accept, phi_bounds, phi_log_likelihood, recover_gamma, update_phi,
    write_draws, FitConfig, ModelKind, PosteriorDraws,
};
use hdlm::trees::modifier::{analyze, propose_modifier_move, EffectLeaves};
use hdlm::trees::{LeafLag, ModifierData, ModifierTree, MoveKind, SplitPrior, SplitRule, Tree, TreePriorParams};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use common::{checks, curve_mean_se, effect_dataset, within_se};

fn quick(model: ModelKind, seed: u64) -> FitConfig {
    FitConfig {
        model,
        trees: 4,
        iterations: 300,
        burn_in: 100,
        thin: 2,
        seed,
        n_min: 15,
        ..FitConfig::default()
    }
}

fn checksum(post: &PosteriorDraws) -> String {
    let mut buf = Vec::new();
    write_draws(post, "checksum", &mut buf).unwrap();
    Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn identical_inputs_give_identical_draws() {
    let ds = effect_dataset(150, 6, 1);
    for model in ModelKind::ALL {
        let mut cfg = quick(model, 9);
        cfg.chains = 2;
        let a = fit(&ds, None, &cfg).unwrap();
        let b = fit(&ds, None, &cfg).unwrap();
        assert_eq!(checksum(&a), checksum(&b), "{model}");
        assert_eq!(a.draws.len(), 2 * cfg.draws_per_chain());
        cfg.seed = 10;
        assert_ne!(checksum(&a), checksum(&fit(&ds, None, &cfg).unwrap()), "{model}");
    }
}

#[test]
fn residual_is_conserved_and_variances_stay_valid() {
    let ds = effect_dataset(200, 6, 2);
    let (lo, hi) = phi_bounds();
    for model in ModelKind::ALL {
        let audit = audit_chain(&ds, None, &quick(model, 3)).unwrap();
        assert_eq!(audit.sweeps, 300);
        assert!(audit.max_residual_drift < 1e-8, "{model}: drift {:e}", audit.max_residual_drift);
        assert!(audit.min_variance > 0.0, "{model}");
        match audit.phi_range {
            Some((a, b)) => {
                assert!(model.is_gp());
                assert!(a >= lo && b <= hi, "{model}: phi in [{a}, {b}]");
            }
            None => assert!(!model.is_gp()),
        }
    }
}

#[test]
fn modifier_acceptance_is_strictly_between_zero_and_one() {
    let ds = effect_dataset(300, 6, 4);
    for model in [ModelKind::HdlmNested, ModelKind::HdlmShared, ModelKind::HdlmGp] {
        let audit = audit_chain(&ds, None, &quick(model, 5)).unwrap();
        let rate = audit.diagnostics.modifier_acceptance();
        assert!(rate > 0.0 && rate < 1.0, "{model}: {rate}");
    }
}

fn degeneration(a: ModelKind, b: ModelKind) {
    let ds = effect_dataset(200, 6, 6).with_modifiers(&[]).unwrap();
    let cfg = |model| FitConfig { iterations: 1200, burn_in: 200, thin: 1, ..quick(model, 12) };
    let pa = fit(&ds, None, &cfg(a)).unwrap();
    let pb = fit(&ds, None, &cfg(b)).unwrap();
    let ca = curve_mean_se(&pa, &[]);
    let cb = curve_mean_se(&pb, &[]);
    assert!(within_se(&ca, &cb, 2.0), "{a} vs {b}: {:?} vs {:?}", ca.0, cb.0);
}

#[test]
fn shared_without_modifiers_matches_tdlm() {
    degeneration(ModelKind::HdlmShared, ModelKind::Tdlm);
}

#[test]
fn gp_without_modifiers_matches_gp_dlm() {
    degeneration(ModelKind::HdlmGp, ModelKind::GpDlm);
}

#[test]
fn effects_refresh_when_every_structure_move_is_impossible() {
    let ds = effect_dataset(150, 6, 7);
    let cfg = FitConfig {
        dlm_split: SplitPrior { alpha: 0.0, beta: 2.0 },
        ..quick(ModelKind::Tdlm, 2)
    };
    let post = fit(&ds, None, &cfg).unwrap();
    assert_eq!(post.diagnostics[0].dlm_accepted, 0);
    let first = post.draws[0].theta(&[], 6);
    assert!(post.draws.iter().skip(1).all(|d| d.theta(&[], 6) != first));
}

#[test]
fn variance_conditionals_pass_ks() {
    for r in checks::variance_ks(10_000, 21) {
        assert!(r.pass(), "{}: D = {:.4} > {:.4}", r.name, r.stat, r.crit);
    }
}

#[test]
fn prior_only_phi_matches_truncated_gamma() {
    let r = checks::phi_prior_ks(10_000, 22);
    assert!(r.pass(), "D = {:.4} > {:.4}", r.stat, r.crit);
}

#[test]
fn phi_is_recovered_from_simulated_effects() {
    let lags = 37;
    let phi_true = 0.5;
    let cov = PriorCov::Exponential { phi: phi_true }.dense(lags);
    let chol = DMatrix::from_row_slice(lags, lags, &cov).cholesky().unwrap().l();
    let mut covered = 0;
    for rep in 0..10 {
        let mut rng = rng_from_seed(100 + rep);
        let leaves: Vec<(Vec<f64>, f64)> = (0..200)
            .map(|_| {
                let e = nalgebra::DVector::from_fn(lags, |_, _| StandardNormal.sample(&mut rng));
                ((&chol * e).iter().copied().collect(), 1.0)
            })
            .collect();
        let mut phi = 1.0;
        let mut trace = Vec::new();
        for it in 0..3000 {
            phi = update_phi(phi, 0.15, |p| phi_log_likelihood(p, &leaves), &mut rng).0;
            if it >= 500 {
                trace.push(phi);
            }
        }
        trace.sort_by(f64::total_cmp);
        let (lo, hi) = (quantile_sorted(&trace, 0.05), quantile_sorted(&trace, 0.95));
        covered += usize::from(lo <= phi_true && phi_true <= hi);
    }
    assert!(covered >= 8, "covered {covered}/10");
}

/// Zeroes every leaf effect of every draw.
fn zero_effects(post: &mut PosteriorDraws) {
    for d in &mut post.draws {
        for t in &mut d.trees {
            for leaf in t.modifier.leaves_mut() {
                match leaf {
                    LeafLag::Nested(tree) => tree.leaves_mut().into_iter().for_each(|e| *e = 0.0),
                    LeafLag::Effects(v) => v.iter_mut().for_each(|e| *e = 0.0),
                }
            }
        }
    }
}

fn intercept_only(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    out.z = vec![1.0; ds.n];
    out.p = 1;
    out.fixed_names = vec!["z0".into()];
    out
}

#[test]
fn recovered_intercept_matches_outcome_mean_without_tree_fit() {
    let ds = intercept_only(&effect_dataset(120, 6, 8));
    let mut post = fit(&ds, None, &quick(ModelKind::Tdlm, 4)).unwrap();
    zero_effects(&mut post);
    recover_gamma(&mut post, &ds).unwrap();
    let ybar = ds.y.iter().sum::<f64>() / ds.n as f64;
    let d = post.draws.len() as f64;
    let g = post.draws.iter().map(|x| x.gamma[0]).sum::<f64>() / d;
    let s2 = post.draws.iter().map(|x| x.sigma2).sum::<f64>() / d;
    assert!((g - ybar).abs() < 4.0 * (s2 / ds.n as f64 / d).sqrt(), "{g} vs {ybar}");
}

#[test]
fn recovered_gamma_has_the_analytic_covariance() {
    let ds = effect_dataset(80, 6, 9);
    let mut post = fit(&ds, None, &quick(ModelKind::Tdlm, 5)).unwrap();
    let mut d0 = post.draws[0].clone();
    d0.sigma2 = 2.0;
    post.draws = vec![d0; 20_000];
    recover_gamma(&mut post, &ds).unwrap();
    let f = draw_fit(&post.draws[0], &ds);
    let zm = DMatrix::from_row_slice(ds.n, ds.p, &ds.z);
    let ztz_inv = (zm.transpose() * &zm).try_inverse().unwrap();
    let resid = nalgebra::DVector::from_iterator(ds.n, ds.y.iter().zip(&f).map(|(y, f)| y - f));
    let mean = &ztz_inv * (zm.transpose() * resid);
    let n = post.draws.len() as f64;
    for a in 0..ds.p {
        let m = post.draws.iter().map(|d| d.gamma[a]).sum::<f64>() / n;
        let var = 2.0 * ztz_inv[(a, a)];
        assert!((m - mean[a]).abs() < 4.0 * (var / n).sqrt());
        for b in 0..ds.p {
            let mb = post.draws.iter().map(|d| d.gamma[b]).sum::<f64>() / n;
            let c = post.draws.iter().map(|d| (d.gamma[a] - m) * (d.gamma[b] - mb)).sum::<f64>() / (n - 1.0);
            let target = 2.0 * ztz_inv[(a, b)];
            let se = ((var * 2.0 * ztz_inv[(b, b)] + target * target) / n).sqrt();
            assert!((c - target).abs() < 4.0 * se, "cov[{a}][{b}] {c} vs {target}");
        }
    }
}

#[test]
fn recovered_gamma_intervals_are_calibrated() {
    let mut covered = 0;
    let mut total = 0;
    for rep in 0..100u64 {
        let mut ds = common::noise_dataset(100, 4, common::mixed_schema(), 500 + rep);
        let gamma = common::normals(2, 900 + rep);
        for i in 0..ds.n {
            ds.y[i] += ds.z_row(i).iter().zip(&gamma).map(|(a, b)| a * b).sum::<f64>();
        }
        let cfg = FitConfig { trees: 2, iterations: 400, burn_in: 200, thin: 1, ..quick(ModelKind::Tdlm, rep) };
        let post = fit(&ds, None, &cfg).unwrap();
        for a in 0..2 {
            let mut g: Vec<f64> = post.draws.iter().map(|d| d.gamma[a]).collect();
            g.sort_by(f64::total_cmp);
            total += 1;
            covered += usize::from(quantile_sorted(&g, 0.025) <= gamma[a] && gamma[a] <= quantile_sorted(&g, 0.975));
        }
    }
    assert!(covered as f64 >= 0.9 * total as f64, "covered {covered}/{total}");
}

#[test]
fn acceptance_frequency_matches_metropolis_probability() {
    let fx = common::oracle::fixture(31);
    let data = ModifierData::from_dataset(&fx.ds);
    let params = TreePriorParams { n_min: 5, ..TreePriorParams::new(2) };
    let leaf = || Box::new(Tree::Leaf(LeafLag::Effects(vec![0.0])));
    let tree: ModifierTree = Tree::Split { rule: SplitRule::Binary { modifier: 1 }, left: leaf(), right: leaf() };
    let an = analyze(&tree, &data, &params);
    let mut rng = rng_from_seed(1);
    let (prop, new_an) =
        propose_modifier_move(&tree, &an, &data, &params, MoveKind::Prune, &EffectLeaves { len: 1 }, &mut rng).unwrap();
    let ws = residualize(&fx.ds).unwrap();
    let rr: f64 = ws.y_proj.iter().map(|v| v * v).sum();
    let segs = [hdlm::trees::Segment { start: 1, end: 4 }];
    let cells = |a: &hdlm::trees::TreeAnalysis, k: usize| -> Vec<CellStats> {
        (0..k).map(|j| ws.cell_stats(a.leaf_rows(j), &segs, &ws.y_proj)).collect()
    };
    let (old_cells, new_cells) = (cells(&an, 2), cells(&new_an, 1));
    let sigma = SigmaTreatment::Integrated { shape: 2.0, rate: 2.0 };
    let log_alpha = |scale: f64| {
        let lm = |c: &[CellStats]| {
            let r: Vec<&CellStats> = c.iter().collect();
            integrated_log_marginal(&r, rr, scale, PriorCov::Identity, sigma, ws.n).unwrap().log_marginal
        };
        lm(&new_cells) - lm(&old_cells) + prop.log_prior_ratio + prop.log_proposal_ratio
    };
    // pick a prior scale where the move is accepted with moderate probability
    let scale = (0..200)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 199.0))
        .find(|&s| (0.2..0.8).contains(&log_alpha(s).exp()))
        .expect("moderate acceptance somewhere on the grid");
    let p = log_alpha(scale).exp().min(1.0);
    let trials = 10_000;
    let mut rng = rng_from_seed(2);
    let hits = (0..trials).filter(|_| metropolis_accept(log_alpha(scale), &mut rng)).count();
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    assert!((hits as f64 / trials as f64 - p).abs() <= 3.0 * se, "{hits}/{trials} vs {p}");
}

/// Stepping-out slice sampler (unit start width) for a log density on the real line.
fn slice_chain(logp: impl Fn(f64) -> f64, x0: f64, draws: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let mut x = x0;
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let level = logp(x) + rng.random::<f64>().ln();
        let mut lo = x - rng.random::<f64>();
        let mut hi = lo + 1.0;
        while logp(lo) > level {
            lo -= 1.0;
        }
        while logp(hi) > level {
            hi += 1.0;
        }
        loop {
            let y = lo + (hi - lo) * rng.random::<f64>();
            if logp(y) > level {
                x = y;
                break;
            }
            if y < x {
                lo = y;
            } else {
                hi = y;
            }
        }
        out.push(x);
    }
    out
}

/// Mean with a batch-means standard error (50 batches).
fn batch_mean(v: &[f64]) -> (f64, f64) {
    let b = 50;
    let size = v.len() / b;
    let means: Vec<f64> = (0..b).map(|i| v[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (m, (var / b as f64).sqrt())
}

#[test]
fn tau_with_near_zero_effects_matches_slice_sampler() {
    // exactly zero effects make the tau conditional improper; use a tiny quadratic form
    let (k, quad, nu2, sigma2) = (3, 1e-2, 1.0, 1.0);
    let draws = 10_000;
    let mut rng = rng_from_seed(61);
    let mut aux = 1.0;
    let mut gibbs = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (tau2, next) = hdlm::samplers::update_tau(k, quad, nu2, sigma2, aux, &mut rng);
        aux = next;
        gibbs.push(tau2.ln());
    }
    // density of u = log tau2 under the half-Cauchy prior on tau times the effect likelihood
    let logp = |u: f64| {
        let t = u.exp();
        0.5 * u - (1.0 + t).ln() - 0.5 * k as f64 * u - quad / (2.0 * nu2 * sigma2 * t)
    };
    let slice = slice_chain(logp, 0.0, draws, 62);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    for (name, a, b) in [("E[log tau2]", gibbs.clone(), slice.clone()), ("E[log^2 tau2]", sq(&gibbs), sq(&slice))] {
        let (ma, sa) = batch_mean(&a);
        let (mb, sb) = batch_mean(&b);
        assert!((ma - mb).abs() < 4.0 * (sa * sa + sb * sb).sqrt(), "{name}: gibbs {ma} vs slice {mb}");
    }
}

#[test]
fn larger_effects_give_stochastically_larger_tau() {
    let mut rng = rng_from_seed(63);
    let (k, quad) = (5, 2.0);
    let m = 2000;
    let small: Vec<f64> = (0..m).map(|_| hdlm::samplers::update_tau(k, quad, 1.0, 1.0, 1.0, &mut rng).0).collect();
    // every effect scaled by 10 multiplies the quadratic form by 100
    let large: Vec<f64> = (0..m).map(|_| hdlm::samplers::update_tau(k, 100.0 * quad, 1.0, 1.0, 1.0, &mut rng).0).collect();
    // one-sided Mann-Whitney U with the normal approximation
    let mut all: Vec<(f64, bool)> = small.iter().map(|&v| (v, false)).chain(large.iter().map(|&v| (v, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rank_sum: f64 = all.iter().enumerate().filter(|(_, (_, l))| *l).map(|(i, _)| (i + 1) as f64).sum();
    let mf = m as f64;
    let u = rank_sum - mf * (mf + 1.0) / 2.0;
    let z = (u - mf * mf / 2.0) / (mf * mf * (2.0 * mf + 1.0) / 12.0).sqrt();
    assert!(z > 2.326, "z = {z}");
}
