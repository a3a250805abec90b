//! Brute-force evaluation of
//! `log ∫∫ N(R | Uδ, σ²I) N(δ | 0, sσ²K) IG(σ² | a, b) dδ dσ²`
//! by tensor Gauss–Hermite over δ and the trapezoid rule over `log σ²`.

use hdlm::data::{Dataset, ModifierSchema, ModifierSpec};
use hdlm::likelihood::{residualize, CellStats, PriorCov, SigmaTreatment, Workspace};
use hdlm::rng::rng_from_seed;
use hdlm::trees::Segment;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Nodes and weights of the `m`-point rule for `∫ f(z) φ(z) dz`.
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(m, m);
    for i in 1..m {
        let b = (i as f64).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|c| (eig.eigenvalues[c], eig.eigenvectors[(0, c)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// n=30, T=4, q=2 fixture with a heterogeneous lag effect.
pub struct Fixture {
    pub ds: Dataset,
    pub ws: Workspace,
    /// `I − Z(Z'Z)⁻¹Z'`.
    pub resid_maker: DMatrix<f64>,
    pub r: DVector<f64>,
}

pub fn fixture(seed: u64) -> Fixture {
    let (n, lags) = (30, 4);
    let mut rng = rng_from_seed(seed);
    let schema = ModifierSchema::new(vec![ModifierSpec::continuous("age"), ModifierSpec::binary("smoker")]).unwrap();
    let x: Vec<f64> = (0..n * lags).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut z = Vec::new();
    let mut m = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let zc: f64 = StandardNormal.sample(&mut rng);
        z.extend([1.0, zc]);
        let age = (rng.random::<f64>() * 40.0).round() + 20.0;
        let smoker = f64::from(rng.random::<bool>());
        m.extend([age, smoker]);
        let eff = if age > 35.0 { 0.8 * (x[i * lags + 1] + x[i * lags + 2]) } else { 0.0 };
        let e: f64 = StandardNormal.sample(&mut rng);
        y.push(0.5 + 0.3 * zc + eff + e);
    }
    let ds = Dataset::new(y, x, lags, z, 2, m, schema).unwrap();
    let ws = residualize(&ds).unwrap();
    let zm = DMatrix::from_row_slice(n, 2, &ds.z);
    let h = &zm * (zm.transpose() * &zm).try_inverse().unwrap() * zm.transpose();
    let resid_maker = DMatrix::identity(n, n) - h;
    let r = &resid_maker * DVector::from_vec(ds.y.clone());
    Fixture { ds, ws, resid_maker, r }
}

/// One candidate tree state: leaf rows with their design segments.
#[derive(Debug, Clone)]
pub struct State {
    pub leaves: Vec<(Vec<u32>, Vec<Segment>)>,
    pub cov: PriorCov,
}

impl State {
    pub fn k(&self) -> usize {
        self.leaves.iter().map(|l| l.1.len()).sum()
    }

    pub fn cells(&self, fx: &Fixture) -> Vec<CellStats> {
        let y: Vec<f64> = fx.r.iter().copied().collect();
        self.leaves.iter().map(|(rows, segs)| fx.ws.cell_stats(rows, segs, &y)).collect()
    }
}

fn lag_segments<G: Rng>(lags: usize, gp: bool, rng: &mut G) -> Vec<Segment> {
    if gp {
        return (1..=lags).map(|t| Segment { start: t, end: t }).collect();
    }
    if rng.random::<bool>() {
        vec![Segment { start: 1, end: lags }]
    } else {
        let t1 = rng.random_range(2..=lags);
        vec![Segment { start: 1, end: t1 - 1 }, Segment { start: t1, end: lags }]
    }
}

/// A random state with at most two modifier leaves of at least 5 rows.
pub fn random_state<G: Rng>(fx: &Fixture, gp: Option<f64>, rng: &mut G) -> State {
    let n = fx.ds.n;
    let lags = fx.ds.lags;
    let all: Vec<u32> = (0..n as u32).collect();
    let mut groups = vec![all.clone()];
    if rng.random::<bool>() {
        let j = rng.random_range(0..2);
        let split: Vec<bool> = if j == 0 {
            let mut ages: Vec<f64> = (0..n).map(|i| fx.ds.m_row(i)[0]).collect();
            ages.sort_by(f64::total_cmp);
            let cut = ages[rng.random_range(5..n - 5)];
            (0..n).map(|i| fx.ds.m_row(i)[0] < cut).collect()
        } else {
            (0..n).map(|i| fx.ds.m_row(i)[1] == 0.0).collect()
        };
        let left: Vec<u32> = all.iter().copied().filter(|&i| split[i as usize]).collect();
        let right: Vec<u32> = all.iter().copied().filter(|&i| !split[i as usize]).collect();
        if left.len() >= 5 && right.len() >= 5 {
            groups = vec![left, right];
        }
    }
    let shared = lag_segments(lags, gp.is_some(), rng);
    let same = rng.random::<bool>();
    let leaves = groups
        .into_iter()
        .map(|rows| {
            let segs = if same { shared.clone() } else { lag_segments(lags, gp.is_some(), rng) };
            (rows, segs)
        })
        .collect();
    let cov = match gp {
        Some(phi) => PriorCov::Exponential { phi },
        None => PriorCov::Identity,
    };
    State { leaves, cov }
}

/// Projected design `MU`, built from raw exposures.
pub fn design(fx: &Fixture, s: &State) -> DMatrix<f64> {
    let n = fx.ds.n;
    let mut u = DMatrix::<f64>::zeros(n, s.k());
    let mut col = 0;
    for (rows, segs) in &s.leaves {
        for seg in segs {
            for &i in rows {
                let x = fx.ds.x_row(i as usize);
                u[(i as usize, col)] = (seg.start..=seg.end).map(|t| x[t - 1]).sum();
            }
            col += 1;
        }
    }
    &fx.resid_maker * u
}

pub fn prior_corr(s: &State) -> DMatrix<f64> {
    let k = s.k();
    let mut kmat = DMatrix::<f64>::zeros(k, k);
    let mut off = 0;
    for (_, segs) in &s.leaves {
        let d = segs.len();
        for a in 0..d {
            for b in 0..d {
                kmat[(off + a, off + b)] = match s.cov {
                    PriorCov::Identity => f64::from(u8::from(a == b)),
                    PriorCov::Exponential { phi } => (-phi * (a as f64 - b as f64).abs()).exp(),
                };
            }
        }
        off += d;
    }
    kmat
}

fn order_for(k: usize) -> usize {
    match k {
        0 => 1,
        1 | 2 => 24,
        3 => 14,
        4 => 9,
        5 => 7,
        _ => 5,
    }
}

/// Full log of the defining integral (all constants included).
pub fn log_marginal(fx: &Fixture, s: &State, scale: f64, sigma: SigmaTreatment) -> f64 {
    let n = fx.ds.n as f64;
    let u = design(fx, s);
    let k = u.ncols();
    let kmat = prior_corr(s);
    let kinv = kmat.clone().try_inverse().unwrap();
    let log_det_k = kmat.determinant().ln();
    let r = &fx.r;

    // proposal: centred at the conditional mode, covariance 1.05·A⁻¹ (times σ²)
    let a = u.transpose() * &u + &kinv / scale;
    let ainv = a.try_inverse().unwrap();
    let c = &ainv * (u.transpose() * r);
    let prop = &ainv * 1.05;
    let l = prop.cholesky().unwrap().l();
    let log_det_l: f64 = (0..k).map(|i| l[(i, i)].ln()).sum();

    let e0 = r - &u * &c;
    let rss0 = e0.norm_squared();
    let kc = &kinv * &c;
    let quad0 = c.dot(&kc);

    // per-node pieces of RSS(σ) and δ'K⁻¹δ as polynomials in σ
    let m = order_for(k);
    let (z1, w1) = gauss_hermite(m);
    let total = m.pow(k as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut idx = vec![0usize; k];
    for _ in 0..total {
        let z = DVector::from_iterator(k, idx.iter().map(|&i| z1[i]));
        let lw: f64 = idx.iter().map(|&i| w1[i].ln()).sum();
        let v = &l * &z;
        let uv = &u * &v;
        let log_phi = -0.5 * k as f64 * LN_2PI - 0.5 * z.norm_squared();
        nodes.push((lw - log_phi, -2.0 * e0.dot(&uv), uv.norm_squared(), 2.0 * kc.dot(&v), v.dot(&(&kinv * &v))));
        for d in 0..k {
            idx[d] += 1;
            if idx[d] < m {
                break;
            }
            idx[d] = 0;
        }
    }

    let inner = |sigma2: f64| -> f64 {
        let sd = sigma2.sqrt();
        let terms: Vec<f64> = nodes
            .iter()
            .map(|&(base, lin, sq, plin, psq)| {
                let rss = rss0 + sd * lin + sigma2 * sq;
                let pq = quad0 + sd * plin + sigma2 * psq;
                let loglik = -0.5 * n * (LN_2PI + sigma2.ln()) - rss / (2.0 * sigma2);
                let logprior = -0.5 * k as f64 * (LN_2PI + (scale * sigma2).ln()) - 0.5 * log_det_k - pq / (2.0 * scale * sigma2);
                base + loglik + logprior + k as f64 * sd.ln() + log_det_l
            })
            .collect();
        log_sum_exp(&terms)
    };

    match sigma {
        SigmaTreatment::Fixed { sigma2 } => inner(sigma2),
        SigmaTreatment::Integrated { shape, rate } => {
            let shape_post = shape + 0.5 * n;
            let q = rss0 + quad0 / scale;
            let mode = (rate + 0.5 * q) / (shape_post + 1.0);
            let (lo, hi, steps) = (mode.ln() - 8.0, mode.ln() + 8.0, 800);
            let h = (hi - lo) / steps as f64;
            let terms: Vec<f64> = (0..=steps)
                .map(|i| {
                    let t = lo + i as f64 * h;
                    let s2 = t.exp();
                    let log_ig = shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * t - rate / s2;
                    let w: f64 = if i == 0 || i == steps { 0.5 } else { 1.0 };
                    w.ln() + h.ln() + inner(s2) + log_ig + t
                })
                .collect();
            log_sum_exp(&terms)
        }
    }
}
