//! Partial residuals and the collapsed marginal likelihood of one tree.
//!
//! Fixed effects are removed by projecting onto the orthogonal complement of
//! `Z` (the flat limit of a `N(0, dσ²I)` prior). Because that prior scales
//! with `σ²`, the integrated likelihood keeps the full `σ^{-n}` factor.
//!
//! Residuals are stored already projected, so `Ũ'R̃ = U'R` for any design
//! `U`, and only `Ũ'Ũ = U'U − (Q'U)'(Q'U)` needs the correction term.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::data::Dataset;
use crate::error::{HdlmError, Result};
use crate::linalg::PivotedCholesky;
use crate::trees::Segment;

/// Orthonormal basis `Q` of the column space of `Z`, with the pieces of its
/// SVD needed to recover `γ`.
#[derive(Debug, Clone)]
pub struct FixedEffectsProjection {
    n: usize,
    p: usize,
    /// `n × p`, row-major.
    basis: Vec<f64>,
    /// `V S⁻¹`, `p × p` row-major: `γ̂ = V S⁻¹ Q'v`.
    coef_map: Vec<f64>,
}

impl FixedEffectsProjection {
    pub fn new(z: &[f64], n: usize, p: usize) -> Result<Self> {
        assert_eq!(z.len(), n * p);
        if n < p || p == 0 {
            return Err(HdlmError::RankDeficient { rank: n.min(p), p });
        }
        let svd = DMatrix::from_row_slice(n, p, z).svd(true, true);
        let u = svd.u.expect("requested");
        let vt = svd.v_t.expect("requested");
        let s = &svd.singular_values;
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
        let rank = s.iter().filter(|&&v| v > tol).count();
        if rank < p {
            return Err(HdlmError::RankDeficient { rank, p });
        }
        let mut basis = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                basis[i * p + j] = u[(i, j)];
            }
        }
        let mut coef_map = vec![0.0; p * p];
        for a in 0..p {
            for j in 0..p {
                coef_map[a * p + j] = vt[(j, a)] / s[j];
            }
        }
        Ok(Self { n, p, basis, coef_map })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.p..(i + 1) * self.p]
    }

    /// `Q'v`.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.p];
        for (i, &vi) in v.iter().enumerate() {
            for (cj, qj) in c.iter_mut().zip(self.basis_row(i)) {
                *cj += qj * vi;
            }
        }
        c
    }

    /// `v += sign · Q c`.
    pub fn add_span(&self, v: &mut [f64], c: &[f64], sign: f64) {
        for (i, vi) in v.iter_mut().enumerate() {
            let s: f64 = self.basis_row(i).iter().zip(c).map(|(q, c)| q * c).sum();
            *vi += sign * s;
        }
    }

    /// `v ← (I − QQ')v`.
    pub fn residualize(&self, v: &mut [f64]) {
        let c = self.coefficients(v);
        self.add_span(v, &c, -1.0);
    }

    /// Least-squares coefficients `(Z'Z)⁻¹Z'v`.
    pub fn least_squares(&self, v: &[f64]) -> Vec<f64> {
        let c = self.coefficients(v);
        self.apply_coef_map(&c)
    }

    /// `V S⁻¹ c`: maps standard normals to `N(0, (Z'Z)⁻¹)`.
    pub fn apply_coef_map(&self, c: &[f64]) -> Vec<f64> {
        (0..self.p)
            .map(|a| (0..self.p).map(|j| self.coef_map[a * self.p + j] * c[j]).sum())
            .collect()
    }

    /// `(Z'Z)⁻¹`, row-major.
    pub fn gram_inverse(&self) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; p * p];
        for a in 0..p {
            for b in 0..p {
                out[a * p + b] = (0..p).map(|j| self.coef_map[a * p + j] * self.coef_map[b * p + j]).sum();
            }
        }
        out
    }
}

/// Projected outcome plus per-row exposure prefix sums.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub n: usize,
    pub lags: usize,
    pub proj: FixedEffectsProjection,
    /// `(I − QQ')y`.
    pub y_proj: Vec<f64>,
    /// `n × (lags + 1)`: `cum[i][t] = Σ_{s ≤ t} x_is`.
    cum: Vec<f64>,
}

/// Builds the projection and the exposure workspace for a dataset.
pub fn residualize(ds: &Dataset) -> Result<Workspace> {
    let proj = FixedEffectsProjection::new(&ds.z, ds.n, ds.p)?;
    let mut y_proj = ds.y.clone();
    proj.residualize(&mut y_proj);
    let w = ds.lags + 1;
    let mut cum = vec![0.0; ds.n * w];
    for i in 0..ds.n {
        let x = ds.x_row(i);
        for t in 0..ds.lags {
            cum[i * w + t + 1] = cum[i * w + t] + x[t];
        }
    }
    Ok(Workspace {
        n: ds.n,
        lags: ds.lags,
        proj,
        y_proj,
        cum,
    })
}

impl Workspace {
    pub fn p(&self) -> usize {
        self.proj.p
    }

    /// `Σ_{t ∈ seg} x_it`.
    #[inline]
    pub fn segment_sum(&self, i: usize, seg: Segment) -> f64 {
        let base = i * (self.lags + 1);
        self.cum[base + seg.end] - self.cum[base + seg.start - 1]
    }

    #[inline]
    fn fill_row(&self, i: usize, segs: &[Segment], u: &mut [f64]) {
        let base = i * (self.lags + 1);
        for (uk, s) in u.iter_mut().zip(segs) {
            *uk = self.cum[base + s.end] - self.cum[base + s.start - 1];
        }
    }

    /// Gram, fixed-effect cross products and `U'R` of one leaf.
    pub fn cell_stats(&self, rows: &[u32], segs: &[Segment], r: &[f64]) -> CellStats {
        let k = segs.len();
        let p = self.p();
        let mut gram = vec![0.0; k * k];
        let mut zu = vec![0.0; p * k];
        let mut ur = vec![0.0; k];
        let mut u = vec![0.0; k];
        for &i in rows {
            let i = i as usize;
            self.fill_row(i, segs, &mut u);
            for a in 0..k {
                let ua = u[a];
                let row = &mut gram[a * k..a * k + k];
                for b in a..k {
                    row[b] += ua * u[b];
                }
            }
            for (j, &qj) in self.proj.basis_row(i).iter().enumerate() {
                let dst = &mut zu[j * k..j * k + k];
                for (d, &ub) in dst.iter_mut().zip(&u) {
                    *d += qj * ub;
                }
            }
            let ri = r[i];
            for (d, &ub) in ur.iter_mut().zip(&u) {
                *d += ub * ri;
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[a * k + b] = gram[b * k + a];
            }
        }
        CellStats { k, gram, zu, ur }
    }

    /// Recomputes `U'R` only.
    pub fn refresh_ur(&self, rows: &[u32], segs: &[Segment], r: &[f64], cell: &mut CellStats) {
        let mut u = vec![0.0; segs.len()];
        cell.ur.iter_mut().for_each(|v| *v = 0.0);
        for &i in rows {
            let i = i as usize;
            self.fill_row(i, segs, &mut u);
            let ri = r[i];
            for (d, &ub) in cell.ur.iter_mut().zip(&u) {
                *d += ub * ri;
            }
        }
    }

    /// `r[i] += sign · u_i'δ` over the leaf rows (raw, unprojected).
    pub fn add_leaf_fit(&self, r: &mut [f64], rows: &[u32], segs: &[Segment], effects: &[f64], sign: f64) {
        for &i in rows {
            let i = i as usize;
            let base = i * (self.lags + 1);
            let mut f = 0.0;
            for (s, e) in segs.iter().zip(effects) {
                f += e * (self.cum[base + s.end] - self.cum[base + s.start - 1]);
            }
            r[i] += sign * f;
        }
    }
}

/// Sufficient statistics of one leaf's design columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub k: usize,
    /// `U_b'U_b`, `k × k`.
    pub gram: Vec<f64>,
    /// `Q'U_b`, `p × k`.
    pub zu: Vec<f64>,
    /// `U_b'R` for the projected residual `R`.
    pub ur: Vec<f64>,
}

impl CellStats {
    /// Statistics of the row union (`sign = 1`) or difference (`sign = −1`)
    /// of two disjoint or nested cells over the same columns.
    pub fn combine(&self, other: &CellStats, sign: f64) -> CellStats {
        debug_assert_eq!(self.k, other.k);
        let op = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + sign * y).collect();
        CellStats {
            k: self.k,
            gram: op(&self.gram, &other.gram),
            zu: op(&self.zu, &other.zu),
            ur: op(&self.ur, &other.ur),
        }
    }

    /// `Q'U_b δ`, accumulated into `out`.
    pub fn add_span_coefficients(&self, effects: &[f64], out: &mut [f64]) {
        let k = self.k;
        for (j, o) in out.iter_mut().enumerate() {
            *o += self.zu[j * k..j * k + k].iter().zip(effects).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Prior correlation `K` of one leaf's effect vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorCov {
    Identity,
    /// `K_tt' = exp(−φ|t − t'|)`.
    Exponential { phi: f64 },
}

impl PriorCov {
    pub fn log_det(&self, k: usize) -> f64 {
        match *self {
            PriorCov::Identity => 0.0,
            PriorCov::Exponential { phi } => {
                let rho = (-phi).exp();
                (k.saturating_sub(1)) as f64 * (1.0 - rho * rho).ln()
            }
        }
    }

    /// Adds `scale · K⁻¹` to the diagonal block at `offset` of a `dim × dim`
    /// matrix.
    pub fn add_precision(&self, a: &mut [f64], dim: usize, offset: usize, k: usize, scale: f64) {
        match *self {
            PriorCov::Identity => {
                for t in 0..k {
                    a[(offset + t) * dim + offset + t] += scale;
                }
            }
            PriorCov::Exponential { phi } => {
                let rho = (-phi).exp();
                if k == 1 {
                    a[offset * dim + offset] += scale;
                    return;
                }
                let c = scale / (1.0 - rho * rho);
                for t in 0..k {
                    let d = if t == 0 || t == k - 1 { 1.0 } else { 1.0 + rho * rho };
                    a[(offset + t) * dim + offset + t] += c * d;
                    if t + 1 < k {
                        a[(offset + t) * dim + offset + t + 1] -= c * rho;
                        a[(offset + t + 1) * dim + offset + t] -= c * rho;
                    }
                }
            }
        }
    }

    /// `δ'K⁻¹δ`.
    pub fn quad(&self, d: &[f64]) -> f64 {
        match *self {
            PriorCov::Identity => d.iter().map(|v| v * v).sum(),
            PriorCov::Exponential { phi } => {
                let k = d.len();
                if k <= 1 {
                    return d.iter().map(|v| v * v).sum();
                }
                let rho = (-phi).exp();
                let mut s = d[0] * d[0] + d[k - 1] * d[k - 1];
                for t in 1..k - 1 {
                    s += (1.0 + rho * rho) * d[t] * d[t];
                }
                for t in 0..k - 1 {
                    s -= 2.0 * rho * d[t] * d[t + 1];
                }
                s / (1.0 - rho * rho)
            }
        }
    }

    /// Dense `K`, row-major.
    pub fn dense(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] = match *self {
                    PriorCov::Identity => f64::from(u8::from(a == b)),
                    PriorCov::Exponential { phi } => (-phi * a.abs_diff(b) as f64).exp(),
                };
            }
        }
        out
    }
}

/// How `σ²` enters the tree marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaTreatment {
    Fixed { sigma2: f64 },
    /// Integrated against `IG(shape, rate)`.
    Integrated { shape: f64, rate: f64 },
}

/// Factor of the posterior precision `A`.
#[derive(Debug, Clone)]
enum Factor {
    Dense(PivotedCholesky),
    /// `A = B − V'V` with block-diagonal `B`; `W = V B⁻¹` (`p × dim`) and
    /// `C = I − W V'`.
    LowRank {
        blocks: Vec<(usize, PivotedCholesky)>,
        w: Vec<f64>,
        c: PivotedCholesky,
    },
}

/// Collapsed marginal of one tree state, with what the Gibbs draws need.
#[derive(Debug, Clone)]
pub struct Marginal {
    pub log_marginal: f64,
    pub k: usize,
    /// `R̃'R̃ − b'A⁻¹b`.
    pub quad_resid: f64,
    pub mean: Vec<f64>,
    factor: Factor,
}

/// `log ∫∫ N(R | Uδ, σ²I) N(δ | 0, sσ²K) p(σ²) dδ dσ²` up to a constant that
/// does not depend on the tree state, for projected cells.
///
/// `rr` is `R̃'R̃`, `scale` is `s = τ²ν²`, `n` the number of observations.
pub fn integrated_log_marginal(
    cells: &[&CellStats],
    rr: f64,
    scale: f64,
    cov: PriorCov,
    sigma: SigmaTreatment,
    n: usize,
) -> Result<Marginal> {
    // several dense GP blocks are cheaper through the Woodbury identity
    let low_rank = matches!(cov, PriorCov::Exponential { .. }) && cells.len() > 1;
    marginal_with(cells, rr, scale, cov, sigma, n, low_rank)
}

fn marginal_with(
    cells: &[&CellStats],
    rr: f64,
    scale: f64,
    cov: PriorCov,
    sigma: SigmaTreatment,
    n: usize,
    low_rank: bool,
) -> Result<Marginal> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(HdlmError::Singular("non-positive prior scale"));
    }
    let dim: usize = cells.iter().map(|c| c.k).sum();
    let p = cells.first().map_or(0, |c| c.zu.len() / c.k.max(1));
    let mut offsets = Vec::with_capacity(cells.len());
    let mut b = Vec::with_capacity(dim);
    let mut off = 0;
    for c in cells {
        b.extend_from_slice(&c.ur);
        offsets.push(off);
        off += c.k;
    }
    let inv_s = 1.0 / scale;
    let (factor, log_det_a, mean) = if low_rank {
        low_rank_factor(cells, &offsets, dim, p, cov, inv_s, &b)?
    } else {
        let mut a = vec![0.0; dim * dim];
        for (c, &o) in cells.iter().zip(&offsets) {
            for i in 0..c.k {
                a[(o + i) * dim + o..(o + i) * dim + o + c.k].copy_from_slice(&c.gram[i * c.k..(i + 1) * c.k]);
            }
        }
        // subtract (Q'U)'(Q'U) as a sum of outer products over the p basis rows
        let mut z = vec![0.0; dim];
        for l in 0..p {
            for (c, &o) in cells.iter().zip(&offsets) {
                z[o..o + c.k].copy_from_slice(&c.zu[l * c.k..(l + 1) * c.k]);
            }
            for i in 0..dim {
                let zi = z[i];
                if zi != 0.0 {
                    for (dst, &zj) in a[i * dim..(i + 1) * dim].iter_mut().zip(&z) {
                        *dst -= zi * zj;
                    }
                }
            }
        }
        for (c, &o) in cells.iter().zip(&offsets) {
            cov.add_precision(&mut a, dim, o, c.k, inv_s);
        }
        let chol = PivotedCholesky::factor(&a, dim)?;
        let mean = chol.solve(&b);
        let ld = chol.log_det();
        (Factor::Dense(chol), ld, mean)
    };
    let quad_resid = (rr - b.iter().zip(&mean).map(|(x, y)| x * y).sum::<f64>()).max(0.0);
    let log_det_k: f64 = cells.iter().map(|c| cov.log_det(c.k)).sum();
    let mut lm = -0.5 * log_det_a - 0.5 * dim as f64 * scale.ln() - 0.5 * log_det_k;
    match sigma {
        SigmaTreatment::Fixed { sigma2 } => lm -= quad_resid / (2.0 * sigma2),
        SigmaTreatment::Integrated { shape, rate } => {
            lm -= (shape + 0.5 * n as f64) * (rate + 0.5 * quad_resid).ln();
        }
    }
    Ok(Marginal {
        log_marginal: lm,
        k: dim,
        quad_resid,
        mean,
        factor,
    })
}

fn low_rank_factor(
    cells: &[&CellStats],
    offsets: &[usize],
    dim: usize,
    p: usize,
    cov: PriorCov,
    inv_s: f64,
    b: &[f64],
) -> Result<(Factor, f64, Vec<f64>)> {
    let mut blocks = Vec::with_capacity(cells.len());
    let mut log_det = 0.0;
    let mut w = vec![0.0; p * dim];
    let mut binv_b = vec![0.0; dim];
    for (c, &o) in cells.iter().zip(offsets) {
        let mut blk = c.gram.clone();
        cov.add_precision(&mut blk, c.k, 0, c.k, inv_s);
        let ch = PivotedCholesky::factor(&blk, c.k)?;
        log_det += ch.log_det();
        for l in 0..p {
            let x = ch.solve(&c.zu[l * c.k..(l + 1) * c.k]);
            w[l * dim + o..l * dim + o + c.k].copy_from_slice(&x);
        }
        binv_b[o..o + c.k].copy_from_slice(&ch.solve(&b[o..o + c.k]));
        blocks.push((o, ch));
    }
    // C = I − W V', where row l of V stacks every cell's zu row l
    let mut cm = vec![0.0; p * p];
    for l in 0..p {
        for m in 0..p {
            let mut s = 0.0;
            for (c, &o) in cells.iter().zip(offsets) {
                s += w[l * dim + o..l * dim + o + c.k]
                    .iter()
                    .zip(&c.zu[m * c.k..(m + 1) * c.k])
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
            }
            cm[l * p + m] = f64::from(u8::from(l == m)) - s;
        }
    }
    for l in 0..p {
        for m in 0..l {
            let v = 0.5 * (cm[l * p + m] + cm[m * p + l]);
            cm[l * p + m] = v;
            cm[m * p + l] = v;
        }
    }
    let c = PivotedCholesky::factor(&cm, p)?;
    log_det += c.log_det();
    let wb: Vec<f64> = (0..p)
        .map(|l| w[l * dim..(l + 1) * dim].iter().zip(b).map(|(x, y)| x * y).sum())
        .collect();
    let g = c.solve(&wb);
    let mut mean = binv_b;
    add_wt(&w, dim, &g, &mut mean);
    Ok((Factor::LowRank { blocks, w, c }, log_det, mean))
}

/// `out += W'g`.
fn add_wt(w: &[f64], dim: usize, g: &[f64], out: &mut [f64]) {
    for (l, &gl) in g.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(&w[l * dim..(l + 1) * dim]) {
            *o += gl * x;
        }
    }
}

impl Marginal {
    /// `σ² ~ IG(shape + n/2, rate + Q/2)`, the conditional given this state
    /// with effects integrated out.
    pub fn draw_sigma2<G: Rng + ?Sized>(&self, shape: f64, rate: f64, n: usize, rng: &mut G) -> f64 {
        sample_inv_gamma(shape + 0.5 * n as f64, rate + 0.5 * self.quad_resid, rng)
    }

    /// `δ ~ N(A⁻¹b, σ²A⁻¹)`.
    pub fn draw_effects<G: Rng + ?Sized>(&self, sigma2: f64, rng: &mut G) -> Vec<f64> {
        let z: Vec<f64> = (0..self.k).map(|_| StandardNormal.sample(rng)).collect();
        let dev = match &self.factor {
            Factor::Dense(ch) => ch.correlate_inverse(&z),
            Factor::LowRank { blocks, w, c } => {
                // N(0, B⁻¹) plus an independent N(0, W'C⁻¹W) term
                let mut dev = vec![0.0; self.k];
                for (o, ch) in blocks {
                    let k = ch.dim();
                    dev[*o..o + k].copy_from_slice(&ch.correlate_inverse(&z[*o..o + k]));
                }
                let z2: Vec<f64> = (0..c.dim()).map(|_| StandardNormal.sample(rng)).collect();
                add_wt(w, self.k, &c.correlate_inverse(&z2), &mut dev);
                dev
            }
        };
        let sd = sigma2.sqrt();
        self.mean.iter().zip(dev).map(|(m, d)| m + sd * d).collect()
    }

    /// `A⁻¹`, row-major.
    pub fn posterior_precision_inverse(&self) -> Vec<f64> {
        let k = self.k;
        let mut out = vec![0.0; k * k];
        let mut e = vec![0.0; k];
        for j in 0..k {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..k {
                out[i * k + j] = col[i];
            }
        }
        out
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match &self.factor {
            Factor::Dense(ch) => ch.solve(rhs),
            Factor::LowRank { blocks, w, c } => {
                let mut x = vec![0.0; self.k];
                for (o, ch) in blocks {
                    let k = ch.dim();
                    x[*o..o + k].copy_from_slice(&ch.solve(&rhs[*o..o + k]));
                }
                let wr: Vec<f64> = (0..c.dim())
                    .map(|l| w[l * self.k..(l + 1) * self.k].iter().zip(rhs).map(|(a, b)| a * b).sum())
                    .collect();
                add_wt(w, self.k, &c.solve(&wr), &mut x);
                x
            }
        }
    }
}

/// One draw from `N(V U'R/σ², V)`, `V = σ²(Ũ'Ũ + K⁻¹/s)⁻¹`.
pub fn gibbs_draw_effects<G: Rng + ?Sized>(
    cells: &[&CellStats],
    scale: f64,
    sigma2: f64,
    cov: PriorCov,
    rng: &mut G,
) -> Result<Vec<f64>> {
    let m = integrated_log_marginal(cells, 0.0, scale, cov, SigmaTreatment::Fixed { sigma2 }, 0)?;
    Ok(m.draw_effects(sigma2, rng))
}

/// `IG(shape, rate)`, i.e. `rate / Gamma(shape, 1)`.
pub fn sample_inv_gamma<G: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut G) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    (rate / g).min(f64::MAX)
}
