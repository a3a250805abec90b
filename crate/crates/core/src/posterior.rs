//! Summaries of posterior draws: lag curves, windows, cumulative effects,
//! inclusion probabilities and window metrics against a known truth.
//!
//! Intervals are equal-tail with linearly interpolated order statistics.

use std::collections::BTreeSet;
use std::fmt;

use crate::data::{Dataset, ModifierKind, ModifierSchema};
use crate::error::{HdlmError, Result};
use crate::samplers::{draw_fit, leaf_curve, PosteriorDraws};
use crate::trees::modifier::{assign_subgroup, SplitRule};

/// Sample quantile by linear interpolation between order statistics
/// (`h = (n − 1)p`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise posterior summary of a lag curve.
#[derive(Debug, Clone, PartialEq)]
pub struct DlmEstimate {
    pub level: f64,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Interval excludes zero.
    pub window: Vec<bool>,
}

impl DlmEstimate {
    pub fn lags(&self) -> usize {
        self.mean.len()
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(HdlmError::InvalidArgument(format!("credible level must lie in (0, 1), got {level}")))
    }
}

/// Summarizes per-draw curves (`draws × lags`).
pub fn summarize_curves(curves: &[Vec<f64>], level: f64) -> Result<DlmEstimate> {
    check_level(level)?;
    if curves.is_empty() {
        return Err(HdlmError::InvalidArgument("no posterior draws".into()));
    }
    let lags = curves[0].len();
    let a = (1.0 - level) / 2.0;
    let mut est = DlmEstimate {
        level,
        mean: Vec::with_capacity(lags),
        lower: Vec::with_capacity(lags),
        upper: Vec::with_capacity(lags),
        window: Vec::with_capacity(lags),
    };
    let mut col = Vec::with_capacity(curves.len());
    for t in 0..lags {
        col.clear();
        col.extend(curves.iter().map(|c| c[t]));
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        col.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&col, a).min(mean);
        let hi = quantile_sorted(&col, 1.0 - a).max(mean);
        est.mean.push(mean);
        est.lower.push(lo);
        est.upper.push(hi);
        est.window.push(lo > 0.0 || hi < 0.0);
    }
    Ok(est)
}

fn check_row(schema: &ModifierSchema, m: &[f64]) -> Result<()> {
    if m.len() != schema.len() {
        return Err(HdlmError::InvalidArgument(format!(
            "modifier row has {} values, schema has {}",
            m.len(),
            schema.len()
        )));
    }
    for (spec, &v) in schema.modifiers.iter().zip(m) {
        let ok = match spec.kind {
            ModifierKind::Continuous => v.is_finite(),
            _ => v >= 0.0 && v.fract() == 0.0 && (v as usize) < spec.categories.len(),
        };
        if !ok {
            return Err(HdlmError::InvalidArgument(format!(
                "value {v} does not conform to modifier '{}'",
                spec.name
            )));
        }
    }
    Ok(())
}

/// Per-draw `θ(m)` curves.
pub fn theta_draws(post: &PosteriorDraws, m: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_row(post.schema(), m)?;
    Ok(post.draws.iter().map(|d| d.theta(m, post.lags())).collect())
}

pub fn theta_for(post: &PosteriorDraws, m: &[f64], level: f64) -> Result<(Vec<Vec<f64>>, DlmEstimate)> {
    let curves = theta_draws(post, m)?;
    let est = summarize_curves(&curves, level)?;
    Ok((curves, est))
}

/// Per-draw curves for every row of an aligned dataset, as
/// `rows × draws × lags` computed draw by draw.
pub struct CurveTable {
    pub lags: usize,
    pub draws: usize,
    /// Row-major `rows × draws × lags`.
    values: Vec<f64>,
}

impl CurveTable {
    pub fn new(post: &PosteriorDraws, data: &Dataset) -> Self {
        let lags = post.lags();
        let nd = post.draws.len();
        let mut values = vec![0.0; data.n * nd * lags];
        for (d, draw) in post.draws.iter().enumerate() {
            for t in &draw.trees {
                let curves: Vec<Vec<f64>> = t
                    .modifier
                    .leaves()
                    .into_iter()
                    .map(|l| leaf_curve(l, t.shared.as_ref(), lags))
                    .collect();
                for i in 0..data.n {
                    let c = &curves[assign_subgroup(&t.modifier, data.m_row(i))];
                    let off = (i * nd + d) * lags;
                    for (o, v) in values[off..off + lags].iter_mut().zip(c) {
                        *o += v;
                    }
                }
            }
        }
        Self { lags, draws: nd, values }
    }

    pub fn curve(&self, row: usize, draw: usize) -> &[f64] {
        let off = (row * self.draws + draw) * self.lags;
        &self.values[off..off + self.lags]
    }

    pub fn row_curves(&self, row: usize) -> Vec<Vec<f64>> {
        (0..self.draws).map(|d| self.curve(row, d).to_vec()).collect()
    }

    pub fn estimate(&self, row: usize, level: f64) -> Result<DlmEstimate> {
        summarize_curves(&self.row_curves(row), level)
    }
}

/// Pointwise estimates for every row of `ds` (aligned to the fitted schema).
pub fn individual_estimates(post: &PosteriorDraws, ds: &Dataset, level: f64) -> Result<Vec<DlmEstimate>> {
    check_level(level)?;
    let data = post.align(ds)?;
    let table = CurveTable::new(post, &data);
    (0..data.n).map(|i| table.estimate(i, level)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeEffect {
    pub level: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl fmt::Display for CumulativeEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.3} ({:.0}% CI: {:.3}, {:.3})",
            self.mean,
            self.level * 100.0,
            self.lower,
            self.upper
        )
    }
}

/// `Δx · Σ_t θ_t` per draw, summarized.
pub fn cumulative_from_curves(curves: &[Vec<f64>], dx: f64, level: f64) -> Result<CumulativeEffect> {
    check_level(level)?;
    if !dx.is_finite() {
        return Err(HdlmError::InvalidArgument("exposure increment must be finite".into()));
    }
    if curves.is_empty() {
        return Err(HdlmError::InvalidArgument("no posterior draws".into()));
    }
    let mut v: Vec<f64> = curves.iter().map(|c| dx * c.iter().sum::<f64>()).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok(CumulativeEffect {
        level,
        mean,
        lower: quantile_sorted(&v, a),
        upper: quantile_sorted(&v, 1.0 - a),
    })
}

pub fn cumulative_effect(post: &PosteriorDraws, m: &[f64], dx: f64, level: f64) -> Result<CumulativeEffect> {
    cumulative_from_curves(&theta_draws(post, m)?, dx, level)
}

/// Inclusion probabilities and split-value samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PipTable {
    pub names: Vec<String>,
    pub pip: Vec<f64>,
    /// Symmetric `q × q`; the diagonal is unused and zero.
    pub interaction: Vec<Vec<f64>>,
    /// Thresholds of every rule on each continuous modifier, across draws.
    pub split_values: Vec<Vec<f64>>,
}

impl PipTable {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.pip[j])
    }

    pub fn interaction_of(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.interaction[i][j])
    }
}

pub fn pip(post: &PosteriorDraws) -> Result<PipTable> {
    if post.draws.is_empty() {
        return Err(HdlmError::InvalidArgument("no posterior draws".into()));
    }
    let schema = post.schema();
    let q = schema.len();
    let mut inc = vec![0usize; q];
    let mut pair = vec![vec![0usize; q]; q];
    let mut split_values = vec![Vec::new(); q];
    for d in &post.draws {
        let mut used = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for t in &d.trees {
            for (rule, _) in t.modifier.rules() {
                used.insert(rule.modifier());
                if let SplitRule::Threshold { modifier, threshold } = rule {
                    if schema.modifiers[*modifier].kind == ModifierKind::Continuous {
                        split_values[*modifier].push(*threshold);
                    }
                }
            }
            for (p, c) in t.modifier.rule_pairs() {
                let (a, b) = (p.modifier(), c.modifier());
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
        for j in used {
            inc[j] += 1;
        }
        for (a, b) in pairs {
            pair[a][b] += 1;
            pair[b][a] += 1;
        }
    }
    let nd = post.draws.len() as f64;
    Ok(PipTable {
        names: schema.names().iter().map(|s| s.to_string()).collect(),
        pip: inc.iter().map(|&c| c as f64 / nd).collect(),
        interaction: pair
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / nd).collect())
            .collect(),
        split_values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CompareOp {
    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Gt => a > b,
            CompareOp::Ge => a >= b,
            CompareOp::Eq => a == b,
            CompareOp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub modifier: String,
    pub op: CompareOp,
    /// Number for continuous modifiers, category label otherwise.
    pub value: String,
}

/// A labelled conjunction of comparisons, written
/// `label: name op value & name op value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub label: String,
    pub clauses: Vec<Clause>,
}

impl std::str::FromStr for Predicate {
    type Err = HdlmError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| HdlmError::InvalidArgument(format!("subgroup '{s}': {m}"));
        let (label, body) = s.split_once(':').ok_or_else(|| bad("expected 'label: clauses'"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(bad("empty label"));
        }
        let mut clauses = Vec::new();
        for part in body.split('&') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            // two-character operators first
            let ops = [
                ("<=", CompareOp::Le),
                (">=", CompareOp::Ge),
                ("==", CompareOp::Eq),
                ("!=", CompareOp::Ne),
                ("<", CompareOp::Lt),
                (">", CompareOp::Gt),
                ("=", CompareOp::Eq),
            ];
            let (pos, tok, op) = ops
                .iter()
                .filter_map(|(t, o)| part.find(t).map(|p| (p, *t, *o)))
                .min_by_key(|(p, t, _)| (*p, std::cmp::Reverse(t.len())))
                .ok_or_else(|| bad("missing comparison operator"))?;
            let name = part[..pos].trim();
            let value = part[pos + tok.len()..].trim();
            if name.is_empty() || value.is_empty() {
                return Err(bad("clause needs a name and a value"));
            }
            clauses.push(Clause {
                modifier: name.to_string(),
                op,
                value: value.to_string(),
            });
        }
        Ok(Predicate {
            label: label.to_string(),
            clauses,
        })
    }
}

/// A predicate bound to column indices and coded values of one schema.
#[derive(Debug, Clone)]
pub struct BoundPredicate {
    clauses: Vec<(usize, CompareOp, f64)>,
}

impl Predicate {
    pub fn bind(&self, schema: &ModifierSchema) -> Result<BoundPredicate> {
        let mut out = Vec::new();
        for c in &self.clauses {
            let j = schema
                .index_of(&c.modifier)
                .ok_or_else(|| HdlmError::InvalidArgument(format!("unknown modifier '{}'", c.modifier)))?;
            let spec = &schema.modifiers[j];
            if spec.kind == ModifierKind::Nominal && !matches!(c.op, CompareOp::Eq | CompareOp::Ne) {
                return Err(HdlmError::InvalidArgument(format!(
                    "nominal modifier '{}' supports only == and !=",
                    c.modifier
                )));
            }
            let v = spec.encode(&c.value).map_err(HdlmError::InvalidArgument)?;
            out.push((j, c.op, v));
        }
        Ok(BoundPredicate { clauses: out })
    }
}

impl BoundPredicate {
    pub fn matches(&self, m: &[f64]) -> bool {
        self.clauses.iter().all(|&(j, op, v)| op.apply(m[j], v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubgroupMode {
    /// Posterior of the member-average curve.
    Average,
    /// Curve at one representative modifier row: the median of each
    /// continuous or ordinal modifier and the most frequent level otherwise.
    Representative,
}

/// Subgroup curve over the matching rows of `ds`.
pub fn subgroup_curve(
    post: &PosteriorDraws,
    predicate: &Predicate,
    ds: &Dataset,
    mode: SubgroupMode,
    level: f64,
) -> Result<DlmEstimate> {
    check_level(level)?;
    let data = post.align(ds)?;
    let bound = predicate.bind(&data.schema)?;
    let rows: Vec<usize> = (0..data.n).filter(|&i| bound.matches(data.m_row(i))).collect();
    if rows.is_empty() {
        return Err(HdlmError::EmptySubgroup);
    }
    match mode {
        SubgroupMode::Average => {
            let sub = data.subset_rows(&rows);
            let table = CurveTable::new(post, &sub);
            let k = rows.len() as f64;
            let curves: Vec<Vec<f64>> = (0..table.draws)
                .map(|d| {
                    let mut acc = vec![0.0; table.lags];
                    for i in 0..rows.len() {
                        for (a, v) in acc.iter_mut().zip(table.curve(i, d)) {
                            *a += v / k;
                        }
                    }
                    acc
                })
                .collect();
            summarize_curves(&curves, level)
        }
        SubgroupMode::Representative => {
            let m = representative_row(&data, &rows);
            theta_for(post, &m, level).map(|(_, e)| e)
        }
    }
}

/// Representative modifier row of `rows`, as used by [`SubgroupMode::Representative`].
pub fn representative_row(data: &Dataset, rows: &[usize]) -> Vec<f64> {
    data.schema
        .modifiers
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut v: Vec<f64> = rows.iter().map(|&i| data.m_row(i)[j]).collect();
            match spec.kind {
                ModifierKind::Continuous => {
                    v.sort_by(f64::total_cmp);
                    quantile_sorted(&v, 0.5)
                }
                ModifierKind::Ordinal => {
                    // lower median stays on a valid level
                    v.sort_by(f64::total_cmp);
                    v[(v.len() - 1) / 2]
                }
                _ => {
                    let mut counts = vec![0usize; spec.categories.len()];
                    for x in &v {
                        counts[*x as usize] += 1;
                    }
                    let best = counts.iter().enumerate().max_by_key(|(k, c)| (**c, std::cmp::Reverse(*k)));
                    best.map_or(0.0, |(k, _)| k as f64)
                }
            }
        })
        .collect()
}

/// Pointwise accuracy of one estimate against a true curve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowMetrics {
    pub rmse: f64,
    pub coverage: f64,
    /// Flagged cells among truly nonzero cells.
    pub tp_hits: usize,
    pub nonzero_cells: usize,
    /// Flagged cells among truly zero cells.
    pub fp_hits: usize,
    pub zero_cells: usize,
}

impl WindowMetrics {
    pub fn tp(&self) -> Option<f64> {
        (self.nonzero_cells > 0).then(|| self.tp_hits as f64 / self.nonzero_cells as f64)
    }

    pub fn fp(&self) -> Option<f64> {
        (self.zero_cells > 0).then(|| self.fp_hits as f64 / self.zero_cells as f64)
    }
}

pub fn window_metrics(est: &DlmEstimate, truth: &[f64]) -> Result<WindowMetrics> {
    if est.lags() != truth.len() {
        return Err(HdlmError::GridMismatch(format!(
            "estimate has {} lags, truth has {}",
            est.lags(),
            truth.len()
        )));
    }
    let t = truth.len() as f64;
    let mut m = WindowMetrics::default();
    let mut se = 0.0;
    let mut covered = 0usize;
    for (k, &th) in truth.iter().enumerate() {
        se += (th - est.mean[k]).powi(2);
        if est.lower[k] <= th && th <= est.upper[k] {
            covered += 1;
        }
        if th != 0.0 {
            m.nonzero_cells += 1;
            m.tp_hits += usize::from(est.window[k]);
        } else {
            m.zero_cells += 1;
            m.fp_hits += usize::from(est.window[k]);
        }
    }
    m.rmse = (se / t).sqrt();
    m.coverage = covered as f64 / t;
    Ok(m)
}

/// Posterior mean prediction `E[z'γ + x'θ(m)]` for each row of `ds`.
pub fn predict(post: &PosteriorDraws, ds: &Dataset) -> Result<Vec<f64>> {
    if post.draws.is_empty() {
        return Err(HdlmError::InvalidArgument("no posterior draws".into()));
    }
    let data = post.align(ds)?;
    let nd = post.draws.len() as f64;
    let mut out = vec![0.0; data.n];
    for d in &post.draws {
        if d.gamma.len() != data.p {
            return Err(HdlmError::InvalidArgument("draws carry no fixed effects".into()));
        }
        let f = draw_fit(d, &data);
        for (i, o) in out.iter_mut().enumerate() {
            let zg: f64 = data.z_row(i).iter().zip(&d.gamma).map(|(a, b)| a * b).sum();
            *o += (zg + f[i]) / nd;
        }
    }
    Ok(out)
}
