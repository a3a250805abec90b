//! Simulated heterogeneous-lag data and replicate studies.
//!
//! Covariates are `z0 = 1`, `z1 ~ N(0,1)`, `z2 ~ Bern(0.5)`, `z3 ~ U(0,1)`,
//! `z4..z8 ~ N(0,1)` and `z9..z13 ~ Bern(0.5)`. All of `z0..z13` enter as
//! fixed effects and `z1..z13` are the candidate modifiers.
//!
//! Outcomes follow `y = r·x'θ*(m) + z'γ* + ε` with `γ* ~ N(0, I)` and `r`
//! chosen so the sample variance of `r·x'θ*` over the training rows is one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_exposures, Dataset, ExposureProcess, ModifierSchema, ModifierSpec};
use crate::error::{HdlmError, Result};
use crate::posterior::{pip, predict, window_metrics, CurveTable, PipTable, WindowMetrics};
use crate::rng::{derive_seed, rng_from_seed};
use crate::samplers::{fit, FitConfig, ModelKind};

pub const N_COVARIATES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Windows at weeks 11–18 or 17–26 depending on `z2`, only for `z1 > 0`.
    EarlyLate,
    /// Weeks 11–18 scaled by `z3`, only for `z1 > 0`.
    Scaled,
    /// One 8-week bump shared by everybody.
    NoHeterogeneity,
}

impl Scenario {
    pub fn number(&self) -> u8 {
        match self {
            Scenario::EarlyLate => 1,
            Scenario::Scaled => 2,
            Scenario::NoHeterogeneity => 3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::EarlyLate => "early-late",
            Scenario::Scaled => "scaled",
            Scenario::NoHeterogeneity => "no-heterogeneity",
        }
    }

    /// Modifiers that truly change the lag curve.
    pub fn active_modifiers(&self) -> &'static [&'static str] {
        match self {
            Scenario::EarlyLate => &["z1", "z2"],
            Scenario::Scaled => &["z1", "z3"],
            Scenario::NoHeterogeneity => &[],
        }
    }

    /// Whether rows split into effect (`z1 > 0`) and no-effect groups.
    pub fn has_groups(&self) -> bool {
        !matches!(self, Scenario::NoHeterogeneity)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = HdlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "early-late" => Ok(Scenario::EarlyLate),
            "2" | "scaled" => Ok(Scenario::Scaled),
            "3" | "no-heterogeneity" => Ok(Scenario::NoHeterogeneity),
            _ => Err(HdlmError::InvalidArgument(format!("unknown scenario '{s}' (use 1, 2 or 3)"))),
        }
    }
}

/// One simulated training/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub sigma2: f64,
    pub lags: usize,
    pub seed: u64,
    pub test_n: usize,
    pub exposure: ExposureProcess,
    /// Centre and scale exposures by their training mean and sd.
    pub standardize: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::EarlyLate,
            n: 5000,
            sigma2: 10.0,
            lags: 37,
            seed: 1,
            test_n: 5000,
            exposure: ExposureProcess::default(),
            standardize: true,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(HdlmError::InvalidArgument("n must be at least 1".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(HdlmError::InvalidArgument(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.lags < 27 {
            return Err(HdlmError::InvalidArgument(format!(
                "the scenarios place windows up to week 26; need lags >= 27, got {}",
                self.lags
            )));
        }
        Ok(())
    }
}

/// Intercept plus the 13 simulated covariates, `n × 14` row-major.
pub fn gen_covariates(n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(HdlmError::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut z = Vec::with_capacity(n * N_COVARIATES);
    for _ in 0..n {
        z.push(1.0);
        z.push(StandardNormal.sample(&mut rng));
        z.push(f64::from(u8::from(coin.sample(&mut rng))));
        z.push(rng.random::<f64>());
        for _ in 4..=8 {
            z.push(StandardNormal.sample(&mut rng));
        }
        for _ in 9..=13 {
            z.push(f64::from(u8::from(coin.sample(&mut rng))));
        }
    }
    Ok(z)
}

pub fn covariate_names() -> Vec<String> {
    (0..N_COVARIATES).map(|j| format!("z{j}")).collect()
}

/// Schema of the candidate modifiers `z1..z13`.
pub fn covariate_schema() -> ModifierSchema {
    let specs = (1..N_COVARIATES)
        .map(|j| {
            let name = format!("z{j}");
            if j == 2 || j >= 9 {
                ModifierSpec::binary(&name)
            } else {
                ModifierSpec::continuous(&name)
            }
        })
        .collect();
    ModifierSchema::new(specs).expect("valid schema")
}

/// True lag curve for one covariate row (`z0..z13`).
///
/// `start` is the scenario-3 onset `s ∈ {1, .., lags − 9}`.
pub fn true_theta(scenario: Scenario, z: &[f64], lags: usize, start: Option<usize>) -> Result<Vec<f64>> {
    let window = |a: usize, b: usize, h: f64| -> Vec<f64> {
        (1..=lags).map(|t| if (a..=b).contains(&t) { h } else { 0.0 }).collect()
    };
    Ok(match scenario {
        Scenario::EarlyLate => {
            if z[1] <= 0.0 {
                vec![0.0; lags]
            } else if z[2] == 1.0 {
                window(11, 18, 1.0)
            } else {
                window(17, 26, 1.0)
            }
        }
        Scenario::Scaled => {
            if z[1] <= 0.0 {
                vec![0.0; lags]
            } else {
                window(11, 18, z[3])
            }
        }
        Scenario::NoHeterogeneity => {
            let s = start.ok_or_else(|| HdlmError::InvalidArgument("scenario 3 needs a start week".into()))?;
            if s < 1 || s + 9 > lags {
                return Err(HdlmError::InvalidArgument(format!(
                    "start week {s} outside 1..={}",
                    lags.saturating_sub(9)
                )));
            }
            let s = s as f64;
            (1..=lags)
                .map(|t| {
                    let t = t as f64;
                    ((t - s) * (s - t + 9.0)).max(0.0)
                })
                .collect()
        }
    })
}

/// Data-generating quantities of one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthBundle {
    /// Unscaled `θ*(m_i)`, `n × lags` row-major.
    pub theta: Vec<f64>,
    pub lags: usize,
    pub r: f64,
    pub gamma: Vec<f64>,
    pub start: Option<usize>,
}

impl TruthBundle {
    /// `r·θ*(m_i)`, the curve the fitted models estimate.
    pub fn scaled_theta(&self, i: usize) -> Vec<f64> {
        self.theta[i * self.lags..(i + 1) * self.lags]
            .iter()
            .map(|v| v * self.r)
            .collect()
    }

    pub fn n(&self) -> usize {
        self.theta.len() / self.lags
    }
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Builds outcomes for given covariates and exposures.
///
/// `r` is computed from the first `n_train` rows; all rows share `γ*`, `r`
/// and the scenario-3 start.
pub fn simulate_outcome(
    z: &[f64],
    x: &[f64],
    lags: usize,
    scenario: Scenario,
    sigma2: f64,
    n_train: usize,
    seed: u64,
) -> Result<(Dataset, TruthBundle)> {
    let n = z.len() / N_COVARIATES;
    if z.len() != n * N_COVARIATES || x.len() != n * lags || n_train == 0 || n_train > n {
        return Err(HdlmError::InvalidArgument("inconsistent simulation shapes".into()));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(HdlmError::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let start = match scenario {
        Scenario::NoHeterogeneity => {
            let mut rng = rng_from_seed(derive_seed(seed, 3));
            Some(rng.random_range(1..=lags - 9))
        }
        _ => None,
    };
    let mut theta = Vec::with_capacity(n * lags);
    for i in 0..n {
        theta.extend(true_theta(scenario, &z[i * N_COVARIATES..(i + 1) * N_COVARIATES], lags, start)?);
    }
    let signal: Vec<f64> = (0..n)
        .map(|i| {
            x[i * lags..(i + 1) * lags]
                .iter()
                .zip(&theta[i * lags..(i + 1) * lags])
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let v = sample_variance(&signal[..n_train]);
    let r = if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 };
    let mut rng = rng_from_seed(derive_seed(seed, 4));
    let gamma: Vec<f64> = (0..N_COVARIATES).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, sigma2.sqrt()).expect("positive sd");
    let mut rng = rng_from_seed(derive_seed(seed, 5));
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let zg: f64 = z[i * N_COVARIATES..(i + 1) * N_COVARIATES]
                .iter()
                .zip(&gamma)
                .map(|(a, b)| a * b)
                .sum();
            r * signal[i] + zg + noise.sample(&mut rng)
        })
        .collect();
    let m: Vec<f64> = (0..n)
        .flat_map(|i| z[i * N_COVARIATES + 1..(i + 1) * N_COVARIATES].to_vec())
        .collect();
    let mut ds = Dataset::new(y, x.to_vec(), lags, z.to_vec(), N_COVARIATES, m, covariate_schema())?;
    ds.fixed_names = covariate_names();
    Ok((
        ds,
        TruthBundle {
            theta,
            lags,
            r,
            gamma,
            start,
        },
    ))
}

/// A training set, a held-out test set and their truths.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub train: Dataset,
    pub test: Dataset,
    pub truth_train: TruthBundle,
    pub truth_test: TruthBundle,
}

pub fn simulate_replicate(spec: &ScenarioSpec) -> Result<Replicate> {
    spec.validate()?;
    let total = spec.n + spec.test_n;
    let z = gen_covariates(total, derive_seed(spec.seed, 1))?;
    let mut x = generate_exposures(total, spec.lags, &spec.exposure, derive_seed(spec.seed, 2))?;
    if spec.standardize {
        let train = &x[..spec.n * spec.lags];
        let k = train.len() as f64;
        let mean = train.iter().sum::<f64>() / k;
        let sd = (train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    let (all, truth) = simulate_outcome(&z, &x, spec.lags, spec.scenario, spec.sigma2, spec.n, spec.seed)?;
    let train_rows: Vec<usize> = (0..spec.n).collect();
    let test_rows: Vec<usize> = (spec.n..total).collect();
    let split_truth = |rows: &[usize]| TruthBundle {
        theta: rows
            .iter()
            .flat_map(|&i| truth.theta[i * spec.lags..(i + 1) * spec.lags].to_vec())
            .collect(),
        ..truth.clone()
    };
    Ok(Replicate {
        train: all.subset_rows(&train_rows),
        test: all.subset_rows(&test_rows),
        truth_train: split_truth(&train_rows),
        truth_test: split_truth(&test_rows),
    })
}

/// Configuration of a replicate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub test_n: usize,
    pub sigma2: Vec<f64>,
    pub lags: usize,
    pub replicates: usize,
    pub models: Vec<ModelKind>,
    pub seed: u64,
    pub level: f64,
    pub exposure: ExposureProcess,
    pub standardize: bool,
    /// MCMC settings shared by every model; `model` and `seed` are set per fit.
    pub fit: FitConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::EarlyLate,
            n: 5000,
            test_n: 5000,
            sigma2: vec![10.0, 25.0, 50.0],
            lags: 37,
            replicates: 100,
            models: vec![
                ModelKind::Tdlm,
                ModelKind::GpDlm,
                ModelKind::HdlmNested,
                ModelKind::HdlmShared,
                ModelKind::HdlmGp,
            ],
            seed: 1,
            level: 0.95,
            exposure: ExposureProcess::default(),
            standardize: true,
            fit: FitConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.models.is_empty() || self.sigma2.is_empty() {
            return Err(HdlmError::InvalidConfig(
                "need at least one replicate, model and noise level".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(HdlmError::InvalidConfig("level must lie in (0, 1)".into()));
        }
        self.fit.validate()
    }

    /// Seed of replicate `rep` at noise level index `k`.
    pub fn replicate_seed(&self, k: usize, rep: usize) -> u64 {
        derive_seed(derive_seed(self.seed, k as u64), rep as u64)
    }
}

/// Group-level metrics of one fitted model on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub scenario: Scenario,
    pub sigma2: f64,
    pub replicate: usize,
    pub seed: u64,
    pub model: ModelKind,
    /// `effect`, `no-effect` or `all`.
    pub group: String,
    pub rmse: f64,
    pub coverage: f64,
    pub tp: Option<f64>,
    pub fp: Option<f64>,
    pub mspe: f64,
    pub mspe_ratio: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipRow {
    pub sigma2: f64,
    pub replicate: usize,
    pub model: ModelKind,
    /// A modifier name, or `a:b` for an interaction.
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub scenario: Scenario,
    pub sigma2: f64,
    pub model: ModelKind,
    pub group: String,
    pub rmse100: f64,
    pub coverage: f64,
    pub tp: Option<f64>,
    pub fp: Option<f64>,
    pub mspe_ratio: Option<f64>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub rows: Vec<ReplicateRow>,
    pub pips: Vec<PipRow>,
    pub aggregate: Vec<AggregateRow>,
}

#[derive(Default, Clone, Copy)]
struct GroupAcc {
    rmse: f64,
    coverage: f64,
    metrics: WindowMetrics,
    rows: usize,
}

fn group_of(scenario: Scenario, z: &[f64]) -> &'static str {
    if !scenario.has_groups() {
        "all"
    } else if z[1] > 0.0 {
        "effect"
    } else {
        "no-effect"
    }
}

fn groups(scenario: Scenario) -> &'static [&'static str] {
    if scenario.has_groups() {
        &["effect", "no-effect"]
    } else {
        &["all"]
    }
}

struct ModelOutcome {
    model: ModelKind,
    groups: Vec<(String, GroupAcc)>,
    mspe: f64,
    pip: Option<PipTable>,
}

fn evaluate_model(
    rep: &Replicate,
    scenario: Scenario,
    model: ModelKind,
    cfg: &FitConfig,
    level: f64,
) -> Result<ModelOutcome> {
    let post = fit(&rep.train, None, cfg)?;
    let data = post.align(&rep.train)?;
    let table = CurveTable::new(&post, &data);
    let mut acc: Vec<(String, GroupAcc)> = groups(scenario).iter().map(|g| (g.to_string(), GroupAcc::default())).collect();
    for i in 0..data.n {
        let est = table.estimate(i, level)?;
        let m = window_metrics(&est, &rep.truth_train.scaled_theta(i))?;
        let g = group_of(scenario, rep.train.z_row(i));
        let a = &mut acc.iter_mut().find(|(name, _)| name == g).expect("known group").1;
        a.rmse += m.rmse;
        a.coverage += m.coverage;
        a.metrics.tp_hits += m.tp_hits;
        a.metrics.nonzero_cells += m.nonzero_cells;
        a.metrics.fp_hits += m.fp_hits;
        a.metrics.zero_cells += m.zero_cells;
        a.rows += 1;
    }
    let yhat = predict(&post, &rep.test)?;
    let mspe = rep.test.y.iter().zip(&yhat).map(|(y, f)| (y - f).powi(2)).sum::<f64>() / rep.test.n as f64;
    let pip = if model.uses_modifiers() { Some(pip(&post)?) } else { None };
    Ok(ModelOutcome {
        model,
        groups: acc,
        mspe,
        pip,
    })
}

fn run_replicate(cfg: &StudyConfig, k: usize, sigma2: f64, rep_idx: usize) -> (Vec<ReplicateRow>, Vec<PipRow>) {
    let seed = cfg.replicate_seed(k, rep_idx);
    let spec = ScenarioSpec {
        scenario: cfg.scenario,
        n: cfg.n,
        sigma2,
        lags: cfg.lags,
        seed,
        test_n: cfg.test_n,
        exposure: cfg.exposure,
        standardize: cfg.standardize,
    };
    let fail = |model: ModelKind, e: String| ReplicateRow {
        scenario: cfg.scenario,
        sigma2,
        replicate: rep_idx,
        seed,
        model,
        group: "all".into(),
        rmse: f64::NAN,
        coverage: f64::NAN,
        tp: None,
        fp: None,
        mspe: f64::NAN,
        mspe_ratio: None,
        error: Some(e),
    };
    let rep = match simulate_replicate(&spec) {
        Ok(r) => r,
        Err(e) => return (cfg.models.iter().map(|m| fail(*m, e.to_string())).collect(), Vec::new()),
    };
    let outcomes: Vec<(ModelKind, Result<ModelOutcome>)> = cfg
        .models
        .iter()
        .map(|&model| {
            let fc = FitConfig {
                model,
                seed: derive_seed(seed, 100),
                ..cfg.fit.clone()
            };
            (model, evaluate_model(&rep, cfg.scenario, model, &fc, cfg.level))
        })
        .collect();
    let baseline = outcomes.iter().find_map(|(m, o)| match (m, o) {
        (ModelKind::Tdlm, Ok(o)) => Some(o.mspe),
        _ => None,
    });
    let mut rows = Vec::new();
    let mut pips = Vec::new();
    for (model, outcome) in outcomes {
        match outcome {
            Err(e) => rows.push(fail(model, e.to_string())),
            Ok(o) => {
                for (g, a) in &o.groups {
                    let k = a.rows.max(1) as f64;
                    rows.push(ReplicateRow {
                        scenario: cfg.scenario,
                        sigma2,
                        replicate: rep_idx,
                        seed,
                        model: o.model,
                        group: g.clone(),
                        rmse: a.rmse / k,
                        coverage: a.coverage / k,
                        tp: a.metrics.tp(),
                        fp: a.metrics.fp(),
                        mspe: o.mspe,
                        mspe_ratio: baseline.map(|b| o.mspe / b),
                        error: None,
                    });
                }
                if let Some(p) = &o.pip {
                    for (j, name) in p.names.iter().enumerate() {
                        pips.push(PipRow {
                            sigma2,
                            replicate: rep_idx,
                            model: o.model,
                            term: name.clone(),
                            value: p.pip[j],
                        });
                    }
                    for a in 0..p.names.len() {
                        for b in a + 1..p.names.len() {
                            pips.push(PipRow {
                                sigma2,
                                replicate: rep_idx,
                                model: o.model,
                                term: format!("{}:{}", p.names[a], p.names[b]),
                                value: p.interaction[a][b],
                            });
                        }
                    }
                }
            }
        }
    }
    (rows, pips)
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    (k > 0).then(|| s / k as f64)
}

/// Plain means of replicate-level metrics, per (noise level, model, group).
pub fn aggregate(config: &StudyConfig, rows: &[ReplicateRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for &s2 in &config.sigma2 {
        for &model in &config.models {
            for g in groups(config.scenario) {
                let sel: Vec<&ReplicateRow> = rows
                    .iter()
                    .filter(|r| r.sigma2 == s2 && r.model == model && r.group == *g && r.error.is_none())
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                out.push(AggregateRow {
                    scenario: config.scenario,
                    sigma2: s2,
                    model,
                    group: g.to_string(),
                    rmse100: 100.0 * mean_of(sel.iter().map(|r| r.rmse)).unwrap_or(f64::NAN),
                    coverage: mean_of(sel.iter().map(|r| r.coverage)).unwrap_or(f64::NAN),
                    tp: mean_of(sel.iter().filter_map(|r| r.tp)),
                    fp: mean_of(sel.iter().filter_map(|r| r.fp)),
                    mspe_ratio: mean_of(sel.iter().filter_map(|r| r.mspe_ratio)),
                    replicates: sel.len(),
                });
            }
        }
    }
    out
}

/// Runs every (noise level, replicate) pair; fit failures are recorded in
/// their rows rather than aborting the study.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let jobs: Vec<(usize, f64, usize)> = config
        .sigma2
        .iter()
        .enumerate()
        .flat_map(|(k, &s2)| (0..config.replicates).map(move |r| (k, s2, r)))
        .collect();
    let results: Vec<(Vec<ReplicateRow>, Vec<PipRow>)> = jobs
        .par_iter()
        .map(|&(k, s2, r)| run_replicate(config, k, s2, r))
        .collect();
    let mut rows = Vec::new();
    let mut pips = Vec::new();
    for (r, p) in results {
        rows.extend(r);
        pips.extend(p);
    }
    let aggregate = aggregate(config, &rows);
    Ok(StudyReport {
        config: config.clone(),
        rows,
        pips,
        aggregate,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl StudyReport {
    pub const REPLICATE_HEADER: [&'static str; 13] = [
        "scenario",
        "sigma2",
        "replicate",
        "seed",
        "model",
        "group",
        "rmse100",
        "coverage",
        "tp",
        "fp",
        "mspe",
        "mspe_ratio",
        "error",
    ];
    pub const AGGREGATE_HEADER: [&'static str; 10] = [
        "scenario",
        "sigma2",
        "model",
        "group",
        "rmse100",
        "coverage",
        "tp",
        "fp",
        "mspe_ratio",
        "replicates",
    ];
    pub const PIP_HEADER: [&'static str; 5] = ["sigma2", "replicate", "model", "term", "pip"];

    pub fn replicate_records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.scenario.number().to_string(),
                    format!("{}", r.sigma2),
                    r.replicate.to_string(),
                    r.seed.to_string(),
                    r.model.to_string(),
                    r.group.clone(),
                    format!("{}", 100.0 * r.rmse),
                    format!("{}", r.coverage),
                    opt(r.tp),
                    opt(r.fp),
                    format!("{}", r.mspe),
                    opt(r.mspe_ratio),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect()
    }

    pub fn aggregate_records(&self) -> Vec<Vec<String>> {
        self.aggregate
            .iter()
            .map(|r| {
                vec![
                    r.scenario.number().to_string(),
                    format!("{}", r.sigma2),
                    r.model.to_string(),
                    r.group.clone(),
                    format!("{:.4}", r.rmse100),
                    format!("{:.4}", r.coverage),
                    r.tp.map_or("NA".into(), |v| format!("{v:.4}")),
                    r.fp.map_or("NA".into(), |v| format!("{v:.4}")),
                    r.mspe_ratio.map_or("NA".into(), |v| format!("{v:.4}")),
                    r.replicates.to_string(),
                ]
            })
            .collect()
    }

    pub fn pip_records(&self) -> Vec<Vec<String>> {
        self.pips
            .iter()
            .map(|p| {
                vec![
                    format!("{}", p.sigma2),
                    p.replicate.to_string(),
                    p.model.to_string(),
                    p.term.clone(),
                    format!("{}", p.value),
                ]
            })
            .collect()
    }

    pub fn find(&self, sigma2: f64, model: ModelKind, group: &str) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|r| r.sigma2 == sigma2 && r.model == model && r.group == group)
    }

    /// Mean PIP of `term` across replicates for one model and noise level.
    pub fn mean_pip(&self, sigma2: f64, model: ModelKind, term: &str) -> Option<f64> {
        mean_of(
            self.pips
                .iter()
                .filter(|p| p.sigma2 == sigma2 && p.model == model && p.term == term)
                .map(|p| p.value),
        )
    }
}
