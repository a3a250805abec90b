//! The `hdlm` command line: simulate, fit, summarize, pip, predict, study.
//!
//! Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
//! Errors are printed as one line, `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, read_dataset, write_dataset, ColumnMap, Dataset, ModifierSchema};
use crate::error::{HdlmError, Result};
use crate::posterior::{
    cumulative_from_curves, pip, predict, quantile_sorted, subgroup_curve, theta_draws, CurveTable, DlmEstimate,
    Predicate, SubgroupMode,
};
use crate::samplers::{fit, read_draws, write_draws, FitConfig, ModelKind, PosteriorDraws};
use crate::simulation::{run_study, simulate_replicate, Replicate, Scenario, ScenarioSpec, StudyConfig, TruthBundle};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HDLM_OUT";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn banner(cmd: &str) -> String {
    format!("hdlm {VERSION} {cmd}")
}

#[derive(Parser, Debug)]
#[command(name = "hdlm", version, about = "Heterogeneous distributed lag models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a training/test pair from one of the three scenarios.
    Simulate(SimulateArgs),
    /// Fit a model and write a draw file plus diagnostics.
    Fit(FitArgs),
    /// Lag-curve and cumulative-effect summaries for subgroups.
    Summarize(SummarizeArgs),
    /// Posterior inclusion probabilities of the modifiers.
    Pip(PipArgs),
    /// Posterior mean predictions for new rows.
    Predict(PredictArgs),
    /// Run a replicate study and write per-replicate and aggregate tables.
    Study(StudyArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// 1 (early-late), 2 (scaled) or 3 (no-heterogeneity).
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 10.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 37)]
    lags: usize,
    #[arg(long, default_value_t = 5000)]
    test_n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// RunConfig TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent chains, run concurrently and merged by chain index.
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    progress: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[arg(long)]
    draws: PathBuf,
    /// Rows whose subgroups are summarized; usually the training data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `label: name op value & ...`; repeatable. Defaults to everybody.
    #[arg(long = "subgroup")]
    subgroups: Vec<String>,
    #[arg(long)]
    level: Option<f64>,
    /// Exposure increment for cumulative effects.
    #[arg(long)]
    increment: Option<f64>,
    /// `average` (default) or `representative`.
    #[arg(long)]
    mode: Option<String>,
    /// Also write one estimate per row of `--data`.
    #[arg(long)]
    individual: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    draws: PathBuf,
    /// New rows with the training columns; the outcome column is optional.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// StudyConfig TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything `fit` and `summarize` read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset CSV (required for `fit`).
    pub data: Option<PathBuf>,
    /// Modifier schema TOML (required for `fit`).
    pub schema: Option<PathBuf>,
    pub outcome: String,
    /// Exposure columns in lag order; empty means every column named
    /// `exposure_prefix` followed by digits, in numeric order.
    pub exposures: Vec<String>,
    pub exposure_prefix: String,
    pub fixed: Vec<String>,
    pub intercept: bool,
    /// Subset of schema modifiers to use; `None` means all.
    pub modifiers: Option<Vec<String>>,
    pub output: Option<PathBuf>,
    pub level: f64,
    pub subgroups: Vec<String>,
    pub subgroup_mode: String,
    pub increment: f64,
    pub fit: FitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            schema: None,
            outcome: "y".into(),
            exposures: Vec::new(),
            exposure_prefix: "x".into(),
            fixed: Vec::new(),
            intercept: true,
            modifiers: None,
            output: None,
            level: 0.95,
            subgroups: Vec::new(),
            subgroup_mode: "average".into(),
            increment: 1.0,
            fit: FitConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HdlmError::InvalidConfig(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HdlmError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Resolves exposure columns against a CSV header.
    pub fn column_map(&self, header: &[String]) -> Result<ColumnMap> {
        let exposures = if self.exposures.is_empty() {
            let mut found: Vec<(usize, String)> = header
                .iter()
                .filter_map(|h| {
                    let rest = h.strip_prefix(&self.exposure_prefix)?;
                    (!rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                        .then(|| (rest.parse::<usize>().ok(), h.clone()))
                        .and_then(|(k, h)| k.map(|k| (k, h)))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(HdlmError::MissingColumn(format!("{}1", self.exposure_prefix)));
            }
            found.into_iter().map(|(_, h)| h).collect()
        } else {
            self.exposures.clone()
        };
        Ok(ColumnMap {
            outcome: self.outcome.clone(),
            exposures,
            fixed: self.fixed.clone(),
            intercept: self.intercept,
        })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Pip(a) => cmd_pip(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Study(a) => cmd_study(a),
    }
}

fn out_dir(flag: Option<PathBuf>, config: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| config.cloned())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| HdlmError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HdlmError::io(path, e))
}

fn csv_text(header_line: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HdlmError::InvalidArgument(format!("csv: {e}"));
    w.write_record(columns).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let body = w.into_inner().map_err(|e| HdlmError::InvalidArgument(format!("csv: {e}")))?;
    Ok(format!("# {header_line}\n{}", String::from_utf8_lossy(&body)))
}

fn truth_rows(ds: &Dataset, truth: &TruthBundle, scenario: Scenario) -> Vec<Vec<String>> {
    (0..truth.n())
        .map(|i| {
            let z1 = ds.z_row(i)[1];
            let group = if !scenario.has_groups() {
                "all"
            } else if z1 > 0.0 {
                "effect"
            } else {
                "no-effect"
            };
            let mut r = vec![(i + 1).to_string(), group.to_string()];
            r.extend(truth.scaled_theta(i).iter().map(|v| format!("{v}")));
            r
        })
        .collect()
}

/// Header of the truth files: `row,group,theta1..thetaT`.
pub fn truth_columns(lags: usize) -> Vec<String> {
    let mut c = vec!["row".to_string(), "group".to_string()];
    c.extend((1..=lags).map(|t| format!("theta{t}")));
    c
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse()?;
    let spec = ScenarioSpec {
        scenario,
        n: a.n,
        sigma2: a.sigma2,
        lags: a.lags,
        seed: a.seed,
        test_n: a.test_n,
        ..ScenarioSpec::default()
    };
    let rep = simulate_replicate(&spec)?;
    let dir = out_dir(a.out, None)?;
    write_replicate(&dir, &spec, &rep)
}

fn write_replicate(dir: &Path, spec: &ScenarioSpec, rep: &Replicate) -> Result<()> {
    let head = banner("simulate");
    write_dataset(&rep.train, &dir.join("train.csv"), Some(&head))?;
    let cols = truth_columns(spec.lags);
    let cols: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    write_text(
        &dir.join("truth_train.csv"),
        &csv_text(&head, &cols, &truth_rows(&rep.train, &rep.truth_train, spec.scenario))?,
    )?;
    if spec.test_n > 0 {
        write_dataset(&rep.test, &dir.join("test.csv"), Some(&head))?;
        write_text(
            &dir.join("truth_test.csv"),
            &csv_text(&head, &cols, &truth_rows(&rep.test, &rep.truth_test, spec.scenario))?,
        )?;
    }
    let schema = rep.train.schema.to_toml_string();
    write_text(&dir.join("schema.toml"), &format!("# {head}\n{schema}"))?;
    let run = RunConfig {
        data: Some("train.csv".into()),
        schema: Some("schema.toml".into()),
        fixed: (1..crate::simulation::N_COVARIATES).map(|j| format!("z{j}")).collect(),
        ..RunConfig::default()
    };
    let cfg = toml::to_string(&run).map_err(|e| HdlmError::InvalidConfig(e.to_string()))?;
    write_text(
        &dir.join("config.toml"),
        &format!("# {head}\n# paths are relative to this file\n{cfg}"),
    )?;
    #[derive(Serialize)]
    struct Truth {
        r: f64,
        start: Option<usize>,
        gamma: Vec<f64>,
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        spec: &'a ScenarioSpec,
        truth: Truth,
    }
    let manifest = Manifest {
        spec,
        truth: Truth {
            r: rep.truth_train.r,
            start: rep.truth_train.start,
            gamma: rep.truth_train.gamma.clone(),
        },
    };
    let body = toml::to_string(&manifest).map_err(|e| HdlmError::InvalidConfig(e.to_string()))?;
    let m = format!("# {head}\n{body}");
    write_text(&dir.join("manifest.toml"), &m)
}

/// Resolves a path from a config file relative to the file's directory.
fn relative_to(config: Option<&Path>, p: &Path) -> PathBuf {
    match config.and_then(|c| c.parent()) {
        Some(base) if p.is_relative() => base.join(p),
        _ => p.to_path_buf(),
    }
}

fn csv_header(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| HdlmError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    Ok(rdr
        .headers()
        .map_err(|e| HdlmError::InvalidArgument(format!("{}: bad CSV header: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect())
}

/// Loads the dataset named by a resolved config.
pub fn load_run_data(run: &RunConfig, base: Option<&Path>) -> Result<Dataset> {
    let data = run
        .data
        .as_ref()
        .ok_or_else(|| HdlmError::InvalidConfig("no data file given (use --data or `data = ...`)".into()))?;
    let schema = run
        .schema
        .as_ref()
        .ok_or_else(|| HdlmError::InvalidConfig("no schema file given (use --schema or `schema = ...`)".into()))?;
    let data = relative_to(base, data);
    let schema = ModifierSchema::load(&relative_to(base, schema))?;
    let map = run.column_map(&csv_header(&data)?)?;
    load_dataset(&data, &schema, &map)
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let mut run = load_config(a.config.as_ref())?;
    // flags win over the file; flag paths are relative to the working directory
    let base = a.config.as_deref();
    let mut data_path = run.data.clone().map(|p| relative_to(base, &p));
    let mut schema_path = run.schema.clone().map(|p| relative_to(base, &p));
    if a.data.is_some() {
        data_path = a.data;
    }
    if a.schema.is_some() {
        schema_path = a.schema;
    }
    run.data = data_path;
    run.schema = schema_path;
    let f = &mut run.fit;
    if let Some(v) = a.model {
        f.model = v;
    }
    if let Some(v) = a.trees {
        f.trees = v;
    }
    if let Some(v) = a.iterations {
        f.iterations = v;
    }
    if let Some(v) = a.burn_in {
        f.burn_in = v;
    }
    if let Some(v) = a.thin {
        f.thin = v;
    }
    if let Some(v) = a.seed {
        f.seed = v;
    }
    if let Some(v) = a.chains {
        f.chains = v;
    }
    f.progress |= a.progress;
    run.fit.validate()?;
    let ds = load_run_data(&run, None)?;
    let post = fit(&ds, run.modifiers.as_deref(), &run.fit)?;
    let dir = out_dir(a.out, run.output.as_ref())?;
    let path = dir.join("draws.txt");
    let file = fs::File::create(&path).map_err(|e| HdlmError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_draws(&post, &format!("{} model={} seed={}", banner("fit"), run.fit.model, run.fit.seed), &mut w)?;
    w.flush().map_err(|e| HdlmError::io(&path, e))?;
    write_text(&dir.join("diagnostics.txt"), &diagnostics_text(&post))?;
    eprintln!(
        "hdlm fit: {} draws from {} chain(s) written to {}",
        post.draws.len(),
        run.fit.chains,
        path.display()
    );
    Ok(())
}

/// Acceptance rates per chain and `σ` trace quantiles.
pub fn diagnostics_text(post: &PosteriorDraws) -> String {
    let mut s = format!("# {}\n", banner("fit diagnostics"));
    let _ = writeln!(s, "model = \"{}\"", post.header.config.model);
    let _ = writeln!(s, "draws = {}", post.draws.len());
    for d in &post.diagnostics {
        let _ = writeln!(s, "\n[[chain]]\nindex = {}\nseed = {}", d.chain, d.seed);
        for (k, name) in ["grow", "prune", "change", "swap"].iter().enumerate() {
            let rate = if d.modifier_proposed[k] > 0 {
                d.modifier_accepted[k] as f64 / d.modifier_proposed[k] as f64
            } else {
                0.0
            };
            let _ = writeln!(
                s,
                "modifier_{name} = {{ proposed = {}, accepted = {}, rate = {rate:.4} }}",
                d.modifier_proposed[k], d.modifier_accepted[k]
            );
        }
        let _ = writeln!(s, "modifier_acceptance = {:.4}", d.modifier_acceptance());
        let _ = writeln!(s, "dlm_acceptance = {:.4}", d.dlm_acceptance());
        if d.phi_proposed > 0 {
            let _ = writeln!(
                s,
                "phi_acceptance = {:.4}\nphi_step = {:.4}",
                d.phi_accepted as f64 / d.phi_proposed as f64,
                d.phi_step
            );
        }
        let _ = writeln!(s, "singular = {}", d.singular);
    }
    let mut sig: Vec<f64> = post.draws.iter().map(|d| d.sigma2.sqrt()).collect();
    sig.sort_by(f64::total_cmp);
    if !sig.is_empty() {
        let _ = writeln!(
            s,
            "\n[sigma]\nq025 = {}\nq500 = {}\nq975 = {}",
            quantile_sorted(&sig, 0.025),
            quantile_sorted(&sig, 0.5),
            quantile_sorted(&sig, 0.975)
        );
    }
    s
}

fn load_draws(path: &Path) -> Result<PosteriorDraws> {
    let file = fs::File::open(path).map_err(|e| HdlmError::io(path, e))?;
    read_draws(BufReader::new(file))
}

/// Reads rows for an existing fit using the column names stored in its
/// header. A missing outcome column is filled with zeros.
pub fn load_for_draws(post: &PosteriorDraws, path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| HdlmError::io(path, e))?;
    let header = post.header.clone();
    let intercept = header.fixed.first().is_some_and(|f| f == "intercept");
    let fixed = if intercept { header.fixed[1..].to_vec() } else { header.fixed.clone() };
    let map = ColumnMap {
        outcome: header.outcome.clone(),
        exposures: header.exposures.clone(),
        fixed,
        intercept,
    };
    let cols = csv_header(path)?;
    // only the modifiers the fit used are required
    let schema = header.schema.clone();
    if cols.contains(&header.outcome) {
        return read_dataset(text.as_bytes(), &schema, &map);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HdlmError::InvalidArgument(format!("{}: {e}", path.display()));
    let mut head = cols.clone();
    head.push(header.outcome.clone());
    w.write_record(&head).map_err(err)?;
    for rec in rdr.records() {
        let mut r: Vec<String> = rec.map_err(err)?.iter().map(|s| s.to_string()).collect();
        r.push("0".into());
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HdlmError::InvalidArgument(e.to_string()))?;
    read_dataset(bytes.as_slice(), &schema, &map)
}

fn estimate_rows(label: &str, est: &DlmEstimate) -> Vec<Vec<String>> {
    (0..est.lags())
        .map(|t| {
            vec![
                label.to_string(),
                (t + 1).to_string(),
                format!("{}", est.mean[t]),
                format!("{}", est.lower[t]),
                format!("{}", est.upper[t]),
                est.window[t].to_string(),
            ]
        })
        .collect()
}

fn cmd_summarize(a: SummarizeArgs) -> Result<()> {
    let run = load_config(a.config.as_ref())?;
    let level = a.level.unwrap_or(run.level);
    let increment = a.increment.unwrap_or(run.increment);
    let mode = match a.mode.as_deref().unwrap_or(&run.subgroup_mode) {
        "average" => SubgroupMode::Average,
        "representative" => SubgroupMode::Representative,
        other => {
            return Err(HdlmError::InvalidArgument(format!(
                "unknown subgroup mode '{other}' (use average or representative)"
            )))
        }
    };
    let post = load_draws(&a.draws)?;
    let ds = load_for_draws(&post, &a.data)?;
    let mut preds: Vec<Predicate> = if a.subgroups.is_empty() { run.subgroups.clone() } else { a.subgroups }
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    if preds.is_empty() {
        preds.push("all:".parse()?);
    }
    let head = banner("summarize");
    let mut curve_rows = Vec::new();
    let mut cum_rows = Vec::new();
    for p in &preds {
        let est = subgroup_curve(&post, p, &ds, mode, level)?;
        curve_rows.extend(estimate_rows(&p.label, &est));
        let cum = subgroup_cumulative(&post, p, &ds, mode, increment, level)?;
        cum_rows.push(vec![
            p.label.clone(),
            format!("{increment}"),
            format!("{}", cum.mean),
            format!("{}", cum.lower),
            format!("{}", cum.upper),
            cum.to_string(),
        ]);
    }
    let dir = out_dir(a.out, run.output.as_ref())?;
    write_text(
        &dir.join("summary.csv"),
        &csv_text(&head, &["group", "lag", "mean", "lower", "upper", "window"], &curve_rows)?,
    )?;
    write_text(
        &dir.join("cumulative.csv"),
        &csv_text(&head, &["group", "increment", "mean", "lower", "upper", "text"], &cum_rows)?,
    )?;
    if a.individual {
        let data = post.align(&ds)?;
        let table = CurveTable::new(&post, &data);
        let mut rows = Vec::new();
        for i in 0..data.n {
            rows.extend(estimate_rows(&(i + 1).to_string(), &table.estimate(i, level)?));
        }
        write_text(
            &dir.join("individual.csv"),
            &csv_text(&head, &["row", "lag", "mean", "lower", "upper", "window"], &rows)?,
        )?;
    }
    Ok(())
}

fn subgroup_cumulative(
    post: &PosteriorDraws,
    p: &Predicate,
    ds: &Dataset,
    mode: SubgroupMode,
    increment: f64,
    level: f64,
) -> Result<crate::posterior::CumulativeEffect> {
    let data = post.align(ds)?;
    let bound = p.bind(&data.schema)?;
    let rows: Vec<usize> = (0..data.n).filter(|&i| bound.matches(data.m_row(i))).collect();
    if rows.is_empty() {
        return Err(HdlmError::EmptySubgroup);
    }
    let curves = match mode {
        SubgroupMode::Average => {
            let sub = data.subset_rows(&rows);
            let table = CurveTable::new(post, &sub);
            let k = rows.len() as f64;
            (0..table.draws)
                .map(|d| {
                    let mut acc = vec![0.0; table.lags];
                    for i in 0..rows.len() {
                        for (a, v) in acc.iter_mut().zip(table.curve(i, d)) {
                            *a += v / k;
                        }
                    }
                    acc
                })
                .collect()
        }
        SubgroupMode::Representative => {
            let est_row = crate::posterior::representative_row(&data, &rows);
            theta_draws(post, &est_row)?
        }
    };
    cumulative_from_curves(&curves, increment, level)
}

fn cmd_pip(a: PipArgs) -> Result<()> {
    let post = load_draws(&a.draws)?;
    let table = pip(&post)?;
    let head = banner("pip");
    let rows: Vec<Vec<String>> = table
        .names
        .iter()
        .zip(&table.pip)
        .map(|(n, v)| vec![n.clone(), format!("{v}")])
        .collect();
    let mut pairs = Vec::new();
    for i in 0..table.names.len() {
        for j in i + 1..table.names.len() {
            pairs.push(vec![
                table.names[i].clone(),
                table.names[j].clone(),
                format!("{}", table.interaction[i][j]),
            ]);
        }
    }
    let dir = out_dir(a.out, None)?;
    write_text(&dir.join("pip.csv"), &csv_text(&head, &["modifier", "pip"], &rows)?)?;
    write_text(
        &dir.join("interactions.csv"),
        &csv_text(&head, &["modifier_a", "modifier_b", "pip"], &pairs)?,
    )?;
    let splits: Vec<Vec<String>> = table
        .names
        .iter()
        .zip(&table.split_values)
        .flat_map(|(n, v)| v.iter().map(move |x| vec![n.clone(), format!("{x}")]))
        .collect();
    write_text(&dir.join("split_values.csv"), &csv_text(&head, &["modifier", "threshold"], &splits)?)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let post = load_draws(&a.draws)?;
    let ds = load_for_draws(&post, &a.data)?;
    let yhat = predict(&post, &ds)?;
    let rows: Vec<Vec<String>> = yhat
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i + 1).to_string(), format!("{v}")])
        .collect();
    let dir = out_dir(a.out, None)?;
    write_text(
        &dir.join("predictions.csv"),
        &csv_text(&banner("predict"), &["row", "yhat"], &rows)?,
    )
}

fn cmd_study(a: StudyArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| HdlmError::io(&a.config, e))?;
    let mut cfg: StudyConfig =
        toml::from_str(&text).map_err(|e| HdlmError::InvalidConfig(e.message().replace('\n', " ")))?;
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    let report = run_study(&cfg)?;
    let dir = out_dir(a.out, None)?;
    let head = banner("study");
    write_text(
        &dir.join("replicates.csv"),
        &csv_text(&head, &crate::simulation::StudyReport::REPLICATE_HEADER, &report.replicate_records())?,
    )?;
    write_text(
        &dir.join("aggregate.csv"),
        &csv_text(&head, &crate::simulation::StudyReport::AGGREGATE_HEADER, &report.aggregate_records())?,
    )?;
    write_text(
        &dir.join("pips.csv"),
        &csv_text(&head, &crate::simulation::StudyReport::PIP_HEADER, &report.pip_records())?,
    )?;
    let cfg_toml = toml::to_string(&cfg).map_err(|e| HdlmError::InvalidConfig(e.to_string()))?;
    let mut m = format!("# {head}\n{cfg_toml}\n[seeds]\n");
    for (k, s2) in cfg.sigma2.iter().enumerate() {
        let seeds: Vec<String> = (0..cfg.replicates).map(|r| cfg.replicate_seed(k, r).to_string()).collect();
        let _ = writeln!(m, "\"{s2}\" = [{}]", seeds.join(", "));
    }
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    let _ = writeln!(m, "\n[outcome]\nfailed_rows = {failed}");
    write_text(&dir.join("manifest.toml"), &m)
}
