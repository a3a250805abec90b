//! Datasets: outcome, lagged exposures, fixed-effect design and typed
//! modifiers, plus CSV ingestion and a synthetic exposure generator.
//!
//! Modifier values are stored as `f64` codes: continuous values raw,
//! ordinal/nominal values as the category index in schema order, binary
//! values as 0/1 (index of the level).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HdlmError, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModifierKind {
    Continuous,
    Ordinal,
    Nominal,
    Binary,
}

impl ModifierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModifierKind::Continuous => "continuous",
            ModifierKind::Ordinal => "ordinal",
            ModifierKind::Nominal => "nominal",
            ModifierKind::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModifierSpec {
    pub name: String,
    pub kind: ModifierKind,
    /// Category labels; ordered for ordinal, level order for binary.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ModifierSpec {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ModifierKind::Continuous,
            categories: Vec::new(),
        }
    }

    pub fn binary(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ModifierKind::Binary,
            categories: vec!["0".into(), "1".into()],
        }
    }

    pub fn categorical(name: &str, kind: ModifierKind, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            categories: categories.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Number of categories for discrete kinds, `None` for continuous.
    pub fn levels(&self) -> Option<usize> {
        match self.kind {
            ModifierKind::Continuous => None,
            _ => Some(self.categories.len()),
        }
    }

    /// Encodes a raw CSV cell into the stored code.
    pub fn encode(&self, cell: &str) -> std::result::Result<f64, String> {
        let cell = cell.trim();
        match self.kind {
            ModifierKind::Continuous => match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!("'{cell}' is not a finite number")),
            },
            _ => self
                .categories
                .iter()
                .position(|c| c == cell)
                .map(|i| i as f64)
                .ok_or_else(|| {
                    format!(
                        "category '{cell}' not in {{{}}}",
                        self.categories.join(", ")
                    )
                }),
        }
    }

    /// Inverse of [`encode`](Self::encode) for writing CSVs.
    pub fn decode(&self, code: f64) -> String {
        match self.kind {
            ModifierKind::Continuous => format!("{code}"),
            _ => self.categories[code as usize].clone(),
        }
    }

    fn conforms(&self, code: f64) -> bool {
        match self.kind {
            ModifierKind::Continuous => code.is_finite(),
            _ => {
                code.is_finite()
                    && code >= 0.0
                    && code.fract() == 0.0
                    && (code as usize) < self.categories.len()
            }
        }
    }
}

/// Ordered list of modifiers with their kinds.
///
/// Stored on disk as TOML:
///
/// ```toml
/// [[modifier]]
/// name = "bmi"
/// kind = "continuous"
///
/// [[modifier]]
/// name = "education"
/// kind = "ordinal"
/// categories = ["lt_hs", "hs", "college"]
/// ```
///
/// A binary modifier without `categories` uses the levels `"0"`, `"1"`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModifierSchema {
    #[serde(default, rename = "modifier")]
    pub modifiers: Vec<ModifierSpec>,
}

impl ModifierSchema {
    pub fn new(mut modifiers: Vec<ModifierSpec>) -> Result<Self> {
        for m in &mut modifiers {
            if m.kind == ModifierKind::Binary && m.categories.is_empty() {
                m.categories = vec!["0".into(), "1".into()];
            }
        }
        let schema = Self { modifiers };
        let problems = schema.violations();
        if problems.is_empty() {
            Ok(schema)
        } else {
            Err(HdlmError::InvalidSchema(problems.join("; ")))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: ModifierSchema =
            toml::from_str(text).map_err(|e| HdlmError::InvalidSchema(e.message().to_string()))?;
        Self::new(raw.modifiers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HdlmError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn len(&self) -> usize {
        self.modifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modifiers.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.modifiers.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.modifiers.iter().position(|m| m.name == name)
    }

    /// Keeps only the named modifiers, in the given order.
    pub fn select(&self, names: &[String]) -> Result<(Self, Vec<usize>)> {
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            idx.push(
                self.index_of(n)
                    .ok_or_else(|| HdlmError::InvalidArgument(format!("unknown modifier '{n}'")))?,
            );
        }
        let modifiers = idx.iter().map(|&i| self.modifiers[i].clone()).collect();
        Ok((Self { modifiers }, idx))
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashMap::new();
        for (j, m) in self.modifiers.iter().enumerate() {
            if m.name.is_empty() {
                out.push(format!("modifier {j} has an empty name"));
            }
            if let Some(prev) = seen.insert(m.name.as_str(), j) {
                out.push(format!("duplicate modifier name '{}' ({prev} and {j})", m.name));
            }
            match m.kind {
                ModifierKind::Continuous if !m.categories.is_empty() => {
                    out.push(format!("continuous modifier '{}' lists categories", m.name))
                }
                ModifierKind::Ordinal | ModifierKind::Nominal if m.categories.len() < 2 => out
                    .push(format!(
                        "{} modifier '{}' needs at least 2 categories",
                        m.kind.as_str(),
                        m.name
                    )),
                ModifierKind::Nominal if m.categories.len() > 16 => out.push(format!(
                    "nominal modifier '{}' has more than 16 categories",
                    m.name
                )),
                ModifierKind::Binary if m.categories.len() != 2 => out.push(format!(
                    "binary modifier '{}' needs exactly 2 levels",
                    m.name
                )),
                _ => {}
            }
            let mut cats = m.categories.clone();
            cats.sort();
            cats.dedup();
            if cats.len() != m.categories.len() {
                out.push(format!("modifier '{}' repeats a category", m.name));
            }
        }
        out
    }
}

/// Names binding CSV columns to dataset roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub outcome: String,
    /// Exposure columns in lag order `1..=T`.
    pub exposures: Vec<String>,
    /// Fixed-effect columns (excluding the automatic intercept).
    pub fixed: Vec<String>,
    /// Prepend an all-ones column named `intercept` to the fixed effects.
    pub intercept: bool,
}

/// Complete-case data for one fit.
///
/// Matrices are row-major. Treat as immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    /// `n × lags` exposures.
    pub x: Vec<f64>,
    /// `n × p` fixed-effect design (contains an all-ones column).
    pub z: Vec<f64>,
    /// `n × q` modifier codes.
    pub m: Vec<f64>,
    pub n: usize,
    pub lags: usize,
    pub p: usize,
    pub schema: ModifierSchema,
    pub outcome_name: String,
    pub exposure_names: Vec<String>,
    pub fixed_names: Vec<String>,
}

/// One failed invariant, with where it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl Dataset {
    /// Builds and validates a dataset with default column names.
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        lags: usize,
        z: Vec<f64>,
        p: usize,
        m: Vec<f64>,
        schema: ModifierSchema,
    ) -> Result<Self> {
        let n = y.len();
        let fixed_names = (0..p).map(|k| format!("z{k}")).collect();
        let exposure_names = (1..=lags).map(|t| format!("x{t}")).collect();
        let ds = Dataset {
            y,
            x,
            z,
            m,
            n,
            lags,
            p,
            schema,
            outcome_name: "y".into(),
            exposure_names,
            fixed_names,
        };
        ds.validated()
    }

    pub fn validated(self) -> Result<Self> {
        match validate(&self) {
            Ok(()) => Ok(self),
            Err(v) => Err(HdlmError::InvalidDataset(
                v.iter().map(|x| x.to_string()).collect(),
            )),
        }
    }

    pub fn q(&self) -> usize {
        self.schema.len()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.lags..(i + 1) * self.lags]
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    pub fn m_row(&self, i: usize) -> &[f64] {
        let q = self.q();
        &self.m[i * q..(i + 1) * q]
    }

    /// Column map that reloads exactly what [`write_dataset`] writes.
    pub fn column_map(&self) -> ColumnMap {
        ColumnMap {
            outcome: self.outcome_name.clone(),
            exposures: self.exposure_names.clone(),
            fixed: self.fixed_names.clone(),
            intercept: false,
        }
    }

    /// Restricts the modifier set to the named columns.
    pub fn with_modifiers(&self, names: &[String]) -> Result<Self> {
        let (schema, idx) = self.schema.select(names)?;
        let q = self.q();
        let mut m = Vec::with_capacity(self.n * idx.len());
        for i in 0..self.n {
            for &j in &idx {
                m.push(self.m[i * q + j]);
            }
        }
        Ok(Dataset {
            m,
            schema,
            ..self.clone()
        })
    }

    /// Keeps the listed rows, in order.
    pub fn subset_rows(&self, rows: &[usize]) -> Self {
        let q = self.q();
        let mut out = Dataset {
            y: Vec::with_capacity(rows.len()),
            x: Vec::with_capacity(rows.len() * self.lags),
            z: Vec::with_capacity(rows.len() * self.p),
            m: Vec::with_capacity(rows.len() * q),
            n: rows.len(),
            ..self.clone()
        };
        for &i in rows {
            out.y.push(self.y[i]);
            out.x.extend_from_slice(self.x_row(i));
            out.z.extend_from_slice(self.z_row(i));
            out.m.extend_from_slice(self.m_row(i));
        }
        out
    }
}

/// Checks every dataset invariant; returns all violations found.
pub fn validate(ds: &Dataset) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut push = |loc: &str, msg: String| {
        v.push(Violation {
            location: loc.to_string(),
            message: msg,
        })
    };
    let n = ds.n;
    let q = ds.schema.len();
    if n == 0 {
        push("dataset", "no rows".into());
    }
    if ds.lags < 2 {
        push("x", format!("need at least 2 lags, got {}", ds.lags));
    }
    if ds.y.len() != n {
        push("y", format!("row count mismatch: y has {} values, n = {n}", ds.y.len()));
    }
    if ds.x.len() != n * ds.lags {
        push("x", format!("row count mismatch: x has {} cells, expected {}", ds.x.len(), n * ds.lags));
    }
    if ds.z.len() != n * ds.p {
        push("z", format!("row count mismatch: z has {} cells, expected {}", ds.z.len(), n * ds.p));
    }
    if ds.m.len() != n * q {
        push("m", format!("row count mismatch: m has {} cells, expected {}", ds.m.len(), n * q));
    }
    for problem in ds.schema.violations() {
        push("schema", problem);
    }
    if ds.exposure_names.len() != ds.lags {
        push("x", "exposure name count differs from lag count".into());
    }
    if ds.fixed_names.len() != ds.p {
        push("z", "fixed-effect name count differs from column count".into());
    }
    if let Some(i) = ds.y.iter().position(|v| !v.is_finite()) {
        push(&format!("y[{i}]"), "non-finite value".into());
    }
    if let Some(k) = ds.x.iter().position(|v| !v.is_finite()) {
        push(&format!("x[{}, {}]", k / ds.lags.max(1), k % ds.lags.max(1)), "non-finite value".into());
    }
    if let Some(k) = ds.z.iter().position(|v| !v.is_finite()) {
        push(&format!("z[{}, {}]", k / ds.p.max(1), k % ds.p.max(1)), "non-finite value".into());
    }
    if ds.z.len() == n * ds.p && n > 0 {
        let has_const = (0..ds.p).any(|c| (0..n).all(|i| ds.z[i * ds.p + c] == 1.0));
        if !has_const {
            push("z", "no constant column".into());
        }
    }
    if ds.m.len() == n * q {
        'outer: for (j, spec) in ds.schema.modifiers.iter().enumerate() {
            for i in 0..n {
                let code = ds.m[i * q + j];
                if !spec.conforms(code) {
                    push(
                        &format!("m[{i}, {}]", spec.name),
                        format!("value {code} does not conform to {} kind", spec.kind.as_str()),
                    );
                    continue 'outer;
                }
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Reads a CSV with a header row. Lines starting with `#` are ignored.
///
/// Rows are 1-based in error messages (the first data row is row 1). Any
/// empty mapped cell rejects the file; rows are never imputed.
pub fn load_dataset(path: &Path, schema: &ModifierSchema, map: &ColumnMap) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| HdlmError::io(path, e))?;
    read_dataset(file, schema, map)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    schema: &ModifierSchema,
    map: &ColumnMap,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| HdlmError::InvalidArgument(format!("bad CSV header: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HdlmError::MissingColumn(name.to_string()))
    };
    let y_col = col(&map.outcome)?;
    let x_cols = map.exposures.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = map.fixed.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let m_cols = schema
        .modifiers
        .iter()
        .map(|s| col(&s.name))
        .collect::<Result<Vec<_>>>()?;

    let lags = x_cols.len();
    let p = z_cols.len() + usize::from(map.intercept);
    let (mut y, mut x, mut z, mut m) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| HdlmError::InvalidArgument(format!("row {row}: {e}")))?;
        let num = |c: usize| -> Result<f64> {
            let cell = rec.get(c).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(HdlmError::Unparseable {
                    row,
                    column: headers[c].clone(),
                    value: cell.to_string(),
                }),
            }
        };
        y.push(num(y_col)?);
        for &c in &x_cols {
            x.push(num(c)?);
        }
        if map.intercept {
            z.push(1.0);
        }
        for &c in &z_cols {
            z.push(num(c)?);
        }
        for (spec, &c) in schema.modifiers.iter().zip(&m_cols) {
            let cell = rec.get(c).unwrap_or("");
            if cell.is_empty() {
                return Err(HdlmError::Unparseable {
                    row,
                    column: headers[c].clone(),
                    value: String::new(),
                });
            }
            let code = spec.encode(cell).map_err(|message| HdlmError::SchemaViolation {
                row,
                column: headers[c].clone(),
                message,
            })?;
            m.push(code);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(HdlmError::EmptyDataset);
    }
    let mut fixed_names = Vec::with_capacity(p);
    if map.intercept {
        fixed_names.push("intercept".to_string());
    }
    fixed_names.extend(map.fixed.iter().cloned());
    Dataset {
        y,
        x,
        z,
        m,
        n,
        lags,
        p,
        schema: schema.clone(),
        outcome_name: map.outcome.clone(),
        exposure_names: map.exposures.clone(),
        fixed_names,
    }
    .validated()
}

/// Writes the dataset at full precision; reload with [`Dataset::column_map`].
pub fn write_dataset(ds: &Dataset, path: &Path, header_comment: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_to(ds, &mut buf, header_comment)?;
    fs::write(path, buf).map_err(|e| HdlmError::io(path, e))
}

pub fn write_dataset_to<W: std::io::Write>(
    ds: &Dataset,
    out: W,
    header_comment: Option<&str>,
) -> Result<()> {
    let mut out = out;
    if let Some(c) = header_comment {
        writeln!(out, "# {c}").map_err(|e| HdlmError::io("<output>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| HdlmError::io("<output>", std::io::Error::other(e.to_string()));

    let mut header: Vec<String> = vec![ds.outcome_name.clone()];
    header.extend(ds.exposure_names.iter().cloned());
    header.extend(ds.fixed_names.iter().cloned());
    // modifiers that are also fixed-effect columns are written once
    let extra_mods: Vec<usize> = (0..ds.q())
        .filter(|&j| !header.contains(&ds.schema.modifiers[j].name))
        .collect();
    header.extend(extra_mods.iter().map(|&j| ds.schema.modifiers[j].name.clone()));
    w.write_record(&header).map_err(io_err)?;

    for i in 0..ds.n {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(format!("{}", ds.y[i]));
        rec.extend(ds.x_row(i).iter().map(|v| format!("{v}")));
        rec.extend(ds.z_row(i).iter().map(|v| format!("{v}")));
        rec.extend(
            extra_mods
                .iter()
                .map(|&j| ds.schema.modifiers[j].decode(ds.m_row(i)[j])),
        );
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| HdlmError::io("<output>", e))?;
    Ok(())
}

/// Stationary AR(1) process on the log-exposure scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureProcess {
    pub mean: f64,
    pub sd: f64,
    pub rho: f64,
}

impl Default for ExposureProcess {
    fn default() -> Self {
        // weekly log PM2.5 moments; rho is a modelling choice
        Self {
            mean: 1.97,
            sd: 0.30,
            rho: 0.7,
        }
    }
}

/// Draws an `n × lags` exposure matrix, one stationary AR(1) series per row.
pub fn generate_exposures(n: usize, lags: usize, proc: &ExposureProcess, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || lags < 2 {
        return Err(HdlmError::InvalidArgument(format!(
            "need n >= 1 and T >= 2 (got n = {n}, T = {lags})"
        )));
    }
    if !(0.0..1.0).contains(&proc.rho) {
        return Err(HdlmError::InvalidArgument(format!("rho must lie in [0, 1), got {}", proc.rho)));
    }
    if !(proc.sd > 0.0 && proc.sd.is_finite()) || !proc.mean.is_finite() {
        return Err(HdlmError::InvalidArgument(format!(
            "sd must be positive and mean finite (sd = {}, mean = {})",
            proc.sd, proc.mean
        )));
    }
    let mut rng = rng_from_seed(seed);
    let innov = (1.0 - proc.rho * proc.rho).sqrt();
    let mut x = Vec::with_capacity(n * lags);
    for _ in 0..n {
        let mut e: f64 = StandardNormal.sample(&mut rng);
        x.push(proc.mean + proc.sd * e);
        for _ in 1..lags {
            let eps: f64 = StandardNormal.sample(&mut rng);
            e = proc.rho * e + innov * eps;
            x.push(proc.mean + proc.sd * e);
        }
    }
    Ok(x)
}
