//! Posterior draws, fixed-effect recovery and the draw-file container.
//!
//! Draw files are line oriented. After an optional `#` comment header:
//!
//! ```text
//! hdlm-draws <version>
//! h <line of the TOML header>        (repeated)
//! fitted <n values>
//! draw <chain>
//! sigma2 <v>
//! nu2 <v>
//! phi <v | ->
//! tau2 <A values>
//! weights <q values>
//! gamma <p values>
//! tree <encoded modifier tree>       (A times, each followed by)
//! shared <encoded lag tree | ->
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file gives
//! back bit-identical draws.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FitConfig, ModelKind};
use crate::data::{Dataset, ModifierSchema};
use crate::error::{HdlmError, Result};
use crate::likelihood::FixedEffectsProjection;
use crate::rng::{derive_seed, rng_from_seed};
use crate::trees::codec::{decode_dlm, decode_modifier, encode_dlm, encode_modifier};
use crate::trees::dlm::{dlm_segments, theta};
use crate::trees::modifier::{assign_subgroup, route};
use crate::trees::{DlmTree, LeafLag, ModifierTree};

pub const DRAWS_VERSION: u32 = 1;

/// Seed stream used for fixed-effect recovery.
const GAMMA_STREAM: u64 = 0x0067_616d_6d61;

#[derive(Debug, Clone, PartialEq)]
pub struct DrawTree {
    pub modifier: ModifierTree,
    /// Lag structure shared by all leaves (shared-tree model only).
    pub shared: Option<DlmTree>,
}

/// One retained ensemble state.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub chain: usize,
    pub trees: Vec<DrawTree>,
    pub sigma2: f64,
    pub nu2: f64,
    pub tau2: Vec<f64>,
    pub phi: Option<f64>,
    pub weights: Vec<f64>,
    /// Fixed effects, filled in by [`recover_gamma`].
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub seed: u64,
    /// Per move kind: grow, prune, change, swap.
    pub modifier_proposed: [u64; 4],
    pub modifier_accepted: [u64; 4],
    pub dlm_proposed: u64,
    pub dlm_accepted: u64,
    pub phi_proposed: u64,
    pub phi_accepted: u64,
    pub phi_step: f64,
    /// Proposals or states rejected as numerically singular.
    pub singular: u64,
}

impl ChainDiagnostics {
    pub fn modifier_acceptance(&self) -> f64 {
        let p: u64 = self.modifier_proposed.iter().sum();
        let a: u64 = self.modifier_accepted.iter().sum();
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }

    pub fn dlm_acceptance(&self) -> f64 {
        if self.dlm_proposed == 0 {
            0.0
        } else {
            self.dlm_accepted as f64 / self.dlm_proposed as f64
        }
    }

    /// Acceptance over all structure moves.
    pub fn mean_acceptance(&self) -> f64 {
        let p = self.modifier_proposed.iter().sum::<u64>() + self.dlm_proposed;
        let a = self.modifier_accepted.iter().sum::<u64>() + self.dlm_accepted;
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }
}

/// What a draw file needs to be interpreted without the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsHeader {
    pub version: String,
    pub n: usize,
    pub lags: usize,
    pub outcome: String,
    pub exposures: Vec<String>,
    pub fixed: Vec<String>,
    pub config: FitConfig,
    pub schema: ModifierSchema,
}

impl DrawsHeader {
    pub fn new(data: &Dataset, cfg: &FitConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            n: data.n,
            lags: data.lags,
            outcome: data.outcome_name.clone(),
            exposures: data.exposure_names.clone(),
            fixed: data.fixed_names.clone(),
            config: cfg.clone(),
            schema: data.schema.clone(),
        }
    }

    pub fn model(&self) -> ModelKind {
        self.config.model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub header: DrawsHeader,
    pub draws: Vec<Draw>,
    /// In-sample posterior mean of `z'γ + x'θ(m)`.
    pub fitted: Vec<f64>,
    pub diagnostics: Vec<ChainDiagnostics>,
}

impl PosteriorDraws {
    pub fn lags(&self) -> usize {
        self.header.lags
    }

    pub fn schema(&self) -> &ModifierSchema {
        &self.header.schema
    }

    /// Restricts a dataset to the fitted modifiers, in fitted order.
    pub fn align(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.lags != self.header.lags {
            return Err(HdlmError::GridMismatch(format!(
                "draws have {} lags, data has {}",
                self.header.lags, ds.lags
            )));
        }
        if ds.p != self.header.fixed.len() {
            return Err(HdlmError::InvalidArgument(format!(
                "draws have {} fixed-effect columns, data has {}",
                self.header.fixed.len(),
                ds.p
            )));
        }
        if ds.schema == self.header.schema {
            return Ok(ds.clone());
        }
        let names: Vec<String> = self.header.schema.names().iter().map(|s| s.to_string()).collect();
        let out = ds.with_modifiers(&names)?;
        if out.schema != self.header.schema {
            return Err(HdlmError::InvalidArgument(
                "modifier definitions differ from the fitted schema".into(),
            ));
        }
        Ok(out)
    }
}

/// Lag curve carried by one leaf.
pub fn leaf_curve(leaf: &LeafLag, shared: Option<&DlmTree>, lags: usize) -> Vec<f64> {
    match (leaf, shared) {
        (LeafLag::Nested(d), _) => theta(d, lags),
        (LeafLag::Effects(v), Some(s)) => {
            let mut out = vec![0.0; lags];
            for ((seg, _), e) in dlm_segments(s, lags).into_iter().zip(v) {
                out[seg.start - 1..seg.end].iter_mut().for_each(|x| *x = *e);
            }
            out
        }
        (LeafLag::Effects(v), None) => v.clone(),
    }
}

impl Draw {
    /// `θ(m)` summed over the ensemble.
    pub fn theta(&self, m: &[f64], lags: usize) -> Vec<f64> {
        let mut out = vec![0.0; lags];
        for t in &self.trees {
            let c = leaf_curve(route(&t.modifier, m), t.shared.as_ref(), lags);
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        out
    }
}

/// `x_i'θ(m_i)` for every row of an aligned dataset.
pub fn draw_fit(draw: &Draw, data: &Dataset) -> Vec<f64> {
    let lags = data.lags;
    let mut f = vec![0.0; data.n];
    for t in &draw.trees {
        let curves: Vec<Vec<f64>> = t
            .modifier
            .leaves()
            .into_iter()
            .map(|l| leaf_curve(l, t.shared.as_ref(), lags))
            .collect();
        for (i, fi) in f.iter_mut().enumerate() {
            let c = &curves[assign_subgroup(&t.modifier, data.m_row(i))];
            *fi += data.x_row(i).iter().zip(c).map(|(x, th)| x * th).sum::<f64>();
        }
    }
    f
}

/// Draws `γ ~ N((Z'Z)⁻¹Z'(y − f), σ²(Z'Z)⁻¹)` for every draw and stores the
/// in-sample fitted means.
pub fn recover_gamma(post: &mut PosteriorDraws, ds: &Dataset) -> Result<()> {
    if post.draws.is_empty() {
        return Err(HdlmError::InvalidArgument("no posterior draws".into()));
    }
    let data = post.align(ds)?;
    let proj = FixedEffectsProjection::new(&data.z, data.n, data.p)?;
    let mut rng = rng_from_seed(derive_seed(post.header.config.seed, GAMMA_STREAM));
    let mut fitted = vec![0.0; data.n];
    let nd = post.draws.len() as f64;
    for d in &mut post.draws {
        let f = draw_fit(d, &data);
        let v: Vec<f64> = data.y.iter().zip(&f).map(|(y, f)| y - f).collect();
        let mean = proj.least_squares(&v);
        let z: Vec<f64> = (0..data.p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dev = proj.apply_coef_map(&z);
        let sd = d.sigma2.sqrt();
        d.gamma = mean.iter().zip(dev).map(|(m, e)| m + sd * e).collect();
        for (i, fi) in fitted.iter_mut().enumerate() {
            let zg: f64 = data.z_row(i).iter().zip(&d.gamma).map(|(a, b)| a * b).sum();
            *fi += (zg + f[i]) / nd;
        }
    }
    post.fitted = fitted;
    Ok(())
}

fn push_floats(out: &mut String, tag: &str, v: &[f64]) {
    out.push_str(tag);
    for x in v {
        let _ = write!(out, " {x}");
    }
    out.push('\n');
}

#[derive(Serialize, Deserialize)]
struct HeaderFile {
    header: DrawsHeader,
    #[serde(default)]
    diagnostics: Vec<ChainDiagnostics>,
}

/// Writes a draw container; `comment` becomes the leading `#` line.
pub fn write_draws<W: Write>(post: &PosteriorDraws, comment: &str, mut w: W) -> Result<()> {
    let io = |e| HdlmError::io("<draws>", e);
    let mut s = String::new();
    let _ = writeln!(s, "# {comment}");
    let _ = writeln!(s, "hdlm-draws {DRAWS_VERSION}");
    let hf = HeaderFile {
        header: post.header.clone(),
        diagnostics: post.diagnostics.clone(),
    };
    let toml_text = toml::to_string(&hf).expect("header serializes");
    for line in toml_text.lines() {
        let _ = writeln!(s, "h {line}");
    }
    push_floats(&mut s, "fitted", &post.fitted);
    w.write_all(s.as_bytes()).map_err(io)?;
    for d in &post.draws {
        s.clear();
        let _ = writeln!(s, "draw {}", d.chain);
        let _ = writeln!(s, "sigma2 {}", d.sigma2);
        let _ = writeln!(s, "nu2 {}", d.nu2);
        match d.phi {
            Some(p) => {
                let _ = writeln!(s, "phi {p}");
            }
            None => s.push_str("phi -\n"),
        }
        push_floats(&mut s, "tau2", &d.tau2);
        push_floats(&mut s, "weights", &d.weights);
        push_floats(&mut s, "gamma", &d.gamma);
        for t in &d.trees {
            let _ = writeln!(s, "tree {}", encode_modifier(&t.modifier));
            match &t.shared {
                Some(sh) => {
                    let _ = writeln!(s, "shared {}", encode_dlm(sh));
                }
                None => s.push_str("shared -\n"),
            }
        }
        s.push_str("end\n");
        w.write_all(s.as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct LineReader<R> {
    inner: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> LineReader<R> {
    fn next(&mut self) -> Result<Option<&str>> {
        loop {
            self.buf.clear();
            let got = self
                .inner
                .read_line(&mut self.buf)
                .map_err(|e| HdlmError::io("<draws>", e))?;
            if got == 0 {
                return Ok(None);
            }
            self.line += 1;
            if !self.buf.starts_with('#') {
                return Ok(Some(self.buf.trim_end_matches(['\n', '\r'])));
            }
        }
    }

    fn err(&self, message: impl Into<String>) -> HdlmError {
        HdlmError::DrawFormat {
            line: self.line,
            message: message.into(),
        }
    }

    fn expect(&mut self, tag: &str) -> Result<String> {
        let line = self.line + 1;
        match self.next()? {
            Some(l) => match l.split_once(' ') {
                Some((t, rest)) if t == tag => Ok(rest.to_string()),
                _ if l == tag => Ok(String::new()),
                _ => Err(self.err(format!("expected '{tag}'"))),
            },
            None => Err(HdlmError::DrawFormat {
                line,
                message: format!("unexpected end of file, expected '{tag}'"),
            }),
        }
    }

    fn floats(&self, s: &str) -> Result<Vec<f64>> {
        s.split_ascii_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad number '{t}'"))))
            .collect()
    }

    fn float(&self, s: &str) -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| self.err(format!("bad number '{s}'")))
    }
}

pub fn read_draws<R: BufRead>(r: R) -> Result<PosteriorDraws> {
    let mut lr = LineReader {
        inner: r,
        line: 0,
        buf: String::new(),
    };
    let magic = lr.expect("hdlm-draws")?;
    if magic.trim() != DRAWS_VERSION.to_string() {
        return Err(lr.err(format!("unsupported draw-file version '{}'", magic.trim())));
    }
    let mut toml_text = String::new();
    let fitted_line;
    loop {
        let Some(l) = lr.next()? else {
            return Err(lr.err("unexpected end of header"));
        };
        if let Some(rest) = l.strip_prefix("h ") {
            toml_text.push_str(rest);
            toml_text.push('\n');
        } else if l == "h" {
            toml_text.push('\n');
        } else if let Some(rest) = l.strip_prefix("fitted") {
            fitted_line = rest.to_string();
            break;
        } else {
            return Err(lr.err("expected header or 'fitted' line"));
        }
    }
    let hf: HeaderFile = toml::from_str(&toml_text).map_err(|e| lr.err(format!("header: {}", e.message())))?;
    let fitted = lr.floats(&fitted_line)?;
    let a = hf.header.config.trees;
    let mut draws = Vec::new();
    loop {
        let chain = match lr.next()? {
            None => break,
            Some(l) => match l.strip_prefix("draw ") {
                Some(c) => c.trim().parse::<usize>().map_err(|_| lr.err("bad chain index"))?,
                None => return Err(lr.err("expected 'draw'")),
            },
        };
        let sigma2 = {
            let s = lr.expect("sigma2")?;
            lr.float(&s)?
        };
        let nu2 = {
            let s = lr.expect("nu2")?;
            lr.float(&s)?
        };
        let phi = {
            let s = lr.expect("phi")?;
            if s.trim() == "-" {
                None
            } else {
                Some(lr.float(&s)?)
            }
        };
        let tau2 = {
            let s = lr.expect("tau2")?;
            lr.floats(&s)?
        };
        let weights = {
            let s = lr.expect("weights")?;
            lr.floats(&s)?
        };
        let gamma = {
            let s = lr.expect("gamma")?;
            lr.floats(&s)?
        };
        let mut trees = Vec::with_capacity(a);
        for _ in 0..a {
            let t = lr.expect("tree")?;
            let modifier = decode_modifier(&t).map_err(|m| lr.err(m))?;
            let s = lr.expect("shared")?;
            let shared = if s.trim() == "-" {
                None
            } else {
                Some(decode_dlm(&s).map_err(|m| lr.err(m))?)
            };
            trees.push(DrawTree { modifier, shared });
        }
        lr.expect("end")?;
        draws.push(Draw {
            chain,
            trees,
            sigma2,
            nu2,
            tau2,
            phi,
            weights,
            gamma,
        });
    }
    Ok(PosteriorDraws {
        header: hf.header,
        draws,
        fitted,
        diagnostics: hf.diagnostics,
    })
}
