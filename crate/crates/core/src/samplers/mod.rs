//! Backfitting MCMC over an ensemble of modifier trees.
//!
//! Each tree update is a blocked Gibbs step on `(structure, σ², δ_a)` given
//! everything else: structure moves use the marginal with `δ_a` and `σ²`
//! integrated out, then `σ²` and `δ_a` are drawn from their exact
//! conditionals. Half-Cauchy scales use inverse-gamma auxiliaries.

mod draws;
mod variance;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use draws::{
    draw_fit, leaf_curve, read_draws, recover_gamma, write_draws, ChainDiagnostics, Draw, DrawTree, DrawsHeader,
    PosteriorDraws, DRAWS_VERSION,
};
pub use variance::{
    phi_bounds, phi_log_likelihood, update_nu, update_phi, update_sigma, update_tau, update_variances, VarianceState,
};

use crate::data::Dataset;
use crate::error::{HdlmError, Result};
use crate::likelihood::{integrated_log_marginal, residualize, CellStats, Marginal, PriorCov, SigmaTreatment, Workspace};
use crate::rng::{derive_seed, rng_from_seed, HdlmRng};
use crate::trees::dlm::{leaf_segments, propose_dlm_move};
use crate::trees::modifier::{
    analyze, assign_subgroup, has_any_move, propose_modifier_move, EffectLeaves, NestedLeaves,
};
use crate::trees::{
    update_rule_weights, DlmTree, LeafLag, ModifierData, ModifierTree, MoveKind, Proposal, Segment, SplitPrior,
    Tree, TreeAnalysis, TreePriorParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Tdlm,
    GpDlm,
    HdlmNested,
    HdlmShared,
    HdlmGp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Tdlm,
        ModelKind::GpDlm,
        ModelKind::HdlmNested,
        ModelKind::HdlmShared,
        ModelKind::HdlmGp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Tdlm => "tdlm",
            ModelKind::GpDlm => "gp-dlm",
            ModelKind::HdlmNested => "hdlm-nested",
            ModelKind::HdlmShared => "hdlm-shared",
            ModelKind::HdlmGp => "hdlm-gp",
        }
    }

    pub fn uses_modifiers(&self) -> bool {
        matches!(self, ModelKind::HdlmNested | ModelKind::HdlmShared | ModelKind::HdlmGp)
    }

    pub fn is_gp(&self) -> bool {
        matches!(self, ModelKind::GpDlm | ModelKind::HdlmGp)
    }

    fn leaves(&self) -> LeafKind {
        match self {
            ModelKind::Tdlm | ModelKind::HdlmNested => LeafKind::Nested,
            ModelKind::HdlmShared => LeafKind::Shared,
            ModelKind::GpDlm | ModelKind::HdlmGp => LeafKind::Gp,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = HdlmError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HdlmError::InvalidArgument(format!("unknown model '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Nested,
    Shared,
    Gp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub model: ModelKind,
    /// Number of modifier trees `A`.
    pub trees: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    pub modifier_split: SplitPrior,
    pub dlm_split: SplitPrior,
    pub n_min: usize,
    /// Dirichlet concentration over modifier weights; `None` means `q`.
    pub xi: Option<f64>,
    /// Initial random-walk step on `log φ`.
    pub phi_step: f64,
    /// Resample modifier weights each sweep.
    pub update_weights: bool,
    /// One status line per 500 iterations on stderr.
    pub progress: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::HdlmNested,
            trees: 20,
            iterations: 10_000,
            burn_in: 5_000,
            thin: 5,
            seed: 1,
            chains: 1,
            modifier_split: SplitPrior::default(),
            dlm_split: SplitPrior::default(),
            n_min: 20,
            xi: None,
            phi_step: 0.3,
            update_weights: true,
            progress: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HdlmError::InvalidConfig(m));
        if self.trees == 0 {
            return bad("trees must be at least 1".into());
        }
        if self.iterations <= self.burn_in {
            return bad(format!(
                "iterations ({}) must exceed burn_in ({})",
                self.iterations, self.burn_in
            ));
        }
        if self.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        if self.chains == 0 {
            return bad("chains must be at least 1".into());
        }
        for (name, s) in [("modifier_split", self.modifier_split), ("dlm_split", self.dlm_split)] {
            if !(0.0..=1.0).contains(&s.alpha) || !(s.beta >= 0.0 && s.beta.is_finite()) {
                return bad(format!("{name}: need alpha in [0, 1] and beta >= 0"));
            }
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return bad("xi must be positive".into());
            }
        }
        if !(self.phi_step > 0.0 && self.phi_step.is_finite()) {
            return bad("phi_step must be positive".into());
        }
        Ok(())
    }

    /// Draws kept per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Modifier-move probabilities: grow, prune, change, swap.
const MODIFIER_MOVE_PROBS: [f64; 4] = [0.3, 0.3, 0.3, 0.1];
const DLM_MOVES: [MoveKind; 3] = [MoveKind::Grow, MoveKind::Prune, MoveKind::Change];
const PHI_ADAPT_EVERY: usize = 50;
const PROGRESS_EVERY: usize = 500;

/// Whether every element of sorted `a` occurs in sorted `b`.
fn is_sorted_subset(a: &[u32], b: &[u32]) -> bool {
    let mut it = b.iter();
    a.iter().all(|x| it.any(|y| y == x))
}

fn pick_modifier_move<G: Rng + ?Sized>(rng: &mut G) -> MoveKind {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in MoveKind::ALL.iter().zip(MODIFIER_MOVE_PROBS) {
        acc += p;
        if u < acc {
            return *k;
        }
    }
    MoveKind::Swap
}

/// Design segments of a leaf.
fn leaf_columns(leaf: &LeafLag, shared: Option<&DlmTree>, lags: usize) -> Vec<Segment> {
    match (leaf, shared) {
        (LeafLag::Nested(d), _) => leaf_segments(d, lags),
        (LeafLag::Effects(_), Some(s)) => leaf_segments(s, lags),
        (LeafLag::Effects(_), None) => (1..=lags).map(|t| Segment { start: t, end: t }).collect(),
    }
}

fn leaf_effects(leaf: &LeafLag) -> Vec<f64> {
    match leaf {
        LeafLag::Nested(d) => d.leaves().into_iter().copied().collect(),
        LeafLag::Effects(v) => v.clone(),
    }
}

fn set_leaf_effects(leaf: &mut LeafLag, effects: &[f64]) {
    match leaf {
        LeafLag::Nested(d) => {
            for (e, v) in d.leaves_mut().into_iter().zip(effects) {
                *e = *v;
            }
        }
        LeafLag::Effects(v) => v.copy_from_slice(effects),
    }
}

/// One modifier tree with its cached per-leaf statistics.
#[derive(Debug, Clone)]
struct TreeState {
    tree: ModifierTree,
    shared: Option<DlmTree>,
    analysis: TreeAnalysis,
    segs: Vec<Vec<Segment>>,
    cells: Vec<CellStats>,
    /// `Σ_b δ_b'K⁻¹δ_b`.
    quad: f64,
    k: usize,
}

impl TreeState {
    fn effects(&self) -> Vec<Vec<f64>> {
        self.tree.leaves().into_iter().map(leaf_effects).collect()
    }
}

struct Chain<'a> {
    ws: &'a Workspace,
    mdata: &'a ModifierData,
    cfg: &'a FitConfig,
    kind: LeafKind,
    modifier_moves: bool,
    prior: TreePriorParams,
    trees: Vec<TreeState>,
    /// Projected full residual `(I − QQ')(y − Σ fits)`.
    resid: Vec<f64>,
    /// Scratch partial residual for the tree being updated.
    r: Vec<f64>,
    var: VarianceState,
    phi: f64,
    phi_step: f64,
    phi_window: (u64, u64),
    rng: HdlmRng,
    rng_weights: HdlmRng,
    diag: ChainDiagnostics,
}

impl<'a> Chain<'a> {
    fn new(ws: &'a Workspace, mdata: &'a ModifierData, cfg: &'a FitConfig, chain: usize) -> Self {
        let kind = cfg.model.leaves();
        let q = mdata.q();
        let mut prior = TreePriorParams::new(q);
        prior.split = cfg.modifier_split;
        prior.n_min = cfg.n_min;
        if let Some(xi) = cfg.xi {
            prior.xi = xi;
        }
        let seed = derive_seed(cfg.seed, chain as u64);
        let lags = ws.lags;
        let mut trees = Vec::with_capacity(cfg.trees);
        for _ in 0..cfg.trees {
            let (leaf, shared) = match kind {
                LeafKind::Nested => (LeafLag::Nested(Tree::Leaf(0.0)), None),
                LeafKind::Shared => (LeafLag::Effects(vec![0.0]), Some(Tree::Leaf(0.0))),
                LeafKind::Gp => (LeafLag::Effects(vec![0.0; lags]), None),
            };
            let tree = Tree::Leaf(leaf);
            let analysis = analyze(&tree, mdata, &prior);
            let segs = vec![leaf_columns(tree.leaves()[0], shared.as_ref(), lags)];
            let cells = vec![ws.cell_stats(analysis.leaf_rows(0), &segs[0], &ws.y_proj)];
            let k = segs[0].len();
            trees.push(TreeState {
                tree,
                shared,
                analysis,
                segs,
                cells,
                quad: 0.0,
                k,
            });
        }
        let sigma2 = (ws.y_proj.iter().map(|v| v * v).sum::<f64>() / ws.n as f64).max(1e-8);
        Chain {
            ws,
            mdata,
            cfg,
            kind,
            modifier_moves: cfg.model.uses_modifiers() && q > 0,
            prior,
            trees,
            resid: ws.y_proj.clone(),
            r: vec![0.0; ws.n],
            var: VarianceState::new(cfg.trees, sigma2),
            phi: 1.0,
            phi_step: cfg.phi_step,
            phi_window: (0, 0),
            rng: rng_from_seed(seed),
            rng_weights: rng_from_seed(derive_seed(seed, 1)),
            diag: ChainDiagnostics {
                chain,
                seed,
                ..Default::default()
            },
        }
    }

    fn cov(&self) -> PriorCov {
        match self.kind {
            LeafKind::Gp => PriorCov::Exponential { phi: self.phi },
            _ => PriorCov::Identity,
        }
    }

    fn scale(&self, a: usize) -> f64 {
        self.var.tau2[a] * self.var.nu2
    }

    /// Inverse-gamma prior of `σ²` given everything except tree `a`.
    fn sigma_prior_excluding(&self, a: usize) -> (f64, f64) {
        let mut shape = 0.5;
        let mut rate = 1.0 / self.var.sigma_aux;
        for (b, t) in self.trees.iter().enumerate() {
            if b != a {
                shape += 0.5 * t.k as f64;
                rate += t.quad / (2.0 * self.scale(b));
            }
        }
        (shape, rate)
    }

    fn marginal(&self, cells: &[&CellStats], rr: f64, a: usize, sigma: SigmaTreatment) -> Result<Marginal> {
        integrated_log_marginal(cells, rr, self.scale(a), self.cov(), sigma, self.ws.n)
    }

    /// Cells for a candidate state. Leaves matching a cached leaf are reused;
    /// a merged leaf is the sum of two cached cells and of a split pair only
    /// the smaller child is computed from rows.
    fn rebuild_cells(
        &self,
        a: usize,
        tree: &ModifierTree,
        shared: Option<&DlmTree>,
        analysis: &TreeAnalysis,
    ) -> (Vec<Vec<Segment>>, Vec<CellStats>) {
        let old = &self.trees[a];
        let lags = self.ws.lags;
        let leaves = tree.leaves();
        let segs: Vec<Vec<Segment>> = leaves.iter().map(|l| leaf_columns(l, shared, lags)).collect();
        let rows: Vec<&[u32]> = (0..leaves.len()).map(|j| analysis.leaf_rows(j)).collect();
        let orows: Vec<&[u32]> = (0..old.cells.len()).map(|i| old.analysis.leaf_rows(i)).collect();
        let mut cells: Vec<Option<CellStats>> = vec![None; leaves.len()];

        for j in 0..leaves.len() {
            if let Some(i) = (0..orows.len()).find(|&i| old.segs[i] == segs[j] && orows[i] == rows[j]) {
                cells[j] = Some(old.cells[i].clone());
                continue;
            }
            let same: Vec<usize> = (0..orows.len()).filter(|&i| old.segs[i] == segs[j]).collect();
            'merge: for (x, &i1) in same.iter().enumerate() {
                for &i2 in &same[x + 1..] {
                    if orows[i1].len() + orows[i2].len() == rows[j].len()
                        && is_sorted_subset(orows[i1], rows[j])
                        && is_sorted_subset(orows[i2], rows[j])
                    {
                        cells[j] = Some(old.cells[i1].combine(&old.cells[i2], 1.0));
                        break 'merge;
                    }
                }
            }
        }
        for j in 0..leaves.len() {
            if cells[j].is_some() {
                continue;
            }
            let parent = (0..orows.len())
                .find(|&i| old.segs[i] == segs[j] && orows[i].len() > rows[j].len() && is_sorted_subset(rows[j], orows[i]));
            let sibling = parent.and_then(|i| {
                (0..leaves.len()).find(|&o| {
                    o != j
                        && cells[o].is_none()
                        && segs[o] == segs[j]
                        && rows[o].len() + rows[j].len() == orows[i].len()
                        && is_sorted_subset(rows[o], orows[i])
                })
            });
            match (parent, sibling) {
                (Some(i), Some(o)) => {
                    let (small, large) = if rows[j].len() <= rows[o].len() { (j, o) } else { (o, j) };
                    let c = self.ws.cell_stats(rows[small], &segs[small], &self.r);
                    cells[large] = Some(old.cells[i].combine(&c, -1.0));
                    cells[small] = Some(c);
                }
                _ => cells[j] = Some(self.ws.cell_stats(rows[j], &segs[j], &self.r)),
            }
        }
        (segs, cells.into_iter().map(|c| c.expect("every leaf filled")).collect())
    }

    fn accept<G: Rng + ?Sized>(log_alpha: f64, rng: &mut G) -> bool {
        metropolis_accept(log_alpha, rng)
    }

    fn propose_structure(
        &mut self,
        a: usize,
        kind: MoveKind,
    ) -> Result<(Proposal<ModifierTree>, TreeAnalysis)> {
        let t = &self.trees[a];
        match self.kind {
            LeafKind::Nested => {
                let f = NestedLeaves {
                    lags: self.ws.lags,
                    split: self.cfg.dlm_split,
                };
                propose_modifier_move(&t.tree, &t.analysis, self.mdata, &self.prior, kind, &f, &mut self.rng)
            }
            LeafKind::Shared => {
                let f = EffectLeaves {
                    len: t.shared.as_ref().map_or(1, |s| s.n_leaves()),
                };
                propose_modifier_move(&t.tree, &t.analysis, self.mdata, &self.prior, kind, &f, &mut self.rng)
            }
            LeafKind::Gp => {
                let f = EffectLeaves { len: self.ws.lags };
                propose_modifier_move(&t.tree, &t.analysis, self.mdata, &self.prior, kind, &f, &mut self.rng)
            }
        }
    }

    /// `r += sign · (I − QQ')·fit_a`.
    fn add_tree_fit(&self, a: usize, r: &mut [f64], sign: f64) {
        let t = &self.trees[a];
        let mut c = vec![0.0; self.ws.p()];
        for (j, (leaf, cell)) in t.tree.leaves().into_iter().zip(&t.cells).enumerate() {
            let e = leaf_effects(leaf);
            self.ws.add_leaf_fit(r, t.analysis.leaf_rows(j), &t.segs[j], &e, sign);
            cell.add_span_coefficients(&e, &mut c);
        }
        self.ws.proj.add_span(r, &c, -sign);
    }

    fn update_tree(&mut self, a: usize) {
        let mut r = std::mem::take(&mut self.r);
        r.copy_from_slice(&self.resid);
        self.add_tree_fit(a, &mut r, 1.0);
        self.r = r;
        {
            let ws = self.ws;
            let t = &mut self.trees[a];
            for (j, cell) in t.cells.iter_mut().enumerate() {
                ws.refresh_ur(t.analysis.leaf_rows(j), &t.segs[j], &self.r, cell);
            }
        }
        let rr: f64 = self.r.iter().map(|v| v * v).sum();
        let (shape, rate) = self.sigma_prior_excluding(a);
        let sig = SigmaTreatment::Integrated { shape, rate };
        let mut cur = match self.marginal(&self.trees[a].cells.iter().collect::<Vec<_>>(), rr, a, sig) {
            Ok(m) => m,
            Err(_) => {
                self.diag.singular += 1;
                return;
            }
        };

        if self.modifier_moves && has_any_move(&self.trees[a].analysis, &self.prior.split) {
            let kind = pick_modifier_move(&mut self.rng);
            self.diag.modifier_proposed[kind.index()] += 1;
            if let Ok((prop, analysis)) = self.propose_structure(a, kind) {
                if prop.log_prior_ratio > f64::NEG_INFINITY {
                    let shared = self.trees[a].shared.clone();
                    let (segs, cells) = self.rebuild_cells(a, &prop.tree, shared.as_ref(), &analysis);
                    match self.marginal(&cells.iter().collect::<Vec<_>>(), rr, a, sig) {
                        Ok(m) => {
                            let la = m.log_marginal - cur.log_marginal + prop.log_prior_ratio + prop.log_proposal_ratio;
                            if Self::accept(la, &mut self.rng) {
                                self.diag.modifier_accepted[kind.index()] += 1;
                                let t = &mut self.trees[a];
                                t.tree = prop.tree;
                                t.analysis = analysis;
                                t.segs = segs;
                                t.cells = cells;
                                cur = m;
                            }
                        }
                        Err(_) => self.diag.singular += 1,
                    }
                }
            }
        }

        match self.kind {
            LeafKind::Nested => {
                let n_leaves = self.trees[a].cells.len();
                for b in 0..n_leaves {
                    let kind = DLM_MOVES[self.rng.random_range(0..3)];
                    let d = match self.trees[a].tree.leaves()[b] {
                        LeafLag::Nested(d) => d.clone(),
                        LeafLag::Effects(_) => unreachable!(),
                    };
                    self.diag.dlm_proposed += 1;
                    let Ok(prop) = propose_dlm_move(&d, self.ws.lags, &self.cfg.dlm_split, kind, &mut self.rng) else {
                        continue;
                    };
                    let t = &self.trees[a];
                    let s = leaf_segments(&prop.tree, self.ws.lags);
                    let cell = self.ws.cell_stats(t.analysis.leaf_rows(b), &s, &self.r);
                    let refs: Vec<&CellStats> =
                        t.cells.iter().enumerate().map(|(i, c)| if i == b { &cell } else { c }).collect();
                    match self.marginal(&refs, rr, a, sig) {
                        Ok(m) => {
                            let la = m.log_marginal - cur.log_marginal + prop.log_prior_ratio + prop.log_proposal_ratio;
                            if Self::accept(la, &mut self.rng) {
                                self.diag.dlm_accepted += 1;
                                let t = &mut self.trees[a];
                                *t.tree.leaves_mut()[b] = LeafLag::Nested(prop.tree);
                                t.segs[b] = s;
                                t.cells[b] = cell;
                                cur = m;
                            }
                        }
                        Err(_) => self.diag.singular += 1,
                    }
                }
            }
            LeafKind::Shared => {
                let kind = DLM_MOVES[self.rng.random_range(0..3)];
                let d = self.trees[a].shared.clone().expect("shared tree");
                self.diag.dlm_proposed += 1;
                if let Ok(prop) = propose_dlm_move(&d, self.ws.lags, &self.cfg.dlm_split, kind, &mut self.rng) {
                    let t = &self.trees[a];
                    let s = leaf_segments(&prop.tree, self.ws.lags);
                    let cells: Vec<CellStats> = (0..t.cells.len())
                        .map(|j| self.ws.cell_stats(t.analysis.leaf_rows(j), &s, &self.r))
                        .collect();
                    match self.marginal(&cells.iter().collect::<Vec<_>>(), rr, a, sig) {
                        Ok(m) => {
                            let la = m.log_marginal - cur.log_marginal + prop.log_prior_ratio + prop.log_proposal_ratio;
                            if Self::accept(la, &mut self.rng) {
                                self.diag.dlm_accepted += 1;
                                let k = s.len();
                                let t = &mut self.trees[a];
                                for leaf in t.tree.leaves_mut() {
                                    *leaf = LeafLag::Effects(vec![0.0; k]);
                                }
                                t.segs = vec![s; cells.len()];
                                t.cells = cells;
                                t.shared = Some(prop.tree);
                                cur = m;
                            }
                        }
                        Err(_) => self.diag.singular += 1,
                    }
                }
            }
            LeafKind::Gp => {}
        }

        // σ² and δ_a from their conditionals given the structure
        let sigma2 = cur.draw_sigma2(shape, rate, self.ws.n, &mut self.rng);
        let delta = cur.draw_effects(sigma2, &mut self.rng);
        self.var.sigma2 = sigma2;
        let cov = self.cov();
        let t = &mut self.trees[a];
        let mut off = 0;
        let mut quad = 0.0;
        for (leaf, cell) in t.tree.leaves_mut().into_iter().zip(&t.cells) {
            let e = &delta[off..off + cell.k];
            set_leaf_effects(leaf, e);
            quad += cov.quad(e);
            off += cell.k;
        }
        t.quad = quad;
        t.k = off;

        let mut resid = std::mem::take(&mut self.resid);
        resid.copy_from_slice(&self.r);
        self.add_tree_fit(a, &mut resid, -1.0);
        self.resid = resid;

        let (tau2, aux) = update_tau(
            self.trees[a].k,
            self.trees[a].quad,
            self.var.nu2,
            self.var.sigma2,
            self.var.tau_aux[a],
            &mut self.rng,
        );
        self.var.tau2[a] = tau2;
        self.var.tau_aux[a] = aux;
    }

    fn sweep(&mut self, iter: usize) {
        for a in 0..self.trees.len() {
            self.update_tree(a);
        }
        let ks: Vec<usize> = self.trees.iter().map(|t| t.k).collect();
        let quads: Vec<f64> = self.trees.iter().map(|t| t.quad).collect();
        let (nu2, nu_aux) = update_nu(&ks, &quads, &self.var.tau2, self.var.sigma2, self.var.nu_aux, &mut self.rng);
        self.var.nu2 = nu2;
        self.var.nu_aux = nu_aux;
        let rss: f64 = self.resid.iter().map(|v| v * v).sum();
        let scaled: f64 = quads.iter().zip(&self.var.tau2).map(|(q, t)| q / (t * self.var.nu2)).sum();
        let (sigma2, sigma_aux) = update_sigma(
            self.ws.n,
            rss,
            ks.iter().sum(),
            scaled,
            self.var.sigma_aux,
            &mut self.rng,
        );
        self.var.sigma2 = sigma2;
        self.var.sigma_aux = sigma_aux;

        if self.modifier_moves && self.cfg.update_weights {
            let mut counts = vec![0usize; self.mdata.q()];
            for t in &self.trees {
                for (rule, _) in t.tree.rules() {
                    counts[rule.modifier()] += 1;
                }
            }
            self.prior.weights = update_rule_weights(&counts, self.prior.xi, &mut self.rng_weights);
            for t in &mut self.trees {
                if !t.tree.is_leaf() {
                    t.analysis = analyze(&t.tree, self.mdata, &self.prior);
                }
            }
        }

        if self.kind == LeafKind::Gp {
            self.update_phi(iter);
        }
    }

    fn update_phi(&mut self, iter: usize) {
        let leaves: Vec<(Vec<f64>, f64)> = self
            .trees
            .iter()
            .enumerate()
            .flat_map(|(a, t)| {
                let s = self.var.tau2[a] * self.var.nu2 * self.var.sigma2;
                t.effects().into_iter().map(move |e| (e, s))
            })
            .collect();
        let (phi, accepted) = update_phi(
            self.phi,
            self.phi_step,
            |phi| phi_log_likelihood(phi, &leaves),
            &mut self.rng,
        );
        self.diag.phi_proposed += 1;
        self.phi_window.0 += 1;
        if accepted {
            self.diag.phi_accepted += 1;
            self.phi_window.1 += 1;
        }
        if phi != self.phi {
            self.phi = phi;
            for t in &mut self.trees {
                let cov = PriorCov::Exponential { phi };
                t.quad = t.effects().iter().map(|e| cov.quad(e)).sum();
            }
        }
        // adapt during burn-in only
        if iter < self.cfg.burn_in && self.phi_window.0 as usize == PHI_ADAPT_EVERY {
            let rate = self.phi_window.1 as f64 / self.phi_window.0 as f64;
            if rate < 0.3 {
                self.phi_step *= 0.8;
            } else if rate > 0.5 {
                self.phi_step *= 1.25;
            }
            self.phi_window = (0, 0);
        }
        self.diag.phi_step = self.phi_step;
    }

    fn snapshot(&self) -> Draw {
        Draw {
            chain: self.diag.chain,
            trees: self
                .trees
                .iter()
                .map(|t| DrawTree {
                    modifier: t.tree.clone(),
                    shared: t.shared.clone(),
                })
                .collect(),
            sigma2: self.var.sigma2,
            nu2: self.var.nu2,
            tau2: self.var.tau2.clone(),
            phi: (self.kind == LeafKind::Gp).then_some(self.phi),
            weights: self.prior.weights.clone(),
            gamma: Vec::new(),
        }
    }

    fn run(mut self) -> (Vec<Draw>, ChainDiagnostics) {
        let cfg = self.cfg;
        let mut out = Vec::with_capacity(cfg.draws_per_chain());
        for iter in 0..cfg.iterations {
            self.sweep(iter);
            if iter >= cfg.burn_in && (iter - cfg.burn_in + 1).is_multiple_of(cfg.thin) {
                out.push(self.snapshot());
            }
            if cfg.progress && (iter + 1) % PROGRESS_EVERY == 0 {
                eprintln!(
                    "chain {} iter {}/{} sigma {:.4} accept {:.3}",
                    self.diag.chain,
                    iter + 1,
                    cfg.iterations,
                    self.var.sigma2.sqrt(),
                    self.diag.mean_acceptance()
                );
            }
        }
        (out, self.diag)
    }
}

/// Metropolis–Hastings decision for a log acceptance ratio; draws a uniform
/// only when the ratio is below one.
pub fn metropolis_accept<G: Rng + ?Sized>(log_alpha: f64, rng: &mut G) -> bool {
    log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha
}

/// Invariant checks gathered by [`audit_chain`] after every sweep.
#[derive(Debug, Clone)]
pub struct ChainAudit {
    pub sweeps: usize,
    /// Largest `‖R − M(y − Σ fits)‖ / ‖My‖`, with fits recomputed from the
    /// trees by routing every row.
    pub max_residual_drift: f64,
    /// Smallest of every `τ²`, `ν²` and `σ²` seen.
    pub min_variance: f64,
    pub phi_range: Option<(f64, f64)>,
    /// Fewest rows in any modifier-tree leaf of any tree with a split.
    pub min_leaf_rows: Option<usize>,
    pub diagnostics: ChainDiagnostics,
}

/// Runs chain 0 of `cfg` and checks the chain state after every sweep.
pub fn audit_chain(ds: &Dataset, modifiers: Option<&[String]>, cfg: &FitConfig) -> Result<ChainAudit> {
    cfg.validate()?;
    let data = model_dataset(ds, cfg.model, modifiers)?;
    let ws = residualize(&data)?;
    let mdata = ModifierData::from_dataset(&data);
    let mut chain = Chain::new(&ws, &mdata, cfg, 0);
    let norm = ws.y_proj.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut audit = ChainAudit {
        sweeps: 0,
        max_residual_drift: 0.0,
        min_variance: f64::INFINITY,
        phi_range: None,
        min_leaf_rows: None,
        diagnostics: ChainDiagnostics::default(),
    };
    for iter in 0..cfg.iterations {
        chain.sweep(iter);
        let draw = chain.snapshot();
        let fit = draw_fit(&draw, &data);
        let mut expect: Vec<f64> = data.y.iter().zip(&fit).map(|(y, f)| y - f).collect();
        ws.proj.residualize(&mut expect);
        let drift = expect.iter().zip(&chain.resid).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
        audit.max_residual_drift = audit.max_residual_drift.max(drift);
        let v = &chain.var;
        let lo = v.tau2.iter().copied().chain([v.nu2, v.sigma2]).fold(f64::INFINITY, f64::min);
        audit.min_variance = audit.min_variance.min(lo);
        if let Some(phi) = draw.phi {
            let (a, b) = audit.phi_range.unwrap_or((phi, phi));
            audit.phi_range = Some((a.min(phi), b.max(phi)));
        }
        for t in &draw.trees {
            if t.modifier.is_leaf() {
                continue;
            }
            let mut counts = vec![0usize; t.modifier.n_leaves()];
            for i in 0..data.n {
                counts[assign_subgroup(&t.modifier, data.m_row(i))] += 1;
            }
            let m = counts.into_iter().min().unwrap_or(0);
            audit.min_leaf_rows = Some(audit.min_leaf_rows.map_or(m, |x| x.min(m)));
        }
        audit.sweeps += 1;
    }
    audit.diagnostics = chain.diag;
    Ok(audit)
}

/// Restricts a dataset to the modifiers a model uses.
pub fn model_dataset(ds: &Dataset, model: ModelKind, modifiers: Option<&[String]>) -> Result<Dataset> {
    if !model.uses_modifiers() {
        return ds.with_modifiers(&[]);
    }
    match modifiers {
        Some(names) => ds.with_modifiers(names),
        None => Ok(ds.clone()),
    }
}

/// Runs all chains and recovers the fixed effects.
pub fn fit(ds: &Dataset, modifiers: Option<&[String]>, cfg: &FitConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let data = model_dataset(ds, cfg.model, modifiers)?;
    let ws = residualize(&data)?;
    let mdata = ModifierData::from_dataset(&data);
    let results: Vec<(Vec<Draw>, ChainDiagnostics)> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| Chain::new(&ws, &mdata, cfg, c).run())
        .collect();
    let mut draws = Vec::new();
    let mut diagnostics = Vec::new();
    for (d, g) in results {
        draws.extend(d);
        diagnostics.push(g);
    }
    let mut post = PosteriorDraws {
        header: DrawsHeader::new(&data, cfg),
        draws,
        fitted: Vec::new(),
        diagnostics,
    };
    recover_gamma(&mut post, &data)?;
    Ok(post)
}
