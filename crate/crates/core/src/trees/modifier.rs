//! Modifier trees: binary partitions of the sample by typed splitting rules.
//!
//! The rule prior selects modifier `j` with probability proportional to its
//! weight among modifiers that have at least one admissible rule at the node,
//! then picks uniformly among that modifier's admissible rules. A rule is
//! admissible when both children receive at least `n_min` observations and,
//! for thresholds, the threshold is a value observed at the node. Nodes
//! without admissible rules are leaves with probability one.

use rand::Rng;

use super::dlm::{log_dlm_prior, sample_dlm_prior, DlmTree};
use super::{MoveKind, NodeInfo, Proposal, SplitPrior, Tree, TreePriorParams};
use crate::data::{Dataset, ModifierKind, ModifierSchema};
use crate::error::{HdlmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// Continuous value or ordinal rank: left iff `value < threshold`.
    Threshold { modifier: usize, threshold: f64 },
    /// Nominal: left iff the category bit is set in `left`.
    Subset { modifier: usize, left: u32 },
    /// Binary: left iff the first level.
    Binary { modifier: usize },
}

impl SplitRule {
    pub fn modifier(&self) -> usize {
        match *self {
            SplitRule::Threshold { modifier, .. }
            | SplitRule::Subset { modifier, .. }
            | SplitRule::Binary { modifier } => modifier,
        }
    }

    #[inline]
    pub fn goes_left(&self, row: &[f64]) -> bool {
        match *self {
            SplitRule::Threshold { modifier, threshold } => row[modifier] < threshold,
            SplitRule::Subset { modifier, left } => left & (1u32 << (row[modifier] as u32)) != 0,
            SplitRule::Binary { modifier } => row[modifier] == 0.0,
        }
    }
}

/// Lag representation attached to a modifier-tree leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafLag {
    /// Leaf-specific lag tree with its segment effects.
    Nested(DlmTree),
    /// Effect vector: one entry per shared-tree segment, or one per lag.
    Effects(Vec<f64>),
}

pub type ModifierTree = Tree<SplitRule, LeafLag>;

/// Leaf index (left to right) that a modifier row routes to.
pub fn assign_subgroup<L>(tree: &Tree<SplitRule, L>, m: &[f64]) -> usize {
    let mut node = tree;
    let mut offset = 0;
    loop {
        match node {
            Tree::Leaf(_) => return offset,
            Tree::Split { rule, left, right } => {
                if rule.goes_left(m) {
                    node = left;
                } else {
                    offset += left.n_leaves();
                    node = right;
                }
            }
        }
    }
}

/// Leaf payload that a row routes to.
pub fn route<'a, L>(tree: &'a Tree<SplitRule, L>, m: &[f64]) -> &'a L {
    let mut node = tree;
    loop {
        match node {
            Tree::Leaf(l) => return l,
            Tree::Split { rule, left, right } => {
                node = if rule.goes_left(m) { left } else { right };
            }
        }
    }
}

/// Modifier codes plus the per-modifier facts the rule prior needs.
#[derive(Debug, Clone)]
pub struct ModifierData {
    codes: Vec<f64>,
    n: usize,
    q: usize,
    kinds: Vec<ModifierKind>,
    levels: Vec<usize>,
    /// Continuous modifier with no tied values in the fitting data.
    distinct: Vec<bool>,
}

impl ModifierData {
    pub fn new(codes: Vec<f64>, n: usize, schema: &ModifierSchema) -> Self {
        let q = schema.len();
        assert_eq!(codes.len(), n * q);
        let kinds: Vec<ModifierKind> = schema.modifiers.iter().map(|m| m.kind).collect();
        let levels = schema.modifiers.iter().map(|m| m.categories.len()).collect();
        let distinct = (0..q)
            .map(|j| {
                if kinds[j] != ModifierKind::Continuous {
                    return false;
                }
                let mut v: Vec<f64> = (0..n).map(|i| codes[i * q + j]).collect();
                v.sort_by(|a, b| a.total_cmp(b));
                v.windows(2).all(|w| w[0] < w[1])
            })
            .collect();
        Self {
            codes,
            n,
            q,
            kinds,
            levels,
            distinct,
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::new(ds.m.clone(), ds.n, &ds.schema)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn kind(&self, j: usize) -> ModifierKind {
        self.kinds[j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.codes[i * self.q..(i + 1) * self.q]
    }

    #[inline]
    fn value(&self, i: u32, j: usize) -> f64 {
        self.codes[i as usize * self.q + j]
    }

    pub fn all_rows(&self) -> Vec<u32> {
        (0..self.n as u32).collect()
    }
}

/// Number of admissible rules per modifier at one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSpace {
    pub counts: Vec<usize>,
}

impl RuleSpace {
    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Log prior probability of a rule on modifier `j` (assumed admissible).
    pub fn log_prob(&self, weights: &[f64], j: usize) -> f64 {
        if self.counts[j] == 0 {
            return f64::NEG_INFINITY;
        }
        let total: f64 = self
            .counts
            .iter()
            .zip(weights)
            .filter(|(c, _)| **c > 0)
            .map(|(_, w)| *w)
            .sum();
        (weights[j] / total).ln() - (self.counts[j] as f64).ln()
    }
}

fn lower_count(n_min: usize) -> usize {
    n_min.max(1)
}

/// Admissible thresholds for value-ordered modifiers, ascending.
fn ordered_thresholds(values: &mut [f64], n_min: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    let nb = values.len();
    let lo = lower_count(n_min);
    let mut out = Vec::new();
    let mut k = 0;
    while k < nb {
        let v = values[k];
        // k values are strictly below v
        if k >= lo && nb - k >= lo {
            out.push(v);
        }
        while k < nb && values[k] == v {
            k += 1;
        }
    }
    out
}

fn category_counts(data: &ModifierData, rows: &[u32], j: usize) -> Vec<usize> {
    let mut c = vec![0usize; data.levels[j]];
    for &i in rows {
        c[data.value(i, j) as usize] += 1;
    }
    c
}

fn admissible_subsets(counts: &[usize], n_min: usize) -> Vec<u32> {
    let nb: usize = counts.iter().sum();
    let present: u32 = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .fold(0, |m, (k, _)| m | (1 << k));
    let lo = lower_count(n_min);
    let mut out = Vec::new();
    // proper non-empty submasks of `present`
    let mut sub = (present.wrapping_sub(1)) & present;
    while sub != 0 {
        let left: usize = (0..counts.len()).filter(|k| sub & (1 << k) != 0).map(|k| counts[k]).sum();
        if left >= lo && nb - left >= lo {
            out.push(sub);
        }
        sub = (sub - 1) & present;
    }
    out.sort_unstable();
    out
}

fn modifier_rule_count(data: &ModifierData, rows: &[u32], j: usize, n_min: usize) -> usize {
    let nb = rows.len();
    let lo = lower_count(n_min);
    match data.kinds[j] {
        ModifierKind::Continuous if data.distinct[j] => {
            if nb >= lo + n_min {
                nb - n_min - lo + 1
            } else {
                0
            }
        }
        ModifierKind::Continuous => {
            let mut v: Vec<f64> = rows.iter().map(|&i| data.value(i, j)).collect();
            ordered_thresholds(&mut v, n_min).len()
        }
        ModifierKind::Ordinal => {
            let c = category_counts(data, rows, j);
            let mut below = 0;
            let mut count = 0;
            for &ck in &c {
                if ck > 0 && below >= lo && nb - below >= lo {
                    count += 1;
                }
                below += ck;
            }
            count
        }
        ModifierKind::Binary => {
            let ones = rows.iter().filter(|&&i| data.value(i, j) != 0.0).count();
            usize::from(ones >= lo && nb - ones >= lo)
        }
        ModifierKind::Nominal => admissible_subsets(&category_counts(data, rows, j), n_min).len(),
    }
}

pub fn rule_space(data: &ModifierData, rows: &[u32], n_min: usize) -> RuleSpace {
    RuleSpace {
        counts: (0..data.q).map(|j| modifier_rule_count(data, rows, j, n_min)).collect(),
    }
}

/// Whether `rule` is one of the admissible rules at a node holding `rows`.
pub fn rule_admissible(rule: &SplitRule, data: &ModifierData, rows: &[u32], n_min: usize) -> bool {
    let nb = rows.len();
    let lo = lower_count(n_min);
    match *rule {
        SplitRule::Threshold { modifier: j, threshold } => {
            let mut below = 0;
            let mut present = false;
            for &i in rows {
                let v = data.value(i, j);
                if v < threshold {
                    below += 1;
                } else if v == threshold {
                    present = true;
                }
            }
            present && below >= lo && nb - below >= lo
        }
        SplitRule::Binary { modifier: j } => {
            let ones = rows.iter().filter(|&&i| data.value(i, j) != 0.0).count();
            ones >= lo && nb - ones >= lo
        }
        SplitRule::Subset { modifier: j, left } => {
            admissible_subsets(&category_counts(data, rows, j), n_min).contains(&left)
        }
    }
}

/// Draws a rule from the rule prior at a node; returns it with its log
/// probability.
pub fn sample_rule<G: Rng + ?Sized>(
    space: &RuleSpace,
    data: &ModifierData,
    rows: &[u32],
    weights: &[f64],
    n_min: usize,
    rng: &mut G,
) -> Option<(SplitRule, f64)> {
    let total: f64 = space
        .counts
        .iter()
        .zip(weights)
        .filter(|(c, _)| **c > 0)
        .map(|(_, w)| *w)
        .sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut j = usize::MAX;
    for (k, (&c, &w)) in space.counts.iter().zip(weights).enumerate() {
        if c == 0 {
            continue;
        }
        j = k;
        if u < w {
            break;
        }
        u -= w;
    }
    let count = space.counts[j];
    let pick = rng.random_range(0..count);
    let lo = lower_count(n_min);
    let rule = match data.kinds[j] {
        ModifierKind::Continuous if data.distinct[j] => {
            let mut v: Vec<f64> = rows.iter().map(|&i| data.value(i, j)).collect();
            let k = lo + pick;
            let (_, kth, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
            SplitRule::Threshold {
                modifier: j,
                threshold: *kth,
            }
        }
        ModifierKind::Continuous => {
            let mut v: Vec<f64> = rows.iter().map(|&i| data.value(i, j)).collect();
            SplitRule::Threshold {
                modifier: j,
                threshold: ordered_thresholds(&mut v, n_min)[pick],
            }
        }
        ModifierKind::Ordinal => {
            let c = category_counts(data, rows, j);
            let nb = rows.len();
            let mut below = 0;
            let mut valid = Vec::new();
            for (r, &ck) in c.iter().enumerate() {
                if ck > 0 && below >= lo && nb - below >= lo {
                    valid.push(r as f64);
                }
                below += ck;
            }
            SplitRule::Threshold {
                modifier: j,
                threshold: valid[pick],
            }
        }
        ModifierKind::Binary => SplitRule::Binary { modifier: j },
        ModifierKind::Nominal => SplitRule::Subset {
            modifier: j,
            left: admissible_subsets(&category_counts(data, rows, j), n_min)[pick],
        },
    };
    Some((rule, space.log_prob(weights, j)))
}

/// Per-node rows, rule spaces and log prior of one modifier tree.
#[derive(Debug, Clone)]
pub struct TreeAnalysis {
    pub log_prior: f64,
    pub nodes: Vec<NodeInfo>,
    pub node_rows: Vec<Vec<u32>>,
    pub spaces: Vec<RuleSpace>,
    /// Pre-order index of each leaf, left to right.
    pub leaf_nodes: Vec<usize>,
}

impl TreeAnalysis {
    pub fn leaf_rows(&self, leaf: usize) -> &[u32] {
        &self.node_rows[self.leaf_nodes[leaf]]
    }

    pub fn growable(&self, split: &SplitPrior) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf && !self.spaces[n.index].is_empty() && split.split_probability(n.depth) > 0.0)
            .map(|n| n.index)
            .collect()
    }

    pub fn prunable(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.prunable).map(|n| n.index).collect()
    }

    pub fn internal(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| !n.is_leaf).map(|n| n.index).collect()
    }

    /// (parent, child) pairs of internal nodes.
    pub fn swappable(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .filter(|n| !n.is_leaf)
            .filter_map(|n| n.parent.map(|p| (p, n.index)))
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        self.log_prior > f64::NEG_INFINITY
    }
}

/// Routes `rows` through the tree and evaluates the structure prior.
pub fn analyze<L>(tree: &Tree<SplitRule, L>, data: &ModifierData, params: &TreePriorParams) -> TreeAnalysis {
    analyze_rows(tree, data, params, data.all_rows())
}

pub fn analyze_rows<L>(
    tree: &Tree<SplitRule, L>,
    data: &ModifierData,
    params: &TreePriorParams,
    rows: Vec<u32>,
) -> TreeAnalysis {
    let nodes = tree.nodes();
    let mut node_rows: Vec<Vec<u32>> = Vec::with_capacity(nodes.len());
    fn go<L>(t: &Tree<SplitRule, L>, data: &ModifierData, rows: Vec<u32>, out: &mut Vec<Vec<u32>>) {
        match t {
            Tree::Leaf(_) => out.push(rows),
            Tree::Split { rule, left, right } => {
                let (l, r): (Vec<u32>, Vec<u32>) =
                    rows.iter().partition(|&&i| rule.goes_left(data.row(i as usize)));
                out.push(rows);
                go(left, data, l, out);
                go(right, data, r, out);
            }
        }
    }
    go(tree, data, rows, &mut node_rows);

    let spaces: Vec<RuleSpace> = node_rows
        .iter()
        .map(|rows| rule_space(data, rows, params.n_min))
        .collect();
    let mut log_prior = 0.0;
    for n in &nodes {
        let space = &spaces[n.index];
        if n.is_leaf {
            if !space.is_empty() {
                log_prior += (1.0 - params.split_probability(n.depth)).ln();
            }
        } else {
            let rule = tree.rule_at(n.index).unwrap();
            if !rule_admissible(rule, data, &node_rows[n.index], params.n_min) {
                log_prior = f64::NEG_INFINITY;
                break;
            }
            log_prior += params.split_probability(n.depth).ln() + space.log_prob(&params.weights, rule.modifier());
        }
    }
    let leaf_nodes = nodes.iter().filter(|n| n.is_leaf).map(|n| n.index).collect();
    TreeAnalysis {
        log_prior,
        nodes,
        node_rows,
        spaces,
        leaf_nodes,
    }
}

pub fn log_tree_prior<L>(tree: &Tree<SplitRule, L>, data: &ModifierData, params: &TreePriorParams) -> f64 {
    analyze(tree, data, params).log_prior
}

/// How new modifier-tree leaves get their lag representation.
pub trait LeafFactory {
    fn fresh<G: Rng + ?Sized>(&self, rng: &mut G) -> LeafLag;
    /// Log density of `fresh` producing `leaf` (0 for deterministic leaves).
    fn log_density(&self, leaf: &LeafLag) -> f64;
}

/// Fresh lag trees drawn from the lag-tree prior.
#[derive(Debug, Clone, Copy)]
pub struct NestedLeaves {
    pub lags: usize,
    pub split: SplitPrior,
}

impl LeafFactory for NestedLeaves {
    fn fresh<G: Rng + ?Sized>(&self, rng: &mut G) -> LeafLag {
        LeafLag::Nested(sample_dlm_prior(self.lags, &self.split, rng))
    }

    fn log_density(&self, leaf: &LeafLag) -> f64 {
        match leaf {
            LeafLag::Nested(d) => log_dlm_prior(d, self.lags, &self.split),
            LeafLag::Effects(_) => 0.0,
        }
    }
}

/// Zero effect vectors of a fixed length.
#[derive(Debug, Clone, Copy)]
pub struct EffectLeaves {
    pub len: usize,
}

impl LeafFactory for EffectLeaves {
    fn fresh<G: Rng + ?Sized>(&self, _rng: &mut G) -> LeafLag {
        LeafLag::Effects(vec![0.0; self.len])
    }

    fn log_density(&self, _leaf: &LeafLag) -> f64 {
        0.0
    }
}

/// Structural proposal on a modifier tree.
///
/// `current` must be the analysis of `tree` under `params`. Grow draws the
/// rule from the rule prior and gives both children fresh leaves; prune gives
/// the merged node a fresh leaf; change redraws one rule from the rule prior;
/// swap exchanges the rules of an internal parent–child pair. The returned
/// ratios include the densities of fresh and discarded leaves, which cancel
/// between prior and proposal when leaves come from their prior.
pub fn propose_modifier_move<F: LeafFactory, G: Rng + ?Sized>(
    tree: &ModifierTree,
    current: &TreeAnalysis,
    data: &ModifierData,
    params: &TreePriorParams,
    kind: MoveKind,
    leaves: &F,
    rng: &mut G,
) -> Result<(Proposal<ModifierTree>, TreeAnalysis)> {
    let mut new = tree.clone();
    let (log_q, leaf_prior_delta, analysis) = match kind {
        MoveKind::Grow => {
            let cand = current.growable(&params.split);
            if cand.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let node = cand[rng.random_range(0..cand.len())];
            let rows = &current.node_rows[node];
            let (rule, lp_rule) =
                sample_rule(&current.spaces[node], data, rows, &params.weights, params.n_min, rng)
                    .ok_or(HdlmError::NoValidMove)?;
            let left = leaves.fresh(rng);
            let right = leaves.fresh(rng);
            let (fl, fr) = (leaves.log_density(&left), leaves.log_density(&right));
            let old = new.grow_at(node, rule, left, right).expect("leaf");
            let fo = leaves.log_density(&old);
            let analysis = analyze(&new, data, params);
            let fwd = -(cand.len() as f64).ln() + lp_rule + fl + fr;
            let rev = -(analysis.prunable().len() as f64).ln() + fo;
            (rev - fwd, fl + fr - fo, analysis)
        }
        MoveKind::Prune => {
            let cand = current.prunable();
            if cand.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let node = cand[rng.random_range(0..cand.len())];
            let merged = leaves.fresh(rng);
            let fm = leaves.log_density(&merged);
            let (rule, l, r) = new.prune_at(node, merged).expect("prunable");
            let (fl, fr) = (leaves.log_density(&l), leaves.log_density(&r));
            let analysis = analyze(&new, data, params);
            let lp_rule = analysis.spaces[node].log_prob(&params.weights, rule.modifier());
            let fwd = -(cand.len() as f64).ln() + fm;
            let rev = -(analysis.growable(&params.split).len() as f64).ln() + lp_rule + fl + fr;
            (rev - fwd, fm - fl - fr, analysis)
        }
        MoveKind::Change => {
            let cand = current.internal();
            if cand.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let node = cand[rng.random_range(0..cand.len())];
            let space = &current.spaces[node];
            let old_rule = tree.rule_at(node).unwrap().clone();
            let (rule, lp_new) = sample_rule(
                space,
                data,
                &current.node_rows[node],
                &params.weights,
                params.n_min,
                rng,
            )
            .ok_or(HdlmError::NoValidMove)?;
            let lp_old = space.log_prob(&params.weights, old_rule.modifier());
            *new.rule_mut(node).unwrap() = rule;
            let analysis = analyze(&new, data, params);
            (lp_old - lp_new, 0.0, analysis)
        }
        MoveKind::Swap => {
            let cand = current.swappable();
            if cand.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let (parent, child) = cand[rng.random_range(0..cand.len())];
            let rp = tree.rule_at(parent).unwrap().clone();
            let rc = tree.rule_at(child).unwrap().clone();
            *new.rule_mut(parent).unwrap() = rc;
            *new.rule_mut(child).unwrap() = rp;
            let analysis = analyze(&new, data, params);
            (0.0, 0.0, analysis)
        }
    };
    let log_prior_ratio = analysis.log_prior - current.log_prior + leaf_prior_delta;
    Ok((
        Proposal {
            tree: new,
            kind,
            log_proposal_ratio: log_q,
            log_prior_ratio,
        },
        analysis,
    ))
}

/// Whether any structural move can be proposed at all.
pub fn has_any_move(current: &TreeAnalysis, split: &SplitPrior) -> bool {
    !current.growable(split).is_empty() || !current.internal().is_empty()
}
