//! Treed distributed lag functions: binary trees over lag time whose leaves
//! are contiguous segments carrying a constant effect.
//!
//! Lag times are 1-based. An internal node with threshold `t1` sends times
//! `t < t1` left and `t >= t1` right.

use rand::Rng;

use super::{MoveKind, Proposal, SplitPrior, Tree};
use crate::error::{HdlmError, Result};

/// Rule = time threshold; leaf = segment effect.
pub type DlmTree = Tree<usize, f64>;

/// Inclusive range of lag times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }

    /// Number of thresholds that split this segment into two non-empty parts.
    pub fn n_splits(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

impl DlmTree {
    pub fn single(effect: f64) -> Self {
        Tree::Leaf(effect)
    }
}

/// Segment of every node, in pre-order. Invalid thresholds produce empty
/// segments.
pub fn node_segments(tree: &DlmTree, lags: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    fn go(t: &DlmTree, seg: Segment, out: &mut Vec<Segment>) {
        out.push(seg);
        if let Tree::Split { rule, left, right } = t {
            let t1 = *rule;
            go(
                left,
                Segment {
                    start: seg.start,
                    end: t1.saturating_sub(1).min(seg.end),
                },
                out,
            );
            go(
                right,
                Segment {
                    start: t1.max(seg.start),
                    end: seg.end,
                },
                out,
            );
        }
    }
    go(tree, Segment { start: 1, end: lags }, &mut out);
    out
}

/// Leaf segments with their effects, sorted by time.
pub fn dlm_segments(tree: &DlmTree, lags: usize) -> Vec<(Segment, f64)> {
    let segs = node_segments(tree, lags);
    let mut out = Vec::new();
    let mut idx = 0;
    fn go(t: &DlmTree, segs: &[Segment], idx: &mut usize, out: &mut Vec<(Segment, f64)>) {
        let seg = segs[*idx];
        *idx += 1;
        match t {
            Tree::Leaf(e) => out.push((seg, *e)),
            Tree::Split { left, right, .. } => {
                go(left, segs, idx, out);
                go(right, segs, idx, out);
            }
        }
    }
    go(tree, &segs, &mut idx, &mut out);
    out
}

pub fn leaf_segments(tree: &DlmTree, lags: usize) -> Vec<Segment> {
    dlm_segments(tree, lags).into_iter().map(|(s, _)| s).collect()
}

/// Every split threshold lies strictly inside its node's segment.
pub fn is_valid(tree: &DlmTree, lags: usize) -> bool {
    let segs = node_segments(tree, lags);
    tree.nodes().iter().all(|n| !segs[n.index].is_empty())
        && tree.nodes().iter().zip(&segs).all(|(n, s)| {
            if n.is_leaf {
                true
            } else {
                let t1 = *tree.rule_at(n.index).unwrap();
                s.start < t1 && t1 <= s.end
            }
        })
}

/// Piecewise-constant lag curve `θ_1..θ_T`.
pub fn theta(tree: &DlmTree, lags: usize) -> Vec<f64> {
    let mut out = vec![0.0; lags];
    for (seg, e) in dlm_segments(tree, lags) {
        for v in &mut out[seg.start - 1..seg.end] {
            *v = e;
        }
    }
    out
}

/// Log prior of the structure: split/no-split per node and a uniform
/// threshold over the node's available split points. Nodes without
/// available splits are leaves with probability one.
pub fn log_dlm_prior(tree: &DlmTree, lags: usize, split: &SplitPrior) -> f64 {
    let segs = node_segments(tree, lags);
    let mut lp = 0.0;
    for n in tree.nodes() {
        let seg = segs[n.index];
        let avail = seg.n_splits();
        if n.is_leaf {
            if avail > 0 {
                lp += (1.0 - split.split_probability(n.depth)).ln();
            }
        } else {
            let t1 = *tree.rule_at(n.index).unwrap();
            if seg.is_empty() || !(seg.start < t1 && t1 <= seg.end) {
                return f64::NEG_INFINITY;
            }
            lp += split.split_probability(n.depth).ln() - (avail as f64).ln();
        }
    }
    lp
}

/// Draws a structure from the prior; leaf effects are zero.
pub fn sample_dlm_prior<G: Rng + ?Sized>(lags: usize, split: &SplitPrior, rng: &mut G) -> DlmTree {
    fn go<G: Rng + ?Sized>(seg: Segment, depth: usize, split: &SplitPrior, rng: &mut G) -> DlmTree {
        let avail = seg.n_splits();
        if avail == 0 || rng.random::<f64>() >= split.split_probability(depth) {
            return Tree::Leaf(0.0);
        }
        let t1 = seg.start + 1 + rng.random_range(0..avail);
        Tree::Split {
            rule: t1,
            left: Box::new(go(Segment { start: seg.start, end: t1 - 1 }, depth + 1, split, rng)),
            right: Box::new(go(Segment { start: t1, end: seg.end }, depth + 1, split, rng)),
        }
    }
    go(Segment { start: 1, end: lags }, 0, split, rng)
}

fn growable(tree: &DlmTree, segs: &[Segment], split: &SplitPrior) -> Vec<usize> {
    tree.nodes()
        .iter()
        .filter(|n| n.is_leaf && segs[n.index].n_splits() > 0 && split.split_probability(n.depth) > 0.0)
        .map(|n| n.index)
        .collect()
}

fn prunable(tree: &DlmTree) -> Vec<usize> {
    tree.nodes().iter().filter(|n| n.prunable).map(|n| n.index).collect()
}

/// Structural proposal on a lag tree. Swap is not defined for lag trees.
///
/// The returned ratios are `log q(new→old) − log q(old→new)` and
/// `log p(new) − log p(old)`; leaf effects of new leaves are zero and are
/// expected to be integrated out by the caller.
pub fn propose_dlm_move<G: Rng + ?Sized>(
    tree: &DlmTree,
    lags: usize,
    split: &SplitPrior,
    kind: MoveKind,
    rng: &mut G,
) -> Result<Proposal<DlmTree>> {
    let segs = node_segments(tree, lags);
    let old_prior = log_dlm_prior(tree, lags, split);
    let mut new = tree.clone();
    let log_q = match kind {
        MoveKind::Grow => {
            let cand = growable(tree, &segs, split);
            if cand.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let node = cand[rng.random_range(0..cand.len())];
            let seg = segs[node];
            let t1 = seg.start + 1 + rng.random_range(0..seg.n_splits());
            new.grow_at(node, t1, 0.0, 0.0);
            let fwd = -(cand.len() as f64).ln() - (seg.n_splits() as f64).ln();
            let rev = -(prunable(&new).len() as f64).ln();
            rev - fwd
        }
        MoveKind::Prune => {
            let cand = prunable(tree);
            if cand.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let node = cand[rng.random_range(0..cand.len())];
            let seg = segs[node];
            new.prune_at(node, 0.0);
            let new_segs = node_segments(&new, lags);
            let fwd = -(cand.len() as f64).ln();
            let rev = -(growable(&new, &new_segs, split).len() as f64).ln() - (seg.n_splits() as f64).ln();
            rev - fwd
        }
        MoveKind::Change => {
            let internal: Vec<usize> = tree.nodes().iter().filter(|n| !n.is_leaf).map(|n| n.index).collect();
            if internal.is_empty() {
                return Err(HdlmError::NoValidMove);
            }
            let node = internal[rng.random_range(0..internal.len())];
            let seg = segs[node];
            let t1 = seg.start + 1 + rng.random_range(0..seg.n_splits());
            *new.rule_mut(node).unwrap() = t1;
            0.0
        }
        MoveKind::Swap => return Err(HdlmError::NoValidMove),
    };
    let new_prior = log_dlm_prior(&new, lags, split);
    Ok(Proposal {
        tree: new,
        kind,
        log_proposal_ratio: log_q,
        log_prior_ratio: new_prior - old_prior,
    })
}
