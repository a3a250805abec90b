//! Binary trees over modifiers and over lag time, their priors, and the
//! structural Metropolis–Hastings proposals.

pub mod codec;
pub mod dlm;
pub mod modifier;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

pub use dlm::{DlmTree, Segment};
pub use modifier::{LeafLag, ModifierData, ModifierTree, SplitRule, TreeAnalysis};

/// A binary tree with rules on internal nodes and payloads on leaves.
#[derive(Debug, Clone, PartialEq)]
pub enum Tree<R, L> {
    Leaf(L),
    Split {
        rule: R,
        left: Box<Tree<R, L>>,
        right: Box<Tree<R, L>>,
    },
}

/// Pre-order summary of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeInfo {
    pub index: usize,
    pub depth: usize,
    pub is_leaf: bool,
    /// Internal node whose children are both leaves.
    pub prunable: bool,
    /// Pre-order index of the parent.
    pub parent: Option<usize>,
}

impl<R, L> Tree<R, L> {
    pub fn leaf(payload: L) -> Self {
        Tree::Leaf(payload)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Tree::Leaf(_))
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            Tree::Leaf(_) => 1,
            Tree::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn n_internal(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Split { left, right, .. } => 1 + left.n_internal() + right.n_internal(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Leaf payloads, left to right.
    pub fn leaves(&self) -> Vec<&L> {
        let mut out = Vec::new();
        fn go<'a, R, L>(t: &'a Tree<R, L>, out: &mut Vec<&'a L>) {
            match t {
                Tree::Leaf(l) => out.push(l),
                Tree::Split { left, right, .. } => {
                    go(left, out);
                    go(right, out);
                }
            }
        }
        go(self, &mut out);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut L> {
        let mut out = Vec::new();
        fn go<'a, R, L>(t: &'a mut Tree<R, L>, out: &mut Vec<&'a mut L>) {
            match t {
                Tree::Leaf(l) => out.push(l),
                Tree::Split { left, right, .. } => {
                    go(left, out);
                    go(right, out);
                }
            }
        }
        go(self, &mut out);
        out
    }

    /// Rules with their node depth, in pre-order.
    pub fn rules(&self) -> Vec<(&R, usize)> {
        let mut out = Vec::new();
        fn go<'a, R, L>(t: &'a Tree<R, L>, d: usize, out: &mut Vec<(&'a R, usize)>) {
            if let Tree::Split { rule, left, right } = t {
                out.push((rule, d));
                go(left, d + 1, out);
                go(right, d + 1, out);
            }
        }
        go(self, 0, &mut out);
        out
    }

    /// Parent–child rule pairs (both internal), in pre-order of the child.
    pub fn rule_pairs(&self) -> Vec<(&R, &R)> {
        let mut out = Vec::new();
        fn go<'a, R, L>(t: &'a Tree<R, L>, out: &mut Vec<(&'a R, &'a R)>) {
            if let Tree::Split { rule, left, right } = t {
                for child in [left, right] {
                    if let Tree::Split { rule: r2, .. } = child.as_ref() {
                        out.push((rule, r2));
                    }
                }
                go(left, out);
                go(right, out);
            }
        }
        go(self, &mut out);
        out
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        let mut out = Vec::new();
        fn go<R, L>(t: &Tree<R, L>, d: usize, parent: Option<usize>, out: &mut Vec<NodeInfo>) {
            let index = out.len();
            let prunable = match t {
                Tree::Split { left, right, .. } => left.is_leaf() && right.is_leaf(),
                Tree::Leaf(_) => false,
            };
            out.push(NodeInfo {
                index,
                depth: d,
                is_leaf: t.is_leaf(),
                prunable,
                parent,
            });
            if let Tree::Split { left, right, .. } = t {
                go(left, d + 1, Some(index), out);
                go(right, d + 1, Some(index), out);
            }
        }
        go(self, 0, None, &mut out);
        out
    }

    pub fn node(&self, index: usize) -> Option<&Tree<R, L>> {
        fn go<'a, R, L>(t: &'a Tree<R, L>, target: usize, next: &mut usize) -> Option<&'a Tree<R, L>> {
            if *next == target {
                return Some(t);
            }
            *next += 1;
            if let Tree::Split { left, right, .. } = t {
                if let Some(found) = go(left, target, next) {
                    return Some(found);
                }
                return go(right, target, next);
            }
            None
        }
        let mut next = 0;
        go(self, index, &mut next)
    }

    pub fn node_mut(&mut self, index: usize) -> Option<&mut Tree<R, L>> {
        fn go<'a, R, L>(
            t: &'a mut Tree<R, L>,
            target: usize,
            next: &mut usize,
        ) -> Option<&'a mut Tree<R, L>> {
            if *next == target {
                return Some(t);
            }
            *next += 1;
            match t {
                Tree::Leaf(_) => None,
                Tree::Split { left, right, .. } => {
                    let before = *next;
                    let size = left.n_leaves() + left.n_internal();
                    if target < before + size {
                        go(left, target, next)
                    } else {
                        *next = before + size;
                        go(right, target, next)
                    }
                }
            }
        }
        let mut next = 0;
        go(self, index, &mut next)
    }

    /// Index (left-to-right) of the first leaf under pre-order node `index`.
    pub fn first_leaf_under(&self, index: usize) -> usize {
        let nodes = self.nodes();
        nodes[..index].iter().filter(|n| n.is_leaf).count()
    }

    /// Replaces leaf node `index` by a split with two new leaves; returns the
    /// old payload.
    pub fn grow_at(&mut self, index: usize, rule: R, left: L, right: L) -> Option<L> {
        let node = self.node_mut(index)?;
        if !node.is_leaf() {
            return None;
        }
        let old = std::mem::replace(
            node,
            Tree::Split {
                rule,
                left: Box::new(Tree::Leaf(left)),
                right: Box::new(Tree::Leaf(right)),
            },
        );
        match old {
            Tree::Leaf(l) => Some(l),
            Tree::Split { .. } => unreachable!(),
        }
    }

    /// Collapses a prunable node into a leaf; returns the removed rule and
    /// child payloads.
    pub fn prune_at(&mut self, index: usize, payload: L) -> Option<(R, L, L)> {
        let node = self.node_mut(index)?;
        match node {
            Tree::Split { left, right, .. } if left.is_leaf() && right.is_leaf() => {}
            _ => return None,
        }
        let old = std::mem::replace(node, Tree::Leaf(payload));
        match old {
            Tree::Split { rule, left, right } => match (*left, *right) {
                (Tree::Leaf(l), Tree::Leaf(r)) => Some((rule, l, r)),
                _ => unreachable!(),
            },
            Tree::Leaf(_) => unreachable!(),
        }
    }

    pub fn rule_mut(&mut self, index: usize) -> Option<&mut R> {
        match self.node_mut(index)? {
            Tree::Split { rule, .. } => Some(rule),
            Tree::Leaf(_) => None,
        }
    }

    pub fn rule_at(&self, index: usize) -> Option<&R> {
        match self.node(index)? {
            Tree::Split { rule, .. } => Some(rule),
            Tree::Leaf(_) => None,
        }
    }

    /// Maps leaf payloads, keeping structure and rules.
    pub fn map_leaves<L2>(&self, f: &mut impl FnMut(&L) -> L2) -> Tree<R, L2>
    where
        R: Clone,
    {
        match self {
            Tree::Leaf(l) => Tree::Leaf(f(l)),
            Tree::Split { rule, left, right } => Tree::Split {
                rule: rule.clone(),
                left: Box::new(left.map_leaves(f)),
                right: Box::new(right.map_leaves(f)),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
    Swap,
}

impl MoveKind {
    pub const ALL: [MoveKind; 4] = [MoveKind::Grow, MoveKind::Prune, MoveKind::Change, MoveKind::Swap];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A proposed tree with the log ratios its Metropolis–Hastings step needs.
#[derive(Debug, Clone)]
pub struct Proposal<T> {
    pub tree: T,
    pub kind: MoveKind,
    /// `log q(new → old) − log q(old → new)`.
    pub log_proposal_ratio: f64,
    /// `log p(new) − log p(old)`.
    pub log_prior_ratio: f64,
}

/// Depth-dependent split probability `α (1 + d)^(-β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SplitPrior {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 2.0,
        }
    }
}

impl SplitPrior {
    pub fn split_probability(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

/// Prior over modifier-tree structures and rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreePriorParams {
    pub split: SplitPrior,
    /// Modifier-selection weights, on the simplex.
    pub weights: Vec<f64>,
    /// Total Dirichlet concentration over the weights.
    pub xi: f64,
    /// Minimum number of observations per modifier-tree leaf.
    pub n_min: usize,
}

impl TreePriorParams {
    /// Uniform weights, `ξ = q`, `n_min = 20`.
    pub fn new(q: usize) -> Self {
        Self {
            split: SplitPrior::default(),
            weights: vec![1.0 / q.max(1) as f64; q],
            xi: q.max(1) as f64,
            n_min: 20,
        }
    }

    pub fn split_probability(&self, depth: usize) -> f64 {
        self.split.split_probability(depth)
    }
}

pub fn split_probability(depth: usize, params: &TreePriorParams) -> f64 {
    params.split_probability(depth)
}

/// Draws modifier weights from `Dirichlet(ξ/q + counts)`.
pub fn update_rule_weights<G: Rng + ?Sized>(counts: &[usize], xi: f64, rng: &mut G) -> Vec<f64> {
    let q = counts.len();
    if q == 0 {
        return Vec::new();
    }
    let base = xi / q as f64;
    let mut w: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let g = Gamma::new(base + c as f64, 1.0).expect("positive shape");
            // tiny shapes can underflow to 0
            g.sample(rng).max(f64::MIN_POSITIVE)
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}
