//! Brute-force tree helpers shared by the tree tests and the acceptance run.

use hdlm::data::{ModifierKind, ModifierSchema};
use hdlm::rng::rng_from_seed;
use hdlm::trees::modifier::{analyze, propose_modifier_move, EffectLeaves};
use hdlm::trees::{DlmTree, LeafLag, ModifierData, ModifierTree, MoveKind, SplitRule, Tree, TreePriorParams};

/// Grows a random modifier tree through grow proposals.
pub fn random_modifier_tree(data: &ModifierData, params: &TreePriorParams, grows: usize, seed: u64) -> ModifierTree {
    let mut rng = rng_from_seed(seed);
    let leaves = EffectLeaves { len: 1 };
    let mut tree: ModifierTree = Tree::Leaf(LeafLag::Effects(vec![0.0]));
    for _ in 0..grows {
        let an = analyze(&tree, data, params);
        if let Ok((p, _)) = propose_modifier_move(&tree, &an, data, params, MoveKind::Grow, &leaves, &mut rng) {
            tree = p.tree;
        }
    }
    tree
}

/// Leaves whose full root-to-leaf rule path `row` satisfies.
pub fn satisfied_leaves<L>(t: &Tree<SplitRule, L>, row: &[f64]) -> Vec<bool> {
    fn go<L>(t: &Tree<SplitRule, L>, row: &[f64], ok: bool, out: &mut Vec<bool>) {
        match t {
            Tree::Leaf(_) => out.push(ok),
            Tree::Split { rule, left, right } => {
                let l = match *rule {
                    SplitRule::Threshold { modifier, threshold } => row[modifier] < threshold,
                    SplitRule::Binary { modifier } => row[modifier] == 0.0,
                    SplitRule::Subset { modifier, left } => (left >> row[modifier] as u32) & 1 == 1,
                };
                go(left, row, ok && l, out);
                go(right, row, ok && !l, out);
            }
        }
    }
    let mut out = Vec::new();
    go(t, row, true, &mut out);
    out
}

/// Every lag-tree structure on `{1..lags}`.
pub fn all_lag_trees(start: usize, end: usize) -> Vec<DlmTree> {
    let mut out = vec![Tree::Leaf(0.0)];
    for t1 in start + 1..=end {
        for l in all_lag_trees(start, t1 - 1) {
            for r in all_lag_trees(t1, end) {
                out.push(Tree::Split {
                    rule: t1,
                    left: Box::new(l.clone()),
                    right: Box::new(r),
                });
            }
        }
    }
    out
}

/// Admissible rules at a node, enumerated from the schema without the rule
/// space code.
pub fn admissible_rules(schema: &ModifierSchema, data: &ModifierData, rows: &[u32], n_min: usize) -> Vec<SplitRule> {
    let lo = n_min.max(1);
    let ok = |rule: &SplitRule| {
        let left = rows.iter().filter(|&&i| satisfied_leaves(&Tree::Split {
            rule: rule.clone(),
            left: Box::new(Tree::<SplitRule, ()>::Leaf(())),
            right: Box::new(Tree::Leaf(())),
        }, data.row(i as usize))[0]).count();
        left >= lo && rows.len() - left >= lo
    };
    let mut out = Vec::new();
    for (j, spec) in schema.modifiers.iter().enumerate() {
        let mut values: Vec<f64> = rows.iter().map(|&i| data.row(i as usize)[j]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let cands: Vec<SplitRule> = match spec.kind {
            ModifierKind::Continuous | ModifierKind::Ordinal => values
                .iter()
                .map(|&v| SplitRule::Threshold { modifier: j, threshold: v })
                .collect(),
            ModifierKind::Binary => vec![SplitRule::Binary { modifier: j }],
            ModifierKind::Nominal => {
                let present: u32 = values.iter().fold(0, |m, v| m | (1 << *v as u32));
                (1..present).filter(|s| s & present == *s).map(|s| SplitRule::Subset { modifier: j, left: s }).collect()
            }
        };
        out.extend(cands.into_iter().filter(|r| ok(r)));
    }
    out
}

/// Every modifier-tree structure reachable with admissible rules.
pub fn all_modifier_trees(schema: &ModifierSchema, data: &ModifierData, rows: &[u32], n_min: usize) -> Vec<Tree<SplitRule, ()>> {
    let mut out = vec![Tree::Leaf(())];
    for rule in admissible_rules(schema, data, rows, n_min) {
        let (l, r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&i| {
            satisfied_leaves(&Tree::Split {
                rule: rule.clone(),
                left: Box::new(Tree::<SplitRule, ()>::Leaf(())),
                right: Box::new(Tree::Leaf(())),
            }, data.row(i as usize))[0]
        });
        for lt in all_modifier_trees(schema, data, &l, n_min) {
            for rt in all_modifier_trees(schema, data, &r, n_min) {
                out.push(Tree::Split { rule: rule.clone(), left: Box::new(lt.clone()), right: Box::new(rt) });
            }
        }
    }
    out
}
