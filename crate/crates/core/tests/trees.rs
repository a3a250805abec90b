mod common;

use hdlm::data::{Dataset, ModifierKind, ModifierSchema, ModifierSpec};
use hdlm::rng::rng_from_seed;
use hdlm::samplers::{audit_chain, FitConfig, ModelKind};
use hdlm::trees::dlm::{dlm_segments, leaf_segments, log_dlm_prior, propose_dlm_move, sample_dlm_prior};
use hdlm::trees::modifier::{analyze, assign_subgroup, log_tree_prior, propose_modifier_move, EffectLeaves};
use hdlm::trees::{
    update_rule_weights, LeafLag, ModifierData, ModifierTree, MoveKind, SplitPrior, SplitRule, Tree,
    TreePriorParams,
};
use proptest::prelude::*;

use common::invariants::{admissible_rules, all_lag_trees, all_modifier_trees, random_modifier_tree, satisfied_leaves};
use common::{mixed_schema, random_modifiers};

fn shape<R: Clone, L>(t: &Tree<R, L>) -> Tree<R, ()> {
    t.map_leaves(&mut |_| ())
}

fn fixture_data(n: usize, seed: u64) -> (ModifierSchema, ModifierData) {
    let schema = mixed_schema();
    let codes = random_modifiers(&schema, n, &mut rng_from_seed(seed));
    let data = ModifierData::new(codes, n, &schema);
    (schema, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_row_routes_to_exactly_one_leaf(n in 30usize..120, grows in 0usize..12, n_min in 1usize..6, seed in any::<u64>()) {
        let (_, data) = fixture_data(n, seed);
        let mut params = TreePriorParams::new(data.q());
        params.n_min = n_min;
        params.split = SplitPrior { alpha: 0.99, beta: 0.5 };
        let tree = random_modifier_tree(&data, &params, grows, seed ^ 7);
        let an = analyze(&tree, &data, &params);
        let mut seen = vec![0usize; n];
        for leaf in 0..tree.n_leaves() {
            for &i in an.leaf_rows(leaf) {
                seen[i as usize] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for i in 0..n {
            let row = data.row(i);
            let hits = satisfied_leaves(&tree, row);
            prop_assert_eq!(hits.iter().filter(|h| **h).count(), 1);
            let leaf = hits.iter().position(|h| *h).unwrap();
            prop_assert_eq!(assign_subgroup(&tree, row), leaf);
            prop_assert!(an.leaf_rows(leaf).contains(&(i as u32)));
        }
    }

    #[test]
    fn lag_tree_segments_tile_the_lags(lags in 2usize..40, seed in any::<u64>()) {
        let split = SplitPrior { alpha: 0.99, beta: 0.3 };
        let tree = sample_dlm_prior(lags, &split, &mut rng_from_seed(seed));
        let segs = leaf_segments(&tree, lags);
        let covered: Vec<usize> = segs.iter().flat_map(|s| s.start..=s.end).collect();
        prop_assert_eq!(covered, (1..=lags).collect::<Vec<_>>());
        prop_assert!(segs.iter().all(|s| !s.is_empty()));
        prop_assert_eq!(dlm_segments(&tree, lags).len(), tree.n_leaves());
    }

    #[test]
    fn grow_and_prune_invert_each_other(n in 40usize..100, grows in 0usize..8, seed in any::<u64>()) {
        let (_, data) = fixture_data(n, seed);
        let mut params = TreePriorParams::new(data.q());
        params.n_min = 3;
        let tree = random_modifier_tree(&data, &params, grows, seed ^ 3);
        let an = analyze(&tree, &data, &params);
        let leaves = EffectLeaves { len: 1 };
        let mut rng = rng_from_seed(seed ^ 5);
        if let Ok((p, _)) = propose_modifier_move(&tree, &an, &data, &params, MoveKind::Grow, &leaves, &mut rng) {
            let (old, new) = (tree.nodes(), p.tree.nodes());
            let at = (0..old.len()).find(|&i| old[i].is_leaf != new[i].is_leaf).unwrap();
            let mut back = p.tree.clone();
            back.prune_at(at, LeafLag::Effects(vec![0.0])).unwrap();
            prop_assert_eq!(shape(&back), shape(&tree));
        }
        if let Ok((p, _)) = propose_modifier_move(&tree, &an, &data, &params, MoveKind::Prune, &leaves, &mut rng) {
            let (old, new) = (tree.nodes(), p.tree.nodes());
            let at = (0..new.len()).find(|&i| old[i].is_leaf != new[i].is_leaf).unwrap();
            let rule = tree.rule_at(at).unwrap().clone();
            let mut back = p.tree.clone();
            back.grow_at(at, rule, LeafLag::Effects(vec![0.0]), LeafLag::Effects(vec![0.0])).unwrap();
            prop_assert_eq!(shape(&back), shape(&tree));
        }
        for kind in [MoveKind::Change, MoveKind::Swap] {
            if let Ok((p, _)) = propose_modifier_move(&tree, &an, &data, &params, kind, &leaves, &mut rng) {
                prop_assert_eq!(p.tree.n_leaves(), tree.n_leaves());
            }
        }
    }

    #[test]
    fn lag_tree_grow_and_prune_invert_each_other(lags in 3usize..20, seed in any::<u64>()) {
        let split = SplitPrior { alpha: 0.9, beta: 1.0 };
        let mut rng = rng_from_seed(seed);
        let tree = sample_dlm_prior(lags, &split, &mut rng);
        if let Ok(p) = propose_dlm_move(&tree, lags, &split, MoveKind::Grow, &mut rng) {
            let (old, new) = (tree.nodes(), p.tree.nodes());
            let at = (0..old.len()).find(|&i| old[i].is_leaf != new[i].is_leaf).unwrap();
            let mut back = p.tree.clone();
            back.prune_at(at, 0.0).unwrap();
            prop_assert_eq!(shape(&back), shape(&tree));
        }
        if let Ok(p) = propose_dlm_move(&tree, lags, &split, MoveKind::Change, &mut rng) {
            prop_assert_eq!(p.tree.n_leaves(), tree.n_leaves());
        }
        prop_assert!(propose_dlm_move(&tree, lags, &split, MoveKind::Swap, &mut rng).is_err());
    }
}

#[test]
fn lag_tree_prior_sums_to_one_over_all_structures() {
    for split in [SplitPrior::default(), SplitPrior { alpha: 0.5, beta: 1.0 }] {
        let trees = all_lag_trees(1, 4);
        // f(4) = 1 + f(1)f(3) + f(2)f(2) + f(3)f(1) with f(1) = 1, f(2) = 2, f(3) = 5
        assert_eq!(trees.len(), 15);
        assert!(trees.iter().all(|t| t.depth() <= 3));
        let total: f64 = trees.iter().map(|t| log_dlm_prior(t, 4, &split).exp()).sum();
        assert!((total - 1.0).abs() < 1e-10, "total {total}");
    }
}

#[test]
fn modifier_tree_prior_sums_to_one_over_all_structures() {
    let schema = mixed_schema();
    // three rows keep every structure at depth <= 2
    let codes = vec![
        0.1, 0.0, 0.0, 0.0, //
        0.5, 1.0, 1.0, 0.0, //
        0.9, 1.0, 2.0, 2.0,
    ];
    let data = ModifierData::new(codes, 3, &schema);
    for weights in [vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4]] {
        let params = TreePriorParams { weights, n_min: 1, ..TreePriorParams::new(4) };
        let trees = all_modifier_trees(&schema, &data, &data.all_rows(), 1);
        assert!(trees.len() > 10);
        assert!(trees.iter().all(|t| t.depth() <= 2));
        let total: f64 = trees.iter().map(|t| log_tree_prior(t, &data, &params).exp()).sum();
        assert!((total - 1.0).abs() < 1e-10, "total {total}");
    }
}

#[test]
fn grow_proposals_follow_the_rule_prior() {
    let schema = ModifierSchema::new(vec![
        ModifierSpec::continuous("a"),
        ModifierSpec::binary("b"),
        ModifierSpec::categorical("c", ModifierKind::Nominal, &["x", "y", "z"]),
    ])
    .unwrap();
    let n = 12;
    let mut codes = Vec::new();
    for i in 0..n {
        codes.extend([i as f64, (i % 2) as f64, (i % 3) as f64]);
    }
    let data = ModifierData::new(codes, n, &schema);
    let params = TreePriorParams { weights: vec![0.5, 0.3, 0.2], n_min: 2, ..TreePriorParams::new(3) };
    // 3 leaves: a < 4 | (a < 8 | rest)
    let leaf = || Box::new(Tree::Leaf(LeafLag::Effects(vec![0.0])));
    let tree: ModifierTree = Tree::Split {
        rule: SplitRule::Threshold { modifier: 0, threshold: 4.0 },
        left: leaf(),
        right: Box::new(Tree::Split { rule: SplitRule::Threshold { modifier: 0, threshold: 8.0 }, left: leaf(), right: leaf() }),
    };
    let an = analyze(&tree, &data, &params);
    let growable = an.growable(&params.split);
    assert_eq!(growable.len(), 3);

    let mut expected: Vec<(usize, SplitRule, f64)> = Vec::new();
    for &node in &growable {
        let rows = &an.node_rows[node];
        let rules = admissible_rules(&schema, &data, rows, params.n_min);
        let mut per_mod = [0usize; 3];
        for r in &rules {
            per_mod[r.modifier()] += 1;
        }
        let wsum: f64 = (0..3).filter(|&j| per_mod[j] > 0).map(|j| params.weights[j]).sum();
        for r in rules {
            let j = r.modifier();
            expected.push((node, r, params.weights[j] / wsum / per_mod[j] as f64 / growable.len() as f64));
        }
    }
    let total: f64 = expected.iter().map(|e| e.2).sum();
    assert!((total - 1.0).abs() < 1e-12);

    let draws = 100_000;
    let mut counts = vec![0usize; expected.len()];
    let mut rng = rng_from_seed(17);
    let leaves = EffectLeaves { len: 1 };
    for _ in 0..draws {
        let (p, _) = propose_modifier_move(&tree, &an, &data, &params, MoveKind::Grow, &leaves, &mut rng).unwrap();
        let (old, new) = (tree.nodes(), p.tree.nodes());
        let at = (0..old.len()).find(|&i| old[i].is_leaf != new[i].is_leaf).unwrap();
        let old_at = growable.iter().copied().find(|&g| g == at).unwrap();
        let rule = p.tree.rule_at(at).unwrap();
        let k = expected.iter().position(|(nd, r, _)| *nd == old_at && r == rule).expect("rule outside the prior");
        counts[k] += 1;
    }
    for ((_, rule, pr), c) in expected.iter().zip(&counts) {
        let se = (pr * (1.0 - pr) / draws as f64).sqrt();
        let f = *c as f64 / draws as f64;
        assert!((f - pr).abs() <= 3.0 * se + 1e-12, "{rule:?}: {f} vs {pr}");
    }
}

#[test]
fn rule_weight_posterior_mean_is_conjugate() {
    let counts = [10usize, 0, 3, 0];
    let xi = 4.0;
    let draws = 10_000;
    let mut rng = rng_from_seed(8);
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..draws {
        let w = update_rule_weights(&counts, xi, &mut rng);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..4 {
            sum[j] += w[j];
            sq[j] += w[j] * w[j];
        }
    }
    let total: f64 = counts.iter().sum::<usize>() as f64 + xi;
    for j in 0..4 {
        let mean = sum[j] / draws as f64;
        let sd = (sq[j] / draws as f64 - mean * mean).sqrt();
        let expect = (counts[j] as f64 + xi / 4.0) / total;
        assert!((mean - expect).abs() < 4.0 * sd / (draws as f64).sqrt(), "w{j}: {mean} vs {expect}");
    }
    assert!(sum[0] > sum[1] && sum[0] > sum[2]);
}

#[test]
fn accepted_trees_never_violate_leaf_minimum() {
    let ds: Dataset = common::effect_dataset(300, 6, 21);
    for model in [ModelKind::HdlmNested, ModelKind::HdlmShared, ModelKind::HdlmGp] {
        let cfg = FitConfig {
            model,
            trees: 5,
            iterations: 200,
            burn_in: 100,
            thin: 1,
            seed: 4,
            n_min: 25,
            ..FitConfig::default()
        };
        let audit = audit_chain(&ds, None, &cfg).unwrap();
        let seen = audit.min_leaf_rows.expect("some tree split during the run");
        assert!(seen >= 25, "{model}: leaf with {seen} rows");
    }
}
