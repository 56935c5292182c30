//! Tree operations against naive parent-pointer walks on random forests.

use std::collections::BTreeSet;

use fclust_core::{LabelVector, SemanticTree};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random forest: node `i > 0` picks a parent among earlier nodes, or none.
fn random_parents(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|i| {
            if i == 0 || rng.random_bool(0.03) {
                None
            } else {
                // Bias toward recent nodes so some trees get deep.
                let lo = i.saturating_sub(rng.random_range(1..=i.min(12)));
                Some(rng.random_range(lo..i))
            }
        })
        .collect()
}

fn build(parents: &[Option<usize>]) -> SemanticTree {
    let names: Vec<String> = (0..parents.len()).map(|i| format!("n{i}")).collect();
    let edges: Vec<(&str, Option<&str>)> = parents
        .iter()
        .enumerate()
        .map(|(i, p)| (names[i].as_str(), p.map(|p| names[p].as_str())))
        .collect();
    SemanticTree::from_edges(&edges).unwrap()
}

fn naive_depth(parents: &[Option<usize>], mut c: usize) -> u32 {
    let mut d = 1;
    while let Some(p) = parents[c] {
        d += 1;
        c = p;
    }
    d
}

fn naive_ancestor(parents: &[Option<usize>], mut c: usize, d: u32) -> usize {
    while naive_depth(parents, c) > d {
        c = parents[c].unwrap();
    }
    c
}

fn check_tree(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=500);
    let parents = random_parents(&mut rng, n);
    let tree = build(&parents);
    assert_eq!(tree.len(), n);

    for c in 0..n {
        assert_eq!(tree.depth(c), naive_depth(&parents, c));
        let has_child = parents.contains(&Some(c));
        assert_eq!(tree.is_leaf(c), !has_child);
        let mut walk = vec![c];
        let mut cur = c;
        while let Some(p) = parents[cur] {
            walk.push(p);
            cur = p;
        }
        assert_eq!(tree.ancestor_set(c, true).unwrap(), walk);
        assert_eq!(tree.ancestor_set(c, false).unwrap(), walk[1..].to_vec());
    }

    let universe: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
    let leaves = tree.leaf_classes(&universe);
    for &c in &universe {
        let covers_other = universe
            .iter()
            .any(|&o| o != c && tree.ancestor_set(o, false).unwrap().contains(&c));
        assert_eq!(leaves.contains(&c), !covers_other, "class {c}");
    }

    let rows = rng.random_range(1..200);
    let labels = LabelVector::new((0..rows).map(|_| rng.random_range(0..n as u32)).collect(), n).unwrap();
    let max_d = tree.max_depth();
    let mut prev_classes = 0;
    for d2 in 1..=max_d + 1 {
        let (coarse, remap) = tree.coarsen(&labels, d2).unwrap();
        assert_eq!(coarse.len(), labels.len());
        for i in 0..rows {
            let orig = labels.get(i) as usize;
            let want = if tree.depth(orig) > d2 {
                naive_ancestor(&parents, orig, d2)
            } else {
                orig
            };
            assert_eq!(remap.original[coarse.get(i) as usize] as usize, want);
        }
        let classes = coarse.present_classes().len();
        assert!(classes >= prev_classes, "coarsening depth {d2} lost classes");
        prev_classes = classes;

        let m2 = tree.coarsen_map(d2);
        for d1 in 1..=d2 {
            let m1 = tree.coarsen_map(d1);
            for c in 0..n {
                assert_eq!(m1[m2[c]], m1[c], "d1 {d1} d2 {d2} class {c}");
            }
        }
    }
}

#[test]
fn tree_algebra_matches_naive_walks() {
    for seed in 0..100 {
        check_tree(seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn siblings_share_parent(seed in 0u64..10_000, n in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = random_parents(&mut rng, n);
        let tree = build(&parents);
        for c in 0..n {
            let sib = tree.siblings(c).unwrap();
            prop_assert!(!sib.contains(&c));
            for s in sib {
                prop_assert_eq!(parents[s], parents[c]);
            }
            for s in tree.same_depth_classes(c).unwrap() {
                prop_assert_eq!(tree.depth(s), tree.depth(c));
            }
        }
    }

    #[test]
    fn tsv_roundtrip(seed in 0u64..10_000, n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = build(&random_parents(&mut rng, n));
        let again = SemanticTree::parse_tsv(&tree.to_tsv()).unwrap();
        prop_assert_eq!(again.nodes(), tree.nodes());
    }
}
