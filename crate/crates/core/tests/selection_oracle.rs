//! Poison-node selection against an exhaustive ranking oracle.

use std::collections::BTreeSet;

use proptest::prelude::*;

use bgc_core::backdoor::{select_poison_nodes, AttackBudget, PoisonBudget, ScoredNode};
use bgc_core::error::Error;
use bgc_core::graph::{generate_sbm_graph, NodeGraph};

/// Recompute the selection from the scored candidates by brute force:
/// per-(class, cluster) descending-score prefix of length ⌊n⌋, then a global
/// descending-score top-up. Ties break toward the lower node id.
fn exhaustive_selection(
    scored: &[ScoredNode],
    classes: &[usize],
    k: usize,
    delta_p: usize,
) -> BTreeSet<usize> {
    let better = |a: &&ScoredNode, b: &&ScoredNode| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.node.cmp(&b.node))
    };
    let per_cluster = delta_p / (classes.len() * k);
    let mut picked: Vec<usize> = Vec::new();
    for &class in classes {
        let clusters: BTreeSet<usize> = scored
            .iter()
            .filter(|s| s.class == class)
            .map(|s| s.cluster)
            .collect();
        for cluster in clusters {
            let mut members: Vec<&ScoredNode> = scored
                .iter()
                .filter(|s| s.class == class && s.cluster == cluster)
                .collect();
            members.sort_by(better);
            picked.extend(members.iter().take(per_cluster).map(|s| s.node));
        }
    }
    if picked.len() < delta_p {
        let mut rest: Vec<&ScoredNode> = scored
            .iter()
            .filter(|s| !picked.contains(&s.node))
            .collect();
        rest.sort_by(better);
        picked.extend(rest.iter().take(delta_p - picked.len()).map(|s| s.node));
    }
    picked.truncate(delta_p);
    picked.into_iter().collect()
}

fn small_graph(seed: u64, classes: usize, train_cap: usize) -> NodeGraph {
    let mut g = generate_sbm_graph(30, classes, 6, 0.3, 0.05, seed).unwrap();
    g.splits.train.truncate(train_cap);
    g
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn selection_matches_exhaustive_ranking(
        seed in 0u64..500,
        classes in 2usize..4,
        train_cap in 2usize..16,
        delta_p in 0usize..9,
        k in 1usize..3,
        target in 0usize..3,
        lambda in prop::sample::select(vec![0.0, 1.0]),
    ) {
        let target = target % classes;
        let g = small_graph(seed, classes, train_cap);
        let budget = AttackBudget {
            poison: PoisonBudget::Count(delta_p),
            clusters_per_class: k,
            target_class: target,
            degree_weight: lambda,
            ..Default::default()
        };
        let candidates = g
            .splits
            .train
            .iter()
            .filter(|&&v| g.labels[v] != target)
            .count();

        match select_poison_nodes(&g, &budget, seed) {
            Ok(sel) => {
                // budget and target-class invariants
                prop_assert!(sel.nodes.len() <= delta_p);
                for &v in &sel.nodes {
                    prop_assert!(g.labels[v] != target, "selected a target-class node");
                    prop_assert!(g.splits.train.contains(&v));
                }
                if delta_p == 0 {
                    prop_assert!(sel.nodes.is_empty());
                    return Ok(());
                }
                // exhaustive oracle over the scored candidates
                let classes_used: Vec<usize> =
                    (0..classes).filter(|&c| c != target).collect();
                let want = exhaustive_selection(&sel.scored, &classes_used, k, delta_p);
                let got: BTreeSet<usize> = sel.nodes.iter().copied().collect();
                prop_assert_eq!(got, want);
                // per-cluster floor rule: every cluster contributes at least
                // min(⌊n⌋, cluster size) nodes
                let per_cluster = delta_p / (classes_used.len() * k);
                for &class in &classes_used {
                    let clusters: BTreeSet<usize> = sel
                        .scored
                        .iter()
                        .filter(|s| s.class == class)
                        .map(|s| s.cluster)
                        .collect();
                    for cluster in clusters {
                        let size = sel
                            .scored
                            .iter()
                            .filter(|s| s.class == class && s.cluster == cluster)
                            .count();
                        let chosen = sel
                            .nodes
                            .iter()
                            .filter(|&&v| {
                                sel.scored
                                    .iter()
                                    .any(|s| s.node == v && s.class == class && s.cluster == cluster)
                            })
                            .count();
                        prop_assert!(
                            chosen >= per_cluster.min(size),
                            "cluster ({class},{cluster}) contributed {chosen} < {}",
                            per_cluster.min(size)
                        );
                    }
                }
            }
            Err(Error::NothingToPoison) => {
                prop_assert!(delta_p > 0 && candidates == 0);
            }
            Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
        }
    }
}
