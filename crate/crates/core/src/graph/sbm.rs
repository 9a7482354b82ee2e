//! Stochastic block model graphs with class-conditional Gaussian features.
//! Desk-scale stand-in when no real bundle is available.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{NodeGraph, Splits};
use crate::rng::Rng;

/// Blocks are contiguous; intra-class edges appear with `p_in`, inter-class
/// with `p_out`. Features are unit-variance Gaussians whose per-class mean is
/// offset by 1.0 along dimension `c mod d`. Splits are 10/20/70 stratified.
pub fn generate_sbm_graph(
    num_nodes: usize,
    classes: usize,
    d: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<NodeGraph> {
    if classes < 2 {
        return Err(Error::InvalidParams("sbm needs at least 2 classes".into()));
    }
    if num_nodes < classes || d == 0 {
        return Err(Error::InvalidParams(
            "sbm needs num_nodes >= classes and d >= 1".into(),
        ));
    }
    if !(p_out >= 0.0 && p_out < p_in && p_in <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }

    let labels: Vec<usize> = (0..num_nodes).map(|i| i * classes / num_nodes).collect();

    let mut rng = Rng::stream(seed, 0xB10C);
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in (i + 1)..num_nodes {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.bernoulli(p) {
                edges.push((i, j));
            }
        }
    }

    let mut feat_rng = Rng::stream(seed, 0xFEA7);
    let mut features = Array2::<f64>::zeros((num_nodes, d));
    for i in 0..num_nodes {
        for j in 0..d {
            features[[i, j]] = feat_rng.normal();
        }
        features[[i, labels[i] % d]] += 1.0;
    }

    let mut split_rng = Rng::stream(seed, 0x5B11);
    let mut splits = Splits::default();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..num_nodes).filter(|&i| labels[i] == c).collect();
        split_rng.shuffle(&mut members);
        let n_train = (members.len() / 10).max(1);
        let n_val = members.len() / 5;
        splits.train.extend(&members[..n_train]);
        splits
            .val
            .extend(&members[n_train..(n_train + n_val).min(members.len())]);
        splits
            .test
            .extend(&members[(n_train + n_val).min(members.len())..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    NodeGraph::from_parts(features, labels, classes, &edges, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_bit_identical() {
        let a = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7).unwrap();
        let b = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7).unwrap();
        assert_eq!(a.adjacency, b.adjacency);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn extreme_probabilities_give_two_cliques() {
        let g = generate_sbm_graph(10, 2, 4, 1.0, 0.0, 3).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let connected = g.adjacency.get(i, j) != 0.0;
                if i == j {
                    assert!(!connected);
                } else {
                    assert_eq!(connected, g.labels[i] == g.labels[j]);
                }
            }
        }
    }

    #[test]
    fn rejects_inverted_probabilities() {
        let err = generate_sbm_graph(30, 2, 4, 0.1, 0.5, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidParams(_)));
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let g = generate_sbm_graph(300, 3, 8, 0.1, 0.01, 5).unwrap();
        let total = g.splits.train.len() + g.splits.val.len() + g.splits.test.len();
        assert_eq!(total, 300);
        assert_eq!(g.splits.train.len(), 30);
        assert_eq!(g.splits.val.len(), 60);
        for c in 0..3 {
            let n = g.splits.train.iter().filter(|&&i| g.labels[i] == c).count();
            assert_eq!(n, 10);
        }
    }

    #[test]
    fn subsample_keep_half_is_binomial() {
        // 3-sigma band over 100 seeds for keep_prob=0.5
        let g = generate_sbm_graph(120, 2, 4, 0.3, 0.05, 9).unwrap();
        let m = g.num_undirected_edges() as f64;
        let sigma = (m * 0.25).sqrt();
        for seed in 0..100 {
            let kept = crate::graph::subsample_edges(&g, 0.5, seed)
                .unwrap()
                .num_undirected_edges() as f64;
            assert!(
                (kept - m / 2.0).abs() <= 3.0 * sigma + 1.0,
                "seed {seed}: kept {kept} of {m}"
            );
        }
    }
}
