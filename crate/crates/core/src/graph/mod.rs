//! Sparse graph representation and graph surgery.
//!
//! [`NodeGraph`] is the immutable host graph: CSR adjacency (symmetric,
//! binary, no stored self-loops), dense features, labels, and train/val/test
//! splits. Trigger attachment and edge subsampling produce new values; the
//! originals are never mutated.

mod bundle;
mod sbm;

pub use bundle::{load_graph_bundle, save_graph_bundle};
pub use sbm::generate_sbm_graph;

use std::borrow::Cow;
use std::sync::OnceLock;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::{hash_mix, Rng};
use crate::sparse::CsrMatrix;

/// Train/val/test node index sets. Disjoint, each a subset of [0, N).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NodeGraph {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Symmetric binary adjacency without self-loops.
    pub adjacency: CsrMatrix,
    /// Dense [num_nodes × d] feature matrix.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub splits: Splits,
}

impl NodeGraph {
    /// Assemble from an undirected edge list. Symmetrizes, deduplicates and
    /// drops self-loops. Validates labels and splits.
    pub fn from_parts(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        undirected_edges: &[(usize, usize)],
        splits: Splits,
    ) -> Result<Self> {
        let num_nodes = features.nrows();
        if labels.len() != num_nodes {
            return Err(Error::ShapeError(format!(
                "labels length {} != num_nodes {}",
                labels.len(),
                num_nodes
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::BundleCorrupt(format!(
                "label {bad} out of range [0, {num_classes})"
            )));
        }
        for set in [&splits.train, &splits.val, &splits.test] {
            if let Some(&bad) = set.iter().find(|&&i| i >= num_nodes) {
                return Err(Error::BundleCorrupt(format!(
                    "split index {bad} out of range [0, {num_nodes})"
                )));
            }
        }
        let mut seen = vec![0u8; num_nodes];
        for set in [&splits.train, &splits.val, &splits.test] {
            for &i in set {
                if seen[i] != 0 {
                    return Err(Error::BundleCorrupt(format!(
                        "node {i} appears in more than one split"
                    )));
                }
                seen[i] = 1;
            }
        }
        let adjacency = symmetric_csr_from_edges(num_nodes, undirected_edges)?;
        Ok(NodeGraph {
            num_nodes,
            num_classes,
            adjacency,
            features,
            labels,
            splits,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Degree without self-loops.
    pub fn degree(&self, v: usize) -> usize {
        self.adjacency.indptr[v + 1] - self.adjacency.indptr[v]
    }

    /// Undirected edges as (u, v) pairs with u < v, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.adjacency.nnz() / 2);
        for u in 0..self.num_nodes {
            let (cols, _) = self.adjacency.row(u);
            for &v in cols {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Stable fingerprint of the structure, used as normalization provenance.
    pub fn structure_id(&self) -> u64 {
        let mut parts = vec![self.num_nodes as u64, self.adjacency.nnz() as u64];
        for (i, &c) in self.adjacency.indices.iter().enumerate().step_by(97) {
            parts.push((i as u64) << 32 | c as u64);
        }
        hash_mix(&parts)
    }

    pub fn view(&self) -> BaseView<'_> {
        BaseView {
            features: Cow::Borrowed(&self.features),
            adjacency: Cow::Borrowed(&self.adjacency),
            labels: Cow::Borrowed(&self.labels),
            num_classes: self.num_classes,
            splits: Cow::Borrowed(&self.splits),
        }
    }
}

fn symmetric_csr_from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<CsrMatrix> {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a >= num_nodes || b >= num_nodes {
            return Err(Error::BundleCorrupt(format!(
                "edge ({a},{b}) out of range for {num_nodes} nodes"
            )));
        }
        if a == b {
            continue; // self-loops are never stored
        }
        pairs.push((a.min(b), a.max(b)));
    }
    pairs.sort_unstable();
    pairs.dedup();
    let triplets = pairs
        .iter()
        .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]);
    Ok(CsrMatrix::from_triplets(num_nodes, num_nodes, triplets))
}

/// D̂^{-1/2}(A+I)D̂^{-1/2} for a (possibly weighted) adjacency.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: CsrMatrix,
    pub provenance: u64,
}

/// Normalization over an explicit CSR adjacency (no self-loops stored).
pub fn normalize_csr(adjacency: &CsrMatrix, provenance: u64) -> NormalizedAdjacency {
    let n = adjacency.n_rows;
    let mut dhat = vec![1.0f64; n]; // the added self-loop
    for r in 0..n {
        let (_, vals) = adjacency.row(r);
        dhat[r] += vals.iter().sum::<f64>();
    }
    let mut triplets = Vec::with_capacity(adjacency.nnz() + n);
    for r in 0..n {
        let (cols, vals) = adjacency.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            triplets.push((r, c, v / (dhat[r] * dhat[c]).sqrt()));
        }
        triplets.push((r, r, 1.0 / dhat[r]));
    }
    NormalizedAdjacency {
        matrix: CsrMatrix::from_triplets(n, n, triplets),
        provenance,
    }
}

pub fn normalize_adjacency(g: &NodeGraph) -> NormalizedAdjacency {
    normalize_csr(&g.adjacency, g.structure_id())
}

/// A generated trigger subgraph: features, binarized adjacency, and the
/// continuous adjacency retained for the straight-through backward path.
#[derive(Debug, Clone)]
pub struct Trigger {
    /// [|g| × d] node features.
    pub features: Array2<f64>,
    /// [|g| × |g|] binary, symmetric, zero-diagonal adjacency.
    pub adjacency: Array2<f64>,
    /// Continuous adjacency values (post-sigmoid), same shape as `adjacency`.
    pub logits: Array2<f64>,
}

impl Trigger {
    pub fn size(&self) -> usize {
        self.features.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.size();
        if self.adjacency.dim() != (g, g) || self.logits.dim() != (g, g) {
            return Err(Error::ShapeError(
                "trigger adjacency/logits must be [|g| × |g|]".into(),
            ));
        }
        for i in 0..g {
            if self.adjacency[[i, i]] != 0.0 {
                return Err(Error::InvalidParams("trigger adjacency has a self-loop".into()));
            }
            for j in 0..g {
                let v = self.adjacency[[i, j]];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidParams("trigger adjacency must be binary".into()));
                }
                if self.adjacency[[i, j]] != self.adjacency[[j, i]] {
                    return Err(Error::InvalidParams("trigger adjacency must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Internal undirected edge count.
    pub fn num_edges(&self) -> usize {
        let g = self.size();
        let mut n = 0;
        for i in 0..g {
            for j in (i + 1)..g {
                if self.adjacency[[i, j]] != 0.0 {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Borrowed view of an attachable base graph (host graph or synthetic graph).
#[derive(Debug, Clone)]
pub struct BaseView<'a> {
    pub features: Cow<'a, Array2<f64>>,
    /// Realized adjacency: binary for host graphs, thresholded weights for
    /// learned synthetic structures. No self-loops.
    pub adjacency: Cow<'a, CsrMatrix>,
    pub labels: Cow<'a, [usize]>,
    pub num_classes: usize,
    pub splits: Cow<'a, Splits>,
}

impl<'a> From<&'a NodeGraph> for BaseView<'a> {
    fn from(g: &'a NodeGraph) -> Self {
        g.view()
    }
}

/// A base graph plus attached triggers.
///
/// Node-id layout: base nodes keep their ids; trigger blocks are appended in
/// ascending anchor order, each block contiguous with trigger node 0 first.
/// Attachment adds exactly one anchor↔trigger-node-0 edge plus the trigger's
/// internal edges.
#[derive(Debug)]
pub struct AugmentedGraph<'a> {
    pub base: BaseView<'a>,
    pub attachments: Vec<(usize, Trigger)>,
    normalized_cache: OnceLock<NormalizedAdjacency>,
}

pub fn attach_trigger<'a>(
    base: impl Into<BaseView<'a>>,
    anchor: usize,
    trigger: Trigger,
) -> Result<AugmentedGraph<'a>> {
    let base = base.into();
    AugmentedGraph::new(base, vec![(anchor, trigger)])
}

impl<'a> AugmentedGraph<'a> {
    pub fn new(base: BaseView<'a>, attachments: Vec<(usize, Trigger)>) -> Result<Self> {
        let n = base.features.nrows();
        let mut attachments = attachments;
        for (anchor, t) in &attachments {
            if *anchor >= n {
                return Err(Error::NodeOutOfRange {
                    node: *anchor,
                    num_nodes: n,
                });
            }
            t.validate()?;
        }
        attachments.sort_by_key(|&(anchor, _)| anchor);
        Ok(AugmentedGraph {
            base,
            attachments,
            normalized_cache: OnceLock::new(),
        })
    }

    /// Add one more attachment, producing a new graph.
    pub fn attach(self, anchor: usize, trigger: Trigger) -> Result<Self> {
        let mut attachments = self.attachments;
        attachments.push((anchor, trigger));
        AugmentedGraph::new(self.base, attachments)
    }

    pub fn base_num_nodes(&self) -> usize {
        self.base.features.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.base_num_nodes() + self.attachments.iter().map(|(_, t)| t.size()).sum::<usize>()
    }

    /// Combined adjacency (base + anchor edges + trigger-internal edges).
    pub fn combined_adjacency(&self) -> CsrMatrix {
        let n_base = self.base_num_nodes();
        let n = self.num_nodes();
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for r in 0..n_base {
            let (cols, vals) = self.base.adjacency.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((r, c, v));
            }
        }
        let mut offset = n_base;
        for (anchor, t) in &self.attachments {
            triplets.push((*anchor, offset, 1.0));
            triplets.push((offset, *anchor, 1.0));
            let g = t.size();
            for i in 0..g {
                for j in 0..g {
                    if t.adjacency[[i, j]] != 0.0 {
                        triplets.push((offset + i, offset + j, t.adjacency[[i, j]]));
                    }
                }
            }
            offset += g;
        }
        CsrMatrix::from_triplets(n, n, triplets)
    }

    pub fn combined_features(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let d = self.base.features.ncols();
        let mut out = Array2::<f64>::zeros((n, d));
        out.slice_mut(ndarray::s![..self.base_num_nodes(), ..])
            .assign(&self.base.features);
        let mut offset = self.base_num_nodes();
        for (_, t) in &self.attachments {
            out.slice_mut(ndarray::s![offset..offset + t.size(), ..])
                .assign(&t.features);
            offset += t.size();
        }
        out
    }

    /// Lazily computed normalized adjacency of the combined graph.
    pub fn normalized(&self) -> &NormalizedAdjacency {
        self.normalized_cache.get_or_init(|| {
            let adj = self.combined_adjacency();
            let prov = hash_mix(&[adj.n_rows as u64, adj.nnz() as u64]);
            normalize_csr(&adj, prov)
        })
    }

    /// Flatten into an owned `NodeGraph`. Trigger nodes receive
    /// `trigger_label` when given, otherwise their anchor's label; they join
    /// no split.
    pub fn materialize(&self, trigger_label: Option<usize>) -> NodeGraph {
        let n = self.num_nodes();
        let mut labels = self.base.labels.to_vec();
        for (anchor, t) in &self.attachments {
            let l = trigger_label.unwrap_or(labels[*anchor]);
            labels.extend(std::iter::repeat(l).take(t.size()));
        }
        NodeGraph {
            num_nodes: n,
            num_classes: self.base.num_classes,
            adjacency: self.combined_adjacency(),
            features: self.combined_features(),
            labels,
            splits: self.base.splits.clone().into_owned(),
        }
    }
}

/// Keep each undirected edge independently with probability `keep_prob`.
pub fn subsample_edges(g: &NodeGraph, keep_prob: f64, seed: u64) -> Result<NodeGraph> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::InvalidParams(format!(
            "keep_prob {keep_prob} outside [0, 1]"
        )));
    }
    let mut rng = Rng::new(seed);
    let kept: Vec<(usize, usize)> = g
        .undirected_edges()
        .into_iter()
        .filter(|_| rng.bernoulli(keep_prob))
        .collect();
    let adjacency = symmetric_csr_from_edges(g.num_nodes, &kept)?;
    Ok(NodeGraph {
        adjacency,
        ..g.clone()
    })
}

/// Nodes within `hops` of `start` (inclusive), sorted ascending.
pub fn khop_neighborhood(adjacency: &CsrMatrix, start: usize, hops: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adjacency.n_rows];
    dist[start] = 0;
    let mut frontier = vec![start];
    for level in 0..hops {
        let mut next = Vec::new();
        for &u in &frontier {
            let (cols, _) = adjacency.row(u);
            for &v in cols {
                if dist[v] == usize::MAX {
                    dist[v] = level + 1;
                    next.push(v);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    let mut out: Vec<usize> = (0..adjacency.n_rows)
        .filter(|&v| dist[v] != usize::MAX)
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn path3() -> NodeGraph {
        NodeGraph::from_parts(
            Array2::zeros((3, 2)),
            vec![0, 0, 1],
            2,
            &[(0, 1), (1, 2)],
            Splits::default(),
        )
        .unwrap()
    }

    fn toy_trigger(size: usize, full: bool) -> Trigger {
        let mut adj = Array2::<f64>::zeros((size, size));
        if full {
            for i in 0..size {
                for j in 0..size {
                    if i != j {
                        adj[[i, j]] = 1.0;
                    }
                }
            }
        }
        Trigger {
            features: Array2::ones((size, 2)),
            logits: adj.clone(),
            adjacency: adj,
        }
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = NodeGraph::from_parts(
            Array2::zeros((2, 1)),
            vec![0, 1],
            2,
            &[(0, 1), (1, 0), (0, 1)],
            Splits::default(),
        )
        .unwrap();
        assert_eq!(g.adjacency.nnz(), 2);
        assert_eq!(g.adjacency.get(0, 1), 1.0);
        assert_eq!(g.adjacency.get(1, 0), 1.0);
    }

    #[test]
    fn normalize_isolated_node_is_identity() {
        let g = NodeGraph::from_parts(
            Array2::zeros((1, 1)),
            vec![0],
            1,
            &[],
            Splits::default(),
        )
        .unwrap();
        let norm = normalize_adjacency(&g);
        assert_eq!(norm.matrix.to_dense(), arr2(&[[1.0]]));
    }

    #[test]
    fn normalize_single_edge() {
        let g = NodeGraph::from_parts(
            Array2::zeros((2, 1)),
            vec![0, 0],
            1,
            &[(0, 1)],
            Splits::default(),
        )
        .unwrap();
        let norm = normalize_adjacency(&g).matrix.to_dense();
        let want = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!((&norm - &want).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn normalize_path_matches_hand_computation() {
        let g = path3();
        let norm = normalize_adjacency(&g).matrix.to_dense();
        // degrees+1: [2, 3, 2]
        let e = 1.0 / (2.0f64 * 3.0).sqrt();
        let want = arr2(&[
            [0.5, e, 0.0],
            [e, 1.0 / 3.0, e],
            [0.0, e, 0.5],
        ]);
        assert!((&norm - &want).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn attach_counts_and_anchor_degree() {
        let g = path3();
        let before = g.degree(1);
        let aug = attach_trigger(&g, 1, toy_trigger(4, false)).unwrap();
        assert_eq!(aug.num_nodes(), 7);
        let adj = aug.combined_adjacency();
        let after = adj.indptr[2] - adj.indptr[1];
        assert_eq!(after, before + 1);
        // all-zero trigger adjacency: only the anchor edge is added
        assert_eq!(adj.nnz(), g.adjacency.nnz() + 2);
    }

    #[test]
    fn fully_connected_trigger_adds_internal_edges() {
        let g = path3();
        let aug = attach_trigger(&g, 0, toy_trigger(4, true)).unwrap();
        let adj = aug.combined_adjacency();
        // 6 internal undirected edges + 1 anchor edge, on top of 2 base edges
        assert_eq!(adj.nnz() / 2, 2 + 6 + 1);
    }

    #[test]
    fn attach_out_of_range_anchor_fails() {
        let g = path3();
        let err = attach_trigger(&g, 3, toy_trigger(2, false)).unwrap_err();
        assert!(matches!(err, Error::NodeOutOfRange { node: 3, .. }));
    }

    #[test]
    fn attach_order_insensitive_for_disjoint_anchors() {
        let g = path3();
        let t1 = toy_trigger(2, true);
        let t2 = toy_trigger(3, false);
        let a = attach_trigger(&g, 0, t1.clone())
            .unwrap()
            .attach(2, t2.clone())
            .unwrap();
        let b = attach_trigger(&g, 2, t2).unwrap().attach(0, t1).unwrap();
        assert_eq!(a.combined_adjacency(), b.combined_adjacency());
        assert_eq!(a.combined_features(), b.combined_features());
    }

    #[test]
    fn subsample_extremes() {
        let g = path3();
        let kept = subsample_edges(&g, 1.0, 5).unwrap();
        assert_eq!(kept.adjacency, g.adjacency);
        let none = subsample_edges(&g, 0.0, 5).unwrap();
        assert_eq!(none.adjacency.nnz(), 0);
    }

    #[test]
    fn khop_levels() {
        let g = path3();
        assert_eq!(khop_neighborhood(&g.adjacency, 0, 0), vec![0]);
        assert_eq!(khop_neighborhood(&g.adjacency, 0, 1), vec![0, 1]);
        assert_eq!(khop_neighborhood(&g.adjacency, 0, 2), vec![0, 1, 2]);
    }

    #[test]
    fn materialize_labels_triggers() {
        let g = path3();
        let aug = attach_trigger(&g, 2, toy_trigger(2, false)).unwrap();
        let m = aug.materialize(Some(0));
        assert_eq!(m.labels, vec![0, 0, 1, 0, 0]);
        let inherit = aug.materialize(None);
        assert_eq!(inherit.labels, vec![0, 0, 1, 1, 1]);
    }
}
