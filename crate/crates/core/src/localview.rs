//! Local augmented subgraphs around one anchor node.
//!
//! Predictions of a k-propagation model at node v depend only on v's k-hop
//! neighborhood, so trigger attachment is evaluated on a dense local view
//! instead of the full graph. Normalization coefficients use *global*
//! augmented degrees, which keeps the local computation exactly equal to the
//! full-graph one.

use ndarray::Array2;

use crate::graph::{khop_neighborhood, Trigger};
use crate::sparse::CsrMatrix;

#[derive(Debug)]
pub struct LocalView {
    /// Sorted global ids of the base nodes in the view.
    pub nodes: Vec<usize>,
    pub anchor_local: usize,
    pub n_base: usize,
    /// Base count plus trigger size.
    pub n_total: usize,
    /// Constant indicator part: base edges, self-loops everywhere, and the
    /// anchor↔trigger-node-0 edge. Trigger-internal entries stay zero.
    pub a_const: Array2<f64>,
    /// 1/√(d̂_i d̂_j) over the augmented graph, from global degrees. Trigger
    /// degrees come from the binarized adjacency (treated as constants on the
    /// straight-through path).
    pub coeff: Array2<f64>,
}

impl LocalView {
    /// `trigger_adj` is the binarized [Δg × Δg] adjacency, or `None` for a
    /// clean (un-attached) view.
    pub fn build(
        adjacency: &CsrMatrix,
        anchor: usize,
        trigger_adj: Option<&Array2<f64>>,
        hops: usize,
    ) -> LocalView {
        let nodes = khop_neighborhood(adjacency, anchor, hops);
        let n_base = nodes.len();
        let tsize = trigger_adj.map_or(0, |t| t.nrows());
        let n_total = n_base + tsize;
        let anchor_local = nodes.binary_search(&anchor).expect("anchor in view");

        let mut local_of = std::collections::HashMap::with_capacity(n_base);
        for (l, &g) in nodes.iter().enumerate() {
            local_of.insert(g, l);
        }

        let mut a_const = Array2::<f64>::zeros((n_total, n_total));
        for i in 0..n_total {
            a_const[[i, i]] = 1.0; // renormalization self-loop
        }
        for (l, &g) in nodes.iter().enumerate() {
            let (cols, vals) = adjacency.row(g);
            for (&c, &v) in cols.iter().zip(vals) {
                if let Some(&lc) = local_of.get(&c) {
                    a_const[[l, lc]] = v;
                }
            }
        }
        if tsize > 0 {
            a_const[[anchor_local, n_base]] = 1.0;
            a_const[[n_base, anchor_local]] = 1.0;
        }

        // Global augmented degrees (+1 self-loop).
        let mut dhat = vec![0.0f64; n_total];
        for (l, &g) in nodes.iter().enumerate() {
            let (_, vals) = adjacency.row(g);
            dhat[l] = 1.0 + vals.iter().sum::<f64>();
        }
        if let Some(t) = trigger_adj {
            dhat[anchor_local] += 1.0;
            for i in 0..tsize {
                dhat[n_base + i] = 1.0 + t.row(i).sum() + if i == 0 { 1.0 } else { 0.0 };
            }
        }

        let mut coeff = Array2::<f64>::zeros((n_total, n_total));
        for i in 0..n_total {
            for j in 0..n_total {
                coeff[[i, j]] = 1.0 / (dhat[i] * dhat[j]).sqrt();
            }
        }

        LocalView {
            nodes,
            anchor_local,
            n_base,
            n_total,
            a_const,
            coeff,
        }
    }

    /// Dense normalized adjacency of the local augmented graph.
    pub fn ahat(&self, trigger: Option<&Trigger>) -> Array2<f64> {
        let mut a = self.a_const.clone();
        if let Some(t) = trigger {
            let g = t.size();
            for i in 0..g {
                for j in 0..g {
                    if t.adjacency[[i, j]] != 0.0 {
                        a[[self.n_base + i, self.n_base + j]] = t.adjacency[[i, j]];
                    }
                }
            }
        }
        a * &self.coeff
    }

    /// Normalized adjacency with each undirected edge kept only when
    /// `keep(min, max)` holds over *global* edge ids (trigger node t maps to
    /// base_count + t). Degrees are recomputed from the kept set, including
    /// edges leaving the view.
    pub fn ahat_subsampled(
        &self,
        adjacency: &CsrMatrix,
        trigger: Option<&Trigger>,
        keep: &dyn Fn(usize, usize) -> bool,
    ) -> Array2<f64> {
        let base_total = adjacency.n_rows;
        let keep_pair = |a: usize, b: usize| keep(a.min(b), a.max(b));
        let tsize = trigger.map_or(0, |t| t.size());

        let mut dhat = vec![1.0f64; self.n_total];
        for (l, &g) in self.nodes.iter().enumerate() {
            let (cols, vals) = adjacency.row(g);
            for (&c, &v) in cols.iter().zip(vals) {
                if keep_pair(g, c) {
                    dhat[l] += v;
                }
            }
        }
        if let Some(t) = trigger {
            let anchor_g = self.nodes[self.anchor_local];
            let anchor_edge = keep_pair(anchor_g, base_total);
            if anchor_edge {
                dhat[self.anchor_local] += 1.0;
                dhat[self.n_base] += 1.0;
            }
            for i in 0..tsize {
                for j in 0..tsize {
                    if t.adjacency[[i, j]] != 0.0 && keep_pair(base_total + i, base_total + j) {
                        dhat[self.n_base + i] += t.adjacency[[i, j]];
                    }
                }
            }
        }

        let mut out = Array2::<f64>::zeros((self.n_total, self.n_total));
        let set = |out: &mut Array2<f64>, i: usize, j: usize, v: f64| {
            out[[i, j]] = v / (dhat[i] * dhat[j]).sqrt();
        };
        for i in 0..self.n_total {
            set(&mut out, i, i, 1.0);
        }
        for (l, &g) in self.nodes.iter().enumerate() {
            let (cols, vals) = adjacency.row(g);
            for (&c, &v) in cols.iter().zip(vals) {
                if let Ok(lc) = self.nodes.binary_search(&c) {
                    if keep_pair(g, c) {
                        set(&mut out, l, lc, v);
                    }
                }
            }
        }
        if let Some(t) = trigger {
            let anchor_g = self.nodes[self.anchor_local];
            if keep_pair(anchor_g, base_total) {
                set(&mut out, self.anchor_local, self.n_base, 1.0);
                set(&mut out, self.n_base, self.anchor_local, 1.0);
            }
            for i in 0..tsize {
                for j in 0..tsize {
                    let v = t.adjacency[[i, j]];
                    if v != 0.0 && keep_pair(base_total + i, base_total + j) {
                        set(&mut out, self.n_base + i, self.n_base + j, v);
                    }
                }
            }
        }
        out
    }
}
