//! The backdoor attack on graph condensation.
//!
//! Poisoned-node selection clusters selector embeddings per class and scores
//! candidates by centroid distance plus a degree penalty. An adaptive
//! generator encodes the host graph and emits per-node trigger features and
//! structure (binarized straight-through). The tri-level loop interleaves
//! surrogate training on the synthetic graph, generator updates against the
//! surrogate, and gradient-matching updates of the synthetic graph against
//! the freshly poisoned host graph.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::condense::{
    self, apply_synthetic_step, source_gradients, CondensationConfig,
    CondenseMethod, PairwiseMlp, StructureSource, SyntheticGraph,
};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, AugmentedGraph, NodeGraph, Trigger};
use crate::kmeans::kmeans;
use crate::localview::LocalView;
use crate::models::{self, ModelKind, ModelParams, ModelSpec, TrainConfig, TrainData};
use crate::optim::Adam;
use crate::rng::{hash_mix, Rng};

const STREAM_GENERATOR: u64 = 4;
const STREAM_SELECTOR: u64 = 5;
const STREAM_UPDATE_SET: u64 = 6;
const STREAM_KMEANS: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoisonBudget {
    Count(usize),
    /// Fraction of the train split.
    Ratio(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackBudget {
    pub poison: PoisonBudget,
    /// Trigger size Δg.
    pub trigger_size: usize,
    /// Degree penalty λ in the selection score.
    pub degree_weight: f64,
    /// Clusters per class K.
    pub clusters_per_class: usize,
    /// Target class y_t.
    pub target_class: usize,
    /// |V_U|; defaults to |V_P| when absent.
    pub update_set_size: Option<usize>,
    pub directed: bool,
    pub source_class: Option<usize>,
    /// Flip the selection metric to prefer the lowest scores.
    pub prefer_low_scores: bool,
    /// Force all-ones trigger adjacency instead of the generated structure.
    pub full_connect_trigger: bool,
    pub generator_encoder: ModelKind,
    pub generator_hidden: usize,
    pub generator_lr: f64,
    /// L2 decay on the generator parameters; keeps trigger magnitudes at
    /// feature scale instead of letting the saturating loss inflate them.
    pub generator_weight_decay: f64,
    /// Inner-level convergence floor: generator updates pause while the
    /// trigger loss sits at or below this value (0 = always update).
    pub trigger_loss_floor: f64,
    /// Trigger feature rows are scale-clipped to this multiple of the host
    /// graph's mean feature-row norm (straight-through backward, mirroring
    /// the structure binarization). `None` leaves features unbounded.
    pub trigger_feature_scale: Option<f64>,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            poison: PoisonBudget::Ratio(0.1),
            trigger_size: 4,
            degree_weight: 1.0,
            clusters_per_class: 1,
            target_class: 0,
            update_set_size: None,
            directed: false,
            source_class: None,
            prefer_low_scores: false,
            full_connect_trigger: false,
            generator_encoder: ModelKind::Gcn,
            generator_hidden: 256,
            generator_lr: 0.01,
            generator_weight_decay: 5e-4,
            trigger_loss_floor: 0.0,
            trigger_feature_scale: Some(2.0),
        }
    }
}

impl AttackBudget {
    pub fn resolve_poison_count(&self, train_len: usize) -> usize {
        match self.poison {
            PoisonBudget::Count(n) => n,
            PoisonBudget::Ratio(r) => (r * train_len as f64).round() as usize,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.trigger_size == 0 {
            return Err(Error::InvalidParams("trigger size must be >= 1".into()));
        }
        if self.clusters_per_class == 0 {
            return Err(Error::InvalidParams("clusters per class must be >= 1".into()));
        }
        if self.target_class >= num_classes {
            return Err(Error::InvalidParams(format!(
                "target class {} out of range [0,{num_classes})",
                self.target_class
            )));
        }
        if self.directed {
            match self.source_class {
                None => {
                    return Err(Error::InvalidParams(
                        "directed mode needs a source class".into(),
                    ))
                }
                Some(s) if s >= num_classes || s == self.target_class => {
                    return Err(Error::InvalidParams(
                        "source class must differ from the target class".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One scored selection candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredNode {
    pub node: usize,
    pub class: usize,
    pub cluster: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct PoisonSelection {
    /// Selected anchors, ascending.
    pub nodes: Vec<usize>,
    pub scored: Vec<ScoredNode>,
    pub selector: Option<ModelParams>,
}

impl PoisonSelection {
    pub fn empty() -> Self {
        PoisonSelection {
            nodes: Vec::new(),
            scored: Vec::new(),
            selector: None,
        }
    }
}

/// Train the selector GCN on the train split and return its parameters plus
/// penultimate embeddings (hidden representation before the classification
/// weight) for every node.
pub fn train_selector(g: &NodeGraph, seed: u64) -> Result<(ModelParams, Array2<f64>)> {
    if g.splits.train.is_empty() {
        return Err(Error::EmptyMask);
    }
    let spec = selector_spec();
    let data = TrainData {
        features: &g.features,
        labels: &g.labels,
        adjacency: Some(&g.adjacency),
        train_idx: &g.splits.train,
        num_classes: g.num_classes,
    };
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 200,
        weight_decay: 5e-4,
        seed,
    };
    let params = models::train(&spec, &data, &cfg)?;
    let embeddings = selector_embeddings(g, &params);
    Ok((params, embeddings))
}

fn selector_spec() -> ModelSpec {
    ModelSpec {
        hidden: 64,
        ..ModelSpec::gcn()
    }
}

/// Â·relu(Â X W₀): everything before the classification weight.
fn selector_embeddings(g: &NodeGraph, params: &ModelParams) -> Array2<f64> {
    let norm = normalize_adjacency(g).matrix;
    let h = norm.matmul_dense(&g.features.dot(&params.weights[0]));
    norm.matmul_dense(&h.mapv(|v| v.max(0.0)))
}

/// m(v) = ‖h_v − h_centroid‖₂ + λ·deg(v), degree counted without self-loops.
pub fn score_nodes(
    embeddings: &Array2<f64>,
    members: &[usize],
    assignments: &[usize],
    centroids: &Array2<f64>,
    g: &NodeGraph,
    lambda: f64,
) -> Vec<f64> {
    members
        .iter()
        .zip(assignments)
        .map(|(&node, &cluster)| {
            let h = embeddings.row(node);
            let c = centroids.row(cluster);
            let dist = h
                .iter()
                .zip(c.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist + lambda * g.degree(node) as f64
        })
        .collect()
}

/// Cluster non-target train nodes per class, take the top-⌊n⌋ scores per
/// cluster with n = Δ_P/((C−1)K), then top up the remainder from the global
/// score ranking. Ties break toward the lower node id.
pub fn select_poison_nodes(g: &NodeGraph, budget: &AttackBudget, seed: u64) -> Result<PoisonSelection> {
    budget.validate(g.num_classes)?;
    let delta_p = budget.resolve_poison_count(g.splits.train.len());
    if delta_p == 0 {
        return Ok(PoisonSelection::empty());
    }
    let y_t = budget.target_class;
    let candidate_classes: Vec<usize> = match (budget.directed, budget.source_class) {
        (true, Some(s)) => vec![s],
        _ => (0..g.num_classes).filter(|&c| c != y_t).collect(),
    };
    let mut candidates_per_class: Vec<Vec<usize>> = Vec::new();
    for &c in &candidate_classes {
        candidates_per_class.push(
            g.splits
                .train
                .iter()
                .copied()
                .filter(|&i| g.labels[i] == c)
                .collect(),
        );
    }
    if candidates_per_class.iter().all(|v| v.is_empty()) {
        return Err(Error::NothingToPoison);
    }

    let (selector, embeddings) = train_selector(g, hash_mix(&[seed, STREAM_SELECTOR]))?;

    let k = budget.clusters_per_class;
    let per_cluster = delta_p / (candidate_classes.len() * k);
    let better = |a: &ScoredNode, b: &ScoredNode| {
        let ord = if budget.prefer_low_scores {
            a.score.partial_cmp(&b.score).unwrap()
        } else {
            b.score.partial_cmp(&a.score).unwrap()
        };
        ord.then(a.node.cmp(&b.node))
    };

    let mut scored: Vec<ScoredNode> = Vec::new();
    let mut selected: Vec<usize> = Vec::new();
    for (ci, &class) in candidate_classes.iter().enumerate() {
        let members = &candidates_per_class[ci];
        if members.is_empty() {
            continue;
        }
        let k_eff = k.min(members.len());
        let mut points = Array2::<f64>::zeros((members.len(), embeddings.ncols()));
        for (r, &m) in members.iter().enumerate() {
            points.row_mut(r).assign(&embeddings.row(m));
        }
        let km = kmeans(&points, k_eff, hash_mix(&[seed, STREAM_KMEANS, class as u64]))?;
        let scores = score_nodes(
            &embeddings,
            members,
            &km.assignments,
            &km.centroids,
            g,
            budget.degree_weight,
        );
        let class_scored: Vec<ScoredNode> = members
            .iter()
            .zip(&km.assignments)
            .zip(&scores)
            .map(|((&node, &cluster), &score)| ScoredNode {
                node,
                class,
                cluster,
                score,
            })
            .collect();
        for cluster in 0..k_eff {
            let mut in_cluster: Vec<&ScoredNode> = class_scored
                .iter()
                .filter(|s| s.cluster == cluster)
                .collect();
            in_cluster.sort_by(|a, b| better(a, b));
            selected.extend(in_cluster.iter().take(per_cluster).map(|s| s.node));
        }
        scored.extend(class_scored);
    }

    // remainder: globally best unselected candidates
    if selected.len() < delta_p {
        let mut rest: Vec<&ScoredNode> = scored
            .iter()
            .filter(|s| !selected.contains(&s.node))
            .collect();
        rest.sort_by(|a, b| better(a, b));
        for s in rest.into_iter().take(delta_p - selected.len()) {
            selected.push(s.node);
        }
    }
    selected.sort_unstable();
    selected.truncate(delta_p);

    Ok(PoisonSelection {
        nodes: selected,
        scored,
        selector: Some(selector),
    })
}

/// Adaptive trigger generator: a graph encoder plus linear feature and
/// structure heads.
#[derive(Debug, Clone)]
pub struct TriggerGenerator {
    pub encoder_spec: ModelSpec,
    pub encoder: Vec<Array2<f64>>,
    /// [h × Δg·d] feature head.
    pub w_f: Array2<f64>,
    /// [h × Δg·Δg] structure head.
    pub w_a: Array2<f64>,
    pub trigger_size: usize,
    pub feature_dim: usize,
    pub full_connect: bool,
    /// Absolute row-norm cap for generated features, if bounded.
    pub feature_norm_cap: Option<f64>,
    pub lr: f64,
    pub seed: u64,
}

impl TriggerGenerator {
    pub fn init(g: &NodeGraph, budget: &AttackBudget, seed: u64) -> Self {
        let d = g.feature_dim();
        let h = budget.generator_hidden;
        let dg = budget.trigger_size;
        let encoder_spec = ModelSpec {
            kind: budget.generator_encoder,
            layers: 2,
            hidden: h,
            k: 2,
            dropout: 0.0,
        };
        // encoder output width is h, not C
        let encoder = models::init_params(&encoder_spec, d, h, hash_mix(&[seed, STREAM_GENERATOR, 0]))
            .weights;
        let glorot = |rows: usize, cols: usize, s: u64| {
            let mut rng = Rng::stream2(seed, STREAM_GENERATOR, s);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut w = Array2::<f64>::zeros((rows, cols));
            for v in w.iter_mut() {
                *v = rng.uniform_in(-limit, limit);
            }
            w
        };
        let feature_norm_cap = budget.trigger_feature_scale.map(|k| {
            let mean_norm = (0..g.num_nodes)
                .map(|i| g.features.row(i).dot(&g.features.row(i)).sqrt())
                .sum::<f64>()
                / g.num_nodes.max(1) as f64;
            k * mean_norm
        });
        TriggerGenerator {
            encoder_spec,
            encoder,
            w_f: glorot(h, dg * d, 1),
            w_a: glorot(h, dg * dg, 2),
            trigger_size: dg,
            feature_dim: d,
            full_connect: budget.full_connect_trigger,
            feature_norm_cap,
            lr: budget.generator_lr,
            seed,
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.encoder.iter().collect();
        out.push(&self.w_f);
        out.push(&self.w_a);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self.encoder.iter_mut().collect();
        out.push(&mut self.w_f);
        out.push(&mut self.w_a);
        out
    }

    /// Encoder representations for every node of the host graph.
    pub fn encode(&self, g: &NodeGraph) -> Result<Array2<f64>> {
        let params = ModelParams {
            weights: self.encoder.clone(),
            seed: self.seed,
        };
        let adj = match self.encoder_spec.kind {
            ModelKind::Mlp => None,
            _ => Some(&g.adjacency),
        };
        models::forward(&self.encoder_spec, &params, adj, &g.features)
    }

    /// Trigger from a precomputed encoder row.
    pub fn trigger_from_row(&self, h_row: ndarray::ArrayView1<f64>) -> Trigger {
        let dg = self.trigger_size;
        let d = self.feature_dim;
        let h = h_row.insert_axis(ndarray::Axis(0)).to_owned();
        let feat_flat = h.dot(&self.w_f);
        let mut features =
            Array2::from_shape_vec((dg, d), feat_flat.iter().cloned().collect()).expect("shape");
        if let Some(cap) = self.feature_norm_cap {
            for mut row in features.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm > cap {
                    let s = cap / norm;
                    row.mapv_inplace(|x| x * s);
                }
            }
        }
        if self.full_connect {
            let mut adj = Array2::<f64>::ones((dg, dg));
            for i in 0..dg {
                adj[[i, i]] = 0.0;
            }
            return Trigger {
                features,
                logits: adj.clone(),
                adjacency: adj,
            };
        }
        let adj_flat = h.dot(&self.w_a);
        let raw =
            Array2::from_shape_vec((dg, dg), adj_flat.iter().cloned().collect()).expect("shape");
        let sym = (&raw + &raw.t()) * 0.5;
        let mut logits = sym.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let mut adjacency = logits.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });
        for i in 0..dg {
            logits[[i, i]] = 0.0;
            adjacency[[i, i]] = 0.0;
        }
        Trigger {
            features,
            adjacency,
            logits,
        }
    }
}

/// Full-forward trigger generation for one node.
pub fn generate_trigger(gen: &TriggerGenerator, g: &NodeGraph, v: usize) -> Result<Trigger> {
    if v >= g.num_nodes {
        return Err(Error::NodeOutOfRange {
            node: v,
            num_nodes: g.num_nodes,
        });
    }
    let h = gen.encode(g)?;
    Ok(gen.trigger_from_row(h.row(v)))
}

/// Poisoned host graph: anchors relabeled to the target class, triggers
/// appended with the target label, trigger nodes joining the train mask.
#[derive(Debug, Clone)]
pub struct PoisonedGraph {
    pub graph: NodeGraph,
    pub train_idx: Vec<usize>,
    pub anchors: Vec<usize>,
}

pub fn build_poisoned_graph(
    g: &NodeGraph,
    selection: &PoisonSelection,
    gen: &TriggerGenerator,
    target_class: usize,
) -> Result<PoisonedGraph> {
    if selection.nodes.is_empty() {
        return Ok(PoisonedGraph {
            graph: g.clone(),
            train_idx: g.splits.train.clone(),
            anchors: Vec::new(),
        });
    }
    let h = gen.encode(g)?;
    let attachments: Vec<(usize, Trigger)> = selection
        .nodes
        .iter()
        .map(|&v| (v, gen.trigger_from_row(h.row(v))))
        .collect();
    let augmented = AugmentedGraph::new(g.view(), attachments)?;
    let mut graph = augmented.materialize(Some(target_class));
    for &anchor in &selection.nodes {
        graph.labels[anchor] = target_class;
    }
    let mut train_idx = g.splits.train.clone();
    train_idx.extend(g.num_nodes..graph.num_nodes);
    train_idx.sort_unstable();
    train_idx.dedup();
    Ok(PoisonedGraph {
        graph,
        train_idx,
        anchors: selection.nodes.clone(),
    })
}

/// Uniform sample without replacement over all node ids.
pub fn sample_update_set(g: &NodeGraph, size: usize, seed: u64) -> Result<Vec<usize>> {
    sample_from_pool((0..g.num_nodes).collect(), size, seed)
}

fn sample_from_pool(pool: Vec<usize>, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > pool.len() {
        return Err(Error::TooFewPoints {
            have: pool.len(),
            need: size,
        });
    }
    let mut rng = Rng::new(seed);
    let picks = rng.sample_without_replacement(pool.len(), size);
    let mut out: Vec<usize> = picks.into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Trigger loss: mean surrogate cross-entropy toward the target class over
/// update nodes with their generated triggers attached. Gradients reach the
/// generator only; the surrogate weights are constants on the tape.
pub struct TriggerStep {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
}

/// How the generated structure enters the attached forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerPath {
    /// Forward uses the binarized adjacency; backward passes straight
    /// through the binarization.
    SteBinarized,
    /// Forward uses the continuous sigmoid values. Normalization constants
    /// still come from the binarized degrees, so this is the smooth function
    /// whose gradient the straight-through path borrows — the reference for
    /// finite-difference validation.
    Relaxed,
}

pub fn trigger_loss_and_grads(
    gen: &TriggerGenerator,
    surrogate_spec: &ModelSpec,
    surrogate: &ModelParams,
    g: &NodeGraph,
    update_set: &[usize],
    target_class: usize,
) -> Result<TriggerStep> {
    trigger_loss_with_path(
        gen,
        surrogate_spec,
        surrogate,
        g,
        update_set,
        target_class,
        TriggerPath::SteBinarized,
    )
}

pub fn trigger_loss_with_path(
    gen: &TriggerGenerator,
    surrogate_spec: &ModelSpec,
    surrogate: &ModelParams,
    g: &NodeGraph,
    update_set: &[usize],
    target_class: usize,
    path: TriggerPath,
) -> Result<TriggerStep> {
    if update_set.is_empty() {
        return Err(Error::EmptyMask);
    }
    if surrogate_spec.kind == ModelKind::Mlp {
        return Err(Error::InvalidParams(
            "an adjacency-free surrogate cannot see attached triggers".into(),
        ));
    }
    let dg = gen.trigger_size;
    let d = gen.feature_dim;
    let hops = surrogate_spec.propagations();

    // constants reused across update nodes
    let z0_base = match surrogate_spec.kind {
        ModelKind::Sgc => g.features.dot(&surrogate.weights[0]),
        _ => g.features.dot(&surrogate.weights[0]),
    };
    let norm_clean = Arc::new(normalize_adjacency(g).matrix);

    let mut tape = Tape::new();
    let enc_weights: Vec<Tensor> = gen.encoder.iter().map(|w| tape.leaf(w.clone())).collect();
    let wf = tape.leaf(gen.w_f.clone());
    let wa = tape.leaf(gen.w_a.clone());
    let x = tape.constant(g.features.clone());
    let enc_adj = match gen.encoder_spec.kind {
        ModelKind::Mlp => None,
        _ => Some(&norm_clean),
    };
    let h_all = {
        // encoder forward; reuse the model-forward tape builder
        let spec = gen.encoder_spec;
        models::forward_on_tape(&mut tape, &spec, &enc_weights, enc_adj, x, None)?
    };

    let w0_const = tape.constant(surrogate.weights[0].clone());
    let extra_weights: Vec<Tensor> = surrogate.weights[1..]
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let offdiag = condense::offdiag_mask(dg);
    let labels_t: Arc<Vec<usize>> = Arc::new(vec![target_class]);

    let mut per_node_losses: Vec<Tensor> = Vec::with_capacity(update_set.len());
    for &v in update_set {
        if v >= g.num_nodes {
            return Err(Error::NodeOutOfRange {
                node: v,
                num_nodes: g.num_nodes,
            });
        }
        let hv = tape.row_gather(h_all, Arc::new(vec![v]))?;
        let feat_flat = tape.matmul(hv, wf)?;
        let mut xg = tape.reshape(feat_flat, dg, d)?;
        if let Some(cap) = gen.feature_norm_cap {
            xg = tape.ste_row_norm_clip(xg, cap);
        }
        let (a_entry, a_binarized) = if gen.full_connect {
            let mut ones = Array2::<f64>::ones((dg, dg));
            for i in 0..dg {
                ones[[i, i]] = 0.0;
            }
            let t = tape.constant(ones.clone());
            (t, ones)
        } else {
            let adj_flat = tape.matmul(hv, wa)?;
            let raw = tape.reshape(adj_flat, dg, dg)?;
            let raw_t = tape.transpose(raw);
            let sym = tape.add(raw, raw_t)?;
            let half = tape.scale(sym, 0.5);
            let probs = tape.sigmoid(half);
            let bin = tape.ste_binarize(probs);
            let binarized = tape.value(bin).clone();
            let masked_bin = tape.hadamard_const(bin, offdiag.clone())?;
            let entry = match path {
                TriggerPath::SteBinarized => masked_bin,
                TriggerPath::Relaxed => tape.hadamard_const(probs, offdiag.clone())?,
            };
            (entry, &binarized * &*offdiag)
        };

        // local augmented view with straight-through normalization constants
        let view = LocalView::build(&g.adjacency, v, Some(&a_binarized), hops);
        let n_total = view.n_total;
        let n_base = view.n_base;
        let a_const_t = tape.constant(view.a_const.clone());
        let padded = tape.pad_block(a_entry, n_total, n_total, n_base, n_base)?;
        let a_ind = tape.add(a_const_t, padded)?;
        let ahat = tape.hadamard_const(a_ind, Arc::new(view.coeff.clone()))?;

        // gather base rows of X·W0 as constants, stack trigger rows
        let mut z0_loc = Array2::<f64>::zeros((n_base, z0_base.ncols()));
        for (l, &gi) in view.nodes.iter().enumerate() {
            z0_loc.row_mut(l).assign(&z0_base.row(gi));
        }
        let z0_loc_t = tape.constant(z0_loc);
        let zg = tape.matmul(xg, w0_const)?;
        let mut hcur = tape.concat_rows(z0_loc_t, zg)?;

        match surrogate_spec.kind {
            ModelKind::Sgc => {
                for _ in 0..surrogate_spec.k {
                    hcur = tape.matmul(ahat, hcur)?;
                }
            }
            ModelKind::Gcn => {
                hcur = tape.matmul(ahat, hcur)?;
                for (li, &wl) in extra_weights.iter().enumerate() {
                    hcur = tape.relu(hcur);
                    hcur = tape.matmul(hcur, wl)?;
                    hcur = tape.matmul(ahat, hcur)?;
                    let _ = li;
                }
            }
            ModelKind::Mlp => unreachable!(),
        }
        let row = tape.row_gather(hcur, Arc::new(vec![view.anchor_local]))?;
        per_node_losses.push(tape.cross_entropy_mean(row, labels_t.clone())?);
    }

    let mut acc = per_node_losses[0];
    for &t in &per_node_losses[1..] {
        acc = tape.add(acc, t)?;
    }
    let loss = tape.scale(acc, 1.0 / update_set.len() as f64);
    tape.backward(loss)?;

    let mut grads: Vec<Array2<f64>> = enc_weights
        .iter()
        .map(|&w| tape.grad(w).expect("encoder grad").clone())
        .collect();
    grads.push(tape.grad(wf).expect("w_f grad").clone());
    grads.push(tape.grad(wa).expect("w_a grad").clone());
    Ok(TriggerStep {
        loss: tape.scalar_value(loss),
        grads,
    })
}

/// Scalar trigger loss at the current generator parameters.
pub fn trigger_loss(
    gen: &TriggerGenerator,
    surrogate_spec: &ModelSpec,
    surrogate: &ModelParams,
    g: &NodeGraph,
    update_set: &[usize],
    target_class: usize,
) -> Result<f64> {
    Ok(trigger_loss_and_grads(gen, surrogate_spec, surrogate, g, update_set, target_class)?.loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BgcTracePoint {
    pub matching_loss: f64,
    pub trigger_loss: Option<f64>,
}

pub struct BgcOutcome {
    pub synthetic: SyntheticGraph,
    pub generator: TriggerGenerator,
    pub selection: PoisonSelection,
    pub trace: Vec<BgcTracePoint>,
}

/// The tri-level loop: select anchors once, then per outer epoch re-init and
/// train the surrogate on S, update the generator against it, rebuild the
/// poisoned graph with fresh triggers, and take one matching step on S.
pub fn run_bgc(
    g: &NodeGraph,
    config: &CondensationConfig,
    budget: &AttackBudget,
    seed: u64,
) -> Result<BgcOutcome> {
    config.validate()?;
    budget.validate(g.num_classes)?;

    let selection = select_poison_nodes(g, budget, seed)?;
    let mut s = condense::init_synthetic(g, config.ratio, seed)?;
    if config.method == CondenseMethod::GCond {
        s.structure = StructureSource::LearnedPairwise(PairwiseMlp::init(
            g.feature_dim(),
            config.structure_width,
            config.structure_threshold,
            seed,
        ));
    }
    let mut gen = TriggerGenerator::init(g, budget, seed);
    let mut gen_opt = Adam::new(gen.lr, budget.generator_weight_decay);
    let surrogate_spec = config.backbone_spec();

    let update_size = budget
        .update_set_size
        .unwrap_or(selection.nodes.len())
        .min(g.num_nodes);
    let update_pool: Vec<usize> = match (budget.directed, budget.source_class) {
        (true, Some(src)) => (0..g.num_nodes).filter(|&i| g.labels[i] == src).collect(),
        _ => (0..g.num_nodes).collect(),
    };
    let update_size = update_size.min(update_pool.len());

    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let theta = condense::train_surrogate(
            &s,
            config,
            hash_mix(&[seed, condense::STREAM_SURROGATE, epoch as u64]),
        )?;
        let surrogate = ModelParams {
            weights: vec![theta.clone()],
            seed,
        };

        let mut epoch_trigger_loss = None;
        if !selection.nodes.is_empty() && update_size > 0 {
            let v_u = sample_from_pool(
                update_pool.clone(),
                update_size,
                hash_mix(&[seed, STREAM_UPDATE_SET, epoch as u64]),
            )?;
            for _ in 0..config.generator_steps {
                let step = trigger_loss_and_grads(
                    &gen,
                    &surrogate_spec,
                    &surrogate,
                    g,
                    &v_u,
                    budget.target_class,
                )?;
                epoch_trigger_loss = Some(step.loss);
                if step.loss <= budget.trigger_loss_floor {
                    break; // inner level converged for this epoch
                }
                let mut params: Vec<Array2<f64>> =
                    gen.params().into_iter().cloned().collect();
                gen_opt.step(&mut params, &step.grads);
                for (dst, src) in gen.params_mut().into_iter().zip(params) {
                    *dst = src;
                }
            }
        }

        let poisoned = build_poisoned_graph(g, &selection, &gen, budget.target_class)?;
        let x_tilde = condense::source_propagated_features(
            &poisoned.graph,
            config.method,
            config.backbone_k,
        );
        let source = source_gradients(
            &x_tilde,
            &poisoned.graph.labels,
            g.num_classes,
            &poisoned.train_idx,
            &theta,
        )?;
        let grads = condense::matching_gradients(&s, &source, &theta, config.backbone_k)?;
        apply_synthetic_step(&mut s, &grads, config);
        trace.push(BgcTracePoint {
            matching_loss: grads.loss,
            trigger_loss: epoch_trigger_loss,
        });
    }

    Ok(BgcOutcome {
        synthetic: s,
        generator: gen,
        selection,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_sbm_graph;

    fn toy() -> NodeGraph {
        generate_sbm_graph(60, 3, 8, 0.3, 0.05, 31).unwrap()
    }

    #[test]
    fn selector_embeddings_shape_and_determinism() {
        let g = toy();
        let (_, ha) = train_selector(&g, 9).unwrap();
        let (_, hb) = train_selector(&g, 9).unwrap();
        assert_eq!(ha.dim(), (60, 64));
        assert_eq!(ha, hb);
    }

    #[test]
    fn score_is_distance_plus_degree() {
        let g = toy();
        let mut emb = Array2::<f64>::zeros((60, 2));
        emb[[3, 0]] = 3.0;
        emb[[3, 1]] = 4.0;
        let centroids = Array2::<f64>::zeros((1, 2));
        let scores = score_nodes(&emb, &[3], &[0], &centroids, &g, 2.0);
        let expect = 5.0 + 2.0 * g.degree(3) as f64;
        assert!((scores[0] - expect).abs() < 1e-12);
        // zero lambda reduces to the distance
        let scores0 = score_nodes(&emb, &[3], &[0], &centroids, &g, 0.0);
        assert!((scores0[0] - 5.0).abs() < 1e-12);
        // node sitting at its centroid with no degree weight scores zero
        let at_centroid = score_nodes(&emb, &[5], &[0], &centroids, &g, 0.0);
        assert!(at_centroid[0].abs() < 1e-12);
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let g = toy();
        let budget = AttackBudget {
            poison: PoisonBudget::Count(0),
            ..Default::default()
        };
        let sel = select_poison_nodes(&g, &budget, 0).unwrap();
        assert!(sel.nodes.is_empty());
    }

    #[test]
    fn selection_never_contains_target_class() {
        let g = toy();
        for y_t in 0..3 {
            let budget = AttackBudget {
                poison: PoisonBudget::Ratio(0.5),
                target_class: y_t,
                ..Default::default()
            };
            let sel = select_poison_nodes(&g, &budget, 3).unwrap();
            assert!(!sel.nodes.is_empty());
            assert!(sel.nodes.iter().all(|&v| g.labels[v] != y_t));
            assert!(sel.nodes.iter().all(|&v| g.splits.train.contains(&v)));
        }
    }

    #[test]
    fn per_cluster_rule_and_budget() {
        // Δ_P=10, C=6, K=1 → n=2 per non-target class, |V_P| = 10
        let g = generate_sbm_graph(180, 6, 8, 0.3, 0.02, 12).unwrap();
        let budget = AttackBudget {
            poison: PoisonBudget::Count(10),
            ..Default::default()
        };
        let sel = select_poison_nodes(&g, &budget, 1).unwrap();
        assert_eq!(sel.nodes.len(), 10);
        for c in 1..6 {
            let from_class = sel.nodes.iter().filter(|&&v| g.labels[v] == c).count();
            assert_eq!(from_class, 2);
        }
    }

    #[test]
    fn trigger_shapes_and_symmetry() {
        let g = toy();
        let budget = AttackBudget {
            generator_hidden: 16,
            ..Default::default()
        };
        let gen = TriggerGenerator::init(&g, &budget, 5);
        let t = generate_trigger(&gen, &g, 4).unwrap();
        assert_eq!(t.features.dim(), (4, 8));
        assert_eq!(t.adjacency.dim(), (4, 4));
        t.validate().unwrap();
        assert!(matches!(
            generate_trigger(&gen, &g, 60),
            Err(Error::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn poisoned_graph_counts_and_histogram() {
        let g = toy();
        let budget = AttackBudget {
            poison: PoisonBudget::Count(4),
            generator_hidden: 16,
            ..Default::default()
        };
        let sel = select_poison_nodes(&g, &budget, 7).unwrap();
        assert_eq!(sel.nodes.len(), 4);
        let gen = TriggerGenerator::init(&g, &budget, 7);
        let before = g.labels.iter().filter(|&&l| l == 0).count();
        let p = build_poisoned_graph(&g, &sel, &gen, 0).unwrap();
        assert_eq!(p.graph.num_nodes, 60 + 16);
        let after = p.graph.labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(after, before + 4 + 16);
        // all trigger nodes are in the train mask
        for v in 60..76 {
            assert!(p.train_idx.contains(&v));
        }
    }

    #[test]
    fn empty_selection_leaves_graph_unchanged() {
        let g = toy();
        let budget = AttackBudget {
            poison: PoisonBudget::Count(0),
            generator_hidden: 16,
            ..Default::default()
        };
        let gen = TriggerGenerator::init(&g, &budget, 7);
        let p = build_poisoned_graph(&g, &PoisonSelection::empty(), &gen, 0).unwrap();
        assert_eq!(p.graph.num_nodes, g.num_nodes);
        assert_eq!(p.graph.labels, g.labels);
        assert_eq!(p.train_idx, g.splits.train);
    }

    #[test]
    fn update_set_sampling() {
        let g = toy();
        let all = sample_update_set(&g, 60, 1).unwrap();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert!(matches!(
            sample_update_set(&g, 61, 1),
            Err(Error::TooFewPoints { .. })
        ));
        // frequency over many epochs stays near size/N
        let mut counts = vec![0usize; 60];
        let epochs = 1000;
        for e in 0..epochs {
            for v in sample_update_set(&g, 6, hash_mix(&[9, STREAM_UPDATE_SET, e])).unwrap() {
                counts[v] += 1;
            }
        }
        let p = 6.0 / 60.0;
        let sigma = (epochs as f64 * p * (1.0 - p)).sqrt();
        for (v, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - epochs as f64 * p).abs() <= 4.0 * sigma,
                "node {v} sampled {c} times"
            );
        }
    }

    #[test]
    fn surrogate_params_unchanged_by_generator_step() {
        let g = toy();
        let budget = AttackBudget {
            generator_hidden: 8,
            ..Default::default()
        };
        let mut gen = TriggerGenerator::init(&g, &budget, 3);
        let spec = ModelSpec::sgc();
        let surrogate = models::init_params(&spec, 8, 3, 0);
        let snapshot = surrogate.weights.clone();
        let step =
            trigger_loss_and_grads(&gen, &spec, &surrogate, &g, &[1, 5, 9], 0).unwrap();
        let mut opt = Adam::new(0.01, 0.0);
        let mut params: Vec<Array2<f64>> = gen.params().into_iter().cloned().collect();
        opt.step(&mut params, &step.grads);
        for (dst, src) in gen.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        assert_eq!(surrogate.weights, snapshot);
    }

    #[test]
    fn confident_surrogate_gives_vanishing_trigger_loss() {
        let g = toy();
        // make every feature row positive so a single huge target column
        // forces the target logit to dominate
        let mut g = g;
        g.features.mapv_inplace(|v| v.abs() + 0.1);
        let budget = AttackBudget {
            generator_hidden: 8,
            ..Default::default()
        };
        let gen = TriggerGenerator::init(&g, &budget, 3);
        let spec = ModelSpec::sgc();
        let mut w = Array2::<f64>::zeros((8, 3));
        for r in 0..8 {
            w[[r, 0]] = 200.0;
            w[[r, 1]] = -200.0;
            w[[r, 2]] = -200.0;
        }
        let surrogate = ModelParams {
            weights: vec![w],
            seed: 0,
        };
        let loss = trigger_loss(&gen, &spec, &surrogate, &g, &[2, 11], 0).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn trigger_loss_floor_pauses_generator_updates() {
        let g = toy();
        let config = crate::condense::CondensationConfig {
            method: crate::condense::CondenseMethod::GCondX,
            ratio: 0.3,
            epochs: 5,
            seed: 2,
            ..Default::default()
        };
        let budget = AttackBudget {
            poison: PoisonBudget::Ratio(0.2),
            generator_hidden: 8,
            trigger_loss_floor: f64::INFINITY,
            ..Default::default()
        };
        let out = run_bgc(&g, &config, &budget, 2).unwrap();
        let fresh = TriggerGenerator::init(&g, &budget, 2);
        assert_eq!(out.generator.w_f, fresh.w_f);
        assert_eq!(out.generator.encoder, fresh.encoder);
        // loss is still observed every epoch
        assert!(out.trace.iter().all(|t| t.trigger_loss.is_some()));
    }

    #[test]
    fn empty_update_set_rejected() {
        let g = toy();
        let budget = AttackBudget {
            generator_hidden: 8,
            ..Default::default()
        };
        let gen = TriggerGenerator::init(&g, &budget, 3);
        let spec = ModelSpec::sgc();
        let surrogate = models::init_params(&spec, 8, 3, 0);
        assert!(matches!(
            trigger_loss(&gen, &spec, &surrogate, &g, &[], 0),
            Err(Error::EmptyMask)
        ));
    }
}
