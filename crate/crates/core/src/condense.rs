//! Gradient-matching graph condensation.
//!
//! A small synthetic graph (trainable features X′, fixed class-proportional
//! labels Y′, and optionally a learned pairwise structure) is optimized so
//! that per-class model-weight gradients computed on it match those computed
//! on the source graph. The surrogate is the linear propagation model, which
//! keeps the outer derivative analytic: the inner weight gradient is written
//! in closed form on the tape and differentiated like any other expression.

use std::borrow::Cow;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{normalize_csr, BaseView, NodeGraph, Splits};
use crate::models::{self, ModelSpec, TrainConfig, TrainData};
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

// RNG stream purposes shared by clean condensation and the attack loop, so a
// zero-budget attack consumes the synthetic-side streams identically.
pub(crate) const STREAM_SYNTH_INIT: u64 = 1;
pub(crate) const STREAM_STRUCTURE: u64 = 2;
pub(crate) const STREAM_SURROGATE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondenseMethod {
    /// Identity structure; source gradients also use identity propagation.
    #[serde(rename = "dc-graph")]
    DcGraph,
    /// Learned pairwise structure, trained jointly with the features.
    #[serde(rename = "gcond")]
    GCond,
    /// Identity structure; source gradients use the true adjacency.
    #[serde(rename = "gcond-x")]
    GCondX,
}

/// Two-layer pairwise MLP producing structure logits from feature pairs.
#[derive(Debug, Clone)]
pub struct PairwiseMlp {
    pub weights: Vec<Array2<f64>>, // [2d × width], [width × 1]
    pub threshold: f64,
}

impl PairwiseMlp {
    pub fn init(d: usize, width: usize, threshold: f64, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, STREAM_STRUCTURE);
        let weights = [(2 * d, width), (width, 1)]
            .into_iter()
            .map(|(r, c)| {
                let limit = (6.0 / (r + c) as f64).sqrt();
                let mut w = Array2::<f64>::zeros((r, c));
                for v in w.iter_mut() {
                    *v = rng.uniform_in(-limit, limit);
                }
                w
            })
            .collect();
        PairwiseMlp { weights, threshold }
    }
}

#[derive(Debug, Clone)]
pub enum StructureSource {
    /// No edges; normalization turns this into the identity operator.
    Identity,
    LearnedPairwise(PairwiseMlp),
    /// Materialized weighted edges (produced by defenses or deserialization
    /// of pruned graphs).
    Explicit(CsrMatrix),
}

#[derive(Debug, Clone)]
pub struct SyntheticGraph {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub structure: StructureSource,
    pub ratio: f64,
}

impl SyntheticGraph {
    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Node indices per class.
    pub fn class_masks(&self) -> Vec<Vec<usize>> {
        class_masks(&self.labels, self.num_classes, None)
    }

    /// Realized adjacency: empty for identity, thresholded weights for the
    /// learned structure, stored edges for explicit.
    pub fn realized_adjacency(&self) -> Result<CsrMatrix> {
        let n = self.num_nodes();
        match &self.structure {
            StructureSource::Identity => Ok(CsrMatrix::zeros(n, n)),
            StructureSource::Explicit(m) => Ok(m.clone()),
            StructureSource::LearnedPairwise(phi) => {
                let a = generate_structure(phi, &self.features)?;
                let mut triplets = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        if a[[i, j]] != 0.0 {
                            triplets.push((i, j, a[[i, j]]));
                        }
                    }
                }
                Ok(CsrMatrix::from_triplets(n, n, triplets))
            }
        }
    }

    /// Trainer view over the synthetic nodes (every node is a train node).
    pub fn train_model(
        &self,
        spec: &ModelSpec,
        cfg: &TrainConfig,
    ) -> Result<crate::models::ModelParams> {
        let adjacency = self.realized_adjacency()?;
        let train_idx: Vec<usize> = (0..self.num_nodes()).collect();
        let data = TrainData {
            features: &self.features,
            labels: &self.labels,
            adjacency: Some(&adjacency),
            train_idx: &train_idx,
            num_classes: self.num_classes,
        };
        models::train(spec, &data, cfg)
    }

    pub fn view(&self) -> Result<BaseView<'_>> {
        Ok(BaseView {
            features: Cow::Borrowed(&self.features),
            adjacency: Cow::Owned(self.realized_adjacency()?),
            labels: Cow::Borrowed(&self.labels),
            num_classes: self.num_classes,
            splits: Cow::Owned(Splits {
                train: (0..self.num_nodes()).collect(),
                ..Splits::default()
            }),
        })
    }
}

pub(crate) fn class_masks(
    labels: &[usize],
    num_classes: usize,
    restrict: Option<&[usize]>,
) -> Vec<Vec<usize>> {
    let mut masks = vec![Vec::new(); num_classes];
    match restrict {
        Some(idx) => {
            for &i in idx {
                masks[labels[i]].push(i);
            }
        }
        None => {
            for (i, &l) in labels.iter().enumerate() {
                masks[l].push(i);
            }
        }
    }
    masks
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CondensationConfig {
    pub method: CondenseMethod,
    /// Synthetic size as a fraction of the train split: N′ = max(C, round(r·|train|)).
    pub ratio: f64,
    pub epochs: usize,
    /// Plain gradient-descent step on X′.
    pub lr_features: f64,
    /// Plain gradient-descent step on the structure MLP.
    pub lr_structure: f64,
    /// Inner surrogate training steps per outer epoch (T).
    pub surrogate_steps: usize,
    /// Trigger-generator steps per outer epoch (M); unused by clean runs.
    pub generator_steps: usize,
    pub surrogate_lr: f64,
    /// Propagation depth of the linear surrogate.
    pub backbone_k: usize,
    pub structure_width: usize,
    pub structure_threshold: f64,
    pub seed: u64,
}

impl Default for CondensationConfig {
    fn default() -> Self {
        CondensationConfig {
            method: CondenseMethod::GCond,
            ratio: 0.026,
            epochs: 1000,
            lr_features: 0.01,
            lr_structure: 0.001,
            surrogate_steps: 10,
            generator_steps: 1,
            surrogate_lr: 0.01,
            backbone_k: 2,
            structure_width: 128,
            structure_threshold: 0.5,
            seed: 0,
        }
    }
}

impl CondensationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "condensation ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParams("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> ModelSpec {
        ModelSpec {
            k: self.backbone_k,
            ..ModelSpec::sgc()
        }
    }
}

/// Synthetic size rule: at least one node per class, otherwise proportional
/// to the train split.
pub fn synthetic_size(num_classes: usize, train_len: usize, ratio: f64) -> usize {
    ((ratio * train_len as f64).round() as usize).max(num_classes)
}

/// Class-proportional label assignment plus feature rows sampled (with
/// replacement) from same-class train nodes.
pub fn init_synthetic(g: &NodeGraph, ratio: f64, seed: u64) -> Result<SyntheticGraph> {
    if g.splits.train.is_empty() {
        return Err(Error::EmptyMask);
    }
    let c = g.num_classes;
    let train = &g.splits.train;
    let n_prime = synthetic_size(c, train.len(), ratio);

    let per_class = class_masks(&g.labels, c, Some(train));
    let present: Vec<usize> = (0..c).filter(|&k| !per_class[k].is_empty()).collect();

    // Largest-remainder apportionment over classes present in the train
    // split, with at least one node each.
    let total = train.len() as f64;
    let mut counts = vec![0usize; c];
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0usize;
    for &k in &present {
        let share = n_prime as f64 * per_class[k].len() as f64 / total;
        let floor = share.floor() as usize;
        counts[k] = floor;
        assigned += floor;
        remainders.push((share - floor as f64, k));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = n_prime.saturating_sub(assigned);
    let mut cursor = 0usize;
    while left > 0 && !remainders.is_empty() {
        let (_, k) = remainders[cursor % remainders.len()];
        counts[k] += 1;
        left -= 1;
        cursor += 1;
    }
    // guarantee one node per present class, stealing from the largest
    for &k in &present {
        if counts[k] == 0 {
            let biggest = *present
                .iter()
                .max_by_key(|&&j| (counts[j], std::cmp::Reverse(j)))
                .unwrap();
            if counts[biggest] > 1 {
                counts[biggest] -= 1;
                counts[k] += 1;
            }
        }
    }

    let mut labels = Vec::with_capacity(n_prime);
    for k in 0..c {
        labels.extend(std::iter::repeat(k).take(counts[k]));
    }
    let mut rng = Rng::stream(seed, STREAM_SYNTH_INIT);
    let mut features = Array2::<f64>::zeros((labels.len(), g.feature_dim()));
    for (row, &k) in labels.iter().enumerate() {
        let members = &per_class[k];
        let pick = members[rng.below(members.len())];
        features.row_mut(row).assign(&g.features.row(pick));
    }

    Ok(SyntheticGraph {
        features,
        labels,
        num_classes: c,
        structure: StructureSource::Identity,
        ratio,
    })
}

/// Continuous symmetric structure from the pairwise MLP: sigmoid of the
/// symmetrized pair logits, zero diagonal, entries at or below the threshold
/// zeroed.
pub fn generate_structure(phi: &PairwiseMlp, x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let xt = tape.constant(x.clone());
    let ws: Vec<Tensor> = phi.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let out = structure_on_tape(&mut tape, &ws, xt, x.nrows(), phi.threshold)?;
    Ok(tape.value(out).clone())
}

pub(crate) fn offdiag_mask(n: usize) -> Arc<Array2<f64>> {
    let mut m = Array2::<f64>::ones((n, n));
    for i in 0..n {
        m[[i, i]] = 0.0;
    }
    Arc::new(m)
}

pub(crate) fn structure_on_tape(
    tape: &mut Tape,
    phi_weights: &[Tensor],
    x: Tensor,
    n: usize,
    threshold: f64,
) -> Result<Tensor> {
    let pairs = tape.pairwise_concat(x);
    let mut h = tape.matmul(pairs, phi_weights[0])?;
    h = tape.relu(h);
    let logits = tape.matmul(h, phi_weights[1])?;
    let square = tape.reshape(logits, n, n)?;
    let squared_t = tape.transpose(square);
    let sym = tape.add(square, squared_t)?;
    let half = tape.scale(sym, 0.5);
    let sig = tape.sigmoid(half);
    let nodiag = tape.hadamard_const(sig, offdiag_mask(n))?;
    Ok(tape.threshold_sparsify(nodiag, threshold))
}

/// Per-class constant gradients on the source side.
#[derive(Debug, Clone)]
pub struct SourceGradients {
    /// One [d × C] matrix per class; `None` when the class has no train nodes.
    pub per_class: Vec<Option<Array2<f64>>>,
}

/// Propagated features of the source graph under the configured method:
/// identity propagation for DC-Graph, Â^k otherwise.
pub fn source_propagated_features(
    g: &NodeGraph,
    method: CondenseMethod,
    k: usize,
) -> Array2<f64> {
    match method {
        CondenseMethod::DcGraph => g.features.clone(),
        _ => {
            let norm = crate::graph::normalize_adjacency(g);
            let mut x = g.features.clone();
            for _ in 0..k {
                x = norm.matrix.matmul_dense(&x);
            }
            x
        }
    }
}

pub fn source_gradients(
    x_tilde: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    train_idx: &[usize],
    theta: &Array2<f64>,
) -> Result<SourceGradients> {
    let onehot = crate::analytic::one_hot(labels, num_classes);
    let masks = class_masks(labels, num_classes, Some(train_idx));
    let mut per_class = Vec::with_capacity(num_classes);
    for mask in &masks {
        if mask.is_empty() {
            per_class.push(None);
        } else {
            per_class.push(Some(crate::analytic::sgc_weight_gradient(
                x_tilde, theta, &onehot, mask,
            )?));
        }
    }
    Ok(SourceGradients { per_class })
}

/// Gradients of the matching loss and the loss value itself.
#[derive(Debug)]
pub struct MatchingGradients {
    pub loss: f64,
    pub features: Array2<f64>,
    pub structure: Option<Vec<Array2<f64>>>,
}

/// Builds the matching loss on a tape and differentiates it with respect to
/// X′ (and the structure MLP when present). The source gradients and θ are
/// constants. A class present on exactly one side contributes the full
/// cosine distance (one unit per weight column); a class absent from both is
/// skipped.
pub fn matching_gradients(
    s: &SyntheticGraph,
    source: &SourceGradients,
    theta: &Array2<f64>,
    backbone_k: usize,
) -> Result<MatchingGradients> {
    let num_columns = theta.ncols() as f64;
    let mut tape = Tape::new();
    let x = tape.leaf(s.features.clone());
    let (phi_tensors, x_tilde): (Option<Vec<Tensor>>, Tensor) = match &s.structure {
        StructureSource::Identity => (None, x),
        StructureSource::Explicit(_) => {
            return Err(Error::SecondOrderUnsupported(
                "explicit structures are frozen; nothing to differentiate".into(),
            ))
        }
        StructureSource::LearnedPairwise(phi) => {
            let ws: Vec<Tensor> = phi.weights.iter().map(|w| tape.leaf(w.clone())).collect();
            let a = structure_on_tape(&mut tape, &ws, x, s.num_nodes(), phi.threshold)?;
            let ahat = tape.normalize_adjacency_dense(a)?;
            let mut xt = x;
            for _ in 0..backbone_k {
                xt = tape.matmul(ahat, xt)?;
            }
            (Some(ws), xt)
        }
    };

    let theta_t = tape.constant(theta.clone());
    let s_masks = s.class_masks();
    let mut loss_terms: Vec<Tensor> = Vec::new();
    let mut constant_penalty = 0.0;
    for c in 0..s.num_classes {
        let s_has = !s_masks[c].is_empty();
        let g_grad = source.per_class.get(c).and_then(|o| o.as_ref());
        match (s_has, g_grad) {
            (false, None) => {}
            (true, Some(gt)) => {
                let rows = Arc::new(s_masks[c].clone());
                let m = rows.len() as f64;
                let xm = tape.row_gather(x_tilde, rows)?;
                let logits = tape.matmul(xm, theta_t)?;
                let probs = tape.row_softmax(logits);
                let onehot = crate::analytic::one_hot(
                    &s_masks[c].iter().map(|&i| s.labels[i]).collect::<Vec<_>>(),
                    s.num_classes,
                );
                let y = tape.constant(onehot);
                let resid = tape.sub(probs, y)?;
                let xt = tape.transpose(xm);
                let gs_raw = tape.matmul(xt, resid)?;
                let gs = tape.scale(gs_raw, 1.0 / m);
                let gt_t = tape.constant(gt.clone());
                loss_terms.push(tape.column_cosine_distance_sum(gs, gt_t)?);
            }
            // one-sided class: maximal distance, constant w.r.t. X′
            _ => constant_penalty += num_columns,
        }
    }

    let loss_t = match loss_terms.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            Some(acc)
        }
    };

    let (loss_value, grad_x, grad_phi) = match loss_t {
        Some(l) => {
            tape.backward(l)?;
            let gx = tape.grad(x).expect("X' grad").clone();
            let gphi = phi_tensors.map(|ws| {
                ws.iter()
                    .map(|&w| tape.grad(w).expect("phi grad").clone())
                    .collect()
            });
            (tape.scalar_value(l), gx, gphi)
        }
        None => (
            0.0,
            Array2::zeros(s.features.dim()),
            match &s.structure {
                StructureSource::LearnedPairwise(phi) => {
                    Some(phi.weights.iter().map(|w| Array2::zeros(w.dim())).collect())
                }
                _ => None,
            },
        ),
    };

    Ok(MatchingGradients {
        loss: loss_value + constant_penalty,
        features: grad_x,
        structure: grad_phi,
    })
}

/// Scalar matching loss between S and a source graph at fixed θ.
pub fn matching_loss(
    s: &SyntheticGraph,
    source: &NodeGraph,
    theta: &Array2<f64>,
    method: CondenseMethod,
    backbone_k: usize,
    train_idx: &[usize],
) -> Result<f64> {
    let x_tilde = source_propagated_features(source, method, backbone_k);
    let grads = source_gradients(&x_tilde, &source.labels, source.num_classes, train_idx, theta)?;
    matching_value(s, &grads, theta, backbone_k)
}

/// Loss value without building gradient state.
pub fn matching_value(
    s: &SyntheticGraph,
    source: &SourceGradients,
    theta: &Array2<f64>,
    backbone_k: usize,
) -> Result<f64> {
    let x_tilde = match &s.structure {
        StructureSource::Identity => s.features.clone(),
        StructureSource::Explicit(m) => {
            let norm = normalize_csr(m, 0);
            let mut x = s.features.clone();
            for _ in 0..backbone_k {
                x = norm.matrix.matmul_dense(&x);
            }
            x
        }
        StructureSource::LearnedPairwise(phi) => {
            let a = generate_structure(phi, &s.features)?;
            let mut triplets = Vec::new();
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    if a[[i, j]] != 0.0 {
                        triplets.push((i, j, a[[i, j]]));
                    }
                }
            }
            let csr = CsrMatrix::from_triplets(a.nrows(), a.ncols(), triplets);
            let norm = normalize_csr(&csr, 0);
            let mut x = s.features.clone();
            for _ in 0..backbone_k {
                x = norm.matrix.matmul_dense(&x);
            }
            x
        }
    };
    let onehot = crate::analytic::one_hot(&s.labels, s.num_classes);
    let masks = s.class_masks();
    let mut total = 0.0;
    for c in 0..s.num_classes {
        let g_grad = source.per_class.get(c).and_then(|o| o.as_ref());
        match (!masks[c].is_empty(), g_grad) {
            (false, None) => {}
            (true, Some(gt)) => {
                let gs = crate::analytic::sgc_weight_gradient(&x_tilde, theta, &onehot, &masks[c])?;
                total += crate::analytic::column_cosine_distance(&gs, gt);
            }
            _ => total += theta.ncols() as f64,
        }
    }
    Ok(total)
}

/// Spec-shaped wrapper: gradient of the matching loss with respect to X′,
/// with the source-graph gradient held constant. The surrogate must be the
/// linear propagation model.
pub fn matching_grad_wrt_features(
    s: &SyntheticGraph,
    poisoned: &NodeGraph,
    theta: &Array2<f64>,
    method: CondenseMethod,
    backbone_k: usize,
    train_idx: &[usize],
) -> Result<Array2<f64>> {
    let x_tilde = source_propagated_features(poisoned, method, backbone_k);
    let grads = source_gradients(
        &x_tilde,
        &poisoned.labels,
        poisoned.num_classes,
        train_idx,
        theta,
    )?;
    Ok(matching_gradients(s, &grads, theta, backbone_k)?.features)
}

/// Train the surrogate on the synthetic graph for T steps from a fresh init.
pub fn train_surrogate(
    s: &SyntheticGraph,
    config: &CondensationConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    let spec = config.backbone_spec();
    let cfg = TrainConfig {
        lr: config.surrogate_lr,
        epochs: config.surrogate_steps,
        weight_decay: 0.0,
        seed,
    };
    let params = s.train_model(&spec, &cfg)?;
    Ok(params.weights.into_iter().next().expect("sgc weight"))
}

/// Clean bi-level condensation. Returns the synthetic graph and the
/// per-epoch matching-loss trace.
pub fn condense_clean(g: &NodeGraph, config: &CondensationConfig) -> Result<(SyntheticGraph, Vec<f64>)> {
    config.validate()?;
    let mut s = init_synthetic(g, config.ratio, config.seed)?;
    if config.method == CondenseMethod::GCond {
        s.structure = StructureSource::LearnedPairwise(PairwiseMlp::init(
            g.feature_dim(),
            config.structure_width,
            config.structure_threshold,
            config.seed,
        ));
    }
    let x_tilde_source = source_propagated_features(g, config.method, config.backbone_k);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let theta = train_surrogate(
            &s,
            config,
            crate::rng::hash_mix(&[config.seed, STREAM_SURROGATE, epoch as u64]),
        )?;
        let source = source_gradients(
            &x_tilde_source,
            &g.labels,
            g.num_classes,
            &g.splits.train,
            &theta,
        )?;
        let grads = matching_gradients(&s, &source, &theta, config.backbone_k)?;
        apply_synthetic_step(&mut s, &grads, config);
        trace.push(grads.loss);
    }
    Ok((s, trace))
}

/// One plain gradient-descent step on X′ (and the structure MLP).
pub(crate) fn apply_synthetic_step(
    s: &mut SyntheticGraph,
    grads: &MatchingGradients,
    config: &CondensationConfig,
) {
    s.features.scaled_add(-config.lr_features, &grads.features);
    if let (StructureSource::LearnedPairwise(phi), Some(gphi)) =
        (&mut s.structure, grads.structure.as_ref())
    {
        for (w, g) in phi.weights.iter_mut().zip(gphi) {
            w.scaled_add(-config.lr_structure, g);
        }
    }
}
