//! Forward models and trainers: linear propagation (SGC), GCN, and MLP.
//!
//! One parameter layout serves all three kinds: an ordered list of weight
//! matrices chaining d → hidden → ... → C (the SGC carries a single [d × C]
//! weight and propagates k times). No biases. Training is full-batch Adam on
//! masked mean cross-entropy; dropout applies to hidden activations at train
//! time only.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analytic::argmax_row;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::NodeGraph;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sgc,
    Gcn,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Weight-matrix count for GCN/MLP.
    pub layers: usize,
    pub hidden: usize,
    /// Propagation steps for SGC.
    pub k: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn sgc() -> Self {
        ModelSpec {
            kind: ModelKind::Sgc,
            layers: 1,
            hidden: 256,
            k: 2,
            dropout: 0.0,
        }
    }

    pub fn gcn() -> Self {
        ModelSpec {
            kind: ModelKind::Gcn,
            layers: 2,
            hidden: 256,
            k: 2,
            dropout: 0.5,
        }
    }

    pub fn mlp() -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            ..ModelSpec::gcn()
        }
    }

    /// Number of propagation applications in a forward pass.
    pub fn propagations(&self) -> usize {
        match self.kind {
            ModelKind::Sgc => self.k,
            ModelKind::Gcn => self.layers,
            ModelKind::Mlp => 0,
        }
    }

    pub fn weight_shapes(&self, d: usize, num_classes: usize) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Sgc => vec![(d, num_classes)],
            ModelKind::Gcn | ModelKind::Mlp => {
                let mut shapes = Vec::with_capacity(self.layers);
                let mut prev = d;
                for l in 0..self.layers {
                    let next = if l + 1 == self.layers {
                        num_classes
                    } else {
                        self.hidden
                    };
                    shapes.push((prev, next));
                    prev = next;
                }
                shapes
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<Array2<f64>>,
    pub seed: u64,
}

/// Seeded fan-based uniform init.
pub fn init_params(spec: &ModelSpec, d: usize, num_classes: usize, seed: u64) -> ModelParams {
    let mut rng = Rng::stream(seed, 0x1417);
    let weights = spec
        .weight_shapes(d, num_classes)
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
    ModelParams { weights, seed }
}

/// Evaluation-mode forward (no dropout) over pre-normalized propagation
/// operators, one per propagation step.
pub fn forward_with_adjs(
    spec: &ModelSpec,
    params: &ModelParams,
    adjs: &[&CsrMatrix],
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    let props = spec.propagations();
    if adjs.len() != props {
        return if adjs.is_empty() {
            Err(Error::AdjacencyRequired)
        } else {
            Err(Error::ShapeError(format!(
                "expected {props} propagation adjacencies, got {}",
                adjs.len()
            )))
        };
    }
    match spec.kind {
        ModelKind::Sgc => {
            let mut z = x.dot(&params.weights[0]);
            for adj in adjs {
                z = adj.matmul_dense(&z);
            }
            Ok(z)
        }
        ModelKind::Gcn => {
            let mut h = x.clone();
            for (l, w) in params.weights.iter().enumerate() {
                h = adjs[l].matmul_dense(&h.dot(w));
                if l + 1 < params.weights.len() {
                    h.mapv_inplace(|v| v.max(0.0));
                }
            }
            Ok(h)
        }
        ModelKind::Mlp => {
            let mut h = x.clone();
            for (l, w) in params.weights.iter().enumerate() {
                h = h.dot(w);
                if l + 1 < params.weights.len() {
                    h.mapv_inplace(|v| v.max(0.0));
                }
            }
            Ok(h)
        }
    }
}

/// Evaluation-mode forward over a raw (unnormalized, self-loop-free)
/// adjacency; normalization happens here.
pub fn forward(
    spec: &ModelSpec,
    params: &ModelParams,
    adj: Option<&CsrMatrix>,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    let props = spec.propagations();
    let normalized = adj.map(|a| crate::graph::normalize_csr(a, 0).matrix);
    let adjs: Vec<&CsrMatrix> = match normalized.as_ref() {
        Some(a) => vec![a; props],
        None if props == 0 => Vec::new(),
        None => return Err(Error::AdjacencyRequired),
    };
    forward_with_adjs(spec, params, &adjs, x)
}

/// Tape forward for training. Dropout masks, when given, multiply each hidden
/// activation (inverted scaling baked into the mask).
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    weights: &[Tensor],
    adj: Option<&Arc<CsrMatrix>>,
    x: Tensor,
    dropout_masks: Option<&[Arc<Array2<f64>>]>,
) -> Result<Tensor> {
    let propagate = |tape: &mut Tape, t: Tensor| -> Result<Tensor> {
        let adj = adj.ok_or(Error::AdjacencyRequired)?;
        tape.sparse_dense_matmul(adj.clone(), t)
    };
    match spec.kind {
        ModelKind::Sgc => {
            let mut z = tape.matmul(x, weights[0])?;
            for _ in 0..spec.k {
                z = propagate(tape, z)?;
            }
            Ok(z)
        }
        ModelKind::Gcn | ModelKind::Mlp => {
            let mut h = x;
            for (l, &w) in weights.iter().enumerate() {
                h = tape.matmul(h, w)?;
                if spec.kind == ModelKind::Gcn {
                    h = propagate(tape, h)?;
                }
                if l + 1 < weights.len() {
                    h = tape.relu(h);
                    if let Some(masks) = dropout_masks {
                        h = tape.hadamard_const(h, masks[l].clone())?;
                    }
                }
            }
            Ok(h)
        }
    }
}

/// Everything a trainer needs, independent of which graph type it came from.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub features: &'a Array2<f64>,
    pub labels: &'a [usize],
    /// Unnormalized adjacency (the trainer normalizes), absent for
    /// feature-only training.
    pub adjacency: Option<&'a CsrMatrix>,
    pub train_idx: &'a [usize],
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 200,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// Full-batch Adam on masked mean cross-entropy. Deterministic per seed;
/// zero epochs returns the initialization unchanged.
pub fn train(spec: &ModelSpec, data: &TrainData, cfg: &TrainConfig) -> Result<ModelParams> {
    if data.train_idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let d = data.features.ncols();
    let mut params = init_params(spec, d, data.num_classes, cfg.seed);
    let normalized = data
        .adjacency
        .map(|a| Arc::new(crate::graph::normalize_csr(a, 0).matrix));
    if spec.propagations() > 0 && normalized.is_none() {
        return Err(Error::AdjacencyRequired);
    }
    let labels: Arc<Vec<usize>> = Arc::new(data.train_idx.iter().map(|&i| data.labels[i]).collect());
    let rows = Arc::new(data.train_idx.to_vec());
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut dropout_rng = Rng::stream(cfg.seed, 0xD0);
    let n_hidden_layers = match spec.kind {
        ModelKind::Sgc => 0,
        _ => spec.layers.saturating_sub(1),
    };

    for _epoch in 0..cfg.epochs {
        let masks: Option<Vec<Arc<Array2<f64>>>> = if spec.dropout > 0.0 && n_hidden_layers > 0 {
            let n = data.features.nrows();
            Some(
                (0..n_hidden_layers)
                    .map(|_| {
                        let keep = 1.0 - spec.dropout;
                        let mut m = Array2::<f64>::zeros((n, spec.hidden));
                        for v in m.iter_mut() {
                            *v = if dropout_rng.bernoulli(keep) { 1.0 / keep } else { 0.0 };
                        }
                        Arc::new(m)
                    })
                    .collect(),
            )
        } else {
            None
        };
        let mut tape = Tape::new();
        let x = tape.constant(data.features.clone());
        let weights: Vec<Tensor> = params.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let logits = forward_on_tape(
            &mut tape,
            spec,
            &weights,
            normalized.as_ref(),
            x,
            masks.as_deref(),
        )?;
        let picked = tape.row_gather(logits, rows.clone())?;
        let loss = tape.cross_entropy_mean(picked, labels.clone())?;
        tape.backward(loss)?;
        let grads: Vec<Array2<f64>> = weights
            .iter()
            .map(|&w| tape.grad(w).expect("weight grad").clone())
            .collect();
        opt.step(&mut params.weights, &grads);
    }
    Ok(params)
}

/// Argmax accuracy over `mask`; ties break toward the lowest class index.
pub fn evaluate_accuracy(
    spec: &ModelSpec,
    params: &ModelParams,
    adj: Option<&CsrMatrix>,
    features: &Array2<f64>,
    labels: &[usize],
    mask: &[usize],
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let logits = forward(spec, params, adj, features)?;
    let mut correct = 0usize;
    for &i in mask {
        if argmax_row(&logits.row(i).to_owned()) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// Accuracy of a model on a host graph split.
pub fn accuracy_on_graph(
    spec: &ModelSpec,
    params: &ModelParams,
    g: &NodeGraph,
    mask: &[usize],
) -> Result<f64> {
    evaluate_accuracy(spec, params, Some(&g.adjacency), &g.features, &g.labels, mask)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsSidecar {
    spec: ModelSpec,
    seed: u64,
    shapes: Vec<(usize, usize)>,
}

/// Binary blob (little-endian f64, matrices concatenated row-major) plus a
/// JSON sidecar holding the spec, seed, and shapes.
pub fn save_params(spec: &ModelSpec, params: &ModelParams, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let sidecar = ParamsSidecar {
        spec: *spec,
        seed: params.seed,
        shapes: params.weights.iter().map(|w| w.dim()).collect(),
    };
    fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    let mut blob = Vec::new();
    for w in &params.weights {
        for v in w.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(prefix.with_extension("bin"), blob)?;
    Ok(())
}

pub fn load_params(prefix: impl AsRef<Path>) -> Result<(ModelSpec, ModelParams)> {
    let prefix = prefix.as_ref();
    let sidecar: ParamsSidecar =
        serde_json::from_str(&fs::read_to_string(prefix.with_extension("json"))?)?;
    let blob = fs::read(prefix.with_extension("bin"))?;
    let total: usize = sidecar.shapes.iter().map(|&(r, c)| r * c).sum();
    if blob.len() != total * 8 {
        return Err(Error::BundleCorrupt(format!(
            "params blob holds {} bytes, expected {}",
            blob.len(),
            total * 8
        )));
    }
    let mut vals = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut weights = Vec::new();
    for &(r, c) in &sidecar.shapes {
        let data: Vec<f64> = (&mut vals).take(r * c).collect();
        weights.push(Array2::from_shape_vec((r, c), data).expect("shape checked"));
    }
    Ok((
        sidecar.spec,
        ModelParams {
            weights,
            seed: sidecar.seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm_graph, normalize_adjacency};
    use ndarray::arr2;

    #[test]
    fn mlp_identical_rows_identical_logits() {
        let spec = ModelSpec::mlp();
        let params = init_params(&spec, 3, 2, 7);
        let x = arr2(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]);
        let logits = forward(&spec, &params, None, &x).unwrap();
        for c in 0..2 {
            assert_eq!(logits[[0, c]], logits[[1, c]]);
        }
    }

    #[test]
    fn sgc_with_zero_hops_is_linear_map() {
        let spec = ModelSpec {
            k: 0,
            ..ModelSpec::sgc()
        };
        let params = init_params(&spec, 4, 3, 1);
        let x = arr2(&[[1.0, 0.0, -1.0, 2.0], [0.5, 0.5, 0.5, 0.5]]);
        let logits = forward(&spec, &params, None, &x).unwrap();
        let direct = x.dot(&params.weights[0]);
        assert!((&logits - &direct).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn missing_adjacency_rejected_for_graph_models() {
        let spec = ModelSpec::gcn();
        let params = init_params(&spec, 2, 2, 0);
        let x = arr2(&[[1.0, 0.0]]);
        assert!(matches!(
            forward(&spec, &params, None, &x),
            Err(Error::AdjacencyRequired)
        ));
    }

    #[test]
    fn gcn_matches_dense_hand_computation() {
        let g = generate_sbm_graph(5, 2, 3, 0.9, 0.2, 2).unwrap();
        let spec = ModelSpec {
            dropout: 0.0,
            hidden: 4,
            ..ModelSpec::gcn()
        };
        let params = init_params(&spec, 3, 2, 5);
        let logits = forward(&spec, &params, Some(&g.adjacency), &g.features).unwrap();
        let ahat = normalize_adjacency(&g).matrix.to_dense();
        let h1 = ahat.dot(&g.features.dot(&params.weights[0])).mapv(|v| v.max(0.0));
        let want = ahat.dot(&h1.dot(&params.weights[1]));
        assert!((&logits - &want).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn sgc_equals_composed_gcn_on_nonneg_inputs() {
        // With nonnegative features and weights the GCN relu is the identity,
        // so GCN(W0, W1) == SGC(k=2, W0·W1).
        let g = generate_sbm_graph(6, 2, 3, 0.8, 0.3, 3).unwrap();
        let x = g.features.mapv(f64::abs);
        let gcn = ModelSpec {
            dropout: 0.0,
            hidden: 4,
            ..ModelSpec::gcn()
        };
        let mut p = init_params(&gcn, 3, 2, 9);
        for w in &mut p.weights {
            w.mapv_inplace(f64::abs);
        }
        let gcn_logits = forward(&gcn, &p, Some(&g.adjacency), &x).unwrap();
        let sgc = ModelSpec::sgc();
        let composed = ModelParams {
            weights: vec![p.weights[0].dot(&p.weights[1])],
            seed: 0,
        };
        let sgc_logits = forward(&sgc, &composed, Some(&g.adjacency), &x).unwrap();
        assert!((&gcn_logits - &sgc_logits).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn permutation_equivariance() {
        let g = generate_sbm_graph(8, 2, 4, 0.7, 0.2, 4).unwrap();
        let perm: Vec<usize> = vec![3, 1, 7, 0, 6, 2, 5, 4];
        let mut feats_p = Array2::<f64>::zeros(g.features.dim());
        for (new, &old) in perm.iter().enumerate() {
            feats_p.row_mut(new).assign(&g.features.row(old));
        }
        let mut edges_p = Vec::new();
        let inv: Vec<usize> = {
            let mut inv = vec![0; 8];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            inv
        };
        for (u, v) in g.undirected_edges() {
            edges_p.push((inv[u], inv[v]));
        }
        let gp = NodeGraph::from_parts(
            feats_p,
            perm.iter().map(|&o| g.labels[o]).collect(),
            2,
            &edges_p,
            Default::default(),
        )
        .unwrap();
        for spec in [ModelSpec::sgc(), ModelSpec {dropout: 0.0, hidden: 4, ..ModelSpec::gcn()}, ModelSpec {dropout: 0.0, hidden: 4, ..ModelSpec::mlp()}] {
            let params = init_params(&spec, 4, 2, 11);
            let adj = if spec.propagations() > 0 { Some(&g.adjacency) } else { None };
            let adj_p = if spec.propagations() > 0 { Some(&gp.adjacency) } else { None };
            let l = forward(&spec, &params, adj, &g.features).unwrap();
            let lp = forward(&spec, &params, adj_p, &gp.features).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..2 {
                    assert!((lp[[new, c]] - l[[old, c]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let g = generate_sbm_graph(20, 2, 4, 0.5, 0.1, 6).unwrap();
        let spec = ModelSpec::gcn();
        let data = TrainData {
            features: &g.features,
            labels: &g.labels,
            adjacency: Some(&g.adjacency),
            train_idx: &g.splits.train,
            num_classes: 2,
        };
        let cfg = TrainConfig {
            epochs: 0,
            seed: 42,
            ..Default::default()
        };
        let trained = train(&spec, &data, &cfg).unwrap();
        let fresh = init_params(&spec, 4, 2, 42);
        assert_eq!(trained.weights, fresh.weights);
    }

    #[test]
    fn training_is_deterministic() {
        let g = generate_sbm_graph(30, 2, 4, 0.4, 0.05, 8).unwrap();
        let spec = ModelSpec {
            hidden: 8,
            ..ModelSpec::gcn()
        };
        let data = TrainData {
            features: &g.features,
            labels: &g.labels,
            adjacency: Some(&g.adjacency),
            train_idx: &g.splits.train,
            num_classes: 2,
        };
        let cfg = TrainConfig {
            epochs: 20,
            seed: 5,
            ..Default::default()
        };
        let a = train(&spec, &data, &cfg).unwrap();
        let b = train(&spec, &data, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        // linearly separable features, MLP without graph
        let mut x = Array2::<f64>::zeros((20, 2));
        let mut labels = vec![0usize; 20];
        for i in 0..20 {
            let c = i % 2;
            labels[i] = c;
            x[[i, c]] = 2.0 + (i as f64) * 0.01;
        }
        let idx: Vec<usize> = (0..20).collect();
        let spec = ModelSpec {
            dropout: 0.0,
            hidden: 8,
            ..ModelSpec::mlp()
        };
        let data = TrainData {
            features: &x,
            labels: &labels,
            adjacency: None,
            train_idx: &idx,
            num_classes: 2,
        };
        let cfg = TrainConfig {
            epochs: 200,
            weight_decay: 0.0,
            seed: 3,
            ..Default::default()
        };
        let params = train(&spec, &data, &cfg).unwrap();
        let acc = evaluate_accuracy(&spec, &params, None, &x, &labels, &idx).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_logits_tie_break_to_class_zero() {
        let spec = ModelSpec {
            dropout: 0.0,
            ..ModelSpec::mlp()
        };
        // zero weights → constant (zero) logits everywhere
        let params = ModelParams {
            weights: vec![Array2::zeros((3, 256)), Array2::zeros((256, 2))],
            seed: 0,
        };
        let x = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
        let labels = vec![0, 1, 0, 1];
        let mask = vec![0, 1, 2, 3];
        let acc = evaluate_accuracy(&spec, &params, None, &x, &labels, &mask).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn evaluation_forward_is_dropout_free_and_repeatable() {
        let g = generate_sbm_graph(15, 2, 4, 0.4, 0.1, 12).unwrap();
        let spec = ModelSpec::gcn(); // dropout 0.5, train-time only
        let params = init_params(&spec, 4, 2, 8);
        let a = forward(&spec, &params, Some(&g.adjacency), &g.features).unwrap();
        let b = forward(&spec, &params, Some(&g.adjacency), &g.features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn params_round_trip_bitwise() {
        let spec = ModelSpec::gcn();
        let params = init_params(&spec, 5, 3, 77);
        let dir = std::env::temp_dir().join(format!("bgc_params_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("model");
        save_params(&spec, &params, &prefix).unwrap();
        let (spec2, params2) = load_params(&prefix).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params.weights, params2.weights);
        fs::remove_dir_all(&dir).unwrap();
    }
}
