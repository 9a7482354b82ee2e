//! Finite-difference validation of every exported differentiable path.
//!
//! Test-support module: the central-difference oracle here is independent of
//! the reverse-mode engine it checks. Both the integration tests and the
//! acceptance suite drive these batteries.

use std::sync::Arc;

use ndarray::Array2;

use crate::analytic;
use crate::autodiff::{Tape, Tensor};
use crate::backdoor::{
    trigger_loss_with_path, AttackBudget, TriggerGenerator, TriggerPath,
};
use crate::condense::{
    generate_structure, matching_gradients, matching_value, source_gradients, PairwiseMlp,
    SourceGradients, StructureSource, SyntheticGraph,
};
use crate::graph::generate_sbm_graph;
use crate::models::{self, ModelParams, ModelSpec};
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

pub const FD_STEP: f64 = 1e-6;

/// Central differences of a scalar function at `x0`.
pub fn finite_diff(
    f: &mut dyn FnMut(&Array2<f64>) -> f64,
    x0: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let mut grad = Array2::<f64>::zeros(x0.dim());
    let mut x = x0.clone();
    for i in 0..x0.nrows() {
        for j in 0..x0.ncols() {
            let orig = x[[i, j]];
            x[[i, j]] = orig + h;
            let plus = f(&x);
            x[[i, j]] = orig - h;
            let minus = f(&x);
            x[[i, j]] = orig;
            grad[[i, j]] = (plus - minus) / (2.0 * h);
        }
    }
    grad
}

/// Frobenius-relative disagreement. The denominator is floored at 1e-4:
/// below that, central differences of an O(1) loss at h = 1e-6 are noise
/// (≈1e-10 per entry), and a pure ratio would measure the oracle's own
/// error. A wrong gradient of any visible magnitude still fails through the
/// `got` term in the numerator.
pub fn rel_err(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let diff = (got - want).iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-4)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.normal();
    }
    m
}

/// Gaussian entries nudged away from a kink location.
fn random_matrix_away_from(rng: &mut Rng, rows: usize, cols: usize, kink: f64) -> Array2<f64> {
    let mut m = random_matrix(rng, rows, cols);
    for v in m.iter_mut() {
        if (*v - kink).abs() < 1e-3 {
            *v = kink + 1e-2 * if *v >= kink { 1.0 } else { -1.0 };
        }
    }
    m
}

/// Reverse-mode vs central differences for every tape primitive on random
/// 5×4 (or op-appropriate) inputs across the given seeds.
pub fn check_primitives(seeds: std::ops::Range<u64>, tolerance: f64) -> Vec<CheckReport> {
    type LossBuilder = Box<dyn Fn(&mut Tape, Tensor) -> Tensor>;

    let mut reports: Vec<CheckReport> = Vec::new();
    let mut run = |name: &str, build_input: &dyn Fn(&mut Rng) -> Array2<f64>, builder: LossBuilder| {
        let mut worst: f64 = 0.0;
        for seed in seeds.clone() {
            let mut rng = Rng::stream2(0xC0FFEE, seed, name.len() as u64);
            let x0 = build_input(&mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let loss = builder(&mut tape, x);
            tape.backward(loss).expect("backward");
            let got = tape.grad(x).expect("grad").clone();
            let mut f = |xp: &Array2<f64>| {
                let mut t = Tape::new();
                let xi = t.constant(xp.clone());
                let l = builder(&mut t, xi);
                t.scalar_value(l)
            };
            let want = finite_diff(&mut f, &x0, FD_STEP);
            worst = worst.max(rel_err(&got, &want));
        }
        reports.push(CheckReport {
            name: format!("primitive/{name}"),
            worst,
            tolerance,
        });
    };

    let gauss: &dyn Fn(&mut Rng) -> Array2<f64> = &|rng| random_matrix(rng, 5, 4);
    fn proj(rng: &mut Rng) -> Arc<Array2<f64>> {
        Arc::new(random_matrix(rng, 5, 4))
    }

    // each op is scalarized through a fixed random projection so the full
    // Jacobian structure is exercised
    run(
        "add",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(1);
            let other = t.constant(random_matrix(&mut r, 5, 4));
            let s = t.add(x, other).unwrap();
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "sub",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(2);
            let other = t.constant(random_matrix(&mut r, 5, 4));
            let s = t.sub(other, x).unwrap();
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "scale",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(3);
            let s = t.scale(x, -1.7);
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "hadamard",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(4);
            let other = t.constant(random_matrix(&mut r, 5, 4));
            let s = t.hadamard(x, other).unwrap();
            t.sum(s)
        }),
    );
    run(
        "matmul_lhs",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(5);
            let rhs = t.constant(random_matrix(&mut r, 4, 3));
            let s = t.matmul(x, rhs).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 5, 3))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "matmul_rhs",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(6);
            let lhs = t.constant(random_matrix(&mut r, 3, 5));
            let s = t.matmul(lhs, x).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 3, 4))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "transpose",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(7);
            let s = t.transpose(x);
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 4, 5))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "sparse_dense_matmul",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(8);
            let mut trips = Vec::new();
            for i in 0..6 {
                for j in 0..5 {
                    if r.bernoulli(0.4) {
                        trips.push((i, j, r.normal()));
                    }
                }
            }
            let sp = Arc::new(CsrMatrix::from_triplets(6, 5, trips));
            let s = t.sparse_dense_matmul(sp, x).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 6, 4))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "relu",
        &|rng| random_matrix_away_from(rng, 5, 4, 0.0),
        Box::new(|t, x| {
            let mut r = Rng::new(9);
            let s = t.relu(x);
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "sigmoid",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(10);
            let s = t.sigmoid(x);
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "row_softmax",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(11);
            let s = t.row_softmax(x);
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "cross_entropy_mean",
        gauss,
        Box::new(|t, x| {
            t.cross_entropy_mean(x, Arc::new(vec![0, 2, 1, 3, 2])).unwrap()
        }),
    );
    run(
        "row_gather",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(12);
            let s = t.row_gather(x, Arc::new(vec![4, 0, 2, 0])).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 4, 4))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "concat_rows",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(13);
            let other = t.constant(random_matrix(&mut r, 2, 4));
            let s = t.concat_rows(other, x).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 7, 4))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "reshape",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(14);
            let s = t.reshape(x, 2, 10).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 2, 10))).unwrap();
            t.sum(p)
        }),
    );
    run("sum", gauss, Box::new(|t, x| t.sum(x)));
    run("frobenius_norm", gauss, Box::new(|t, x| t.frobenius_norm(x)));
    run(
        "column_cosine_distance_lhs",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(15);
            let other = t.constant(random_matrix(&mut r, 5, 4));
            t.column_cosine_distance_sum(x, other).unwrap()
        }),
    );
    run(
        "column_cosine_distance_rhs",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(16);
            let other = t.constant(random_matrix(&mut r, 5, 4));
            t.column_cosine_distance_sum(other, x).unwrap()
        }),
    );
    run(
        "threshold_sparsify",
        &|rng| random_matrix_away_from(rng, 5, 4, 0.5),
        Box::new(|t, x| {
            let mut r = Rng::new(17);
            let s = t.threshold_sparsify(x, 0.5);
            let p = t.hadamard_const(s, proj(&mut r)).unwrap();
            t.sum(p)
        }),
    );
    run(
        "normalize_adjacency_dense",
        &|rng| {
            // nonnegative weighted adjacency keeps degrees comfortably positive
            let mut m = random_matrix(rng, 5, 5).mapv(f64::abs);
            for i in 0..5 {
                m[[i, i]] = 0.0;
            }
            m
        },
        Box::new(|t, x| {
            let mut r = Rng::new(18);
            let s = t.normalize_adjacency_dense(x).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 5, 5))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "pairwise_concat",
        &|rng| random_matrix(rng, 4, 3),
        Box::new(|t, x| {
            let mut r = Rng::new(19);
            let s = t.pairwise_concat(x);
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 16, 6))).unwrap();
            t.sum(p)
        }),
    );
    run(
        "pad_block",
        gauss,
        Box::new(|t, x| {
            let mut r = Rng::new(20);
            let s = t.pad_block(x, 8, 7, 2, 1).unwrap();
            let p = t.hadamard_const(s, Arc::new(random_matrix(&mut r, 8, 7))).unwrap();
            t.sum(p)
        }),
    );

    reports
}

/// Straight-through contract: with a linear readout, the gradient through
/// the binarization equals the gradient with the continuous values used
/// directly, even though the forward values differ.
pub fn check_ste_contract(seeds: std::ops::Range<u64>) -> CheckReport {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut rng = Rng::stream(0x57E, seed);
        let p0 = random_matrix(&mut rng, 4, 4).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let readout = Arc::new(random_matrix(&mut rng, 4, 4));

        let grad_of = |binarize: bool| -> Array2<f64> {
            let mut t = Tape::new();
            let p = t.leaf(p0.clone());
            let b = if binarize { t.ste_binarize(p) } else { p };
            let w = t.hadamard_const(b, readout.clone()).unwrap();
            let l = t.sum(w);
            t.backward(l).unwrap();
            t.grad(p).unwrap().clone()
        };
        let ste = grad_of(true);
        let relaxed = grad_of(false);
        worst = worst.max(rel_err(&ste, &relaxed));
    }
    CheckReport {
        name: "ste/linear-readout-identity".into(),
        worst,
        tolerance: 1e-12,
    }
}

/// Two-layer graph-convolution loss against finite differences.
pub fn check_model_backward(seeds: std::ops::Range<u64>, tolerance: f64) -> CheckReport {
    let g = generate_sbm_graph(8, 2, 3, 0.5, 0.2, 77).unwrap();
    let norm = Arc::new(crate::graph::normalize_adjacency(&g).matrix);
    let spec = ModelSpec {
        dropout: 0.0,
        hidden: 4,
        ..ModelSpec::gcn()
    };
    let labels = Arc::new(g.labels.clone());
    let rows: Arc<Vec<usize>> = Arc::new((0..8).collect());
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let params = models::init_params(&spec, 3, 2, seed);
        for wi in 0..2 {
            let loss_at = |weights: &[Array2<f64>]| -> f64 {
                let mut t = Tape::new();
                let x = t.constant(g.features.clone());
                let ws: Vec<Tensor> = weights.iter().map(|w| t.constant(w.clone())).collect();
                let logits =
                    models::forward_on_tape(&mut t, &spec, &ws, Some(&norm), x, None).unwrap();
                let picked = t.row_gather(logits, rows.clone()).unwrap();
                let l = t.cross_entropy_mean(picked, labels.clone()).unwrap();
                t.scalar_value(l)
            };
            let mut t = Tape::new();
            let x = t.constant(g.features.clone());
            let ws: Vec<Tensor> = params.weights.iter().map(|w| t.leaf(w.clone())).collect();
            let logits = models::forward_on_tape(&mut t, &spec, &ws, Some(&norm), x, None).unwrap();
            let picked = t.row_gather(logits, rows.clone()).unwrap();
            let l = t.cross_entropy_mean(picked, labels.clone()).unwrap();
            t.backward(l).unwrap();
            let got = t.grad(ws[wi]).unwrap().clone();

            let mut f = |wp: &Array2<f64>| {
                let mut weights = params.weights.clone();
                weights[wi] = wp.clone();
                loss_at(&weights)
            };
            let want = finite_diff(&mut f, &params.weights[wi], FD_STEP);
            worst = worst.max(rel_err(&got, &want));
        }
    }
    CheckReport {
        name: "model/gcn-two-layer-backward".into(),
        worst,
        tolerance,
    }
}

/// Analytic linear-surrogate weight gradient against the tape.
pub fn check_sgc_analytic(seeds: std::ops::Range<u64>) -> CheckReport {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut rng = Rng::stream(0x5C, seed);
        let x = random_matrix(&mut rng, 7, 5);
        let w0 = random_matrix(&mut rng, 5, 3);
        let labels: Vec<usize> = (0..7).map(|_| rng.below(3)).collect();
        let mask: Vec<usize> = vec![0, 2, 3, 6];
        let onehot = analytic::one_hot(&labels, 3);
        let got = analytic::sgc_weight_gradient(&x, &w0, &onehot, &mask).unwrap();

        let mut t = Tape::new();
        let xt = t.constant(x.clone());
        let wt = t.leaf(w0.clone());
        let logits = t.matmul(xt, wt).unwrap();
        let picked = t.row_gather(logits, Arc::new(mask.clone())).unwrap();
        let masked_labels: Arc<Vec<usize>> = Arc::new(mask.iter().map(|&i| labels[i]).collect());
        let l = t.cross_entropy_mean(picked, masked_labels).unwrap();
        t.backward(l).unwrap();
        let want = t.grad(wt).unwrap().clone();
        let abs = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(abs);
    }
    CheckReport {
        name: "sgc/analytic-vs-tape".into(),
        worst,
        tolerance: 1e-10,
    }
}

fn small_matching_instance(seed: u64, learned: bool) -> (SyntheticGraph, SourceGradients, Array2<f64>) {
    let g = generate_sbm_graph(12, 2, 4, 0.5, 0.1, seed).unwrap();
    let mut rng = Rng::stream(0x6A7C, seed);
    let theta = random_matrix(&mut rng, 4, 2);
    let x_tilde = crate::condense::source_propagated_features(
        &g,
        crate::condense::CondenseMethod::GCond,
        2,
    );
    let train: Vec<usize> = (0..12).collect();
    let source = source_gradients(&x_tilde, &g.labels, 2, &train, &theta).unwrap();
    let structure = if learned {
        StructureSource::LearnedPairwise(PairwiseMlp::init(4, 6, 0.35, seed))
    } else {
        StructureSource::Identity
    };
    let s = SyntheticGraph {
        features: random_matrix(&mut rng, 6, 4),
        labels: vec![0, 0, 0, 1, 1, 1],
        num_classes: 2,
        structure,
        ratio: 0.5,
    };
    (s, source, theta)
}

/// Matching-loss gradient with respect to X′ (and the structure MLP) against
/// finite differences of the independent plain-path value computation.
pub fn check_matching_gradients(seeds: std::ops::Range<u64>, tolerance: f64) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for (label, learned) in [("identity", false), ("learned-structure", true)] {
        let mut worst_x: f64 = 0.0;
        let mut worst_phi: f64 = 0.0;
        for seed in seeds.clone() {
            let (s, source, theta) = small_matching_instance(seed, learned);
            let grads = matching_gradients(&s, &source, &theta, 2).unwrap();

            let mut f = |xp: &Array2<f64>| {
                let mut sp = s.clone();
                sp.features = xp.clone();
                matching_value(&sp, &source, &theta, 2).unwrap()
            };
            let want = finite_diff(&mut f, &s.features, FD_STEP);
            worst_x = worst_x.max(rel_err(&grads.features, &want));

            if learned {
                let gphi = grads.structure.as_ref().unwrap();
                for wi in 0..gphi.len() {
                    let base = match &s.structure {
                        StructureSource::LearnedPairwise(p) => p.clone(),
                        _ => unreachable!(),
                    };
                    let mut f = |wp: &Array2<f64>| {
                        let mut phi = base.clone();
                        phi.weights[wi] = wp.clone();
                        let mut sp = s.clone();
                        sp.structure = StructureSource::LearnedPairwise(phi);
                        matching_value(&sp, &source, &theta, 2).unwrap()
                    };
                    let want = finite_diff(&mut f, &base.weights[wi], FD_STEP);
                    worst_phi = worst_phi.max(rel_err(&gphi[wi], &want));
                }
            }
        }
        reports.push(CheckReport {
            name: format!("matching/features-{label}"),
            worst: worst_x,
            tolerance,
        });
        if learned {
            reports.push(CheckReport {
                name: "matching/structure-mlp".into(),
                worst: worst_phi,
                tolerance,
            });
        }
    }
    reports
}

/// Structure-generator gradient of a random scalar of A′ with respect to φ.
pub fn check_structure_generator(seeds: std::ops::Range<u64>, tolerance: f64) -> CheckReport {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut rng = Rng::stream(0x9E4, seed);
        let x0 = random_matrix(&mut rng, 5, 3);
        let phi = PairwiseMlp::init(3, 6, 0.3, seed);
        let readout = Arc::new(random_matrix(&mut rng, 5, 5));

        let mut t = Tape::new();
        let xt = t.constant(x0.clone());
        let ws: Vec<Tensor> = phi.weights.iter().map(|w| t.leaf(w.clone())).collect();
        let a = crate::condense::structure_on_tape(&mut t, &ws, xt, 5, phi.threshold).unwrap();
        let r = t.hadamard_const(a, readout.clone()).unwrap();
        let l = t.sum(r);
        t.backward(l).unwrap();

        for wi in 0..2 {
            let got = t.grad(ws[wi]).unwrap().clone();
            let mut f = |wp: &Array2<f64>| {
                let mut p = phi.clone();
                p.weights[wi] = wp.clone();
                let a = generate_structure(&p, &x0).unwrap();
                (&a * &*readout).sum()
            };
            let want = finite_diff(&mut f, &phi.weights[wi], FD_STEP);
            worst = worst.max(rel_err(&got, &want));
        }
    }
    CheckReport {
        name: "structure/pairwise-mlp".into(),
        worst,
        tolerance,
    }
}

/// Trigger-generator backward: the relaxed forward against finite
/// differences over every generator parameter, and the straight-through
/// feature path over the feature head.
pub fn check_trigger_generator(seeds: std::ops::Range<u64>, tolerance: f64) -> Vec<CheckReport> {
    let g = generate_sbm_graph(16, 2, 4, 0.4, 0.15, 909).unwrap();
    let surrogate_spec = ModelSpec::sgc();
    let budget = AttackBudget {
        trigger_size: 3,
        generator_hidden: 5,
        ..Default::default()
    };
    let update_set = vec![2usize, 9];

    let mut worst_relaxed: f64 = 0.0;
    let mut worst_ste_features: f64 = 0.0;
    for seed in seeds {
        let gen = TriggerGenerator::init(&g, &budget, seed);
        let mut rng = Rng::stream(0x7716, seed);
        let surrogate = ModelParams {
            weights: vec![random_matrix(&mut rng, 4, 2)],
            seed,
        };

        let loss_with = |gen: &TriggerGenerator, path: TriggerPath| -> f64 {
            trigger_loss_with_path(gen, &surrogate_spec, &surrogate, &g, &update_set, 0, path)
                .unwrap()
                .loss
        };
        let assemble = |gen: &TriggerGenerator, idx: usize, wp: &Array2<f64>| -> TriggerGenerator {
            let mut gp = gen.clone();
            let n_enc = gp.encoder.len();
            if idx < n_enc {
                gp.encoder[idx] = wp.clone();
            } else if idx == n_enc {
                gp.w_f = wp.clone();
            } else {
                gp.w_a = wp.clone();
            }
            gp
        };

        // relaxed path: smooth end to end, every parameter fd-checkable
        let relaxed = trigger_loss_with_path(
            &gen,
            &surrogate_spec,
            &surrogate,
            &g,
            &update_set,
            0,
            TriggerPath::Relaxed,
        )
        .unwrap();
        let all_params: Vec<Array2<f64>> = gen.params().into_iter().cloned().collect();
        for (idx, w0) in all_params.iter().enumerate() {
            let mut f = |wp: &Array2<f64>| loss_with(&assemble(&gen, idx, wp), TriggerPath::Relaxed);
            let want = finite_diff(&mut f, w0, FD_STEP);
            worst_relaxed = worst_relaxed.max(rel_err(&relaxed.grads[idx], &want));
        }

        // binarized path: the feature head is smooth (structure fixed under
        // perturbation almost surely)
        let ste = trigger_loss_with_path(
            &gen,
            &surrogate_spec,
            &surrogate,
            &g,
            &update_set,
            0,
            TriggerPath::SteBinarized,
        )
        .unwrap();
        let wf_idx = gen.encoder.len();
        let mut f =
            |wp: &Array2<f64>| loss_with(&assemble(&gen, wf_idx, wp), TriggerPath::SteBinarized);
        let want = finite_diff(&mut f, &gen.w_f, FD_STEP);
        worst_ste_features = worst_ste_features.max(rel_err(&ste.grads[wf_idx], &want));
    }

    vec![
        CheckReport {
            name: "trigger/relaxed-full-fd".into(),
            worst: worst_relaxed,
            tolerance,
        },
        CheckReport {
            name: "trigger/ste-feature-head-fd".into(),
            worst: worst_ste_features,
            tolerance,
        },
    ]
}

/// Feature-head example: ∂ sum(X^g) / ∂ W_f against finite differences.
pub fn check_trigger_feature_head(seeds: std::ops::Range<u64>, tolerance: f64) -> CheckReport {
    let g = generate_sbm_graph(10, 2, 3, 0.5, 0.2, 55).unwrap();
    let budget = AttackBudget {
        trigger_size: 3,
        generator_hidden: 4,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let gen = TriggerGenerator::init(&g, &budget, seed);
        let h = gen.encode(&g).unwrap();
        let v = 4usize;

        let mut t = Tape::new();
        let hv = t.constant(h.row(v).insert_axis(ndarray::Axis(0)).to_owned());
        let wf = t.leaf(gen.w_f.clone());
        let flat = t.matmul(hv, wf).unwrap();
        let xg = t.reshape(flat, 3, 3).unwrap();
        let l = t.sum(xg);
        t.backward(l).unwrap();
        let got = t.grad(wf).unwrap().clone();

        let mut f = |wp: &Array2<f64>| {
            let mut gp = gen.clone();
            gp.w_f = wp.clone();
            gp.trigger_from_row(h.row(v)).features.sum()
        };
        let want = finite_diff(&mut f, &gen.w_f, FD_STEP);
        worst = worst.max(rel_err(&got, &want));
    }
    CheckReport {
        name: "trigger/feature-head-sum".into(),
        worst,
        tolerance,
    }
}

/// The full battery at the acceptance tolerances.
pub fn run_all(seeds: std::ops::Range<u64>) -> Vec<CheckReport> {
    let mut reports = check_primitives(seeds.clone(), 1e-5);
    reports.push(check_ste_contract(seeds.clone()));
    reports.push(check_model_backward(seeds.clone(), 1e-5));
    reports.push(check_sgc_analytic(seeds.clone()));
    reports.extend(check_matching_gradients(seeds.clone(), 1e-4));
    reports.push(check_structure_generator(seeds.clone(), 1e-4));
    reports.extend(check_trigger_generator(seeds.clone(), 1e-5));
    reports.push(check_trigger_feature_head(seeds, 1e-4));
    reports
}
