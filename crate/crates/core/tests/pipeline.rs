//! Cross-module integration: trainability oracles, optimization diagnostics,
//! and the zero-budget degeneracy of the attack loop.

use bgc_core::backdoor::{
    run_bgc, trigger_loss_and_grads, AttackBudget, PoisonBudget, TriggerGenerator,
};
use bgc_core::condense::{condense_clean, CondensationConfig, CondenseMethod, StructureSource};
use bgc_core::graph::generate_sbm_graph;
use bgc_core::models::{self, ModelSpec, TrainConfig, TrainData};
use bgc_core::optim::Adam;

fn train_gcn_accuracy(g: &bgc_core::graph::NodeGraph, seed: u64) -> f64 {
    let spec = ModelSpec {
        hidden: 32,
        dropout: 0.0,
        ..ModelSpec::gcn()
    };
    let data = TrainData {
        features: &g.features,
        labels: &g.labels,
        adjacency: Some(&g.adjacency),
        train_idx: &g.splits.train,
        num_classes: g.num_classes,
    };
    let cfg = TrainConfig {
        epochs: 200,
        weight_decay: 0.0,
        seed,
        ..Default::default()
    };
    let params = models::train(&spec, &data, &cfg).unwrap();
    models::accuracy_on_graph(&spec, &params, g, &g.splits.test).unwrap()
}

#[test]
fn sbm_graph_is_separable_by_a_gcn() {
    // the generator's sanity oracle: structure + features are learnable
    let g = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7).unwrap();
    let acc = train_gcn_accuracy(&g, 0);
    assert!(acc >= 0.9, "gcn test accuracy {acc}");
}

#[test]
fn random_init_accuracy_is_chance_level() {
    let g = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 11).unwrap();
    let spec = ModelSpec {
        hidden: 32,
        ..ModelSpec::gcn()
    };
    let mut accs = Vec::new();
    for seed in 0..10 {
        let params = models::init_params(&spec, 16, 3, seed);
        accs.push(models::accuracy_on_graph(&spec, &params, &g, &g.splits.test).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 1.0 / 3.0).abs() < 0.15, "mean chance accuracy {mean}");
}

#[test]
fn selector_reaches_sane_accuracy() {
    let g = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 3).unwrap();
    let (params, embeddings) = bgc_core::backdoor::train_selector(&g, 5).unwrap();
    assert_eq!(embeddings.nrows(), 300);
    let spec = ModelSpec {
        hidden: 64,
        ..ModelSpec::gcn()
    };
    let acc = models::accuracy_on_graph(&spec, &params, &g, &g.splits.test).unwrap();
    assert!(acc >= 0.75, "selector accuracy {acc}");
}

#[test]
fn trigger_loss_descends_under_generator_steps() {
    let g = generate_sbm_graph(120, 3, 12, 0.15, 0.02, 9).unwrap();
    let budget = AttackBudget {
        generator_hidden: 16,
        trigger_feature_scale: None,
        ..Default::default()
    };
    let mut gen = TriggerGenerator::init(&g, &budget, 1);
    let spec = ModelSpec::sgc();
    // a fixed, meaningfully trained surrogate
    let data = TrainData {
        features: &g.features,
        labels: &g.labels,
        adjacency: Some(&g.adjacency),
        train_idx: &g.splits.train,
        num_classes: 3,
    };
    let surrogate = models::train(
        &spec,
        &data,
        &TrainConfig {
            epochs: 100,
            lr: 0.1,
            weight_decay: 0.0,
            seed: 2,
        },
    )
    .unwrap();
    let update_set = vec![3, 17, 40, 77, 101];
    let mut opt = Adam::new(0.01, 0.0);
    let first = trigger_loss_and_grads(&gen, &spec, &surrogate, &g, &update_set, 0)
        .unwrap()
        .loss;
    let mut last = first;
    for _ in 0..50 {
        let step = trigger_loss_and_grads(&gen, &spec, &surrogate, &g, &update_set, 0).unwrap();
        last = step.loss;
        let mut params: Vec<ndarray::Array2<f64>> = gen.params().into_iter().cloned().collect();
        opt.step(&mut params, &step.grads);
        for (dst, src) in gen.params_mut().into_iter().zip(params) {
            *dst = src;
        }
    }
    assert!(
        last < first,
        "trigger loss did not descend: {first} -> {last}"
    );
}

#[test]
fn zero_budget_attack_reproduces_clean_condensation() {
    let g = generate_sbm_graph(150, 3, 10, 0.15, 0.02, 21).unwrap();
    let config = CondensationConfig {
        method: CondenseMethod::GCond,
        ratio: 0.2,
        epochs: 25,
        structure_width: 16,
        seed: 4,
        ..Default::default()
    };
    let (clean, clean_trace) = condense_clean(&g, &config).unwrap();
    let budget = AttackBudget {
        poison: PoisonBudget::Count(0),
        generator_hidden: 8,
        ..Default::default()
    };
    let out = run_bgc(&g, &config, &budget, 4).unwrap();
    assert_eq!(out.selection.nodes, Vec::<usize>::new());
    assert_eq!(out.synthetic.features, clean.features);
    assert_eq!(out.synthetic.labels, clean.labels);
    match (&out.synthetic.structure, &clean.structure) {
        (StructureSource::LearnedPairwise(a), StructureSource::LearnedPairwise(b)) => {
            assert_eq!(a.weights, b.weights);
        }
        _ => panic!("expected learned structures"),
    }
    let attack_trace: Vec<f64> = out.trace.iter().map(|t| t.matching_loss).collect();
    assert_eq!(attack_trace, clean_trace);
}

#[test]
fn attack_is_deterministic_end_to_end() {
    let g = generate_sbm_graph(120, 3, 10, 0.15, 0.02, 33).unwrap();
    let config = CondensationConfig {
        method: CondenseMethod::GCondX,
        ratio: 0.3,
        epochs: 10,
        seed: 6,
        ..Default::default()
    };
    let budget = AttackBudget {
        poison: PoisonBudget::Ratio(0.2),
        generator_hidden: 8,
        ..Default::default()
    };
    let a = run_bgc(&g, &config, &budget, 6).unwrap();
    let b = run_bgc(&g, &config, &budget, 6).unwrap();
    assert_eq!(a.synthetic.features, b.synthetic.features);
    assert_eq!(a.generator.w_f, b.generator.w_f);
    assert_eq!(a.generator.w_a, b.generator.w_a);
    assert_eq!(a.generator.encoder, b.generator.encoder);
    assert_eq!(a.selection.nodes, b.selection.nodes);
}

#[test]
fn matching_loss_trends_downward_on_sbm() {
    // the convergence diagnostic: final-decile mean below first-decile mean
    let g = generate_sbm_graph(200, 3, 12, 0.15, 0.02, 55).unwrap();
    let config = CondensationConfig {
        method: CondenseMethod::GCond,
        ratio: 0.2,
        epochs: 200,
        lr_features: 0.05,
        surrogate_steps: 50,
        surrogate_lr: 0.1,
        structure_width: 16,
        seed: 0,
        ..Default::default()
    };
    let (_, trace) = condense_clean(&g, &config).unwrap();
    let decile = trace.len() / 10;
    let first: f64 = trace[..decile].iter().sum::<f64>() / decile as f64;
    let last: f64 = trace[trace.len() - decile..].iter().sum::<f64>() / decile as f64;
    assert!(last <= first, "no downward trend: {first} -> {last}");
}
