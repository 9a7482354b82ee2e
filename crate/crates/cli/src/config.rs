//! Experiment configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bgc_core::backdoor::{AttackBudget, PoisonBudget};
use bgc_core::condense::{CondensationConfig, CondenseMethod};
use bgc_core::error::{Error, Result};
use bgc_core::graph::{generate_sbm_graph, load_graph_bundle, NodeGraph};
use bgc_core::models::{ModelKind, ModelSpec, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Bundle {
        path: PathBuf,
    },
    Sbm {
        num_nodes: usize,
        classes: usize,
        features: usize,
        p_in: f64,
        p_out: f64,
        graph_seed: u64,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<NodeGraph> {
        match self {
            DatasetConfig::Bundle { path } => load_graph_bundle(path),
            DatasetConfig::Sbm {
                num_nodes,
                classes,
                features,
                p_in,
                p_out,
                graph_seed,
            } => generate_sbm_graph(*num_nodes, *classes, *features, *p_in, *p_out, *graph_seed),
        }
    }

    pub fn id(&self) -> String {
        match self {
            DatasetConfig::Bundle { path } => path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "bundle".into()),
            DatasetConfig::Sbm { num_nodes, classes, .. } => {
                format!("sbm{num_nodes}x{classes}")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CondensationSection {
    pub method: CondenseMethod,
    pub ratio: f64,
    pub epochs: usize,
    #[serde(default = "default_lr_features")]
    pub lr_features: f64,
    #[serde(default = "default_lr_structure")]
    pub lr_structure: f64,
    #[serde(default = "default_surrogate_steps")]
    pub surrogate_steps: usize,
    #[serde(default = "default_generator_steps")]
    pub generator_steps: usize,
    #[serde(default = "default_surrogate_lr")]
    pub surrogate_lr: f64,
    #[serde(default = "default_backbone_k")]
    pub backbone_k: usize,
    #[serde(default = "default_structure_width")]
    pub structure_width: usize,
    #[serde(default = "default_structure_threshold")]
    pub structure_threshold: f64,
}

fn default_lr_features() -> f64 {
    0.01
}
fn default_lr_structure() -> f64 {
    0.001
}
fn default_surrogate_steps() -> usize {
    10
}
fn default_generator_steps() -> usize {
    1
}
fn default_surrogate_lr() -> f64 {
    0.01
}
fn default_backbone_k() -> usize {
    2
}
fn default_structure_width() -> usize {
    128
}
fn default_structure_threshold() -> f64 {
    0.5
}

impl CondensationSection {
    pub fn to_core(&self, seed: u64) -> CondensationConfig {
        CondensationConfig {
            method: self.method,
            ratio: self.ratio,
            epochs: self.epochs,
            lr_features: self.lr_features,
            lr_structure: self.lr_structure,
            surrogate_steps: self.surrogate_steps,
            generator_steps: self.generator_steps,
            surrogate_lr: self.surrogate_lr,
            backbone_k: self.backbone_k,
            structure_width: self.structure_width,
            structure_threshold: self.structure_threshold,
            seed,
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self.method {
            CondenseMethod::DcGraph => "dc-graph",
            CondenseMethod::GCond => "gcond",
            CondenseMethod::GCondX => "gcond-x",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestModelSection {
    pub kind: ModelKind,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    256
}
fn default_k() -> usize {
    2
}

impl TestModelSection {
    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            layers: self.layers,
            hidden: self.hidden,
            k: self.k,
            dropout: self.dropout,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Gcn => "gcn",
            ModelKind::Sgc => "sgc",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestTrainingSection {
    #[serde(default = "default_test_lr")]
    pub lr: f64,
    #[serde(default = "default_test_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_test_lr() -> f64 {
    0.01
}
fn default_test_epochs() -> usize {
    300
}

impl Default for TestTrainingSection {
    fn default() -> Self {
        TestTrainingSection {
            lr: default_test_lr(),
            epochs: default_test_epochs(),
            weight_decay: 0.0,
        }
    }
}

impl TestTrainingSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseConfig {
    Prune {
        fraction: f64,
    },
    Randsmooth {
        #[serde(default = "default_passes")]
        passes: usize,
        #[serde(default = "default_keep_prob")]
        keep_prob: f64,
    },
}

fn default_passes() -> usize {
    10
}
fn default_keep_prob() -> f64 {
    0.8
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::Prune { .. } => "prune",
            DefenseConfig::Randsmooth { .. } => "randsmooth",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    pub poison: PoisonBudget,
    #[serde(default = "default_trigger_size")]
    pub trigger_size: usize,
    #[serde(default = "default_degree_weight")]
    pub degree_weight: f64,
    #[serde(default = "default_clusters")]
    pub clusters_per_class: usize,
    #[serde(default)]
    pub target_class: usize,
    #[serde(default)]
    pub update_set_size: Option<usize>,
    #[serde(default)]
    pub directed: bool,
    #[serde(default)]
    pub source_class: Option<usize>,
    #[serde(default)]
    pub prefer_low_scores: bool,
    #[serde(default)]
    pub full_connect_trigger: bool,
    #[serde(default = "default_generator_encoder")]
    pub generator_encoder: ModelKind,
    #[serde(default = "default_generator_hidden")]
    pub generator_hidden: usize,
    #[serde(default = "default_generator_lr")]
    pub generator_lr: f64,
    #[serde(default = "default_generator_weight_decay")]
    pub generator_weight_decay: f64,
    #[serde(default)]
    pub trigger_loss_floor: f64,
    #[serde(default = "default_trigger_feature_scale")]
    pub trigger_feature_scale: Option<f64>,
}

fn default_trigger_size() -> usize {
    4
}
fn default_degree_weight() -> f64 {
    1.0
}
fn default_clusters() -> usize {
    1
}
fn default_generator_encoder() -> ModelKind {
    ModelKind::Gcn
}
fn default_generator_hidden() -> usize {
    256
}
fn default_generator_lr() -> f64 {
    0.01
}
fn default_generator_weight_decay() -> f64 {
    5e-4
}
fn default_trigger_feature_scale() -> Option<f64> {
    Some(2.0)
}

impl AttackSection {
    pub fn to_core(&self) -> AttackBudget {
        AttackBudget {
            poison: self.poison,
            trigger_size: self.trigger_size,
            degree_weight: self.degree_weight,
            clusters_per_class: self.clusters_per_class,
            target_class: self.target_class,
            update_set_size: self.update_set_size,
            directed: self.directed,
            source_class: self.source_class,
            prefer_low_scores: self.prefer_low_scores,
            full_connect_trigger: self.full_connect_trigger,
            generator_encoder: self.generator_encoder,
            generator_hidden: self.generator_hidden,
            generator_lr: self.generator_lr,
            generator_weight_decay: self.generator_weight_decay,
            trigger_loss_floor: self.trigger_loss_floor,
            trigger_feature_scale: self.trigger_feature_scale,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub condensation: CondensationSection,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    pub test_models: Vec<TestModelSection>,
    #[serde(default)]
    pub test_training: TestTrainingSection,
    #[serde(default)]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::BundleIncomplete(format!("config {}: {e}", path.as_ref().display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParams(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidParams("seed list must not be empty".into()));
        }
        if self.test_models.is_empty() {
            return Err(Error::InvalidParams("at least one test model required".into()));
        }
        if let DatasetConfig::Bundle { path } = &self.dataset {
            if !path.is_dir() {
                return Err(Error::BundleIncomplete(format!(
                    "dataset bundle {} does not exist",
                    path.display()
                )));
            }
        }
        self.condensation.to_core(0).validate()?;
        Ok(())
    }

    /// Stable hash of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canon.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}
