//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bgc_core::backdoor::{run_bgc, TriggerGenerator};
use bgc_core::condense::{condense_clean, SyntheticGraph};
use bgc_core::defense::{
    compute_asr, compute_cta, prune_synthetic, randsmooth_predict, randsmooth_predict_triggered,
    AsrOptions, MetricsRecord, RandsmoothConfig,
};
use bgc_core::error::Error;
use bgc_core::graph::NodeGraph;

use crate::config::{DefenseConfig, ExperimentConfig};
use crate::persist;

#[derive(Debug)]
pub enum CliError {
    /// Configuration or input-data problems (exit 2).
    Config(String),
    /// Required artifact absent (exit 3).
    MissingArtifact(String),
    /// Nothing to aggregate (exit 4).
    EmptyResults(String),
    /// Everything else (exit 1).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::EmptyResults(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            CliError::EmptyResults(m) => write!(f, "no results: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::BundleIncomplete(_) | Error::BundleCorrupt(_) | Error::InvalidParams(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub overwrite: bool,
    pub workers: usize,
    pub force: bool,
}

fn effective_seeds(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<u64> {
    opts.seeds.clone().unwrap_or_else(|| cfg.seeds.clone())
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Run one closure per seed on up to `workers` threads, preserving seed
/// order in the collected output.
fn for_each_seed<T: Send>(
    seeds: &[u64],
    workers: usize,
    task: impl Fn(u64) -> CliResult<T> + Sync,
) -> CliResult<Vec<T>> {
    let workers = workers.max(1).min(seeds.len().max(1));
    let mut results: Vec<Option<CliResult<T>>> = Vec::new();
    for _ in seeds {
        results.push(None);
    }
    std::thread::scope(|scope| {
        let task = &task;
        let chunks: Vec<Vec<(usize, u64)>> = (0..workers)
            .map(|w| {
                seeds
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % workers == w)
                    .map(|(i, &s)| (i, s))
                    .collect()
            })
            .collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(i, seed)| (i, task(seed)))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("seed result missing"))
        .collect()
}

fn persist_config(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )
    .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

fn guard_overwrite(dir: &Path, overwrite: bool, what: &str) -> CliResult<bool> {
    if dir.exists() {
        if overwrite {
            fs::remove_dir_all(dir).map_err(|e| CliError::Other(e.to_string()))?;
            return Ok(true);
        }
        eprintln!("{what} already exists at {}; skipping (use --overwrite)", dir.display());
        return Ok(false);
    }
    Ok(true)
}

/// Clean condensation per seed; persists synthetic bundles and loss traces.
pub fn cmd_condense(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    let graph = cfg.dataset.load()?;
    let seeds = effective_seeds(cfg, opts);
    persist_config(cfg, &opts.out)?;
    let fingerprint = cfg.fingerprint();
    for_each_seed(&seeds, opts.workers, |seed| {
        let sdir = seed_dir(&opts.out, seed);
        let target = sdir.join("clean");
        if !guard_overwrite(&target, opts.overwrite, "clean synthetic bundle")? {
            return Ok(());
        }
        let ccfg = cfg.condensation.to_core(seed);
        let (synthetic, trace) = condense_clean(&graph, &ccfg)?;
        persist::save_synthetic(&synthetic, &target)?;
        fs::write(
            sdir.join("clean_trace.json"),
            serde_json::to_string(&trace).expect("trace serializes"),
        )
        .map_err(|e| CliError::Other(e.to_string()))?;
        persist::write_fingerprint(&sdir, &fingerprint, seed)?;
        eprintln!(
            "seed {seed}: condensed {} nodes, final matching loss {:.4}",
            synthetic.num_nodes(),
            trace.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    })?;
    Ok(())
}

/// Full attack per seed; persists backdoored bundles, generator blobs,
/// selections, and traces.
pub fn cmd_attack(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<()> {
    let attack = cfg
        .attack
        .as_ref()
        .ok_or_else(|| CliError::Config("attack section missing from config".into()))?;
    let graph = cfg.dataset.load()?;
    let seeds = effective_seeds(cfg, opts);
    persist_config(cfg, &opts.out)?;
    let fingerprint = cfg.fingerprint();
    for_each_seed(&seeds, opts.workers, |seed| {
        let sdir = seed_dir(&opts.out, seed);
        let target = sdir.join("backdoor");
        if !guard_overwrite(&target, opts.overwrite, "backdoored synthetic bundle")? {
            return Ok(());
        }
        let ccfg = cfg.condensation.to_core(seed);
        let outcome = run_bgc(&graph, &ccfg, &attack.to_core(), seed)?;
        persist::save_synthetic(&outcome.synthetic, &target)?;
        persist::save_generator(&outcome.generator, sdir.join("generator"))?;
        fs::write(
            sdir.join("selection.json"),
            serde_json::to_string(&outcome.selection.nodes).expect("selection serializes"),
        )
        .map_err(|e| CliError::Other(e.to_string()))?;
        fs::write(
            sdir.join("attack_trace.json"),
            serde_json::to_string(&outcome.trace).expect("trace serializes"),
        )
        .map_err(|e| CliError::Other(e.to_string()))?;
        persist::write_fingerprint(&sdir, &fingerprint, seed)?;
        let last = outcome.trace.last().expect("nonempty trace");
        eprintln!(
            "seed {seed}: attacked, matching {:.4}, trigger loss {:?}, |V_P| = {}",
            last.matching_loss,
            last.trigger_loss,
            outcome.selection.nodes.len()
        );
        Ok(())
    })?;
    Ok(())
}

struct SeedArtifacts {
    clean: SyntheticGraph,
    backdoor: Option<SyntheticGraph>,
    generator: Option<TriggerGenerator>,
}

fn load_seed_artifacts(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    seed: u64,
) -> CliResult<SeedArtifacts> {
    let sdir = seed_dir(&opts.out, seed);
    let fp = persist::read_fingerprint(&sdir).map_err(|_| {
        CliError::MissingArtifact(format!("fingerprint.json in {}", sdir.display()))
    })?;
    if fp.fingerprint != cfg.fingerprint() && !opts.force {
        return Err(CliError::Config(format!(
            "config fingerprint {} does not match artifacts in {} ({}); rerun or pass --force",
            cfg.fingerprint(),
            sdir.display(),
            fp.fingerprint
        )));
    }
    let clean_dir = sdir.join("clean");
    if !clean_dir.is_dir() {
        return Err(CliError::MissingArtifact(format!(
            "clean synthetic bundle at {}",
            clean_dir.display()
        )));
    }
    let clean = persist::load_synthetic(&clean_dir)?;
    let (backdoor, generator) = if cfg.attack.is_some() {
        let bd_dir = sdir.join("backdoor");
        if !bd_dir.is_dir() {
            return Err(CliError::MissingArtifact(format!(
                "backdoored synthetic bundle at {}",
                bd_dir.display()
            )));
        }
        (
            Some(persist::load_synthetic(&bd_dir)?),
            Some(persist::load_generator(sdir.join("generator")).map_err(|_| {
                CliError::MissingArtifact(format!("generator blob in {}", sdir.display()))
            })?),
        )
    } else {
        (None, None)
    };
    Ok(SeedArtifacts {
        clean,
        backdoor,
        generator,
    })
}

fn eval_seed(
    cfg: &ExperimentConfig,
    graph: &NodeGraph,
    artifacts: &SeedArtifacts,
    seed: u64,
    with_defenses: bool,
) -> CliResult<Vec<MetricsRecord>> {
    let dataset = cfg.dataset.id();
    let method = cfg.condensation.method_name();
    let asr_opts = cfg.attack.as_ref().map(|a| AsrOptions {
        target_class: a.target_class,
        exclude_already_target: true,
        source_class: if a.directed { a.source_class } else { None },
    });
    let mut rows = Vec::new();
    for model in &cfg.test_models {
        let t0 = Instant::now();
        let spec = model.to_spec();
        let train_cfg = cfg.test_training.to_core(seed);
        let clean_model = artifacts.clean.train_model(&spec, &train_cfg)?;
        let c_cta = compute_cta(&spec, &clean_model, graph, &graph.splits.test)?;
        let (cta, asr, c_asr, bd_model) = match (&artifacts.backdoor, &artifacts.generator) {
            (Some(bd), Some(gen)) => {
                let opts = asr_opts.as_ref().expect("attack implies asr options");
                let bd_model = bd.train_model(&spec, &train_cfg)?;
                let cta = compute_cta(&spec, &bd_model, graph, &graph.splits.test)?;
                let asr = compute_asr(&spec, &bd_model, gen, graph, &graph.splits.test, opts)?;
                let c_asr =
                    compute_asr(&spec, &clean_model, gen, graph, &graph.splits.test, opts)?;
                (cta, asr, c_asr, Some(bd_model))
            }
            _ => (c_cta, 0.0, 0.0, None),
        };
        rows.push(MetricsRecord {
            dataset: dataset.clone(),
            method: format!("{method}+{}", model.name()),
            ratio: cfg.condensation.ratio,
            seed,
            cta,
            asr,
            c_cta,
            c_asr,
            defense: None,
            d_cta: None,
            d_asr: None,
            wall_s: t0.elapsed().as_secs_f64(),
        });

        if !with_defenses {
            continue;
        }
        for defense in &cfg.defenses {
            let t1 = Instant::now();
            let (d_cta_val, d_asr_val) = match defense {
                DefenseConfig::Prune { fraction } => {
                    // dataset-level: retrain on the pruned condensed graph
                    let source = artifacts.backdoor.as_ref().unwrap_or(&artifacts.clean);
                    let pruned = prune_synthetic(source, *fraction)?;
                    let model_def = pruned.train_model(&spec, &train_cfg)?;
                    let cta_def = compute_cta(&spec, &model_def, graph, &graph.splits.test)?;
                    let asr_def = match (&artifacts.generator, &asr_opts) {
                        (Some(gen), Some(opts)) => {
                            compute_asr(&spec, &model_def, gen, graph, &graph.splits.test, opts)?
                        }
                        _ => 0.0,
                    };
                    (cta_def, asr_def)
                }
                DefenseConfig::Randsmooth { passes, keep_prob } => {
                    // model-level: smoothed predictions of the backdoored model
                    let model_ref = bd_model.as_ref().unwrap_or(&clean_model);
                    let rs = RandsmoothConfig {
                        passes: *passes,
                        keep_prob: *keep_prob,
                        seed,
                    };
                    let preds =
                        randsmooth_predict(&spec, model_ref, graph, &graph.splits.test, &rs)?;
                    let correct = graph
                        .splits
                        .test
                        .iter()
                        .zip(&preds)
                        .filter(|(&v, &p)| graph.labels[v] == p)
                        .count();
                    let cta_def = correct as f64 / graph.splits.test.len() as f64;
                    let asr_def = match (&artifacts.generator, &asr_opts) {
                        (Some(gen), Some(opts)) => {
                            let nodes: Vec<usize> = graph
                                .splits
                                .test
                                .iter()
                                .copied()
                                .filter(|&v| {
                                    !(opts.exclude_already_target
                                        && graph.labels[v] == opts.target_class)
                                })
                                .filter(|&v| {
                                    opts.source_class.map_or(true, |s| graph.labels[v] == s)
                                })
                                .collect();
                            let preds = randsmooth_predict_triggered(
                                &spec, model_ref, gen, graph, &nodes, &rs,
                            )?;
                            preds.iter().filter(|&&p| p == opts.target_class).count() as f64
                                / nodes.len().max(1) as f64
                        }
                        _ => 0.0,
                    };
                    (cta_def, asr_def)
                }
            };
            let rel = |defended: f64, base: f64| {
                if base.abs() < 1e-12 {
                    0.0
                } else {
                    (defended - base) / base
                }
            };
            rows.push(MetricsRecord {
                dataset: dataset.clone(),
                method: format!("{method}+{}", model.name()),
                ratio: cfg.condensation.ratio,
                seed,
                cta: d_cta_val,
                asr: d_asr_val,
                c_cta,
                c_asr,
                defense: Some(defense.name().to_string()),
                d_cta: Some(rel(d_cta_val, cta)),
                d_asr: Some(rel(d_asr_val, asr)),
                wall_s: t1.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

/// Train test models on the persisted artifacts and write results.csv,
/// results.jsonl, and summary.json.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: &RunOptions, with_defenses: bool) -> CliResult<()> {
    let graph = cfg.dataset.load()?;
    let seeds = effective_seeds(cfg, opts);
    let all_rows: Vec<Vec<MetricsRecord>> = for_each_seed(&seeds, opts.workers, |seed| {
        let artifacts = load_seed_artifacts(cfg, opts, seed)?;
        eval_seed(cfg, &graph, &artifacts, seed, with_defenses)
    })?;
    let rows: Vec<MetricsRecord> = all_rows.into_iter().flatten().collect();
    write_results(&opts.out, &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), opts.out.join("results.csv").display());
    Ok(())
}

pub fn write_results(out: &Path, rows: &[MetricsRecord]) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Other(e.to_string()))?;
    let mut csv = String::from(MetricsRecord::CSV_HEADER);
    csv.push('\n');
    let mut jsonl = String::new();
    for row in rows {
        csv.push_str(&row.to_csv_row());
        csv.push('\n');
        jsonl.push_str(&row.to_json_line());
        jsonl.push('\n');
    }
    fs::write(out.join("results.csv"), csv).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(out.join("results.jsonl"), jsonl).map_err(|e| CliError::Other(e.to_string()))?;

    // summary: mean and standard deviation per (method, defense) group
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.method.clone(), row.defense.clone().unwrap_or_default()))
            .or_default()
            .push(row);
    }
    let mean_std = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut summary = Vec::new();
    for ((method, defense), rows) in &groups {
        let mut entry = serde_json::json!({
            "method": method,
            "defense": if defense.is_empty() { serde_json::Value::Null } else { serde_json::json!(defense) },
            "n": rows.len(),
        });
        for (name, get) in [
            ("cta", (|r: &MetricsRecord| r.cta) as fn(&MetricsRecord) -> f64),
            ("asr", |r| r.asr),
            ("c_cta", |r| r.c_cta),
            ("c_asr", |r| r.c_asr),
        ] {
            let vals: Vec<f64> = rows.iter().map(|r| get(r)).collect();
            let (mean, std) = mean_std(&vals);
            entry[format!("{name}_mean")] = serde_json::json!(mean);
            entry[format!("{name}_std")] = serde_json::json!(std);
        }
        summary.push(entry);
    }
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub n: usize,
    pub cta_mean: f64,
    pub cta_std: f64,
    pub asr_mean: f64,
    pub asr_std: f64,
}

fn mean_and_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group base rows (no defense) of many experiments by an x value extracted
/// from each experiment's config.
pub fn build_series(
    experiments: &[(ExperimentConfig, Vec<MetricsRecord>)],
    x_of: impl Fn(&ExperimentConfig) -> Option<f64>,
) -> Vec<SeriesPoint> {
    let mut buckets: BTreeMap<u64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
    for (cfg, rows) in experiments {
        let Some(x) = x_of(cfg) else { continue };
        let bucket = buckets.entry(x.to_bits()).or_insert_with(|| (x, Vec::new()));
        for row in rows.iter().filter(|r| r.defense.is_none()) {
            bucket.1.push((row.cta, row.asr));
        }
    }
    let mut points: Vec<SeriesPoint> = buckets
        .into_values()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(x, rows)| {
            let ctas: Vec<f64> = rows.iter().map(|&(c, _)| c).collect();
            let asrs: Vec<f64> = rows.iter().map(|&(_, a)| a).collect();
            let (cta_mean, cta_std) = mean_and_std(&ctas);
            let (asr_mean, asr_std) = mean_and_std(&asrs);
            SeriesPoint {
                x,
                n: rows.len(),
                cta_mean,
                cta_std,
                asr_mean,
                asr_std,
            }
        })
        .collect();
    points.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
    points
}

pub fn parse_results_csv(text: &str) -> Vec<MetricsRecord> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        let (Some(ratio), Some(seed), Some(cta), Some(asr), Some(c_cta), Some(c_asr), Some(wall)) = (
            num(f[2]),
            f[3].parse::<u64>().ok(),
            num(f[4]),
            num(f[5]),
            num(f[6]),
            num(f[7]),
            num(f[11]),
        ) else {
            continue;
        };
        rows.push(MetricsRecord {
            dataset: f[0].into(),
            method: f[1].into(),
            ratio,
            seed,
            cta,
            asr,
            c_cta,
            c_asr,
            defense: if f[8].is_empty() { None } else { Some(f[8].into()) },
            d_cta: num(f[9]),
            d_asr: num(f[10]),
            wall_s: wall,
        });
    }
    rows
}

/// Aggregate all experiment directories under `root` into tidy series files
/// for the epoch, trigger-size, and poison-ratio studies.
pub fn cmd_report(root: &Path, out: &Path) -> CliResult<()> {
    let mut experiments = Vec::new();
    let entries = fs::read_dir(root)
        .map_err(|e| CliError::EmptyResults(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    // a single experiment dir (config.json at the root) also works
    if root.join("config.json").is_file() {
        dirs.push(root.to_path_buf());
    }
    for dir in dirs {
        let cfg_path = dir.join("config.json");
        let csv_path = dir.join("results.csv");
        if !cfg_path.is_file() || !csv_path.is_file() {
            continue;
        }
        let cfg: ExperimentConfig = serde_json::from_str(
            &fs::read_to_string(&cfg_path).map_err(|e| CliError::Other(e.to_string()))?,
        )
        .map_err(|e| CliError::Config(format!("{}: {e}", cfg_path.display())))?;
        let rows = parse_results_csv(
            &fs::read_to_string(&csv_path).map_err(|e| CliError::Other(e.to_string()))?,
        );
        experiments.push((cfg, rows));
    }
    if experiments.is_empty() {
        return Err(CliError::EmptyResults(format!(
            "no experiment directories with config.json and results.csv under {}",
            root.display()
        )));
    }

    fs::create_dir_all(out).map_err(|e| CliError::Other(e.to_string()))?;
    let write_series = |name: &str, points: &[SeriesPoint]| -> CliResult<()> {
        let mut text = String::from("x,n,cta_mean,cta_std,asr_mean,asr_std\n");
        for p in points {
            text.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                p.x, p.n, p.cta_mean, p.cta_std, p.asr_mean, p.asr_std
            ));
        }
        fs::write(out.join(name), text).map_err(|e| CliError::Other(e.to_string()))
    };

    write_series(
        "series_epochs.csv",
        &build_series(&experiments, |c| Some(c.condensation.epochs as f64)),
    )?;
    write_series(
        "series_trigger_size.csv",
        &build_series(&experiments, |c| {
            c.attack.as_ref().map(|a| a.trigger_size as f64)
        }),
    )?;
    write_series(
        "series_poison_ratio.csv",
        &build_series(&experiments, |c| {
            c.attack.as_ref().map(|a| match a.poison {
                bgc_core::backdoor::PoisonBudget::Ratio(r) => r,
                bgc_core::backdoor::PoisonBudget::Count(n) => n as f64,
            })
        }),
    )?;
    eprintln!("wrote series files to {}", out.display());
    Ok(())
}
