//! Artifact persistence: synthetic-graph bundles, generator blobs, traces,
//! and per-seed fingerprints.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use bgc_core::backdoor::TriggerGenerator;
use bgc_core::condense::{PairwiseMlp, StructureSource, SyntheticGraph};
use bgc_core::error::{Error, Result};
use bgc_core::models::ModelSpec;
use bgc_core::sparse::CsrMatrix;

#[derive(Debug, Serialize, Deserialize)]
struct SyntheticMeta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    ratio: f64,
    structure: StructureMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum StructureMeta {
    Identity,
    Pairwise { threshold: f64, shapes: Vec<(usize, usize)> },
    Explicit { nnz: usize },
}

fn write_f32_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut raw = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, raw)?;
    Ok(())
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let raw = fs::read(path)?;
    if raw.len() != rows * cols * 4 {
        return Err(Error::BundleCorrupt(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            raw.len(),
            rows * cols * 4
        )));
    }
    let vals: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("shape checked"))
}

fn write_f64_blob(path: &Path, mats: &[&Array2<f64>]) -> Result<()> {
    let mut raw = Vec::new();
    for m in mats {
        for v in m.iter() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, raw)?;
    Ok(())
}

fn read_f64_blob(path: &Path, shapes: &[(usize, usize)]) -> Result<Vec<Array2<f64>>> {
    let raw = fs::read(path)?;
    let total: usize = shapes.iter().map(|&(r, c)| r * c).sum();
    if raw.len() != total * 8 {
        return Err(Error::BundleCorrupt(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            raw.len(),
            total * 8
        )));
    }
    let mut vals = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(shapes.len());
    for &(r, c) in shapes {
        let data: Vec<f64> = (&mut vals).take(r * c).collect();
        out.push(Array2::from_shape_vec((r, c), data).expect("shape checked"));
    }
    Ok(out)
}

/// Bundle-like directory: meta + f32 features + labels, plus the structure
/// parameters as a separate f64 blob (or explicit weighted edges).
pub fn save_synthetic(s: &SyntheticGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let structure = match &s.structure {
        StructureSource::Identity => StructureMeta::Identity,
        StructureSource::LearnedPairwise(phi) => StructureMeta::Pairwise {
            threshold: phi.threshold,
            shapes: phi.weights.iter().map(|w| w.dim()).collect(),
        },
        StructureSource::Explicit(m) => StructureMeta::Explicit { nnz: m.nnz() },
    };
    let meta = SyntheticMeta {
        num_nodes: s.num_nodes(),
        num_features: s.feature_dim(),
        num_classes: s.num_classes,
        ratio: s.ratio,
        structure,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_f32_matrix(&dir.join("features.f32"), &s.features)?;
    let labels: String = s.labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("labels.txt"), labels)?;
    match &s.structure {
        StructureSource::Identity => {}
        StructureSource::LearnedPairwise(phi) => {
            let refs: Vec<&Array2<f64>> = phi.weights.iter().collect();
            write_f64_blob(&dir.join("structure.bin"), &refs)?;
        }
        StructureSource::Explicit(m) => {
            let mut text = String::new();
            for r in 0..m.n_rows {
                let (cols, vals) = m.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    if r < c {
                        text.push_str(&format!("{r}\t{c}\t{v:.17e}\n"));
                    }
                }
            }
            fs::write(dir.join("edges_weighted.tsv"), text)?;
        }
    }
    Ok(())
}

pub fn load_synthetic(dir: impl AsRef<Path>) -> Result<SyntheticGraph> {
    let dir = dir.as_ref();
    let meta: SyntheticMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let features = read_f32_matrix(&dir.join("features.f32"), meta.num_nodes, meta.num_features)?;
    let labels: Vec<usize> = fs::read_to_string(dir.join("labels.txt"))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::BundleCorrupt(format!("bad label {l:?}")))
        })
        .collect::<Result<_>>()?;
    if labels.len() != meta.num_nodes {
        return Err(Error::BundleCorrupt("label count mismatch".into()));
    }
    let structure = match meta.structure {
        StructureMeta::Identity => StructureSource::Identity,
        StructureMeta::Pairwise { threshold, shapes } => {
            let weights = read_f64_blob(&dir.join("structure.bin"), &shapes)?;
            StructureSource::LearnedPairwise(PairwiseMlp { weights, threshold })
        }
        StructureMeta::Explicit { .. } => {
            let text = fs::read_to_string(dir.join("edges_weighted.tsv"))?;
            let mut triplets = Vec::new();
            for line in text.lines() {
                let mut it = line.split('\t');
                let parse = |s: Option<&str>| {
                    s.and_then(|x| x.trim().parse::<f64>().ok())
                        .ok_or_else(|| Error::BundleCorrupt(format!("bad edge line {line:?}")))
                };
                let r = parse(it.next())? as usize;
                let c = parse(it.next())? as usize;
                let v = parse(it.next())?;
                triplets.push((r, c, v));
                triplets.push((c, r, v));
            }
            StructureSource::Explicit(CsrMatrix::from_triplets(
                meta.num_nodes,
                meta.num_nodes,
                triplets,
            ))
        }
    };
    Ok(SyntheticGraph {
        features,
        labels,
        num_classes: meta.num_classes,
        structure,
        ratio: meta.ratio,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorMeta {
    encoder_spec: ModelSpec,
    trigger_size: usize,
    feature_dim: usize,
    full_connect: bool,
    feature_norm_cap: Option<f64>,
    lr: f64,
    seed: u64,
    shapes: Vec<(usize, usize)>,
}

pub fn save_generator(gen: &TriggerGenerator, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let meta = GeneratorMeta {
        encoder_spec: gen.encoder_spec,
        trigger_size: gen.trigger_size,
        feature_dim: gen.feature_dim,
        full_connect: gen.full_connect,
        feature_norm_cap: gen.feature_norm_cap,
        lr: gen.lr,
        seed: gen.seed,
        shapes: gen.params().iter().map(|w| w.dim()).collect(),
    };
    fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    write_f64_blob(&prefix.with_extension("bin"), &gen.params())?;
    Ok(())
}

pub fn load_generator(prefix: impl AsRef<Path>) -> Result<TriggerGenerator> {
    let prefix = prefix.as_ref();
    let meta: GeneratorMeta =
        serde_json::from_str(&fs::read_to_string(prefix.with_extension("json"))?)?;
    let mut mats = read_f64_blob(&prefix.with_extension("bin"), &meta.shapes)?;
    let w_a = mats.pop().ok_or_else(|| Error::BundleCorrupt("generator blob empty".into()))?;
    let w_f = mats.pop().ok_or_else(|| Error::BundleCorrupt("generator blob empty".into()))?;
    Ok(TriggerGenerator {
        encoder_spec: meta.encoder_spec,
        encoder: mats,
        w_f,
        w_a,
        trigger_size: meta.trigger_size,
        feature_dim: meta.feature_dim,
        full_connect: meta.full_connect,
        feature_norm_cap: meta.feature_norm_cap,
        lr: meta.lr,
        seed: meta.seed,
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Fingerprint {
    pub fingerprint: String,
    pub seed: u64,
}

pub fn write_fingerprint(dir: impl AsRef<Path>, fingerprint: &str, seed: u64) -> Result<()> {
    fs::create_dir_all(dir.as_ref())?;
    fs::write(
        dir.as_ref().join("fingerprint.json"),
        serde_json::to_string_pretty(&Fingerprint {
            fingerprint: fingerprint.to_string(),
            seed,
        })?,
    )?;
    Ok(())
}

pub fn read_fingerprint(dir: impl AsRef<Path>) -> Result<Fingerprint> {
    let path = dir.as_ref().join("fingerprint.json");
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bgc_core::backdoor::AttackBudget;
    use bgc_core::condense::{condense_clean, CondensationConfig, CondenseMethod};
    use bgc_core::graph::generate_sbm_graph;

    fn tmp(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("bgc_persist_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn synthetic_round_trip_learned_structure() {
        let g = generate_sbm_graph(40, 2, 6, 0.4, 0.1, 3).unwrap();
        let cfg = CondensationConfig {
            method: CondenseMethod::GCond,
            ratio: 0.5,
            epochs: 2,
            structure_width: 8,
            seed: 1,
            ..Default::default()
        };
        let (s, _) = condense_clean(&g, &cfg).unwrap();
        let dir = tmp("synth");
        save_synthetic(&s, &dir).unwrap();
        let back = load_synthetic(&dir).unwrap();
        assert_eq!(back.labels, s.labels);
        assert_eq!(back.num_classes, s.num_classes);
        // f32 round trip on features
        for (a, b) in back.features.iter().zip(s.features.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // structure params survive exactly (f64 blob)
        match (&back.structure, &s.structure) {
            (
                bgc_core::condense::StructureSource::LearnedPairwise(pa),
                bgc_core::condense::StructureSource::LearnedPairwise(pb),
            ) => assert_eq!(pa.weights, pb.weights),
            _ => panic!("structure kind changed"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generator_round_trip_bitwise() {
        let g = generate_sbm_graph(30, 2, 5, 0.3, 0.1, 9).unwrap();
        let budget = AttackBudget {
            generator_hidden: 8,
            ..Default::default()
        };
        let gen = bgc_core::backdoor::TriggerGenerator::init(&g, &budget, 4);
        let dir = tmp("gen");
        save_generator(&gen, dir.join("generator")).unwrap();
        let back = load_generator(dir.join("generator")).unwrap();
        assert_eq!(back.encoder, gen.encoder);
        assert_eq!(back.w_f, gen.w_f);
        assert_eq!(back.w_a, gen.w_a);
        assert_eq!(back.feature_norm_cap, gen.feature_norm_cap);
        fs::remove_dir_all(&dir).unwrap();
    }
}
