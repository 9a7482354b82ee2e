//! Graph bundle directory format.
//!
//! A bundle is a directory holding:
//! - `meta.json`     — `{num_nodes, num_features, num_classes}`
//! - `features.f32`  — row-major little-endian 32-bit floats
//! - `edges.tsv`     — one `src<TAB>dst` pair per line, 0-based, undirected
//! - `labels.txt`    — one integer per line
//! - `splits.json`   — `{train: [...], val: [...], test: [...]}`
//!
//! Duplicate or reversed edge lines are tolerated and collapse to one
//! undirected edge. Features are promoted to f64 on load.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeGraph, Splits};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitsFile {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn require(path: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = path.join(name);
    if !p.is_file() {
        return Err(Error::BundleIncomplete(format!(
            "{} missing from {}",
            name,
            path.display()
        )));
    }
    Ok(p)
}

pub fn load_graph_bundle(path: impl AsRef<Path>) -> Result<NodeGraph> {
    let path = path.as_ref();
    let meta: Meta = serde_json::from_str(&fs::read_to_string(require(path, "meta.json")?)?)?;

    let raw = fs::read(require(path, "features.f32")?)?;
    let expect = meta.num_nodes * meta.num_features * 4;
    if raw.len() != expect {
        return Err(Error::BundleCorrupt(format!(
            "features.f32 holds {} bytes, expected {} ({} × {} f32)",
            raw.len(),
            expect,
            meta.num_nodes,
            meta.num_features
        )));
    }
    let mut feats = Vec::with_capacity(meta.num_nodes * meta.num_features);
    for chunk in raw.chunks_exact(4) {
        feats.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let features = Array2::from_shape_vec((meta.num_nodes, meta.num_features), feats)
        .map_err(|e| Error::BundleCorrupt(format!("features shape: {e}")))?;

    let labels_file = fs::File::open(require(path, "labels.txt")?)?;
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for line in BufReader::new(labels_file).lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let l: usize = t
            .parse()
            .map_err(|_| Error::BundleCorrupt(format!("bad label line {t:?}")))?;
        labels.push(l);
    }
    if labels.len() != meta.num_nodes {
        return Err(Error::BundleCorrupt(format!(
            "labels.txt has {} entries, expected {}",
            labels.len(),
            meta.num_nodes
        )));
    }

    let edges_file = fs::File::open(require(path, "edges.tsv")?)?;
    let mut edges = Vec::new();
    for line in BufReader::new(edges_file).lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split('\t');
        let (a, b) = (it.next(), it.next());
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.trim().parse().ok())
                .ok_or_else(|| Error::BundleCorrupt(format!("bad edge line {t:?}")))
        };
        edges.push((parse(a)?, parse(b)?));
    }

    let splits: SplitsFile =
        serde_json::from_str(&fs::read_to_string(require(path, "splits.json")?)?)?;

    NodeGraph::from_parts(
        features,
        labels,
        meta.num_classes,
        &edges,
        Splits {
            train: splits.train,
            val: splits.val,
            test: splits.test,
        },
    )
}

pub fn save_graph_bundle(g: &NodeGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path)?;
    let meta = Meta {
        num_nodes: g.num_nodes,
        num_features: g.feature_dim(),
        num_classes: g.num_classes,
    };
    fs::write(path.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let mut raw = Vec::with_capacity(g.num_nodes * g.feature_dim() * 4);
    for v in g.features.iter() {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path.join("features.f32"), raw)?;

    let mut edges = fs::File::create(path.join("edges.tsv"))?;
    for (u, v) in g.undirected_edges() {
        writeln!(edges, "{u}\t{v}")?;
    }

    let mut labels = String::new();
    for l in &g.labels {
        labels.push_str(&l.to_string());
        labels.push('\n');
    }
    fs::write(path.join("labels.txt"), labels)?;

    let splits = SplitsFile {
        train: g.splits.train.clone(),
        val: g.splits.val.clone(),
        test: g.splits.test.clone(),
    };
    fs::write(
        path.join("splits.json"),
        serde_json::to_string_pretty(&splits)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_sbm_graph;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("bgc_bundle_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn round_trip_is_identity() {
        let g = generate_sbm_graph(40, 2, 5, 0.4, 0.05, 11).unwrap();
        let dir = tmpdir("rt");
        save_graph_bundle(&g, &dir).unwrap();
        let back = load_graph_bundle(&dir).unwrap();
        assert_eq!(back.num_nodes, g.num_nodes);
        assert_eq!(back.labels, g.labels);
        assert_eq!(back.adjacency, g.adjacency);
        assert_eq!(back.splits, g.splits);
        // bit-exact after the documented f32 encoding
        for (a, b) in back.features.iter().zip(g.features.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_file_is_incomplete() {
        let dir = tmpdir("missing");
        fs::write(
            dir.join("meta.json"),
            r#"{"num_nodes":1,"num_features":1,"num_classes":1}"#,
        )
        .unwrap();
        let err = load_graph_bundle(&dir).unwrap_err();
        assert!(matches!(err, Error::BundleIncomplete(_)));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn single_node_bundle_loads_empty_adjacency() {
        let dir = tmpdir("one");
        fs::write(
            dir.join("meta.json"),
            r#"{"num_nodes":1,"num_features":2,"num_classes":1}"#,
        )
        .unwrap();
        fs::write(dir.join("features.f32"), [0u8; 8]).unwrap();
        fs::write(dir.join("edges.tsv"), "").unwrap();
        fs::write(dir.join("labels.txt"), "0\n").unwrap();
        fs::write(dir.join("splits.json"), r#"{"train":[0],"val":[],"test":[]}"#).unwrap();
        let g = load_graph_bundle(&dir).unwrap();
        assert_eq!(g.num_nodes, 1);
        assert_eq!(g.adjacency.nnz(), 0);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn both_orientations_collapse_to_one_edge() {
        let dir = tmpdir("dup");
        fs::write(
            dir.join("meta.json"),
            r#"{"num_nodes":2,"num_features":1,"num_classes":1}"#,
        )
        .unwrap();
        fs::write(dir.join("features.f32"), [0u8; 8]).unwrap();
        fs::write(dir.join("edges.tsv"), "0\t1\n1\t0\n").unwrap();
        fs::write(dir.join("labels.txt"), "0\n0\n").unwrap();
        fs::write(dir.join("splits.json"), r#"{"train":[],"val":[],"test":[]}"#).unwrap();
        let g = load_graph_bundle(&dir).unwrap();
        assert_eq!(g.num_undirected_edges(), 1);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn out_of_range_label_is_corrupt() {
        let dir = tmpdir("badlabel");
        fs::write(
            dir.join("meta.json"),
            r#"{"num_nodes":1,"num_features":1,"num_classes":1}"#,
        )
        .unwrap();
        fs::write(dir.join("features.f32"), [0u8; 4]).unwrap();
        fs::write(dir.join("edges.tsv"), "").unwrap();
        fs::write(dir.join("labels.txt"), "5\n").unwrap();
        fs::write(dir.join("splits.json"), r#"{"train":[],"val":[],"test":[]}"#).unwrap();
        let err = load_graph_bundle(&dir).unwrap_err();
        assert!(matches!(err, Error::BundleCorrupt(_)));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn wrong_feature_count_is_corrupt() {
        let dir = tmpdir("badfeat");
        fs::write(
            dir.join("meta.json"),
            r#"{"num_nodes":2,"num_features":1,"num_classes":1}"#,
        )
        .unwrap();
        fs::write(dir.join("features.f32"), [0u8; 4]).unwrap(); // one row short
        fs::write(dir.join("edges.tsv"), "").unwrap();
        fs::write(dir.join("labels.txt"), "0\n0\n").unwrap();
        fs::write(dir.join("splits.json"), r#"{"train":[],"val":[],"test":[]}"#).unwrap();
        let err = load_graph_bundle(&dir).unwrap_err();
        assert!(matches!(err, Error::BundleCorrupt(_)));
        fs::remove_dir_all(&dir).unwrap();
    }
}
