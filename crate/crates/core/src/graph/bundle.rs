//! Portable dataset bundle: a directory of CSV and JSON files.
//!
//! ```text
//! meta.json     {"n", "f", "c", "edges", "classes", "checksums": {file: sha256}}
//! features.csv  n rows of f comma-separated reals
//! edges.csv     one "u,v" row per undirected edge, u < v
//! labels.csv    one class id per row
//! split.json    {"train": [...], "val": [...], "test": [...]}
//! ```
//!
//! Reals are written with the shortest representation that parses back to
//! the same bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Labels, Split};
use crate::checksum::sha256_hex;
use crate::error::{Error, Result};

const META: &str = "meta.json";
const FEATURES: &str = "features.csv";
const EDGES: &str = "edges.csv";
const LABELS: &str = "labels.csv";
const SPLIT: &str = "split.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    n: usize,
    f: usize,
    c: usize,
    edges: usize,
    classes: Vec<String>,
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub graph: Graph,
    pub labels: Labels,
    pub split: Split,
}

fn bundle_err(file: &str, message: impl Into<String>) -> Error {
    Error::Bundle {
        file: file.to_string(),
        message: message.into(),
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>, file: &str) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| bundle_err(file, e.to_string()))
}

pub fn save_bundle(graph: &Graph, labels: &Labels, split: &Split, dir: &Path) -> Result<()> {
    if labels.len() != graph.num_nodes() {
        return Err(Error::Data(format!(
            "{} labels for {} nodes",
            labels.len(),
            graph.num_nodes()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();

    let mut w = csv_writer();
    for u in 0..graph.num_nodes() {
        w.write_record(graph.feature_row(u).iter().map(|x| x.to_string()))
            .map_err(|e| bundle_err(FEATURES, e.to_string()))?;
    }
    files.push((FEATURES, finish(w, FEATURES)?));

    let mut w = csv_writer();
    for (u, v) in graph.undirected_edges() {
        w.write_record([u.to_string(), v.to_string()])
            .map_err(|e| bundle_err(EDGES, e.to_string()))?;
    }
    files.push((EDGES, finish(w, EDGES)?));

    let mut w = csv_writer();
    for c in labels.raw() {
        w.write_record([c.to_string()])
            .map_err(|e| bundle_err(LABELS, e.to_string()))?;
    }
    files.push((LABELS, finish(w, LABELS)?));

    let (train, val, test) = split.raw();
    let split_file = SplitFile {
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    };
    let body = serde_json::to_vec(&split_file).map_err(|e| Error::json(SPLIT, e))?;
    files.push((SPLIT, body));

    let meta = Meta {
        n: graph.num_nodes(),
        f: graph.num_features(),
        c: labels.num_classes(),
        edges: graph.edge_count(),
        classes: labels.names().to_vec(),
        checksums: files
            .iter()
            .map(|(name, body)| (name.to_string(), sha256_hex(body)))
            .collect(),
    };
    let meta_body = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(META, e))?;
    files.push((META, meta_body));

    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(bundle_err(name, format!("{name} absent")));
    }
    fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn read_checked(dir: &Path, name: &str, meta: &Meta) -> Result<Vec<u8>> {
    let body = read_file(dir, name)?;
    let expected = meta
        .checksums
        .get(name)
        .ok_or_else(|| bundle_err(META, format!("no checksum recorded for {name}")))?;
    let found = sha256_hex(&body);
    if &found != expected {
        return Err(Error::Checksum {
            file: name.to_string(),
            expected: expected.clone(),
            found,
        });
    }
    Ok(body)
}

fn csv_rows(body: &[u8], file: &str) -> Result<Vec<csv::StringRecord>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(body)
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bundle_err(file, e.to_string()))
}

fn parse_field<T: std::str::FromStr>(field: &str, file: &str, row: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| bundle_err(file, format!("row {}: bad value `{field}`", row + 1)))
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let meta_body = read_file(dir, META)?;
    let meta: Meta =
        serde_json::from_slice(&meta_body).map_err(|e| bundle_err(META, e.to_string()))?;

    let features_body = read_checked(dir, FEATURES, &meta)?;
    let mut features = Vec::with_capacity(meta.n * meta.f);
    let rows = csv_rows(&features_body, FEATURES)?;
    if rows.len() != meta.n {
        return Err(bundle_err(
            FEATURES,
            format!("{} rows, meta says n = {}", rows.len(), meta.n),
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        // an empty record stands for a zero-width feature row
        let width = if meta.f == 0 { 0 } else { row.len() };
        if width != meta.f {
            return Err(bundle_err(
                FEATURES,
                format!("row {}: {} values, expected {}", i + 1, row.len(), meta.f),
            ));
        }
        for field in row.iter().take(width) {
            features.push(parse_field::<f64>(field, FEATURES, i)?);
        }
    }

    let edges_body = read_checked(dir, EDGES, &meta)?;
    let mut edges = Vec::with_capacity(meta.edges);
    for (i, row) in csv_rows(&edges_body, EDGES)?.iter().enumerate() {
        if row.len() != 2 {
            return Err(bundle_err(EDGES, format!("row {}: expected u,v", i + 1)));
        }
        edges.push((
            parse_field::<usize>(&row[0], EDGES, i)?,
            parse_field::<usize>(&row[1], EDGES, i)?,
        ));
    }

    let labels_body = read_checked(dir, LABELS, &meta)?;
    let classes = csv_rows(&labels_body, LABELS)?
        .iter()
        .enumerate()
        .map(|(i, row)| parse_field::<usize>(row.get(0).unwrap_or(""), LABELS, i))
        .collect::<Result<Vec<_>>>()?;

    let split_body = read_checked(dir, SPLIT, &meta)?;
    let split: SplitFile =
        serde_json::from_slice(&split_body).map_err(|e| bundle_err(SPLIT, e.to_string()))?;

    let graph = Graph::from_edges(meta.n, meta.f, features, &edges)
        .map_err(|e| bundle_err(EDGES, e.to_string()))?;
    if graph.edge_count() != meta.edges || edges.len() != meta.edges {
        return Err(bundle_err(
            EDGES,
            format!("{} edges, meta says {}", edges.len(), meta.edges),
        ));
    }
    if classes.len() != meta.n || meta.classes.len() != meta.c {
        return Err(bundle_err(LABELS, "label count disagrees with meta.json"));
    }
    let labels =
        Labels::with_names(classes, meta.classes).map_err(|e| bundle_err(LABELS, e.to_string()))?;
    let split = Split::new(split.train, split.val, split.test, meta.n)
        .map_err(|e| bundle_err(SPLIT, e.to_string()))?;
    Ok(Bundle {
        graph,
        labels,
        split,
    })
}

/// Reads only `split.json` from a bundle-style file, for reusing a canonical
/// split with a freshly loaded dataset.
pub fn load_split_file(path: &Path, n: usize) -> Result<Split> {
    let body = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let split: SplitFile =
        serde_json::from_slice(&body).map_err(|e| Error::json(path.display().to_string(), e))?;
    Split::new(split.train, split.val, split.test, n)
}
