use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::{Graph, Labels};
use crate::error::{Error, Result};

/// What the loader dropped or merged while building the graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub citation_lines: usize,
    pub unknown_endpoint_lines: usize,
    pub self_loops: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub graph: Graph,
    pub labels: Labels,
    pub report: LoadReport,
}

/// Reads a `.content` / `.cites` pair.
///
/// Content lines are `id f₁ … f_f class`; cites lines are `target source`.
/// Fields may be separated by tabs or spaces. Nodes keep content-file order and
/// class names are reindexed in sorted order.
pub fn load_content_cites(content_path: &Path, cites_path: &Path) -> Result<LoadedDataset> {
    let content = fs::read_to_string(content_path)
        .map_err(|e| Error::io(format!("reading {}", content_path.display()), e))?;
    let cites = fs::read_to_string(cites_path)
        .map_err(|e| Error::io(format!("reading {}", cites_path.display()), e))?;

    let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut features = Vec::new();
    let mut class_names = Vec::new();
    let mut num_features = None;
    for (lineno, line) in content.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let expected = *num_features.get_or_insert(fields.len().saturating_sub(2));
        if fields.len() < 3 || fields.len() != expected + 2 {
            return Err(parse_err(
                content_path,
                lineno + 1,
                format!("expected {} fields, found {}", expected + 2, fields.len()),
            ));
        }
        let node = ids.len();
        if ids.insert(fields[0].to_string(), node).is_some() {
            return Err(parse_err(
                content_path,
                lineno + 1,
                format!("duplicate node id `{}`", fields[0]),
            ));
        }
        for raw in &fields[1..=expected] {
            let value: f64 = raw.parse().map_err(|_| {
                parse_err(
                    content_path,
                    lineno + 1,
                    format!("bad feature value `{raw}`"),
                )
            })?;
            features.push(value);
        }
        class_names.push(fields[expected + 1].to_string());
    }
    let num_features = match num_features {
        Some(f) if !ids.is_empty() => f,
        _ => {
            return Err(Error::Data(format!(
                "{}: content file has no nodes",
                content_path.display()
            )))
        }
    };

    let mut report = LoadReport::default();
    let mut edges = Vec::new();
    for (lineno, line) in cites.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 2 {
            return Err(parse_err(
                cites_path,
                lineno + 1,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        }
        report.citation_lines += 1;
        match (ids.get(fields[0]), ids.get(fields[1])) {
            (Some(&u), Some(&v)) => {
                if u == v {
                    report.self_loops += 1;
                } else {
                    edges.push((u, v));
                }
            }
            _ => report.unknown_endpoint_lines += 1,
        }
    }

    let sorted: BTreeSet<&str> = class_names.iter().map(String::as_str).collect();
    let names: Vec<String> = sorted.iter().map(|s| s.to_string()).collect();
    let index: HashMap<&str, usize> = sorted.into_iter().zip(0..).collect();
    let classes = class_names.iter().map(|c| index[c.as_str()]).collect();

    let graph = Graph::from_edges(ids.len(), num_features, features, &edges)?;
    let labels = Labels::with_names(classes, names)?;
    Ok(LoadedDataset {
        graph,
        labels,
        report,
    })
}
