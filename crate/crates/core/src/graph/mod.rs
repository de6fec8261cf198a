//! Attributed undirected graphs, node labels and train/val/test splits.
//!
//! Adjacency is kept in compressed sparse row layout with both directions of
//! every undirected edge materialized, sorted neighbour lists, no self-loops
//! and no duplicates. Those invariants are established by the constructors and
//! never broken afterwards: every transformation goes through [`Graph::from_edges`]
//! or keeps the adjacency untouched.

mod bundle;
mod load;
mod split;
mod synth;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use bundle::{load_bundle, load_split_file, save_bundle, Bundle};
pub use load::{load_content_cites, LoadReport, LoadedDataset};
pub use split::make_planetoid_split;
pub use synth::synth_sbm;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    num_features: usize,
    features: Vec<f64>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Graph {
    /// Builds a graph from a row-major `num_nodes × num_features` feature
    /// buffer and a list of edges. Edge direction is ignored, self-loops are
    /// dropped and repeated pairs collapse into one undirected edge.
    pub fn from_edges(
        num_nodes: usize,
        num_features: usize,
        features: Vec<f64>,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Data("graph must have at least one node".into()));
        }
        if features.len() != num_nodes * num_features {
            return Err(Error::Shape {
                op: "Graph::from_edges",
                lhs: vec![num_nodes, num_features],
                rhs: vec![features.len()],
            });
        }
        let mut pairs = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(Error::Index {
                        op: "Graph::from_edges",
                        index: node,
                        bound: num_nodes,
                    });
                }
            }
            if u != v {
                pairs.push((u.min(v), u.max(v)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut degree = vec![0usize; num_nodes];
        for &(u, v) in &pairs {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut row_ptr = Vec::with_capacity(num_nodes + 1);
        row_ptr.push(0);
        for d in &degree {
            row_ptr.push(row_ptr.last().unwrap() + d);
        }
        let mut cursor = row_ptr[..num_nodes].to_vec();
        let mut col_idx = vec![0usize; row_ptr[num_nodes]];
        for &(u, v) in &pairs {
            col_idx[cursor[u]] = v;
            cursor[u] += 1;
            col_idx[cursor[v]] = u;
            cursor[v] += 1;
        }
        for u in 0..num_nodes {
            col_idx[row_ptr[u]..row_ptr[u + 1]].sort_unstable();
        }

        Ok(Self {
            num_nodes,
            num_features,
            features,
            row_ptr,
            col_idx,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.col_idx.len() / 2
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, u: usize) -> &[f64] {
        &self.features[u * self.num_features..(u + 1) * self.num_features]
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.num_nodes, self.num_features],
            self.features.clone(),
        )
        .expect("feature buffer matches shape")
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_ptr[u + 1] - self.row_ptr[u]
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Undirected edges as `(u, v)` with `u < v`, lexicographically sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Both directions of every edge in CSR order: `(centers, neighbours)`.
    /// Centers are non-decreasing.
    pub fn directed_edges(&self) -> (Vec<usize>, Vec<usize>) {
        let mut centers = Vec::with_capacity(self.col_idx.len());
        for u in 0..self.num_nodes {
            centers.extend(std::iter::repeat_n(u, self.degree(u)));
        }
        (centers, self.col_idx.clone())
    }

    /// Same adjacency, new feature matrix.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        if features.len() != self.features.len() {
            return Err(Error::Shape {
                op: "Graph::with_features",
                lhs: vec![self.num_nodes, self.num_features],
                rhs: vec![features.len()],
            });
        }
        Ok(Self {
            features,
            ..self.clone_structure()
        })
    }

    /// Same features, adjacency restricted to `edges`.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(
            self.num_nodes,
            self.num_features,
            self.features.clone(),
            edges,
        )
    }

    fn clone_structure(&self) -> Self {
        Self {
            num_nodes: self.num_nodes,
            num_features: self.num_features,
            features: Vec::new(),
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
        }
    }

    /// Relabels nodes: node `u` of `self` becomes node `perm[u]` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_nodes)?;
        let f = self.num_features;
        let mut features = vec![0.0; self.features.len()];
        for (u, &pu) in perm.iter().enumerate() {
            features[pu * f..(pu + 1) * f].copy_from_slice(self.feature_row(u));
        }
        let edges: Vec<_> = self
            .undirected_edges()
            .into_iter()
            .map(|(u, v)| (perm[u], perm[v]))
            .collect();
        Self::from_edges(self.num_nodes, f, features, &edges)
    }

    /// Re-checks the adjacency invariants over every row range.
    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.num_nodes + 1 || self.row_ptr[0] != 0 {
            return Err(Error::Data("row pointer length or origin is wrong".into()));
        }
        for u in 0..self.num_nodes {
            let row = self.neighbors(u);
            for (i, &v) in row.iter().enumerate() {
                if v >= self.num_nodes {
                    return Err(Error::Data(format!("edge ({u},{v}) leaves node range")));
                }
                if v == u {
                    return Err(Error::Data(format!("self-loop at node {u}")));
                }
                if i > 0 && row[i - 1] >= v {
                    return Err(Error::Data(format!("duplicate or unsorted row {u}")));
                }
                if self.neighbors(v).binary_search(&u).is_err() {
                    return Err(Error::Data(format!("edge ({u},{v}) has no reverse")));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Shape {
            op: "permutation",
            lhs: vec![n],
            rhs: vec![perm.len()],
        });
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Data(format!("not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Per-node class ids in `0..num_classes`.
///
/// Reads through [`Labels::classes`] are counted so that tests can prove a
/// code path never looked at supervision.
#[derive(Debug)]
pub struct Labels {
    classes: Vec<usize>,
    num_classes: usize,
    names: Vec<String>,
    reads: AtomicUsize,
}

impl Labels {
    pub fn new(classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let names = (0..num_classes).map(|c| c.to_string()).collect();
        Self::with_names(classes, names)
    }

    pub fn with_names(classes: Vec<usize>, names: Vec<String>) -> Result<Self> {
        let num_classes = names.len();
        let mut counts = vec![0usize; num_classes];
        for (u, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Data(format!(
                    "node {u} has class {c}, expected < {num_classes}"
                )));
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Data(format!("class {c} has no members")));
        }
        Ok(Self {
            classes,
            num_classes,
            names,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn classes(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// How many times [`Labels::classes`] has been called.
    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub(crate) fn raw(&self) -> &[usize] {
        &self.classes
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.classes.len())?;
        let mut classes = vec![0; self.classes.len()];
        for (u, &pu) in perm.iter().enumerate() {
            classes[pu] = self.classes[u];
        }
        Self::with_names(classes, self.names.clone())
    }
}

impl Clone for Labels {
    fn clone(&self) -> Self {
        Self {
            classes: self.classes.clone(),
            num_classes: self.num_classes,
            names: self.names.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Labels {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes && self.names == other.names
    }
}

/// Disjoint train / validation / test node sets.
///
/// Accessors count their calls; [`Split::test_reads`] is how the evaluation
/// protocol proves the test set was consulted exactly once.
#[derive(Debug)]
pub struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    train_val_reads: AtomicUsize,
    test_reads: AtomicUsize,
}

impl Split {
    pub fn new(train: Vec<usize>, val: Vec<usize>, test: Vec<usize>, n: usize) -> Result<Self> {
        let mut owner = vec![None; n];
        for (part, idx) in [("train", &train), ("val", &val), ("test", &test)] {
            for &u in idx {
                if u >= n {
                    return Err(Error::Index {
                        op: "Split::new",
                        index: u,
                        bound: n,
                    });
                }
                if let Some(prev) = owner[u] {
                    return Err(Error::Data(format!(
                        "node {u} appears in both {prev} and {part}"
                    )));
                }
                owner[u] = Some(part);
            }
        }
        Ok(Self {
            train,
            val,
            test,
            train_val_reads: AtomicUsize::new(0),
            test_reads: AtomicUsize::new(0),
        })
    }

    pub fn train_idx(&self) -> &[usize] {
        self.train_val_reads.fetch_add(1, Ordering::Relaxed);
        &self.train
    }

    pub fn val_idx(&self) -> &[usize] {
        self.train_val_reads.fetch_add(1, Ordering::Relaxed);
        &self.val
    }

    pub fn test_idx(&self) -> &[usize] {
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        &self.test
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn train_val_reads(&self) -> usize {
        self.train_val_reads.load(Ordering::Relaxed)
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::Relaxed)
    }

    pub(crate) fn raw(&self) -> (&[usize], &[usize], &[usize]) {
        (&self.train, &self.val, &self.test)
    }
}

impl Clone for Split {
    fn clone(&self) -> Self {
        Self {
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            train_val_reads: AtomicUsize::new(0),
            test_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Split {
    fn eq(&self, other: &Self) -> bool {
        self.raw() == other.raw()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph::from_edges(3, 1, vec![0.0; 3], &[(0, 1), (2, 1), (1, 0), (1, 1)]).unwrap()
    }

    #[test]
    fn symmetrizes_and_strips_self_loops() {
        let g = path3();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.undirected_edges(), vec![(0, 1), (1, 2)]);
        g.validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_endpoint() {
        let err = Graph::from_edges(2, 1, vec![0.0; 2], &[(0, 2)]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 2, .. }));
    }

    #[test]
    fn directed_edges_follow_csr() {
        let (c, n) = path3().directed_edges();
        assert_eq!(c, vec![0, 1, 1, 2]);
        assert_eq!(n, vec![1, 0, 2, 1]);
    }

    #[test]
    fn permutation_relabels_rows_and_edges() {
        let g = Graph::from_edges(3, 1, vec![10.0, 11.0, 12.0], &[(0, 1)]).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.features(), &[11.0, 12.0, 10.0]);
        assert_eq!(p.undirected_edges(), vec![(0, 2)]);
    }

    #[test]
    fn labels_require_every_class() {
        assert!(Labels::new(vec![0, 0, 2], 3).is_err());
        assert!(Labels::new(vec![0, 3], 3).is_err());
        let l = Labels::new(vec![1, 0, 1], 2).unwrap();
        assert_eq!(l.read_count(), 0);
        let _ = l.classes();
        assert_eq!(l.read_count(), 1);
    }

    #[test]
    fn split_rejects_overlap() {
        assert!(Split::new(vec![0], vec![1], vec![1], 3).is_err());
        assert!(Split::new(vec![0], vec![3], vec![], 3).is_err());
        let s = Split::new(vec![0], vec![1], vec![2], 3).unwrap();
        let _ = s.test_idx();
        assert_eq!(s.test_reads(), 1);
        assert_eq!(s.train_val_reads(), 0);
    }
}
