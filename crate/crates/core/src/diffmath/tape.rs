use std::collections::HashMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to every `log` input.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Directed edge list used by the routing kernels: edge `e` carries the
/// message of `neighbors[e]` to `centers[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    num_nodes: usize,
    centers: Vec<usize>,
    neighbors: Vec<usize>,
}

impl EdgeIndex {
    pub fn new(num_nodes: usize, centers: Vec<usize>, neighbors: Vec<usize>) -> Result<Self> {
        if centers.len() != neighbors.len() {
            return Err(Error::Shape {
                op: "EdgeIndex::new",
                lhs: vec![centers.len()],
                rhs: vec![neighbors.len()],
            });
        }
        if let Some(&bad) = centers.iter().chain(&neighbors).find(|&&u| u >= num_nodes) {
            return Err(Error::Index {
                op: "EdgeIndex::new",
                index: bad,
                bound: num_nodes,
            });
        }
        Ok(Self {
            num_nodes,
            centers,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Normalize {
        input: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    SegmentSum {
        input: Var,
        segments: Vec<usize>,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
        norms: Vec<(f64, f64)>,
    },
    Log(Var),
    Mean(Var),
    Sum(Var),
    ScaleAdd {
        input: Var,
        alpha: f64,
    },
    Reshape(Var),
    SumLast(Var),
    ScaleRows(Var, Var),
    EdgeDot {
        z: Var,
        c: Var,
        channels: usize,
        edges: Arc<EdgeIndex>,
    },
    EdgeAggregate {
        p: Var,
        c: Var,
        channels: usize,
        edges: Arc<EdgeIndex>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records tensor operations for one reverse sweep.
///
/// Leaves created with [`Tape::param`] are tracked; everything computed only
/// from constants is stored as a constant and never visited by
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
}

/// Gradients of the tracked leaves, keyed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Allows another [`Tape::backward`] call on this tape.
    pub fn reset(&mut self) {
        self.swept = false;
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x);
        let out = Tensor {
            shape: value.shape.clone(),
            data: value.data.iter().map(|&v| f(v)).collect(),
        };
        let tracked = self.tracked_any(&[x]);
        self.push(out, op, tracked)
    }

    /// `[m, k] × [k, n]`. Zero entries of the left operand are skipped, which
    /// makes sparse bag-of-words features cheap.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip != 0.0 {
                    axpy(aip, &bv.data[p * n..(p + 1) * n], orow);
                }
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            tracked,
        ))
    }

    /// Adds a bias vector to every last-axis row.
    pub fn add_bias(&mut self, m: Var, b: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(b));
        if bv.len() != mv.cols() {
            return Err(shape_err("add_bias", mv, bv));
        }
        let mut out = mv.clone();
        for row in out.data.chunks_mut(bv.len().max(1)) {
            for (x, bj) in row.iter_mut().zip(&bv.data) {
                *x += bj;
            }
        }
        let tracked = self.tracked_any(&[m, b]);
        Ok(self.push(out, Op::AddBias(m, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(name, av, bv));
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data: av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, op, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_FLOOR).ln())
    }

    /// `alpha · x + beta`, elementwise.
    pub fn scale_add(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        self.unary(x, Op::ScaleAdd { input: x, alpha }, |v| alpha * v + beta)
    }

    /// Divides every last-axis row by its l2 norm; rows with norm below `eps`
    /// become zero and pass no gradient.
    pub fn rows_l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "rows_l2_normalize: eps must be > 0, got {eps}"
            )));
        }
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        if c > 0 {
            for row in out.data.chunks_mut(c) {
                let norm = dot(row, row).sqrt();
                norms.push(norm);
                if norm < eps {
                    row.fill(0.0);
                } else {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            out,
            Op::Normalize {
                input: x,
                eps,
                norms,
            },
            tracked,
        ))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax_last_axis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        if c > 0 {
            for row in out.data.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        let tracked = self.tracked_any(&[x]);
        self.push(out, Op::Softmax(x), tracked)
    }

    /// Output row `i` is input row `index[i]`, rows taken along the first axis.
    pub fn gather_rows(&mut self, m: Var, index: &[usize]) -> Result<Var> {
        let mv = self.value(m);
        let (rows, width) = first_axis(mv);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&mv.data[i * width..(i + 1) * width]);
        }
        let mut shape = mv.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = index.len();
        let tracked = self.tracked_any(&[m]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Gather {
                input: m,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// Sums first-axis rows into `num_segments` buckets: row `i` lands in
    /// bucket `segments[i]`, accumulated in increasing `i`.
    pub fn segment_sum(&mut self, m: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let mv = self.value(m);
        let (rows, width) = first_axis(mv);
        if segments.len() != rows {
            return Err(Error::Shape {
                op: "segment_sum",
                lhs: mv.shape.clone(),
                rhs: vec![segments.len()],
            });
        }
        let mut data = vec![0.0; num_segments * width];
        for (i, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::Index {
                    op: "segment_sum",
                    index: s,
                    bound: num_segments,
                });
            }
            axpy(
                1.0,
                &mv.data[i * width..(i + 1) * width],
                &mut data[s * width..(s + 1) * width],
            );
        }
        let mut shape = mv.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = num_segments;
        let tracked = self.tracked_any(&[m]);
        Ok(self.push(
            Tensor { shape, data },
            Op::SegmentSum {
                input: m,
                segments: segments.to_vec(),
            },
            tracked,
        ))
    }

    /// Cosine similarity of matching last-axis rows, shape `[rows, 1]`.
    /// A row pair where either norm is below `eps` scores 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err("cosine_rows", av, bv));
        }
        let c = av.cols();
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let (x, y) = (&av.data[i * c..(i + 1) * c], &bv.data[i * c..(i + 1) * c]);
            let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
            norms.push((nx, ny));
            data.push(if nx < eps || ny < eps {
                0.0
            } else {
                dot(x, y) / (nx * ny)
            });
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, 1],
                data,
            },
            Op::Cosine { a, b, eps, norms },
            tracked,
        ))
    }

    pub fn scalar_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mean = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(mean), Op::Mean(x), tracked)
    }

    pub fn scalar_sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum::<f64>();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    /// Sums each last-axis row, keeping a trailing axis of width 1.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<f64> = if c == 0 {
            vec![0.0; xv.shape.iter().rev().skip(1).product()]
        } else {
            xv.data.chunks(c).map(|r| r.iter().sum()).collect()
        };
        let mut shape = xv.shape.clone();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor { shape, data }, Op::SumLast(x), tracked)
    }

    /// Multiplies last-axis row `i` of `m` by `scale[i]`.
    pub fn scale_rows(&mut self, m: Var, scale: Var) -> Result<Var> {
        let (mv, sv) = (self.value(m), self.value(scale));
        if sv.len() != mv.rows() {
            return Err(shape_err("scale_rows", mv, sv));
        }
        let c = mv.cols();
        let mut out = mv.clone();
        if c > 0 {
            for (row, s) in out.data.chunks_mut(c).zip(&sv.data) {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let tracked = self.tracked_any(&[m, scale]);
        Ok(self.push(out, Op::ScaleRows(m, scale), tracked))
    }

    /// Untracked copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn channel_width(
        &self,
        op: &'static str,
        x: &Tensor,
        channels: usize,
        edges: &EdgeIndex,
    ) -> Result<usize> {
        let n = edges.num_nodes;
        if channels == 0
            || n == 0
            || !x.len().is_multiple_of(n * channels)
            || x.shape.first() != Some(&n)
        {
            return Err(Error::Shape {
                op,
                lhs: x.shape.clone(),
                rhs: vec![n, channels],
            });
        }
        Ok(x.len() / (n * channels))
    }

    /// Per-edge, per-channel affinity: `out[e, k] = ⟨z[center_e, k], c[neighbor_e, k]⟩`.
    /// `z` and `c` hold `n` nodes × `channels` slices of equal width.
    /// Equivalent to gathering both operands per edge, multiplying and
    /// summing each slice, without materializing the per-edge copies.
    pub fn edge_dot(
        &mut self,
        z: Var,
        c: Var,
        channels: usize,
        edges: &Arc<EdgeIndex>,
    ) -> Result<Var> {
        let (zv, cv) = (self.value(z), self.value(c));
        if zv.shape != cv.shape {
            return Err(shape_err("edge_dot", zv, cv));
        }
        let d = self.channel_width("edge_dot", zv, channels, edges)?;
        let w = channels * d;
        let mut data = vec![0.0; edges.num_edges() * channels];
        for (e, (&u, &v)) in edges.centers.iter().zip(&edges.neighbors).enumerate() {
            let zu = &zv.data[u * w..(u + 1) * w];
            let cv_ = &cv.data[v * w..(v + 1) * w];
            for k in 0..channels {
                data[e * channels + k] = dot(&zu[k * d..(k + 1) * d], &cv_[k * d..(k + 1) * d]);
            }
        }
        let tracked = self.tracked_any(&[z, c]);
        Ok(self.push(
            Tensor {
                shape: vec![edges.num_edges(), channels],
                data,
            },
            Op::EdgeDot {
                z,
                c,
                channels,
                edges: Arc::clone(edges),
            },
            tracked,
        ))
    }

    /// Weighted neighbourhood sum: `out[u, k] = Σ_{e: center_e = u} p[e, k] · c[neighbor_e, k]`.
    /// Equivalent to gather → scale_rows → segment_sum over the edge list.
    pub fn edge_aggregate(
        &mut self,
        p: Var,
        c: Var,
        channels: usize,
        edges: &Arc<EdgeIndex>,
    ) -> Result<Var> {
        let (pv, cv) = (self.value(p), self.value(c));
        let d = self.channel_width("edge_aggregate", cv, channels, edges)?;
        if pv.len() != edges.num_edges() * channels {
            return Err(shape_err("edge_aggregate", pv, cv));
        }
        let w = channels * d;
        let mut data = vec![0.0; cv.len()];
        for (e, (&u, &v)) in edges.centers.iter().zip(&edges.neighbors).enumerate() {
            let src = &cv.data[v * w..(v + 1) * w];
            let dst = &mut data[u * w..(u + 1) * w];
            for k in 0..channels {
                axpy(
                    pv.data[e * channels + k],
                    &src[k * d..(k + 1) * d],
                    &mut dst[k * d..(k + 1) * d],
                );
            }
        }
        let tracked = self.tracked_any(&[p, c]);
        Ok(self.push(
            Tensor {
                shape: cv.shape.clone(),
                data,
            },
            Op::EdgeAggregate {
                p,
                c,
                channels,
                edges: Arc::clone(edges),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// tracked leaf that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.swept {
            return Err(Error::Backward(
                "tape was already swept; call reset() before another backward".into(),
            ));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape
            )));
        }
        if !self.is_tracked(loss) {
            return Err(Error::Backward(
                "loss does not depend on any tracked parameter".into(),
            ));
        }
        self.swept = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(
                    Var(i),
                    Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    },
                );
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let y = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].tracked {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                acc(*a, &mut |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] += dot(grow, &bv.data[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av.data[r * k + p];
                            if arp != 0.0 {
                                axpy(arp, grow, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::AddBias(m, b) => {
                acc(*m, &mut |dm| axpy(1.0, g, dm));
                acc(*b, &mut |db| {
                    let w = db.len().max(1);
                    for row in g.chunks(w) {
                        axpy(1.0, row, db);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| axpy(1.0, g, da));
                acc(*b, &mut |db| axpy(1.0, g, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for j in 0..da.len() {
                        da[j] += g[j] * bv.data[j];
                    }
                });
                acc(*b, &mut |db| {
                    for j in 0..db.len() {
                        db[j] += g[j] * av.data[j];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        if xv.data[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |dx| {
                for j in 0..dx.len() {
                    dx[j] += g[j] * y.data[j] * (1.0 - y.data[j]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |dx| {
                for j in 0..dx.len() {
                    dx[j] += g[j] * (1.0 - y.data[j] * y.data[j]);
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        if xv.data[j] >= LOG_FLOOR {
                            dx[j] += g[j] / xv.data[j];
                        }
                    }
                });
            }
            Op::ScaleAdd { input, alpha } => acc(*input, &mut |dx| axpy(*alpha, g, dx)),
            Op::Normalize { input, eps, norms } => {
                let c = y.cols();
                acc(*input, &mut |dx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm < *eps {
                            continue;
                        }
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let proj = dot(yr, gr);
                        for j in 0..c {
                            dx[r * c + j] += (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = y.cols();
                acc(*x, &mut |dx| {
                    for r in 0..y.rows() {
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let proj = dot(yr, gr);
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - proj);
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                let width = first_axis(val(*input)).1;
                acc(*input, &mut |dx| {
                    for (r, &src) in index.iter().enumerate() {
                        axpy(
                            1.0,
                            &g[r * width..(r + 1) * width],
                            &mut dx[src * width..(src + 1) * width],
                        );
                    }
                });
            }
            Op::SegmentSum { input, segments } => {
                let width = first_axis(val(*input)).1;
                acc(*input, &mut |dx| {
                    for (r, &s) in segments.iter().enumerate() {
                        axpy(
                            1.0,
                            &g[s * width..(s + 1) * width],
                            &mut dx[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::Cosine { a, b, eps, norms } => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.cols();
                for (target, this, other, first) in [(*a, av, bv, true), (*b, bv, av, false)] {
                    acc(target, &mut |dx| {
                        for (r, &(na, nb)) in norms.iter().enumerate() {
                            if na < *eps || nb < *eps {
                                continue;
                            }
                            let (n_this, n_other) = if first { (na, nb) } else { (nb, na) };
                            let cos = y.data[r];
                            let xr = &this.data[r * c..(r + 1) * c];
                            let orow = &other.data[r * c..(r + 1) * c];
                            for j in 0..c {
                                dx[r * c + j] += g[r]
                                    * (orow[j] / (n_this * n_other)
                                        - cos * xr[j] / (n_this * n_this));
                            }
                        }
                    });
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|v| *v += g[0])),
            Op::Reshape(x) => acc(*x, &mut |dx| axpy(1.0, g, dx)),
            Op::SumLast(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |dx| {
                    if c > 0 {
                        for (row, gr) in dx.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|v| *v += gr);
                        }
                    }
                });
            }
            Op::ScaleRows(m, s) => {
                let (mv, sv) = (val(*m), val(*s));
                let c = mv.cols();
                acc(*m, &mut |dm| {
                    for (r, &sr) in sv.data.iter().enumerate() {
                        axpy(sr, &g[r * c..(r + 1) * c], &mut dm[r * c..(r + 1) * c]);
                    }
                });
                acc(*s, &mut |ds| {
                    for r in 0..ds.len() {
                        ds[r] += dot(&g[r * c..(r + 1) * c], &mv.data[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::EdgeDot {
                z,
                c,
                channels,
                edges,
            } => {
                let (zv, cv) = (val(*z), val(*c));
                let k = *channels;
                let d = zv.len() / (edges.num_nodes * k);
                let w = k * d;
                acc(*z, &mut |dz| {
                    for (e, (&u, &v)) in edges.centers.iter().zip(&edges.neighbors).enumerate() {
                        for ch in 0..k {
                            let o = ch * d;
                            axpy(
                                g[e * k + ch],
                                &cv.data[v * w + o..v * w + o + d],
                                &mut dz[u * w + o..u * w + o + d],
                            );
                        }
                    }
                });
                acc(*c, &mut |dc| {
                    for (e, (&u, &v)) in edges.centers.iter().zip(&edges.neighbors).enumerate() {
                        for ch in 0..k {
                            let o = ch * d;
                            axpy(
                                g[e * k + ch],
                                &zv.data[u * w + o..u * w + o + d],
                                &mut dc[v * w + o..v * w + o + d],
                            );
                        }
                    }
                });
            }
            Op::EdgeAggregate {
                p,
                c,
                channels,
                edges,
            } => {
                let (pv, cv) = (val(*p), val(*c));
                let k = *channels;
                let d = cv.len() / (edges.num_nodes * k);
                let w = k * d;
                acc(*p, &mut |dp| {
                    for (e, (&u, &v)) in edges.centers.iter().zip(&edges.neighbors).enumerate() {
                        for ch in 0..k {
                            let o = ch * d;
                            dp[e * k + ch] += dot(
                                &g[u * w + o..u * w + o + d],
                                &cv.data[v * w + o..v * w + o + d],
                            );
                        }
                    }
                });
                acc(*c, &mut |dc| {
                    for (e, (&u, &v)) in edges.centers.iter().zip(&edges.neighbors).enumerate() {
                        for ch in 0..k {
                            let o = ch * d;
                            axpy(
                                pv.data[e * k + ch],
                                &g[u * w + o..u * w + o + d],
                                &mut dc[v * w + o..v * w + o + d],
                            );
                        }
                    }
                });
            }
        }
    }
}

/// `(rows, width)` when viewing a tensor as a stack of first-axis rows.
fn first_axis(t: &Tensor) -> (usize, usize) {
    match t.shape.first() {
        None => (1, 1),
        Some(0) => (0, 0),
        Some(&r) => (r, t.len() / r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_difference_grad;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[2.5; 4]));
        let y = tape.softmax_last_axis(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.rows_l2_normalize(x, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn cosine_of_row_with_itself_is_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 0.0, 0.0, 7.0]));
        let c = tape.cosine_rows(x, x, 1e-12).unwrap();
        for &v in tape.value(c).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_mean_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.scalar_mean(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn zero_row_normalization_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.0, 0.0, 1.0, 2.0]));
        let y = tape.rows_l2_normalize(x, 1e-12).unwrap();
        assert_eq!(&tape.value(y).data()[..2], &[0.0, 0.0]);
        let s = tape.scalar_sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.get(x).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err(), "non-scalar");
        let detached = tape.scalar_sum(c);
        assert!(tape.backward(detached).is_err(), "detached");
        let s = tape.scalar_sum(x);
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err(), "second sweep");
        tape.reset();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 1], &[1.0, -1.0]));
        let x = tape.constant(t(&[1, 2], &[2.0, 3.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.scalar_sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let err = tape.segment_sum(a, &[0, 5], 2).unwrap_err();
        assert!(matches!(
            err,
            Error::Index {
                op: "segment_sum",
                ..
            }
        ));
    }

    #[test]
    fn log_is_clamped() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.0, -1.0]));
        let y = tape.log(x);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|v| (v - LOG_FLOOR.ln()).abs() < 1e-12));
        let s = tape.scalar_sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn fused_edge_ops_match_gather_composition() {
        let n = 4;
        let (k, d) = (2, 3);
        let edges = Arc::new(EdgeIndex::new(n, vec![0, 0, 1, 2, 3], vec![1, 2, 0, 0, 1]).unwrap());
        let zdata: Vec<f64> = (0..n * k * d)
            .map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0)
            .collect();
        let cdata: Vec<f64> = (0..n * k * d)
            .map(|i| ((i * 5) % 13) as f64 / 6.0 - 1.0)
            .collect();

        let mut tape = Tape::new();
        let z = tape.constant(t(&[n, k * d], &zdata));
        let c = tape.constant(t(&[n, k * d], &cdata));
        let fused = tape.edge_dot(z, c, k, &edges).unwrap();

        let zg = tape.gather_rows(z, edges.centers()).unwrap();
        let cg = tape.gather_rows(c, edges.neighbors()).unwrap();
        let prod = tape.mul(zg, cg).unwrap();
        let prod = tape.reshape(prod, &[edges.num_edges() * k, d]).unwrap();
        let composed = tape.sum_last_axis(prod);
        assert_eq!(tape.value(fused).data(), tape.value(composed).data());

        let p = tape.softmax_last_axis(fused);
        let agg = tape.edge_aggregate(p, c, k, &edges).unwrap();
        let cg = tape.reshape(cg, &[edges.num_edges() * k, d]).unwrap();
        let scaled = tape.scale_rows(cg, p).unwrap();
        let scaled = tape.reshape(scaled, &[edges.num_edges(), k * d]).unwrap();
        let summed = tape.segment_sum(scaled, edges.centers(), n).unwrap();
        for (a, b) in tape.value(agg).data().iter().zip(tape.value(summed).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn segment_sum_equals_dense_adjacency_matmul() {
        // 5-node graph, A·M via segment_sum(gather(M, nbr), center)
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (4, 1)];
        let n = 5;
        let mut centers = Vec::new();
        let mut nbrs = Vec::new();
        let mut adj = vec![0.0; n * n];
        for &(u, v) in &pairs {
            for (a, b) in [(u, v), (v, u)] {
                centers.push(a);
                nbrs.push(b);
                adj[a * n + b] = 1.0;
            }
        }
        let m: Vec<f64> = (0..n * 3).map(|i| (i as f64).sin()).collect();
        let mut tape = Tape::new();
        let mv = tape.constant(t(&[n, 3], &m));
        let av = tape.constant(t(&[n, n], &adj));
        let dense = tape.matmul(av, mv).unwrap();
        let g = tape.gather_rows(mv, &nbrs).unwrap();
        let sparse = tape.segment_sum(g, &centers, n).unwrap();
        for (a, b) in tape
            .value(dense)
            .data()
            .iter()
            .zip(tape.value(sparse).data())
        {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn edge_op_gradients_match_finite_differences() {
        let n = 3;
        let (k, d) = (2, 2);
        let edges = Arc::new(EdgeIndex::new(n, vec![0, 1, 1, 2], vec![1, 0, 2, 1]).unwrap());
        let x0 = t(
            &[n, k * d],
            &[
                0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.2, 0.8, 0.7, -0.6, 0.1, 0.3,
            ],
        );
        let run = |x: &Tensor, tape: &mut Tape, track: bool| {
            let v = if track {
                tape.param(x.clone())
            } else {
                tape.constant(x.clone())
            };
            let logits = tape.edge_dot(v, v, k, &edges).unwrap();
            let p = tape.softmax_last_axis(logits);
            let agg = tape.edge_aggregate(p, v, k, &edges).unwrap();
            let sq = tape.mul(agg, agg).unwrap();
            let loss = tape.scalar_sum(sq);
            (v, loss)
        };
        let mut tape = Tape::new();
        let (v, loss) = run(&x0, &mut tape, true);
        let g = tape.backward(loss).unwrap();
        let fd = finite_difference_grad(
            |x| {
                let mut tp = Tape::new();
                let (_, l) = run(x, &mut tp, false);
                tp.value(l).item().unwrap()
            },
            &x0,
            1e-6,
        );
        for (a, b) in g.get(v).unwrap().data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
