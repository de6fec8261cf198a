//! Disentangled graph encoder.
//!
//! Each node is projected into `K` channel subspaces,
//! `c[u,k] = σ(W_kᵀ x_u + b_k)`, and every channel is then refined by
//! neighbourhood routing: starting from `z⁰[u,k] = c[u,k] / ‖c[u,k]‖`, each
//! iteration assigns neighbour `v` of `u` to channels with
//! `p[v,k] = softmax_k ⟨c[v,k], z[u,k]⟩` and sets
//! `z[u,k] = normalize(c[u,k] + Σ_v p[v,k] c[v,k])`.
//!
//! Routing weights depend on the centre node, so they live on directed edges.

use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffmath::{EdgeIndex, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::seeded;

/// Rows with a smaller norm normalize to zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of channels `K`.
    pub channels: usize,
    /// Width `d` of each channel.
    pub dim: usize,
    /// Routing iterations `T`.
    pub iterations: usize,
    pub activation: Activation,
    /// l2-normalize the projected channel vectors before routing.
    pub normalize_c: bool,
    /// Treat routing probabilities as constants in the backward pass.
    pub detach_routing: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            dim: 32,
            iterations: 6,
            activation: Activation::Relu,
            normalize_c: true,
            detach_routing: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, num_features: usize) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config(format!(
                "channels = {}: channel independence needs at least 2 channels",
                self.channels
            )));
        }
        if self.dim == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "dim and iterations must be at least 1".into(),
            ));
        }
        if self.dim > num_features {
            return Err(Error::Config(format!(
                "channel width {} exceeds feature count {num_features}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        self.channels * self.dim
    }
}

/// Channel projections, stored side by side: columns `k·d .. (k+1)·d` of
/// `weight` are `W_k` and the matching entries of `bias` are `b_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    channels: usize,
    dim: usize,
    weight: Tensor,
    bias: Tensor,
}

impl EncoderParams {
    pub fn new(channels: usize, dim: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        let w = channels * dim;
        if weight.shape().len() != 2 || weight.shape()[1] != w || bias.len() != w {
            return Err(Error::Shape {
                op: "EncoderParams::new",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bias = bias.reshape(&[w])?;
        Ok(Self {
            channels,
            dim,
            weight,
            bias,
        })
    }

    /// Assembles parameters from per-channel `(W_k: f×d, b_k: d)` pairs.
    pub fn from_channels(channels: &[(Tensor, Vec<f64>)]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Config("no channels".into()))?;
        let (f, d) = match first.0.shape() {
            &[f, d] => (f, d),
            other => {
                return Err(Error::Shape {
                    op: "EncoderParams::from_channels",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let k = channels.len();
        let mut weight = vec![0.0; f * k * d];
        let mut bias = Vec::with_capacity(k * d);
        for (ch, (w, b)) in channels.iter().enumerate() {
            if w.shape() != [f, d] || b.len() != d {
                return Err(Error::Shape {
                    op: "EncoderParams::from_channels",
                    lhs: w.shape().to_vec(),
                    rhs: vec![b.len()],
                });
            }
            for i in 0..f {
                weight[i * k * d + ch * d..i * k * d + (ch + 1) * d]
                    .copy_from_slice(&w.data()[i * d..(i + 1) * d]);
            }
            bias.extend_from_slice(b);
        }
        Self::new(
            k,
            d,
            Tensor::from_vec(vec![f, k * d], weight)?,
            Tensor::from_vec(vec![k * d], bias)?,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[f, K·d]`.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `[K·d]`.
    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn weight_and_bias_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    /// `W_k` as an `f × d` matrix.
    pub fn channel_weight(&self, k: usize) -> Tensor {
        let (f, d, w) = (self.num_features(), self.dim, self.channels * self.dim);
        let mut out = Vec::with_capacity(f * d);
        for i in 0..f {
            out.extend_from_slice(&self.weight.data()[i * w + k * d..i * w + (k + 1) * d]);
        }
        Tensor::from_vec(vec![f, d], out).expect("channel block shape")
    }

    pub fn channel_bias(&self, k: usize) -> &[f64] {
        &self.bias.data()[k * self.dim..(k + 1) * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.all_finite()
    }

    fn check_against(&self, cfg: &EncoderConfig, num_features: usize) -> Result<()> {
        if self.channels != cfg.channels
            || self.dim != cfg.dim
            || self.num_features() != num_features
        {
            return Err(Error::Config(format!(
                "parameters are K={} d={} f={}, config/graph need K={} d={} f={}",
                self.channels,
                self.dim,
                self.num_features(),
                cfg.channels,
                cfg.dim,
                num_features
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights per channel, `a = sqrt(6 / (f + d))`, zero biases.
pub fn init_params(cfg: &EncoderConfig, num_features: usize, seed: u64) -> Result<EncoderParams> {
    if num_features == 0 {
        return Err(Error::Config("feature count must be at least 1".into()));
    }
    let w = cfg.embedding_width();
    let bound = (6.0 / (num_features + cfg.dim) as f64).sqrt();
    let dist = Uniform::new(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seeded(seed);
    let weight: Vec<f64> = (0..num_features * w)
        .map(|_| dist.sample(&mut rng))
        .collect();
    EncoderParams::new(
        cfg.channels,
        cfg.dim,
        Tensor::from_vec(vec![num_features, w], weight)?,
        Tensor::zeros(&[w]),
    )
}

/// Tape handles for one set of encoder parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderVars {
    pub weight: Var,
    pub bias: Var,
}

impl EncoderParams {
    pub fn track(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    pub fn as_constants(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }
}

impl Graph {
    pub fn edge_index(&self) -> EdgeIndex {
        let (centers, neighbors) = self.directed_edges();
        EdgeIndex::new(self.num_nodes(), centers, neighbors).expect("graph edges are in range")
    }
}

/// Channel projection on a tape; `features` is `[n, f]`, the result `[n, K, d]`.
pub fn project_on_tape(
    tape: &mut Tape,
    features: Var,
    params: EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let n = tape.value(features).shape().first().copied().unwrap_or(0);
    let h = tape.matmul(features, params.weight)?;
    let h = tape.add_bias(h, params.bias)?;
    let h = match cfg.activation {
        Activation::Relu => tape.relu(h),
        Activation::Sigmoid => tape.sigmoid(h),
    };
    let c = tape.reshape(h, &[n, cfg.channels, cfg.dim])?;
    if cfg.normalize_c {
        tape.rows_l2_normalize(c, NORM_EPS)
    } else {
        Ok(c)
    }
}

/// Neighbourhood routing on a tape. `c` is `[n, K, d]`; returns `z⁽ᵀ⁾` of the
/// same shape. When `trace` is given, the routing probabilities `[E, K]` of
/// every iteration are appended to it in edge order.
pub fn route_on_tape(
    tape: &mut Tape,
    c: Var,
    edges: &Arc<EdgeIndex>,
    channels: usize,
    iterations: usize,
    detach_routing: bool,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let mut z = tape.rows_l2_normalize(c, NORM_EPS)?;
    for _ in 0..iterations {
        let logits = tape.edge_dot(z, c, channels, edges)?;
        let mut p = tape.softmax_last_axis(logits);
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(tape.value(p).clone());
        }
        if detach_routing {
            p = tape.detach(p);
        }
        let neighbourhood = tape.edge_aggregate(p, c, channels, edges)?;
        let raw = tape.add(c, neighbourhood)?;
        z = tape.rows_l2_normalize(raw, NORM_EPS)?;
    }
    Ok(z)
}

/// Projection followed by routing, on a tape. Returns `[n, K, d]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    graph: &Graph,
    edges: &Arc<EdgeIndex>,
    params: EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let x = tape.constant(graph.features_tensor());
    let c = project_on_tape(tape, x, params, cfg)?;
    route_on_tape(
        tape,
        c,
        edges,
        cfg.channels,
        cfg.iterations,
        cfg.detach_routing,
        None,
    )
}

/// Per-node, per-channel embeddings `z[u,k]`, shape `[n, K, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledEmbedding {
    values: Tensor,
}

impl DisentangledEmbedding {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape {
                op: "DisentangledEmbedding::new",
                lhs: values.shape().to_vec(),
                rhs: vec![3],
            });
        }
        Ok(Self { values })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn slice(&self, u: usize, k: usize) -> &[f64] {
        let (kk, d) = (self.channels(), self.dim());
        &self.values.data()[(u * kk + k) * d..(u * kk + k + 1) * d]
    }

    /// `z_u = [z_{u,1}, …, z_{u,K}]`.
    pub fn node(&self, u: usize) -> &[f64] {
        let w = self.channels() * self.dim();
        &self.values.data()[u * w..(u + 1) * w]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Channel-order concatenation, `[n, K·d]`.
    pub fn concat(&self) -> Tensor {
        let (n, w) = (self.num_nodes(), self.channels() * self.dim());
        self.values
            .clone()
            .reshape(&[n, w])
            .expect("same element count")
    }
}

pub fn channel_project(
    features: &Tensor,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    params.check_against(cfg, features.cols())?;
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = params.as_constants(&mut tape);
    let c = project_on_tape(&mut tape, x, vars, cfg)?;
    Ok(tape.value(c).clone())
}

/// Routing without gradient tracking. `c` is `[n, K, d]`.
pub fn neighborhood_routing(c: &Tensor, graph: &Graph, iterations: usize) -> Result<Tensor> {
    Ok(neighborhood_routing_traced(c, graph, iterations)?.0)
}

/// Like [`neighborhood_routing`], also returning each iteration's routing
/// probabilities (`[E, K]`, rows in [`Graph::directed_edges`] order).
pub fn neighborhood_routing_traced(
    c: &Tensor,
    graph: &Graph,
    iterations: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let channels = match c.shape() {
        &[n, k, _] if n == graph.num_nodes() => k,
        other => {
            return Err(Error::Shape {
                op: "neighborhood_routing",
                lhs: other.to_vec(),
                rhs: vec![graph.num_nodes()],
            })
        }
    };
    let edges = Arc::new(graph.edge_index());
    let mut tape = Tape::new();
    let cv = tape.constant(c.clone());
    let mut trace = Vec::with_capacity(iterations);
    let z = route_on_tape(
        &mut tape,
        cv,
        &edges,
        channels,
        iterations,
        false,
        Some(&mut trace),
    )?;
    Ok((tape.value(z).clone(), trace))
}

pub fn encode(
    graph: &Graph,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<DisentangledEmbedding> {
    params.check_against(cfg, graph.num_features())?;
    let edges = Arc::new(graph.edge_index());
    let mut tape = Tape::new();
    let vars = params.as_constants(&mut tape);
    let z = encode_on_tape(&mut tape, graph, &edges, vars, cfg)?;
    DisentangledEmbedding::new(tape.value(z).clone())
}
