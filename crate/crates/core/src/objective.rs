//! Contrastive objective over two views.
//!
//! The discriminator scores a pair of channel vectors as
//! `D(a, b) = logistic(cos(a, b) / τ)`. Positive pairs are the same node and
//! channel across views; node-specificity negatives pair node `u` with node
//! `perm(u)` in the same channel; channel-independence negatives pair channel
//! `k` of a node with channel `σ(k)` of the same node, `σ` a derangement.
//!
//! ```text
//! L_p  = −mean log D(z¹[u,k], z²[u,k])
//! L_ns = −mean log(1 − D(z¹[u,k], z²[perm(u),k]))
//! L_ci = −mean log(1 − D(z¹[u,k], z²[u,σ(k)]))
//! L    = L_p + L_ns + L_ci
//! ```

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor, Var, LOG_FLOOR};
use crate::encoder::{DisentangledEmbedding, NORM_EPS};
use crate::error::{Error, Result};
use crate::graph::check_permutation;

/// How a negative pair enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NegativeTerm {
    /// `−log(1 − D)`, binary cross-entropy with target 0.
    #[default]
    Bce,
    /// `−(1 − log D)`, the typeset form; kept for comparison runs only.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub temperature: f64,
    pub negative_term: NegativeTerm,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            negative_term: NegativeTerm::Bce,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Agreement score in `[1e-12, 1 − 1e-12]`. Zero vectors have cosine 0.
pub fn discriminator(a: &[f64], b: &[f64], temperature: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = if na < NORM_EPS || nb < NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    };
    logistic(cos / temperature).clamp(LOG_FLOOR, 1.0 - LOG_FLOOR)
}

/// Index structure of one round of negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSampling {
    ns_perm: Vec<usize>,
    ci_derangement: Vec<usize>,
}

impl NegativeSampling {
    pub fn new(ns_perm: Vec<usize>, ci_derangement: Vec<usize>) -> Result<Self> {
        check_permutation(&ns_perm, ns_perm.len())?;
        check_derangement(&ci_derangement)?;
        Ok(Self {
            ns_perm,
            ci_derangement,
        })
    }

    pub fn ns_perm(&self) -> &[usize] {
        &self.ns_perm
    }

    pub fn ci_derangement(&self) -> &[usize] {
        &self.ci_derangement
    }
}

fn check_derangement(sigma: &[usize]) -> Result<()> {
    if sigma.len() < 2 {
        return Err(Error::Config(
            "channel independence undefined for K<2".into(),
        ));
    }
    check_permutation(sigma, sigma.len())?;
    if let Some(k) = sigma.iter().enumerate().position(|(k, &s)| k == s) {
        return Err(Error::Data(format!(
            "channel shuffle has a fixed point at channel {k}"
        )));
    }
    Ok(())
}

/// Uniform node permutation and uniform channel derangement (by rejection).
/// For `n ≤ 2` the node permutation is forced fixed-point free.
pub fn sample_negatives<R: Rng + ?Sized>(
    n: usize,
    channels: usize,
    rng: &mut R,
) -> Result<NegativeSampling> {
    if channels < 2 {
        return Err(Error::Config(
            "channel independence undefined for K<2".into(),
        ));
    }
    if n < 2 {
        return Err(Error::Config(
            "node-specificity needs at least 2 nodes".into(),
        ));
    }
    let mut ns_perm: Vec<usize> = (0..n).collect();
    if n == 2 {
        ns_perm.swap(0, 1);
    } else {
        ns_perm.shuffle(rng);
    }
    let mut sigma: Vec<usize> = (0..channels).collect();
    loop {
        sigma.shuffle(rng);
        if sigma.iter().enumerate().all(|(k, &s)| k != s) {
            break;
        }
    }
    Ok(NegativeSampling {
        ns_perm,
        ci_derangement: sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_ns: f64,
    pub l_ci: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_p.is_finite()
            && self.l_ns.is_finite()
            && self.l_ci.is_finite()
            && self.l_total.is_finite()
    }
}

/// Tape handles for the three terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub positive: Var,
    pub node_specificity: Var,
    pub channel_independence: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Var| tape.value(v).item().expect("scalar loss");
        LossBreakdown {
            l_p: get(self.positive),
            l_ns: get(self.node_specificity),
            l_ci: get(self.channel_independence),
            l_total: get(self.total),
        }
    }
}

fn embedding_dims(tape: &Tape, z: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match tape.value(z).shape() {
        &[n, k, d] => Ok((n, k, d)),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![3],
        }),
    }
}

fn same_shape(tape: &Tape, z1: Var, z2: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let dims = embedding_dims(tape, z1, op)?;
    if tape.value(z1).shape() != tape.value(z2).shape() {
        return Err(Error::Shape {
            op,
            lhs: tape.value(z1).shape().to_vec(),
            rhs: tape.value(z2).shape().to_vec(),
        });
    }
    Ok(dims)
}

/// `D` for matching slices of two `[n, K, d]` tensors, shape `[n·K, 1]`.
fn scores(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let cos = tape.cosine_rows(a, b, NORM_EPS)?;
    let scaled = tape.scale_add(cos, 1.0 / temperature, 0.0);
    Ok(tape.sigmoid(scaled))
}

fn positive_term(tape: &mut Tape, d: Var) -> Var {
    let log_d = tape.log(d);
    let mean = tape.scalar_mean(log_d);
    tape.scale_add(mean, -1.0, 0.0)
}

fn negative_term(tape: &mut Tape, d: Var, term: NegativeTerm) -> Var {
    match term {
        NegativeTerm::Bce => {
            let one_minus = tape.scale_add(d, -1.0, 1.0);
            let log = tape.log(one_minus);
            let mean = tape.scalar_mean(log);
            tape.scale_add(mean, -1.0, 0.0)
        }
        NegativeTerm::Literal => {
            let log = tape.log(d);
            let one_minus = tape.scale_add(log, -1.0, 1.0);
            let mean = tape.scalar_mean(one_minus);
            tape.scale_add(mean, -1.0, 0.0)
        }
    }
}

pub fn positive_loss_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    cfg: &DiscriminatorConfig,
) -> Result<Var> {
    same_shape(tape, z1, z2, "positive_loss")?;
    let d = scores(tape, z1, z2, cfg.temperature)?;
    Ok(positive_term(tape, d))
}

pub fn ns_loss_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    ns_perm: &[usize],
    cfg: &DiscriminatorConfig,
) -> Result<Var> {
    let (n, _, _) = same_shape(tape, z1, z2, "ns_loss")?;
    check_permutation(ns_perm, n)?;
    let shuffled = tape.gather_rows(z2, ns_perm)?;
    let d = scores(tape, z1, shuffled, cfg.temperature)?;
    Ok(negative_term(tape, d, cfg.negative_term))
}

pub fn ci_loss_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    ci_derangement: &[usize],
    cfg: &DiscriminatorConfig,
) -> Result<Var> {
    let (n, k, d) = same_shape(tape, z1, z2, "ci_loss")?;
    if k < 2 {
        return Err(Error::Config(
            "channel independence undefined for K<2".into(),
        ));
    }
    if ci_derangement.len() != k {
        return Err(Error::Shape {
            op: "ci_loss",
            lhs: vec![k],
            rhs: vec![ci_derangement.len()],
        });
    }
    check_derangement(ci_derangement)?;
    let index: Vec<usize> = (0..n)
        .flat_map(|u| ci_derangement.iter().map(move |&s| u * k + s))
        .collect();
    let flat = tape.reshape(z2, &[n * k, d])?;
    let shuffled = tape.gather_rows(flat, &index)?;
    let shuffled = tape.reshape(shuffled, &[n, k, d])?;
    let scores = scores(tape, z1, shuffled, cfg.temperature)?;
    Ok(negative_term(tape, scores, cfg.negative_term))
}

/// All three terms from one pair of view embeddings, plus their sum.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    sampling: &NegativeSampling,
    cfg: &DiscriminatorConfig,
) -> Result<LossVars> {
    let positive = positive_loss_on_tape(tape, z1, z2, cfg)?;
    let node_specificity = ns_loss_on_tape(tape, z1, z2, &sampling.ns_perm, cfg)?;
    let channel_independence = ci_loss_on_tape(tape, z1, z2, &sampling.ci_derangement, cfg)?;
    let pn = tape.add(positive, node_specificity)?;
    let total = tape.add(pn, channel_independence)?;
    Ok(LossVars {
        positive,
        node_specificity,
        channel_independence,
        total,
    })
}

fn with_constants<T>(
    z1: &DisentangledEmbedding,
    z2: &DisentangledEmbedding,
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(z1.tensor().clone());
    let b = tape.constant(z2.tensor().clone());
    f(&mut tape, a, b)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().expect("scalar loss")
}

pub fn positive_loss(
    z1: &DisentangledEmbedding,
    z2: &DisentangledEmbedding,
    cfg: &DiscriminatorConfig,
) -> Result<f64> {
    with_constants(z1, z2, |tape, a, b| {
        let l = positive_loss_on_tape(tape, a, b, cfg)?;
        Ok(scalar(tape, l))
    })
}

pub fn ns_loss(
    z1: &DisentangledEmbedding,
    z2: &DisentangledEmbedding,
    ns_perm: &[usize],
    cfg: &DiscriminatorConfig,
) -> Result<f64> {
    with_constants(z1, z2, |tape, a, b| {
        let l = ns_loss_on_tape(tape, a, b, ns_perm, cfg)?;
        Ok(scalar(tape, l))
    })
}

pub fn ci_loss(
    z1: &DisentangledEmbedding,
    z2: &DisentangledEmbedding,
    ci_derangement: &[usize],
    cfg: &DiscriminatorConfig,
) -> Result<f64> {
    with_constants(z1, z2, |tape, a, b| {
        let l = ci_loss_on_tape(tape, a, b, ci_derangement, cfg)?;
        Ok(scalar(tape, l))
    })
}

pub fn total_loss(
    z1: &DisentangledEmbedding,
    z2: &DisentangledEmbedding,
    sampling: &NegativeSampling,
    cfg: &DiscriminatorConfig,
) -> Result<LossBreakdown> {
    with_constants(z1, z2, |tape, a, b| {
        Ok(total_loss_on_tape(tape, a, b, sampling, cfg)?.breakdown(tape))
    })
}

/// Embedding whose every slice is the same unit basis vector `e_axis`.
#[doc(hidden)]
pub fn constant_embedding(
    n: usize,
    channels: usize,
    dim: usize,
    axis: usize,
) -> DisentangledEmbedding {
    let mut t = Tensor::zeros(&[n, channels, dim]);
    for s in t.data_mut().chunks_mut(dim) {
        s[axis] = 1.0;
    }
    DisentangledEmbedding::new(t).expect("rank-3 tensor")
}
