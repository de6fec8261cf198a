//! Linear probe: l2-regularised softmax regression on frozen embeddings.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Labels, Split};
use crate::rng::seeded;
use crate::trainer::{adam_step, AdamState, ParamBlock, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    /// Candidate values of λ; the one with the best validation accuracy wins.
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decays: vec![1e-4, 1e-3, 1e-2, 1e-1],
            epochs: 500,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "probe lr must be positive, got {}",
                self.lr
            )));
        }
        if self.weight_decays.is_empty() {
            return Err(Error::Config("weight_decays is empty".into()));
        }
        if let Some(l) = self
            .weight_decays
            .iter()
            .find(|l| !(**l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {l}"
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("probe epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// `logits = x · W + b`, `W` is `[D, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProbeParams {
    pub fn zeros(width: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[width, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Argmax class of one embedding row; equal logits go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let c = self.num_classes();
        let w = self.weight.data();
        let mut logits = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (l, &wij) in logits.iter_mut().zip(&w[i * c..(i + 1) * c]) {
                    *l += xi * wij;
                }
            }
        }
        let mut best = 0;
        for j in 1..c {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub params: ProbeParams,
    pub lambda: f64,
    pub val_accuracy: f64,
}

fn check_embeddings(embeddings: &Tensor, n: usize) -> Result<usize> {
    match embeddings.shape() {
        &[rows, width] if rows == n && width > 0 => Ok(width),
        other => Err(Error::Shape {
            op: "probe",
            lhs: other.to_vec(),
            rhs: vec![n],
        }),
    }
}

fn gather(embeddings: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let width = embeddings.cols();
    let mut data = Vec::with_capacity(idx.len() * width);
    for &u in idx {
        data.extend_from_slice(embeddings.row(u));
    }
    Tensor::from_vec(vec![idx.len(), width], data)
}

/// Fraction of `idx` whose predicted class equals the label.
pub fn accuracy(
    params: &ProbeParams,
    embeddings: &Tensor,
    classes: &[usize],
    idx: &[usize],
) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = idx
        .iter()
        .filter(|&&u| params.predict(embeddings.row(u)) == classes[u])
        .count();
    hits as f64 / idx.len() as f64
}

/// Fits one probe with a fixed `λ` on the rows `idx`.
pub fn fit_probe(
    embeddings: &Tensor,
    classes: &[usize],
    num_classes: usize,
    idx: &[usize],
    lambda: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeParams> {
    let width = check_embeddings(embeddings, classes.len())?;
    if idx.is_empty() {
        return Err(Error::Data("probe training set is empty".into()));
    }
    let first = classes[idx[0]];
    if idx.iter().all(|&u| classes[u] == first) {
        return Err(Error::Data(format!(
            "probe training set holds a single class ({first})"
        )));
    }

    let x = gather(embeddings, idx)?;
    let mut onehot = Tensor::zeros(&[idx.len(), num_classes]);
    for (r, &u) in idx.iter().enumerate() {
        onehot.data_mut()[r * num_classes + classes[u]] = 1.0;
    }
    let scale = -1.0 / idx.len() as f64;

    let bound = (6.0 / (width + num_classes) as f64).sqrt();
    let dist = Uniform::new(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seeded(cfg.seed);
    let mut params = ProbeParams::zeros(width, num_classes);
    for w in params.weight.data_mut() {
        *w = dist.sample(&mut rng);
    }
    let mut adam = AdamState::new(&[width * num_classes, num_classes]);

    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(onehot.clone());
        let w = tape.param(params.weight.clone());
        let b = tape.param(params.bias.clone());
        let logits = tape.matmul(xv, w)?;
        let logits = tape.add_bias(logits, b)?;
        let p = tape.softmax_last_axis(logits);
        let logp = tape.log(p);
        let picked = tape.mul(logp, yv)?;
        let ce = tape.scalar_sum(picked);
        let ce = tape.scale_add(ce, scale, 0.0);
        let loss = if lambda > 0.0 {
            let w2 = tape.mul(w, w)?;
            let reg = tape.scalar_sum(w2);
            let reg = tape.scale_add(reg, lambda, 0.0);
            tape.add(ce, reg)?
        } else {
            ce
        };
        let mut grads = tape.backward(loss)?;
        let gw = grads.remove(w).expect("weight is tracked");
        let gb = grads.remove(b).expect("bias is tracked");
        let mut blocks = [
            ParamBlock {
                name: "probe weight",
                value: params.weight.data_mut(),
                grad: gw.data(),
            },
            ParamBlock {
                name: "probe bias",
                value: params.bias.data_mut(),
                grad: gb.data(),
            },
        ];
        adam_step(&mut blocks, &mut adam, cfg.lr)?;
    }
    Ok(params)
}

/// Fits one probe per candidate `λ` on the training rows and keeps the one
/// with the highest validation accuracy (earlier candidates win ties).
/// Test indices are not read.
pub fn train_probe(
    embeddings: &Tensor,
    labels: &Labels,
    split: &Split,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    cfg.validate()?;
    let classes = labels.classes();
    check_embeddings(embeddings, classes.len())?;
    let train_idx = split.train_idx();
    let val_idx = split.val_idx();
    let mut best: Option<ProbeFit> = None;
    for &lambda in &cfg.weight_decays {
        let params = fit_probe(
            embeddings,
            classes,
            labels.num_classes(),
            train_idx,
            lambda,
            cfg,
        )?;
        let val_accuracy = accuracy(&params, embeddings, classes, val_idx);
        if best.as_ref().is_none_or(|b| val_accuracy > b.val_accuracy) {
            best = Some(ProbeFit {
                params,
                lambda,
                val_accuracy,
            });
        }
    }
    Ok(best.expect("weight_decays is non-empty"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub lambda: f64,
}

/// Encodes the unaugmented graph, fits the probe and reports test accuracy.
pub fn evaluate(
    graph: &Graph,
    labels: &Labels,
    split: &Split,
    params: &EncoderParams,
    encoder: &EncoderConfig,
    cfg: &ProbeConfig,
) -> Result<Evaluation> {
    if labels.len() != graph.num_nodes() {
        return Err(Error::Data(format!(
            "{} labels for {} nodes",
            labels.len(),
            graph.num_nodes()
        )));
    }
    let embeddings = encode(graph, params, encoder)?.concat();
    let fit = train_probe(&embeddings, labels, split, cfg)?;
    let test_accuracy = accuracy(&fit.params, &embeddings, labels.classes(), split.test_idx());
    Ok(Evaluation {
        test_accuracy,
        val_accuracy: fit.val_accuracy,
        lambda: fit.lambda,
    })
}

/// The metrics record written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset: String,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub p_re: f64,
    pub p_mf: f64,
    pub seed: u64,
}

impl Metrics {
    pub fn new(dataset: &str, train: &TrainConfig, eval: &Evaluation) -> Self {
        Self {
            dataset: dataset.to_string(),
            test_accuracy: eval.test_accuracy,
            val_accuracy: eval.val_accuracy,
            lambda: eval.lambda,
            k: train.encoder.channels,
            d: train.encoder.dim,
            t: train.encoder.iterations,
            p_re: train.augment.p_re,
            p_mf: train.augment.p_mf,
            seed: train.seed,
        }
    }
}
