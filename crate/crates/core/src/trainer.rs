//! Full-batch self-supervised training.
//!
//! The trainer sees only a [`Graph`]; labels and splits never reach it.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::diffmath::Tape;
use crate::encoder::{encode_on_tape, init_params, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objective::{sample_negatives, total_loss_on_tape, DiscriminatorConfig, LossBreakdown};
use crate::rng::seeded;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Offset between the initialisation seed and the view/negative stream.
const SAMPLING_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub discriminator: DiscriminatorConfig,
    pub lr_encoder: f64,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Draw the two views once and reuse them every epoch.
    pub fixed_views: bool,
    /// Record elapsed milliseconds per epoch; when false the column is 0 so
    /// that logs from identical seeds compare bytewise.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            lr_encoder: 0.001,
            epochs: 300,
            patience: 20,
            min_delta: 1e-4,
            seed: 0,
            fixed_views: false,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_features: usize) -> Result<()> {
        self.encoder.validate(num_features)?;
        self.augment.validate()?;
        self.discriminator.validate()?;
        if !(self.lr_encoder > 0.0 && self.lr_encoder.is_finite()) {
            return Err(Error::Config(format!(
                "lr_encoder must be positive, got {}",
                self.lr_encoder
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(Error::Config(format!(
                "min_delta must be non-negative, got {}",
                self.min_delta
            )));
        }
        Ok(())
    }
}

/// Adam moment buffers for a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, block: usize) -> &[f64] {
        &self.m[block]
    }

    pub fn second_moment(&self, block: usize) -> &[f64] {
        &self.v[block]
    }
}

/// One parameter block with its gradient.
pub struct ParamBlock<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Bias-corrected Adam update of every block. Gradients are checked before
/// anything is modified.
pub fn adam_step(blocks: &mut [ParamBlock<'_>], state: &mut AdamState, lr: f64) -> Result<()> {
    if blocks.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![blocks.len()],
            rhs: vec![state.m.len()],
        });
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.value.len() != b.grad.len() || b.value.len() != state.m[i].len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![b.value.len()],
                rhs: vec![b.grad.len(), state.m[i].len()],
            });
        }
        if let Some(j) = b.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "{}[{j}] = {}",
                b.name, b.grad[j]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, b) in blocks.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..b.value.len() {
            let g = b.grad[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            b.value[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_p: f64,
    pub l_ns: f64,
    pub l_ci: f64,
    pub l_total: f64,
    pub ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn from_records(records: Vec<EpochRecord>) -> Result<Self> {
        for w in records.windows(2) {
            if w[1].epoch <= w[0].epoch {
                return Err(Error::Data(format!(
                    "epochs not increasing: {} after {}",
                    w[1].epoch, w[0].epoch
                )));
            }
        }
        if let Some(r) = records.iter().find(|r| {
            ![r.l_p, r.l_ns, r.l_ci, r.l_total]
                .iter()
                .all(|x| x.is_finite())
        }) {
            return Err(Error::Data(format!("non-finite loss at epoch {}", r.epoch)));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l_total).collect()
    }
}

/// Writes `epoch,l_p,l_ns,l_ci,l_total,ms`, one row per epoch.
pub fn export_log(log: &TrainLog, path: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Data(
            "refusing to write an empty training log".into(),
        ));
    }
    let ctx = || format!("writing {}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", ctx())))?;
    for r in &log.records {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", ctx())))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn parse_log(path: &Path) -> Result<TrainLog> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["epoch", "l_p", "l_ns", "l_ci", "l_total", "ms"] {
        return Err(Error::Data(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let records = r
        .deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<EpochRecord>>>()?;
    TrainLog::from_records(records)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters that produced the lowest recorded total loss.
    pub params: EncoderParams,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_loss: LossBreakdown,
    pub stopped_early: bool,
}

/// Called once per epoch after both views are encoded, with the tape and the
/// parameter handles used for view 1 and view 2.
pub trait EpochObserver {
    fn views_encoded(&mut self, epoch: usize, tape: &Tape, view1: EncoderVars, view2: EncoderVars);
}

impl EpochObserver for () {
    fn views_encoded(&mut self, _: usize, _: &Tape, _: EncoderVars, _: EncoderVars) {}
}

pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(graph, cfg, &mut ())
}

pub fn train_observed(
    graph: &Graph,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    cfg.validate(graph.num_features())?;
    let enc = &cfg.encoder;
    let mut params = init_params(enc, graph.num_features(), cfg.seed)?;
    let mut adam = AdamState::new(&[params.weight().len(), params.bias().len()]);
    let mut rng = seeded(cfg.seed.wrapping_add(SAMPLING_STREAM));

    let draw = |rng: &mut crate::rng::Rng| -> Result<[(Graph, Arc<_>); 2]> {
        let (a, b) = make_views(graph, &cfg.augment, rng)?;
        let ea = Arc::new(a.edge_index());
        let eb = Arc::new(b.edge_index());
        Ok([(a, ea), (b, eb)])
    };
    let fixed = if cfg.fixed_views {
        Some(draw(&mut rng)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, EncoderParams, usize, LossBreakdown)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let fresh;
        let views = match &fixed {
            Some(v) => v,
            None => {
                fresh = draw(&mut rng)?;
                &fresh
            }
        };
        let sampling = sample_negatives(graph.num_nodes(), enc.channels, &mut rng)?;

        let mut tape = Tape::new();
        let vars = params.track(&mut tape);
        let z1 = encode_on_tape(&mut tape, &views[0].0, &views[0].1, vars, enc)?;
        let z2 = encode_on_tape(&mut tape, &views[1].0, &views[1].1, vars, enc)?;
        observer.views_encoded(epoch, &tape, vars, vars);
        let loss = total_loss_on_tape(&mut tape, z1, z2, &sampling, &cfg.discriminator)?;
        let b = loss.breakdown(&tape);
        if !b.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                l_p: b.l_p,
                l_ns: b.l_ns,
                l_ci: b.l_ci,
            });
        }
        let mut grads = tape.backward(loss.total)?;
        let gw = grads.remove(vars.weight).expect("weight is tracked");
        let gb = grads.remove(vars.bias).expect("bias is tracked");

        let improved = best
            .as_ref()
            .is_none_or(|(l, ..)| b.l_total < l - cfg.min_delta);
        if improved {
            best = Some((b.l_total, params.clone(), epoch, b));
            stale = 0;
        } else {
            stale += 1;
        }

        let (w, bias) = params.weight_and_bias_mut();
        let mut blocks = [
            ParamBlock {
                name: "weight",
                value: w.data_mut(),
                grad: gw.data(),
            },
            ParamBlock {
                name: "bias",
                value: bias.data_mut(),
                grad: gb.data(),
            },
        ];
        let step = adam_step(&mut blocks, &mut adam, cfg.lr_encoder);
        if let Err(Error::NonFiniteGradient(what)) = step {
            return Err(Error::NonFiniteGradient(format!("epoch {epoch}: {what}")));
        }
        step?;

        records.push(EpochRecord {
            epoch,
            l_p: b.l_p,
            l_ns: b.l_ns,
            l_ci: b.l_ci,
            l_total: b.l_total,
            ms: if cfg.log_wall_clock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if stale >= cfg.patience {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let (_, params, best_epoch, best_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        log: TrainLog::from_records(records)?,
        best_epoch,
        best_loss,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_moves_moments_only() {
        let mut x = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        let g = [0.5, 0.5];
        adam_step(
            &mut [ParamBlock {
                name: "x",
                value: &mut x,
                grad: &g,
            }],
            &mut st,
            0.0,
        )
        .unwrap();
        assert_eq!(x, [1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
        assert!((st.first_moment(0)[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_lr_in_size() {
        let mut x = vec![0.0];
        let mut st = AdamState::new(&[1]);
        adam_step(
            &mut [ParamBlock {
                name: "x",
                value: &mut x,
                grad: &[1.0],
            }],
            &mut st,
            0.01,
        )
        .unwrap();
        // m̂ = 1, v̂ = 1, so Δ = −lr / (1 + ε)
        assert!((x[0] + 0.01 / (1.0 + ADAM_EPS)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut x = vec![3.0, 4.0];
        let mut st = AdamState::new(&[2]);
        for _ in 0..10 {
            adam_step(
                &mut [ParamBlock {
                    name: "x",
                    value: &mut x,
                    grad: &[0.0, 0.0],
                }],
                &mut st,
                0.1,
            )
            .unwrap();
        }
        assert_eq!(x, [3.0, 4.0]);
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut x = vec![1.0, 1.0];
        let mut st = AdamState::new(&[2]);
        let err = adam_step(
            &mut [ParamBlock {
                name: "weight",
                value: &mut x,
                grad: &[0.1, f64::NAN],
            }],
            &mut st,
            0.1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("weight[1]"), "{err}");
        assert_eq!(x, [1.0, 1.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.encoder.dim = 4;
        assert!(cfg.validate(10).is_ok());
        for broken in [
            TrainConfig {
                lr_encoder: 0.0,
                ..cfg.clone()
            },
            TrainConfig {
                epochs: 0,
                ..cfg.clone()
            },
            TrainConfig {
                patience: 0,
                ..cfg.clone()
            },
        ] {
            assert!(broken.validate(10).is_err());
        }
    }

    #[test]
    fn log_rejects_bad_records() {
        let r = |epoch, l| EpochRecord {
            epoch,
            l_p: l,
            l_ns: l,
            l_ci: l,
            l_total: 3.0 * l,
            ms: 0,
        };
        assert!(TrainLog::from_records(vec![r(0, 1.0), r(0, 1.0)]).is_err());
        assert!(TrainLog::from_records(vec![r(0, f64::NAN)]).is_err());
        assert!(TrainLog::from_records(vec![r(0, 1.0), r(2, 0.5)]).is_ok());
    }
}
