//! Measurements shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::sync::Arc;

use cdlg::diffmath::{finite_difference_grad, Tape, Tensor};
use cdlg::encoder::{
    channel_project, encode_on_tape, init_params, neighborhood_routing,
    neighborhood_routing_traced, EncoderConfig, EncoderParams,
};
use cdlg::graph::Graph;
use cdlg::objective::{total_loss_on_tape, DiscriminatorConfig, NegativeSampling};
use cdlg::seeded;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{adjacency, cube, random_cube, random_graph, routing_loop, toy6};

fn l_total(
    g1: &Graph,
    g2: &Graph,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    sampling: &NegativeSampling,
) -> (f64, Option<(Tensor, Tensor)>) {
    let mut tape = Tape::new();
    let vars = params.track(&mut tape);
    let e1 = Arc::new(g1.edge_index());
    let e2 = Arc::new(g2.edge_index());
    let z1 = encode_on_tape(&mut tape, g1, &e1, vars, cfg).unwrap();
    let z2 = encode_on_tape(&mut tape, g2, &e2, vars, cfg).unwrap();
    let loss =
        total_loss_on_tape(&mut tape, z1, z2, sampling, &DiscriminatorConfig::default()).unwrap();
    let value = tape.value(loss.total).item().unwrap();
    let mut grads = tape.backward(loss.total).unwrap();
    let gw = grads.remove(vars.weight).unwrap();
    let gb = grads.remove(vars.bias).unwrap();
    (value, Some((gw, gb)))
}

fn rel_err(a: f64, b: f64) -> f64 {
    // absolute floor keeps entries with vanishing gradient from dominating
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between backward and central differences of
/// `l_total` over `instances` random problems. Biases start positive so that
/// few ReLU pre-activations sit within a step of the kink.
pub fn gradient_check(seed: u64, instances: usize) -> f64 {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(3..=8);
        let k = rng.random_range(2..=3);
        let d = rng.random_range(1..=4);
        let t = rng.random_range(1..=3);
        let f = rng.random_range(d..=d + 3);
        let g1 = random_graph(n, f, 0.5, &mut rng);
        let g2 = random_graph(n, f, 0.5, &mut rng)
            .with_features(g1.features().to_vec())
            .unwrap();
        let cfg = EncoderConfig {
            channels: k,
            dim: d,
            iterations: t,
            activation: if rng.random::<bool>() {
                cdlg::encoder::Activation::Sigmoid
            } else {
                cdlg::encoder::Activation::Relu
            },
            ..EncoderConfig::default()
        };
        let mut params = init_params(&cfg, f, rng.random()).unwrap();
        for b in params.bias_mut().data_mut() {
            *b = rng.random::<f64>() * 0.2 + 0.05;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let sigma: Vec<usize> = (0..k).map(|c| (c + 1) % k).collect();
        let sampling = NegativeSampling::new(perm, sigma).unwrap();

        let (_, grads) = l_total(&g1, &g2, &params, &cfg, &sampling);
        let (gw, gb) = grads.unwrap();
        let h = 1e-6;
        let fd_w = finite_difference_grad(
            |w| {
                let mut p = params.clone();
                p.weight_mut().data_mut().copy_from_slice(w.data());
                l_total(&g1, &g2, &p, &cfg, &sampling).0
            },
            params.weight(),
            h,
        );
        let fd_b = finite_difference_grad(
            |b| {
                let mut p = params.clone();
                p.bias_mut().data_mut().copy_from_slice(b.data());
                l_total(&g1, &g2, &p, &cfg, &sampling).0
            },
            params.bias(),
            h,
        );
        for (a, b) in gw
            .data()
            .iter()
            .zip(fd_w.data())
            .chain(gb.data().iter().zip(fd_b.data()))
        {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

/// Graphs of at most eight nodes with their routing settings `(K, d, T)`.
pub fn routing_fixtures() -> Vec<(Graph, usize, usize, usize)> {
    let mut rng = seeded(2024);
    let mut out = vec![(toy6(), 4, 3, 4)];
    for n in 1..=8 {
        for &p in &[0.0, 0.3, 0.7, 1.0] {
            let k = rng.random_range(2..=4);
            let d = rng.random_range(1..=4);
            out.push((
                random_graph(n, 4, p, &mut rng),
                k,
                d,
                rng.random_range(1..=5),
            ));
        }
    }
    out
}

/// Largest absolute difference between vectorised routing and the loop
/// reference across the fixture set, covering both `z` and `p`.
pub fn routing_check() -> f64 {
    let mut rng = seeded(77);
    let mut worst: f64 = 0.0;
    for (g, k, d, t) in routing_fixtures() {
        let c = random_cube(g.num_nodes(), k, d, &mut rng);
        let (z, trace) = neighborhood_routing_traced(&c, &g, t).unwrap();
        let (z_ref, p_ref) = routing_loop(&cube(&c), &adjacency(&g), t);
        for (a, b) in cube(&z)
            .iter()
            .flatten()
            .flatten()
            .zip(z_ref.iter().flatten().flatten())
        {
            worst = worst.max((a - b).abs());
        }
        for (p, pr) in trace.iter().zip(&p_ref) {
            let flat: Vec<f64> = pr.iter().flatten().flatten().copied().collect();
            assert_eq!(flat.len(), p.len());
            for (a, b) in p.data().iter().zip(&flat) {
                worst = worst.max((a - b).abs());
            }
        }
        assert_eq!(neighborhood_routing(&c, &g, t).unwrap(), z);
    }
    worst
}

/// Worst deviation of routing probability sums from 1 and of `‖z[u,k]‖`
/// from 1 over `encodes` random encodes. Slices that are exactly zero
/// because the projection is zero at the node and all its neighbours are
/// skipped and counted.
pub fn invariant_check(seed: u64, encodes: usize) -> (f64, f64, usize) {
    let mut rng = seeded(seed);
    let (mut simplex, mut norm): (f64, f64) = (0.0, 0.0);
    let mut skipped = 0;
    for _ in 0..encodes {
        let n = rng.random_range(2..=30);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(1..=8);
        let f = d + rng.random_range(0..=8);
        let g = random_graph(n, f, rng.random::<f64>() * 0.5, &mut rng);
        let cfg = EncoderConfig {
            channels: k,
            dim: d,
            iterations: rng.random_range(1..=6),
            ..EncoderConfig::default()
        };
        let mut params = init_params(&cfg, f, rng.random()).unwrap();
        for b in params.bias_mut().data_mut() {
            *b = 0.1;
        }
        let c = channel_project(&g.features_tensor(), &params, &cfg).unwrap();
        let (z, trace) = neighborhood_routing_traced(&c, &g, cfg.iterations).unwrap();
        for p in &trace {
            for row in p.data().chunks(k) {
                simplex = simplex.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let zero = |t: &Tensor, u: usize, ch: usize| {
            t.data()[(u * k + ch) * d..(u * k + ch + 1) * d]
                .iter()
                .all(|&x| x == 0.0)
        };
        for u in 0..n {
            for ch in 0..k {
                let s = &z.data()[(u * k + ch) * d..(u * k + ch + 1) * d];
                let len = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                // zero is allowed only when nothing nonzero reaches the slice
                let degenerate = zero(&c, u, ch) && g.neighbors(u).iter().all(|&v| zero(&c, v, ch));
                if len == 0.0 && degenerate {
                    skipped += 1;
                } else {
                    norm = norm.max((len - 1.0).abs());
                }
            }
        }
    }
    (simplex, norm, skipped)
}
