//! Reference implementations written as plain loops over nodes, channels and
//! edges. They share no code with the library beyond input types.
#![allow(dead_code)]

use cdlg::graph::Graph;
use rand::Rng;

pub mod checks;

pub type Cube = Vec<Vec<Vec<f64>>>;

pub fn cube(t: &cdlg::diffmath::Tensor) -> Cube {
    let s = t.shape();
    let (n, k, d) = (s[0], s[1], s[2]);
    (0..n)
        .map(|u| {
            (0..k)
                .map(|c| t.data()[(u * k + c) * d..(u * k + c + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Routing, one node and one neighbour at a time. Returns the final `z` and,
/// per iteration, `p[u][j][k]` for the `j`-th neighbour of `u`.
pub fn routing_loop(
    c: &Cube,
    adj: &[Vec<usize>],
    iterations: usize,
) -> (Cube, Vec<Vec<Vec<Vec<f64>>>>) {
    let n = c.len();
    let k = c[0].len();
    let mut z: Cube = c
        .iter()
        .map(|node| node.iter().map(|s| unit(s)).collect())
        .collect();
    let mut probs = Vec::new();
    for _ in 0..iterations {
        let mut next = Vec::with_capacity(n);
        let mut p_iter = Vec::with_capacity(n);
        for u in 0..n {
            let mut acc: Vec<Vec<f64>> = c[u].clone();
            let mut p_u = Vec::new();
            for &v in &adj[u] {
                let logits: Vec<f64> = (0..k).map(|ch| dot(&c[v][ch], &z[u][ch])).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|x| x / s).collect();
                for ch in 0..k {
                    for (a, b) in acc[ch].iter_mut().zip(&c[v][ch]) {
                        *a += p[ch] * b;
                    }
                }
                p_u.push(p);
            }
            next.push(acc.iter().map(|s| unit(s)).collect());
            p_iter.push(p_u);
        }
        z = next;
        probs.push(p_iter);
    }
    (z, probs)
}

pub fn adjacency(g: &Graph) -> Vec<Vec<usize>> {
    (0..g.num_nodes())
        .map(|u| g.neighbors(u).to_vec())
        .collect()
}

pub fn d_score(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let cos = if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    };
    let d = 1.0 / (1.0 + (-cos / tau).exp());
    d.clamp(1e-12, 1.0 - 1e-12)
}

/// `(L_p, L_ns, L_ci)` with the BCE negative term.
pub fn losses_loop(
    z1: &Cube,
    z2: &Cube,
    perm: &[usize],
    sigma: &[usize],
    tau: f64,
) -> (f64, f64, f64) {
    let n = z1.len();
    let k = z1[0].len();
    let (mut lp, mut lns, mut lci) = (0.0, 0.0, 0.0);
    for u in 0..n {
        for ch in 0..k {
            lp -= d_score(&z1[u][ch], &z2[u][ch], tau).ln();
            lns -= (1.0 - d_score(&z1[u][ch], &z2[perm[u]][ch], tau)).ln();
            lci -= (1.0 - d_score(&z1[u][ch], &z2[u][sigma[ch]], tau)).ln();
        }
    }
    let m = (n * k) as f64;
    (lp / m, lns / m, lci / m)
}

/// Erdős–Rényi edge list.
pub fn random_edges<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                e.push((u, v));
            }
        }
    }
    e
}

pub fn random_graph<R: Rng>(n: usize, f: usize, p: f64, rng: &mut R) -> Graph {
    let features: Vec<f64> = (0..n * f)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let edges = random_edges(n, p, rng);
    Graph::from_edges(n, f, features, &edges).unwrap()
}

pub fn random_cube<R: Rng>(n: usize, k: usize, d: usize, rng: &mut R) -> cdlg::diffmath::Tensor {
    let data = (0..n * k * d)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    cdlg::diffmath::Tensor::from_vec(vec![n, k, d], data).unwrap()
}

/// The six-node, two-community toy graph used in the routing fixtures.
pub fn toy6() -> Graph {
    let edges = [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)];
    let features: Vec<f64> = (0..6 * 4)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0)
        .collect();
    Graph::from_edges(6, 4, features, &edges).unwrap()
}
