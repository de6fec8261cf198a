use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Labels};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Stochastic block model with block-indicator features.
///
/// Node `u` in block `b` gets features `signal · e_b + N(0, I)`; each pair in
/// the same block is linked with probability `p_in`, pairs across blocks with
/// `p_out`.
pub fn synth_sbm(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    signal: f64,
    seed: u64,
) -> Result<(Graph, Labels)> {
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(Error::Config(
            "block sizes must be nonempty and positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::Config(
            "edge probabilities must lie in [0, 1]".into(),
        ));
    }
    if p_in < p_out {
        return Err(Error::Config(format!(
            "p_in ({p_in}) < p_out ({p_out}): fixture must be assortative"
        )));
    }
    if feature_dim < block_sizes.len() {
        return Err(Error::Config(format!(
            "feature_dim {feature_dim} cannot hold {} block indicators",
            block_sizes.len()
        )));
    }

    let block: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = block.len();
    let mut rng = seeded(seed);

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block[u] == block[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut features = Vec::with_capacity(n * feature_dim);
    for &b in &block {
        for j in 0..feature_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(if j == b { signal } else { 0.0 } + noise);
        }
    }

    let graph = Graph::from_edges(n, feature_dim, features, &edges)?;
    let labels = Labels::new(block, block_sizes.len())?;
    Ok((graph, labels))
}
