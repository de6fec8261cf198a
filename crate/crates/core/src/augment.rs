//! Stochastic graph views: independent edge removal and feature-column masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Removal / masking probabilities for one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRatios {
    pub p_re: f64,
    pub p_mf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that an undirected edge is dropped.
    pub p_re: f64,
    /// Probability that a feature column is zeroed.
    pub p_mf: f64,
    pub view1: Option<ViewRatios>,
    pub view2: Option<ViewRatios>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_re: 0.2,
            p_mf: 0.3,
            view1: None,
            view2: None,
        }
    }
}

impl AugmentConfig {
    pub fn ratios(&self) -> [ViewRatios; 2] {
        let shared = ViewRatios {
            p_re: self.p_re,
            p_mf: self.p_mf,
        };
        [self.view1.unwrap_or(shared), self.view2.unwrap_or(shared)]
    }

    pub fn validate(&self) -> Result<()> {
        for r in self.ratios() {
            for (name, p) in [("p_re", r.p_re), ("p_mf", r.p_mf)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// One Bernoulli(`p`) draw per item; `true` means the item is hit.
fn bernoulli_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() < p).collect()
}

/// Drops each undirected edge independently with probability `p_re`.
pub fn remove_edges<R: Rng + ?Sized>(graph: &Graph, p_re: f64, rng: &mut R) -> Result<Graph> {
    let edges = graph.undirected_edges();
    let dropped = bernoulli_mask(edges.len(), p_re, rng);
    let kept: Vec<_> = edges
        .into_iter()
        .zip(dropped)
        .filter_map(|(e, drop)| (!drop).then_some(e))
        .collect();
    graph.with_edges(&kept)
}

/// Selects feature columns independently with probability `p_mf` and zeroes
/// them for every node.
pub fn mask_features<R: Rng + ?Sized>(graph: &Graph, p_mf: f64, rng: &mut R) -> Result<Graph> {
    let f = graph.num_features();
    let masked = bernoulli_mask(f, p_mf, rng);
    let mut features = graph.features().to_vec();
    if f > 0 {
        for row in features.chunks_mut(f) {
            for (x, &m) in row.iter_mut().zip(&masked) {
                if m {
                    *x = 0.0;
                }
            }
        }
    }
    graph.with_features(features)
}

/// Two views, each `mask_features(remove_edges(G))`, drawn one after the
/// other from `rng`.
pub fn make_views<R: Rng + ?Sized>(
    graph: &Graph,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Graph, Graph)> {
    let [r1, r2] = cfg.ratios();
    let v1 = mask_features(&remove_edges(graph, r1.p_re, rng)?, r1.p_mf, rng)?;
    let v2 = mask_features(&remove_edges(graph, r2.p_re, rng)?, r2.p_mf, rng)?;
    Ok((v1, v2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synth_sbm;
    use crate::rng::seeded;

    fn fixture() -> Graph {
        synth_sbm(&[10, 10], 0.5, 0.1, 6, 3.0, 4).unwrap().0
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let g = fixture();
        let mut rng = seeded(1);
        assert_eq!(remove_edges(&g, 0.0, &mut rng).unwrap(), g);
        assert_eq!(mask_features(&g, 0.0, &mut rng).unwrap(), g);
        let cfg = AugmentConfig {
            p_re: 0.0,
            p_mf: 0.0,
            ..AugmentConfig::default()
        };
        let (a, b) = make_views(&g, &cfg, &mut rng).unwrap();
        assert_eq!(a, g);
        assert_eq!(b, g);
    }

    #[test]
    fn unit_probabilities_wipe_out() {
        let g = fixture();
        let mut rng = seeded(2);
        assert_eq!(remove_edges(&g, 1.0, &mut rng).unwrap().edge_count(), 0);
        let m = mask_features(&g, 1.0, &mut rng).unwrap();
        assert!(m.features().iter().all(|&x| x == 0.0));
        assert_eq!(m.undirected_edges(), g.undirected_edges());
    }

    #[test]
    fn removal_keeps_a_subset_and_invariants() {
        let g = fixture();
        let mut rng = seeded(3);
        let r = remove_edges(&g, 0.4, &mut rng).unwrap();
        r.validate().unwrap();
        let all = g.undirected_edges();
        assert!(r
            .undirected_edges()
            .iter()
            .all(|e| all.binary_search(e).is_ok()));
        assert_eq!(r.features(), g.features());
    }

    #[test]
    fn masking_zeroes_whole_columns() {
        let g = fixture();
        let mut rng = seeded(5);
        let m = mask_features(&g, 0.5, &mut rng).unwrap();
        let f = g.num_features();
        for j in 0..f {
            let zeros = (0..g.num_nodes())
                .filter(|&u| m.features()[u * f + j] == 0.0)
                .count();
            assert!(zeros == 0 || zeros == g.num_nodes());
        }
    }

    #[test]
    fn views_are_deterministic_per_seed() {
        let g = fixture();
        let cfg = AugmentConfig::default();
        let a = make_views(&g, &cfg, &mut seeded(9)).unwrap();
        let b = make_views(&g, &cfg, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_view_overrides_apply() {
        let g = fixture();
        let cfg = AugmentConfig {
            p_re: 0.0,
            p_mf: 0.0,
            view1: None,
            view2: Some(ViewRatios {
                p_re: 1.0,
                p_mf: 0.0,
            }),
        };
        let (a, b) = make_views(&g, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(a, g);
        assert_eq!(b.edge_count(), 0);
    }

    #[test]
    fn rejects_out_of_range_ratios() {
        let cfg = AugmentConfig {
            p_mf: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
