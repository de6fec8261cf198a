mod common;

use cdlg::augment::{make_views, mask_features, remove_edges, AugmentConfig};
use cdlg::graph::Graph;
use cdlg::seeded;

fn within_3_sigma(mean: f64, trials: usize, m: usize, p: f64) -> bool {
    // mean of `trials` Binomial(m, p) counts
    let sd = (m as f64 * p * (1.0 - p) / trials as f64).sqrt();
    (mean - m as f64 * p).abs() < 3.0 * sd
}

#[test]
fn edge_removal_count_is_binomial() {
    let mut rng = seeded(1);
    let mut edges = Vec::new();
    'outer: for u in 0..100 {
        for v in u + 1..100 {
            edges.push((u, v));
            if edges.len() == 1000 {
                break 'outer;
            }
        }
    }
    let g = Graph::from_edges(100, 1, vec![1.0; 100], &edges).unwrap();
    let trials = 500;
    let removed: usize = (0..trials)
        .map(|_| 1000 - remove_edges(&g, 0.3, &mut rng).unwrap().edge_count())
        .sum();
    assert!(within_3_sigma(
        removed as f64 / trials as f64,
        trials,
        1000,
        0.3
    ));
}

#[test]
fn masked_column_count_is_binomial() {
    let mut rng = seeded(2);
    let f = 1000;
    let g = Graph::from_edges(2, f, vec![1.0; 2 * f], &[(0, 1)]).unwrap();
    let trials = 500;
    let masked: usize = (0..trials)
        .map(|_| {
            let m = mask_features(&g, 0.2, &mut rng).unwrap();
            m.feature_row(0).iter().filter(|&&x| x == 0.0).count()
        })
        .sum();
    assert!(within_3_sigma(
        masked as f64 / trials as f64,
        trials,
        f,
        0.2
    ));
}

#[test]
fn the_two_views_differ() {
    let mut rng = seeded(3);
    let g = common::random_graph(30, 20, 0.3, &mut rng);
    let (a, b) = make_views(&g, &AugmentConfig::default(), &mut rng).unwrap();
    assert_ne!(a, b);
    a.validate().unwrap();
    b.validate().unwrap();
}
