use cdlg::diffmath::Tensor;
use cdlg::graph::{Labels, Split};
use cdlg::probe::{accuracy, fit_probe, train_probe, ProbeConfig, ProbeParams};
use cdlg::seeded;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// Two unit-variance blobs in 2-D whose centres are `margin` apart.
fn blobs(per: usize, margin: f64, seed: u64) -> (Tensor, Labels) {
    let mut rng = seeded(seed);
    let mut data = Vec::new();
    let mut classes = Vec::new();
    for c in 0..2 {
        for _ in 0..per {
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            data.push(x + c as f64 * margin);
            data.push(y);
            classes.push(c);
        }
    }
    (
        Tensor::from_vec(vec![2 * per, 2], data).unwrap(),
        Labels::new(classes, 2).unwrap(),
    )
}

fn shuffled_split(n: usize, train: usize, val: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let (a, rest) = idx.split_at(train);
    let (b, c) = rest.split_at(val);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort();
        v
    };
    Split::new(sorted(a), sorted(b), sorted(c), n).unwrap()
}

#[test]
fn separable_blobs_are_classified_perfectly() {
    // centres 10σ apart leave a gap of at least 5σ between the samples
    let (emb, labels) = blobs(50, 10.0, 1);
    let xs: Vec<f64> = emb.data().chunks(2).map(|r| r[0]).collect();
    let right_of_0 = xs[..50].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let left_of_1 = xs[50..].iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(left_of_1 - right_of_0 > 5.0);
    let split = shuffled_split(100, 20, 20, 2);
    let cfg = ProbeConfig {
        weight_decays: vec![1e-4],
        ..ProbeConfig::default()
    };
    let fit = train_probe(&emb, &labels, &split, &cfg).unwrap();
    assert_eq!(
        accuracy(&fit.params, &emb, labels.classes(), split.test_idx()),
        1.0
    );
}

#[test]
fn huge_weight_decay_collapses_to_majority() {
    let (emb, _) = blobs(40, 3.0, 3);
    // 60/20 class balance
    let classes: Vec<usize> = (0..80).map(|u| usize::from(u >= 60)).collect();
    let labels = Labels::new(classes.clone(), 2).unwrap();
    let idx: Vec<usize> = (0..80).collect();
    let cfg = ProbeConfig {
        epochs: 2000,
        ..ProbeConfig::default()
    };
    let p = fit_probe(&emb, labels.classes(), 2, &idx, 1e6, &cfg).unwrap();
    let wmax = p.weight.data().iter().fold(0.0f64, |m, w| m.max(w.abs()));
    assert!(wmax < 1e-4, "{wmax}");
    assert_eq!(accuracy(&p, &emb, &classes, &idx), 0.75);
}

#[test]
fn random_embeddings_score_at_chance() {
    let mut rng = seeded(6);
    let (n, c, reps) = (300, 4, 20);
    let mut total = 0.0;
    for r in 0..reps {
        let data: Vec<f64> = (0..n * 8).map(|_| rng.sample(StandardNormal)).collect();
        let emb = Tensor::from_vec(vec![n, 8], data).unwrap();
        let classes: Vec<usize> = (0..n).map(|u| u % c).collect();
        let labels = Labels::new(classes, c).unwrap();
        let split = shuffled_split(n, 40, 60, r);
        let cfg = ProbeConfig {
            epochs: 100,
            seed: r,
            ..ProbeConfig::default()
        };
        let fit = train_probe(&emb, &labels, &split, &cfg).unwrap();
        total += accuracy(&fit.params, &emb, labels.classes(), split.test_idx());
    }
    let mean = total / reps as f64;
    // test sets of 200 nodes: sd of the mean is sqrt(p(1-p)/200/reps)
    let sd = (0.25 * 0.75 / 200.0 / reps as f64).sqrt();
    assert!((mean - 0.25).abs() < 3.0 * sd, "{mean}");
}

#[test]
fn unregularised_probe_fits_train_at_least_as_well_as_val() {
    let (emb, labels) = blobs(60, 2.0, 9);
    let split = shuffled_split(120, 40, 40, 4);
    let cfg = ProbeConfig {
        weight_decays: vec![0.0],
        epochs: 1000,
        ..ProbeConfig::default()
    };
    let fit = train_probe(&emb, &labels, &split, &cfg).unwrap();
    let train_acc = accuracy(&fit.params, &emb, labels.classes(), split.train_idx());
    assert!(train_acc >= fit.val_accuracy);
}

#[test]
fn selection_never_reads_test_indices() {
    let (emb, labels) = blobs(30, 4.0, 2);
    let split = shuffled_split(60, 20, 20, 1);
    train_probe(&emb, &labels, &split, &ProbeConfig::default()).unwrap();
    assert_eq!(split.test_reads(), 0);
}

#[test]
fn perfect_predictions_score_one() {
    let emb = Tensor::from_vec(
        vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let mut p = ProbeParams::zeros(3, 3);
    p.weight = emb.clone();
    assert_eq!(accuracy(&p, &emb, &[0, 1, 2], &[0, 1, 2]), 1.0);
}
