use rand::seq::SliceRandom;

use super::{Labels, Split};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Samples `per_class` training nodes from every class, then `val_size` and
/// `test_size` disjoint nodes from the remainder.
pub fn make_planetoid_split(
    labels: &Labels,
    per_class: usize,
    val_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<Split> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let classes = labels.raw();
    let n = classes.len();
    let c = labels.num_classes();
    if per_class * c + val_size + test_size > n {
        return Err(Error::Config(format!(
            "split needs {} nodes but the graph has {n}",
            per_class * c + val_size + test_size
        )));
    }

    let mut rng = seeded(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (u, &y) in classes.iter().enumerate() {
        members[y].push(u);
    }
    let mut in_train = vec![false; n];
    let mut train = Vec::with_capacity(per_class * c);
    for (class, nodes) in members.iter_mut().enumerate() {
        if nodes.len() < per_class {
            return Err(Error::Config(format!(
                "class {class} (`{}`) has {} members, fewer than {per_class}",
                labels.names()[class],
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        for &u in &nodes[..per_class] {
            in_train[u] = true;
            train.push(u);
        }
    }
    train.sort_unstable();

    let mut rest: Vec<usize> = (0..n).filter(|&u| !in_train[u]).collect();
    rest.shuffle(&mut rng);
    let mut val = rest[..val_size].to_vec();
    let mut test = rest[val_size..val_size + test_size].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    Split::new(train, val, test, n)
}
