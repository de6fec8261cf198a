//! Contrastive disentangled node embeddings.
//!
//! A K-channel encoder projects node features into channel subspaces and
//! refines them by neighbourhood routing; it is trained without labels by
//! contrasting two stochastically augmented views of the graph, and the frozen
//! embeddings are scored with a logistic-regression probe.

pub mod augment;
pub mod checkpoint;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod objective;
pub mod probe;
pub mod trainer;

mod checksum;
mod rng;

pub use checksum::sha256_hex;
pub use error::{Error, Result};
pub use rng::seeded;
