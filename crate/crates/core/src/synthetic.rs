//! Seeded stochastic-block-model graphs with bag-of-words style features.

use freekd_tensor::Matrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub nodes: usize,
    pub classes: usize,
    /// Edge probability inside a class.
    pub p_in: f64,
    /// Edge probability across classes.
    pub p_out: f64,
    pub feature_dim: usize,
    /// Active binary features per node.
    pub words_per_node: usize,
    /// Chance that an active feature comes from the node's class block.
    pub topic_fraction: f64,
    pub seed: u64,
}

impl SbmSpec {
    /// Small three-class graph used by smoke tests.
    pub fn small(nodes: usize, seed: u64) -> Self {
        SbmSpec {
            nodes,
            classes: 3,
            p_in: 0.2,
            p_out: 0.02,
            feature_dim: 24,
            words_per_node: 5,
            topic_fraction: 0.6,
            seed,
        }
    }
}

/// Generates the graph without split masks. Node `i` belongs to class
/// `i % classes`.
pub fn sbm(spec: &SbmSpec) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.nodes;
    let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % spec.classes)).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if u % spec.classes == v % spec.classes {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let block = (spec.feature_dim / spec.classes).max(1);
    let mut features = Matrix::zeros(n, spec.feature_dim);
    let all: Vec<usize> = (0..spec.feature_dim).collect();
    for i in 0..n {
        let class = i % spec.classes;
        let start = (class * block).min(spec.feature_dim - 1);
        let end = (start + block).min(spec.feature_dim);
        for _ in 0..spec.words_per_node {
            let w = if rng.random::<f64>() < spec.topic_fraction {
                rng.random_range(start..end)
            } else {
                *all.choose(&mut rng).expect("feature_dim > 0")
            };
            features.set(i, w, 1.0);
        }
    }
    Graph::new(
        features,
        &edges,
        labels,
        spec.classes,
        [vec![false; n], vec![false; n], vec![false; n]],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labeled() {
        let a = sbm(&SbmSpec::small(30, 4)).unwrap();
        let b = sbm(&SbmSpec::small(30, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_classes(), 3);
        assert!(a.labels().iter().all(|l| l.is_some()));
        assert!(a.num_edges() > 0);
    }
}
