#![allow(dead_code)]

use freekd_core::graph::Graph;
use freekd_tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random labeled graph with `n` nodes, edge probability `p` and a random
/// train/val/test assignment (train never empty).
pub fn random_graph(n: usize, dim: usize, classes: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let labels = (0..n).map(|_| Some(rng.random_range(0..classes))).collect();
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for i in 0..n {
        match rng.random_range(0..4) {
            0 | 1 => train[i] = true,
            2 => val[i] = true,
            _ => test[i] = true,
        }
    }
    train[0] = true;
    val[0] = false;
    test[0] = false;
    Graph::new(features, &edges, labels, classes, [train, val, test]).unwrap()
}

/// Random non-empty subset of `0..n` in random order.
pub fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let size = rng.random_range(1..=n);
    ids.truncate(size);
    ids
}

pub fn adjacency(graph: &Graph) -> Vec<Vec<bool>> {
    let n = graph.num_nodes();
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in graph.edges() {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    adj
}
