mod common;

use common::random_graph;
use freekd_core::gnn::{Architecture, Checkpoint, GnnConfig, GnnModel, GraphView};
use freekd_core::graph::Graph;
use freekd_tensor::{Matrix, Tape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ARCHS: [Architecture; 3] = [Architecture::Gcn, Architecture::Sage, Architecture::Gat];

#[test]
fn attention_is_normalized_per_destination() {
    let graph = random_graph(8, 5, 3, 0.4, 11);
    let view = GraphView::new(&graph);
    let mut model = GnnModel::new(GnnConfig::new(Architecture::Gat, 3), 5, 3).unwrap();
    let mut dst: Vec<usize> = (0..8).collect();
    for &(u, v) in graph.edges() {
        dst.push(v);
        dst.push(u);
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &view, None, false, false).unwrap();
    assert_eq!(out.attention.len(), 2);
    assert_eq!(out.attention[0].len(), 8);
    for layer in &out.attention {
        for &head in layer {
            let alpha = tape.value(head);
            assert_eq!(alpha.len(), dst.len());
            let mut sums = [0.0; 8];
            for (e, &d) in dst.iter().enumerate() {
                assert!(alpha.data()[e] >= 0.0);
                sums[d] += alpha.data()[e];
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-12, "attention sums to {s}");
            }
        }
    }
}

fn permuted(graph: &Graph, perm: &[usize]) -> Graph {
    let n = graph.num_nodes();
    let mut features = Matrix::zeros(n, graph.feature_dim());
    let mut labels = vec![None; n];
    for i in 0..n {
        features.row_mut(perm[i]).copy_from_slice(graph.features().row(i));
        labels[perm[i]] = graph.label(i);
    }
    let edges: Vec<(usize, usize)> = graph.edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
    Graph::new(features, &edges, labels, graph.num_classes(), [vec![false; n], vec![false; n], vec![false; n]]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relabeling_nodes_permutes_outputs(seed in 0u64..10_000, arch in 0usize..3) {
        let graph = random_graph(6, 4, 3, 0.5, seed);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let other = permuted(&graph, &perm);
        let mut model = GnnModel::new(GnnConfig::new(ARCHS[arch], seed), 4, 3).unwrap();
        let (p, h) = model.predict(&GraphView::new(&graph), None).unwrap();
        let (q, g) = model.predict(&GraphView::new(&other), None).unwrap();
        for i in 0..6 {
            for c in 0..3 {
                prop_assert!((p.get(i, c) - q.get(perm[i], c)).abs() < 1e-10);
            }
            for k in 0..h.cols() {
                prop_assert!((h.get(i, k) - g.get(perm[i], k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn probabilities_are_distributions(seed in 0u64..10_000, arch in 0usize..3) {
        let graph = random_graph(7, 4, 3, 0.3, seed);
        let mut model = GnnModel::new(GnnConfig::new(ARCHS[arch], seed), 4, 3).unwrap();
        let (p, _) = model.predict(&GraphView::new(&graph), None).unwrap();
        for i in 0..7 {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let graph = random_graph(8, 5, 3, 0.4, 2);
    let view = GraphView::new(&graph);
    let dir = tempfile::tempdir().unwrap();
    for arch in ARCHS {
        let mut model = GnnModel::new(GnnConfig::new(arch, 5), 5, 3).unwrap();
        let path = dir.path().join(format!("{arch}.json"));
        model.to_checkpoint().save(&path).unwrap();
        let mut restored = GnnModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(restored.values(), model.values());
        assert_eq!(restored.config(), model.config());
        assert_eq!(restored.predict(&view, None).unwrap(), model.predict(&view, None).unwrap());
    }
}

#[test]
fn seeds_fix_initialization() {
    for arch in ARCHS {
        let a = GnnModel::new(GnnConfig::new(arch, 9), 5, 3).unwrap();
        let b = GnnModel::new(GnnConfig::new(arch, 9), 5, 3).unwrap();
        let c = GnnModel::new(GnnConfig::new(arch, 10), 5, 3).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }
}
