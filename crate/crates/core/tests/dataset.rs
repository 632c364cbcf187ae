mod common;

use std::fs;

use common::random_graph;
use freekd_core::dataset::{load_dataset, save_edge_list, save_json, DatasetFormat};
use freekd_core::graph::{Graph, Split};
use freekd_core::CoreError;
use proptest::prelude::*;

fn assert_same(a: &Graph, b: &Graph) {
    assert_eq!(a.features(), b.features());
    assert_eq!(a.edges(), b.edges());
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a.num_classes(), b.num_classes());
    for s in [Split::Train, Split::Val, Split::Test] {
        assert_eq!(a.mask(s), b.mask(s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bundles_round_trip(seed in 0u64..10_000, n in 1usize..15, p in 0.0f64..1.0) {
        let graph = random_graph(n, 3, 4, p, seed);
        let dir = tempfile::tempdir().unwrap();
        let edge_dir = dir.path().join("bundle");
        save_edge_list(&graph, &edge_dir).unwrap();
        prop_assert_eq!(DatasetFormat::detect(&edge_dir), DatasetFormat::EdgeList);
        assert_same(&graph, &load_dataset(&edge_dir, DatasetFormat::EdgeList).unwrap());
        let json = dir.path().join("graph.json");
        save_json(&graph, &json).unwrap();
        prop_assert_eq!(DatasetFormat::detect(&json), DatasetFormat::Json);
        assert_same(&graph, &load_dataset(&json, DatasetFormat::Json).unwrap());
    }

    #[test]
    fn normalized_adjacency_is_symmetric(seed in 0u64..10_000, n in 1usize..12) {
        let graph = random_graph(n, 2, 2, 0.4, seed);
        let a = graph.normalized_adjacency();
        let deg: Vec<f64> = (0..n).map(|i| 1.0 + graph.neighbor_index().degree(i) as f64).collect();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
                let linked = i == j || graph.neighbor_index().neighbors(i).contains(&j);
                let want = if linked { 1.0 / (deg[i] * deg[j]).sqrt() } else { 0.0 };
                prop_assert!((a.get(i, j) - want).abs() < 1e-12);
            }
        }
    }
}

fn write_bundle(dir: &std::path::Path, features: &str, edges: &str, labels: &str) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("features.csv"), features).unwrap();
    fs::write(dir.join("edges.txt"), edges).unwrap();
    fs::write(dir.join("labels.txt"), labels).unwrap();
}

#[test]
fn edge_list_canonicalizes_and_reports_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g");
    write_bundle(&path, "1,0\n0,1\n1,1\n", "0 1\n1 0\n1 2\n2 2\n", "0\n1\n?\n");
    let g = load_dataset(&path, DatasetFormat::EdgeList).unwrap();
    assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    assert_eq!(g.source_edge_lines(), 4);
    assert_eq!(g.labels(), &[Some(0), Some(1), None]);
    assert!(!g.has_splits());

    write_bundle(&path, "1,0\n0,1\n1,1\n", "0 1\n1 x\n", "0\n1\n0\n");
    match load_dataset(&path, DatasetFormat::EdgeList) {
        Err(CoreError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    write_bundle(&path, "1,0\n0,1\n1,1\n", "0 3\n", "0\n1\n0\n");
    assert!(matches!(load_dataset(&path, DatasetFormat::EdgeList), Err(CoreError::Validation(_))));
    write_bundle(&path, "1,0\n0,1,5\n", "", "0\n1\n");
    assert!(matches!(load_dataset(&path, DatasetFormat::EdgeList), Err(CoreError::Parse { line: 2, .. })));
}

#[test]
fn linqs_bundle_skips_unknown_citations() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("toy.content"),
        "31336 0 1 0 Neural_Networks\n1061127 1 0 0 Rule_Learning\n1106406 0 0 1 Neural_Networks\n",
    )
    .unwrap();
    fs::write(dir.path().join("toy.cites"), "31336 1061127\n1061127 31336\n1106406 999\n1106406 31336\n").unwrap();
    assert_eq!(DatasetFormat::detect(dir.path()), DatasetFormat::Linqs);
    let g = load_dataset(dir.path(), DatasetFormat::Linqs).unwrap();
    assert_eq!(g.num_nodes(), 3);
    assert_eq!(g.feature_dim(), 3);
    assert_eq!(g.num_classes(), 2);
    assert_eq!(g.labels(), &[Some(0), Some(1), Some(0)]);
    assert_eq!(g.edges(), &[(0, 1), (0, 2)]);
}

#[test]
fn fixed_split_sizes_on_loaded_graph() {
    let g = random_graph(40, 2, 3, 0.1, 1).split_fixed(10, 15, 4).unwrap();
    assert_eq!(g.nodes_in(Split::Val).len(), 10);
    assert_eq!(g.nodes_in(Split::Test).len(), 15);
    assert_eq!(g.nodes_in(Split::Train).len(), 15);
    let again = random_graph(40, 2, 3, 0.1, 1).split_fixed(10, 15, 4).unwrap();
    assert_eq!(g.mask(Split::Train), again.mask(Split::Train));
}
