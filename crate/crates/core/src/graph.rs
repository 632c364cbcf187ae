//! Graph data model, neighborhoods, normalization, splits and augmenters.

use std::collections::BTreeSet;

use freekd_tensor::{CsrMatrix, Matrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// An undirected, unweighted, attributed graph with node labels and
/// disjoint train/validation/test masks.
#[derive(Clone, Debug)]
pub struct Graph {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    train: Vec<bool>,
    val: Vec<bool>,
    test: Vec<bool>,
    source_edge_lines: usize,
}

impl PartialEq for Graph {
    /// Compares content; the pre-deduplication edge record count is provenance only.
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features
            && self.edges == other.edges
            && self.labels == other.labels
            && self.num_classes == other.num_classes
            && self.train == other.train
            && self.val == other.val
            && self.test == other.test
    }
}

/// Which evaluation split a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn canonical_edges(n: usize, raw: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut set = BTreeSet::new();
    for &(u, v) in raw {
        if u >= n || v >= n {
            return Err(CoreError::Validation(format!(
                "edge ({u}, {v}) references a node outside 0..{n}"
            )));
        }
        if u != v {
            set.insert((u.min(v), u.max(v)));
        }
    }
    Ok(set.into_iter().collect())
}

impl Graph {
    /// Validates and canonicalizes the inputs. Reversed and duplicate edges
    /// collapse to one undirected edge and self-loops are dropped.
    pub fn new(
        features: Matrix,
        edges: &[(usize, usize)],
        labels: Vec<Option<usize>>,
        num_classes: usize,
        masks: [Vec<bool>; 3],
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(CoreError::Validation(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some((i, c)) = labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&c| c >= num_classes).map(|c| (i, c)))
        {
            return Err(CoreError::Validation(format!(
                "node {i} has label {c} but there are {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(CoreError::Validation("non-finite feature value".into()));
        }
        let [train, val, test] = masks;
        for (name, m) in [("train", &train), ("val", &val), ("test", &test)] {
            if m.len() != n {
                return Err(CoreError::Validation(format!("{name} mask has {} entries for {n} nodes", m.len())));
            }
        }
        for i in 0..n {
            let count = train[i] as u8 + val[i] as u8 + test[i] as u8;
            if count > 1 {
                return Err(CoreError::Validation(format!("node {i} is in more than one split")));
            }
            if count == 1 && labels[i].is_none() {
                return Err(CoreError::Validation(format!("node {i} is in a split but has no label")));
            }
        }
        Ok(Graph {
            features,
            edges: canonical_edges(n, edges)?,
            labels,
            num_classes,
            train,
            val,
            test,
            source_edge_lines: edges.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Undirected edges as `(low, high)` pairs in ascending order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of edge records the graph was built from, before deduplication.
    pub fn source_edge_lines(&self) -> usize {
        self.source_edge_lines
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        self.mask(split)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn has_splits(&self) -> bool {
        self.train.iter().chain(&self.val).chain(&self.test).any(|&m| m)
    }

    pub fn neighbor_index(&self) -> NeighborIndex {
        NeighborIndex::new(self.num_nodes(), &self.edges)
    }

    /// Same graph with different masks.
    pub fn with_masks(&self, masks: [Vec<bool>; 3]) -> Result<Graph> {
        let mut g = Graph::new(
            self.features.clone(),
            &self.edges,
            self.labels.clone(),
            self.num_classes,
            masks,
        )?;
        g.source_edge_lines = self.source_edge_lines;
        Ok(g)
    }

    fn rebuild(&self, features: Matrix, edges: Vec<(usize, usize)>) -> Graph {
        Graph {
            features,
            edges,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            source_edge_lines: self.source_edge_lines,
        }
    }

    /// Divides every feature row by its sum; all-zero rows stay zero.
    pub fn row_normalized(&self) -> Graph {
        let mut f = self.features.clone();
        for r in 0..f.rows() {
            let s: f64 = f.row(r).iter().sum();
            if s != 0.0 {
                f.row_mut(r).iter_mut().for_each(|x| *x /= s);
            }
        }
        self.rebuild(f, self.edges.clone())
    }

    /// Per-class stratified split of the labeled nodes by `ratios`
    /// (train, val, test). Deterministic for a given seed.
    pub fn split_masks(&self, ratios: [f64; 3], seed: u64) -> Result<Graph> {
        let total: f64 = ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
            return Err(CoreError::Contract(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.num_nodes();
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..n).filter(|&i| self.labels[i] == Some(class)).collect();
            if members.is_empty() {
                continue;
            }
            let needed = ratios.iter().filter(|&&r| r > 0.0).count();
            if members.len() < needed {
                return Err(CoreError::Validation(format!(
                    "class {class} has {} nodes, fewer than the {needed} splits",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            let m = members.len() as f64;
            let n_train = (ratios[0] * m).round() as usize;
            let n_val = ((ratios[1] * m).round() as usize).min(members.len() - n_train);
            for (k, &node) in members.iter().enumerate() {
                let slot = if k < n_train {
                    0
                } else if k < n_train + n_val {
                    1
                } else {
                    2
                };
                masks[slot][node] = true;
            }
        }
        self.with_masks(masks)
    }

    /// Random split with fixed validation and test sizes; the remaining
    /// labeled nodes train.
    pub fn split_fixed(&self, val: usize, test: usize, seed: u64) -> Result<Graph> {
        let mut labeled: Vec<usize> = (0..self.num_nodes()).filter(|&i| self.labels[i].is_some()).collect();
        if labeled.len() <= val + test {
            return Err(CoreError::Validation(format!(
                "{} labeled nodes cannot hold {val} validation and {test} test nodes",
                labeled.len()
            )));
        }
        labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = self.num_nodes();
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        for (k, &node) in labeled.iter().enumerate() {
            let slot = if k < test {
                2
            } else if k < test + val {
                1
            } else {
                0
            };
            masks[slot][node] = true;
        }
        self.with_masks(masks)
    }

    /// Shuffles feature rows with a seeded permutation; structure and labels
    /// stay put.
    pub fn corrupt_features(&self, seed: u64) -> Graph {
        let perm = permutation(self.num_nodes(), seed);
        self.rebuild(self.features.select_rows(&perm), self.edges.clone())
    }

    /// Removes `floor(rate * |E|)` uniformly chosen edges.
    pub fn drop_edge(&self, rate: f64, seed: u64) -> Result<Graph> {
        check_rate(rate)?;
        let drop = (rate * self.edges.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..self.edges.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut keep = vec![true; self.edges.len()];
        for &e in &order[..drop] {
            keep[e] = false;
        }
        let edges = self
            .edges
            .iter()
            .zip(&keep)
            .filter_map(|(e, &k)| k.then_some(*e))
            .collect();
        Ok(self.rebuild(self.features.clone(), edges))
    }

    /// Zeroes the features of `floor(rate * N)` uniformly chosen nodes and
    /// removes their edges. Node ids are unchanged.
    pub fn drop_node(&self, rate: f64, seed: u64) -> Result<Graph> {
        check_rate(rate)?;
        let n = self.num_nodes();
        let drop = (rate * n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut dropped = vec![false; n];
        for &i in &order[..drop] {
            dropped[i] = true;
        }
        let mut features = self.features.clone();
        for (i, &d) in dropped.iter().enumerate() {
            if d {
                features.row_mut(i).fill(0.0);
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|(u, v)| !dropped[*u] && !dropped[*v])
            .copied()
            .collect();
        Ok(self.rebuild(features, edges))
    }

    /// Dense `D^-1/2 (A + I) D^-1/2`.
    pub fn normalized_adjacency(&self) -> Matrix {
        gcn_normalized(self.num_nodes(), &self.edges).to_dense()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(CoreError::Contract(format!("drop rate {rate} outside [0, 1)")))
    }
}

/// Seeded uniformly random permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Sparse `D^-1/2 (A + I) D^-1/2` for `n` nodes and undirected `edges`.
pub fn gcn_normalized(n: usize, edges: &[(usize, usize)]) -> CsrMatrix {
    let mut degree = vec![1.0f64; n];
    for &(u, v) in edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for i in 0..n {
        triplets.push((i, i, inv[i] * inv[i]));
    }
    for &(u, v) in edges {
        let w = inv[u] * inv[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    CsrMatrix::from_triplets(n, n, &triplets).expect("edge endpoints validated")
}

/// Row-normalized adjacency without self-loops (neighbor mean). Isolated
/// nodes get an all-zero row.
pub fn mean_aggregator(n: usize, edges: &[(usize, usize)]) -> CsrMatrix {
    let mut degree = vec![0usize; n];
    for &(u, v) in edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut triplets = Vec::with_capacity(2 * edges.len());
    for &(u, v) in edges {
        triplets.push((u, v, 1.0 / degree[u] as f64));
        triplets.push((v, u, 1.0 / degree[v] as f64));
    }
    CsrMatrix::from_triplets(n, n, &triplets).expect("edge endpoints validated")
}

/// Sorted neighbor lists; symmetric by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    neighbors: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u != v {
                neighbors[u].push(v);
                neighbors[v].push(u);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        NeighborIndex { neighbors }
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn path_graph(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::new(
            Matrix::zeros(n, 2),
            &edges,
            vec![Some(0); n],
            1,
            [vec![false; n], vec![false; n], vec![false; n]],
        )
        .unwrap()
    }

    #[test]
    fn reversed_edges_collapse() {
        let g = Graph::new(
            Matrix::zeros(3, 1),
            &[(0, 1), (1, 0)],
            vec![None; 3],
            1,
            [vec![false; 3], vec![false; 3], vec![false; 3]],
        )
        .unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.source_edge_lines(), 2);
    }

    #[test]
    fn dangling_edge_and_bad_label_rejected() {
        let masks = || [vec![false; 2], vec![false; 2], vec![false; 2]];
        assert!(Graph::new(Matrix::zeros(2, 1), &[(0, 2)], vec![None; 2], 1, masks()).is_err());
        let err = Graph::new(Matrix::zeros(2, 1), &[], vec![Some(2), None], 2, masks()).unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
    }

    #[test]
    fn overlapping_or_unlabeled_masks_rejected() {
        let r = Graph::new(
            Matrix::zeros(2, 1),
            &[],
            vec![Some(0), None],
            1,
            [vec![true, false], vec![true, false], vec![false; 2]],
        );
        assert!(r.is_err());
        let r = Graph::new(
            Matrix::zeros(2, 1),
            &[],
            vec![Some(0), None],
            1,
            [vec![false, true], vec![false; 2], vec![false; 2]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn isolated_node_adjacency_is_one() {
        let g = path_graph(1);
        assert_eq!(g.normalized_adjacency(), Matrix::scalar(1.0));
    }

    #[test]
    fn two_node_adjacency_is_half() {
        let g = path_graph(2);
        assert!(g.normalized_adjacency().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn path_neighborhood() {
        let idx = path_graph(3).neighbor_index();
        assert_eq!(idx.neighbors(1), &[0, 2]);
    }

    #[test]
    fn stratified_split_counts_and_determinism() {
        let n = 100;
        let g = Graph::new(
            Matrix::zeros(n, 1),
            &[],
            vec![Some(0); n],
            1,
            [vec![false; n], vec![false; n], vec![false; n]],
        )
        .unwrap();
        let s = g.split_masks([0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(s.nodes_in(Split::Train).len(), 60);
        assert_eq!(s.nodes_in(Split::Val).len(), 20);
        assert_eq!(s.nodes_in(Split::Test).len(), 20);
        assert_eq!(s, g.split_masks([0.6, 0.2, 0.2], 3).unwrap());
    }

    #[test]
    fn tiny_class_cannot_be_split() {
        let g = Graph::new(
            Matrix::zeros(3, 1),
            &[],
            vec![Some(0), Some(0), Some(1)],
            2,
            [vec![false; 3], vec![false; 3], vec![false; 3]],
        )
        .unwrap();
        assert!(matches!(g.split_masks([0.6, 0.2, 0.2], 0), Err(CoreError::Validation(_))));
    }

    #[test]
    fn fixed_split_sizes() {
        let n = 50;
        let g = Graph::new(
            Matrix::zeros(n, 1),
            &[],
            vec![Some(0); n],
            1,
            [vec![false; n], vec![false; n], vec![false; n]],
        )
        .unwrap();
        let s = g.split_fixed(5, 10, 1).unwrap();
        assert_eq!(s.nodes_in(Split::Train).len(), 35);
        assert_eq!(s.nodes_in(Split::Val).len(), 5);
        assert_eq!(s.nodes_in(Split::Test).len(), 10);
    }

    #[test]
    fn corruption_permutes_rows() {
        let f = Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let g = Graph::new(f, &[(0, 1)], vec![None; 4], 1, [vec![false; 4], vec![false; 4], vec![false; 4]]).unwrap();
        let c = g.corrupt_features(9);
        let mut rows: Vec<f64> = c.features().data().to_vec();
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.edges(), g.edges());
        assert_eq!(c, g.corrupt_features(9));
        let single = path_graph(1);
        assert_eq!(single.corrupt_features(5), single);
    }

    #[test]
    fn drop_edge_counts() {
        let edges: Vec<_> = (0..10).map(|i| (i, i + 1)).collect();
        let g = Graph::new(
            Matrix::zeros(11, 1),
            &edges,
            vec![None; 11],
            1,
            [vec![false; 11], vec![false; 11], vec![false; 11]],
        )
        .unwrap();
        assert_eq!(g.drop_edge(0.0, 1).unwrap(), g);
        assert_eq!(g.drop_edge(0.5, 1).unwrap().num_edges(), 5);
        assert!(g.drop_edge(1.0, 1).is_err());
    }

    #[test]
    fn dropped_node_is_isolated_and_blank() {
        let f = Matrix::filled(5, 2, 1.0);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];
        let g = Graph::new(f, &edges, vec![None; 5], 1, [vec![false; 5], vec![false; 5], vec![false; 5]]).unwrap();
        assert_eq!(g.drop_node(0.0, 2).unwrap(), g);
        let d = g.drop_node(0.4, 2).unwrap();
        let idx = d.neighbor_index();
        let blank: Vec<usize> = (0..5).filter(|&i| d.features().row(i).iter().all(|&x| x == 0.0)).collect();
        assert_eq!(blank.len(), 2);
        for i in blank {
            assert_eq!(idx.degree(i), 0);
        }
        assert_eq!(d.num_nodes(), 5);
    }
}
