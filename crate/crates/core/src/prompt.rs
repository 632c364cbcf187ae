//! Learnable prompt graphs that augment the input graph.
//!
//! Each prompt graph is a set of `P` token feature vectors. Before every use
//! its tokens are wired to each other and to the original nodes by ranking
//! cosine similarities and keeping a fixed percentage of the candidate pairs.
//! Tokens are trained to preserve the information of the original graph
//! (a bilinear discriminator between node embeddings and graph summaries)
//! and to keep the augmented views different from each other.

use std::cmp::Ordering;
use std::rc::Rc;

use freekd_tensor::{cosine, CsrMatrix, Matrix, Optimizer, Parameter, SparseOperator, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gnn::{GnnModel, GraphView};
use crate::graph::{permutation, Graph, NeighborIndex};

/// Standard deviation of the Gaussian token initialization.
pub const TOKEN_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Number of prompt graphs (augmented views besides the original graph).
    pub views: usize,
    /// Tokens per prompt graph.
    pub tokens: usize,
    /// Percentage of token pairs joined inside a prompt graph.
    pub token_percent: f64,
    /// Percentage of token-node pairs joined across graphs.
    pub cross_percent: f64,
    /// Weight of the diversity loss.
    pub beta: f64,
    pub lr: f64,
    /// Use the diversity loss with a leading minus sign, which rewards similar views.
    pub literal_diversity_sign: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            views: 5,
            tokens: 100,
            token_percent: 5.0,
            cross_percent: 0.5,
            beta: 0.5,
            lr: 0.01,
            literal_diversity_sign: false,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(CoreError::Contract("a prompt graph needs at least one token".into()));
        }
        for t in [self.token_percent, self.cross_percent] {
            if !(t > 0.0 && t <= 100.0) {
                return Err(CoreError::Contract(format!("edge percentage {t} outside (0, 100]")));
            }
        }
        if self.beta < 0.0 || self.lr < 0.0 {
            return Err(CoreError::Contract("beta and lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// `max(1, floor(percent / 100 * candidates))`, or 0 without candidates.
pub fn edge_count(candidates: usize, percent: f64) -> usize {
    if candidates == 0 {
        return 0;
    }
    // the epsilon keeps exact products such as 0.5% of 270800 from rounding down
    let k = (percent / 100.0 * candidates as f64 + 1e-9).floor() as usize;
    k.clamp(1, candidates)
}

/// Keeps the `k` highest scores, ties broken by the lower first id and then
/// the lower second id. Output is in rank order.
pub fn top_k(mut scored: Vec<(f64, usize, usize)>, k: usize) -> Vec<(usize, usize)> {
    let order = |x: &(f64, usize, usize), y: &(f64, usize, usize)| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(Ordering::Equal)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    };
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored.into_iter().map(|(_, a, b)| (a, b)).collect()
}

/// Token pairs `(i, j)`, `i < j`, joined inside one prompt graph.
pub fn token_edges(tokens: &Matrix, percent: f64) -> Vec<(usize, usize)> {
    let p = tokens.rows();
    let mut scored = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            scored.push((cosine(tokens.row(i), tokens.row(j)), i, j));
        }
    }
    let k = edge_count(scored.len(), percent);
    top_k(scored, k)
}

/// Token-to-target pairs `(token, target row)` between `tokens` and the rows of `targets`.
pub fn form_edges(tokens: &Matrix, targets: &Matrix, percent: f64) -> Vec<(usize, usize)> {
    let mut scored = Vec::with_capacity(tokens.rows() * targets.rows());
    for t in 0..tokens.rows() {
        for v in 0..targets.rows() {
            scored.push((cosine(tokens.row(t), targets.row(v)), t, v));
        }
    }
    let k = edge_count(scored.len(), percent);
    top_k(scored, k)
}

/// Sparse node features with cached row norms, for ranking token-node pairs.
#[derive(Clone, Debug)]
pub struct FeatureIndex {
    features: Rc<SparseOperator>,
    norms: Vec<f64>,
}

impl FeatureIndex {
    pub fn new(features: Rc<SparseOperator>) -> Self {
        let m = features.matrix();
        let norms = (0..m.rows())
            .map(|r| m.row_entries(r).map(|(_, v)| v * v).sum::<f64>().sqrt())
            .collect();
        FeatureIndex { features, norms }
    }

    pub fn operator(&self) -> &Rc<SparseOperator> {
        &self.features
    }

    /// Same result as [`form_edges`] against the indexed features.
    pub fn cross_edges(&self, tokens: &Matrix, percent: f64) -> Result<Vec<(usize, usize)>> {
        let dots = self.features.matrix().mul_dense(&tokens.transpose())?;
        let n = self.norms.len();
        let mut scored = Vec::with_capacity(tokens.rows() * n);
        for t in 0..tokens.rows() {
            let tn = tokens.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            for v in 0..n {
                let c = if tn == 0.0 || self.norms[v] == 0.0 {
                    0.0
                } else {
                    (dots.get(v, t) / (tn * self.norms[v])).clamp(-1.0, 1.0)
                };
                scored.push((c, t, v));
            }
        }
        let k = edge_count(scored.len(), percent);
        Ok(top_k(scored, k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptGraph {
    pub tokens: Parameter,
}

impl PromptGraph {
    pub fn random<R: Rng + ?Sized>(num_tokens: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, TOKEN_INIT_STD).expect("positive std");
        let data = (0..num_tokens * dim).map(|_| normal.sample(rng)).collect();
        PromptGraph {
            tokens: Parameter::new(Matrix::from_vec(num_tokens, dim, data).expect("sized")),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.value.rows()
    }
}

/// The original graph joined with one prompt graph. Prompt nodes take ids
/// `n..n + p` and carry no label.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedGraph {
    pub num_original: usize,
    pub num_tokens: usize,
    /// Token pairs in local token ids.
    pub token_edges: Vec<(usize, usize)>,
    /// `(token, original node)` pairs.
    pub cross_edges: Vec<(usize, usize)>,
    /// All edges in augmented ids, original edges first.
    pub edges: Vec<(usize, usize)>,
}

impl AugmentedGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_original + self.num_tokens
    }

    pub fn view(&self, features: Rc<SparseOperator>) -> GraphView {
        GraphView::with_feature_operator(features, self.num_nodes(), &self.edges)
    }

    pub fn neighbor_index(&self) -> NeighborIndex {
        NeighborIndex::new(self.num_nodes(), &self.edges)
    }

    /// Materializes the augmented graph with the given token features.
    pub fn to_graph(&self, base: &Graph, tokens: &Matrix) -> Result<Graph> {
        let n = self.num_original;
        let total = self.num_nodes();
        let mut features = Matrix::zeros(total, base.feature_dim());
        for r in 0..n {
            features.row_mut(r).copy_from_slice(base.features().row(r));
        }
        for t in 0..self.num_tokens {
            features.row_mut(n + t).copy_from_slice(tokens.row(t));
        }
        let mut labels = base.labels().to_vec();
        labels.resize(total, None);
        let extend = |m: &[bool]| {
            let mut m = m.to_vec();
            m.resize(total, false);
            m
        };
        Graph::new(
            features,
            &self.edges,
            labels,
            base.num_classes(),
            [
                extend(base.mask(crate::graph::Split::Train)),
                extend(base.mask(crate::graph::Split::Val)),
                extend(base.mask(crate::graph::Split::Test)),
            ],
        )
    }
}

/// Joins `graph` with `prompt`, recomputing both edge sets from the current tokens.
pub fn compose(graph: &Graph, index: &FeatureIndex, prompt: &PromptGraph, config: &PromptConfig) -> Result<AugmentedGraph> {
    let tokens = &prompt.tokens.value;
    if tokens.cols() != graph.feature_dim() {
        return Err(CoreError::Contract(format!(
            "tokens have {} features, graph has {}",
            tokens.cols(),
            graph.feature_dim()
        )));
    }
    let n = graph.num_nodes();
    let token_edges = token_edges(tokens, config.token_percent);
    let cross_edges = index.cross_edges(tokens, config.cross_percent)?;
    let mut edges = graph.edges().to_vec();
    edges.extend(token_edges.iter().map(|&(i, j)| (n + i, n + j)));
    edges.extend(cross_edges.iter().map(|&(t, v)| (v, n + t)));
    Ok(AugmentedGraph {
        num_original: n,
        num_tokens: tokens.rows(),
        token_edges,
        cross_edges,
        edges,
    })
}

/// Global summary (mean of all rows) and local summaries (mean over each
/// node's neighborhood including itself).
pub fn summaries(embeddings: &Matrix, neighbors: &NeighborIndex) -> (Vec<f64>, Matrix) {
    let (n, h) = embeddings.shape();
    let mut global = vec![0.0; h];
    for r in 0..n {
        for (g, x) in global.iter_mut().zip(embeddings.row(r)) {
            *g += x;
        }
    }
    global.iter_mut().for_each(|g| *g /= n.max(1) as f64);
    let mut local = Matrix::zeros(n, h);
    for k in 0..n {
        let members = neighbors.neighbors(k).iter().copied().filter(|&v| v < n);
        let mut count = 1.0;
        let mut acc = embeddings.row(k).to_vec();
        for v in members {
            for (a, x) in acc.iter_mut().zip(embeddings.row(v)) {
                *a += x;
            }
            count += 1.0;
        }
        for (o, a) in local.row_mut(k).iter_mut().zip(acc) {
            *o = a / count;
        }
    }
    (global, local)
}

/// Bilinear scorer `D(h, g) = sigmoid(h^T W g)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub weight: Parameter,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let limit = (3.0 / dim as f64).sqrt();
        let data = (0..dim * dim).map(|_| rng.random_range(-limit..limit)).collect();
        Discriminator {
            weight: Parameter::new(Matrix::from_vec(dim, dim, data).expect("sized")),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Discriminator {
            weight: Parameter::new(Matrix::identity(dim)),
        }
    }

    pub fn score(&self, h: &[f64], g: &[f64]) -> f64 {
        let w = &self.weight.value;
        let mut s = 0.0;
        for (i, hi) in h.iter().enumerate() {
            for (j, gj) in g.iter().enumerate() {
                s += hi * w.get(i, j) * gj;
            }
        }
        freekd_tensor::sigmoid(s)
    }
}

/// Information-preservation loss on the tape.
///
/// `positive` and `corrupted` hold embeddings of the original nodes in the
/// augmented and corrupted views. Positive pairs with the global and local
/// summaries are scored toward 1, corrupted ones toward 0.
pub fn info_loss(tape: &mut Tape, positive: Var, corrupted: Var, global: &[f64], local: &Matrix, weight: Var) -> Result<Var> {
    let n = tape.value(positive).rows();
    let g = tape.constant(Matrix::from_vec(1, global.len(), global.to_vec())?)?;
    let g = tape.broadcast_rows(g, n)?;
    let l = tape.constant(local.clone())?;
    let mut total = None;
    for (h, sign) in [(positive, -1.0), (corrupted, 1.0)] {
        let hw = tape.matmul(h, weight)?;
        for summary in [g, l] {
            let s = tape.row_dot(hw, summary)?;
            // -ln sigmoid(s) = softplus(-s); -ln(1 - sigmoid(s)) = softplus(s)
            let s = tape.scale(s, sign)?;
            let term = tape.softplus(s)?;
            let term = tape.sum(term)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
    }
    Ok(total.expect("four terms"))
}

/// Value of [`info_loss`] computed node by node.
pub fn info_loss_value(positive: &Matrix, corrupted: &Matrix, global: &[f64], local: &Matrix, d: &Discriminator) -> f64 {
    let mut loss = 0.0;
    for k in 0..positive.rows() {
        loss -= d.score(positive.row(k), global).ln();
        loss -= d.score(positive.row(k), local.row(k)).ln();
        loss -= (1.0 - d.score(corrupted.row(k), global)).ln();
        loss -= (1.0 - d.score(corrupted.row(k), local.row(k))).ln();
    }
    loss
}

/// Diversity loss: cosine similarity of same-index tokens and of same-node
/// embeddings, summed over ordered pairs of distinct views. `None` with
/// fewer than two views.
pub fn diversity_loss(tape: &mut Tape, tokens: &[Var], embeddings: &[Var], literal_sign: bool) -> Result<Option<Var>> {
    if tokens.len() < 2 {
        return Ok(None);
    }
    let mut total = None;
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            for (a, b) in [(tokens[i], tokens[j]), (embeddings[i], embeddings[j])] {
                let c = tape.cosine_rows(a, b)?;
                let c = tape.sum(c)?;
                total = Some(match total {
                    None => c,
                    Some(t) => tape.add(t, c)?,
                });
            }
        }
    }
    let sign = if literal_sign { -2.0 } else { 2.0 };
    Ok(Some(tape.scale(total.expect("two views"), sign)?))
}

/// Value of [`diversity_loss`] computed with nested loops.
pub fn diversity_loss_value(tokens: &[Matrix], embeddings: &[Matrix], literal_sign: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        for j in 0..tokens.len() {
            if i == j {
                continue;
            }
            for k in 0..tokens[i].rows() {
                total += cosine(tokens[i].row(k), tokens[j].row(k));
            }
            for k in 0..embeddings[i].rows() {
                total += cosine(embeddings[i].row(k), embeddings[j].row(k));
            }
        }
    }
    if literal_sign {
        -total
    } else {
        total
    }
}

/// Mean cosine between same-index tokens of distinct prompt graphs.
pub fn mean_token_cosine(prompts: &[PromptGraph]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..prompts.len() {
        for j in i + 1..prompts.len() {
            let (a, b) = (&prompts[i].tokens.value, &prompts[j].tokens.value);
            for k in 0..a.rows() {
                sum += cosine(a.row(k), b.row(k));
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptStepReport {
    pub info: f64,
    pub diversity: f64,
    pub total: f64,
}

/// All prompt graphs of an experiment with their discriminator and optimizer.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub config: PromptConfig,
    pub prompts: Vec<PromptGraph>,
    pub discriminator: Discriminator,
    optimizer: Optimizer,
    index: FeatureIndex,
    original: NeighborIndex,
    rng: ChaCha8Rng,
}

impl PromptSet {
    /// `embedding_dim` is the width of the encoder's last hidden layer.
    pub fn new(config: PromptConfig, graph: &Graph, embedding_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..config.views)
            .map(|_| PromptGraph::random(config.tokens, graph.feature_dim(), &mut rng))
            .collect();
        let discriminator = Discriminator::new(embedding_dim, &mut rng);
        let features = Rc::new(SparseOperator::new(CsrMatrix::from_dense(graph.features())));
        Ok(PromptSet {
            optimizer: Optimizer::adam(config.lr, 0.0),
            config,
            prompts,
            discriminator,
            index: FeatureIndex::new(features),
            original: graph.neighbor_index(),
            rng,
        })
    }

    pub fn feature_index(&self) -> &FeatureIndex {
        &self.index
    }

    /// Augmented graphs for the current token values, one per prompt graph.
    pub fn compose_all(&self, graph: &Graph) -> Result<Vec<AugmentedGraph>> {
        self.prompts
            .iter()
            .map(|p| compose(graph, &self.index, p, &self.config))
            .collect()
    }

    pub fn mean_token_cosine(&self) -> f64 {
        mean_token_cosine(&self.prompts)
    }

    /// One optimizer step on `sum info + beta * diversity` with the encoder
    /// frozen. Edges are formed from the tokens at the start of the step.
    pub fn step(&mut self, encoder: &mut GnnModel, graph: &Graph) -> Result<PromptStepReport> {
        let n = graph.num_nodes();
        let base = GraphView::with_feature_operator(self.index.operator().clone(), n, graph.edges());
        let (_, base_emb) = encoder.predict(&base, None)?;
        let (global, local) = summaries(&base_emb, &self.original);
        let augmented = self.compose_all(graph)?;
        let perm = permutation(n, self.rng.random());
        let shuffled = Rc::new(SparseOperator::new(self.index.operator().matrix().select_rows(&perm)));
        let originals = Rc::new((0..n).collect::<Vec<usize>>());

        let mut tape = Tape::new();
        let weight = self.discriminator.weight.bind(&mut tape, true)?;
        let mut token_vars = Vec::with_capacity(self.prompts.len());
        let mut emb_vars = Vec::with_capacity(self.prompts.len());
        let mut info_total = None;
        for (prompt, aug) in self.prompts.iter().zip(&augmented) {
            let tokens = prompt.tokens.bind(&mut tape, true)?;
            let view = aug.view(self.index.operator().clone());
            let corrupted_view = aug.view(shuffled.clone());
            let pos = encoder.forward(&mut tape, &view, Some(tokens), false, false)?;
            let neg = encoder.forward(&mut tape, &corrupted_view, Some(tokens), false, false)?;
            let pos = tape.gather_rows(pos.embeddings, originals.clone())?;
            let neg = tape.gather_rows(neg.embeddings, originals.clone())?;
            let info = info_loss(&mut tape, pos, neg, &global, &local, weight)?;
            info_total = Some(match info_total {
                None => info,
                Some(t) => tape.add(t, info)?,
            });
            token_vars.push(tokens);
            emb_vars.push(pos);
        }
        let mut total = match info_total {
            Some(t) => t,
            None => return Ok(PromptStepReport::default()),
        };
        let info_value = tape.value(total).item();
        let mut div_value = 0.0;
        if self.config.beta > 0.0 {
            if let Some(div) = diversity_loss(&mut tape, &token_vars, &emb_vars, self.config.literal_diversity_sign)? {
                div_value = tape.value(div).item();
                let weighted = tape.scale(div, self.config.beta)?;
                total = tape.add(total, weighted)?;
            }
        }
        let total_value = tape.value(total).item();
        let grads = tape.backward(total)?;
        let mut params: Vec<&mut Parameter> = Vec::with_capacity(self.prompts.len() + 1);
        self.discriminator.weight.zero_grad();
        self.discriminator.weight.accumulate(&grads, weight);
        for (prompt, var) in self.prompts.iter_mut().zip(&token_vars) {
            prompt.tokens.zero_grad();
            prompt.tokens.accumulate(&grads, *var);
        }
        params.push(&mut self.discriminator.weight);
        params.extend(self.prompts.iter_mut().map(|p| &mut p.tokens));
        self.optimizer.step(&mut params)?;
        Ok(PromptStepReport {
            info: info_value,
            diversity: div_value,
            total: total_value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn edge_counts_follow_formula() {
        assert_eq!(edge_count(100 * 2708, 0.5), 1354);
        assert_eq!(edge_count(100 * 3327, 0.5), 1663);
        assert_eq!(edge_count(40, 20.0), 8);
        assert_eq!(edge_count(5, 1.0), 1);
        assert_eq!(edge_count(7, 100.0), 7);
    }

    #[test]
    fn top_k_ties_prefer_low_ids() {
        let scored = vec![(1.0, 2, 0), (1.0, 0, 3), (1.0, 0, 1), (0.5, 0, 0)];
        assert_eq!(top_k(scored, 2), vec![(0, 1), (0, 3)]);
    }

    #[test]
    fn equal_tokens_pick_smallest_pairs() {
        let tokens = Matrix::filled(4, 3, 1.0);
        // 6 pairs, 50% -> 3 edges
        assert_eq!(token_edges(&tokens, 50.0), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn summaries_on_path() {
        let emb = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [4.0, 4.0]]).unwrap();
        let idx = NeighborIndex::new(3, &[(0, 1), (1, 2)]);
        let (g, l) = summaries(&emb, &idx);
        assert_abs_diff_eq!(g[0], 5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l.get(1, 1), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.get(2, 0), 2.0, epsilon = 1e-12);
        let isolated = NeighborIndex::new(3, &[]);
        let (_, l) = summaries(&emb, &isolated);
        assert_eq!(l, emb);
    }

    #[test]
    fn discriminator_identity_example() {
        let d = Discriminator::identity(2);
        assert_abs_diff_eq!(d.score(&[1.0, 0.0], &[1.0, 0.0]), 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn half_scores_give_four_n_ln2() {
        let n = 5;
        let h = Matrix::zeros(n, 3);
        let d = Discriminator::identity(3);
        let local = Matrix::zeros(n, 3);
        let v = info_loss_value(&h, &h, &[0.0; 3], &local, &d);
        assert_abs_diff_eq!(v, 4.0 * n as f64 * std::f64::consts::LN_2, epsilon = 1e-12);
        let mut tape = Tape::new();
        let p = tape.constant(h.clone()).unwrap();
        let w = tape.constant(Matrix::identity(3)).unwrap();
        let l = info_loss(&mut tape, p, p, &[0.0; 3], &local, w).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), v, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_views_have_zero_diversity() {
        let t1 = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let t2 = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(diversity_loss_value(&[t1.clone(), t2.clone()], &[t1, t2], false), 0.0);
    }
}
