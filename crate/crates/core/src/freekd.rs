//! Free-direction distillation between two networks: agent states,
//! agent-selected neighborhoods, node- and structure-level KD losses and
//! the per-batch exchange that trains a pair.

use std::rc::Rc;
use std::str::FromStr;

use freekd_tensor::{cosine, Matrix, Optimizer, Segments, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::agent::{compute_rewards, heuristic_direction, BaselineKey, HierarchicalAgent, Transition, CE_CLAMP};
use crate::error::{CoreError, Result};
use crate::gnn::{cross_entropy_loss, GnnModel, GnnOutput, GraphView, PROB_FLOOR};
use crate::graph::{Graph, NeighborIndex, Split};

/// Who decides the direction of node-level distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionMode {
    /// Sampled from the node-level policy.
    Agent,
    /// The network with the lower cross-entropy teaches.
    LossHeuristic,
    /// Every node is distilled in both directions.
    Both,
}

/// Which local structures are transferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureMode {
    /// Sampled from the structure-level policy.
    Agent,
    /// Every eligible structure is transferred.
    All,
    /// No structure-level distillation.
    Off,
}

/// How the neighborhood sets for structure transfer are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborhoodMode {
    /// Batch neighbors that took the same node-level action.
    AgentSelected,
    /// The full neighborhood of the node in its teaching network.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdPlan {
    pub direction: DirectionMode,
    pub structure: StructureMode,
    pub neighborhoods: NeighborhoodMode,
}

impl KdPlan {
    pub const FREEKD: KdPlan = KdPlan {
        direction: DirectionMode::Agent,
        structure: StructureMode::Agent,
        neighborhoods: NeighborhoodMode::AgentSelected,
    };

    pub fn validate(&self) -> Result<()> {
        if self.structure == StructureMode::Agent && self.direction != DirectionMode::Agent {
            return Err(CoreError::Contract(
                "structure actions from the agent require agent-chosen directions".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_agent(&self) -> bool {
        self.direction == DirectionMode::Agent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdHyper {
    /// Weight of node-level KD.
    pub mu: f64,
    /// Weight of structure-level KD.
    pub rho: f64,
    /// Weight of the neighborhood term of the reward.
    pub gamma: f64,
    pub batch_size: usize,
    /// Divide KD totals by the batch size.
    pub normalize_by_batch: bool,
    pub plan: KdPlan,
}

impl Default for KdHyper {
    fn default() -> Self {
        KdHyper {
            mu: 1.0,
            rho: 1.0,
            gamma: 0.3,
            batch_size: 512,
            normalize_by_batch: true,
            plan: KdPlan::FREEKD,
        }
    }
}

impl KdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.rho >= 0.0 && self.gamma >= 0.0) {
            return Err(CoreError::Contract("mu, rho and gamma must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Contract("batch size must be positive".into()));
        }
        self.plan.validate()
    }
}

impl FromStr for DirectionMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agent" => Ok(DirectionMode::Agent),
            "loss" => Ok(DirectionMode::LossHeuristic),
            "both" => Ok(DirectionMode::Both),
            other => Err(CoreError::Contract(format!("unknown direction mode `{other}`"))),
        }
    }
}

/// `KL(p || q)` with both sides floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Node states `(p_a, ce_a, p_b, ce_b)` for `batch`, one row each.
/// `ce_a`, `ce_b` are indexed by node id and clamped into `[0, 20]`.
pub fn build_node_states(probs_a: &Matrix, ce_a: &[f64], probs_b: &Matrix, ce_b: &[f64], batch: &[usize]) -> Matrix {
    let c = probs_a.cols();
    let mut out = Matrix::zeros(batch.len(), 2 * c + 2);
    for (r, &i) in batch.iter().enumerate() {
        let row = out.row_mut(r);
        row[..c].copy_from_slice(probs_a.row(i));
        row[c] = ce_a[i].clamp(0.0, CE_CLAMP);
        row[c + 1..2 * c + 1].copy_from_slice(probs_b.row(i));
        row[2 * c + 1] = ce_b[i].clamp(0.0, CE_CLAMP);
    }
    out
}

/// Agent-selected neighborhoods, indexed like `batch`.
///
/// `actions[k]` is the node-level action of `batch[k]`. The first set of a
/// node holds batch neighbors sharing action 0 with it (when its own action
/// is 0); the second does the same for action 1. Ids are sorted.
pub fn agent_selected_neighborhoods(
    neighbors: &NeighborIndex,
    batch: &[usize],
    actions: &[u8],
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut action_of = vec![None; neighbors.len()];
    for (&i, &a) in batch.iter().zip(actions) {
        action_of[i] = Some(a);
    }
    let mut m_a = Vec::with_capacity(batch.len());
    let mut m_b = Vec::with_capacity(batch.len());
    for (&i, &a) in batch.iter().zip(actions) {
        let set: Vec<usize> = neighbors
            .neighbors(i)
            .iter()
            .copied()
            .filter(|&v| action_of[v] == Some(a))
            .collect();
        if a == 0 {
            m_a.push(set);
            m_b.push(Vec::new());
        } else {
            m_a.push(Vec::new());
            m_b.push(set);
        }
    }
    (m_a, m_b)
}

/// Like [`agent_selected_neighborhoods`] but with every neighbor below
/// `limit` in the set of the teaching network.
pub fn full_neighborhoods(
    neighbors: &NeighborIndex,
    batch: &[usize],
    actions: &[u8],
    limit: usize,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut m_a = Vec::with_capacity(batch.len());
    let mut m_b = Vec::with_capacity(batch.len());
    for (&i, &a) in batch.iter().zip(actions) {
        let set: Vec<usize> = neighbors.neighbors(i).iter().copied().filter(|&v| v < limit).collect();
        if a == 0 {
            m_a.push(set);
            m_b.push(Vec::new());
        } else {
            m_a.push(Vec::new());
            m_b.push(set);
        }
    }
    (m_a, m_b)
}

/// Mean cosine between node `i` and the members of `set`, in both networks.
/// An empty set gives `(0, 0)`.
pub fn center_similarity(emb_a: &Matrix, emb_b: &Matrix, set: &[usize], i: usize) -> [f64; 2] {
    if set.is_empty() {
        return [0.0, 0.0];
    }
    let mean = |emb: &Matrix| set.iter().map(|&v| cosine(emb.row(i), emb.row(v))).sum::<f64>() / set.len() as f64;
    [mean(emb_a), mean(emb_b)]
}

/// Structure states: the node state followed by the center similarity over
/// the node's selected set.
pub fn build_struct_states(
    node_states: &Matrix,
    emb_a: &Matrix,
    emb_b: &Matrix,
    batch: &[usize],
    actions: &[u8],
    m_a: &[Vec<usize>],
    m_b: &[Vec<usize>],
) -> Matrix {
    let width = node_states.cols();
    let mut out = Matrix::zeros(batch.len(), width + 2);
    for (r, &i) in batch.iter().enumerate() {
        let set = if actions[r] == 0 { &m_a[r] } else { &m_b[r] };
        let u = center_similarity(emb_a, emb_b, set, i);
        let row = out.row_mut(r);
        row[..width].copy_from_slice(node_states.row(r));
        row[width] = u[0];
        row[width + 1] = u[1];
    }
    out
}

/// Node-level KD totals `(L_a, L_b)`: `L_b` distills `a` into `b` on nodes
/// with action 0, `L_a` distills `b` into `a` on nodes with action 1.
pub fn node_kd_losses(probs_a: &Matrix, probs_b: &Matrix, actions: &[u8], batch: &[usize]) -> (f64, f64) {
    let mut la = 0.0;
    let mut lb = 0.0;
    for (&i, &a) in batch.iter().zip(actions) {
        if a == 0 {
            lb += kl_divergence(probs_a.row(i), probs_b.row(i));
        } else {
            la += kl_divergence(probs_b.row(i), probs_a.row(i));
        }
    }
    (la, lb)
}

/// Softmax over `j in set` of `cos(h_i, h_j)`, in the order of `set`.
pub fn structure_similarities(emb: &Matrix, i: usize, set: &[usize]) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(CoreError::Contract(format!("empty neighborhood set at node {i}")));
    }
    let logits: Vec<f64> = set.iter().map(|&j| cosine(emb.row(i), emb.row(j))).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// Structure-level KD totals `(L_a, L_b)`. `a2[k]` gates node `batch[k]`;
/// sets with fewer than two members contribute nothing.
pub fn struct_kd_losses(
    emb_a: &Matrix,
    emb_b: &Matrix,
    m_a: &[Vec<usize>],
    m_b: &[Vec<usize>],
    a2: &[u8],
    batch: &[usize],
) -> Result<(f64, f64)> {
    let mut la = 0.0;
    let mut lb = 0.0;
    for (k, &i) in batch.iter().enumerate() {
        if a2[k] == 0 {
            continue;
        }
        if m_a[k].len() >= 2 {
            let t = structure_similarities(emb_a, i, &m_a[k])?;
            let s = structure_similarities(emb_b, i, &m_a[k])?;
            lb += kl_divergence(&t, &s);
        }
        if m_b[k].len() >= 2 {
            let t = structure_similarities(emb_b, i, &m_b[k])?;
            let s = structure_similarities(emb_a, i, &m_b[k])?;
            la += kl_divergence(&t, &s);
        }
    }
    Ok((la, lb))
}

/// `(L_a, L_b, L_a + L_b)` with `L = CE + mu * node + rho * struct`.
pub fn assemble_losses(ce: [f64; 2], node: [f64; 2], structure: [f64; 2], mu: f64, rho: f64) -> (f64, f64, f64) {
    let la = ce[0] + mu * node[0] + rho * structure[0];
    let lb = ce[1] + mu * node[1] + rho * structure[1];
    (la, lb, la + lb)
}

/// `sum_r weights[r] * KL(teacher[nodes[r]] || student[nodes[r]])` on the
/// tape, the teacher being a constant. `None` when every weight is zero.
pub fn node_kd_loss(
    tape: &mut Tape,
    teacher: &Matrix,
    student_log_probs: Var,
    nodes: &[usize],
    weights: &[f64],
) -> Result<Option<Var>> {
    let keep: Vec<usize> = (0..nodes.len()).filter(|&r| weights[r] != 0.0).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let c = teacher.cols();
    let idx: Vec<usize> = keep.iter().map(|&r| nodes[r]).collect();
    let mut w = Matrix::zeros(keep.len(), c);
    let mut entropy_part = 0.0;
    for (k, &r) in keep.iter().enumerate() {
        for (col, &p) in teacher.row(nodes[r]).iter().enumerate() {
            if p > 0.0 {
                w.set(k, col, -weights[r] * p);
                entropy_part += weights[r] * p * p.max(PROB_FLOOR).ln();
            }
        }
    }
    let picked = tape.gather_rows(student_log_probs, Rc::new(idx))?;
    let w = tape.constant(w)?;
    let cross = tape.mul(picked, w)?;
    let cross = tape.sum(cross)?;
    let constant = tape.constant(Matrix::scalar(entropy_part))?;
    Ok(Some(tape.add(cross, constant)?))
}

/// One structure transfer: center node, its ordered set and the weight.
#[derive(Clone, Debug)]
pub struct StructTerm<'a> {
    pub center: usize,
    pub set: &'a [usize],
    pub weight: f64,
}

/// `sum weight * KL(s_teacher || s_student)` over structure terms with at
/// least two members; the teacher side comes from constant embeddings.
pub fn struct_kd_loss(tape: &mut Tape, teacher_emb: &Matrix, student_emb: Var, terms: &[StructTerm<'_>]) -> Result<Option<Var>> {
    let terms: Vec<&StructTerm> = terms.iter().filter(|t| t.set.len() >= 2 && t.weight != 0.0).collect();
    if terms.is_empty() {
        return Ok(None);
    }
    let mut centers = Vec::new();
    let mut members = Vec::new();
    let mut segment = Vec::new();
    let mut weights = Vec::new();
    let mut entropy_part = 0.0;
    for (s, t) in terms.iter().enumerate() {
        let target = structure_similarities(teacher_emb, t.center, t.set)?;
        for (&j, &p) in t.set.iter().zip(&target) {
            centers.push(t.center);
            members.push(j);
            segment.push(s);
            weights.push(-t.weight * p);
            if p > 0.0 {
                entropy_part += t.weight * p * p.max(PROB_FLOOR).ln();
            }
        }
    }
    let seg = Rc::new(Segments::new(segment, terms.len())?);
    let hc = tape.gather_rows(student_emb, Rc::new(centers))?;
    let hm = tape.gather_rows(student_emb, Rc::new(members))?;
    let cos = tape.cosine_rows(hc, hm)?;
    let log_s = tape.segment_log_softmax(cos, seg)?;
    let w = tape.constant(Matrix::column(&weights))?;
    let cross = tape.mul(log_s, w)?;
    let cross = tape.sum(cross)?;
    let constant = tape.constant(Matrix::scalar(entropy_part))?;
    Ok(Some(tape.add(cross, constant)?))
}

/// A network under training with its optimizer.
#[derive(Clone, Debug)]
pub struct Member {
    pub model: GnnModel,
    pub optimizer: Optimizer,
}

impl Member {
    pub fn new(model: GnnModel, optimizer: Optimizer) -> Self {
        Member { model, optimizer }
    }

    /// Replaces the gradients with those of `out` and takes one step.
    pub fn apply(&mut self, grads: &freekd_tensor::Gradients, out: &GnnOutput) -> Result<()> {
        self.model.zero_grad();
        self.model.accumulate_grads(grads, out);
        self.optimizer.step(&mut self.model.params_mut())?;
        Ok(())
    }
}

/// The input a pair (or cohort) trains on during one pass.
#[derive(Clone, Copy)]
pub struct ViewContext<'a> {
    /// The original graph: labels and masks.
    pub graph: &'a Graph,
    pub view: &'a GraphView,
    /// Adjacency of the view.
    pub neighbors: &'a NeighborIndex,
    pub view_id: usize,
    /// Feature rows of extra (prompt) nodes.
    pub tokens: Option<&'a Matrix>,
}

/// Per-node cross-entropy on training nodes; zero elsewhere.
pub fn train_node_ce(probs: &Matrix, graph: &Graph) -> Vec<f64> {
    let train = graph.mask(Split::Train);
    (0..graph.num_nodes())
        .map(|i| match (train[i], graph.label(i)) {
            (true, Some(y)) => -probs.get(i, y).max(PROB_FLOOR).ln(),
            _ => 0.0,
        })
        .collect()
}

/// KD loss values of one exchange, after batch normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdComponents {
    pub node_a: f64,
    pub node_b: f64,
    pub struct_a: f64,
    pub struct_b: f64,
}

impl KdComponents {
    pub fn add(&mut self, other: &KdComponents) {
        self.node_a += other.node_a;
        self.node_b += other.node_b;
        self.struct_a += other.struct_a;
        self.struct_b += other.struct_b;
    }
}

/// The tape losses of one pair on one batch.
#[derive(Clone, Debug)]
pub struct Exchange {
    /// Full loss of the first network: CE plus its weighted KD terms.
    pub loss_a: Var,
    pub loss_b: Var,
    pub components: KdComponents,
    pub node_actions: Vec<u8>,
    pub struct_actions: Vec<u8>,
}

/// Builds both losses of the pair `(a, b)` on `batch`. When the plan uses
/// the agent, actions are sampled from it and the transitions are pushed
/// to its buffer under `pair`.
#[allow(clippy::too_many_arguments)]
pub fn pair_exchange(
    tape: &mut Tape,
    out_a: &GnnOutput,
    out_b: &GnnOutput,
    ce_loss: [Var; 2],
    ctx: &ViewContext<'_>,
    batch: &[usize],
    hyper: &KdHyper,
    agent: Option<&mut HierarchicalAgent>,
    pair: (usize, usize),
) -> Result<Exchange> {
    let plan = hyper.plan;
    let probs_a = tape.value(out_a.probs).clone();
    let probs_b = tape.value(out_b.probs).clone();
    let emb_a = tape.value(out_a.embeddings).clone();
    let emb_b = tape.value(out_b.embeddings).clone();
    let ce_a = train_node_ce(&probs_a, ctx.graph);
    let ce_b = train_node_ce(&probs_b, ctx.graph);
    let n_batch = batch.len();
    let limit = ctx.graph.num_nodes();

    let mut node_actions;
    let mut struct_actions = vec![1u8; n_batch];
    let (m_a, m_b);
    match plan.direction {
        DirectionMode::Agent => {
            let agent = agent.ok_or_else(|| CoreError::Contract("agent-driven plan without an agent".into()))?;
            let node_states = build_node_states(&probs_a, &ce_a, &probs_b, &ce_b, batch);
            let (a1, lp1) = agent.sample_node_actions(&node_states)?;
            node_actions = a1;
            let sets = match plan.neighborhoods {
                NeighborhoodMode::AgentSelected => agent_selected_neighborhoods(ctx.neighbors, batch, &node_actions),
                NeighborhoodMode::Full => full_neighborhoods(ctx.neighbors, batch, &node_actions, limit),
            };
            m_a = sets.0;
            m_b = sets.1;
            let mut struct_states = None;
            let mut lp2 = vec![0.0; n_batch];
            match plan.structure {
                StructureMode::Agent => {
                    let s2 = build_struct_states(&node_states, &emb_a, &emb_b, batch, &node_actions, &m_a, &m_b);
                    let (a2, l2) = agent.sample_struct_actions(&s2)?;
                    struct_actions = a2;
                    lp2 = l2;
                    struct_states = Some(s2);
                }
                StructureMode::All => {}
                StructureMode::Off => struct_actions = vec![0; n_batch],
            }
            for (k, &i) in batch.iter().enumerate() {
                agent.buffer.push(Transition {
                    key: BaselineKey {
                        view: ctx.view_id,
                        pair,
                        node: i,
                    },
                    node_state: node_states.row(k).to_vec(),
                    a1: node_actions[k],
                    log_p1: lp1[k],
                    struct_state: struct_states.as_ref().map(|s| s.row(k).to_vec()),
                    a2: struct_actions[k],
                    log_p2: lp2[k],
                });
            }
        }
        DirectionMode::LossHeuristic | DirectionMode::Both => {
            node_actions = if plan.direction == DirectionMode::LossHeuristic {
                let a: Vec<f64> = batch.iter().map(|&i| ce_a[i]).collect();
                let b: Vec<f64> = batch.iter().map(|&i| ce_b[i]).collect();
                heuristic_direction(&a, &b)
            } else {
                vec![0; n_batch]
            };
            if plan.structure == StructureMode::Off {
                struct_actions = vec![0; n_batch];
            }
            let sets = match (plan.direction, plan.neighborhoods) {
                (DirectionMode::Both, NeighborhoodMode::AgentSelected) => {
                    // every batch node is selected in both networks
                    let (all, _) = agent_selected_neighborhoods(ctx.neighbors, batch, &vec![0; n_batch]);
                    (all.clone(), all)
                }
                (DirectionMode::Both, NeighborhoodMode::Full) => {
                    let (all, _) = full_neighborhoods(ctx.neighbors, batch, &vec![0; n_batch], limit);
                    (all.clone(), all)
                }
                (_, NeighborhoodMode::AgentSelected) => agent_selected_neighborhoods(ctx.neighbors, batch, &node_actions),
                (_, NeighborhoodMode::Full) => full_neighborhoods(ctx.neighbors, batch, &node_actions, limit),
            };
            m_a = sets.0;
            m_b = sets.1;
        }
    }
    if plan.direction == DirectionMode::Both {
        // report the forced exchange as "both" by leaving actions at 0
        node_actions = vec![0; n_batch];
    }

    let scale = if hyper.normalize_by_batch { 1.0 / n_batch as f64 } else { 1.0 };
    let both = plan.direction == DirectionMode::Both;
    // node-level weights: b learns from a on action 0, a learns from b on action 1
    let w_b: Vec<f64> = node_actions
        .iter()
        .map(|&a| if both || a == 0 { scale } else { 0.0 })
        .collect();
    let w_a: Vec<f64> = node_actions
        .iter()
        .map(|&a| if both || a == 1 { scale } else { 0.0 })
        .collect();
    let mut components = KdComponents::default();
    for (k, &i) in batch.iter().enumerate() {
        if w_b[k] != 0.0 {
            components.node_b += w_b[k] * kl_divergence(probs_a.row(i), probs_b.row(i));
        }
        if w_a[k] != 0.0 {
            components.node_a += w_a[k] * kl_divergence(probs_b.row(i), probs_a.row(i));
        }
    }
    let terms_b: Vec<StructTerm> = batch
        .iter()
        .enumerate()
        .map(|(k, &i)| StructTerm {
            center: i,
            set: &m_a[k],
            weight: if struct_actions[k] == 1 { scale } else { 0.0 },
        })
        .collect();
    let terms_a: Vec<StructTerm> = batch
        .iter()
        .enumerate()
        .map(|(k, &i)| StructTerm {
            center: i,
            set: &m_b[k],
            weight: if struct_actions[k] == 1 { scale } else { 0.0 },
        })
        .collect();
    for t in terms_b.iter().filter(|t| t.weight != 0.0 && t.set.len() >= 2) {
        let target = structure_similarities(&emb_a, t.center, t.set)?;
        let student = structure_similarities(&emb_b, t.center, t.set)?;
        components.struct_b += t.weight * kl_divergence(&target, &student);
    }
    for t in terms_a.iter().filter(|t| t.weight != 0.0 && t.set.len() >= 2) {
        let target = structure_similarities(&emb_b, t.center, t.set)?;
        let student = structure_similarities(&emb_a, t.center, t.set)?;
        components.struct_a += t.weight * kl_divergence(&target, &student);
    }

    let mut loss_a = ce_loss[0];
    let mut loss_b = ce_loss[1];
    if hyper.mu > 0.0 {
        if let Some(l) = node_kd_loss(tape, &probs_b, out_a.log_probs, batch, &w_a)? {
            let l = tape.scale(l, hyper.mu)?;
            loss_a = tape.add(loss_a, l)?;
        }
        if let Some(l) = node_kd_loss(tape, &probs_a, out_b.log_probs, batch, &w_b)? {
            let l = tape.scale(l, hyper.mu)?;
            loss_b = tape.add(loss_b, l)?;
        }
    }
    if hyper.rho > 0.0 && plan.structure != StructureMode::Off {
        if let Some(l) = struct_kd_loss(tape, &emb_b, out_a.embeddings, &terms_a)? {
            let l = tape.scale(l, hyper.rho)?;
            loss_a = tape.add(loss_a, l)?;
        }
        if let Some(l) = struct_kd_loss(tape, &emb_a, out_b.embeddings, &terms_b)? {
            let l = tape.scale(l, hyper.rho)?;
            loss_b = tape.add(loss_b, l)?;
        }
    }
    Ok(Exchange {
        loss_a,
        loss_b,
        components,
        node_actions,
        struct_actions,
    })
}

/// Running totals of one training pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean training cross-entropy per model over the pass.
    pub train_ce: Vec<f64>,
    pub kd: KdComponents,
    /// Mean delayed reward; `None` when no agent acted.
    pub mean_reward: Option<f64>,
    /// Fraction of node-level actions equal to 0.
    pub action0_fraction: Option<f64>,
    pub batches: usize,
    pub exchanges: usize,
}

#[derive(Default)]
pub(crate) struct StatsAccumulator {
    ce_sum: Vec<f64>,
    ce_weight: f64,
    kd: KdComponents,
    reward_sum: f64,
    reward_count: usize,
    action0: usize,
    actions: usize,
    batches: usize,
    exchanges: usize,
}

impl StatsAccumulator {
    pub(crate) fn new(models: usize) -> Self {
        StatsAccumulator {
            ce_sum: vec![0.0; models],
            ..Default::default()
        }
    }

    pub(crate) fn batch(&mut self, ce: &[f64], size: usize) {
        for (s, c) in self.ce_sum.iter_mut().zip(ce) {
            *s += c * size as f64;
        }
        self.ce_weight += size as f64;
        self.batches += 1;
    }

    pub(crate) fn exchange(&mut self, ex: &Exchange) {
        self.kd.add(&ex.components);
        self.action0 += ex.node_actions.iter().filter(|&&a| a == 0).count();
        self.actions += ex.node_actions.len();
        self.exchanges += 1;
    }

    pub(crate) fn rewards(&mut self, rewards: &[f64]) {
        self.reward_sum += rewards.iter().sum::<f64>();
        self.reward_count += rewards.len();
    }

    pub(crate) fn finish(self, agent_used: bool) -> EpochStats {
        let w = self.ce_weight.max(1.0);
        EpochStats {
            train_ce: self.ce_sum.iter().map(|s| s / w).collect(),
            kd: self.kd,
            mean_reward: (self.reward_count > 0).then(|| self.reward_sum / self.reward_count as f64),
            action0_fraction: (agent_used && self.actions > 0).then(|| self.action0 as f64 / self.actions as f64),
            batches: self.batches,
            exchanges: self.exchanges,
        }
    }
}

/// One pass over `batches` for the pair `(a, b)`: forward both networks,
/// sample actions, step both networks on their losses, then reward the
/// agent with the post-update cross-entropies and update its policies.
pub fn train_pair_epoch(
    a: &mut Member,
    b: &mut Member,
    ctx: &ViewContext<'_>,
    batches: &[Vec<usize>],
    hyper: &KdHyper,
    mut agent: Option<&mut HierarchicalAgent>,
) -> Result<EpochStats> {
    hyper.validate()?;
    let labels = ctx.graph.labels();
    let train = ctx.graph.mask(Split::Train);
    let mut stats = StatsAccumulator::new(2);
    for batch in batches {
        let mut tape = Tape::new();
        let tokens = ctx.tokens.map(|t| tape.constant(t.clone())).transpose()?;
        let out_a = a.model.forward(&mut tape, ctx.view, tokens, true, true)?;
        let out_b = b.model.forward(&mut tape, ctx.view, tokens, true, true)?;
        let ce_a = cross_entropy_loss(&mut tape, out_a.log_probs, labels, batch)?;
        let ce_b = cross_entropy_loss(&mut tape, out_b.log_probs, labels, batch)?;
        stats.batch(&[tape.value(ce_a).item(), tape.value(ce_b).item()], batch.len());
        let ex = pair_exchange(
            &mut tape,
            &out_a,
            &out_b,
            [ce_a, ce_b],
            ctx,
            batch,
            hyper,
            agent.as_deref_mut(),
            (0, 1),
        )?;
        stats.exchange(&ex);
        let total = tape.add(ex.loss_a, ex.loss_b)?;
        let grads = tape.backward(total)?;
        a.apply(&grads, &out_a)?;
        b.apply(&grads, &out_b)?;

        if let Some(agent) = agent.as_deref_mut() {
            let (pa, _) = a.model.predict(ctx.view, ctx.tokens)?;
            let (pb, _) = b.model.predict(ctx.view, ctx.tokens)?;
            let rewards = compute_rewards(
                &train_node_ce(&pa, ctx.graph),
                &train_node_ce(&pb, ctx.graph),
                batch,
                ctx.neighbors,
                train,
                hyper.gamma,
            );
            stats.rewards(&rewards);
            agent.update(&rewards)?;
        }
    }
    Ok(stats.finish(hyper.plan.uses_agent()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn path5() -> NeighborIndex {
        NeighborIndex::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4)])
    }

    #[test]
    fn node_state_is_concatenation() {
        let pa = Matrix::from_rows(&[[0.7, 0.3]]).unwrap();
        let pb = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let s = build_node_states(&pa, &[0.3567], &pb, &[0.6931], &[0]);
        assert_eq!(s.row(0), &[0.7, 0.3, 0.3567, 0.5, 0.5, 0.6931]);
    }

    #[test]
    fn path_neighborhoods() {
        let batch = [0, 1, 2, 3, 4];
        let (ma, mb) = agent_selected_neighborhoods(&path5(), &batch, &[0, 0, 1, 1, 0]);
        assert_eq!(ma[0], vec![1]);
        assert_eq!(mb[2], vec![3]);
        assert!(ma[4].is_empty() && mb[4].is_empty());
        let (ma, mb) = agent_selected_neighborhoods(&path5(), &batch, &[0; 5]);
        assert_eq!(ma[2], vec![1, 3]);
        assert!(mb.iter().all(Vec::is_empty));
    }

    #[test]
    fn nodes_outside_batch_never_enter_sets() {
        let (ma, _) = agent_selected_neighborhoods(&path5(), &[1, 2], &[0, 0]);
        assert_eq!(ma[0], vec![2]);
        assert_eq!(ma[1], vec![1]);
    }

    #[test]
    fn center_similarity_examples() {
        let emb = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(center_similarity(&emb, &emb, &[1, 2], 0)[0], 0.5, epsilon = 1e-12);
        assert_eq!(center_similarity(&emb, &emb, &[], 0), [0.0, 0.0]);
        let same = Matrix::filled(3, 2, 1.0);
        let u = center_similarity(&same, &same, &[1, 2], 0);
        assert_abs_diff_eq!(u[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn node_kd_example() {
        let pa = Matrix::from_rows(&[[0.9, 0.1]]).unwrap();
        let pb = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let (la, lb) = node_kd_losses(&pa, &pb, &[0], &[0]);
        assert_eq!(la, 0.0);
        assert_abs_diff_eq!(lb, 0.3681, epsilon = 1e-4);
        let (la, lb) = node_kd_losses(&pa, &pb, &[1], &[0]);
        assert_eq!(lb, 0.0);
        assert!(la > 0.0);
    }

    #[test]
    fn structure_similarity_examples() {
        let emb = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = structure_similarities(&emb, 0, &[1, 2]).unwrap();
        assert_abs_diff_eq!(s[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(s[1], 0.2689, epsilon = 1e-4);
        assert_eq!(structure_similarities(&emb, 0, &[2]).unwrap(), vec![1.0]);
        assert!(structure_similarities(&emb, 0, &[]).is_err());
    }

    #[test]
    fn assemble_examples() {
        assert_eq!(assemble_losses([0.5, 0.7], [3.0, 3.0], [2.0, 2.0], 0.0, 0.0).0, 0.5);
        assert_eq!(assemble_losses([0.5, 0.7], [0.0; 2], [0.0; 2], 1.0, 1.0).2, 1.2);
        assert_eq!(assemble_losses([1.0, 1.0], [1.0, 1.0], [1.0, 1.0], 1.0, 2.0).0, 4.0);
    }

    #[test]
    fn tape_losses_match_values() {
        let pa = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let pb = Matrix::from_rows(&[[0.5, 0.5], [0.6, 0.4]]).unwrap();
        let mut tape = Tape::new();
        let lq = tape.constant(pb.map(f64::ln)).unwrap();
        let l = node_kd_loss(&mut tape, &pa, lq, &[0, 1], &[1.0, 1.0]).unwrap().unwrap();
        let (_, expected) = node_kd_losses(&pa, &pb, &[0, 0], &[0, 1]);
        assert_abs_diff_eq!(tape.value(l).item(), expected, epsilon = 1e-12);
    }
}
