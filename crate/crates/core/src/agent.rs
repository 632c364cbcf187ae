//! The hierarchical judge: a node-level policy choosing the distillation
//! direction per node and a structure-level policy choosing whether the
//! local structure around the node is transferred. Both are trained with
//! REINFORCE against delayed rewards.

use std::collections::HashMap;

use freekd_tensor::{Matrix, Optimizer, Parameter, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::NeighborIndex;

pub const POLICY_HIDDEN: [usize; 2] = [64, 32];

/// Step size of the policy-gradient ascent.
pub const POLICY_LR: f64 = 0.01;

/// Cross-entropy entries of a state are clamped into `[0, CE_CLAMP]`.
pub const CE_CLAMP: f64 = 20.0;

/// Three-layer tanh MLP with a two-way softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    input_dim: usize,
    layers: Vec<(Parameter, Parameter)>,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Self {
        let dims = [input_dim, POLICY_HIDDEN[0], POLICY_HIDDEN[1], 2];
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)).collect();
                (
                    Parameter::new(Matrix::from_vec(w[0], w[1], data).expect("sized")),
                    Parameter::new(Matrix::zeros(1, w[1])),
                )
            })
            .collect();
        PolicyNet { input_dim, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Log action probabilities, `n x 2`, plus the bound parameter handles.
    pub fn log_probs(&self, tape: &mut Tape, states: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let width = tape.value(states).cols();
        if width != self.input_dim {
            return Err(CoreError::Contract(format!(
                "policy expects {}-dim states, got {width}",
                self.input_dim
            )));
        }
        let mut bound = Vec::with_capacity(6);
        let mut h = states;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let wv = w.bind(tape, trainable)?;
            let bv = b.bind(tape, trainable)?;
            bound.extend([wv, bv]);
            let z = tape.matmul(h, wv)?;
            let z = tape.add_row_vector(z, bv)?;
            h = if l + 1 < self.layers.len() { tape.tanh(z)? } else { z };
        }
        Ok((tape.log_softmax_rows(h)?, bound))
    }

    pub fn probs(&self, states: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone())?;
        let (lp, _) = self.log_probs(&mut tape, s, false)?;
        Ok(tape.value(lp).map(f64::exp))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.value.clone(), b.value.clone()])
            .collect()
    }
}

/// Samples one action per state row; returns actions and their log-probabilities.
pub fn sample_actions<R: Rng + ?Sized>(policy: &PolicyNet, states: &Matrix, rng: &mut R) -> Result<(Vec<u8>, Vec<f64>)> {
    let probs = policy.probs(states)?;
    let mut actions = Vec::with_capacity(states.rows());
    let mut log_probs = Vec::with_capacity(states.rows());
    for r in 0..states.rows() {
        let p0 = probs.get(r, 0);
        let a = if rng.random::<f64>() < p0 { 0 } else { 1 };
        actions.push(a);
        log_probs.push(probs.get(r, a as usize).max(f64::MIN_POSITIVE).ln());
    }
    Ok((actions, log_probs))
}

/// Identifies a node's reward history: the input view, the pair of
/// networks and the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BaselineKey {
    pub view: usize,
    pub pair: (usize, usize),
    pub node: usize,
}

/// Per-node baseline: the reward seen at the node during the previous
/// epoch, falling back to that epoch's mean reward for unseen nodes.
#[derive(Clone, Debug, Default)]
pub struct BaselineStore {
    previous: HashMap<BaselineKey, f64>,
    previous_mean: f64,
    current: HashMap<BaselineKey, f64>,
}

impl BaselineStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn baseline(&self, key: &BaselineKey) -> f64 {
        self.previous.get(key).copied().unwrap_or(self.previous_mean)
    }

    pub fn record(&mut self, key: BaselineKey, reward: f64) {
        self.current.insert(key, reward);
    }

    /// Makes this epoch's rewards the baselines of the next one.
    pub fn end_epoch(&mut self) {
        if !self.current.is_empty() {
            self.previous_mean = self.current.values().sum::<f64>() / self.current.len() as f64;
            self.previous = std::mem::take(&mut self.current);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub key: BaselineKey,
    pub node_state: Vec<f64>,
    pub a1: u8,
    pub log_p1: f64,
    /// Absent when structure actions are not sampled by the policy.
    pub struct_state: Option<Vec<f64>>,
    pub a2: u8,
    pub log_p2: f64,
}

/// Transitions awaiting their delayed rewards.
#[derive(Clone, Debug, Default)]
pub struct HistoryBuffer {
    items: Vec<Transition>,
}

impl HistoryBuffer {
    pub fn push(&mut self, t: Transition) {
        self.items.push(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn drain(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.items)
    }
}

/// Delayed reward per batch node.
///
/// `ce_a` and `ce_b` are per-node cross-entropies of the two networks after
/// their update, indexed by node id; only training nodes are read.
pub fn compute_rewards(
    ce_a: &[f64],
    ce_b: &[f64],
    batch: &[usize],
    neighbors: &NeighborIndex,
    train: &[bool],
    gamma: f64,
) -> Vec<f64> {
    if batch.is_empty() {
        return Vec::new();
    }
    let both = |u: usize| ce_a[u] + ce_b[u];
    let batch_term = batch.iter().map(|&u| both(u)).sum::<f64>() / batch.len() as f64;
    batch
        .iter()
        .map(|&i| {
            let (sum, count) = neighbors
                .neighbors(i)
                .iter()
                .filter(|&&v| v < train.len() && train[v])
                .fold((0.0, 0usize), |(s, c), &v| (s + both(v), c + 1));
            let local = if count == 0 { 0.0 } else { sum / count as f64 };
            -batch_term - gamma * local
        })
        .collect()
}

/// Direction chosen from the losses alone: the network with the lower
/// cross-entropy teaches, ties going to the first network.
pub fn heuristic_direction(ce_a: &[f64], ce_b: &[f64]) -> Vec<u8> {
    ce_a.iter().zip(ce_b).map(|(a, b)| u8::from(a > b)).collect()
}

/// Builds the REINFORCE surrogate `-(1/n) sum (R - b) (log pi_node + log pi_struct)`
/// on `tape`; returns the loss and the bound parameters of both policies.
pub fn policy_surrogate(
    tape: &mut Tape,
    node_policy: &PolicyNet,
    struct_policy: &PolicyNet,
    transitions: &[Transition],
    advantages: &[f64],
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    if transitions.len() != advantages.len() || transitions.is_empty() {
        return Err(CoreError::Contract(format!(
            "{} transitions against {} rewards",
            transitions.len(),
            advantages.len()
        )));
    }
    let n = transitions.len() as f64;
    let node_states: Vec<&[f64]> = transitions.iter().map(|t| t.node_state.as_slice()).collect();
    let s1 = tape.constant(Matrix::from_rows(&node_states)?)?;
    let (lp1, bound1) = node_policy.log_probs(tape, s1, true)?;
    let mut w1 = Matrix::zeros(transitions.len(), 2);
    for (r, (t, adv)) in transitions.iter().zip(advantages).enumerate() {
        w1.set(r, t.a1 as usize, -adv / n);
    }
    let w1 = tape.constant(w1)?;
    let term1 = tape.mul(lp1, w1)?;
    let mut loss = tape.sum(term1)?;

    let structured: Vec<usize> = (0..transitions.len())
        .filter(|&r| transitions[r].struct_state.is_some())
        .collect();
    let mut bound2 = Vec::new();
    if !structured.is_empty() {
        let rows: Vec<&[f64]> = structured
            .iter()
            .map(|&r| transitions[r].struct_state.as_deref().expect("filtered"))
            .collect();
        let s2 = tape.constant(Matrix::from_rows(&rows)?)?;
        let (lp2, b2) = struct_policy.log_probs(tape, s2, true)?;
        bound2 = b2;
        let mut w2 = Matrix::zeros(structured.len(), 2);
        for (k, &r) in structured.iter().enumerate() {
            w2.set(k, transitions[r].a2 as usize, -advantages[r] / n);
        }
        let w2 = tape.constant(w2)?;
        let term2 = tape.mul(lp2, w2)?;
        let term2 = tape.sum(term2)?;
        loss = tape.add(loss, term2)?;
    }
    Ok((loss, bound1, bound2))
}

/// Both policies, their optimizers, the reward baselines and the buffer.
#[derive(Clone, Debug)]
pub struct HierarchicalAgent {
    pub node_policy: PolicyNet,
    pub struct_policy: PolicyNet,
    node_opt: Optimizer,
    struct_opt: Optimizer,
    pub baselines: BaselineStore,
    pub buffer: HistoryBuffer,
    rng: ChaCha8Rng,
    updates: u64,
}

impl HierarchicalAgent {
    /// Agent for `num_classes` classes, using plain gradient ascent with step `lr`.
    pub fn new(num_classes: usize, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node_policy = PolicyNet::new(2 * num_classes + 2, &mut rng);
        let struct_policy = PolicyNet::new(2 * num_classes + 4, &mut rng);
        HierarchicalAgent {
            node_policy,
            struct_policy,
            node_opt: Optimizer::sgd(lr, 0.0),
            struct_opt: Optimizer::sgd(lr, 0.0),
            baselines: BaselineStore::new(),
            buffer: HistoryBuffer::default(),
            rng,
            updates: 0,
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.node_opt = optimizer.clone();
        self.struct_opt = optimizer;
        self
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn sample_node_actions(&mut self, states: &Matrix) -> Result<(Vec<u8>, Vec<f64>)> {
        sample_actions(&self.node_policy, states, &mut self.rng)
    }

    pub fn sample_struct_actions(&mut self, states: &Matrix) -> Result<(Vec<u8>, Vec<f64>)> {
        sample_actions(&self.struct_policy, states, &mut self.rng)
    }

    /// One ascent step on the buffered transitions; `rewards[k]` belongs to
    /// the k-th buffered transition. Drains the buffer and records the
    /// rewards as next epoch's baselines. Returns the surrogate loss value.
    pub fn update(&mut self, rewards: &[f64]) -> Result<f64> {
        let transitions = self.buffer.drain();
        if transitions.len() != rewards.len() {
            return Err(CoreError::Contract(format!(
                "{} buffered transitions against {} rewards",
                transitions.len(),
                rewards.len()
            )));
        }
        if transitions.is_empty() {
            return Ok(0.0);
        }
        let advantages: Vec<f64> = transitions
            .iter()
            .zip(rewards)
            .map(|(t, r)| r - self.baselines.baseline(&t.key))
            .collect();
        let mut tape = Tape::new();
        let (loss, b1, b2) =
            policy_surrogate(&mut tape, &self.node_policy, &self.struct_policy, &transitions, &advantages)?;
        let grads = tape.backward(loss)?;
        let mut node_params = self.node_policy.params_mut();
        for (p, v) in node_params.iter_mut().zip(&b1) {
            p.zero_grad();
            p.accumulate(&grads, *v);
        }
        self.node_opt.step(&mut node_params)?;
        if !b2.is_empty() {
            let mut struct_params = self.struct_policy.params_mut();
            for (p, v) in struct_params.iter_mut().zip(&b2) {
                p.zero_grad();
                p.accumulate(&grads, *v);
            }
            self.struct_opt.step(&mut struct_params)?;
        }
        for (t, r) in transitions.iter().zip(rewards) {
            self.baselines.record(t.key, *r);
        }
        self.updates += 1;
        Ok(tape.value(loss).item())
    }

    pub fn end_epoch(&mut self) {
        self.baselines.end_epoch();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reward_example() {
        // node 0 in the batch, node 1 its only training neighbor
        let idx = NeighborIndex::new(2, &[(0, 1)]);
        let r = compute_rewards(&[0.5, 1.0], &[0.5, 1.0], &[0], &idx, &[true, true], 0.5);
        assert_abs_diff_eq!(r[0], -2.0, epsilon = 1e-12);
        let r = compute_rewards(&[0.5, 1.0], &[0.5, 1.0], &[0], &idx, &[true, false], 0.5);
        assert_abs_diff_eq!(r[0], -1.0, epsilon = 1e-12);
        assert_eq!(compute_rewards(&[0.0; 2], &[0.0; 2], &[0, 1], &idx, &[true; 2], 0.3), vec![0.0, 0.0]);
    }

    #[test]
    fn heuristic_ties_go_to_first() {
        assert_eq!(heuristic_direction(&[0.1, 0.5, 0.9], &[0.9, 0.5, 0.1]), vec![0, 0, 1]);
    }

    #[test]
    fn baseline_defaults_to_previous_mean() {
        let mut b = BaselineStore::new();
        let k = |node| BaselineKey {
            view: 0,
            pair: (0, 1),
            node,
        };
        assert_eq!(b.baseline(&k(3)), 0.0);
        b.record(k(0), -1.0);
        b.record(k(1), -3.0);
        assert_eq!(b.baseline(&k(0)), 0.0);
        b.end_epoch();
        assert_eq!(b.baseline(&k(0)), -1.0);
        assert_eq!(b.baseline(&k(7)), -2.0);
    }

    #[test]
    fn update_rejects_misaligned_rewards() {
        let mut agent = HierarchicalAgent::new(2, POLICY_LR, 0);
        agent.buffer.push(Transition {
            key: BaselineKey {
                view: 0,
                pair: (0, 1),
                node: 0,
            },
            node_state: vec![0.0; 6],
            a1: 0,
            log_p1: -0.7,
            struct_state: None,
            a2: 1,
            log_p2: 0.0,
        });
        assert!(agent.update(&[1.0, 2.0]).is_err());
    }
}
