//! Training runs: modes, schedules, evaluation and early stopping.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use freekd_tensor::{Matrix, Optimizer, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{HierarchicalAgent, POLICY_LR};
use crate::error::{CoreError, Result};
use crate::freekd::{
    train_pair_epoch, DirectionMode, EpochStats, KdComponents, KdHyper, KdPlan, Member, NeighborhoodMode,
    StructureMode, ViewContext,
};
use crate::gnn::{cross_entropy, cross_entropy_loss, micro_f1, Architecture, GnnConfig, GnnModel, GraphView};
use crate::graph::{Graph, NeighborIndex, Split};
use crate::multi::train_cohort_epoch;
use crate::prompt::{PromptConfig, PromptSet, PromptStepReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Single,
    Freekd,
    FreekdNodeOnly,
    FreekdWoJudge,
    FreekdLoss,
    FreekdAllNeighbors,
    FreekdAllStructures,
    FreekdPrompt,
    FreekdPp,
    FreekdPromptPp,
    AugDropedge,
    AugDropnode,
}

impl Mode {
    pub const ALL: [Mode; 12] = [
        Mode::Single,
        Mode::Freekd,
        Mode::FreekdNodeOnly,
        Mode::FreekdWoJudge,
        Mode::FreekdLoss,
        Mode::FreekdAllNeighbors,
        Mode::FreekdAllStructures,
        Mode::FreekdPrompt,
        Mode::FreekdPp,
        Mode::FreekdPromptPp,
        Mode::AugDropedge,
        Mode::AugDropnode,
    ];

    /// The modes compared by the ablation table, in table order.
    pub const ABLATION: [Mode; 7] = [
        Mode::Single,
        Mode::FreekdWoJudge,
        Mode::FreekdLoss,
        Mode::FreekdNodeOnly,
        Mode::FreekdAllNeighbors,
        Mode::FreekdAllStructures,
        Mode::Freekd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Freekd => "freekd",
            Mode::FreekdNodeOnly => "freekd-node-only",
            Mode::FreekdWoJudge => "freekd-wo-judge",
            Mode::FreekdLoss => "freekd-loss",
            Mode::FreekdAllNeighbors => "freekd-all-neighbors",
            Mode::FreekdAllStructures => "freekd-all-structures",
            Mode::FreekdPrompt => "freekd-prompt",
            Mode::FreekdPp => "freekd-pp",
            Mode::FreekdPromptPp => "freekd-prompt-pp",
            Mode::AugDropedge => "aug-dropedge",
            Mode::AugDropnode => "aug-dropnode",
        }
    }

    /// The distillation plan, or `None` for independent training.
    pub fn plan(self) -> Option<KdPlan> {
        let agent = |structure, neighborhoods| KdPlan {
            direction: DirectionMode::Agent,
            structure,
            neighborhoods,
        };
        Some(match self {
            Mode::Single => return None,
            Mode::FreekdNodeOnly => agent(StructureMode::Off, NeighborhoodMode::AgentSelected),
            Mode::FreekdWoJudge => KdPlan {
                direction: DirectionMode::Both,
                structure: StructureMode::All,
                neighborhoods: NeighborhoodMode::AgentSelected,
            },
            Mode::FreekdLoss => KdPlan {
                direction: DirectionMode::LossHeuristic,
                structure: StructureMode::All,
                neighborhoods: NeighborhoodMode::AgentSelected,
            },
            Mode::FreekdAllNeighbors => agent(StructureMode::Agent, NeighborhoodMode::Full),
            Mode::FreekdAllStructures => agent(StructureMode::All, NeighborhoodMode::AgentSelected),
            _ => KdPlan::FREEKD,
        })
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, Mode::FreekdPrompt | Mode::FreekdPromptPp)
    }

    pub fn is_cohort(self) -> bool {
        matches!(self, Mode::FreekdPp | Mode::FreekdPromptPp)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Contract(format!("unknown mode `{s}`")))
    }
}

/// Architecture and layer sizes of one network; seeds are derived per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Overrides the architecture's default learning rate.
    pub lr: Option<f64>,
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        let d = GnnConfig::new(architecture, 0);
        ModelSpec {
            architecture,
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            dropout: d.dropout,
            attention_dropout: d.attention_dropout,
            lr: None,
        }
    }

    pub fn gnn_config(&self, seed: u64) -> GnnConfig {
        GnnConfig {
            architecture: self.architecture,
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub models: Vec<ModelSpec>,
    pub kd: KdHyper,
    pub prompt: PromptConfig,
    /// Default learning rate of GCN and GraphSAGE models.
    pub lr_gcn: f64,
    pub lr_gat: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub policy_lr: f64,
    /// Edge or node drop rate of the augmentation modes.
    pub aug_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Freekd,
            models: vec![ModelSpec::new(Architecture::Gcn), ModelSpec::new(Architecture::Gcn)],
            kd: KdHyper::default(),
            prompt: PromptConfig::default(),
            lr_gcn: 0.01,
            lr_gat: 0.05,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            lr_decay_every: 100,
            max_epochs: 500,
            patience: 150,
            policy_lr: POLICY_LR,
            aug_rate: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.models.len();
        match self.mode {
            Mode::Single if k == 0 => return Err(CoreError::Contract("no models configured".into())),
            Mode::Single => {}
            m if m.is_cohort() && k < 2 => {
                return Err(CoreError::Contract(format!("mode {m} needs at least 2 models, got {k}")))
            }
            m if !m.is_cohort() && k != 2 => {
                return Err(CoreError::Contract(format!("mode {m} needs exactly 2 models, got {k}")))
            }
            _ => {}
        }
        for spec in &self.models {
            spec.gnn_config(0).validate()?;
        }
        if let Some(plan) = self.mode.plan() {
            KdHyper { plan, ..self.kd.clone() }.validate()?;
        }
        if self.mode.uses_prompts() {
            self.prompt.validate()?;
        }
        if self.lr_decay_every == 0 || self.max_epochs == 0 {
            return Err(CoreError::Contract("lr_decay_every and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.aug_rate) {
            return Err(CoreError::Contract(format!("aug_rate {} outside [0, 1)", self.aug_rate)));
        }
        Ok(())
    }

    fn base_lr(&self, spec: &ModelSpec) -> f64 {
        spec.lr.unwrap_or(match spec.architecture {
            Architecture::Gat => self.lr_gat,
            _ => self.lr_gcn,
        })
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, spec: &ModelSpec, epoch: usize) -> f64 {
        self.base_lr(spec) * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Seed of a run component; distinct streams for models, agent, batching,
/// prompts and augmentation.
pub fn derive_seed(run_seed: u64, stream: u64) -> u64 {
    let mut z = run_seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_AGENT: u64 = 1000;
const STREAM_BATCHES: u64 = 1001;
const STREAM_PROMPTS: u64 = 1002;
const STREAM_AUGMENT: u64 = 1003;

/// Shuffles `nodes` and cuts them into batches of `size`; the last one may be short.
pub fn make_batches(nodes: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = nodes.to_vec();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One pass of plain supervised training for each member.
pub fn train_independent_epoch(members: &mut [Member], ctx: &ViewContext<'_>, batches: &[Vec<usize>]) -> Result<EpochStats> {
    let labels = ctx.graph.labels();
    let mut ce_sum = vec![0.0; members.len()];
    let mut weight = 0.0;
    for batch in batches {
        let mut tape = Tape::new();
        let tokens = ctx.tokens.map(|t| tape.constant(t.clone())).transpose()?;
        let mut outs = Vec::with_capacity(members.len());
        let mut total = None;
        for (k, m) in members.iter_mut().enumerate() {
            let out = m.model.forward(&mut tape, ctx.view, tokens, true, true)?;
            let ce = cross_entropy_loss(&mut tape, out.log_probs, labels, batch)?;
            ce_sum[k] += tape.value(ce).item() * batch.len() as f64;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
            outs.push(out);
        }
        weight += batch.len() as f64;
        let grads = tape.backward(total.expect("at least one model"))?;
        for (m, out) in members.iter_mut().zip(&outs) {
            m.apply(&grads, out)?;
        }
    }
    Ok(EpochStats {
        train_ce: ce_sum.iter().map(|s| s / weight.max(1.0)).collect(),
        batches: batches.len(),
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view: usize,
    pub kd: KdComponents,
    pub mean_reward: Option<f64>,
    pub action0_fraction: Option<f64>,
    pub exchanges: usize,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Vec<f64>,
    pub train_ce: Vec<f64>,
    pub val_ce: Vec<f64>,
    pub val_f1: Vec<f64>,
    pub test_f1: Vec<f64>,
    /// KD components summed over views.
    pub kd: KdComponents,
    pub mean_reward: Option<f64>,
    pub action0_fraction: Option<f64>,
    pub views: Vec<ViewRecord>,
    pub prompt_steps: Vec<PromptStepReport>,
    /// Mean cosine between same-index tokens of distinct prompt graphs, after the epoch.
    pub token_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub architecture: Architecture,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Test micro-F1 of the best-validation parameters.
    pub test_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub results: Vec<ModelResult>,
    /// Token cosine before any prompt update.
    pub initial_token_cosine: Option<f64>,
    pub wall_time_secs: f64,
}

/// A finished run: its report and the best-validation models.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: TrainReport,
    pub models: Vec<GnnModel>,
    pub prompts: Option<PromptSet>,
}

struct ViewInput {
    view: GraphView,
    neighbors: NeighborIndex,
    tokens: Option<Matrix>,
}

/// Evaluation on the original graph: `(val CE, val F1, test F1)` per model.
fn evaluate(models: &mut [Member], view: &GraphView, graph: &Graph) -> Result<Vec<(f64, f64, f64)>> {
    let val = graph.nodes_in(Split::Val);
    let test = graph.nodes_in(Split::Test);
    models
        .iter_mut()
        .map(|m| {
            let (probs, _) = m.model.predict(view, None)?;
            let preds = probs.argmax_rows();
            let val_ce = if val.is_empty() { 0.0 } else { cross_entropy(&probs, graph.labels(), &val)?.0 };
            let val_f1 = if val.is_empty() { 0.0 } else { micro_f1(&preds, graph.labels(), &val)? };
            let test_f1 = if test.is_empty() { 0.0 } else { micro_f1(&preds, graph.labels(), &test)? };
            Ok((val_ce, val_f1, test_f1))
        })
        .collect()
}

/// Trains per `config` on `graph`, which must carry split masks.
pub fn run(graph: &Graph, config: &TrainConfig, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let train_nodes = graph.nodes_in(Split::Train);
    if train_nodes.is_empty() {
        return Err(CoreError::Validation("the training split is empty".into()));
    }
    let start = Instant::now();
    let mut members = config
        .models
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let model = GnnModel::new(spec.gnn_config(derive_seed(seed, k as u64)), graph.feature_dim(), graph.num_classes())?;
            Ok(Member::new(model, Optimizer::adam(config.base_lr(spec), config.weight_decay)))
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = config.mode.plan();
    let hyper = plan.map(|plan| KdHyper { plan, ..config.kd.clone() });
    let mut agent = match plan {
        Some(p) if p.uses_agent() => Some(HierarchicalAgent::new(
            graph.num_classes(),
            config.policy_lr,
            derive_seed(seed, STREAM_AGENT),
        )),
        _ => None,
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BATCHES));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_AUGMENT));
    let mut prompts = if config.mode.uses_prompts() {
        let dim = config.models[0].hidden;
        Some(PromptSet::new(config.prompt.clone(), graph, dim, derive_seed(seed, STREAM_PROMPTS))?)
    } else {
        None
    };
    let initial_token_cosine = prompts.as_ref().map(PromptSet::mean_token_cosine);

    let base_view = match &prompts {
        Some(p) => GraphView::with_feature_operator(p.feature_index().operator().clone(), graph.num_nodes(), graph.edges()),
        None => GraphView::new(graph),
    };
    let base_neighbors = graph.neighbor_index();

    let mut epochs = Vec::new();
    let mut best: Vec<Option<(usize, f64, f64, Vec<Matrix>)>> = vec![None; members.len()];
    let mut last_improvement = 0usize;
    for epoch in 0..config.max_epochs {
        let lr: Vec<f64> = config.models.iter().map(|s| config.lr_at(s, epoch)).collect();
        for (m, &r) in members.iter_mut().zip(&lr) {
            m.optimizer.set_lr(r);
        }

        let mut extra = Vec::new();
        if let Some(p) = &prompts {
            for (aug, prompt) in p.compose_all(graph)?.into_iter().zip(&p.prompts) {
                extra.push(ViewInput {
                    view: aug.view(p.feature_index().operator().clone()),
                    neighbors: aug.neighbor_index(),
                    tokens: Some(prompt.tokens.value.clone()),
                });
            }
        }
        if matches!(config.mode, Mode::AugDropedge | Mode::AugDropnode) {
            for _ in 0..config.prompt.views {
                let s = rand::Rng::random(&mut aug_rng);
                let g = if config.mode == Mode::AugDropedge {
                    graph.drop_edge(config.aug_rate, s)?
                } else {
                    graph.drop_node(config.aug_rate, s)?
                };
                extra.push(ViewInput {
                    view: GraphView::new(&g),
                    neighbors: g.neighbor_index(),
                    tokens: None,
                });
            }
        }

        let mut views = Vec::with_capacity(1 + extra.len());
        let mut train_ce = vec![0.0; members.len()];
        let mut kd = KdComponents::default();
        let (mut reward_sum, mut reward_n, mut a0_sum, mut a0_n) = (0.0, 0usize, 0.0, 0usize);
        let inputs = std::iter::once((&base_view, &base_neighbors, None)).chain(
            extra
                .iter()
                .map(|v| (&v.view, &v.neighbors, v.tokens.as_ref())),
        );
        for (view_id, (view, neighbors, tokens)) in inputs.enumerate() {
            let ctx = ViewContext {
                graph,
                view,
                neighbors,
                view_id,
                tokens,
            };
            let batches = make_batches(&train_nodes, config.kd.batch_size, &mut batch_rng);
            let stats = match &hyper {
                None => train_independent_epoch(&mut members, &ctx, &batches)?,
                Some(h) if config.mode.is_cohort() => train_cohort_epoch(&mut members, &ctx, &batches, h, agent.as_mut())?,
                Some(h) => {
                    let (a, b) = members.split_at_mut(1);
                    train_pair_epoch(&mut a[0], &mut b[0], &ctx, &batches, h, agent.as_mut())?
                }
            };
            for (t, c) in train_ce.iter_mut().zip(&stats.train_ce) {
                *t += c;
            }
            kd.add(&stats.kd);
            if let Some(r) = stats.mean_reward {
                reward_sum += r * stats.batches as f64;
                reward_n += stats.batches;
            }
            if let Some(a) = stats.action0_fraction {
                a0_sum += a;
                a0_n += 1;
            }
            views.push(ViewRecord {
                view: view_id,
                kd: stats.kd,
                mean_reward: stats.mean_reward,
                action0_fraction: stats.action0_fraction,
                exchanges: stats.exchanges,
                batches: stats.batches,
            });
        }
        let view_count = views.len() as f64;
        train_ce.iter_mut().for_each(|t| *t /= view_count);

        let mut prompt_steps = Vec::new();
        if let Some(p) = prompts.as_mut() {
            for _ in 0..p.prompts.len() {
                prompt_steps.push(p.step(&mut members[0].model, graph)?);
            }
        }
        if let Some(a) = agent.as_mut() {
            a.end_epoch();
        }

        let eval = evaluate(&mut members, &base_view, graph)?;
        for (k, &(_, val_f1, test_f1)) in eval.iter().enumerate() {
            let improved = best[k].as_ref().is_none_or(|b| val_f1 > b.1);
            if improved {
                best[k] = Some((epoch, val_f1, test_f1, members[k].model.values()));
                last_improvement = epoch;
            }
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_ce,
            val_ce: eval.iter().map(|e| e.0).collect(),
            val_f1: eval.iter().map(|e| e.1).collect(),
            test_f1: eval.iter().map(|e| e.2).collect(),
            kd,
            mean_reward: (reward_n > 0).then(|| reward_sum / reward_n as f64),
            action0_fraction: (a0_n > 0).then(|| a0_sum / a0_n as f64),
            views,
            prompt_steps,
            token_cosine: prompts.as_ref().map(PromptSet::mean_token_cosine),
        });
        if epoch - last_improvement >= config.patience {
            break;
        }
    }

    let mut results = Vec::with_capacity(members.len());
    let mut models = Vec::with_capacity(members.len());
    for (m, b) in members.into_iter().zip(best) {
        let (best_epoch, best_val_f1, test_f1, values) = b.expect("at least one epoch ran");
        let mut model = m.model;
        model.load_values(&values);
        results.push(ModelResult {
            architecture: model.config().architecture,
            best_epoch,
            best_val_f1,
            test_f1,
        });
        models.push(model);
    }
    Ok(RunOutcome {
        report: TrainReport {
            mode: config.mode,
            seed,
            epochs,
            results,
            initial_token_cosine,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        models,
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("freekd-x".parse::<Mode>().is_err());
    }

    #[test]
    fn lr_schedule_steps_every_hundred_epochs() {
        let c = TrainConfig::default();
        let gcn = ModelSpec::new(Architecture::Gcn);
        let gat = ModelSpec::new(Architecture::Gat);
        assert_eq!(c.lr_at(&gcn, 0), 0.01);
        assert_eq!(c.lr_at(&gcn, 99), 0.01);
        assert!((c.lr_at(&gcn, 100) - 0.001).abs() < 1e-15);
        assert_eq!(c.lr_at(&gat, 0), 0.05);
    }

    #[test]
    fn model_count_is_checked() {
        let mut c = TrainConfig::default();
        c.models.pop();
        assert!(c.validate().is_err());
        c.mode = Mode::Single;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn batches_cover_nodes_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes: Vec<usize> = (0..1100).collect();
        let b = make_batches(&nodes, 512, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![512, 512, 76]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, nodes);
    }
}
