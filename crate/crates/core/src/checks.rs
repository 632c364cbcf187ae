//! Finite-difference gradient suite over every differentiable piece of the
//! training objective, on small seeded instances.

use std::rc::Rc;

use freekd_tensor::{compare_with_differences, GradCheck, Matrix, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{policy_surrogate, BaselineKey, PolicyNet, Transition};
use crate::error::Result;
use crate::freekd::{node_kd_loss, pair_exchange, struct_kd_loss, KdHyper, KdPlan, StructTerm, ViewContext};
use crate::gnn::{cross_entropy_loss, Architecture, GnnConfig, GnnModel, GraphView};
use crate::graph::Graph;
use crate::prompt::{diversity_loss, info_loss};

/// Relative-error bound every check must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;

/// Inputs, their analytic gradients and a way to re-evaluate the loss.
pub struct Prepared {
    pub inputs: Vec<Matrix>,
    pub analytic: Vec<Matrix>,
    eval: Box<dyn Fn(&[Matrix]) -> Result<f64>>,
}

pub struct GradientCase {
    pub name: &'static str,
    prepare: fn() -> Result<Prepared>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub check: GradCheck,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.check.passes(GRAD_TOLERANCE)
    }
}

impl GradientCase {
    /// Runs the comparison; `corrupt` is added to the first analytic entry.
    pub fn run(&self, corrupt: f64) -> Result<CaseResult> {
        let mut p = (self.prepare)()?;
        if let Some(first) = p.analytic.first_mut().and_then(|m| m.data_mut().first_mut()) {
            *first += corrupt;
        }
        let eval = &p.eval;
        let check = compare_with_differences(&p.inputs, &p.analytic, STEP, |v| eval(v))?;
        Ok(CaseResult { name: self.name, check })
    }
}

/// Builds a case from a tape function of the inputs.
fn tape_case(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Result<Prepared> {
    let f = Rc::new(f);
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|m| tape.param(m.clone())).collect::<freekd_tensor::Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic = vars
        .iter()
        .zip(&inputs)
        .map(|(v, m)| grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    let g = f.clone();
    Ok(Prepared {
        inputs,
        analytic,
        eval: Box::new(move |values| {
            let mut tape = Tape::new();
            let vars = values.iter().map(|m| tape.constant(m.clone())).collect::<freekd_tensor::Result<Vec<_>>>()?;
            let out = g(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        }),
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// A seeded 6-node, 2-class graph with every node labeled.
pub fn tiny_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = random_matrix(&mut rng, 6, 4, 1.0);
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)];
    let labels = (0..6).map(|i| Some(i % 2)).collect();
    let train = vec![true; 6];
    Graph::new(features, &edges, labels, 2, [train, vec![false; 6], vec![false; 6]]).expect("valid tiny graph")
}

fn tiny_model(architecture: Architecture) -> Result<GnnModel> {
    let mut config = GnnConfig::new(architecture, 7);
    config.hidden = 4;
    config.heads = 2;
    config.dropout = 0.0;
    config.attention_dropout = 0.0;
    GnnModel::new(config, 4, 2)
}

fn model_case(architecture: Architecture, with_tokens: bool) -> Result<Prepared> {
    let graph = tiny_graph(3);
    let mut model = tiny_model(architecture)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens = random_matrix(&mut rng, 2, 4, 1.0);
    let edges: Vec<(usize, usize)> = graph.edges().iter().copied().chain([(0, 6), (3, 7), (6, 7)]).collect();
    let view = if with_tokens {
        GraphView::with_extra_nodes(graph.features(), 8, &edges)
    } else {
        GraphView::new(&graph)
    };
    let nodes: Vec<usize> = (0..6).collect();
    let labels = graph.labels().to_vec();

    let loss = move |model: &mut GnnModel, tape: &mut Tape, tokens: Option<Var>, trainable: bool| -> Result<(Var, crate::gnn::GnnOutput)> {
        let out = model.forward(tape, &view, tokens, true, trainable)?;
        let ce = cross_entropy_loss(tape, out.log_probs, &labels, &nodes)?;
        // a term on the embeddings so hidden layers are checked through two paths
        let e = tape.mul(out.embeddings, out.embeddings)?;
        let e = tape.sum(e)?;
        let e = tape.scale(e, 0.01)?;
        Ok((tape.add(ce, e)?, out))
    };

    let mut tape = Tape::new();
    let tok = if with_tokens { Some(tape.param(tokens.clone())?) } else { None };
    let (out_loss, out) = loss(&mut model, &mut tape, tok, true)?;
    let grads = tape.backward(out_loss)?;
    model.zero_grad();
    model.accumulate_grads(&grads, &out);
    let mut inputs = model.values();
    let mut analytic: Vec<Matrix> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
    if let Some(t) = tok {
        inputs.push(tokens.clone());
        analytic.push(grads.get(t).cloned().unwrap_or_else(|| Matrix::zeros(2, 4)));
    }
    let count = model.values().len();
    let model = std::cell::RefCell::new(model);
    Ok(Prepared {
        inputs,
        analytic,
        eval: Box::new(move |values| {
            let mut m = model.borrow_mut();
            m.load_values(&values[..count]);
            let mut tape = Tape::new();
            let tok = if with_tokens { Some(tape.constant(values[count].clone())?) } else { None };
            let (l, _) = loss(&mut m, &mut tape, tok, false)?;
            Ok(tape.value(l).item())
        }),
    })
}

fn policy_case(structure: bool) -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = if structure { 8 } else { 6 };
    let policy = PolicyNet::new(dim, &mut rng);
    let other = PolicyNet::new(if structure { 6 } else { 8 }, &mut rng);
    let transitions: Vec<Transition> = (0..3)
        .map(|k| {
            let node_state: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let struct_state: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            Transition {
                key: BaselineKey {
                    view: 0,
                    pair: (0, 1),
                    node: k,
                },
                node_state,
                a1: (k % 2) as u8,
                log_p1: 0.0,
                struct_state: Some(struct_state),
                a2: ((k + 1) % 2) as u8,
                log_p2: 0.0,
            }
        })
        .collect();
    let advantages = vec![0.7, -1.3, 0.4];
    let inputs = policy.values();
    let eval_loss = move |values: &[Matrix], tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
        let mut p = policy.clone();
        for (param, v) in p.params_mut().into_iter().zip(values) {
            param.value = v.clone();
        }
        let (node, structp) = if structure { (&other, &p) } else { (&p, &other) };
        let (loss, b1, b2) = policy_surrogate(tape, node, structp, &transitions, &advantages)?;
        Ok((loss, if structure { b2 } else { b1 }))
    };
    let eval_loss = Rc::new(eval_loss);
    let mut tape = Tape::new();
    let (loss, bound) = eval_loss(&inputs, &mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic = bound
        .iter()
        .zip(&inputs)
        .map(|(v, m)| grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    let e = eval_loss.clone();
    Ok(Prepared {
        inputs,
        analytic,
        eval: Box::new(move |values| {
            let mut tape = Tape::new();
            let (loss, _) = e(values, &mut tape)?;
            Ok(tape.value(loss).item())
        }),
    })
}

fn pair_case() -> Result<Prepared> {
    let graph = tiny_graph(9);
    let view = GraphView::new(&graph);
    let neighbors = graph.neighbor_index();
    let student = tiny_model(Architecture::Gcn)?;
    let mut cfg = student.config().clone();
    cfg.seed = 8;
    cfg.architecture = Architecture::Sage;
    let teacher = GnnModel::new(cfg, 4, 2)?;
    let batch: Vec<usize> = (0..6).collect();
    let hyper = KdHyper {
        plan: KdPlan {
            direction: crate::freekd::DirectionMode::Both,
            structure: crate::freekd::StructureMode::All,
            neighborhoods: crate::freekd::NeighborhoodMode::AgentSelected,
        },
        ..KdHyper::default()
    };
    let models = std::cell::RefCell::new((student, teacher));
    // loss of the first network only; the second network supplies constant targets
    let eval = move |values: Option<&[Matrix]>| -> Result<(f64, Vec<Matrix>)> {
        let mut pair = models.borrow_mut();
        let (a, b) = &mut *pair;
        if let Some(v) = values {
            a.load_values(v);
        }
        let ctx = ViewContext {
            graph: &graph,
            view: &view,
            neighbors: &neighbors,
            view_id: 0,
            tokens: None,
        };
        let mut tape = Tape::new();
        let out_a = a.forward(&mut tape, &view, None, false, true)?;
        let out_b = b.forward(&mut tape, &view, None, false, false)?;
        let ce_a = cross_entropy_loss(&mut tape, out_a.log_probs, graph.labels(), &batch)?;
        let ce_b = cross_entropy_loss(&mut tape, out_b.log_probs, graph.labels(), &batch)?;
        let ex = pair_exchange(&mut tape, &out_a, &out_b, [ce_a, ce_b], &ctx, &batch, &hyper, None, (0, 1))?;
        let value = tape.value(ex.loss_a).item();
        let grads = tape.backward(ex.loss_a)?;
        a.zero_grad();
        a.accumulate_grads(&grads, &out_a);
        let g: Vec<Matrix> = a.params_mut().iter().map(|p| p.grad.clone()).collect();
        Ok((value, g))
    };
    let eval = Rc::new(eval);
    let (_, analytic) = eval(None)?;
    let inputs = tiny_model(Architecture::Gcn)?.values();
    let e = eval.clone();
    Ok(Prepared {
        inputs,
        analytic,
        eval: Box::new(move |values| Ok(e(Some(values))?.0)),
    })
}

fn ce_case() -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random_matrix(&mut rng, 5, 3, 2.0);
    let labels = vec![Some(0), Some(2), Some(1), None, Some(2)];
    tape_case(vec![logits], move |tape, v| {
        let lp = tape.log_softmax_rows(v[0])?;
        cross_entropy_loss(tape, lp, &labels, &[0, 1, 2, 4])
    })
}

fn node_kd_case() -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = random_matrix(&mut rng, 5, 3, 2.0);
    let teacher = random_matrix(&mut rng, 5, 3, 2.0).map(f64::exp);
    let teacher = normalize_rows(teacher);
    tape_case(vec![logits], move |tape, v| {
        let lp = tape.log_softmax_rows(v[0])?;
        Ok(node_kd_loss(tape, &teacher, lp, &[0, 2, 3, 4], &[0.25, 0.25, 0.0, 0.5])?.expect("nonzero weights"))
    })
}

fn normalize_rows(mut m: Matrix) -> Matrix {
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    m
}

fn struct_kd_case() -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let student = random_matrix(&mut rng, 6, 4, 1.0);
    let teacher = random_matrix(&mut rng, 6, 4, 1.0);
    tape_case(vec![student], move |tape, v| {
        let sets: [&[usize]; 3] = [&[1, 2, 5], &[0, 3], &[4]];
        let terms = [
            StructTerm {
                center: 0,
                set: sets[0],
                weight: 0.5,
            },
            StructTerm {
                center: 4,
                set: sets[1],
                weight: 1.0,
            },
            StructTerm {
                center: 2,
                set: sets[2],
                weight: 1.0,
            },
        ];
        Ok(struct_kd_loss(tape, &teacher, v[0], &terms)?.expect("two eligible terms"))
    })
}

fn info_case() -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos = random_matrix(&mut rng, 5, 3, 1.0);
    let neg = random_matrix(&mut rng, 5, 3, 1.0);
    let w = random_matrix(&mut rng, 3, 3, 1.0);
    let global = vec![0.3, -0.2, 0.5];
    let local = random_matrix(&mut rng, 5, 3, 1.0);
    tape_case(vec![pos, neg, w], move |tape, v| info_loss(tape, v[0], v[1], &global, &local, v[2]))
}

fn diversity_case() -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inputs: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 2, 4, 1.0)).collect();
    for _ in 0..3 {
        inputs.push(random_matrix(&mut rng, 5, 3, 1.0));
    }
    tape_case(inputs, |tape, v| Ok(diversity_loss(tape, &v[..3], &v[3..], false)?.expect("three views")))
}

/// The full suite, in report order.
pub fn gradient_suite() -> Vec<GradientCase> {
    vec![
        GradientCase {
            name: "gcn-layers",
            prepare: || model_case(Architecture::Gcn, false),
        },
        GradientCase {
            name: "sage-layers",
            prepare: || model_case(Architecture::Sage, false),
        },
        GradientCase {
            name: "gat-layers",
            prepare: || model_case(Architecture::Gat, false),
        },
        GradientCase {
            name: "gcn-prompt-tokens",
            prepare: || model_case(Architecture::Gcn, true),
        },
        GradientCase {
            name: "sage-prompt-tokens",
            prepare: || model_case(Architecture::Sage, true),
        },
        GradientCase {
            name: "gat-prompt-tokens",
            prepare: || model_case(Architecture::Gat, true),
        },
        GradientCase {
            name: "cross-entropy",
            prepare: ce_case,
        },
        GradientCase {
            name: "node-kd",
            prepare: node_kd_case,
        },
        GradientCase {
            name: "structure-kd",
            prepare: struct_kd_case,
        },
        GradientCase {
            name: "pair-loss",
            prepare: pair_case,
        },
        GradientCase {
            name: "info-loss",
            prepare: info_case,
        },
        GradientCase {
            name: "diversity-loss",
            prepare: diversity_case,
        },
        GradientCase {
            name: "node-policy-surrogate",
            prepare: || policy_case(false),
        },
        GradientCase {
            name: "structure-policy-surrogate",
            prepare: || policy_case(true),
        },
    ]
}

/// Runs every case; `corrupt` names a case whose analytic gradient is
/// deliberately perturbed.
pub fn run_gradient_suite(corrupt: Option<&str>) -> Result<Vec<CaseResult>> {
    gradient_suite()
        .iter()
        .map(|c| c.run(if corrupt == Some(c.name) { 1.0 } else { 0.0 }))
        .collect()
}
