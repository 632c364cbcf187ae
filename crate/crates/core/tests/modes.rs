//! Relations between training modes that must hold exactly.

use freekd_core::agent::HierarchicalAgent;
use freekd_core::freekd::{
    pair_exchange, train_pair_epoch, DirectionMode, KdComponents, KdHyper, KdPlan, Member, NeighborhoodMode,
    StructureMode, ViewContext,
};
use freekd_core::gnn::{cross_entropy_loss, Architecture, GnnModel, GraphView};
use freekd_core::graph::{Graph, Split};
use freekd_core::multi::{cohort_pairs, train_cohort_epoch};
use freekd_core::synthetic::{sbm, SbmSpec};
use freekd_core::train::{run, Mode, ModelSpec, TrainConfig, TrainReport};
use freekd_tensor::{Optimizer, Tape};

fn toy(nodes: usize, seed: u64) -> Graph {
    sbm(&SbmSpec::small(nodes, seed)).unwrap().split_masks([0.6, 0.2, 0.2], seed).unwrap()
}

fn quick(mode: Mode, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.mode = mode;
    c.max_epochs = epochs;
    c.kd.batch_size = 16;
    c.prompt.views = 2;
    c.prompt.tokens = 4;
    c.prompt.token_percent = 20.0;
    c.prompt.cross_percent = 5.0;
    c
}

/// Everything but the wall time.
fn same_run(a: &TrainReport, b: &TrainReport) {
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.results, b.results);
    assert_eq!(a.initial_token_cosine, b.initial_token_cosine);
}

#[test]
fn runs_are_deterministic() {
    let g = toy(40, 2);
    let c = quick(Mode::Freekd, 4);
    let a = run(&g, &c, 7).unwrap();
    let b = run(&g, &c, 7).unwrap();
    same_run(&a.report, &b.report);
    let other = run(&g, &c, 8).unwrap();
    assert_ne!(a.report.epochs, other.report.epochs);
}

#[test]
fn two_model_cohort_matches_pair() {
    let g = toy(40, 3);
    for (pair, cohort) in [(Mode::Freekd, Mode::FreekdPp), (Mode::FreekdPrompt, Mode::FreekdPromptPp)] {
        let mut a = quick(pair, 4);
        a.models[1] = ModelSpec::new(Architecture::Sage);
        let mut b = a.clone();
        b.mode = cohort;
        let ra = run(&g, &a, 1).unwrap();
        let rb = run(&g, &b, 1).unwrap();
        same_run(&ra.report, &rb.report);
        for (x, y) in ra.models.iter().zip(&rb.models) {
            assert_eq!(x.values(), y.values());
        }
    }
}

#[test]
fn three_model_cohort_exchanges_every_pair() {
    let g = toy(40, 4);
    let mut c = quick(Mode::FreekdPp, 3);
    c.models.push(ModelSpec::new(Architecture::Gat));
    let out = run(&g, &c, 0).unwrap();
    assert_eq!(out.report.results.len(), 3);
    for e in &out.report.epochs {
        for v in &e.views {
            assert!(v.batches > 1);
            assert_eq!(v.exchanges, 3 * v.batches);
        }
    }
}

fn no_dropout(arch: Architecture) -> ModelSpec {
    let mut s = ModelSpec::new(arch);
    s.dropout = 0.0;
    s.attention_dropout = 0.0;
    s
}

/// With forced two-way exchanges and no dropout, the cohort's KD totals on
/// a single batch equal the sum of the three pairs run on their own.
#[test]
fn cohort_totals_are_sums_over_pairs() {
    let g = toy(30, 5);
    let view = GraphView::new(&g);
    let neighbors = g.neighbor_index();
    let ctx = ViewContext {
        graph: &g,
        view: &view,
        neighbors: &neighbors,
        view_id: 0,
        tokens: None,
    };
    let specs = [Architecture::Gcn, Architecture::Sage, Architecture::Gat].map(no_dropout);
    let members: Vec<Member> = specs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let m = GnnModel::new(s.gnn_config(k as u64), g.feature_dim(), g.num_classes()).unwrap();
            Member::new(m, Optimizer::adam(0.01, 0.0))
        })
        .collect();
    let hyper = KdHyper {
        plan: KdPlan {
            direction: DirectionMode::Both,
            structure: StructureMode::All,
            neighborhoods: NeighborhoodMode::AgentSelected,
        },
        ..KdHyper::default()
    };
    let batch = g.nodes_in(Split::Train);

    let mut expected = KdComponents::default();
    let mut pair_members = members.clone();
    for (i, j) in cohort_pairs(3) {
        let mut tape = Tape::new();
        let oi = pair_members[i].model.forward(&mut tape, &view, None, true, true).unwrap();
        let oj = pair_members[j].model.forward(&mut tape, &view, None, true, true).unwrap();
        let ci = cross_entropy_loss(&mut tape, oi.log_probs, g.labels(), &batch).unwrap();
        let cj = cross_entropy_loss(&mut tape, oj.log_probs, g.labels(), &batch).unwrap();
        let ex = pair_exchange(&mut tape, &oi, &oj, [ci, cj], &ctx, &batch, &hyper, None, (i, j)).unwrap();
        expected.add(&ex.components);
    }
    let mut cohort = members;
    let stats = train_cohort_epoch(&mut cohort, &ctx, std::slice::from_ref(&batch), &hyper, None).unwrap();
    assert_eq!(stats.exchanges, 3);
    for (got, want) in [
        (stats.kd.node_a, expected.node_a),
        (stats.kd.node_b, expected.node_b),
        (stats.kd.struct_a, expected.struct_a),
        (stats.kd.struct_b, expected.struct_b),
    ] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!(expected.struct_a > 0.0);
}

#[test]
fn zero_kd_weights_match_independent_training() {
    let g = toy(40, 6);
    let mut kd = quick(Mode::Freekd, 5);
    kd.kd.mu = 0.0;
    kd.kd.rho = 0.0;
    let mut single = kd.clone();
    single.mode = Mode::Single;
    let a = run(&g, &kd, 3).unwrap();
    let b = run(&g, &single, 3).unwrap();
    for (x, y) in a.models.iter().zip(&b.models) {
        assert_eq!(x.values(), y.values());
    }
    assert_eq!(a.report.results, b.report.results);
}

#[test]
fn prompt_mode_without_views_matches_freekd() {
    let g = toy(40, 7);
    let mut prompt = quick(Mode::FreekdPrompt, 4);
    prompt.prompt.views = 0;
    let mut plain = prompt.clone();
    plain.mode = Mode::Freekd;
    let a = run(&g, &prompt, 2).unwrap();
    let b = run(&g, &plain, 2).unwrap();
    for (x, y) in a.models.iter().zip(&b.models) {
        assert_eq!(x.values(), y.values());
    }
    assert_eq!(a.report.results, b.report.results);
}

#[test]
fn training_loss_falls_on_small_graph() {
    let g = toy(20, 8);
    for mode in [Mode::Single, Mode::Freekd] {
        let out = run(&g, &quick(mode, 30), 0).unwrap();
        let first = &out.report.epochs[0].train_ce;
        let last = &out.report.epochs.last().unwrap().train_ce;
        for (f, l) in first.iter().zip(last) {
            assert!(l < f, "{mode}: train CE {f} -> {l}");
        }
    }
}

#[test]
fn patience_stops_training() {
    let g = toy(30, 9);
    let mut c = quick(Mode::Single, 50);
    c.models.truncate(1);
    c.models[0].lr = Some(0.0);
    c.patience = 3;
    let out = run(&g, &c, 0).unwrap();
    // nothing improves after the first epoch
    assert_eq!(out.report.epochs.len(), 4);
    assert_eq!(out.report.results[0].best_epoch, 0);
}

#[test]
fn agent_buffer_is_drained_after_each_batch() {
    let g = toy(30, 10);
    let view = GraphView::new(&g);
    let neighbors = g.neighbor_index();
    let ctx = ViewContext {
        graph: &g,
        view: &view,
        neighbors: &neighbors,
        view_id: 0,
        tokens: None,
    };
    let make = |seed| {
        let m = GnnModel::new(ModelSpec::new(Architecture::Gcn).gnn_config(seed), g.feature_dim(), g.num_classes()).unwrap();
        Member::new(m, Optimizer::adam(0.01, 0.0))
    };
    let (mut a, mut b) = (make(0), make(1));
    let mut agent = HierarchicalAgent::new(g.num_classes(), 0.01, 0);
    let train = g.nodes_in(Split::Train);
    let batches: Vec<Vec<usize>> = train.chunks(5).map(<[usize]>::to_vec).collect();
    let stats = train_pair_epoch(&mut a, &mut b, &ctx, &batches, &KdHyper::default(), Some(&mut agent)).unwrap();
    assert!(agent.buffer.is_empty());
    assert_eq!(agent.updates(), batches.len() as u64);
    assert_eq!(stats.exchanges, batches.len());
    let frac = stats.action0_fraction.unwrap();
    assert!((0.0..=1.0).contains(&frac));
}
