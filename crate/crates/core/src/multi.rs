//! Free-direction distillation among more than two networks sharing one agent.

use freekd_tensor::{Tape, Var};

use crate::agent::{compute_rewards, HierarchicalAgent};
use crate::error::{CoreError, Result};
use crate::freekd::{pair_exchange, train_node_ce, EpochStats, KdHyper, Member, StatsAccumulator, ViewContext};
use crate::gnn::cross_entropy_loss;
use crate::graph::Split;

/// Unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn cohort_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

/// One pass of pairwise exchanges over `batches`.
///
/// Per batch every pair exchanges knowledge in both directions; each model
/// then takes one step on the sum of its losses over all of its pairs. The
/// agent is rewarded per pair and updated once on the pooled transitions.
pub fn train_cohort_epoch(
    members: &mut [Member],
    ctx: &ViewContext<'_>,
    batches: &[Vec<usize>],
    hyper: &KdHyper,
    mut agent: Option<&mut HierarchicalAgent>,
) -> Result<EpochStats> {
    let k = members.len();
    if k < 2 {
        return Err(CoreError::Contract(format!("a cohort needs at least 2 models, got {k}")));
    }
    hyper.validate()?;
    let pairs = cohort_pairs(k);
    let labels = ctx.graph.labels();
    let train = ctx.graph.mask(Split::Train);
    let mut stats = StatsAccumulator::new(k);
    for batch in batches {
        let mut tape = Tape::new();
        let tokens = ctx.tokens.map(|t| tape.constant(t.clone())).transpose()?;
        let mut outs = Vec::with_capacity(k);
        for m in members.iter_mut() {
            outs.push(m.model.forward(&mut tape, ctx.view, tokens, true, true)?);
        }
        let mut ce = Vec::with_capacity(k);
        for out in &outs {
            ce.push(cross_entropy_loss(&mut tape, out.log_probs, labels, batch)?);
        }
        let ce_values: Vec<f64> = ce.iter().map(|&v| tape.value(v).item()).collect();
        stats.batch(&ce_values, batch.len());

        let mut losses: Vec<Option<Var>> = vec![None; k];
        for &(i, j) in &pairs {
            let ex = pair_exchange(
                &mut tape,
                &outs[i],
                &outs[j],
                [ce[i], ce[j]],
                ctx,
                batch,
                hyper,
                agent.as_deref_mut(),
                (i, j),
            )?;
            stats.exchange(&ex);
            for (slot, loss) in [(i, ex.loss_a), (j, ex.loss_b)] {
                losses[slot] = Some(match losses[slot] {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
        }
        let mut total = losses[0].expect("every model is in a pair");
        for l in &losses[1..] {
            total = tape.add(total, l.expect("every model is in a pair"))?;
        }
        let grads = tape.backward(total)?;
        for (m, out) in members.iter_mut().zip(&outs) {
            m.apply(&grads, out)?;
        }

        if let Some(agent) = agent.as_deref_mut() {
            let ce_after = members
                .iter_mut()
                .map(|m| Ok(train_node_ce(&m.model.predict(ctx.view, ctx.tokens)?.0, ctx.graph)))
                .collect::<Result<Vec<_>>>()?;
            let mut rewards = Vec::with_capacity(pairs.len() * batch.len());
            for &(i, j) in &pairs {
                rewards.extend(compute_rewards(&ce_after[i], &ce_after[j], batch, ctx.neighbors, train, hyper.gamma));
            }
            stats.rewards(&rewards);
            agent.update(&rewards)?;
        }
    }
    Ok(stats.finish(hyper.plan.uses_agent()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_order_is_lexicographic() {
        assert_eq!(cohort_pairs(2), vec![(0, 1)]);
        assert_eq!(cohort_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(cohort_pairs(4).len(), 6);
    }
}
