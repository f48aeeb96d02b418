use super::presched::{hottest, split_costs, sweep};
use super::{DecisionTrace, LayerInputs, LayerPlan};
use crate::cost::{cpu_cost, Ticks};
use crate::error::Result;

/// Layer-by-layer baseline: picks the suffix minimising this layer's
/// completion time `max(T_C, T_G)` (fewest loads on ties), then fills the
/// I/O channel's idle time before the next gating with hot next-layer
/// prefetches.
pub fn greedy_layer_baseline(inputs: &LayerInputs) -> Result<LayerPlan> {
    inputs.validate()?;
    let p = &inputs.params;
    let cur = &inputs.cur;
    let n = cur.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0 as Ticks);
    for l in cur {
        prefix.push(prefix.last().unwrap() + cpu_cost(l.tokens, p));
    }
    let cost = |j: usize| {
        let t_g = if j == n { 0 } else { p.alpha + (n - j) as Ticks * p.t_io + p.t_g };
        prefix[j].max(t_g)
    };
    let mut best = n;
    for j in (0..n).rev() {
        if cost(j) < cost(best) {
            best = j;
        }
    }
    let loads = (n - best) as Ticks;
    let busy_until = p.alpha + loads * p.t_io;
    let window = (cost(best) + p.t_attn).saturating_sub(busy_until);
    let count = (window.div_ceil(p.t_io) as usize).min(inputs.next.len());
    let (t_g, t_c) = split_costs(cur, best, p);
    let trace = DecisionTrace {
        t_g,
        t_c,
        f_int: count,
        ops: 2 * n + 1 + count,
        ..Default::default()
    };
    Ok(LayerPlan::from_split(cur, best, hottest(&inputs.next, count), trace))
}

/// The prefetch-aware split with every prefetch suppressed, so comparing it
/// against [`super::schedule_layer`] isolates the prefetch decision.
pub fn ondemand_only_plan(inputs: &LayerInputs) -> Result<LayerPlan> {
    let mut plan = super::schedule_layer(inputs)?;
    plan.prefetch_seq.clear();
    plan.issued_prefetches = 0;
    Ok(plan)
}

/// The prefetch-aware split with a fixed number of hot next-layer
/// prefetches (clamped to the predicted list).
pub fn fixed_prefetch_plan(inputs: &LayerInputs, c: usize) -> Result<LayerPlan> {
    let mut plan = super::schedule_layer(inputs)?;
    let c = c.min(inputs.next.len());
    plan.prefetch_seq = hottest(&inputs.next, c);
    plan.issued_prefetches = c;
    plan.trace.widened = false;
    plan.trace.sweep = sweep(&inputs.cur, &inputs.next, &inputs.params);
    Ok(plan)
}
