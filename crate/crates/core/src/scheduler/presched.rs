use serde::{Deserialize, Serialize};

use super::{DecisionTrace, LayerInputs, LayerPlan, SweepPoint};
use crate::cost::{cpu_cost, overlap_prefetch_count, prefetch_gain, CostParams, ExpertLoad, Ticks};
use crate::error::Result;

/// Merges `cur` and `next` ascending by tokens (current layer first on ties)
/// and evaluates the mandatory-transfer test at every position.
pub(crate) fn sweep(cur: &[ExpertLoad], next: &[ExpertLoad], params: &CostParams) -> Vec<SweepPoint> {
    let len = cur.len() + next.len();
    let mut out = Vec::with_capacity(len);
    let (mut a, mut b) = (0, 0);
    let mut t_c = params.t_attn;
    for k in 0..len {
        let take_cur = b == next.len() || (a < cur.len() && cur[a].tokens <= next[b].tokens);
        let load = if take_cur {
            a += 1;
            cur[a - 1]
        } else {
            b += 1;
            next[b - 1]
        };
        t_c += cpu_cost(load.tokens, params);
        let t_g_all = params.alpha + (len - k) as Ticks * params.t_io + params.t_g;
        out.push(SweepPoint {
            expert: load.expert,
            current: take_cur,
            t_g_all,
            t_c_all: t_c,
            in_queue: t_g_all < t_c,
        });
    }
    out
}

/// Experts whose transfer is mandatory, in merged order. Each entry keeps
/// the layer tag of the list it came from.
pub fn build_cross_layer_queue(inputs: &LayerInputs) -> Vec<ExpertLoad> {
    queue_from(&inputs.cur, &inputs.next, &sweep(&inputs.cur, &inputs.next, &inputs.params))
}

fn queue_from(cur: &[ExpertLoad], next: &[ExpertLoad], points: &[SweepPoint]) -> Vec<ExpertLoad> {
    let (mut a, mut b) = (0, 0);
    let mut queue = Vec::new();
    for p in points {
        let load = if p.current {
            a += 1;
            cur[a - 1]
        } else {
            b += 1;
            next[b - 1]
        };
        if p.in_queue {
            queue.push(load);
        }
    }
    queue
}

/// Smallest current-layer index in `queue` at which loading the remaining
/// suffix beats computing `cur[..=j]` on the CPU. Returns `cur.len()` when no
/// current-layer expert should be loaded.
pub fn ondemand_split(inputs: &LayerInputs, queue: &[ExpertLoad]) -> usize {
    let first = queue
        .iter()
        .filter_map(|q| inputs.cur.iter().position(|c| c.expert == q.expert && c.layer == q.layer))
        .min();
    split_scan(&inputs.cur, first, &inputs.params).0
}

/// Index into `cur` of the first current-layer queue member.
fn first_current(points: &[SweepPoint]) -> Option<usize> {
    let mut seen = 0;
    for p in points {
        if p.current {
            if p.in_queue {
                return Some(seen);
            }
            seen += 1;
        }
    }
    None
}

fn split_scan(cur: &[ExpertLoad], first: Option<usize>, params: &CostParams) -> (usize, usize) {
    let len = cur.len();
    let Some(first) = first else {
        return (len, 0);
    };
    let mut t_c: Ticks = cur[..first].iter().map(|l| cpu_cost(l.tokens, params)).sum();
    let mut ops = first;
    for (j, load) in cur.iter().enumerate().skip(first) {
        ops += 1;
        t_c += cpu_cost(load.tokens, params);
        let t_g = params.alpha + (len - j) as Ticks * params.t_io + params.t_g;
        if t_g < t_c {
            return (j, ops);
        }
    }
    (len, ops)
}

/// Outcome of the prefetch sizing step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrefetchDecision {
    pub count: usize,
    pub seq: Vec<ExpertLoad>,
    pub t_gap: i64,
    pub f: f64,
    pub f_int: usize,
    pub xi: Option<f64>,
    pub widened: bool,
}

/// Sizes the prefetch batch for split `split`. If no predicted next-layer
/// expert made it into `queue`, the window widens once to two layers ahead.
pub fn prefetch_decision(inputs: &LayerInputs, queue: &[ExpertLoad], split: usize) -> PrefetchDecision {
    let next_queued = queue
        .iter()
        .any(|e| inputs.next.iter().any(|t| t.expert == e.expert && t.layer == e.layer));
    prefetch_with_ops(inputs, next_queued, split).0
}

fn prefetch_with_ops(inputs: &LayerInputs, next_queued: bool, split: usize) -> (PrefetchDecision, usize) {
    let p = &inputs.params;
    let cur = &inputs.cur;
    let mut ops = 0;
    let mut widened = false;
    let target: &[ExpertLoad] = if next_queued {
        &inputs.next
    } else if !inputs.next2.is_empty() {
        let points = sweep(cur, &inputs.next2, p);
        ops += points.len();
        if points.iter().any(|q| !q.current && q.in_queue) {
            widened = true;
            &inputs.next2
        } else {
            &[]
        }
    } else {
        &[]
    };

    let t_c: Ticks = cur[..split].iter().map(|l| cpu_cost(l.tokens, p)).sum();
    let loads = (cur.len() - split) as i64;
    let t_gap = t_c as i64 - p.alpha as i64 - loads * p.t_io as i64;
    let (f, f_int) = overlap_prefetch_count(t_gap, p);
    let mut d = PrefetchDecision {
        t_gap,
        f,
        f_int,
        widened,
        ..Default::default()
    };
    if target.is_empty() {
        return (d, ops);
    }
    d.f_int = f_int.min(target.len());
    let xi = prefetch_gain(&inputs.stats, f, d.f_int, p);
    d.xi = Some(xi);
    d.count = if xi > 0.0 { d.f_int } else { d.f_int.saturating_sub(1) };
    d.seq = hottest(target, d.count);
    ops += d.count;
    (d, ops)
}

/// The `c` largest-token entries of an ascending list, hottest first.
pub(crate) fn hottest(sorted: &[ExpertLoad], c: usize) -> Vec<ExpertLoad> {
    sorted.iter().rev().take(c).copied().collect()
}

/// Full prefetch-aware plan for one layer.
pub fn schedule_layer(inputs: &LayerInputs) -> Result<LayerPlan> {
    inputs.validate()?;
    let points = sweep(&inputs.cur, &inputs.next, &inputs.params);
    let (split, split_ops) = split_scan(&inputs.cur, first_current(&points), &inputs.params);
    let next_queued = points.iter().any(|q| !q.current && q.in_queue);
    let (d, pf_ops) = prefetch_with_ops(inputs, next_queued, split);
    let (t_g, t_c) = split_costs(&inputs.cur, split, &inputs.params);
    let trace = DecisionTrace {
        ops: points.len() + split_ops + pf_ops,
        sweep: points,
        t_g,
        t_c,
        t_gap: d.t_gap,
        f: d.f,
        f_int: d.f_int,
        xi: d.xi,
        widened: d.widened,
    };
    Ok(LayerPlan::from_split(&inputs.cur, split, d.seq, trace))
}

pub(crate) fn split_costs(cur: &[ExpertLoad], split: usize, p: &CostParams) -> (Ticks, Ticks) {
    let t_c = cur[..split].iter().map(|l| cpu_cost(l.tokens, p)).sum();
    let t_g = if split == cur.len() {
        0
    } else {
        p.alpha + (cur.len() - split) as Ticks * p.t_io + p.t_g
    };
    (t_g, t_c)
}
