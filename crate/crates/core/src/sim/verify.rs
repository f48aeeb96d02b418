use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::timeline::{EventKind, Resource, Timeline, TimelineEvent};

/// A broken pipeline rule found in a timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// `t_end < t_start`.
    InvalidInterval { index: usize },
    /// Two transfers share the I/O channel.
    SerialIo { first: usize, second: usize },
    /// Two events overlap on the GPU, or more CPU jobs than slots run at once.
    ResourceOverlap { resource: Resource, first: usize, second: usize },
    /// A transfer does not occupy the channel for exactly one transfer time.
    TransferLength { index: usize, length: u64 },
    /// A prefetch started outside the window of the stage before its target
    /// (or the one before that, for a two-ahead prefetch).
    PrefetchWindow { index: usize },
    /// An expert was computed more than once, or not at all.
    Conservation { stage: usize, expert: usize, count: usize },
    /// A non-resident expert computed on the GPU without a finished transfer.
    Causality { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn overlaps(a: &TimelineEvent, b: &TimelineEvent) -> bool {
    a.t_start < b.t_end && b.t_start < a.t_end
}

/// Checks a timeline against the pipeline rules. When `expected` is given,
/// every listed `(stage, expert)` must be computed exactly once and nothing
/// else may be computed.
pub fn verify_timeline(timeline: &Timeline, expected: Option<&BTreeSet<(usize, usize)>>) -> Vec<Violation> {
    let ev = &timeline.events;
    let mut out = Vec::new();
    for (i, e) in ev.iter().enumerate() {
        if e.t_end < e.t_start {
            out.push(Violation::InvalidInterval { index: i });
        }
    }

    let by_start = |res: Resource| {
        let mut idx: Vec<usize> = (0..ev.len()).filter(|&i| ev[i].resource == res).collect();
        idx.sort_by_key(|&i| (ev[i].t_start, ev[i].t_end, i));
        idx
    };

    let io = by_start(Resource::IoChannel);
    for w in io.windows(2) {
        if overlaps(&ev[w[0]], &ev[w[1]]) {
            out.push(Violation::SerialIo { first: w[0], second: w[1] });
        }
    }
    for &i in &io {
        let len = ev[i].t_end.saturating_sub(ev[i].t_start);
        if ev[i].kind.is_transfer() && len != timeline.header.t_io {
            out.push(Violation::TransferLength { index: i, length: len });
        }
    }

    let gpu = by_start(Resource::Gpu);
    for w in gpu.windows(2) {
        if overlaps(&ev[w[0]], &ev[w[1]]) {
            out.push(Violation::ResourceOverlap {
                resource: Resource::Gpu,
                first: w[0],
                second: w[1],
            });
        }
    }

    // CPU: sweep with at most `cpu_slots` concurrent jobs.
    let cpu = by_start(Resource::Cpu);
    let slots = timeline.header.cpu_slots.max(1);
    let mut running: Vec<usize> = Vec::new();
    for &i in &cpu {
        running.retain(|&j| ev[j].t_end > ev[i].t_start);
        if ev[i].t_end > ev[i].t_start {
            if running.len() >= slots {
                out.push(Violation::ResourceOverlap {
                    resource: Resource::Cpu,
                    first: running[0],
                    second: i,
                });
            }
            running.push(i);
        }
    }

    let gating = timeline.gating_ticks();
    for &i in &io {
        let e = &ev[i];
        if e.kind != EventKind::Prefetch {
            continue;
        }
        let ok = (1..=2).any(|d| {
            let Some(src) = e.layer.checked_sub(d) else {
                return false;
            };
            let lo = gating.get(src).copied().flatten();
            let hi = gating.get(src + 1).copied().flatten();
            match (lo, hi) {
                (Some(lo), Some(hi)) => lo <= e.t_start && e.t_start < hi,
                (Some(lo), None) => lo <= e.t_start,
                _ => false,
            }
        });
        if !ok {
            out.push(Violation::PrefetchWindow { index: i });
        }
    }

    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in ev.iter().filter(|e| e.kind.is_compute()) {
        if let Some(x) = e.expert {
            *counts.entry((e.layer, x)).or_default() += 1;
        }
    }
    for (&(stage, expert), &count) in &counts {
        let wanted = expected.is_none_or(|s| s.contains(&(stage, expert)));
        if count > 1 || !wanted {
            out.push(Violation::Conservation { stage, expert, count });
        }
    }
    if let Some(s) = expected {
        for &(stage, expert) in s {
            if !counts.contains_key(&(stage, expert)) {
                out.push(Violation::Conservation { stage, expert, count: 0 });
            }
        }
    }

    let mut arrivals: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for &i in &io {
        let e = &ev[i];
        if let (true, Some(x)) = (e.kind.is_transfer(), e.expert) {
            let t = arrivals.entry((e.layer, x)).or_insert(u64::MAX);
            *t = (*t).min(e.t_end);
        }
    }
    for (i, e) in ev.iter().enumerate() {
        if e.kind != EventKind::GpuExpert {
            continue;
        }
        let Some(x) = e.expert else {
            out.push(Violation::Causality { index: i });
            continue;
        };
        if timeline.is_resident(e.layer, x) {
            continue;
        }
        if arrivals.get(&(e.layer, x)).is_none_or(|&t| t > e.t_start) {
            out.push(Violation::Causality { index: i });
        }
    }
    out
}
