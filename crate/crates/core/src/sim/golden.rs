//! Small two-layer scenarios with hand-derived timelines.
//!
//! Every case uses `t_io = 100`, `t_g = 10`, `t_attn = 20` and a CPU cost
//! of one tick per token, so each event below can be checked with pencil
//! and paper against the scheduler rules and the engine's dispatch order.

use std::collections::BTreeSet;

use serde::Serialize;

use super::engine::{run_scenario, Scenario, SimConfig, StageInput};
use super::timeline::{EventKind, Resource, Timeline, TimelineEvent};
use crate::cost::{CostParams, Ticks};
use crate::error::{Error, Result};
use crate::scheduler::SchedulerPolicy;

pub const GOLDEN_IDS: [&str; 6] = [
    "no-prefetch",
    "mispredicted-prefetch",
    "layer-by-layer",
    "cross-layer",
    "gpu-bound-preemption",
    "cpu-bound-overfill",
];

pub struct GoldenRun {
    pub policy: SchedulerPolicy,
    pub scenario: Scenario,
    pub config: SimConfig,
    pub expected: Vec<TimelineEvent>,
}

pub struct GoldenCase {
    pub id: &'static str,
    pub summary: &'static str,
    pub runs: Vec<GoldenRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunDiff {
    pub policy: SchedulerPolicy,
    pub makespan: Ticks,
    pub expected_makespan: Ticks,
    /// Expected events the simulation did not produce.
    pub missing: Vec<TimelineEvent>,
    /// Produced events that are not in the golden timeline.
    pub unexpected: Vec<TimelineEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldenReport {
    pub id: String,
    pub runs: Vec<RunDiff>,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.missing.is_empty() && r.unexpected.is_empty())
    }
}

fn params() -> CostParams {
    CostParams::new(100, 10, 20, 1.0, 0.0).expect("valid golden parameters")
}

fn ev(kind: EventKind, t_start: Ticks, t_end: Ticks, stage: usize, expert: Option<usize>, tokens: u32) -> TimelineEvent {
    let resource = match kind {
        EventKind::Attention | EventKind::GpuExpert | EventKind::Idle => Resource::Gpu,
        EventKind::CpuExpert => Resource::Cpu,
        EventKind::Load | EventKind::Prefetch => Resource::IoChannel,
    };
    TimelineEvent {
        t_start,
        t_end,
        resource,
        kind,
        layer: stage,
        expert,
        tokens,
    }
}

fn attn(t: Ticks, stage: usize) -> TimelineEvent {
    ev(EventKind::Attention, t, t + 20, stage, None, 0)
}

fn idle(t0: Ticks, t1: Ticks, stage: usize) -> TimelineEvent {
    ev(EventKind::Idle, t0, t1, stage, None, 0)
}

fn gpu(t: Ticks, stage: usize, e: usize, m: u32) -> TimelineEvent {
    ev(EventKind::GpuExpert, t, t + 10, stage, Some(e), m)
}

fn cpu(t: Ticks, stage: usize, e: usize, m: u32) -> TimelineEvent {
    ev(EventKind::CpuExpert, t, t + Ticks::from(m), stage, Some(e), m)
}

fn load(t: Ticks, stage: usize, e: usize, m: u32) -> TimelineEvent {
    ev(EventKind::Load, t, t + 100, stage, Some(e), m)
}

fn prefetch(t: Ticks, stage: usize, e: usize, m: u32) -> TimelineEvent {
    ev(EventKind::Prefetch, t, t + 100, stage, Some(e), m)
}

fn two_layers(experts: usize, l0: &[(usize, u32)], l1: &[(usize, u32)], predicted: &[(usize, u32)]) -> Scenario {
    Scenario {
        num_layers: 2,
        experts_per_layer: experts,
        group_bounds: (0, 2),
        batch_size: 256,
        iterations: 1,
        stages: vec![
            StageInput {
                layer: 0,
                loads: l0.to_vec(),
                predicted: [predicted.to_vec(), vec![]],
            },
            StageInput {
                layer: 1,
                loads: l1.to_vec(),
                predicted: [vec![], vec![]],
            },
        ],
        resident: BTreeSet::new(),
    }
}

fn run(policy: SchedulerPolicy, scenario: Scenario, expected: Vec<TimelineEvent>) -> GoldenRun {
    GoldenRun {
        policy,
        scenario,
        config: SimConfig::new(params()),
        expected,
    }
}

// Layer 0 activates experts 0 and 1 with 220 and 240 tokens, layer 1 the
// same shape. Splitting layer 0 at one expert costs max(220, 110) = 220 and
// leaves the channel idle for 120 ticks; loading both costs 210.
const L0: [(usize, u32); 2] = [(0, 220), (1, 240)];
const L1: [(usize, u32); 2] = [(0, 220), (1, 240)];

/// Prefetch-aware split of layer 0 (expert 0 on the CPU, expert 1 loaded),
/// shared by the cases that use it.
fn split_layer0() -> Vec<TimelineEvent> {
    vec![attn(0, 0), cpu(20, 0, 0, 220), load(20, 0, 1, 240), idle(20, 120, 0), gpu(120, 0, 1, 240)]
}

fn no_prefetch() -> GoldenCase {
    // Layer 1 starts at 240 (CPU barrier), gating 260, and must load both
    // experts back to back: 220 > alpha + 2 t_io + t_g = 210.
    let mut e = split_layer0();
    e.extend([
        idle(130, 240, 1),
        attn(240, 1),
        load(260, 1, 0, 220),
        idle(260, 360, 1),
        gpu(360, 1, 0, 220),
        load(360, 1, 1, 240),
        idle(370, 460, 1),
        gpu(460, 1, 1, 240),
    ]);
    GoldenCase {
        id: "no-prefetch",
        summary: "hybrid CPU/GPU execution without prefetching: makespan 470",
        runs: vec![run(SchedulerPolicy::OnDemandOnly, two_layers(4, &L0, &L1, &L1), e)],
    }
}

fn mispredicted_prefetch() -> GoldenCase {
    // Layer 1 is predicted as experts 2 and 3. Two blind prefetches occupy
    // the channel until 320, so at gating (260) alpha = 60; the scheduler
    // then keeps expert 0 on the CPU and loads expert 1 after the waste.
    let mut e = split_layer0();
    e.extend([
        prefetch(120, 1, 3, 240),
        idle(130, 240, 1),
        prefetch(220, 1, 2, 220),
        attn(240, 1),
        cpu(260, 1, 0, 220),
        idle(260, 420, 1),
        load(320, 1, 1, 240),
        gpu(420, 1, 1, 240),
    ]);
    let predicted = [(2, 220), (3, 240)];
    GoldenCase {
        id: "mispredicted-prefetch",
        summary: "wrong predictions waste the channel: makespan 480, above no-prefetch",
        runs: vec![run(SchedulerPolicy::FixedPrefetch(2), two_layers(4, &L0, &L1, &predicted), e)],
    }
}

fn layer_by_layer() -> GoldenCase {
    // Greedy loads both layer-0 experts (210 < 220), finishing layer 0 at
    // 230, then fills the 30-tick window with one prefetch that starts at
    // 220; layer 1's own load cannot interrupt it and waits: alpha = 70
    // at gating 250.
    let e = vec![
        attn(0, 0),
        load(20, 0, 0, 220),
        idle(20, 120, 0),
        gpu(120, 0, 0, 220),
        load(120, 0, 1, 240),
        idle(130, 220, 0),
        gpu(220, 0, 1, 240),
        prefetch(220, 1, 1, 240),
        attn(230, 1),
        idle(250, 320, 1),
        gpu(320, 1, 1, 240),
        load(320, 1, 0, 220),
        idle(330, 420, 1),
        gpu(420, 1, 0, 220),
    ];
    GoldenCase {
        id: "layer-by-layer",
        summary: "per-layer greedy split with idle-window prefetch: makespan 430",
        runs: vec![run(SchedulerPolicy::LayerGreedy, two_layers(4, &L0, &L1, &L1), e)],
    }
}

fn cross_layer() -> GoldenCase {
    // The split leaves T_gap = 120, so f = (120 + 20) / 100 = 1.4 and one
    // prefetch (expert 1 of layer 1) rides the idle channel. Layer 0 ends
    // at 240 instead of 230; layer 1 needs a single load.
    let mut e = split_layer0();
    e.extend([
        prefetch(120, 1, 1, 240),
        idle(130, 240, 1),
        attn(240, 1),
        gpu(260, 1, 1, 240),
        load(260, 1, 0, 220),
        idle(270, 360, 1),
        gpu(360, 1, 0, 220),
    ]);
    GoldenCase {
        id: "cross-layer",
        summary: "prefetch-aware cross-layer plan: makespan 370, below layer-by-layer",
        runs: vec![run(SchedulerPolicy::PreSched, two_layers(4, &L0, &L1, &L1), e)],
    }
}

fn gpu_bound_preemption() -> GoldenCase {
    // Four 300-token experts. Greedy makes layer 0 GPU-bound (two loads,
    // T_G = 210 > T_C = 0); its prefetch only starts at 220 and layer 1's
    // load waits for it until 320, 70 ticks after gating.
    let l0 = [(0, 300), (1, 300)];
    let l1 = [(0, 300), (1, 300)];
    let greedy = vec![
        attn(0, 0),
        load(20, 0, 0, 300),
        idle(20, 120, 0),
        gpu(120, 0, 0, 300),
        load(120, 0, 1, 300),
        idle(130, 220, 0),
        gpu(220, 0, 1, 300),
        prefetch(220, 1, 1, 300),
        attn(230, 1),
        idle(250, 320, 1),
        gpu(320, 1, 1, 300),
        load(320, 1, 0, 300),
        idle(330, 420, 1),
        gpu(420, 1, 0, 300),
    ];
    // Prefetch-aware: one expert on the CPU frees the channel for both
    // layer-1 experts (f = 2.2), which are resident by gating.
    let presched = vec![
        attn(0, 0),
        cpu(20, 0, 0, 300),
        load(20, 0, 1, 300),
        idle(20, 120, 0),
        gpu(120, 0, 1, 300),
        prefetch(120, 1, 1, 300),
        idle(130, 320, 1),
        prefetch(220, 1, 0, 300),
        attn(320, 1),
        gpu(340, 1, 0, 300),
        gpu(350, 1, 1, 300),
    ];
    GoldenCase {
        id: "gpu-bound-preemption",
        summary: "GPU-bound previous layer: greedy 430 vs prefetch-aware 360",
        runs: vec![
            run(SchedulerPolicy::LayerGreedy, two_layers(4, &l0, &l1, &l1), greedy),
            run(SchedulerPolicy::PreSched, two_layers(4, &l0, &l1, &l1), presched),
        ],
    }
}

fn cpu_bound_overfill() -> GoldenCase {
    // Layer 0 is three 30-token experts, all on the CPU (T_C = 90). Greedy
    // sees a 110-tick window and prefetches two experts, including the cold
    // expert 2 that layer 1 would rather run on the CPU; its GPU compute
    // cannot start before 220.
    let l0 = [(0, 30), (1, 30), (2, 30)];
    let l1 = [(0, 200), (1, 20), (2, 20)];
    let greedy = vec![
        attn(0, 0),
        cpu(20, 0, 0, 30),
        prefetch(20, 1, 0, 200),
        idle(20, 110, 1),
        cpu(50, 0, 1, 30),
        cpu(80, 0, 2, 30),
        attn(110, 1),
        prefetch(120, 1, 2, 20),
        gpu(130, 1, 0, 200),
        cpu(130, 1, 1, 20),
        idle(140, 220, 1),
        gpu(220, 1, 2, 20),
    ];
    // Prefetch-aware: f = (90 + 20) / 100 = 1.1, one prefetch of the hot
    // expert; both cold experts run on the CPU.
    let presched = vec![
        attn(0, 0),
        cpu(20, 0, 0, 30),
        prefetch(20, 1, 0, 200),
        idle(20, 110, 1),
        cpu(50, 0, 1, 30),
        cpu(80, 0, 2, 30),
        attn(110, 1),
        gpu(130, 1, 0, 200),
        cpu(130, 1, 1, 20),
        cpu(150, 1, 2, 20),
    ];
    GoldenCase {
        id: "cpu-bound-overfill",
        summary: "CPU-bound previous layer: greedy 230 vs prefetch-aware 170",
        runs: vec![
            run(SchedulerPolicy::LayerGreedy, two_layers(3, &l0, &l1, &l1), greedy),
            run(SchedulerPolicy::PreSched, two_layers(3, &l0, &l1, &l1), presched),
        ],
    }
}

pub fn golden_case(id: &str) -> Result<GoldenCase> {
    match id {
        "no-prefetch" => Ok(no_prefetch()),
        "mispredicted-prefetch" => Ok(mispredicted_prefetch()),
        "layer-by-layer" => Ok(layer_by_layer()),
        "cross-layer" => Ok(cross_layer()),
        "gpu-bound-preemption" => Ok(gpu_bound_preemption()),
        "cpu-bound-overfill" => Ok(cpu_bound_overfill()),
        _ => Err(Error::UnknownScenario(id.to_string())),
    }
}

/// Multiset difference `a - b` of two sorted event lists.
fn minus(a: &[TimelineEvent], b: &[TimelineEvent]) -> Vec<TimelineEvent> {
    let mut rest = b.to_vec();
    a.iter()
        .filter(|e| match rest.iter().position(|x| x == *e) {
            Some(i) => {
                rest.swap_remove(i);
                false
            }
            None => true,
        })
        .copied()
        .collect()
}

/// Runs every policy of a registered case and diffs it against the golden
/// events.
pub fn replay_golden(id: &str) -> Result<(GoldenReport, Vec<Timeline>)> {
    let case = golden_case(id)?;
    let mut runs = Vec::new();
    let mut timelines = Vec::new();
    for r in &case.runs {
        let out = run_scenario(&r.scenario, &r.config, r.policy)?;
        let mut want = Timeline::new(out.timeline.header.clone());
        want.events = r.expected.clone();
        want.sort();
        runs.push(RunDiff {
            policy: r.policy,
            makespan: out.timeline.makespan(),
            expected_makespan: want.makespan(),
            missing: minus(&want.events, &out.timeline.events),
            unexpected: minus(&out.timeline.events, &want.events),
        });
        timelines.push(out.timeline);
    }
    Ok((GoldenReport { id: id.to_string(), runs }, timelines))
}
