use serde::{Deserialize, Serialize};

use super::timeline::{EventKind, Resource, Timeline};
use crate::cost::Ticks;

const TICKS_PER_SECOND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Attention start to last compute end, per stage.
    pub stage_latency: Vec<Ticks>,
    pub makespan: Ticks,
    /// Makespan per decode iteration, in ticks.
    pub decode_latency: f64,
    /// Generated tokens per second.
    pub throughput: f64,
    pub io_busy_fraction: f64,
    pub gpu_idle_fraction: f64,
    /// `|CPU finish - GPU finish|` per stage; an idle device finishes at gating.
    pub cpu_gpu_gap: Vec<Ticks>,
}

/// Aggregates a timeline. Stages are delimited by their attention events.
pub fn compute_metrics(timeline: &Timeline) -> Metrics {
    let stages = timeline.num_stages();
    let mut start = vec![0; stages];
    let mut gating = vec![0; stages];
    for e in timeline.events.iter().filter(|e| e.kind == EventKind::Attention) {
        start[e.layer] = e.t_start;
        gating[e.layer] = e.t_end;
    }
    let mut cpu_fin = gating.clone();
    let mut gpu_fin = gating.clone();
    let (mut io_busy, mut gpu_busy) = (0, 0);
    for e in &timeline.events {
        let len = e.t_end - e.t_start;
        match e.kind {
            EventKind::CpuExpert => cpu_fin[e.layer] = cpu_fin[e.layer].max(e.t_end),
            EventKind::GpuExpert => gpu_fin[e.layer] = gpu_fin[e.layer].max(e.t_end),
            _ => {}
        }
        if e.resource == Resource::IoChannel {
            io_busy += len;
        }
        if e.resource == Resource::Gpu && e.kind != EventKind::Idle {
            gpu_busy += len;
        }
    }
    let makespan = timeline.makespan();
    let frac = |x: Ticks| if makespan == 0 { 0.0 } else { (x as f64 / makespan as f64).clamp(0.0, 1.0) };
    let iterations = timeline.header.iterations;
    let tokens = (timeline.header.batch_size * iterations) as f64;
    Metrics {
        stage_latency: (0..stages).map(|g| cpu_fin[g].max(gpu_fin[g]) - start[g]).collect(),
        makespan,
        decode_latency: if iterations == 0 { 0.0 } else { makespan as f64 / iterations as f64 },
        throughput: if makespan == 0 { 0.0 } else { tokens * TICKS_PER_SECOND / makespan as f64 },
        io_busy_fraction: frac(io_busy),
        gpu_idle_fraction: if makespan == 0 { 0.0 } else { 1.0 - frac(gpu_busy) },
        cpu_gpu_gap: (0..stages).map(|g| cpu_fin[g].abs_diff(gpu_fin[g])).collect(),
    }
}
