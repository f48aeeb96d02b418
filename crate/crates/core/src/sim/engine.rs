use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::buffer::BufferPool;
use super::timeline::{EventKind, Resource, Timeline, TimelineEvent, TimelineHeader};
use crate::cost::{cpu_cost, CostParams, ExpertLoad, HitStats, Location, Ticks, TICK_UNIT};
use crate::error::{Error, Result};
use crate::scheduler::{enumeration_oracle, LayerInputs, LayerPlan, SchedulerPolicy};

/// Transfers move the three projection matrices of an expert back to back.
pub const TRANSFER_CHUNKS: u64 = 3;

/// One pipeline stage: a layer of one decode iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInput {
    /// Model layer index.
    pub layer: usize,
    /// Activated experts with their token counts.
    pub loads: Vec<(usize, u32)>,
    /// Predicted activations of the following stage and the one after.
    pub predicted: [Vec<(usize, u32)>; 2],
}

/// Everything the engine needs to replay a workload, independent of how
/// activations and predictions were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub group_bounds: (usize, usize),
    pub batch_size: usize,
    pub iterations: usize,
    pub stages: Vec<StageInput>,
    /// Resident `(layer, expert)` pairs.
    pub resident: BTreeSet<(usize, usize)>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.experts_per_layer == 0 {
            return Err(Error::InvalidSpec("scenario needs layers and experts".into()));
        }
        for (g, s) in self.stages.iter().enumerate() {
            let lists = std::iter::once(&s.loads).chain(s.predicted.iter());
            for list in lists {
                let mut seen = BTreeSet::new();
                for &(e, m) in list {
                    if e >= self.experts_per_layer || m == 0 || !seen.insert(e) {
                        return Err(Error::InvalidArgument(format!(
                            "stage {g}: bad entry (expert {e}, tokens {m})"
                        )));
                    }
                }
            }
            if s.layer >= self.num_layers {
                return Err(Error::IndexOutOfRange {
                    index: s.layer,
                    len: self.num_layers,
                });
            }
        }
        Ok(())
    }

    /// Every activated `(stage, expert)` pair.
    pub fn activated(&self) -> BTreeSet<(usize, usize)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(g, s)| s.loads.iter().map(move |&(e, _)| (g, e)))
            .collect()
    }

    fn group_of(&self, layer: usize) -> usize {
        let (b0, b1) = self.group_bounds;
        if layer < b0 {
            0
        } else if layer < b1 {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: CostParams,
    pub cpu_slots: usize,
    /// Prefetch slots per buffer group; `None` means one per expert.
    pub prefetch_slots: Option<usize>,
    /// Smoothing span of the hit-rate tracker.
    pub hit_span: u32,
    /// Starting hit rate of the critical prefetch (the predictor's offline
    /// accuracy).
    pub initial_hit_rate: f64,
}

impl SimConfig {
    pub fn new(params: CostParams) -> Self {
        SimConfig {
            params,
            cpu_slots: 1,
            prefetch_slots: None,
            hit_span: 32,
            initial_hit_rate: 1.0,
        }
    }
}

/// Per-stage bookkeeping kept alongside the timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub layer: usize,
    pub start: Ticks,
    pub gating: Ticks,
    pub end: Ticks,
    pub cpu_finish: Ticks,
    pub gpu_finish: Ticks,
    pub alpha: Ticks,
    pub split_index: usize,
    pub cpu_experts: usize,
    pub ondemand_loads: usize,
    pub resident_hits: usize,
    pub prefetch_hits: usize,
    pub prefetches_issued: usize,
    pub prefetches_dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    target: usize,
    expert: usize,
    tokens: u32,
    critical: bool,
    issued: Ticks,
}

#[derive(Debug, Clone, PartialEq)]
struct OpenStage {
    stage: usize,
    start: Ticks,
    gating: Ticks,
    alpha: Ticks,
    dropped: usize,
    resident: Vec<(usize, u32)>,
    staged: Vec<(usize, u32, Ticks)>,
    cur: Vec<ExpertLoad>,
}

/// Result of a full simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub timeline: Timeline,
    pub stages: Vec<StageRecord>,
    pub plans: Vec<LayerPlan>,
}

/// Deterministic event engine over the GPU, the CPU and the serial I/O
/// channel. Each stage is driven by [`Engine::begin_stage`] (attention,
/// prefetch commitment, scheduler inputs) and [`Engine::finish_stage`]
/// (dispatch of a plan). The state is cheap to clone so that a search can
/// explore alternative plans from the same point.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    sc: &'a Scenario,
    cfg: &'a SimConfig,
    cpu_free: Vec<Ticks>,
    gpu_free: Ticks,
    io_free: Ticks,
    pending: Vec<Pending>,
    /// Committed prefetches by `(target stage, expert)` with arrival tick.
    staged: BTreeMap<(usize, usize), Ticks>,
    criticals: Vec<(usize, usize)>,
    buffer: BufferPool,
    stats: [HitStats; 3],
    events: Vec<TimelineEvent>,
    records: Vec<StageRecord>,
    open: Option<OpenStage>,
}

impl<'a> Engine<'a> {
    pub fn new(sc: &'a Scenario, cfg: &'a SimConfig) -> Result<Self> {
        sc.validate()?;
        cfg.params.validate()?;
        if cfg.cpu_slots == 0 {
            return Err(Error::InvalidConfig("cpu_slots must be at least 1".into()));
        }
        if cfg.params.t_io == 0 {
            return Err(Error::InvalidConfig("t_io must be positive".into()));
        }
        Ok(Engine {
            sc,
            cfg,
            cpu_free: vec![0; cfg.cpu_slots],
            gpu_free: 0,
            io_free: 0,
            pending: Vec::new(),
            staged: BTreeMap::new(),
            criticals: Vec::new(),
            buffer: BufferPool::new(cfg.prefetch_slots.unwrap_or(sc.experts_per_layer)),
            stats: [HitStats::new(cfg.initial_hit_rate); 3],
            events: Vec::new(),
            records: Vec::new(),
            open: None,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.sc.stages.len()
    }

    pub fn next_stage(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn last_end(&self) -> Ticks {
        self.records.last().map_or(0, |r| r.end)
    }

    pub fn hit_stats(&self, group: usize) -> HitStats {
        self.stats[group]
    }

    fn emit(&mut self, t_start: Ticks, t_end: Ticks, resource: Resource, kind: EventKind, layer: usize, expert: Option<usize>, tokens: u32) {
        self.events.push(TimelineEvent {
            t_start,
            t_end,
            resource,
            kind,
            layer,
            expert,
            tokens,
        });
    }

    fn transfer_end(&self, start: Ticks) -> Ticks {
        let t_io = self.cfg.params.t_io;
        let chunk = t_io / TRANSFER_CHUNKS;
        let mut t = start;
        for i in 0..TRANSFER_CHUNKS {
            t += if i + 1 == TRANSFER_CHUNKS { t_io - chunk * (TRANSFER_CHUNKS - 1) } else { chunk };
        }
        t
    }

    fn predicted(&self, target: usize, depth: usize) -> Vec<ExpertLoad> {
        let Some(stage) = self.sc.stages.get(target) else {
            return Vec::new();
        };
        let Some(src) = target.checked_sub(depth + 1).and_then(|g| self.sc.stages.get(g)) else {
            return Vec::new();
        };
        src.predicted[depth]
            .iter()
            .filter(|&&(e, _)| !self.sc.resident.contains(&(stage.layer, e)) && !self.staged.contains_key(&(target, e)))
            .map(|&(e, m)| ExpertLoad::host(target, e, m))
            .collect()
    }

    /// Runs attention for stage `g`, commits the prefetches queued by the
    /// previous plan that can start before gating, and returns the
    /// scheduler's view of the stage.
    pub fn begin_stage(&mut self) -> Result<LayerInputs> {
        let g = self.records.len();
        if self.open.is_some() || g >= self.sc.stages.len() {
            return Err(Error::InvalidArgument(format!("stage {g} cannot begin")));
        }
        let p = self.cfg.params;
        let start = self.gpu_free.max(self.cpu_free.iter().copied().max().unwrap_or(0));
        let gating = start + p.t_attn;
        self.emit(start, gating, Resource::Gpu, EventKind::Attention, g, None, 0);
        self.gpu_free = gating;

        let mut dropped = 0;
        for job in std::mem::take(&mut self.pending) {
            let begin = self.io_free.max(job.issued);
            if begin >= gating {
                dropped += 1;
                continue;
            }
            self.buffer.reserve(job.target, job.expert, begin)?;
            let end = self.transfer_end(begin);
            self.emit(begin, end, Resource::IoChannel, EventKind::Prefetch, job.target, Some(job.expert), job.tokens);
            self.io_free = end;
            self.staged.insert((job.target, job.expert), end);
            if job.critical {
                self.criticals.push((job.target, job.expert));
            }
        }
        let alpha = self.io_free.saturating_sub(gating);

        let stage = &self.sc.stages[g];
        let active: BTreeSet<usize> = stage.loads.iter().map(|l| l.0).collect();
        let group = self.sc.group_of(stage.layer);
        let span = self.cfg.hit_span;
        let mut observed = Vec::new();
        self.criticals.retain(|&(t, e)| {
            if t == g {
                observed.push(active.contains(&e));
                false
            } else {
                true
            }
        });
        for hit in observed {
            self.stats[group].observe(hit, span);
        }

        let (mut resident, mut staged, mut cur) = (Vec::new(), Vec::new(), Vec::new());
        for &(e, m) in &stage.loads {
            if self.sc.resident.contains(&(stage.layer, e)) {
                resident.push((e, m));
            } else if let Some(&arrival) = self.staged.get(&(g, e)) {
                staged.push((e, m, arrival));
            } else {
                cur.push(ExpertLoad::host(g, e, m));
            }
        }
        let next = self.predicted(g + 1, 0);
        let next2 = self.predicted(g + 2, 1);
        let stats_group = self.sc.stages.get(g + 1).map_or(group, |s| self.sc.group_of(s.layer));
        let inputs = LayerInputs::new(cur, next, p.with_alpha(alpha), self.stats[stats_group]).with_next2(next2);
        self.open = Some(OpenStage {
            stage: g,
            start,
            gating,
            alpha,
            dropped,
            resident,
            staged,
            cur: inputs.cur.clone(),
        });
        Ok(inputs)
    }

    /// Dispatches `plan` for the stage opened by [`Engine::begin_stage`].
    pub fn finish_stage(&mut self, plan: &LayerPlan) -> Result<()> {
        let open = self
            .open
            .take()
            .ok_or_else(|| Error::InvalidArgument("no stage is open".into()))?;
        let g = open.stage;
        let p = self.cfg.params;
        let a = open.gating;
        check_partition(&open.cur, plan)?;

        let mut cpu_finish = a;
        for job in &plan.cpu_set {
            let slot = (0..self.cpu_free.len()).min_by_key(|&s| (self.cpu_free[s], s)).unwrap();
            let begin = a.max(self.cpu_free[slot]);
            let end = begin + cpu_cost(job.tokens, &p);
            self.emit(begin, end, Resource::Cpu, EventKind::CpuExpert, g, Some(job.expert), job.tokens);
            self.cpu_free[slot] = end;
            cpu_finish = cpu_finish.max(end);
        }

        let mut fixed: Vec<(Ticks, usize, u32)> = open.resident.iter().map(|&(e, m)| (a, e, m)).collect();
        fixed.extend(open.staged.iter().map(|&(e, m, t)| (t.max(a), e, m)));
        fixed.sort_unstable();
        let mut fixed = fixed.into_iter().peekable();
        let mut gpu_finish = a;
        for (k, job) in plan.ondemand_seq.iter().enumerate() {
            let begin = self.io_free.max(a).max(self.buffer.ondemand_slot(k));
            let ready = self.transfer_end(begin);
            self.emit(begin, ready, Resource::IoChannel, EventKind::Load, g, Some(job.expert), job.tokens);
            self.io_free = ready;
            while let Some(&(t, e, m)) = fixed.peek() {
                if t > ready {
                    break;
                }
                fixed.next();
                self.gpu_run(t, g, e, m);
            }
            gpu_finish = self.gpu_run(ready, g, job.expert, job.tokens);
            self.buffer.set_ondemand_free(k, gpu_finish);
        }
        for (t, e, m) in fixed {
            gpu_finish = self.gpu_run(t, g, e, m);
        }

        let prefetch_hits = open.staged.len();
        self.buffer.release(g);
        self.staged.retain(|&(t, _), _| t != g);
        let end = cpu_finish.max(gpu_finish).max(a);

        let last = plan.prefetch_seq.len().saturating_sub(1);
        for (i, l) in plan.prefetch_seq.iter().enumerate() {
            if l.layer != g + 1 && l.layer != g + 2 || l.layer >= self.sc.stages.len() {
                return Err(Error::InvalidArgument(format!(
                    "stage {g} cannot prefetch for stage {}",
                    l.layer
                )));
            }
            if self.staged.contains_key(&(l.layer, l.expert))
                || self.sc.resident.contains(&(self.sc.stages[l.layer].layer, l.expert))
                || l.location != Location::Host
            {
                return Err(Error::InvalidArgument(format!("expert {} is already on the GPU", l.expert)));
            }
            self.pending.push(Pending {
                target: l.layer,
                expert: l.expert,
                tokens: l.tokens,
                critical: i == last,
                issued: a,
            });
        }

        self.records.push(StageRecord {
            stage: g,
            layer: self.sc.stages[g].layer,
            start: open.start,
            gating: a,
            end,
            cpu_finish,
            gpu_finish,
            alpha: open.alpha,
            split_index: plan.split_index,
            cpu_experts: plan.cpu_set.len(),
            ondemand_loads: plan.ondemand_seq.len(),
            resident_hits: open.resident.len(),
            prefetch_hits,
            prefetches_issued: plan.prefetch_seq.len(),
            prefetches_dropped: open.dropped,
        });
        Ok(())
    }

    fn gpu_run(&mut self, ready: Ticks, g: usize, expert: usize, tokens: u32) -> Ticks {
        let begin = ready.max(self.gpu_free);
        let end = begin + self.cfg.params.t_g;
        self.emit(begin, end, Resource::Gpu, EventKind::GpuExpert, g, Some(expert), tokens);
        self.gpu_free = end;
        end
    }

    /// Closes the run and returns the sorted timeline, with GPU idle gaps
    /// made explicit.
    pub fn finish(self) -> (Timeline, Vec<StageRecord>) {
        let header = TimelineHeader {
            tick_unit: TICK_UNIT.to_string(),
            t_io: self.cfg.params.t_io,
            num_layers: self.sc.num_layers,
            cpu_slots: self.cfg.cpu_slots,
            batch_size: self.sc.batch_size,
            iterations: self.sc.iterations,
            resident: self.sc.resident.clone(),
        };
        let mut timeline = Timeline::new(header);
        timeline.events = self.events;
        timeline.sort();
        let mut idle = Vec::new();
        let mut free = 0;
        for e in timeline.events.iter().filter(|e| e.resource == Resource::Gpu) {
            if e.t_start > free {
                idle.push(TimelineEvent {
                    t_start: free,
                    t_end: e.t_start,
                    resource: Resource::Gpu,
                    kind: EventKind::Idle,
                    layer: e.layer,
                    expert: None,
                    tokens: 0,
                });
            }
            free = free.max(e.t_end);
        }
        timeline.events.extend(idle);
        timeline.sort();
        (timeline, self.records)
    }
}

fn check_partition(cur: &[ExpertLoad], plan: &LayerPlan) -> Result<()> {
    let split = plan.split_index;
    if split > cur.len() || plan.cpu_set[..] != cur[..split] || plan.ondemand_seq[..] != cur[split..] {
        return Err(Error::InvalidArgument(format!(
            "plan does not split the current layer at index {split}"
        )));
    }
    Ok(())
}

/// Replays a scenario under one policy.
pub fn run_scenario(sc: &Scenario, cfg: &SimConfig, policy: SchedulerPolicy) -> Result<SimOutput> {
    let mut engine = Engine::new(sc, cfg)?;
    let mut plans = Vec::with_capacity(sc.stages.len());
    for _ in 0..sc.stages.len() {
        let inputs = engine.begin_stage()?;
        let plan = match policy {
            SchedulerPolicy::Oracle => enumeration_oracle(&engine, &inputs)?.plan,
            other => other.plan(&inputs)?,
        };
        engine.finish_stage(&plan)?;
        plans.push(plan);
    }
    let (timeline, stages) = engine.finish();
    Ok(SimOutput { timeline, stages, plans })
}
