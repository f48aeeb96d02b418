use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{Ticks, TICK_UNIT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Gpu,
    Cpu,
    IoChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Attention,
    GpuExpert,
    CpuExpert,
    Load,
    Prefetch,
    Idle,
}

impl EventKind {
    pub fn is_transfer(self) -> bool {
        matches!(self, EventKind::Load | EventKind::Prefetch)
    }

    pub fn is_compute(self) -> bool {
        matches!(self, EventKind::GpuExpert | EventKind::CpuExpert)
    }
}

/// One interval on one resource. `layer` is the global pipeline stage
/// (`iteration * num_layers + layer`); for a prefetch it is the stage the
/// expert is fetched for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub t_start: Ticks,
    pub t_end: Ticks,
    pub resource: Resource,
    pub kind: EventKind,
    pub layer: usize,
    pub expert: Option<usize>,
    pub tokens: u32,
}

impl TimelineEvent {
    fn sort_key(&self) -> (Ticks, Resource, Ticks, usize, Option<usize>, EventKind) {
        (self.t_start, self.resource, self.t_end, self.layer, self.expert, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineHeader {
    pub tick_unit: String,
    pub t_io: Ticks,
    pub num_layers: usize,
    pub cpu_slots: usize,
    pub batch_size: usize,
    pub iterations: usize,
    /// Resident `(layer, expert)` pairs.
    pub resident: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub header: TimelineHeader,
    pub events: Vec<TimelineEvent>,
}

impl Timeline {
    pub fn new(header: TimelineHeader) -> Self {
        Timeline { header, events: Vec::new() }
    }

    /// Stable order used for export and comparison.
    pub fn sort(&mut self) {
        self.events.sort_by_key(TimelineEvent::sort_key);
    }

    pub fn makespan(&self) -> Ticks {
        self.events.iter().map(|e| e.t_end).max().unwrap_or(0)
    }

    pub fn num_stages(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Attention)
            .map(|e| e.layer + 1)
            .max()
            .unwrap_or(0)
    }

    /// Gating tick (end of attention) of every stage, if the stage has an
    /// attention event.
    pub fn gating_ticks(&self) -> Vec<Option<Ticks>> {
        let mut out = vec![None; self.num_stages()];
        for e in self.events.iter().filter(|e| e.kind == EventKind::Attention) {
            out[e.layer] = Some(e.t_end);
        }
        out
    }

    pub fn is_resident(&self, stage: usize, expert: usize) -> bool {
        let layer = stage % self.header.num_layers.max(1);
        self.header.resident.contains(&(layer, expert))
    }

    /// Line-delimited text: one header record, then one record per event.
    pub fn to_lines(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: TimelineHeader = serde_json::from_str(lines.next().ok_or(Error::Empty("timeline file"))?)?;
        if header.tick_unit != TICK_UNIT {
            return Err(Error::InvalidArgument(format!("timeline tick unit `{}`", header.tick_unit)));
        }
        let events = lines
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Timeline { header, events })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_atomic(path.as_ref(), self.to_lines().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Timeline::from_lines(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
