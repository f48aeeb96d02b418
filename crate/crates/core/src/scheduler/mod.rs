//! Per-layer scheduling decisions: which current-layer experts run on the
//! CPU, which are loaded on demand, and how many predicted next-layer experts
//! to prefetch while the layer computes.

mod baselines;
mod oracle;
mod presched;

pub use baselines::{fixed_prefetch_plan, greedy_layer_baseline, ondemand_only_plan};
pub use oracle::{enumeration_oracle, OracleResult, ORACLE_LIMIT};
pub use presched::{build_cross_layer_queue, ondemand_split, prefetch_decision, schedule_layer, PrefetchDecision};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{sort_loads, CostParams, ExpertLoad, HitStats, Location, Ticks};
use crate::error::{Error, Result};

/// Everything the scheduler sees for one layer. All lists hold host-resident
/// experts only and are kept sorted ascending by tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInputs {
    /// Gating truth of the current layer.
    pub cur: Vec<ExpertLoad>,
    /// Predicted activations of the next layer.
    pub next: Vec<ExpertLoad>,
    /// Predicted activations two layers ahead, used when the next layer
    /// offers nothing worth prefetching.
    pub next2: Vec<ExpertLoad>,
    pub params: CostParams,
    pub stats: HitStats,
}

impl LayerInputs {
    pub fn new(mut cur: Vec<ExpertLoad>, mut next: Vec<ExpertLoad>, params: CostParams, stats: HitStats) -> Self {
        sort_loads(&mut cur);
        sort_loads(&mut next);
        LayerInputs {
            cur,
            next,
            next2: Vec::new(),
            params,
            stats,
        }
    }

    pub fn with_next2(mut self, mut next2: Vec<ExpertLoad>) -> Self {
        sort_loads(&mut next2);
        self.next2 = next2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for list in [&self.cur, &self.next, &self.next2] {
            if list.windows(2).any(|w| (w[0].tokens, w[0].expert) > (w[1].tokens, w[1].expert)) {
                return Err(Error::InvalidArgument("expert list is not sorted ascending by tokens".into()));
            }
            if let Some(l) = list.iter().find(|l| l.location != Location::Host) {
                return Err(Error::InvalidArgument(format!(
                    "expert {} is {:?}; resident and in-flight experts must be excluded",
                    l.expert, l.location
                )));
            }
            if list.iter().any(|l| l.tokens == 0) {
                return Err(Error::InvalidArgument("schedulable experts need at least one token".into()));
            }
        }
        Ok(())
    }
}

/// One evaluated element of the cross-layer sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub expert: usize,
    pub current: bool,
    pub t_g_all: Ticks,
    pub t_c_all: Ticks,
    pub in_queue: bool,
}

/// Intermediate values behind a plan, kept for debugging and tests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub sweep: Vec<SweepPoint>,
    /// GPU and CPU cost of the chosen split.
    pub t_g: Ticks,
    pub t_c: Ticks,
    pub t_gap: i64,
    pub f: f64,
    pub f_int: usize,
    pub xi: Option<f64>,
    /// Prefetch target was widened to two layers ahead.
    pub widened: bool,
    /// Elementary cost evaluations performed.
    pub ops: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerPlan {
    pub cpu_set: Vec<ExpertLoad>,
    /// Suffix `cur[split_index..]`, loaded in this order.
    pub ondemand_seq: Vec<ExpertLoad>,
    /// Hottest first; the last entry is the critical prefetch.
    pub prefetch_seq: Vec<ExpertLoad>,
    pub split_index: usize,
    pub issued_prefetches: usize,
    pub trace: DecisionTrace,
}

impl LayerPlan {
    /// Builds a plan from a split of `cur` and a prefetch list.
    pub fn from_split(cur: &[ExpertLoad], split_index: usize, prefetch_seq: Vec<ExpertLoad>, trace: DecisionTrace) -> Self {
        LayerPlan {
            cpu_set: cur[..split_index].to_vec(),
            ondemand_seq: cur[split_index..].to_vec(),
            issued_prefetches: prefetch_seq.len(),
            prefetch_seq,
            split_index,
            trace,
        }
    }

    /// One-line debug record of the decision.
    pub fn dump_line(&self, stage: usize) -> String {
        let ids = |v: &[ExpertLoad]| v.iter().map(|l| l.expert.to_string()).collect::<Vec<_>>().join(",");
        let t = &self.trace;
        format!(
            "stage={stage} split={} cpu=[{}] ondemand=[{}] prefetch=[{}] t_g={} t_c={} t_gap={} f={:.4} f_int={} xi={} widened={}",
            self.split_index,
            ids(&self.cpu_set),
            ids(&self.ondemand_seq),
            ids(&self.prefetch_seq),
            t.t_g,
            t.t_c,
            t.t_gap,
            t.f,
            t.f_int,
            t.xi.map_or_else(|| "-".to_string(), |x| format!("{x:.3}")),
            t.widened
        )
    }
}

/// Scheduling policy selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchedulerPolicy {
    PreSched,
    LayerGreedy,
    OnDemandOnly,
    FixedPrefetch(usize),
    Oracle,
}

impl SchedulerPolicy {
    /// Plans one layer for every policy except `Oracle`, which needs the
    /// simulator state and is handled there.
    pub fn plan(self, inputs: &LayerInputs) -> Result<LayerPlan> {
        match self {
            SchedulerPolicy::PreSched => schedule_layer(inputs),
            SchedulerPolicy::LayerGreedy => greedy_layer_baseline(inputs),
            SchedulerPolicy::OnDemandOnly => ondemand_only_plan(inputs),
            SchedulerPolicy::FixedPrefetch(c) => fixed_prefetch_plan(inputs, c),
            SchedulerPolicy::Oracle => Err(Error::InvalidArgument(
                "the oracle policy plans through the simulator".into(),
            )),
        }
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerPolicy::PreSched => f.write_str("presched"),
            SchedulerPolicy::LayerGreedy => f.write_str("greedy"),
            SchedulerPolicy::OnDemandOnly => f.write_str("ondemand"),
            SchedulerPolicy::FixedPrefetch(c) => write!(f, "fixed:{c}"),
            SchedulerPolicy::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for SchedulerPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "presched" => Ok(SchedulerPolicy::PreSched),
            "greedy" => Ok(SchedulerPolicy::LayerGreedy),
            "ondemand" => Ok(SchedulerPolicy::OnDemandOnly),
            "oracle" => Ok(SchedulerPolicy::Oracle),
            _ => match s.strip_prefix("fixed:").map(str::parse) {
                Some(Ok(c)) => Ok(SchedulerPolicy::FixedPrefetch(c)),
                _ => Err(Error::InvalidConfig(format!(
                    "unknown policy `{s}` (expected presched, greedy, ondemand, fixed:<c> or oracle)"
                ))),
            },
        }
    }
}

impl Serialize for SchedulerPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SchedulerPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_round_trips_through_text() {
        for p in [
            SchedulerPolicy::PreSched,
            SchedulerPolicy::LayerGreedy,
            SchedulerPolicy::OnDemandOnly,
            SchedulerPolicy::FixedPrefetch(3),
            SchedulerPolicy::Oracle,
        ] {
            assert_eq!(p.to_string().parse::<SchedulerPolicy>().unwrap(), p);
        }
        assert!("fixed:x".parse::<SchedulerPolicy>().is_err());
        assert!("lru".parse::<SchedulerPolicy>().is_err());
    }

    #[test]
    fn inputs_validation_rejects_unsorted_or_resident() {
        let p = CostParams::new(10, 2, 0, 1.0, 0.0).unwrap();
        let mut bad = LayerInputs::new(vec![ExpertLoad::host(0, 0, 3)], vec![], p, HitStats::default());
        assert!(bad.validate().is_ok());
        bad.cur.push(ExpertLoad::host(0, 1, 1));
        assert!(bad.validate().is_err());
        let mut res = LayerInputs::new(vec![ExpertLoad::host(0, 0, 3)], vec![], p, HitStats::default());
        res.cur[0].location = Location::Resident;
        assert!(res.validate().is_err());
    }
}
