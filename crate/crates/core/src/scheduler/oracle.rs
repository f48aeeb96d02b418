use super::presched::hottest;
use super::{DecisionTrace, LayerInputs, LayerPlan};
use crate::cost::Ticks;
use crate::error::{Error, Result};
use crate::sim::Engine;

/// Largest current or predicted list the oracle will enumerate.
pub const ORACLE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub plan: LayerPlan,
    /// Completion tick of the last stage in the horizon.
    pub makespan: Ticks,
    /// Number of `(split, prefetch count)` candidates simulated.
    pub evaluated: usize,
}

/// Exhaustive search over every split and every hot-first prefetch count of
/// the open stage, scoring each by simulating two stages: this one and the
/// next under its best split. Ties go to the smaller split, then the smaller
/// count.
pub fn enumeration_oracle(engine: &Engine<'_>, inputs: &LayerInputs) -> Result<OracleResult> {
    let (n, n_next) = (inputs.cur.len(), inputs.next.len());
    if n > ORACLE_LIMIT || n_next > ORACLE_LIMIT {
        return Err(Error::InstanceTooLarge {
            current: n,
            next: n_next,
            limit: ORACLE_LIMIT,
        });
    }
    let has_next = engine.next_stage() + 1 < engine.num_stages();
    let mut best: Option<(Ticks, usize, usize)> = None;
    let mut evaluated = 0;
    for split in 0..=n {
        for c in 0..=n_next {
            let plan = LayerPlan::from_split(&inputs.cur, split, hottest(&inputs.next, c), DecisionTrace::default());
            let mut e = engine.clone();
            e.finish_stage(&plan)?;
            let makespan = if has_next { best_final_split(&e)? } else { e.last_end() };
            evaluated += 1;
            if best.is_none_or(|(m, _, _)| makespan < m) {
                best = Some((makespan, split, c));
            }
        }
    }
    let (makespan, split, c) = best.expect("at least one candidate");
    let plan = LayerPlan::from_split(&inputs.cur, split, hottest(&inputs.next, c), DecisionTrace::default());
    Ok(OracleResult {
        plan,
        makespan,
        evaluated,
    })
}

fn best_final_split(engine: &Engine<'_>) -> Result<Ticks> {
    let mut e = engine.clone();
    let inputs = e.begin_stage()?;
    let mut best = Ticks::MAX;
    for split in 0..=inputs.cur.len() {
        let mut f = e.clone();
        f.finish_stage(&LayerPlan::from_split(&inputs.cur, split, Vec::new(), DecisionTrace::default()))?;
        best = best.min(f.last_end());
    }
    Ok(best)
}
