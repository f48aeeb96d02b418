//! Turning a routing trace plus a predictor into a simulator scenario.

use std::collections::{BTreeMap, BTreeSet};

use super::engine::{run_scenario, Scenario, SimConfig, SimOutput, StageInput};
use super::metrics::{compute_metrics, Metrics};
use crate::error::{Error, Result};
use crate::predictor::{call_rng, eval_accuracy, oracle_noise_predict, AccuracyMode, AccuracyReport, RoutingPredictor};
use crate::scheduler::SchedulerPolicy;
use crate::workload::Trace;

/// Where next-layer predictions come from during a replay.
#[derive(Clone, Copy)]
pub enum PredictionSource<'a> {
    Model(&'a dyn RoutingPredictor),
    /// Perturbed ground truth with the given per-expert hit rate.
    OracleNoise { hit_rate: f64 },
}

/// One token's predicted experts for stage `target`, made at stage `from`.
/// Only the stage right after `from` inside one iteration sees the
/// predecessor record; farther or cross-iteration targets use the
/// predictor's prior.
fn predict_token(
    trace: &Trace,
    source: PredictionSource<'_>,
    from: usize,
    target: usize,
    token: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let layer = target % trace.spec.num_layers;
    let k = trace.spec.top_k;
    match source {
        PredictionSource::Model(p) => {
            let adjacent = target == from + 1 && layer != 0;
            p.predict(layer, adjacent.then(|| trace.step(token, layer - 1)), k)
        }
        PredictionSource::OracleNoise { hit_rate } => {
            let mut rng = call_rng(seed, from * 2 + (target - from - 1), token);
            let truth = &trace.step(token, layer).active_experts;
            Ok(oracle_noise_predict(truth, trace.spec.experts_per_layer, hit_rate, k, &mut rng))
        }
    }
}

/// Predicted `(expert, tokens)` for stage `target`, aggregated over the batch.
fn predict_stage(
    trace: &Trace,
    source: PredictionSource<'_>,
    from: usize,
    target: usize,
    seed: u64,
) -> Result<Vec<(usize, u32)>> {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for token in trace.batch_tokens(target / trace.spec.num_layers) {
        for e in predict_token(trace, source, from, target, token, seed)? {
            *counts.entry(e).or_default() += 1;
        }
    }
    Ok(counts.into_iter().collect())
}

/// Per-layer accuracy of the one-ahead predictions a replay would use:
/// each token's predicted top-k against its true top-k (`k = k'`, so a hit
/// means the whole set was right). Layer 0 has no predecessor and is left
/// at zero samples.
pub fn prediction_accuracy(trace: &Trace, source: PredictionSource<'_>, seed: u64) -> Result<Vec<AccuracyReport>> {
    let layers = trace.spec.num_layers;
    let k = trace.spec.top_k;
    let mut out = vec![AccuracyReport { hits: 0, total: 0 }; layers];
    for g in 1..trace.iterations() * layers {
        let layer = g % layers;
        if layer == 0 {
            continue;
        }
        for token in trace.batch_tokens(g / layers) {
            let pred = predict_token(trace, source, g - 1, g, token, seed)?;
            let truth = &trace.step(token, layer).active_experts;
            out[layer].total += 1;
            if eval_accuracy(&pred, truth, AccuracyMode::Sliding, k, k) {
                out[layer].hits += 1;
            }
        }
    }
    Ok(out)
}

/// Share of batch-level one-ahead predictions that were activated: the
/// offline estimate the prefetch hit tracker starts from.
pub fn offline_hit_rate(sc: &Scenario) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (g, s) in sc.stages.iter().enumerate() {
        let Some(next) = sc.stages.get(g + 1) else { continue };
        let active: BTreeSet<usize> = next.loads.iter().map(|l| l.0).collect();
        total += s.predicted[0].len();
        hits += s.predicted[0].iter().filter(|(e, _)| active.contains(e)).count();
    }
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// One stage per (iteration, layer), in execution order, with one- and
/// two-ahead predictions attached.
pub fn scenario_from_trace(
    trace: &Trace,
    source: PredictionSource<'_>,
    resident: &BTreeSet<(usize, usize)>,
    seed: u64,
) -> Result<Scenario> {
    trace.validate()?;
    if let PredictionSource::Model(p) = source {
        if p.spec().is_some_and(|s| *s != trace.spec) {
            return Err(Error::InvalidArgument(format!(
                "predictor was trained for a different model than `{}`",
                trace.spec.name
            )));
        }
    }
    let spec = &trace.spec;
    if let Some(&(l, e)) = resident.iter().find(|&&(l, e)| l >= spec.num_layers || e >= spec.experts_per_layer) {
        return Err(Error::InvalidArgument(format!("resident expert ({l}, {e}) is outside the model")));
    }
    let layers = spec.num_layers;
    let total = trace.iterations() * layers;
    let mut stages = Vec::with_capacity(total);
    for g in 0..total {
        let mut predicted = [vec![], vec![]];
        for (d, slot) in predicted.iter_mut().enumerate() {
            let target = g + d + 1;
            if target < total {
                *slot = predict_stage(trace, source, g, target, seed)?;
            }
        }
        stages.push(StageInput {
            layer: g % layers,
            loads: trace.layer_loads(g / layers, g % layers),
            predicted,
        });
    }
    Ok(Scenario {
        num_layers: layers,
        experts_per_layer: spec.experts_per_layer,
        group_bounds: spec.group_bounds,
        batch_size: trace.batch_size,
        iterations: trace.iterations(),
        stages,
        resident: resident.clone(),
    })
}

/// Replays `trace` under `policy` and aggregates the resulting timeline.
pub fn simulate(
    trace: &Trace,
    policy: SchedulerPolicy,
    source: PredictionSource<'_>,
    cfg: &SimConfig,
    resident: &BTreeSet<(usize, usize)>,
    seed: u64,
) -> Result<(SimOutput, Metrics)> {
    let sc = scenario_from_trace(trace, source, resident, seed)?;
    let out = run_scenario(&sc, cfg, policy)?;
    let metrics = compute_metrics(&out.timeline);
    Ok((out, metrics))
}
