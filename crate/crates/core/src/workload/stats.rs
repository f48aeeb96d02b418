use serde::{Deserialize, Serialize};

use super::{successor_expert, LayerGroup, Trace};
use crate::error::{Error, Result};

/// Observed routing statistics of one layer group. Fields are `None` when the
/// group has no layer (or no adjacent layer pair) to measure.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    /// Mean cosine similarity between the gating inputs of layer `l - 1` and
    /// `l`, over all tokens and all `l >= 1` in the group.
    pub cosine_similarity: Option<f64>,
    /// Fraction of `(token, l)` pairs whose top-1 expert equals
    /// [`successor_expert`] of the top-1 expert at `l - 1`.
    pub routing_correlation: Option<f64>,
    /// Mean over the group's layers of the hottest expert's share of all
    /// token-to-expert assignments.
    pub hot_expert_share: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceGroupStats {
    pub input: GroupStats,
    pub middle: GroupStats,
    pub output: GroupStats,
}

impl TraceGroupStats {
    pub fn get(&self, group: LayerGroup) -> &GroupStats {
        match group {
            LayerGroup::Input => &self.input,
            LayerGroup::Middle => &self.middle,
            LayerGroup::Output => &self.output,
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn measure_group_stats(trace: &Trace) -> Result<TraceGroupStats> {
    if trace.steps.is_empty() {
        return Err(Error::Empty("trace has no steps"));
    }
    let spec = &trace.spec;
    let tokens = trace.num_tokens();
    let experts = spec.experts_per_layer;
    let measure = |group: LayerGroup| {
        let layers = spec.layers_in(group);
        if layers.is_empty() {
            return GroupStats::default();
        }
        let (mut cos_sum, mut follow, mut pairs) = (0.0, 0usize, 0usize);
        let mut share_sum = 0.0;
        for layer in layers.clone() {
            let mut counts = vec![0usize; experts];
            for t in 0..tokens {
                let step = trace.step(t, layer);
                for &e in &step.active_experts {
                    counts[e] += 1;
                }
                if layer > 0 {
                    let prev = trace.step(t, layer - 1);
                    cos_sum += cosine_similarity(&prev.hidden, &step.hidden);
                    if step.active_experts[0] == successor_expert(layer, prev.active_experts[0], experts) {
                        follow += 1;
                    }
                    pairs += 1;
                }
            }
            let max = counts.iter().copied().max().unwrap_or(0);
            share_sum += max as f64 / (tokens * spec.top_k) as f64;
        }
        let ratio = |x: f64| if pairs == 0 { None } else { Some(x / pairs as f64) };
        GroupStats {
            cosine_similarity: ratio(cos_sum),
            routing_correlation: ratio(follow as f64),
            hot_expert_share: Some(share_sum / layers.len() as f64),
        }
    };
    Ok(TraceGroupStats {
        input: measure(LayerGroup::Input),
        middle: measure(LayerGroup::Middle),
        output: measure(LayerGroup::Output),
    })
}
