//! Model shapes, routing traces and the synthetic trace generator.
//!
//! A [`Trace`] records, for every token and every MoE layer, the gating input
//! (hidden state), the softmax gate weights, the selected top-k experts and
//! the per-expert token counts of the batch the token belongs to. Tokens are
//! grouped into decode iterations of `batch_size` tokens each; steps are stored
//! in `(token, layer)` order.

mod generate;
mod io;
mod stats;

pub use generate::{generate_trace, successor_expert, GroupKnobs, TraceGenConfig};
pub(crate) use io::sha256_hex;
pub use io::{read_trace, trace_checksum, write_trace, TRACE_FORMAT_VERSION};
pub use stats::{cosine_similarity, measure_group_stats, GroupStats, TraceGroupStats};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One mebibyte; model sizes are given in binary units.
pub const MIB: u64 = 1 << 20;
/// One gibibyte.
pub const GIB: u64 = 1 << 30;

/// Hidden width used by the desk-scale presets.
pub const DESK_HIDDEN_DIM: usize = 128;

/// Static shape of an MoE model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub expert_bytes: u64,
    pub hidden_dim: usize,
    /// `(b0, b1)`: layers `[0, b0)` are the input group, `[b0, b1)` the
    /// middle group and `[b1, num_layers)` the output group.
    pub group_bounds: (usize, usize),
}

/// Partition of layers into regions with distinct routing statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Input,
    Middle,
    Output,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Input, LayerGroup::Middle, LayerGroup::Output];

    pub fn index(self) -> usize {
        match self {
            LayerGroup::Input => 0,
            LayerGroup::Middle => 1,
            LayerGroup::Output => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Input => "input",
            LayerGroup::Middle => "middle",
            LayerGroup::Output => "output",
        }
    }
}

/// Default group split: first four layers input, last four output, the rest
/// middle. Shallow models fall back to thirds.
pub fn default_group_bounds(num_layers: usize) -> (usize, usize) {
    if num_layers >= 9 {
        (4, num_layers - 4)
    } else {
        let third = num_layers / 3;
        (third, num_layers - third)
    }
}

/// The four evaluated model configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mixtral,
    Qwen3,
    DeepSeek,
    Moonlight,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Mixtral, Preset::Qwen3, Preset::DeepSeek, Preset::Moonlight];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mixtral => "mixtral",
            Preset::Qwen3 => "qwen3",
            Preset::DeepSeek => "deepseek",
            Preset::Moonlight => "moonlight",
        }
    }

    /// `(layers, routed experts, activated experts, expert bytes)`.
    fn shape(self) -> (usize, usize, usize, u64) {
        match self {
            Preset::Mixtral => (32, 8, 2, 336 * MIB),
            Preset::Qwen3 => (48, 128, 8, 9 * MIB),
            Preset::DeepSeek => (26, 64, 6, 16 * MIB + MIB / 2),
            Preset::Moonlight => (26, 64, 6, 16 * MIB + MIB / 2),
        }
    }

    /// Full layer and expert counts with the desk-scale hidden width.
    pub fn full(self) -> ModelSpec {
        let (layers, experts, k, bytes) = self.shape();
        ModelSpec {
            name: self.name().to_string(),
            num_layers: layers,
            experts_per_layer: experts,
            top_k: k,
            expert_bytes: bytes,
            hidden_dim: DESK_HIDDEN_DIM,
            group_bounds: default_group_bounds(layers),
        }
    }

    /// Shrunk variant for CPU-scale experiments: half the layers, and wide
    /// expert pools cut to a quarter. `top_k` and expert size are kept.
    pub fn desk(self) -> ModelSpec {
        let (layers, experts, k, bytes) = self.shape();
        let layers = layers.div_ceil(2);
        let experts = if experts > 16 { experts / 4 } else { experts };
        ModelSpec {
            name: format!("{}-desk", self.name()),
            num_layers: layers,
            experts_per_layer: experts,
            top_k: k,
            expert_bytes: bytes,
            hidden_dim: DESK_HIDDEN_DIM,
            group_bounds: default_group_bounds(layers),
        }
    }

    /// Parses `mixtral`, `deepseek-desk`, and so on.
    pub fn lookup(name: &str) -> Option<ModelSpec> {
        let (base, desk) = match name.strip_suffix("-desk") {
            Some(base) => (base, true),
            None => (name, false),
        };
        let preset = Preset::ALL.into_iter().find(|p| p.name() == base)?;
        Some(if desk { preset.desk() } else { preset.full() })
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_layers == 0 || self.experts_per_layer == 0 || self.top_k == 0 {
            return bad("layer, expert and top-k counts must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.expert_bytes == 0 {
            return bad("hidden_dim and expert_bytes must be at least 1".into());
        }
        if self.top_k > self.experts_per_layer {
            return bad(format!(
                "top_k {} exceeds experts_per_layer {}",
                self.top_k, self.experts_per_layer
            ));
        }
        let (b0, b1) = self.group_bounds;
        if b0 >= b1 || b1 > self.num_layers {
            return bad(format!(
                "group bounds ({b0}, {b1}) must be strictly increasing within [0, {}]",
                self.num_layers
            ));
        }
        Ok(())
    }

    pub fn group_of(&self, layer: usize) -> LayerGroup {
        let (b0, b1) = self.group_bounds;
        if layer < b0 {
            LayerGroup::Input
        } else if layer < b1 {
            LayerGroup::Middle
        } else {
            LayerGroup::Output
        }
    }

    pub fn layers_in(&self, group: LayerGroup) -> std::ops::Range<usize> {
        let (b0, b1) = self.group_bounds;
        match group {
            LayerGroup::Input => 0..b0,
            LayerGroup::Middle => b0..b1,
            LayerGroup::Output => b1..self.num_layers,
        }
    }
}

/// Routing record for one token at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub layer: usize,
    /// Gating input of this layer.
    pub hidden: Vec<f64>,
    /// Softmax gate output over all experts of the layer.
    pub gate_weights: Vec<f64>,
    /// Top-k expert indices by descending gate weight.
    pub active_experts: Vec<usize>,
    /// Tokens routed to each expert of this layer across the token's batch,
    /// sorted by expert index.
    pub tokens_per_expert: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub spec: ModelSpec,
    pub batch_size: usize,
    pub steps: Vec<TraceStep>,
    pub seed: u64,
}

impl Trace {
    pub fn num_tokens(&self) -> usize {
        self.steps.len() / self.spec.num_layers
    }

    /// Number of decode iterations (full batches) in the trace.
    pub fn iterations(&self) -> usize {
        if self.batch_size == 0 {
            0
        } else {
            self.num_tokens() / self.batch_size
        }
    }

    pub fn step(&self, token: usize, layer: usize) -> &TraceStep {
        &self.steps[token * self.spec.num_layers + layer]
    }

    /// Token indices of one decode iteration.
    pub fn batch_tokens(&self, iteration: usize) -> std::ops::Range<usize> {
        let start = iteration * self.batch_size;
        start..start + self.batch_size
    }

    /// Activated experts of `layer` in `iteration` with their token counts,
    /// ascending by expert index.
    pub fn layer_loads(&self, iteration: usize, layer: usize) -> Vec<(usize, u32)> {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        for token in self.batch_tokens(iteration) {
            for &e in &self.step(token, layer).active_experts {
                *counts.entry(e).or_default() += 1;
            }
        }
        counts.into_iter().collect()
    }

    /// Structural checks: step coverage, top-k consistency and gate
    /// normalisation.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let layers = self.spec.num_layers;
        if self.steps.len() % layers != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} steps do not cover {} layers per token",
                self.steps.len(),
                layers
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.layer != i % layers {
                return Err(Error::InvalidArgument(format!(
                    "step {i} has layer {} but (token, layer) order requires {}",
                    step.layer,
                    i % layers
                )));
            }
            if step.gate_weights.len() != self.spec.experts_per_layer {
                return Err(Error::ShapeMismatch {
                    expected: self.spec.experts_per_layer,
                    actual: step.gate_weights.len(),
                });
            }
            if step.hidden.len() != self.spec.hidden_dim {
                return Err(Error::ShapeMismatch {
                    expected: self.spec.hidden_dim,
                    actual: step.hidden.len(),
                });
            }
            let sum: f64 = step.gate_weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || step.gate_weights.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "step {i}: gate weights are not a probability vector (sum {sum})"
                )));
            }
            if step.active_experts != top_k_indices(&step.gate_weights, self.spec.top_k) {
                return Err(Error::InvalidArgument(format!(
                    "step {i}: active experts are not the top-{} gate weights",
                    self.spec.top_k
                )));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_reported_shapes() {
        let m = Preset::Mixtral.full();
        assert_eq!((m.num_layers, m.experts_per_layer, m.top_k), (32, 8, 2));
        assert_eq!(m.expert_bytes, 336 * MIB);
        let d = Preset::DeepSeek.full();
        assert_eq!((d.num_layers, d.experts_per_layer, d.top_k), (26, 64, 6));
        let q = Preset::Qwen3.full();
        assert_eq!((q.num_layers, q.experts_per_layer, q.top_k), (48, 128, 8));
        for p in Preset::ALL {
            p.full().validate().unwrap();
            p.desk().validate().unwrap();
        }
        assert_eq!(Preset::lookup("deepseek-desk").unwrap().experts_per_layer, 16);
        assert!(Preset::lookup("gpt").is_none());
    }

    #[test]
    fn group_partition_covers_every_layer_once() {
        let spec = Preset::Mixtral.full();
        let mut seen = vec![0; spec.num_layers];
        for g in LayerGroup::ALL {
            for l in spec.layers_in(g) {
                assert_eq!(spec.group_of(l), g);
                seen[l] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(spec.group_of(0), LayerGroup::Input);
        assert_eq!(spec.group_of(3), LayerGroup::Input);
        assert_eq!(spec.group_of(4), LayerGroup::Middle);
        assert_eq!(spec.group_of(28), LayerGroup::Output);
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        let mut s = Preset::Mixtral.full();
        s.top_k = 9;
        assert!(s.validate().is_err());
        let mut s = Preset::Mixtral.full();
        s.group_bounds = (10, 10);
        assert!(s.validate().is_err());
        let mut s = Preset::Mixtral.full();
        s.group_bounds = (4, 33);
        assert!(s.validate().is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.5, 0.0], 2), vec![2, 0]);
        assert_eq!(top_k_indices(&[0.1, 0.3, 0.3, 0.3], 3), vec![1, 2, 3]);
    }
}
