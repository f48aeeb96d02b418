//! Next-layer expert activation prediction: the trainable per-layer
//! predictor, simple baselines, accuracy metrics and residency planning.

mod checkpoint;
mod loss;
mod net;
mod pca;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use loss::{hybrid_loss, sigmoid, P_EPS};
pub use net::{gelu, gelu_grad, Forward, ForwardCache, LayerNet, NetArch};
pub use pca::{pca_fit, PcaBasis};
pub use train::{layer_samples, train, AdamW, GroupTrain, LLaPor, Sample, TrainConfig};

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{top_k_indices, ModelSpec, Trace, TraceStep};

/// Inputs of one layer predictor, all taken from the preceding layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorFeatures {
    pub hidden_reduced: Vec<f64>,
    pub active_onehot: Vec<f64>,
    pub gate_weights_prev: Vec<f64>,
}

impl PredictorFeatures {
    /// Concatenation in network input order.
    pub fn to_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.hidden_reduced.len() + 2 * self.active_onehot.len());
        x.extend_from_slice(&self.hidden_reduced);
        x.extend_from_slice(&self.active_onehot);
        x.extend_from_slice(&self.gate_weights_prev);
        x
    }
}

/// Empirical activation counts of every `(layer, expert)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotExpertTable {
    /// `counts[layer][expert]`: tokens that activated the expert.
    pub counts: Vec<Vec<u64>>,
    pub tokens: u64,
    /// All pairs by descending count; ties by layer, then expert.
    pub ranking: Vec<(usize, usize)>,
}

impl HotExpertTable {
    pub fn from_counts(counts: Vec<Vec<u64>>, tokens: u64) -> Self {
        let mut ranking: Vec<(usize, usize)> =
            counts.iter().enumerate().flat_map(|(l, row)| (0..row.len()).map(move |e| (l, e))).collect();
        ranking.sort_by(|a, b| counts[b.0][b.1].cmp(&counts[a.0][a.1]).then(a.cmp(b)));
        HotExpertTable {
            counts,
            tokens,
            ranking,
        }
    }

    pub fn from_traces(traces: &[Trace]) -> Result<Self> {
        let Some(first) = traces.first() else {
            return Err(Error::Empty("no traces for the activation table"));
        };
        let spec = &first.spec;
        if traces.iter().any(|t| t.spec != *spec) {
            return Err(Error::InvalidArgument("traces disagree on the model spec".into()));
        }
        let mut counts = vec![vec![0u64; spec.experts_per_layer]; spec.num_layers];
        let mut tokens = 0;
        for t in traces {
            tokens += t.num_tokens() as u64;
            for s in &t.steps {
                for &e in &s.active_experts {
                    counts[s.layer][e] += 1;
                }
            }
        }
        Ok(Self::from_counts(counts, tokens))
    }

    /// Activation probability per token.
    pub fn frequency(&self, layer: usize, expert: usize) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.counts[layer][expert] as f64 / self.tokens as f64
        }
    }

    /// The `k` most frequent experts of `layer`, ties to the lower index.
    pub fn top_k(&self, layer: usize, k: usize) -> Vec<usize> {
        let row: Vec<f64> = self.counts[layer].iter().map(|&c| c as f64).collect();
        top_k_indices(&row, k)
    }
}

/// Longest prefix of the hotness ranking that fits in `budget_bytes`.
pub fn plan_residency(table: &HotExpertTable, budget_bytes: u64, expert_bytes: u64) -> Vec<(usize, usize)> {
    let n = if expert_bytes == 0 {
        table.ranking.len()
    } else {
        (budget_bytes / expert_bytes).min(table.ranking.len() as u64) as usize
    };
    table.ranking[..n].to_vec()
}

pub fn stats_predict(table: &HotExpertTable, layer: usize, k: usize) -> Vec<usize> {
    table.top_k(layer, k)
}

/// Reuses the previous layer's gate ranking for the next layer.
pub fn gate_reuse_predict(prev_gate_weights: &[f64], k: usize) -> Vec<usize> {
    top_k_indices(prev_gate_weights, k)
}

/// Synthetic predictor for simulator experiments: each of the first `k`
/// true experts survives with probability `hit_rate`; the rest are swapped
/// for random experts outside the true set.
pub fn oracle_noise_predict(truth: &[usize], experts: usize, hit_rate: f64, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let true_set: BTreeSet<usize> = truth.iter().copied().collect();
    let mut out: Vec<usize> = Vec::with_capacity(k);
    let mut misses = 0;
    for &e in truth.iter().take(k) {
        if rng.random_bool(hit_rate.clamp(0.0, 1.0)) {
            out.push(e);
        } else {
            misses += 1;
        }
    }
    let pool: Vec<usize> = (0..experts).filter(|e| !true_set.contains(e)).collect();
    let take = misses.min(pool.len());
    for i in sample(rng, pool.len(), take) {
        out.push(pool[i]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyMode {
    /// Predicted top-k equals the true top-k as a set.
    Exact,
    /// Predicted top-k lies within the true top-k'.
    Sliding,
}

impl FromStr for AccuracyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(AccuracyMode::Exact),
            "sliding" => Ok(AccuracyMode::Sliding),
            _ => Err(Error::InvalidArgument(format!("unknown accuracy mode `{s}` (exact|sliding)"))),
        }
    }
}

/// Scores one prediction against the true ranking (descending gate weight).
pub fn eval_accuracy(predicted: &[usize], truth: &[usize], mode: AccuracyMode, k: usize, k_prime: usize) -> bool {
    let pred: BTreeSet<usize> = predicted.iter().take(k).copied().collect();
    match mode {
        AccuracyMode::Exact => pred == truth.iter().take(k).copied().collect(),
        AccuracyMode::Sliding => {
            let window: BTreeSet<usize> = truth.iter().take(k_prime).copied().collect();
            pred.is_subset(&window)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub hits: usize,
    pub total: usize,
}

impl AccuracyReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Any next-layer routing predictor: gets the same token's record at
/// `layer - 1` (when it exists) and must rank the experts of `layer`.
pub trait RoutingPredictor {
    fn predict(&self, layer: usize, prev: Option<&TraceStep>, k: usize) -> Result<Vec<usize>>;

    /// Model the predictor was built for, when it is tied to one.
    fn spec(&self) -> Option<&ModelSpec> {
        None
    }
}

impl RoutingPredictor for LLaPor {
    fn predict(&self, layer: usize, prev: Option<&TraceStep>, k: usize) -> Result<Vec<usize>> {
        self.predict_topk(layer, prev, k)
    }

    fn spec(&self) -> Option<&ModelSpec> {
        Some(&self.spec)
    }
}

impl RoutingPredictor for HotExpertTable {
    fn predict(&self, layer: usize, _prev: Option<&TraceStep>, k: usize) -> Result<Vec<usize>> {
        Ok(self.top_k(layer, k))
    }
}

/// Previous-layer gate reuse; with no predecessor it ranks nothing.
pub struct GateReuse;

impl RoutingPredictor for GateReuse {
    fn predict(&self, _layer: usize, prev: Option<&TraceStep>, k: usize) -> Result<Vec<usize>> {
        Ok(prev.map(|p| gate_reuse_predict(&p.gate_weights, k)).unwrap_or_default())
    }
}

/// Top-k accuracy of `predictor` over every `(token, layer >= 1)` of a trace.
pub fn trace_accuracy(
    trace: &Trace,
    predictor: &dyn RoutingPredictor,
    mode: AccuracyMode,
    k: usize,
    k_prime: usize,
) -> Result<AccuracyReport> {
    let experts = trace.spec.experts_per_layer;
    if k == 0 || k > experts || k_prime > experts || (mode == AccuracyMode::Sliding && k > k_prime) {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= k' <= {experts} (got k = {k}, k' = {k_prime})"
        )));
    }
    let mut report = AccuracyReport { hits: 0, total: 0 };
    for token in 0..trace.num_tokens() {
        for layer in 1..trace.spec.num_layers {
            let prev = trace.step(token, layer - 1);
            let truth = top_k_indices(&trace.step(token, layer).gate_weights, k_prime.max(k));
            let pred = predictor.predict(layer, Some(prev), k)?;
            report.total += 1;
            if eval_accuracy(&pred, &truth, mode, k, k_prime) {
                report.hits += 1;
            }
        }
    }
    Ok(report)
}

/// Deterministic per-call generator for noise predictors.
pub(crate) fn call_rng(seed: u64, a: usize, b: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (b as u64).rotate_left(32))
}
