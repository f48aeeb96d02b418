use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{top_k_indices, LayerGroup, ModelSpec, Trace, TraceStep};
use crate::error::{Error, Result};

/// Logit margin by which a map-forced expert beats every other expert.
const FORCED_MARGIN: f64 = 2.0;

/// Generative knobs of one layer group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupKnobs {
    /// Target cosine similarity between adjacent-layer gating inputs.
    pub similarity: f64,
    /// Probability that the top-1 expert follows [`successor_expert`] of the
    /// previous layer's top-1.
    pub routing_correlation: f64,
    /// Zipf exponent of the per-layer hot-expert bias on the logits.
    pub zipf_exponent: f64,
}

impl GroupKnobs {
    pub fn new(similarity: f64, routing_correlation: f64, zipf_exponent: f64) -> Self {
        GroupKnobs {
            similarity,
            routing_correlation,
            zipf_exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceGenConfig {
    pub input: GroupKnobs,
    pub middle: GroupKnobs,
    pub output: GroupKnobs,
    /// Standard deviation of i.i.d. Gaussian noise added to every gate logit.
    pub noise_scale: f64,
    /// Decode iterations; the trace holds `iterations * batch_size` tokens.
    pub iterations: usize,
    /// Dimension of the subspace the hidden states live in.
    pub latent_dim: usize,
    /// Standard deviation of the routing part of the logits.
    pub logit_scale: f64,
    /// Seed of the fixed model parameters (gating matrices, hot-expert
    /// ranks). Traces sharing it come from the same model.
    pub model_seed: u64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        TraceGenConfig {
            input: GroupKnobs::new(0.5, 0.6, 0.4),
            middle: GroupKnobs::new(0.9, 0.2, 1.0),
            output: GroupKnobs::new(0.5, 0.6, 0.4),
            noise_scale: 0.5,
            iterations: 8,
            latent_dim: 16,
            logit_scale: 2.0,
            model_seed: 0,
        }
    }
}

impl TraceGenConfig {
    /// Same knobs for every group.
    pub fn uniform(knobs: GroupKnobs) -> Self {
        TraceGenConfig {
            input: knobs,
            middle: knobs,
            output: knobs,
            ..TraceGenConfig::default()
        }
    }

    pub fn knobs(&self, group: LayerGroup) -> &GroupKnobs {
        match group {
            LayerGroup::Input => &self.input,
            LayerGroup::Middle => &self.middle,
            LayerGroup::Output => &self.output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in LayerGroup::ALL {
            let k = self.knobs(g);
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !unit(k.similarity) || !unit(k.routing_correlation) {
                return Err(Error::InvalidConfig(format!(
                    "{} group: similarity and routing_correlation must lie in [0, 1]",
                    g.name()
                )));
            }
            if !(k.zipf_exponent >= 0.0 && k.zipf_exponent.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{} group: zipf_exponent must be a finite value >= 0",
                    g.name()
                )));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if !(self.logit_scale >= 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidConfig("logit_scale must be >= 0".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// The fixed expert-to-expert routing map: where the top-1 expert of layer
/// `layer - 1` sends a correlated token at `layer`. A rotation that is never
/// the identity when there is more than one expert.
pub fn successor_expert(layer: usize, prev_top1: usize, experts: usize) -> usize {
    if experts <= 1 {
        return 0;
    }
    let shift = 1 + layer % (experts - 1);
    (prev_top1 + shift) % experts
}

/// Fixed per-model parameters derived from `model_seed`.
struct GatingModel {
    /// `hidden_dim x latent_dim`, orthonormal columns, row-major.
    basis: Vec<f64>,
    /// Per layer, `experts x latent_dim` routing rows, row-major.
    gates: Vec<Vec<f64>>,
    /// Per layer, per expert Zipf rank (0 = hottest).
    hot_rank: Vec<Vec<usize>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Modified Gram-Schmidt over `rows`; rows that collapse are replaced by fresh
/// draws until the set is orthonormal.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v = normal_vec(rng, dim);
        for q in &out {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
        }
        if normalize(&mut v) > 1e-8 {
            out.push(v);
        }
    }
    out
}

impl GatingModel {
    fn new(spec: &ModelSpec, latent: usize, model_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0x6d6f_6465_6c5f_7365);
        let cols = orthonormal_rows(&mut rng, latent, spec.hidden_dim);
        let mut basis = vec![0.0; spec.hidden_dim * latent];
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                basis[i * latent + j] = x;
            }
        }
        let experts = spec.experts_per_layer;
        let mut gates = Vec::with_capacity(spec.num_layers);
        let mut hot_rank = Vec::with_capacity(spec.num_layers);
        for _ in 0..spec.num_layers {
            // Orthonormal rows make every expert equally likely under an
            // isotropic latent; wider pools fall back to unit-norm rows.
            let rows = if experts <= latent {
                orthonormal_rows(&mut rng, experts, latent)
            } else {
                (0..experts)
                    .map(|_| {
                        let mut v = normal_vec(&mut rng, latent);
                        normalize(&mut v);
                        v
                    })
                    .collect()
            };
            gates.push(rows.concat());
            let mut order: Vec<usize> = (0..experts).collect();
            for i in (1..experts).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut rank = vec![0; experts];
            for (r, &e) in order.iter().enumerate() {
                rank[e] = r;
            }
            hot_rank.push(rank);
        }
        GatingModel {
            basis,
            gates,
            hot_rank,
        }
    }

    fn embed(&self, latent: &[f64], hidden_dim: usize) -> Vec<f64> {
        let r = latent.len();
        (0..hidden_dim)
            .map(|i| dot(&self.basis[i * r..(i + 1) * r], latent))
            .collect()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Step `u` to the next layer: `rho * u + sqrt(1 - rho^2) * v` with `v` a
/// random unit vector orthogonal to `u`, so the cosine is exactly `rho`.
fn evolve_latent(rng: &mut ChaCha8Rng, u: &[f64], rho: f64) -> Vec<f64> {
    let mut v = normal_vec(rng, u.len());
    if rho >= 1.0 {
        return u.to_vec();
    }
    let p = dot(&v, u);
    v.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
    if normalize(&mut v) < 1e-12 {
        return u.to_vec();
    }
    let s = (1.0 - rho * rho).sqrt();
    let mut next: Vec<f64> = u.iter().zip(&v).map(|(a, b)| rho * a + s * b).collect();
    normalize(&mut next);
    next
}

/// Generates a synthetic routing trace with per-group similarity, routing
/// correlation and hot-expert skew. A pure function of its arguments.
pub fn generate_trace(
    config: &TraceGenConfig,
    spec: &ModelSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Trace> {
    spec.validate()?;
    config.validate()?;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if spec.hidden_dim < 4 {
        return Err(Error::InvalidSpec(format!(
            "hidden_dim {} is below the minimum of 4",
            spec.hidden_dim
        )));
    }
    if config.latent_dim > spec.hidden_dim {
        return Err(Error::InvalidConfig(format!(
            "latent_dim {} exceeds hidden_dim {}",
            config.latent_dim, spec.hidden_dim
        )));
    }

    let model = GatingModel::new(spec, config.latent_dim, config.model_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec.num_layers;
    let experts = spec.experts_per_layer;
    let latent = config.latent_dim;
    let gate_gain = config.logit_scale * (latent as f64).sqrt();
    let tokens = config.iterations * batch_size;
    let mut steps = Vec::with_capacity(tokens * layers);

    for _ in 0..tokens {
        let mut u = normal_vec(&mut rng, latent);
        normalize(&mut u);
        let mut prev_top1 = 0;
        for layer in 0..layers {
            let knobs = config.knobs(spec.group_of(layer));
            if layer > 0 {
                u = evolve_latent(&mut rng, &u, knobs.similarity);
            }
            let rows = &model.gates[layer];
            let mut logits: Vec<f64> = (0..experts)
                .map(|e| {
                    let bias = -knobs.zipf_exponent * ((model.hot_rank[layer][e] + 1) as f64).ln();
                    let noise = rng.sample::<f64, _>(StandardNormal) * config.noise_scale;
                    gate_gain * dot(&rows[e * latent..(e + 1) * latent], &u) + bias + noise
                })
                .collect();
            if layer > 0 {
                let follow = rng.random::<f64>() < knobs.routing_correlation;
                if follow {
                    let target = successor_expert(layer, prev_top1, experts);
                    let best_other = logits
                        .iter()
                        .enumerate()
                        .filter(|&(e, _)| e != target)
                        .map(|(_, &z)| z)
                        .fold(f64::NEG_INFINITY, f64::max);
                    logits[target] = logits[target].max(best_other + FORCED_MARGIN);
                }
            }
            let gate_weights = softmax(&logits);
            let active = top_k_indices(&gate_weights, spec.top_k);
            prev_top1 = active[0];
            steps.push(TraceStep {
                layer,
                hidden: model.embed(&u, spec.hidden_dim),
                gate_weights,
                active_experts: active,
                tokens_per_expert: Vec::new(),
            });
        }
    }

    let mut trace = Trace {
        spec: spec.clone(),
        batch_size,
        steps,
        seed,
    };
    for it in 0..trace.iterations() {
        for layer in 0..layers {
            let loads = trace.layer_loads(it, layer);
            for token in trace.batch_tokens(it) {
                trace.steps[token * layers + layer].tokens_per_expert = loads.clone();
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Preset;

    fn small_spec(layers: usize, experts: usize, k: usize) -> ModelSpec {
        ModelSpec {
            name: "small".into(),
            num_layers: layers,
            experts_per_layer: experts,
            top_k: k,
            expert_bytes: 1,
            hidden_dim: 16,
            group_bounds: crate::workload::default_group_bounds(layers),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(6, 8, 2);
        let cfg = TraceGenConfig {
            iterations: 3,
            latent_dim: 8,
            ..Default::default()
        };
        let a = generate_trace(&cfg, &spec, 4, 11).unwrap();
        let b = generate_trace(&cfg, &spec, 4, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_trace(&cfg, &spec, 4, 12).unwrap();
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = small_spec(6, 8, 2);
        let cfg = TraceGenConfig {
            latent_dim: 8,
            ..Default::default()
        };
        assert!(generate_trace(&cfg, &spec, 0, 1).is_err());
        let mut narrow = spec.clone();
        narrow.hidden_dim = 3;
        let cfg3 = TraceGenConfig {
            latent_dim: 2,
            ..Default::default()
        };
        assert!(generate_trace(&cfg3, &narrow, 1, 1).is_err());
        let mut bad = cfg.clone();
        bad.middle.similarity = 1.5;
        assert!(generate_trace(&bad, &spec, 1, 1).is_err());
    }

    #[test]
    fn successor_is_a_non_identity_permutation() {
        for experts in [2usize, 3, 8, 64] {
            for layer in 1..40 {
                let mut image: Vec<usize> =
                    (0..experts).map(|e| successor_expert(layer, e, experts)).collect();
                assert!(image.iter().enumerate().all(|(e, &s)| s != e));
                image.sort_unstable();
                assert_eq!(image, (0..experts).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn tokens_per_expert_aggregates_the_batch() {
        let spec = Preset::Mixtral.desk();
        let cfg = TraceGenConfig {
            iterations: 2,
            ..Default::default()
        };
        let trace = generate_trace(&cfg, &spec, 5, 3).unwrap();
        for it in 0..2 {
            for layer in 0..spec.num_layers {
                let loads = trace.layer_loads(it, layer);
                let total: u32 = loads.iter().map(|&(_, m)| m).sum();
                assert_eq!(total as usize, 5 * spec.top_k);
                for t in trace.batch_tokens(it) {
                    assert_eq!(trace.step(t, layer).tokens_per_expert, loads);
                }
            }
        }
    }
}
