use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::hybrid_loss;
use super::net::{LayerNet, NetArch};
use super::pca::pca_fit;
use super::{HotExpertTable, PredictorFeatures};
use crate::error::{Error, Result};
use crate::workload::{sha256_hex, top_k_indices, trace_checksum, LayerGroup, ModelSpec, Trace, TraceStep};

/// Optimiser and compression settings of one layer group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTrain {
    pub lr: f64,
    pub weight_decay: f64,
    pub pca_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the focal term.
    pub lambda: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub width: usize,
    pub dropout: f64,
    /// Std of Gaussian noise added to the reduced hidden features.
    pub noise_std: f64,
    /// Probability of zeroing each input feature.
    pub mask_rate: f64,
    pub input: GroupTrain,
    pub middle: GroupTrain,
    pub output: GroupTrain,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let edge = GroupTrain {
            lr: 1e-3,
            weight_decay: 1e-4,
            pca_dim: 8,
        };
        TrainConfig {
            lambda: 1.0,
            gamma: 2.0,
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 32,
            width: 64,
            dropout: 0.1,
            noise_std: 0.05,
            mask_rate: 0.02,
            input: edge,
            middle: GroupTrain {
                lr: 3e-3,
                weight_decay: 1e-3,
                pca_dim: 16,
            },
            output: edge,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn group(&self, group: LayerGroup) -> &GroupTrain {
        match group {
            LayerGroup::Input => &self.input,
            LayerGroup::Middle => &self.middle,
            LayerGroup::Output => &self.output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return bad("lambda and gamma must be >= 0");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if self.batch_size == 0 || self.width == 0 {
            return bad("batch_size and width must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.mask_rate) || !(self.noise_std >= 0.0) {
            return bad("dropout and mask_rate must lie in [0, 1], noise_std >= 0");
        }
        for g in LayerGroup::ALL {
            let t = self.group(g);
            if !(t.lr >= 0.0 && t.weight_decay >= 0.0) || t.pca_dim == 0 {
                return bad("group lr and weight_decay must be >= 0 and pca_dim >= 1");
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based): linear warmup to
    /// `base` over `warmup_epochs`, then cosine decay towards 0.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return base * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = (self.epochs - self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        base * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps) + weight_decay * params[i];
            params[i] -= lr * update;
        }
    }
}

/// One supervised pair: previous-layer features, target-layer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: PredictorFeatures,
    pub labels: Vec<f64>,
}

/// Trained predictors for every layer of a model. Layer 0 has no in-token
/// predecessor and falls back to activation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LLaPor {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    /// Indexed by target layer; entry 0 is `None`.
    pub nets: Vec<Option<LayerNet>>,
    pub table: HotExpertTable,
    /// Digest over the checksums of the training traces.
    pub trace_checksum: String,
}

fn labels_of(step: &TraceStep, experts: usize) -> Vec<f64> {
    let mut y = vec![0.0; experts];
    for &e in &step.active_experts {
        y[e] = 1.0;
    }
    y
}

fn combined_checksum(traces: &[Trace]) -> String {
    let joined: String = traces.iter().map(trace_checksum).collect();
    sha256_hex(joined.as_bytes())
}

fn check_traces(traces: &[Trace]) -> Result<&ModelSpec> {
    let Some(first) = traces.first() else {
        return Err(Error::Empty("no training traces"));
    };
    if first.spec.num_layers < 2 {
        return Err(Error::InvalidSpec("predictor training needs at least two layers".into()));
    }
    if traces.iter().any(|t| t.spec != first.spec) {
        return Err(Error::InvalidArgument("training traces disagree on the model spec".into()));
    }
    if traces.iter().all(|t| t.steps.is_empty()) {
        return Err(Error::Empty("training traces hold no tokens"));
    }
    Ok(&first.spec)
}

/// Supervised pairs `(layer - 1 features, layer labels)` for one target layer.
pub fn layer_samples(net: &LayerNet, traces: &[Trace]) -> Result<Vec<Sample>> {
    let layer = net.target_layer;
    let mut out = vec![];
    for trace in traces {
        for token in 0..trace.num_tokens() {
            let prev = trace.step(token, layer - 1);
            out.push(Sample {
                features: net.features(&prev.hidden, &prev.active_experts, &prev.gate_weights)?,
                labels: labels_of(trace.step(token, layer), net.experts),
            });
        }
    }
    Ok(out)
}

/// Per-expert weights of the balancing term: add-one smoothed activation
/// counts relative to their layer mean, so a uniform layer weighs 1.
fn balance_freqs(table: &HotExpertTable, layer: usize) -> Vec<f64> {
    let counts: Vec<f64> = table.counts[layer].iter().map(|&c| c as f64 + 1.0).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    counts.iter().map(|c| c / mean).collect()
}

struct LossSpec {
    freqs: Vec<f64>,
    lambda: f64,
    gamma: f64,
}

impl LossSpec {
    /// Hybrid loss at the edges; plain BCE in the middle group.
    fn new(cfg: &TrainConfig, table: &HotExpertTable, net: &LayerNet) -> Self {
        match net.group {
            LayerGroup::Middle => LossSpec {
                freqs: vec![1.0; net.experts],
                lambda: 0.0,
                gamma: 0.0,
            },
            _ => LossSpec {
                freqs: balance_freqs(table, net.target_layer),
                lambda: cfg.lambda,
                gamma: cfg.gamma,
            },
        }
    }
}

fn augment(cfg: &TrainConfig, x: &mut [f64], hidden_len: usize, rng: &mut ChaCha8Rng) {
    if cfg.noise_std > 0.0 {
        for v in &mut x[..hidden_len] {
            *v += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if cfg.mask_rate > 0.0 {
        for v in x.iter_mut() {
            if rng.random::<f64>() < cfg.mask_rate {
                *v = 0.0;
            }
        }
    }
}

/// One pass of minibatch updates over `order`; returns the mean sample loss.
fn run_batches(
    net: &mut LayerNet,
    opt: &mut AdamW,
    samples: &[Sample],
    order: &[usize],
    loss: &LossSpec,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let wd = cfg.group(net.group).weight_decay;
    let hidden_len = net.pca.dim();
    let mut grad = vec![0.0; net.num_params()];
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in chunk {
            let s = &samples[i];
            let mut x = s.features.to_input();
            augment(cfg, &mut x, hidden_len, rng);
            let fwd = net.forward_input(&x, true, rng);
            let (l, dz) = hybrid_loss(&fwd.logits, &s.labels, &loss.freqs, loss.lambda, loss.gamma)?;
            total += l;
            net.backward(&fwd.cache, &dz, &mut grad);
        }
        let scale = 1.0 / chunk.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        opt.step(&mut net.params, &grad, lr, wd);
    }
    Ok(total / order.len().max(1) as f64)
}

/// Fits PCA and trains one predictor per layer `1..L`. Returns the model and
/// the per-epoch mean training loss over all layers.
pub fn train(traces: &[Trace], cfg: &TrainConfig) -> Result<(LLaPor, Vec<f64>)> {
    cfg.validate()?;
    let spec = check_traces(traces)?.clone();
    let table = HotExpertTable::from_traces(traces)?;
    let mut nets = vec![None];
    let mut curve = vec![0.0; cfg.epochs];
    let layers = spec.num_layers;
    for layer in 1..layers {
        let group = spec.group_of(layer);
        let g = cfg.group(group);
        let hidden: Vec<Vec<f64>> = traces
            .iter()
            .flat_map(|t| (0..t.num_tokens()).map(move |tok| t.step(tok, layer - 1).hidden.clone()))
            .collect();
        let pca = pca_fit(&hidden, g.pca_dim.min(spec.hidden_dim).min(hidden.len()))?;
        let arch = NetArch::for_group(group, cfg.width);
        let mut net = LayerNet::new(layer, group, arch, pca, spec.experts_per_layer, cfg.dropout, cfg.seed)?;
        let samples = layer_samples(&net, traces)?;
        let loss = LossSpec::new(cfg, &table, &net);
        let mut opt = AdamW::new(net.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_696e) ^ layer as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for (epoch, slot) in curve.iter_mut().enumerate() {
            order.shuffle(&mut rng);
            let lr = cfg.lr_at(g.lr, epoch);
            *slot += run_batches(&mut net, &mut opt, &samples, &order, &loss, cfg, lr, &mut rng)? / (layers - 1) as f64;
        }
        nets.push(Some(net));
    }
    let model = LLaPor {
        spec,
        config: cfg.clone(),
        nets,
        table,
        trace_checksum: combined_checksum(traces),
    };
    Ok((model, curve))
}

impl LLaPor {
    /// A few extra minibatch steps per layer on fresh traces at each group's
    /// base learning rate, keeping the fitted PCA bases. Returns the mean
    /// loss of every step.
    pub fn fine_tune(&mut self, traces: &[Trace], steps: usize) -> Result<Vec<f64>> {
        let spec = check_traces(traces)?;
        if *spec != self.spec {
            return Err(Error::InvalidArgument("fine-tuning traces come from a different model spec".into()));
        }
        let cfg = self.config.clone();
        let mut losses = vec![0.0; steps];
        let layers = self.nets.len() - 1;
        for net in self.nets.iter_mut().flatten() {
            let samples = layer_samples(net, traces)?;
            let loss = LossSpec::new(&cfg, &self.table, net);
            let mut opt = AdamW::new(net.num_params());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0f1e_7e5e ^ net.target_layer as u64);
            let lr = cfg.group(net.group).lr;
            for slot in losses.iter_mut() {
                let order: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..samples.len())).collect();
                *slot += run_batches(net, &mut opt, &samples, &order, &loss, &cfg, lr, &mut rng)? / layers as f64;
            }
        }
        Ok(losses)
    }

    pub fn net(&self, layer: usize) -> Option<&LayerNet> {
        self.nets.get(layer).and_then(Option::as_ref)
    }

    /// Activation probabilities of `layer` given the routing record of the
    /// same token at `layer - 1`.
    pub fn probabilities(&self, layer: usize, prev: &TraceStep) -> Result<Vec<f64>> {
        let net = self.net(layer).ok_or(Error::IndexOutOfRange {
            index: layer,
            len: self.nets.len(),
        })?;
        let feat = net.features(&prev.hidden, &prev.active_experts, &prev.gate_weights)?;
        Ok(self.net(layer).unwrap().logits(&feat)?.into_iter().map(super::loss::sigmoid).collect())
    }

    /// Top-k experts of `layer`. Layer 0 (or a missing predecessor) uses the
    /// activation-frequency ranking.
    pub fn predict_topk(&self, layer: usize, prev: Option<&TraceStep>, k: usize) -> Result<Vec<usize>> {
        match (self.net(layer), prev) {
            (Some(net), Some(prev)) => {
                let feat = net.features(&prev.hidden, &prev.active_experts, &prev.gate_weights)?;
                Ok(top_k_indices(&net.logits(&feat)?, k))
            }
            _ => Ok(self.table.top_k(layer, k)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_trace, GroupKnobs, TraceGenConfig};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            num_layers: 4,
            experts_per_layer: 6,
            top_k: 2,
            expert_bytes: 1,
            hidden_dim: 16,
            group_bounds: (1, 3),
        }
    }

    fn traces(corr: f64) -> Vec<Trace> {
        let cfg = TraceGenConfig {
            iterations: 16,
            latent_dim: 8,
            ..TraceGenConfig::uniform(GroupKnobs::new(0.8, corr, 0.5))
        };
        vec![generate_trace(&cfg, &tiny_spec(), 4, 3).unwrap()]
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            warmup_epochs: 2,
            width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_matches_closed_form() {
        let cfg = TrainConfig::default();
        for e in 0..cfg.epochs {
            let want = if e < 5 {
                0.01 * (e + 1) as f64 / 5.0
            } else {
                0.005 * (1.0 + (PI * (e - 5) as f64 / 25.0).cos())
            };
            assert!((cfg.lr_at(0.01, e) - want).abs() < 1e-12);
        }
        assert_eq!(cfg.lr_at(0.01, 4), 0.01);
        assert_eq!(cfg.lr_at(0.01, 5), 0.01);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = small_cfg();
        for g in [&mut cfg.input, &mut cfg.middle, &mut cfg.output] {
            g.lr = 0.0;
        }
        let data = traces(1.0);
        let (model, _) = train(&data, &cfg).unwrap();
        cfg.epochs = 0;
        cfg.warmup_epochs = 0;
        let (untrained, _) = train(&data, &cfg).unwrap();
        for (a, b) in model.nets.iter().zip(&untrained.nets) {
            assert_eq!(a.as_ref().map(|n| &n.params), b.as_ref().map(|n| &n.params));
        }
    }

    #[test]
    fn training_reduces_loss_and_repeats() {
        let data = traces(1.0);
        let (a, curve) = train(&data, &small_cfg()).unwrap();
        assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
        let (b, again) = train(&data, &small_cfg()).unwrap();
        assert_eq!(curve, again);
        assert_eq!(a, b);
    }

    #[test]
    fn fine_tuning_moves_parameters_deterministically() {
        let data = traces(0.5);
        let (base, _) = train(&data, &small_cfg()).unwrap();
        let (mut a, mut b) = (base.clone(), base.clone());
        let la = a.fine_tune(&traces(0.9), 3).unwrap();
        assert_eq!(la, b.fine_tune(&traces(0.9), 3).unwrap());
        assert_eq!(la.len(), 3);
        assert_eq!(a, b);
        assert_ne!(a.nets[1], base.nets[1]);
        let mut other = tiny_spec();
        other.experts_per_layer = 7;
        let wrong = generate_trace(&TraceGenConfig { latent_dim: 8, ..Default::default() }, &other, 2, 1).unwrap();
        assert!(a.fine_tune(&[wrong], 1).is_err());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(train(&[], &small_cfg()), Err(Error::Empty(_))));
        let mut bad = small_cfg();
        bad.warmup_epochs = 10;
        assert!(train(&traces(1.0), &bad).is_err());
    }
}
