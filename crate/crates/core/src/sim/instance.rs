//! Seeded random workloads for property suites and oracle comparisons.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{Scenario, SimConfig, StageInput};
use crate::cost::CostParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceConfig {
    pub experts: usize,
    pub max_tokens: u32,
    /// Probability that each predicted next-layer expert is truly activated.
    pub hit_rate: f64,
    /// Range of GPU compute time as a fraction of the transfer time.
    pub t_g_fraction: (f64, f64),
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            experts: 8,
            max_tokens: 64,
            hit_rate: 0.85,
            t_g_fraction: (0.025, 0.125),
        }
    }
}

fn random_params(rng: &mut ChaCha8Rng, t_g_fraction: (f64, f64)) -> CostParams {
    let t_io: u64 = rng.random_range(1000..=8000);
    let lo = (t_io as f64 * t_g_fraction.0) as u64;
    let hi = ((t_io as f64 * t_g_fraction.1) as u64).clamp(lo, t_io - 1);
    let t_g = rng.random_range(lo..=hi);
    let t_attn = rng.random_range(0..=t_io);
    let beta = rng.random_range(5.0..150.0);
    let startup = rng.random_range(0.0..t_io as f64);
    CostParams::new(t_io, t_g, t_attn, beta, startup).expect("t_g < t_io by construction")
}

/// Skewed token counts: few experts get most tokens.
fn random_loads(rng: &mut ChaCha8Rng, experts: usize, count: usize, max_tokens: u32) -> Vec<(usize, u32)> {
    let mut picked: Vec<usize> = sample(rng, experts, count).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|e| {
            let u: f64 = rng.random();
            (e, 1 + (f64::from(max_tokens - 1) * u * u * u) as u32)
        })
        .collect()
}

/// Keeps each true entry with probability `hit_rate`, otherwise swaps it for
/// a random inactive expert carrying the same token count.
fn noisy_prediction(rng: &mut ChaCha8Rng, truth: &[(usize, u32)], experts: usize, hit_rate: f64) -> Vec<(usize, u32)> {
    let active: BTreeSet<usize> = truth.iter().map(|t| t.0).collect();
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(truth.len());
    for &(e, m) in truth {
        if rng.random_bool(hit_rate.clamp(0.0, 1.0)) {
            used.insert(e);
            out.push((e, m));
            continue;
        }
        let free: Vec<usize> = (0..experts).filter(|x| !active.contains(x) && !used.contains(x)).collect();
        if free.is_empty() {
            used.insert(e);
            out.push((e, m));
        } else {
            let x = free[rng.random_range(0..free.len())];
            used.insert(x);
            out.push((x, m));
        }
    }
    out.sort_unstable();
    out
}

/// A two-layer instance: gating truth for both layers and an imperfect
/// prediction of the second made during the first.
pub fn random_instance(seed: u64, cfg: &InstanceConfig) -> (Scenario, SimConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(&mut rng, cfg.t_g_fraction);
    let n0 = rng.random_range(1..=cfg.experts);
    let n1 = rng.random_range(1..=cfg.experts);
    let l0 = random_loads(&mut rng, cfg.experts, n0, cfg.max_tokens);
    let l1 = random_loads(&mut rng, cfg.experts, n1, cfg.max_tokens);
    let pred = noisy_prediction(&mut rng, &l1, cfg.experts, cfg.hit_rate);
    let sc = Scenario {
        num_layers: 2,
        experts_per_layer: cfg.experts,
        group_bounds: (0, 2),
        batch_size: 1,
        iterations: 1,
        stages: vec![
            StageInput {
                layer: 0,
                loads: l0,
                predicted: [pred, vec![]],
            },
            StageInput {
                layer: 1,
                loads: l1,
                predicted: [vec![], vec![]],
            },
        ],
        resident: BTreeSet::new(),
    };
    let mut sim = SimConfig::new(params);
    sim.initial_hit_rate = cfg.hit_rate;
    (sc, sim)
}

/// A multi-stage scenario with residents, two-ahead predictions and a
/// random CPU slot count.
pub fn random_scenario(seed: u64, stages: usize) -> (Scenario, SimConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7);
    let params = random_params(&mut rng, (0.01, 0.5));
    let num_layers = rng.random_range(2..=4);
    let experts = rng.random_range(4..=8);
    let top = rng.random_range(1..=experts);
    let hit_rate = rng.random_range(0.0..=1.0);
    let mut resident = BTreeSet::new();
    for l in 0..num_layers {
        for e in 0..experts {
            if rng.random_bool(0.15) {
                resident.insert((l, e));
            }
        }
    }
    let loads: Vec<Vec<(usize, u32)>> = (0..stages)
        .map(|_| {
            let n = rng.random_range(0..=top);
            random_loads(&mut rng, experts, n, 48)
        })
        .collect();
    let stages_v = (0..stages)
        .map(|g| {
            let mut predicted = [vec![], vec![]];
            for (d, slot) in predicted.iter_mut().enumerate() {
                if let Some(truth) = loads.get(g + d + 1) {
                    *slot = noisy_prediction(&mut rng, truth, experts, hit_rate);
                }
            }
            StageInput {
                layer: g % num_layers,
                loads: loads[g].clone(),
                predicted,
            }
        })
        .collect();
    let sc = Scenario {
        num_layers,
        experts_per_layer: experts,
        group_bounds: (1, num_layers.max(2) - 1),
        batch_size: rng.random_range(1..=8),
        iterations: stages.div_ceil(num_layers),
        stages: stages_v,
        resident,
    };
    let mut sim = SimConfig::new(params);
    sim.cpu_slots = rng.random_range(1..=2);
    sim.initial_hit_rate = hit_rate;
    (sc, sim)
}
