//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a result disagrees with its recorded status: any failure
//! outside `KNOWN_UNMET`, or a pass of something listed there.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use moesched::cost::{cpu_cost, fit_cost_params, sort_loads, CostParams, ExpertLoad, HitStats};
use moesched::predictor::{
    hybrid_loss, plan_residency, sigmoid, train, trace_accuracy, AccuracyMode, HotExpertTable, RoutingPredictor, TrainConfig,
};
use moesched::scheduler::{build_cross_layer_queue, LayerInputs, SchedulerPolicy};
use moesched::sim::{
    compute_metrics, offline_hit_rate, random_instance, random_scenario, replay_golden, run_scenario, scenario_from_trace,
    verify_timeline, InstanceConfig, PredictionSource, Scenario, SimConfig, GOLDEN_IDS,
};
use moesched::workload::{generate_trace, GroupKnobs, Preset, TraceGenConfig};

/// Sub-criteria that this implementation does not meet; see the README.
const KNOWN_UNMET: &[&str] = &["2.within10", "2.dominance"];

const GOLDEN_BUDGET: Duration = Duration::from_secs(1);
const ORACLE_INSTANCES: u64 = 1000;
const ORACLE_WITHIN: f64 = 0.10;
const ORACLE_WITHIN_SHARE: f64 = 0.90;
const ORACLE_MEDIAN: f64 = 0.05;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const ENSEMBLE_SEEDS: u64 = 100;
const ENSEMBLE_BATCH: usize = 32;
const SKEW_ZIPF: f64 = 1.5;
const SIM_RUNS: u64 = 10_000;
const SIM_BUDGET: Duration = Duration::from_secs(120);
const FIT_EXACT_TOL: f64 = 1e-9;
const FIT_NOISE: f64 = 0.01;
const FIT_PARAM_TOL: f64 = 0.02;
const FIT_R2: f64 = 0.99;
const SUFFIX_INSTANCES: u64 = 1000;
const GRAD_INSTANCES: u64 = 100;
const GRAD_REL_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-9;
const TOP1_TARGET: f64 = 0.99;
const TRAIN_BUDGET: Duration = Duration::from_secs(60);
const LEARN_ITERATIONS: usize = 128;
const LEARN_BATCH: usize = 16;
const SLIDING_MARGIN: f64 = 0.10;
const GIB: u64 = 1 << 30;

struct Check {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn check(id: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        id,
        passed,
        detail: detail.into(),
    }
}

fn makespan(sc: &Scenario, cfg: &SimConfig, p: SchedulerPolicy) -> u64 {
    compute_metrics(&run_scenario(sc, cfg, p).unwrap().timeline).makespan
}

fn golden() -> Vec<Check> {
    let t0 = Instant::now();
    let mut exact = 0;
    let mut mismatched = Vec::new();
    let mut makespans = std::collections::BTreeMap::new();
    for id in GOLDEN_IDS {
        let (rep, _) = replay_golden(id).unwrap();
        if rep.passed() {
            exact += 1;
        } else {
            mismatched.push(id);
        }
        makespans.insert(id, rep.runs[0].makespan);
    }
    let (layer, cross) = (makespans["layer-by-layer"], makespans["cross-layer"]);
    let elapsed = t0.elapsed();
    vec![
        check("1.exact", mismatched.is_empty(), format!("{exact}/{} scenarios tick-exact {mismatched:?}", GOLDEN_IDS.len())),
        check("1.cross<layer", cross < layer, format!("cross-layer {cross} < layer-by-layer {layer}")),
        check("1.runtime", elapsed < GOLDEN_BUDGET, format!("{elapsed:.2?} < {GOLDEN_BUDGET:?}")),
    ]
}

fn oracle_gap() -> Vec<Check> {
    let t0 = Instant::now();
    let mut gaps = Vec::new();
    let mut worse = 0;
    for seed in 0..ORACLE_INSTANCES {
        let (sc, cfg) = random_instance(seed, &InstanceConfig::default());
        let pre = makespan(&sc, &cfg, SchedulerPolicy::PreSched);
        let opt = makespan(&sc, &cfg, SchedulerPolicy::Oracle);
        if pre > makespan(&sc, &cfg, SchedulerPolicy::OnDemandOnly) {
            worse += 1;
        }
        gaps.push((pre as f64 - opt as f64) / opt as f64);
    }
    let elapsed = t0.elapsed();
    let within = gaps.iter().filter(|&&g| g <= ORACLE_WITHIN).count();
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    let need = (ORACLE_WITHIN_SHARE * ORACLE_INSTANCES as f64).ceil() as usize;
    vec![
        check("2.within10", within >= need, format!("{within}/{ORACLE_INSTANCES} within {ORACLE_WITHIN} of optimum (need {need})")),
        check("2.median", median <= ORACLE_MEDIAN, format!("median gap {:.4}% <= {}%", 100.0 * median, 100.0 * ORACLE_MEDIAN)),
        check("2.dominance", worse == 0, format!("{worse}/{ORACLE_INSTANCES} instances worse than on-demand only")),
        check("2.runtime", elapsed < ORACLE_BUDGET, format!("{elapsed:.2?} < {ORACLE_BUDGET:?}")),
    ]
}

fn trace_config(knobs: Option<GroupKnobs>, iterations: usize) -> TraceGenConfig {
    let mut cfg = TraceGenConfig {
        iterations,
        ..Default::default()
    };
    if let Some(k) = knobs {
        cfg.input = k;
        cfg.middle = k;
        cfg.output = k;
    }
    cfg
}

/// Mean relative makespan gain of PreSched over LayerGreedy, with the
/// number of seeds where PreSched is strictly faster.
fn ensemble_gain(gen: &TraceGenConfig, params: CostParams) -> (f64, u64) {
    let spec = Preset::DeepSeek.desk();
    let profile = generate_trace(&TraceGenConfig { iterations: 8, ..gen.clone() }, &spec, ENSEMBLE_BATCH, 10_000).unwrap();
    let (model, _) = train(std::slice::from_ref(&profile), &TrainConfig::default()).unwrap();
    let source = PredictionSource::Model(&model as &dyn RoutingPredictor);
    let mut cfg = SimConfig::new(params);
    cfg.initial_hit_rate = offline_hit_rate(&scenario_from_trace(&profile, source, &BTreeSet::new(), 0).unwrap());
    let (mut pre, mut greedy, mut wins) = (0.0, 0.0, 0);
    for seed in 1..=ENSEMBLE_SEEDS {
        let trace = generate_trace(gen, &spec, ENSEMBLE_BATCH, seed).unwrap();
        let sc = scenario_from_trace(&trace, source, &BTreeSet::new(), seed).unwrap();
        let (a, b) = (makespan(&sc, &cfg, SchedulerPolicy::PreSched) as f64, makespan(&sc, &cfg, SchedulerPolicy::LayerGreedy) as f64);
        pre += a;
        greedy += b;
        wins += u64::from(a < b);
    }
    ((greedy - pre) / greedy, wins)
}

fn directional() -> Vec<Check> {
    // Same similarity and correlation as the defaults, sharper hot-expert skew.
    let mut skewed = trace_config(None, 4);
    for g in [&mut skewed.input, &mut skewed.middle, &mut skewed.output] {
        g.zipf_exponent = SKEW_ZIPF;
    }
    let base = CostParams::new(4000, 200, 3000, 40.0, 500.0).unwrap();
    let scaled = CostParams::new(700, 50, 300, 25.0, 150.0).unwrap();
    let mut out = Vec::new();
    for (name, p) in [("default costs", base), ("expert-size costs", scaled)] {
        let (gain, wins) = ensemble_gain(&skewed, p);
        out.push(check(
            "3.presched<greedy",
            gain > 0.0,
            format!("{name}: mean gain {:+.3}% over {ENSEMBLE_SEEDS} seeds, faster on {wins}", 100.0 * gain),
        ));
    }
    let (gain, wins) = ensemble_gain(&trace_config(None, 4), base);
    println!("[INFO] 3 unskewed knobs, default costs: mean gain {:+.3}%, faster on {wins}/{ENSEMBLE_SEEDS}", 100.0 * gain);
    out
}

fn simulator() -> Vec<Check> {
    let t0 = Instant::now();
    let policies = [
        SchedulerPolicy::PreSched,
        SchedulerPolicy::LayerGreedy,
        SchedulerPolicy::OnDemandOnly,
        SchedulerPolicy::FixedPrefetch(2),
    ];
    let (mut violations, mut nondeterministic) = (0usize, 0usize);
    for run in 0..SIM_RUNS {
        let (sc, cfg) = random_scenario(run / 4, 1 + (run / 4 % 8) as usize);
        let policy = policies[(run % 4) as usize];
        let expected: BTreeSet<(usize, usize)> =
            sc.stages.iter().enumerate().flat_map(|(g, s)| s.loads.iter().map(move |&(e, _)| (g, e))).collect();
        let a = run_scenario(&sc, &cfg, policy).unwrap();
        violations += verify_timeline(&a.timeline, Some(&expected)).len();
        let b = run_scenario(&sc, &cfg, policy).unwrap();
        if a.timeline.to_lines() != b.timeline.to_lines() {
            nondeterministic += 1;
        }
    }
    let elapsed = t0.elapsed();
    vec![
        check("4.verify", violations == 0, format!("{violations} violations over {SIM_RUNS} simulations")),
        check("4.determinism", nondeterministic == 0, format!("{nondeterministic} reruns differ")),
        check("4.runtime", elapsed < SIM_BUDGET, format!("{elapsed:.2?} < {SIM_BUDGET:?}")),
    ]
}

fn cost_model() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut exact_err, mut noisy_err, mut min_r2) = (0.0f64, 0.0f64, 1.0f64);
    for _ in 0..50 {
        let beta = rng.random_range(10.0..100.0);
        let c = rng.random_range(200.0..2000.0);
        let tokens: Vec<u32> = (1..=64).flat_map(|m| [m; 4]).collect();
        let exact: Vec<(u32, f64)> = tokens.iter().map(|&m| (m, beta * f64::from(m) + c)).collect();
        let fit = fit_cost_params(&exact).unwrap();
        exact_err = exact_err.max(((fit.beta - beta) / beta).abs()).max(((fit.startup - c) / c).abs());
        let noise = Normal::new(0.0, FIT_NOISE).unwrap();
        let noisy: Vec<(u32, f64)> = exact.iter().map(|&(m, t)| (m, t * (1.0 + noise.sample(&mut rng)))).collect();
        let fit = fit_cost_params(&noisy).unwrap();
        noisy_err = noisy_err.max(((fit.beta - beta) / beta).abs()).max(((fit.startup - c) / c).abs());
        min_r2 = min_r2.min(fit.r_squared);
    }

    // Suffix oracle: the positions where loading is cheaper form a suffix of
    // the merged list, and the queue is exactly that suffix.
    let mut broken = 0;
    for seed in 0..SUFFIX_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_io = rng.random_range(1000..8000u64);
        let p = CostParams::new(t_io, t_io / 20, rng.random_range(0..t_io), rng.random_range(5.0..150.0), rng.random_range(0.0..t_io as f64)).unwrap();
        let mut list = |layer: usize| {
            let n = rng.random_range(0..=8usize);
            let mut v: Vec<ExpertLoad> = (0..n).map(|e| ExpertLoad::host(layer, e, rng.random_range(1..64))).collect();
            sort_loads(&mut v);
            v
        };
        let (cur, next) = (list(0), list(1));
        let mut all: Vec<ExpertLoad> = cur.iter().chain(&next).copied().collect();
        all.sort_by(|a, b| a.tokens.cmp(&b.tokens).then(a.layer.cmp(&b.layer)).then(a.expert.cmp(&b.expert)));
        let wins: Vec<bool> = (0..all.len())
            .map(|i| (all.len() - i) as u64 * p.t_io + p.t_g < all[..=i].iter().map(|l| cpu_cost(l.tokens, &p)).sum::<u64>() + p.t_attn)
            .collect();
        let first = wins.iter().position(|&w| w).unwrap_or(all.len());
        let queue = build_cross_layer_queue(&LayerInputs::new(cur, next, p, HitStats::new(0.9)));
        let same = queue.len() == all.len() - first && queue.iter().zip(&all[first..]).all(|(q, a)| (q.layer, q.expert) == (a.layer, a.expert));
        if !wins[first..].iter().all(|&w| w) || !same {
            broken += 1;
        }
    }
    vec![
        check("5.exact", exact_err <= FIT_EXACT_TOL, format!("noiseless max relative error {exact_err:.2e} <= {FIT_EXACT_TOL:e}")),
        check("5.noisy", noisy_err <= FIT_PARAM_TOL && min_r2 >= FIT_R2, format!("1% noise: max relative error {:.3}% <= {}%, min R2 {min_r2:.5} >= {FIT_R2}", 100.0 * noisy_err, 100.0 * FIT_PARAM_TOL)),
        check("5.suffix", broken == 0, format!("{broken}/{SUFFIX_INSTANCES} instances break the suffix property")),
    ]
}

fn loss_numerics() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut max_rel = 0.0f64;
    let mut identity_err = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let n = rng.random_range(2..=16);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let (lambda, gamma) = (rng.random_range(0.0..2.0), rng.random_range(0.0..3.0));
        let (_, g) = hybrid_loss(&z, &y, &f, lambda, gamma).unwrap();
        for i in 0..n {
            let h = 1e-6 * z[i].abs().max(1.0);
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            let fd = (hybrid_loss(&zp, &y, &f, lambda, gamma).unwrap().0 - hybrid_loss(&zm, &y, &f, lambda, gamma).unwrap().0) / (2.0 * h);
            max_rel = max_rel.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8));
        }
        // Independent BCE with per-expert weights.
        let bce = |w: &[f64]| {
            z.iter().zip(&y).zip(w).map(|((&z, &y), &w)| {
                let p = sigmoid(z);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / w
            }).sum::<f64>() / n as f64
        };
        let ones = vec![1.0; n];
        let (plain, _) = hybrid_loss(&z, &y, &ones, lambda, 0.0).unwrap();
        identity_err = identity_err.max((plain - (1.0 + lambda) * bce(&ones)).abs());
        let (expert_only, _) = hybrid_loss(&z, &y, &f, 0.0, gamma).unwrap();
        identity_err = identity_err.max((expert_only - bce(&f)).abs());
    }
    vec![
        check("6.gradient", max_rel <= GRAD_REL_TOL, format!("max relative error {max_rel:.2e} <= {GRAD_REL_TOL:e} over {GRAD_INSTANCES} instances")),
        check("6.identities", identity_err <= IDENTITY_TOL, format!("max identity error {identity_err:.2e} <= {IDENTITY_TOL:e}")),
    ]
}

fn learning() -> Vec<Check> {
    let spec = Preset::DeepSeek.desk();
    let deterministic = trace_config(Some(GroupKnobs::new(0.5, 1.0, 0.5)), LEARN_ITERATIONS);
    let trace = generate_trace(&deterministic, &spec, LEARN_BATCH, 1).unwrap();
    let t0 = Instant::now();
    let (model, _) = train(std::slice::from_ref(&trace), &TrainConfig::default()).unwrap();
    let elapsed = t0.elapsed();
    let top1 = trace_accuracy(&trace, &model, AccuracyMode::Sliding, 1, spec.top_k).unwrap().rate();
    let argmax = trace_accuracy(&trace, &model, AccuracyMode::Exact, 1, 1).unwrap().rate();
    println!("[INFO] 7 deterministic routing: exact argmax agreement {:.2}%", 100.0 * argmax);

    let mixed = trace_config(None, LEARN_ITERATIONS);
    let train_trace = generate_trace(&mixed, &spec, LEARN_BATCH, 1).unwrap();
    let held_out = generate_trace(&mixed, &spec, LEARN_BATCH, 2).unwrap();
    let (model, _) = train(std::slice::from_ref(&train_trace), &TrainConfig::default()).unwrap();
    let table = HotExpertTable::from_traces(std::slice::from_ref(&train_trace)).unwrap();
    let sliding = |p: &dyn RoutingPredictor| trace_accuracy(&held_out, p, AccuracyMode::Sliding, 4, 6).unwrap().rate();
    let (ours, stats) = (sliding(&model), sliding(&table));
    vec![
        check("7.top1", top1 >= TOP1_TARGET, format!("top-1 within the active set {:.2}% >= {}% on the training trace", 100.0 * top1, 100.0 * TOP1_TARGET)),
        check("7.runtime", elapsed < TRAIN_BUDGET, format!("30 epochs in {elapsed:.2?} < {TRAIN_BUDGET:?}")),
        check("7.sliding", ours - stats >= SLIDING_MARGIN, format!("held-out top-4 within top-6: predictor {:.2}% vs statistics {:.2}% (margin >= {} pp)", 100.0 * ours, 100.0 * stats, 100.0 * SLIDING_MARGIN)),
    ]
}

fn residency() -> Vec<Check> {
    let spec = Preset::Mixtral.full();
    let trace = generate_trace(&trace_config(None, 2), &spec, 4, 3).unwrap();
    let table = HotExpertTable::from_traces(std::slice::from_ref(&trace)).unwrap();
    let one = plan_residency(&table, GIB, spec.expert_bytes).len();
    let mut prev: Vec<(usize, usize)> = Vec::new();
    let mut monotone = true;
    for step in 0..=256u64 {
        let cur = plan_residency(&table, step * GIB / 4, spec.expert_bytes);
        monotone &= cur.len() >= prev.len() && cur[..prev.len()] == prev[..];
        prev = cur;
    }
    vec![
        check("8.count", one == 3, format!("{one} residents for 1 GiB at {} MiB per expert", spec.expert_bytes >> 20)),
        check("8.monotone", monotone, "plans nest as the budget grows from 0 to 64 GiB"),
    ]
}

fn main() {
    let criteria: [(&str, fn() -> Vec<Check>); 8] = [
        ("golden scenarios", golden),
        ("oracle gap", oracle_gap),
        ("directional gain", directional),
        ("simulator properties", simulator),
        ("cost model", cost_model),
        ("loss numerics", loss_numerics),
        ("predictor learning", learning),
        ("residency planner", residency),
    ];
    let mut surprises = Vec::new();
    for (n, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let checks = run();
        let all = checks.iter().all(|c| c.passed);
        println!("[{}] AC{} {name} ({:.1?})", if all { "PASS" } else { "FAIL" }, n + 1, t0.elapsed());
        for c in checks {
            let known = KNOWN_UNMET.contains(&c.id);
            let tag = match (c.passed, known) {
                (true, false) => "pass",
                (false, true) => "FAIL, known",
                (false, false) => "FAIL",
                (true, true) => "pass, listed as unmet",
            };
            println!("    {:<18} {tag}: {}", c.id, c.detail);
            if c.passed == known {
                surprises.push(c.id);
            }
        }
    }
    if !surprises.is_empty() {
        println!("unexpected results: {surprises:?}");
        std::process::exit(1);
    }
}
