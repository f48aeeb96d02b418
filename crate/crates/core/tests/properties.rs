use std::collections::BTreeSet;

use proptest::prelude::*;

use moesched::cost::{cpu_cost, cross_layer_costs, sort_loads, CostParams, ExpertLoad, HitStats};
use moesched::predictor::{eval_accuracy, plan_residency, AccuracyMode, HotExpertTable};
use moesched::scheduler::{build_cross_layer_queue, schedule_layer, LayerInputs, SchedulerPolicy};
use moesched::sim::{compute_metrics, random_instance, random_scenario, run_scenario, verify_timeline, InstanceConfig, Timeline};
use moesched::workload::{generate_trace, read_trace, write_trace, Preset, TraceGenConfig};

fn params() -> impl Strategy<Value = CostParams> {
    (1000u64..8000, 0.0f64..1.0, 0u64..8000, 1.0f64..150.0, 0.0f64..4000.0).prop_map(|(t_io, g, t_attn, beta, c)| {
        let t_g = 1 + ((t_io - 2) as f64 * g * 0.2) as u64;
        CostParams::new(t_io, t_g, t_attn, beta, c).unwrap()
    })
}

fn loads(layer: usize) -> impl Strategy<Value = Vec<ExpertLoad>> {
    proptest::collection::btree_map(0usize..16, 1u32..64, 0..8).prop_map(move |m| {
        let mut v: Vec<ExpertLoad> = m.into_iter().map(|(e, t)| ExpertLoad::host(layer, e, t)).collect();
        sort_loads(&mut v);
        v
    })
}

fn makespan(sc: &moesched::sim::Scenario, cfg: &moesched::sim::SimConfig, p: SchedulerPolicy) -> u64 {
    compute_metrics(&run_scenario(sc, cfg, p).unwrap().timeline).makespan
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// With every prediction right, the guarded prefetch never loses to
    /// running the same split without prefetching.
    #[test]
    fn prefetching_never_hurts_with_perfect_prediction(seed in any::<u64>()) {
        let cfg = InstanceConfig { hit_rate: 1.0, ..Default::default() };
        let (sc, sim) = random_instance(seed, &cfg);
        prop_assert!(makespan(&sc, &sim, SchedulerPolicy::PreSched) <= makespan(&sc, &sim, SchedulerPolicy::OnDemandOnly));
    }

    /// The cross-layer queue is exactly the set of sweep positions where the
    /// GPU side is cheaper, and that set is a suffix of the merged list.
    #[test]
    fn gpu_queue_is_a_suffix(p in params(), cur in loads(0), next in loads(1)) {
        let inputs = LayerInputs::new(cur.clone(), next.clone(), p, HitStats::new(0.9));
        let mut all: Vec<ExpertLoad> = cur.iter().chain(&next).copied().collect();
        all.sort_by(|a, b| a.tokens.cmp(&b.tokens).then(a.layer.cmp(&b.layer)).then(a.expert.cmp(&b.expert)));
        let wins: Vec<bool> = (0..all.len())
            .map(|i| {
                let t_g = (all.len() - i) as u64 * p.t_io + p.t_g;
                let t_c: u64 = all[..=i].iter().map(|l| cpu_cost(l.tokens, &p)).sum::<u64>() + p.t_attn;
                t_g < t_c
            })
            .collect();
        let first = wins.iter().position(|&w| w).unwrap_or(all.len());
        prop_assert!(wins[first..].iter().all(|&w| w), "{wins:?}");
        for (i, &w) in wins.iter().enumerate() {
            let (g, c) = cross_layer_costs(i, &all, &p).unwrap();
            prop_assert_eq!(g < c, w);
        }
        let queue = build_cross_layer_queue(&inputs);
        prop_assert_eq!(queue.len(), all.len() - first);
    }

    /// The on-demand set is a suffix of the ascending current list; every
    /// CPU expert is at most as hot as every loaded one.
    #[test]
    fn ondemand_set_is_a_suffix(p in params(), cur in loads(0), next in loads(1)) {
        let inputs = LayerInputs::new(cur, next, p, HitStats::new(0.9));
        let plan = schedule_layer(&inputs).unwrap();
        prop_assert_eq!(&plan.ondemand_seq[..], &inputs.cur[plan.split_index..]);
        prop_assert_eq!(&plan.cpu_set[..], &inputs.cur[..plan.split_index]);
        let max_cpu = plan.cpu_set.iter().map(|l| l.tokens).max().unwrap_or(0);
        let min_gpu = plan.ondemand_seq.iter().map(|l| l.tokens).min().unwrap_or(u32::MAX);
        prop_assert!(max_cpu <= min_gpu);
        let pf: BTreeSet<usize> = plan.prefetch_seq.iter().map(|l| l.expert).collect();
        prop_assert_eq!(pf.len(), plan.prefetch_seq.len());
    }

    /// Growing the budget only adds residents, and the count is the budget
    /// in whole experts.
    #[test]
    fn residency_is_monotone(counts in proptest::collection::vec(proptest::collection::vec(0u64..100, 4), 1..5),
                             b1 in 0u64..20, extra in 0u64..20, bytes in 1u64..1000) {
        let table = HotExpertTable::from_counts(counts.clone(), 100);
        let small = plan_residency(&table, b1 * bytes, bytes);
        let big = plan_residency(&table, (b1 + extra) * bytes, bytes);
        let total = counts.len() * 4;
        prop_assert_eq!(small.len(), (b1 as usize).min(total));
        prop_assert_eq!(&big[..small.len()], &small[..]);
        let set: BTreeSet<_> = big.iter().collect();
        prop_assert_eq!(set.len(), big.len());
        if let (Some(last), Some(out)) = (big.last(), table.ranking.get(big.len())) {
            prop_assert!(counts[last.0][last.1] >= counts[out.0][out.1]);
        }
    }

    /// Accuracy ignores the order inside the predicted top-k and anything
    /// ranked past k.
    #[test]
    fn accuracy_ignores_order_within_top_k(truth in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
                                           pred in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
                                           k in 1usize..6, extra in 0usize..4) {
        let kp = k + extra;
        for mode in [AccuracyMode::Exact, AccuracyMode::Sliding] {
            let base = eval_accuracy(&pred, &truth, mode, k, kp);
            let mut swapped = pred.clone();
            swapped[..k].reverse();
            swapped[k..].reverse();
            prop_assert_eq!(eval_accuracy(&swapped, &truth, mode, k, kp), base);
            let mut t2 = truth.clone();
            t2[..kp].reverse();
            prop_assert_eq!(eval_accuracy(&pred, &t2, AccuracyMode::Sliding, k, kp), eval_accuracy(&pred, &truth, AccuracyMode::Sliding, k, kp));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Every policy produces a legal timeline, and the export format
    /// round-trips it exactly.
    #[test]
    fn random_scenarios_verify_and_round_trip(seed in any::<u64>(), stages in 1usize..8,
                                              policy in prop_oneof![Just(SchedulerPolicy::PreSched), Just(SchedulerPolicy::LayerGreedy),
                                                                    Just(SchedulerPolicy::OnDemandOnly), (0usize..4).prop_map(SchedulerPolicy::FixedPrefetch)]) {
        let (sc, cfg) = random_scenario(seed, stages);
        let out = run_scenario(&sc, &cfg, policy).unwrap();
        let v = verify_timeline(&out.timeline, None);
        prop_assert!(v.is_empty(), "{v:?}");
        let back = Timeline::from_lines(&out.timeline.to_lines()).unwrap();
        prop_assert_eq!(back, out.timeline);
    }
}

#[test]
fn trace_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (i, preset) in Preset::ALL.into_iter().enumerate() {
        let cfg = TraceGenConfig {
            iterations: 2,
            ..Default::default()
        };
        let trace = generate_trace(&cfg, &preset.desk(), 3, i as u64).unwrap();
        let path = dir.path().join(format!("{i}.trace"));
        write_trace(&trace, &path).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);
    }
}
