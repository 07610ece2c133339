//! Property tests for the analytic model and the runtime scheduler.

use proptest::prelude::*;

use headroom::engine::{attention_head, EngineModel, Matrix};
use headroom::memory::{
    activation_bytes, footprint, kv_cache_bytes, kv_on_device_bytes, kv_total_bytes, max_context,
};
use headroom::roofline::{classify, turning_point, Bound, Kernel, Phase};
use headroom::runtime::{
    schedule_sweep, sweep_makespan_law, verify_equivalence, Arena, SimTimeline, StreamClock,
    SweepStep, Tier,
};
use headroom::workload::{find_model, find_profile, ModelSpec, PolicyKind};

fn llama3_8b() -> ModelSpec {
    find_model("llama3-8b").unwrap()
}

fn policies() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![
        Just(PolicyKind::Standard),
        Just(PolicyKind::ChunkedPrefill),
        Just(PolicyKind::KvQuant4),
        Just(PolicyKind::LayerOffload),
        prop_oneof![Just(1u64), Just(2), Just(4), Just(8)]
            .prop_map(|heads_per_group| PolicyKind::HeadOffload { heads_per_group }),
    ]
}

proptest! {
    #[test]
    fn kv_cache_is_linear_in_context(s in 1u64..=1 << 24) {
        let m = llama3_8b();
        prop_assert_eq!(kv_cache_bytes(&m, 2 * s), 2 * kv_cache_bytes(&m, s));
    }

    #[test]
    fn device_kv_never_exceeds_total(policy in policies(), s in 1u64..=1 << 22) {
        let m = llama3_8b();
        let dev = kv_on_device_bytes(&m, policy, s).unwrap();
        let total = kv_total_bytes(&m, policy, s).unwrap();
        prop_assert!(dev <= total);
        if policy.is_offload() {
            prop_assert!(dev < total, "offload must keep less than the whole cache on device");
        } else {
            prop_assert_eq!(dev, total);
        }
    }

    #[test]
    fn head_group_cost_is_monotone(s in 1u64..=1 << 22) {
        let m = llama3_8b();
        let mut prev = 0;
        for g in [1u64, 2, 4, 8] {
            let dev = kv_on_device_bytes(&m, PolicyKind::HeadOffload { heads_per_group: g }, s).unwrap();
            prop_assert!(dev >= prev);
            prev = dev;
        }
    }

    #[test]
    fn device_working_set_is_twice_the_resident_fraction(s in 1u64..=1 << 22) {
        // The staged working set is two copies of one group block: resident
        // fraction g / (L * H_kv) of the whole cache, doubled for ping-pong.
        let m = llama3_8b();
        let total = kv_cache_bytes(&m, s);
        for g in [1u64, 2, 4, 8] {
            let dev = kv_on_device_bytes(&m, PolicyKind::HeadOffload { heads_per_group: g }, s).unwrap();
            prop_assert_eq!(dev, 2 * total * g / (m.num_kv_heads * m.num_layers));
        }
    }

    #[test]
    fn max_context_is_a_tight_boundary(
        policy in prop_oneof![
            Just(PolicyKind::Standard),
            Just(PolicyKind::ChunkedPrefill),
            Just(PolicyKind::KvQuant4),
        ],
        reserve_gib in 0u64..8,
    ) {
        let m = llama3_8b();
        let hw = find_profile("profile-a").unwrap();
        let chunk = 10 * 1024;
        let reserve = reserve_gib << 30;
        let s = max_context(&m, &hw, policy, chunk, reserve).unwrap();
        let at = footprint(&m, &hw, policy, s, chunk).unwrap();
        prop_assert!(at.total_on_device + reserve <= hw.device_capacity);
        let beyond = footprint(&m, &hw, policy, s + 1, chunk).unwrap();
        prop_assert!(beyond.total_on_device + reserve > hw.device_capacity);
    }

    #[test]
    fn activation_scales_with_tokens(t in 0u64..=1 << 22) {
        let m = llama3_8b();
        prop_assert_eq!(activation_bytes(&m, 2 * t), 2 * activation_bytes(&m, t));
    }

    #[test]
    fn classification_consistent_with_turning_point(
        peak_t in 10u64..=400,
        link_gb in 5u64..=60,
    ) {
        let m = llama3_8b();
        let mut hw = find_profile("profile-a").unwrap();
        hw.peak_flops = peak_t as f64 * 1e12;
        hw.link_bw_large = link_gb as f64 * 1e9;
        hw.mem_bw = hw.mem_bw.max(hw.link_bw_large);
        let tp = turning_point(&m, &hw);
        let at = classify(&m, &hw, Phase::Prefill, Kernel::FullLayer, true, tp);
        prop_assert_eq!(at.bound, Bound::Compute);
        if tp > 1 {
            let below = classify(&m, &hw, Phase::Prefill, Kernel::FullLayer, true, tp - 1);
            prop_assert_eq!(below.bound, Bound::Memory);
        }
    }

    #[test]
    fn arena_accounting_balances(ops in proptest::collection::vec((0u64..2048, any::<bool>()), 1..40)) {
        let mut arena = Arena::new(Tier::Device, 16 * 1024);
        let mut live = Vec::new();
        for (bytes, free_one) in ops {
            if free_one && !live.is_empty() {
                let h = live.swap_remove(0);
                arena.free(h).unwrap();
            } else if let Ok(h) = arena.alloc(bytes, "block") {
                live.push(h);
            }
            prop_assert!(arena.used() <= arena.capacity());
            prop_assert_eq!(arena.used(), arena.accounted());
            prop_assert!(arena.peak() >= arena.used());
        }
    }

    #[test]
    fn sweep_schedule_matches_law_and_slot_safety(
        steps in proptest::collection::vec(
            (0u64..200_000_000, 0u64..200_000_000, 0.0f64..0.01),
            1..12,
        )
    ) {
        let hw = find_profile("profile-a").unwrap();
        let steps: Vec<SweepStep> = steps
            .into_iter()
            .map(|(prefetch_bytes, evict_bytes, compute_secs)| SweepStep {
                compute_secs,
                compute_flops: compute_secs * hw.peak_flops,
                prefetch_bytes,
                evict_bytes,
            })
            .collect();
        let mut tl = SimTimeline::default();
        let mut clock = StreamClock::default();
        let end = schedule_sweep(&mut tl, &mut clock, &hw, 0.0, &steps).end;
        let law = sweep_makespan_law(&hw, &steps);
        prop_assert!((end - law).abs() <= 1e-12 * law.max(1.0));
        tl.check_pingpong_safety().map_err(TestCaseError::fail)?;
        tl.assert_resource_bounds();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_outputs_stay_in_value_hull(seed in any::<u64>(), s in 1usize..20) {
        // Each output coordinate is a convex combination of value rows.
        let model = EngineModel::new(&find_model("toy").unwrap(), seed);
        let dh = 8;
        let pool = model.embed_chunk(0, 3 * s.max(2));
        let take = |off: usize, rows: usize| {
            Matrix::from_fn(rows, dh, |r, c| pool.get((off + r) % pool.rows(), c % pool.cols()))
        };
        let q = take(0, s);
        let k = take(s, s);
        let v = take(2 * s, s);
        let out = attention_head(&q, &k, &v, 0).unwrap();
        for c in 0..dh {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for r in 0..s {
                lo = lo.min(v.get(r, c));
                hi = hi.max(v.get(r, c));
            }
            for r in 0..s {
                prop_assert!(out.get(r, c) >= lo - 1e-5 && out.get(r, c) <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn equivalence_holds_across_random_seeds_and_chunks(
        seed in any::<u64>(),
        s in 4u64..=40,
        chunk in 1u64..=16,
    ) {
        let m = find_model("toy").unwrap();
        let hw = find_profile("profile-a").unwrap();
        let policies = [
            PolicyKind::ChunkedPrefill,
            PolicyKind::LayerOffload,
            PolicyKind::HeadOffload { heads_per_group: 1 },
            PolicyKind::HeadOffload { heads_per_group: 2 },
        ];
        let report = verify_equivalence(&m, &hw, s, chunk, &policies, seed, 2).unwrap();
        prop_assert!(report.pass, "{:?}", report.deviations);
    }
}
