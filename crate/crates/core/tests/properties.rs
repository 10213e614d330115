use proptest::prelude::*;

use moe_replica_sim::pipeline::schedule;
use moe_replica_sim::placement::{apply_batch, DeviceState};
use moe_replica_sim::predictor::{sparsemax, HashTable};
use moe_replica_sim::simulator::plan_with_fallback;

fn table_strategy() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (2usize..10, 1usize..4, 1usize..40).prop_flat_map(|(experts, layers, tokens)| {
        (
            Just(experts),
            prop::collection::vec(prop::collection::vec(0..experts, tokens), layers),
        )
    })
}

proptest! {
    #[test]
    fn tokens_land_on_resident_slots_of_their_expert(
        (experts, assignment) in table_strategy(),
        next in prop::collection::vec(any::<prop::sample::Index>(), 1..40),
        capacity in 1usize..24,
    ) {
        let layers = assignment.len();
        let tokens = assignment[0].len();
        let mut state = DeviceState::empty(layers, capacity);
        let second: Vec<Vec<usize>> = (0..layers)
            .map(|_| (0..tokens).map(|s| next[s % next.len()].index(experts)).collect())
            .collect();
        for (i, rows) in [assignment, second].into_iter().enumerate() {
            let table = HashTable::from_assignment(i, experts, rows.clone()).unwrap();
            let plan = plan_with_fallback(&table, capacity).unwrap();
            let (placement, _) = apply_batch(&mut state, &table, &plan).unwrap();
            for (l, lp) in placement.layers.iter().enumerate() {
                prop_assert_eq!(lp.token_slots.len(), tokens);
                for (s, &slot) in lp.token_slots.iter().enumerate() {
                    prop_assert_eq!(lp.slots[slot].expert, rows[l][s]);
                }
                let waves = lp.num_waves();
                for w in 0..waves {
                    prop_assert!(lp.slots.iter().filter(|x| x.wave == w).count() <= capacity);
                }
                prop_assert!(state.layers[l].len() <= capacity);
            }
        }
    }

    #[test]
    fn schedule_is_bounded(
        costs in prop::collection::vec((0.0f64..10.0, 0.1f64..10.0), 1..30),
        queue in 1usize..5,
    ) {
        let build: Vec<f64> = costs.iter().map(|c| c.0).collect();
        let inference: Vec<f64> = costs.iter().map(|c| c.1).collect();
        let s = schedule(&build, &inference, queue).unwrap();
        let work: f64 = inference.iter().sum();
        let all_builds: f64 = build.iter().sum();
        prop_assert!(s.total_time >= work - 1e-9);
        prop_assert!(s.total_time >= build[0] + work - 1e-9);
        prop_assert!(s.total_time >= all_builds + inference[inference.len() - 1] - 1e-9);
        prop_assert!(s.total_time <= all_builds + work + 1e-9);
        let stall: f64 = s.stall.iter().sum();
        prop_assert!((s.total_time - work - stall).abs() < 1e-9);
        for i in 0..costs.len() {
            prop_assert!(s.stall[i] >= 0.0);
            prop_assert!(s.start[i] >= s.enqueue[i]);
            if i >= queue {
                // the queue never holds more than `queue` tables
                prop_assert!(s.enqueue[i] >= s.start[i - queue]);
            }
        }
    }

    #[test]
    fn sparsemax_lies_on_the_simplex(z in prop::collection::vec(-20.0f64..20.0, 1..12), shift in -5.0f64..5.0) {
        let p = sparsemax(&z).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = sparsemax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // order preserving
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }
}
