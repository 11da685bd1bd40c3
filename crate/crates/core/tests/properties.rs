//! Randomized property tests over the numeric core, the retrieval metrics,
//! the schedule, and checkpoint persistence.

use proptest::prelude::*;
use top_reid::checkpoint;
use top_reid::config::OptimizerConfig;
use top_reid::eval::{compute_map_cmc, distance_matrix, Distance, EvalEntry, EvalSplit};
use top_reid::optim::lr_at;
use top_reid::tensor::{Array, ParamStore, Tape};

fn finite_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
        let mut vals = Vec::with_capacity(rows * cols);
        let mut state = seed | 1;
        for _ in 0..rows * cols {
            // xorshift; values span a wide range to stress normalization
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            vals.push(((state % 2001) as f64 - 1000.0) / 50.0);
        }
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Array::new(vec![rows, cols], vals).unwrap());
        let s = tape.softmax(x);
        let out = tape.value(s).data();
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
        }
    }

    #[test]
    fn cmc_is_monotone_and_bounds_hold(
        q_ids in prop::collection::vec(0u32..4, 1..4),
        g_ids in prop::collection::vec(0u32..4, 2..10),
        seed in any::<u64>(),
    ) {
        let feat = |id: u32, salt: u64| -> Vec<f64> {
            let mut v = Vec::with_capacity(4);
            let mut state = (id as u64 + 1).wrapping_mul(seed | 1).wrapping_add(salt);
            for _ in 0..4 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push(((state >> 33) % 1000) as f64 / 500.0 + 0.01);
            }
            v
        };
        let query: Vec<EvalEntry> = q_ids.iter().enumerate()
            .map(|(i, &id)| EvalEntry { feature: feat(id, i as u64), identity: id, camera: 0 })
            .collect();
        let gallery: Vec<EvalEntry> = g_ids.iter().enumerate()
            .map(|(i, &id)| EvalEntry { feature: feat(id, 100 + i as u64), identity: id, camera: 1 })
            .collect();
        // every query needs at least one cross-camera match for validity;
        // guarantee it by appending a gallery twin of each query identity
        let mut gallery = gallery;
        for q in &query {
            gallery.push(EvalEntry { feature: feat(q.identity, 999), identity: q.identity, camera: 1 });
        }
        let split = EvalSplit { query, gallery };
        let dist = distance_matrix(&split.query, &split.gallery, Distance::Euclidean).unwrap();
        let report = compute_map_cmc(&split, &dist).unwrap();
        prop_assert!(report.map >= 0.0 && report.map <= 1.0 + 1e-12);
        let ranks: Vec<_> = report.cmc.iter().collect();
        for w in ranks.windows(2) {
            prop_assert!(w[0].1 <= w[1].1, "CMC not monotone: {:?}", report.cmc);
        }
        for (_, &v) in &report.cmc {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn distance_ordering_invariant_to_positive_scaling(
        q in finite_row(6),
        g1 in finite_row(6),
        g2 in finite_row(6),
        scale in 0.01f64..100.0,
    ) {
        // scaling all features by c > 0 preserves the order of distances
        let entry = |f: &[f64], c: f64| EvalEntry {
            feature: f.iter().map(|v| v * c + if f.iter().all(|&x| x == 0.0) { 1.0 } else { 0.0 }).collect(),
            identity: 0,
            camera: 0,
        };
        for metric in [Distance::Euclidean, Distance::Cosine] {
            let base = distance_matrix(
                &[entry(&q, 1.0)],
                &[entry(&g1, 1.0), entry(&g2, 1.0)],
                metric,
            ).unwrap();
            let scaled = distance_matrix(
                &[entry(&q, scale)],
                &[entry(&g1, scale), entry(&g2, scale)],
                metric,
            ).unwrap();
            let cmp = |d: &Vec<f64>| (d[0] - d[1]).signum();
            // allow ties to move within float tolerance
            if (base[0][0] - base[0][1]).abs() > 1e-9 {
                prop_assert_eq!(cmp(&base[0]), cmp(&scaled[0]));
            }
        }
    }

    #[test]
    fn lr_schedule_is_bounded_and_ends_at_zero(
        lr in 1e-5f64..1.0,
        warmup in 0usize..50,
        extra in 1usize..200,
        probe in 0usize..300,
    ) {
        let cfg = OptimizerConfig {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: warmup,
            total_steps: warmup + extra,
            clip_grad_norm: None,
        };
        let v = lr_at(&cfg, probe);
        prop_assert!(v >= 0.0 && v <= lr + 1e-15, "lr {v} out of [0, {lr}]");
        prop_assert_eq!(lr_at(&cfg, cfg.total_steps), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        a in finite_row(5),
        b in finite_row(8),
        step in any::<u64>(),
    ) {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("alpha", Array::new(vec![1, 5], a.clone()).unwrap());
        store.add("beta", Array::new(vec![2, 4], b.clone()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ckpt");
        checkpoint::save(&path, &store, "seed = 1\n", step).unwrap();
        let ck = checkpoint::load::<f64>(&path).unwrap();
        prop_assert_eq!(ck.step, step);
        prop_assert_eq!(ck.config_toml.as_str(), "seed = 1\n");
        prop_assert_eq!(ck.entries.len(), 2);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(ck.entries[0].1.data()), bits(&a));
        prop_assert_eq!(bits(ck.entries[1].1.data()), bits(&b));
    }
}
