mod common;

use common::*;
use proptest::prelude::*;
use spd_core::autodiff::softmax_causal;
use spd_core::checkpoint::{decode_model, encode_model};
use spd_core::cost::{allreduce_cost, plan_cost, SystemProfile};
use spd_core::grouping::{match_from_scores, reorder_block_weights, HeadGrouping};
use spd_core::model::{forward_reference, init_model, MlpKind, NormKind};
use spd_core::parallel::{DeviceMesh, SyncSite};
use spd_core::sensitivity::SensitivityReport;
use spd_core::{Budget, ModelConfig, SyncPlan, Tensor};

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn causal_softmax_rows_are_distributions(t in 1usize..8, vals in prop::collection::vec(-30.0f64..30.0, 64)) {
        let s = Tensor::new(vec![t, t], vals[..t * t].to_vec()).unwrap();
        let p = softmax_causal(&s).unwrap();
        for r in 0..t {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[r + 1..].iter().all(|&v| v == 0.0));
            prop_assert!(row[..=r].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn all_reduce_is_ascending_device_sum(d in 1usize..6, vals in prop::collection::vec(-1e3f64..1e3, 30)) {
        let parts: Vec<Tensor> = (0..d).map(|i| Tensor::new(vec![2, 3], vals[i * 6 % 24..i * 6 % 24 + 6].to_vec()).unwrap()).collect();
        let mut mesh = DeviceMesh::new(d).unwrap();
        let out = mesh.all_reduce_sum(&parts, 0, SyncSite::MlpOut).unwrap();
        for k in 0..6 {
            let mut acc = parts[0].data()[k];
            for p in &parts[1..] {
                acc += p.data()[k];
            }
            prop_assert_eq!(out.data()[k], acc);
        }
        prop_assert_eq!(mesh.allreduce_count(), 1);
        prop_assert_eq!(mesh.traced_bytes(), 6 * std::mem::size_of::<f64>());
    }

    #[test]
    fn budget_is_floor_and_monotone(layers in 1usize..200, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n_lo = Budget::Fraction(lo).resolve(layers).unwrap();
        let n_hi = Budget::Fraction(hi).resolve(layers).unwrap();
        prop_assert!(n_lo <= n_hi && n_hi <= layers);
        prop_assert!((n_lo as f64) <= lo * layers as f64 + 1e-6);
        prop_assert!((n_lo as f64 + 1.0) > lo * layers as f64);
    }

    #[test]
    fn telescoping_is_exact_on_close_curves(vals in prop::collection::vec(10.0f64..19.99, 2..33)) {
        let r = SensitivityReport::from_curve(vals.clone(), 2, 0.05, 10.0).unwrap();
        let mut sum = 0.0;
        for s in &r.scores {
            sum += s;
        }
        prop_assert_eq!(sum, vals[0] - vals[vals.len() - 1]);
        let mut sorted = r.ranking.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..vals.len() - 1).collect::<Vec<_>>());
    }

    #[test]
    fn ring_cost_grows_with_bytes(bytes in 1usize..1_000_000_000, extra in 1usize..1_000_000, d in 2usize..9) {
        for name in SystemProfile::preset_names() {
            if name.ends_with("2node") && d % 2 == 1 {
                prop_assert!(SystemProfile::preset(name, d).is_err());
                continue;
            }
            let p = SystemProfile::preset(name, d).unwrap();
            prop_assert!(allreduce_cost(bytes + extra, &p).unwrap() > allreduce_cost(bytes, &p).unwrap());
        }
    }

    #[test]
    fn speedup_monotone_in_dropped_blocks(layers in 1usize..24, compute in 0.0f64..1e-3, seq in 1usize..512) {
        let cfg = ModelConfig { n_layers: layers, ..ModelConfig::default() };
        let p = SystemProfile::preset("lbw-1node", 4).unwrap().with_compute_time(compute);
        let mut last = 0.0;
        for k in 0..=layers {
            let blocks: Vec<usize> = (0..k).collect();
            let r = plan_cost(&SyncPlan::with_spd(layers, &blocks), &cfg, &p, 1, seq).unwrap();
            prop_assert_eq!(r.allreduce_count, 2 * layers - k);
            prop_assert!(r.speedup_vs_full_tp >= last);
            last = r.speedup_vs_full_tp;
        }
    }

    #[test]
    fn matching_agrees_with_exhaustive_search(d in 1usize..6, vals in prop::collection::vec(0.0f64..10.0, 25)) {
        let scores: Vec<Vec<f64>> = (0..d).map(|g| vals[g * 5..g * 5 + d].to_vec()).collect();
        let got = match_from_scores(&scores).unwrap();
        let (best, _) = brute_force_match(&scores);
        prop_assert!((got.objective - best).abs() < 1e-12);
    }

    #[test]
    fn grouping_order_is_a_permutation(order in permutation(8), matching in permutation(4)) {
        let groups: Vec<Vec<usize>> = order.chunks(2).map(<[usize]>::to_vec).collect();
        let g = HeadGrouping::new(groups.clone(), matching.clone(), 8).unwrap();
        let mut seen = g.head_order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..8).collect::<Vec<_>>());
        for (k, group) in groups.iter().enumerate() {
            let dev = matching[k];
            let mut placed = g.head_order[dev * 2..dev * 2 + 2].to_vec();
            placed.sort();
            let mut want = group.clone();
            want.sort();
            prop_assert_eq!(placed, want);
        }
        let inv = g.inverse_order();
        prop_assert!(inv.iter().enumerate().all(|(k, &i)| g.head_order[i] == k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn head_reordering_preserves_reference_logits(order in permutation(4), seed in 0u64..1000) {
        let cfg = small_config(2, 4);
        let m = init_model(&cfg, seed).unwrap();
        let tokens = random_tokens(8, cfg.vocab_size, &mut rng(seed));
        let before = forward_reference(&m, &tokens).unwrap();
        let g = HeadGrouping::new(order.chunks(2).map(<[usize]>::to_vec).collect(), vec![0, 1], 4).unwrap();
        let mut moved = m.clone();
        for b in &mut moved.blocks {
            *b = reorder_block_weights(b, &g.head_order, &cfg).unwrap();
        }
        let after = forward_reference(&moved, &tokens).unwrap();
        prop_assert!(after.max_rel_diff(&before, 1e-6).unwrap() < 1e-10);
        let mut back = moved.clone();
        for b in &mut back.blocks {
            *b = reorder_block_weights(b, &g.inverse_order(), &cfg).unwrap();
        }
        prop_assert_eq!(back, m);
    }

    #[test]
    fn checkpoints_round_trip(layers in 1usize..3, layer_norm: bool, swiglu: bool, bias: bool, seed in 0u64..100) {
        let cfg = ModelConfig {
            norm_kind: if layer_norm { NormKind::LayerNorm } else { NormKind::RmsNorm },
            mlp_kind: if swiglu { MlpKind::SwiGlu } else { MlpKind::Gelu2 },
            attn_out_bias: bias,
            ..small_config(layers, 2)
        };
        let m = init_model(&cfg, seed).unwrap();
        prop_assert_eq!(decode_model(&encode_model(&m).unwrap()).unwrap(), m);
    }
}
