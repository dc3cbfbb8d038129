mod common;

use common::*;
use spd_core::corpus::{sample_calibration, synthetic_corpus, tokenize};
use spd_core::distill::cache_block_inputs;
use spd_core::grouping::{group_partition_scores, head_scatter, head_score_vectors, pairwise_distances, MlpNorm, ScatterMode};
use spd_core::model::{forward_reference, init_model, MlpKind, NormKind};
use spd_core::parallel::{model_forward_plan, shard_block, spd_block_forward, DeviceMesh, ParallelModel};
use spd_core::sensitivity::scan;
use spd_core::{ModelConfig, SyncPlan};

fn variants() -> Vec<ModelConfig> {
    let base = small_config(2, 4);
    vec![
        base.clone(),
        ModelConfig { norm_kind: NormKind::LayerNorm, ..base.clone() },
        ModelConfig { mlp_kind: MlpKind::SwiGlu, ..base.clone() },
        ModelConfig { attn_out_bias: true, norm_kind: NormKind::LayerNorm, mlp_kind: MlpKind::SwiGlu, ..base },
    ]
}

#[test]
fn reference_forward_matches_loop_oracle() {
    for (k, cfg) in variants().into_iter().enumerate() {
        let mut m = init_model(&cfg, k as u64).unwrap();
        randomize_biases(&mut m, 40 + k as u64);
        let tokens = random_tokens(12, cfg.vocab_size, &mut rng(k as u64));
        let got = mat(&forward_reference(&m, &tokens).unwrap());
        let want = reference_logits(&m, &tokens);
        assert!(max_abs(&got, &want) < 1e-10, "variant {k}: {}", max_abs(&got, &want));
    }
}

#[test]
fn tp_matches_oracle_for_every_variant_and_device_count() {
    for (k, cfg) in variants().into_iter().enumerate() {
        let mut m = init_model(&cfg, 10 + k as u64).unwrap();
        randomize_biases(&mut m, 50 + k as u64);
        let tokens = random_tokens(10, cfg.vocab_size, &mut rng(k as u64 + 3));
        let want = reference_logits(&m, &tokens);
        for d in [1, 2, 4] {
            let out = model_forward_plan(&m, &SyncPlan::all_tp(2), d, &tokens).unwrap();
            for logits in &out.logits {
                assert!(max_abs(&mat(logits), &want) < 1e-10, "variant {k} D={d}");
            }
            assert_eq!(out.trace.len(), 4);
        }
    }
}

#[test]
fn spd_block_matches_closed_form_for_every_variant() {
    for (k, cfg) in variants().into_iter().enumerate() {
        let mut m = init_model(&cfg, 20 + k as u64).unwrap();
        randomize_biases(&mut m, 60 + k as u64);
        let x = random_mat(7, cfg.d_model, &mut rng(k as u64));
        for d in [1, 2, 4] {
            let mut s = shard_block(&m.blocks[0], &cfg, d, None).unwrap();
            s.mode = spd_core::BlockMode::Spd;
            let mut mesh = DeviceMesh::new(d).unwrap();
            let outs = spd_block_forward(&s, &vec![from_mat(&x); d], &mut mesh, 0).unwrap();
            let want = spd_block(&x, &m.blocks[0], &cfg, d);
            for o in &outs {
                assert!(max_abs(&mat(o), &want) < 1e-12, "variant {k} D={d}: {}", max_abs(&mat(o), &want));
            }
            assert_eq!(mesh.allreduce_count(), 1);
        }
    }
}

#[test]
fn spd_stream_is_replicated_after_each_block() {
    let cfg = small_config(3, 4);
    let m = init_model(&cfg, 2).unwrap();
    let tokens = random_tokens(9, cfg.vocab_size, &mut rng(1));
    let out = model_forward_plan(&m, &SyncPlan::all_spd(3), 4, &tokens).unwrap();
    for l in &out.logits[1..] {
        assert_eq!(l, &out.logits[0]);
    }
}

#[test]
fn mlp_scores_match_loop_oracle() {
    for cfg in variants() {
        let m = init_model(&cfg, 4).unwrap();
        let stream: Vec<u32> = random_tokens(200, cfg.vocab_size, &mut rng(9));
        let calib = sample_calibration(&stream, 2, 8, 3).unwrap();
        let inputs = cache_block_inputs(&m, &calib, 1, 2).unwrap();
        let groups = vec![vec![0, 3], vec![1, 2]];
        let got = group_partition_scores(&m.blocks[1], &cfg, &inputs, &groups, MlpNorm::MeanTokenL2).unwrap();
        let xs: Vec<Mat> = inputs.iter().map(mat).collect();
        for (g, group) in groups.iter().enumerate() {
            for part in 0..2 {
                let want = group_partition_score(&xs, &m.blocks[1], &cfg, group, part, 2);
                assert!((got[g][part] - want).abs() < 1e-10 * want.max(1.0));
            }
        }
    }
}

#[test]
fn head_signatures_are_causal_probabilities() {
    let cfg = small_config(1, 4);
    let m = init_model(&cfg, 6).unwrap();
    let x = random_mat(5, cfg.d_model, &mut rng(2));
    let sigs = head_score_vectors(&m.blocks[0], &cfg, &[from_mat(&x), from_mat(&x)]).unwrap();
    let n1 = norm_rows(&x, &m.blocks[0].norm1, cfg.norm_kind, cfg.norm_eps);
    for (h, sig) in sigs.iter().enumerate() {
        assert_eq!(sig.len(), 2 * 25);
        let want: Vec<f64> = head_probs(&n1, &m.blocks[0], &cfg, h).into_iter().flatten().collect();
        for (a, b) in sig[..25].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(&sig[..25], &sig[25..]);
    }
}

#[test]
fn greedy_scatter_reaches_exact_optimum_on_small_instances() {
    let mut hits = 0;
    for seed in 0..20 {
        let mut r = rng(seed);
        let sigs: Vec<Vec<f64>> = (0..8).map(|_| random_mat(1, 3, &mut r).remove(0)).collect();
        let exact = head_scatter(&sigs, 2, ScatterMode::Exact, 1, 0).unwrap();
        let greedy = head_scatter(&sigs, 2, ScatterMode::Greedy, 16, seed).unwrap();
        assert!(greedy.objective <= exact.objective + 1e-12);
        for (start, end) in &greedy.restarts {
            assert!(end >= start);
        }
        if (greedy.objective - exact.objective).abs() < 1e-12 {
            hits += 1;
        }
    }
    assert!(hits >= 15, "greedy matched exact on {hits}/20 instances");
}

#[test]
fn sixteen_head_greedy_is_seeded() {
    let mut r = rng(77);
    let sigs: Vec<Vec<f64>> = (0..16).map(|_| random_mat(1, 4, &mut r).remove(0)).collect();
    let a = head_scatter(&sigs, 4, ScatterMode::Greedy, 16, 5).unwrap();
    let b = head_scatter(&sigs, 4, ScatterMode::Greedy, 16, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![4; 4]);
    let dist = pairwise_distances(&sigs).unwrap();
    assert!((spd_core::grouping::within_group_distance(&dist, &a.groups) - a.objective).abs() < 1e-12);
}

#[test]
fn parallel_perplexity_matches_oracle() {
    let cfg = small_config(2, 4);
    let m = init_model(&cfg, 8).unwrap();
    let stream = tokenize(&synthetic_corpus(3000, 1))
        .into_iter()
        .map(|t| t % cfg.vocab_size as u32)
        .collect::<Vec<_>>();
    let calib = sample_calibration(&stream, 3, 12, 2).unwrap();
    let want = perplexity(&m, &calib.samples);
    let got = spd_core::model::perplexity(&ParallelModel::new(&m, &SyncPlan::all_tp(2), 2).unwrap(), &calib).unwrap();
    assert!((got - want).abs() / want < 1e-10);
    let report = scan(&m, 1, &calib, 0.05, 10.0).unwrap();
    assert!(report.scores.iter().all(|s| *s == 0.0));
}
