use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spd_bench::{bench_hidden, bench_model, bench_tokens};
use spd_core::parallel::{shard_block, spd_block_forward, tp_block_forward, DeviceMesh, ParallelModel};
use spd_core::{BlockMode, SyncPlan};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = bench_hidden(n, n);
        let b = bench_hidden(n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(&b).unwrap()));
    }
    g.finish();
}

fn block(c: &mut Criterion) {
    let model = bench_model(1);
    let cfg = &model.config;
    let x = bench_hidden(64, cfg.d_model);
    let mut g = c.benchmark_group("block");
    for d in [1, 2, 4, 8] {
        let tp = shard_block(&model.blocks[0], cfg, d, None).unwrap();
        let mut spd = tp.clone();
        spd.mode = BlockMode::Spd;
        let xs = vec![x.clone(); d];
        g.bench_with_input(BenchmarkId::new("tp", d), &d, |bench, &d| {
            bench.iter(|| tp_block_forward(&tp, &x, &mut DeviceMesh::new(d).unwrap(), 0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spd", d), &d, |bench, &d| {
            bench.iter(|| spd_block_forward(&spd, &xs, &mut DeviceMesh::new(d).unwrap(), 0).unwrap())
        });
    }
    g.finish();
}

fn model_plans(c: &mut Criterion) {
    let model = bench_model(8);
    let tokens = bench_tokens(64, model.config.vocab_size);
    let mut g = c.benchmark_group("model_forward_d4");
    for (name, plan) in [("all_tp", SyncPlan::all_tp(8)), ("half_spd", SyncPlan::suffix(8, 4)), ("all_spd", SyncPlan::all_spd(8))] {
        let exec = ParallelModel::new(&model, &plan, 4).unwrap();
        g.bench_function(name, |bench| bench.iter(|| exec.forward(&tokens).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, block, model_plans);
criterion_main!(benches);
