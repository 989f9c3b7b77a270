use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use graphpl_bench::{default_batch, default_bundle};
use graphpl_core::federation::{fedavg, GlobalModel, ParamPackage};
use graphpl_core::fusion;
use graphpl_core::graph::Graph;
use graphpl_core::params::Adam;
use graphpl_core::training::TrainConfig;
use graphpl_core::Tensor;

fn bench_fuse(c: &mut Criterion) {
    let bundle = default_bundle(1);
    let batch = default_batch(64, 2);
    c.bench_function("impute_loss_forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            let loss = bundle.impute_loss(&mut g, &batch, 0, &mut rng).unwrap();
            g.value(loss).scalar_value()
        })
    });
    c.bench_function("local_loss_forward_backward", |b| {
        let cfg = TrainConfig::default();
        b.iter(|| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(4);
            let loss = bundle.local_loss(&mut g, &batch, &cfg, &mut rng).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).scalar_value()
        })
    });
}

fn bench_fuse_only(c: &mut Criterion) {
    let bundle = default_bundle(5);
    let stack = match bundle.fusion {
        graphpl_core::training::FusionKind::Gnn(stack) => stack,
        _ => unreachable!(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let latents: BTreeMap<usize, Tensor> = (0..2)
        .map(|m| (m, Tensor::randn(&[64, 16], &mut rng)))
        .collect();
    c.bench_function("fuse_forward_batch64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let cond: BTreeMap<usize, _> = latents
                .iter()
                .map(|(&m, t)| (m, g.constant(t.clone())))
                .collect();
            let mut vrng = ChaCha20Rng::seed_from_u64(7);
            let out =
                fusion::fuse(&mut g, &bundle.params, &stack, &cond, &[2], &mut vrng).unwrap();
            g.value(out[&2]).at(0, 0)
        })
    });
}

fn bench_training_step(c: &mut Criterion) {
    c.bench_function("adam_step", |b| {
        let mut bundle = default_bundle(8);
        let batch = default_batch(64, 9);
        let cfg = TrainConfig::default();
        let mut opt = Adam::new(cfg.learning_rate);
        b.iter(|| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(10);
            let loss = bundle.local_loss(&mut g, &batch, &cfg, &mut rng).unwrap();
            bundle.params.zero_grads();
            g.backward(loss).unwrap();
            g.accumulate_grads(&mut bundle.params);
            opt.step(&mut bundle.params);
        })
    });
}

fn bench_fedavg(c: &mut Criterion) {
    let bundle = default_bundle(11);
    let prev = GlobalModel {
        tensors: bundle.params.snapshot(|_| true),
        round_index: 0,
    };
    let packages: Vec<ParamPackage> = (0..5)
        .map(|client_id| {
            let other = default_bundle(12 + client_id as u64);
            ParamPackage {
                client_id,
                weight: 200,
                tensors: other.params.snapshot(|_| true),
            }
        })
        .collect();
    c.bench_function("fedavg_5_clients", |b| {
        b.iter(|| fedavg(&packages, &prev).unwrap())
    });
}

criterion_group!(
    benches,
    bench_fuse,
    bench_fuse_only,
    bench_training_step,
    bench_fedavg
);
criterion_main!(benches);
