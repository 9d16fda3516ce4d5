use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use netslice_core::agents::{Maddpg, MaddpgConfig};
use netslice_core::nn::{Activation, Mlp, MlpSpec};
use netslice_core::replay::Transition;
use netslice_core::SeededRng;
use netslice_bench::{constant_episode, filled_buffer, shared_env};

fn env_episode(c: &mut Criterion) {
    let mut e = shared_env();
    c.bench_function("env/episode_200_steps", |b| b.iter(|| black_box(constant_episode(&mut e, &[0.5; 6], 1))));
}

fn mlp(c: &mut Criterion) {
    let spec = MlpSpec::new(vec![28, 64, 64, 1], Activation::Relu, Activation::Identity);
    let net = Mlp::init(spec, &mut SeededRng::new(1, 0).rng(), 1.0);
    let x: Vec<f64> = (0..28).map(|i| i as f64 / 28.0).collect();
    let mut grad = vec![0.0; net.params.len()];
    c.bench_function("mlp/forward", |b| b.iter(|| black_box(net.forward(black_box(&x)))));
    c.bench_function("mlp/forward_backward", |b| {
        b.iter(|| {
            let tape = net.forward_tape(&x).unwrap();
            black_box(net.backward(&tape, &[1.0], &mut grad))
        })
    });
}

fn replay(c: &mut Criterion) {
    let mut buf = filled_buffer(50_000, 22, 6);
    let mut rng = SeededRng::new(3, 0).rng();
    c.bench_function("replay/sample_64", |b| b.iter(|| black_box(buf.sample(64, &mut rng).unwrap().len())));
}

fn maddpg_update(c: &mut Criterion) {
    let e = shared_env();
    let mut pop = Maddpg::new(MaddpgConfig::default(), e.layout(), e.placements().to_vec(), &mut SeededRng::new(4, 0).rng());
    let mut buf = filled_buffer(4096, e.layout().global_width(), 6);
    let mut rng = SeededRng::new(5, 0).rng();
    c.bench_function("maddpg/update_batch_64", |b| {
        b.iter_batched(
            || buf.sample(64, &mut rng).unwrap().into_iter().cloned().collect::<Vec<_>>(),
            |batch| {
                let refs: Vec<&Transition> = batch.iter().collect();
                black_box(pop.update(&refs).unwrap())
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, env_episode, mlp, replay, maddpg_update);
criterion_main!(benches);
