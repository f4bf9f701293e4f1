//! Sequential vs rayon execution for batched inference and one training step.
//!
//! `cargo bench -p lexnet`; build with `--no-default-features` to time the
//! fallback path on its own.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lexnet::backbone::{Backbone, BackboneConfig};
use lexnet::flowdata::{stratified_split, synth_generate, DatasetSplit, SynthConfig};
use lexnet::model::{LexNetModel, ModelConfig};
use lexnet::Execution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (DatasetSplit, LexNetModel) {
    let (records, _) = synth_generate(&SynthConfig::balanced(10, 60, 0.1, 1)).unwrap();
    let (tr, te) = stratified_split(&records, 0.5, 1).unwrap();
    let split = DatasetSplit::encode(&tr, &te).unwrap();
    let mut model = LexNetModel::new(ModelConfig::default(), split.labels.names.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    model.calibrate_batch_norm(&split.train.inputs, Execution::Parallel).unwrap();
    (split, model)
}

fn predict(c: &mut Criterion) {
    let (split, model) = setup();
    let mut g = c.benchmark_group("predict_batch");
    for batch in [1usize, 64, 256] {
        let x = &split.train.inputs[..batch * 40];
        g.throughput(Throughput::Elements(batch as u64));
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, batch), &x, |b, x| b.iter(|| model.predict_batch(black_box(x), exec).unwrap()));
        }
    }
    g.finish();
}

fn backbones(c: &mut Criterion) {
    let (split, _) = setup();
    let x = &split.train.inputs[..64 * 40];
    let mut g = c.benchmark_group("backbone_forward_64");
    for (name, cfg) in [("leres", BackboneConfig::lexnet()), ("classic", BackboneConfig::resnet_twin())] {
        let mut b = Backbone::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        b.forward_train(x, 64, Execution::Sequential).unwrap();
        g.bench_function(name, |bench| bench.iter(|| b.forward_infer(black_box(x), 64, Execution::Sequential).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let (split, model) = setup();
    let x = &split.train.inputs[..64 * 40];
    let y = &split.train.labels[..64];
    let mut g = c.benchmark_group("gradient_step_64");
    g.sample_size(20);
    for (name, exec) in MODES {
        let mut m = model.clone();
        g.bench_function(name, |b| {
            b.iter(|| {
                m.zero_grads();
                m.accumulate_gradients(black_box(x), y, true, exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, predict, backbones, train_step);
criterion_main!(benches);
