//! Parallel vs sequential throughput on the workloads that actually matter:
//! per-window gradient computation and forward-only evaluation.
//!
//! `map_items` uses rayon's pool when the `parallel` feature (default) is on;
//! `map_items_seq` is the always-sequential twin. Run with
//! `cargo bench -p stlora-core` and compare the `parallel/` and `sequential/`
//! groups; building with `--no-default-features` makes the two coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stlora_core::backbone::{BackboneConfig, BackboneKind, BackboneNet};
use stlora_core::data::{generate_synthetic, prepare, SplitSpec, WindowSet};
use stlora_core::exec::{map_items, map_items_seq};
use stlora_core::fusion::{StLoraConfig, StLoraModel};
use stlora_core::model::{mean_absolute_loss, ForecastModel};
use stlora_core::tensor::Tape;

fn fixture() -> (StLoraModel, WindowSet) {
    let ds = generate_synthetic(12, 400, 3, 0.1, 7).expect("dataset");
    let prepared = prepare(&ds, &SplitSpec::default(), 12, 12).expect("windows");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bb_cfg = BackboneConfig::new(BackboneKind::SharedMlp, 1, 12, 12, 12);
    bb_cfg.hidden_dim = 64;
    let backbone = BackboneNet::build(bb_cfg, None, &mut rng).expect("backbone");
    let mut st_cfg = StLoraConfig::default();
    st_cfg.hidden_dim = 16;
    st_cfg.layers = 2;
    st_cfg.rank = 4;
    let model = StLoraModel::build(backbone, st_cfg, &mut rng).expect("model");
    (model, prepared.train)
}

fn window_gradient(model: &StLoraModel, ws: &WindowSet, w: usize) -> f64 {
    let input = ws.input(w).expect("input");
    let target = ws.target(w).expect("target");
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
    let pred = model
        .predict(&mut tape, &input, true, &mut rng)
        .expect("forward");
    let loss = model.loss(&mut tape, &pred, &target).expect("loss");
    let v = loss.scalar_value().expect("scalar");
    let grads = tape.backward(&loss).expect("backward");
    v + grads.len() as f64
}

fn window_forward(model: &StLoraModel, ws: &WindowSet, w: usize) -> f64 {
    let input = ws.input(w).expect("input");
    let target = ws.target(w).expect("target");
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
    let pred = model
        .predict(&mut tape, &input, false, &mut rng)
        .expect("forward");
    mean_absolute_loss(&mut tape, &pred, &target)
        .and_then(|l| l.scalar_value())
        .expect("loss")
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (model, windows) = fixture();
    let mut group = c.benchmark_group("batch-gradients");
    group.sample_size(10);
    for &batch in &[16usize, 64] {
        let idx: Vec<usize> = (0..batch.min(windows.len())).collect();
        group.bench_with_input(BenchmarkId::new("parallel", batch), &idx, |b, idx| {
            b.iter(|| {
                let out = map_items(idx, |_, w| window_gradient(&model, &windows, *w));
                out.iter().sum::<f64>()
            })
        });
        group.bench_with_input(BenchmarkId::new("sequential", batch), &idx, |b, idx| {
            b.iter(|| {
                let out = map_items_seq(idx, |_, w| window_gradient(&model, &windows, *w));
                out.iter().sum::<f64>()
            })
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let (model, windows) = fixture();
    let idx: Vec<usize> = (0..windows.len().min(128)).collect();
    let mut group = c.benchmark_group("evaluation-pass");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = map_items(&idx, |_, w| window_forward(&model, &windows, *w));
            out.iter().sum::<f64>()
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = map_items_seq(&idx, |_, w| window_forward(&model, &windows, *w));
            out.iter().sum::<f64>()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_evaluation);
criterion_main!(benches);
