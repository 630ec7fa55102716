use afrcnn::audio::synth_dataset;
use afrcnn::model::{ModelConfig, SeparationModel};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn setup() -> (SeparationModel<f32>, Vec<Vec<f32>>) {
    let cfg = ModelConfig {
        enc_channels: 64,
        channels: 64,
        stages: 4,
        blocks: 4,
        ..ModelConfig::default()
    };
    let model = SeparationModel::new(cfg, 0).expect("valid config");
    let mixes = synth_dataset(4, 1, 1.0, 8000, (-5.0, 5.0))
        .expect("synthesis")
        .into_iter()
        .map(|u| u.mix)
        .collect();
    (model, mixes)
}

fn batch_forward(c: &mut Criterion) {
    let (model, mixes) = setup();
    let mut group = c.benchmark_group("forward_batch_4x1s");
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        group.bench_function("sequential", |b| {
            b.iter(|| single.install(|| model.forward_batch(black_box(&mixes)).expect("forward")))
        });
        group.bench_function(format!("rayon_{}_threads", rayon::current_num_threads()), |b| {
            b.iter(|| model.forward_batch(black_box(&mixes)).expect("forward"))
        });
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| {
        b.iter(|| model.forward_batch(black_box(&mixes)).expect("forward"))
    });
    group.finish();
}

criterion_group!(benches, batch_forward);
criterion_main!(benches);
