use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use handcue::geometry::CameraCalibration;
use handcue::landmark::{CropConfig, HandCrop};
use handcue::par;
use handcue::recipe::degraded_condition;
use handcue::synth::{generate_scene, SceneConfig};
use handcue_tensor::{Rng, Stream};

fn scenes(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    let calib = CameraCalibration::default();
    let idx: Vec<u64> = (0..8).collect();
    let render = |&i: &u64| generate_scene(&cfg, &calib, 1, i).unwrap().hands.len();
    let mut g = c.benchmark_group("render_8_scenes");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| par::map_sequential(&idx, render)));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| par::map_parallel(&idx, render)));
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    let calib = CameraCalibration::default();
    let crop = CropConfig::default();
    let crops: Vec<HandCrop> = (0..4)
        .flat_map(|i| {
            let s = generate_scene(&cfg, &calib, 2, i).unwrap();
            (0..s.hands.len()).map(|h| HandCrop::from_scene(&s, h, &crop, 0.0, None).unwrap()).collect::<Vec<_>>()
        })
        .collect();
    let aug = degraded_condition();
    let work = |(i, c): &(usize, &HandCrop)| c.augmented(&aug, &mut Rng::derive(3, Stream::Augment, *i as u64)).unwrap();
    let items: Vec<(usize, &HandCrop)> = crops.iter().enumerate().collect();
    let mut g = c.benchmark_group("augment_crops");
    g.bench_with_input(BenchmarkId::new("sequential", items.len()), &items, |b, it| b.iter(|| par::map_sequential(it, work)));
    #[cfg(feature = "parallel")]
    g.bench_with_input(BenchmarkId::new("parallel", items.len()), &items, |b, it| b.iter(|| par::map_parallel(it, work)));
    g.finish();
}

criterion_group!(benches, scenes, augmentation);
criterion_main!(benches);
