//! Criterion benchmarks of the data-parallel stages, comparing worker-pool
//! sizes. With the default `parallel` feature the same code runs in a
//! one-worker pool and in a wider pool; built with
//! `--no-default-features` the sequential fallback is what gets measured.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};

use densesfm::extend::extend_tracks;
use densesfm::optimize::{bundle_adjust, BaConfig};
use densesfm::parallel::with_threads;
use densesfm::refine::{refine_tracks, CorrelationDecoder, RefineConfig};
use densesfm::splatvis::{composite_visibility, init_gaussians};
use densesfm::synth::{generate_scene, perturb_poses, SynthConfig, SyntheticFeatureProvider};

fn scene_config() -> SynthConfig {
    SynthConfig {
        cameras: 10,
        points: 120,
        camera_radius: 2.5,
        camera_height: 3.5,
        occluder_count: 24,
        ..Default::default()
    }
}

#[cfg(feature = "parallel")]
const POOLS: &[usize] = &[1, 4];
#[cfg(not(feature = "parallel"))]
const POOLS: &[usize] = &[1];

fn bench_visibility(c: &mut Criterion) {
    let (model, occluders) = generate_scene(&scene_config()).unwrap();
    let mut set = init_gaussians(&model).unwrap();
    set.extend_from(&occluders);
    let queries: Vec<_> = model
        .points
        .keys()
        .flat_map(|&pid| model.cameras.values().map(move |cam| (pid, *cam)))
        .collect();

    let mut group = c.benchmark_group("composite_visibility");
    group.measurement_time(Duration::from_secs(4)).sample_size(20);
    for &threads in POOLS {
        group.bench_function(format!("workers_{threads}"), |b| {
            b.iter(|| {
                with_threads(Some(threads), || {
                    densesfm::parallel::map_ordered(&queries, |(pid, cam)| {
                        composite_visibility(&set, *pid, &cam.pose, &cam.intrinsics, 0.5)
                            .map(|v| v.score)
                            .unwrap_or(0.0)
                    })
                    .iter()
                    .sum::<f64>()
                })
            })
        });
    }
    group.finish();
}

fn bench_extend(c: &mut Criterion) {
    let (gt, occluders) = generate_scene(&scene_config()).unwrap();
    let mut pairwise = gt.clone();
    for track in pairwise.tracks.values_mut() {
        track.observations.truncate(2);
    }
    let mut set = init_gaussians(&pairwise).unwrap();
    set.extend_from(&occluders);

    let mut group = c.benchmark_group("extend_tracks");
    group.measurement_time(Duration::from_secs(4)).sample_size(20);
    for &threads in POOLS {
        group.bench_function(format!("workers_{threads}"), |b| {
            b.iter(|| with_threads(Some(threads), || extend_tracks(&pairwise, &set, 0.5, 4.0)))
        });
    }
    group.finish();
}

fn bench_refine(c: &mut Criterion) {
    let cfg = scene_config();
    let (gt, _) = generate_scene(&cfg).unwrap();
    let provider = SyntheticFeatureProvider::from_config(gt.clone(), &cfg);
    let decoder = CorrelationDecoder::default();
    let refine_cfg = RefineConfig { patch_size: 9, ..Default::default() };

    let mut group = c.benchmark_group("refine_tracks");
    group.measurement_time(Duration::from_secs(8)).sample_size(10);
    for &threads in POOLS {
        group.bench_function(format!("workers_{threads}"), |b| {
            b.iter(|| {
                with_threads(Some(threads), || {
                    refine_tracks(&gt, &provider, &decoder, &refine_cfg)
                })
            })
        });
    }
    group.finish();
}

fn bench_bundle_adjust(c: &mut Criterion) {
    let (gt, _) = generate_scene(&scene_config()).unwrap();
    let noisy = perturb_poses(&gt, 0.5, 0.01, 3);
    let ba_cfg = BaConfig::default();

    let mut group = c.benchmark_group("bundle_adjust");
    group.measurement_time(Duration::from_secs(8)).sample_size(10);
    for &threads in POOLS {
        group.bench_function(format!("workers_{threads}"), |b| {
            b.iter(|| with_threads(Some(threads), || bundle_adjust(&noisy, &ba_cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_visibility, bench_extend, bench_refine, bench_bundle_adjust);
criterion_main!(benches);
