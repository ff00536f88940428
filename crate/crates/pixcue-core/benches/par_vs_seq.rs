//! Data-parallel vs sequential execution of the hot inner loops: affinity
//! refinement, batched ridge solves and scene synthesis. With the
//! `parallel` feature disabled only the sequential arm exists.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixcue_core::exec::{self, ExecMode};
use pixcue_core::grids::Grid;
use pixcue_core::incontext::{solve_ridge, RidgeProblem};
use pixcue_core::pamr::{pamr_refine_with_stats, PamrConfig};
use pixcue_core::scenes::{render_pair, SceneConfig};

fn modes() -> Vec<(&'static str, ExecMode)> {
    let mut m = vec![("seq", ExecMode::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("par", ExecMode::Parallel));
    m
}

fn bench_refine(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Grid::from_fn(64, 64, 3, |_, _, _| rng.gen_range(0.0f32..1.0)).unwrap();
    let feats = Grid::from_fn(64, 64, 8, |_, _, _| rng.gen_range(-1.0f32..1.0)).unwrap();
    let cfg = PamrConfig::default();
    let mut group = c.benchmark_group("pamr_refine_64x64");
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| pamr_refine_with_stats(&feats, &image, &cfg, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_ridge_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let problems: Vec<RidgeProblem> = (0..8)
        .map(|_| {
            let x = ndarray::Array2::from_shape_fn((256, 17), |_| rng.gen_range(-1.0..1.0));
            let g = ndarray::Array2::from_shape_fn((256, 11), |_| rng.gen_range(-1.0..1.0));
            RidgeProblem::new(x, g, 0.1).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("ridge_batch_8x256x17");
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                exec::map_indexed(mode, problems.len(), |i| {
                    solve_ridge(&problems[i]).unwrap().w[[0, 0]]
                })
            })
        });
    }
    group.finish();
}

fn bench_scene_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scenes: Vec<SceneConfig> =
        (0..4).map(|_| SceneConfig::sample(&mut rng, 48, 48, 3)).collect();
    let mut group = c.benchmark_group("render_pair_batch_4x48");
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                exec::map_indexed(mode, scenes.len(), |i| {
                    render_pair(&scenes[i], 0, 3).unwrap().frame_t.get(0, 0, 0)
                })
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_refine, bench_ridge_batch, bench_scene_batch
}
criterion_main!(benches);
