// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gem_bench::planted_set;
use gem_core::ablation::{ablate_and_score, window_direction, DirectionSource};
use gem_core::detector::{detect_handoff, DEFAULT_EPSILON};
use gem_core::geometry::compute_trajectory;

fn trajectory(c: &mut Criterion) {
    let mut group = c.benchmark_group("trajectory");
    for &(layers, pairs, dim) in &[(24, 32, 256), (32, 64, 1024)] {
        let set = planted_set(layers, pairs, dim);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{layers}x{pairs}x{dim}")), &set, |b, set| {
            b.iter(|| compute_trajectory(black_box(set)))
        });
    }
    group.finish();
}

fn ablation(c: &mut Criterion) {
    let set = planted_set(32, 64, 1024);
    let traj = compute_trajectory(&set);
    let gem = detect_handoff(&traj, DEFAULT_EPSILON).unwrap();
    let u = window_direction(&traj, gem.handoff_layer, 3).unwrap();
    c.bench_function("ablate_width3_32x64x1024", |b| {
        b.iter(|| ablate_and_score(black_box(&set), gem.handoff_layer, 3, &u, DirectionSource::Handoff).unwrap())
    });
}

criterion_group!(benches, trajectory, ablation);
criterion_main!(benches);
