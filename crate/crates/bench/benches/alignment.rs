use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sal_bench::{embedded, feature_map};
use sal_core::losses::{local_alignment_loss, windowed_alignment, windowed_alignment_grad};

/// Full-plane alignment against windowed alignment on the same grid.
fn full_vs_windowed(c: &mut Criterion) {
    let mut group = c.benchmark_group("alignment");
    for side in [8usize, 16, 32] {
        let xi = embedded(feature_map(64, side, side, 1).view());
        let xj = embedded(feature_map(64, side, side, 2).view());
        group.bench_with_input(BenchmarkId::new("full", side), &side, |b, _| {
            b.iter(|| local_alignment_loss(&xi, &xj).unwrap())
        });
        for omega in [2usize, 4] {
            group.bench_with_input(
                BenchmarkId::new(format!("window{omega}"), side),
                &side,
                |b, _| b.iter(|| windowed_alignment(&xi, &xj, omega).unwrap()),
            );
        }
        group.bench_with_input(BenchmarkId::new("window4_grad", side), &side, |b, _| {
            b.iter(|| windowed_alignment_grad(&xi, &xj, 4).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, full_vs_windowed);
criterion_main!(benches);
