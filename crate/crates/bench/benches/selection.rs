use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use taskfarm::scheduler::{select_resources, SchedulerConfig};
use taskfarm_bench::selection_input;

fn selection(c: &mut Criterion) {
    let config = SchedulerConfig::default();
    let mut group = c.benchmark_group("select_resources");
    for n in [10, 70, 500] {
        let input = selection_input(n, 200, 10);
        group.bench_with_input(BenchmarkId::from_parameter(n), &input, |b, input| {
            b.iter(|| select_resources(black_box(input), &config))
        });
    }
    group.finish();
}

criterion_group!(benches, selection);
criterion_main!(benches);
