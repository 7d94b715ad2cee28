use criterion::{criterion_group, criterion_main, Criterion};
use vidmask_bench::{context_grid, model};
use vidmask_core::decoder::{iterative_decode, MaskSchedule};
use vidmask_core::Generator;

fn decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("iterative_decode");
    group.sample_size(10);
    let m = model(8, 8, 32);
    let g = context_grid(&m, 2, 3);
    for iterations in [1, 4, 8] {
        let schedule = MaskSchedule {
            iterations,
            ..Default::default()
        };
        group.bench_function(format!("T={iterations}"), |b| {
            b.iter(|| iterative_decode(&m, g.clone(), &schedule, None, &mut Generator::new(0)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, decode);
criterion_main!(benches);
