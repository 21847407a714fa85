use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ceem::particle::{ffbsi_sample, particle_filter, FilterOptions};
use ceem::rng::{purpose, stream_rng};
use ceem_bench::Fixture;

/// Filter plus backward simulation, whose cost grows with N_p and N_s.
fn filter_and_backward(c: &mut Criterion) {
    let f = Fixture::lorenz(1, 128, 1, 0.1, 0.5);
    let tr = &f.data[0];
    let mut group = c.benchmark_group("pem_e_step");
    group.sample_size(10);
    for (np, ns) in [(50, 5), (100, 10), (200, 10), (200, 20)] {
        let options = FilterOptions { particles: np, ..FilterOptions::default() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{np}x{ns}")), &ns, |b, &ns| {
            b.iter(|| {
                let mut rng = stream_rng(0, purpose::FILTER, 0);
                let ens = particle_filter(&f.model, &f.truth, &f.noise, &tr.y, &tr.u, &f.initial, &options, &mut rng).unwrap();
                let mut rng = stream_rng(0, purpose::BACKWARD, 0);
                ffbsi_sample(&ens, &f.noise, ns, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, filter_and_backward);
criterion_main!(benches);
