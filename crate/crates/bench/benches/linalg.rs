use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dwp::autodiff::Tape;
use dwp::matdist::{genwishart_sample, GenWishartParams};
use dwp::numerics::{cholesky_matrix, LowerTrapezoid};
use dwp::RngStream;
use dwp_bench::spd;

fn bench_cholesky(c: &mut Criterion) {
    let mut group = c.benchmark_group("cholesky");
    for n in [8usize, 16, 32, 64, 128] {
        let a = spd(n);
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| cholesky_matrix(&a).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let x = tape.leaf(a.clone());
                let out = x.cholesky().unwrap().log_diag_sum().unwrap();
                tape.gradients(&out).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_wishart(c: &mut Criterion) {
    let mut group = c.benchmark_group("genwishart_sample");
    for (p, nu) in [(4usize, 2usize), (16, 8), (32, 32)] {
        let params = GenWishartParams::defaults(LowerTrapezoid::identity(p), nu).unwrap();
        let mut rng = RngStream::new(3, 0);
        group.bench_function(BenchmarkId::from_parameter(format!("{p}x{nu}")), |b| {
            b.iter(|| genwishart_sample(&params, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_cholesky, bench_wishart);
criterion_main!(benches);
