use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rfalcf_bench::blobs;
use rfalcf_core::factor::build_intermediates;
use rfalcf_core::rfa::{self, init_state, update_p, update_q, update_v, update_w};
use rfalcf_core::{baselines, eval, BaselineParams, Hyperparams};

fn updates(c: &mut Criterion) {
    let mut group = c.benchmark_group("update");
    for n in [60, 150] {
        let x = blobs(n, 30, 1);
        let hp = Hyperparams::with_rank(4);
        let (st, _) = init_state(&x, &hp, 1).unwrap();
        let im = build_intermediates(&x, &st).unwrap();
        group.bench_with_input(BenchmarkId::new("intermediates", n), &n, |b, _| {
            b.iter(|| build_intermediates(&x, &st).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("w", n), &n, |b, _| b.iter(|| update_w(&x, &st, &im, &hp).unwrap()));
        group.bench_with_input(BenchmarkId::new("v", n), &n, |b, _| b.iter(|| update_v(&x, &st, &im, &hp).unwrap()));
        group.bench_with_input(BenchmarkId::new("p", n), &n, |b, _| b.iter(|| update_p(&x, &st, &im, &hp).unwrap()));
        group.bench_with_input(BenchmarkId::new("q", n), &n, |b, _| b.iter(|| update_q(&st, &im, &hp).unwrap()));
    }
    group.finish();
}

fn fits(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    let x = blobs(90, 30, 2);
    let hp = Hyperparams { rank: 4, max_iter: 20, eps_conv: 1e-12, ..Default::default() };
    let bp = BaselineParams { rank: 4, max_iter: 20, eps_conv: 1e-12, ..Default::default() };
    let graph = baselines::knn_cosine_graph(&x, 5).unwrap();
    group.bench_function("rfa_lcf", |b| b.iter(|| rfa::fit(&x, &hp, 0).unwrap()));
    group.bench_function("cf", |b| b.iter(|| baselines::cf_fit(&x, &bp, 0).unwrap()));
    group.bench_function("lccf", |b| b.iter(|| baselines::lccf_fit(&x, &bp, &graph, 0).unwrap()));
    group.bench_function("lcf", |b| b.iter(|| baselines::lcf_fit(&x, &bp, 0).unwrap()));
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let reps = blobs(300, 6, 3).t().to_owned();
    c.bench_function("kmeans_cosine/300x6/10 restarts", |b| {
        b.iter(|| eval::kmeans_cosine(&reps.view(), 3, 10, 0).unwrap())
    });
    let truth: Vec<usize> = (0..300).map(|i| i % 6).collect();
    let pred: Vec<usize> = (0..300).map(|i| (i * 7 / 5) % 6).collect();
    c.bench_function("clustering_accuracy/300/K6", |b| b.iter(|| eval::clustering_accuracy(&pred, &truth).unwrap()));
}

criterion_group!(benches, updates, fits, clustering);
criterion_main!(benches);
