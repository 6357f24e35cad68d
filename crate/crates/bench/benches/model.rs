use cdanet::harness::Trainer;
use cdanet::network::Variant;
use cdanet::volume_io::LabelMap;
use cdanet_bench::{phantom_case, small_config};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("cda_forward");
    group.sample_size(10);
    let map = LabelMap::mmwhs().truncated(3).unwrap();
    for variant in [Variant::Base, Variant::BaseCbam, Variant::BaseCtnDttnPenalty] {
        let cfg = small_config(variant, 16, 8, 2);
        let case = phantom_case(&cfg, 0);
        let trainer = Trainer::new(&cfg, &map).unwrap();
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| trainer.net().cda_forward(&case.image).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let map = LabelMap::mmwhs().truncated(3).unwrap();
    for variant in [Variant::Base, Variant::BaseCtnDttnPenalty] {
        let cfg = small_config(variant, 16, 8, 2);
        let case = phantom_case(&cfg, 0);
        let mut trainer = Trainer::new(&cfg, &map).unwrap();
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| trainer.train_step(std::slice::from_ref(&case)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
