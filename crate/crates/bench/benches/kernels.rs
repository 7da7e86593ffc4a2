use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sbdm_bench::{desk, noise};
use sbdm_core::bridge::BridgeSchedule;
use sbdm_core::cosunet::{spherical_conv, LevelTopology};
use sbdm_core::diffcore::{Graph, Tensor};
use sbdm_core::evalx::wilcoxon_signed_rank;
use sbdm_core::icosphere::{build_icosphere, RING_ARITY};
use sbdm_core::rng::stream;
use sbdm_core::sampler::{sample_delta, SampleConfig};
use sbdm_core::trainer::{draw_noise, train_step};

fn conv(c: &mut Criterion) {
    let mesh = build_icosphere(4).unwrap();
    let topo = LevelTopology::all_valid(&mesh);
    let (v, ch) = (mesh.num_vertices(), 16);
    let x = Tensor::from_rows(v, ch, noise(v * ch, 1)).unwrap();
    let k = Tensor::from_rows(RING_ARITY * ch, ch, noise(RING_ARITY * ch * ch, 2)).unwrap();
    c.bench_function("spherical_conv L4 C16 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = spherical_conv(&mut g, xv, &topo, kv, None).unwrap();
            let loss = g.sum(y);
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn network(c: &mut Criterion) {
    let (cohort, mut trainer) = desk();
    let s = &cohort.subjects[0];
    let x = s.baseline.to_f64();
    let cond = s.condition(None);
    let model = trainer.model();
    let sched = BridgeSchedule::new(trainer.config.horizon).unwrap();
    c.bench_function("cosunet forward desk", |b| {
        b.iter(|| black_box(model.net.predict(&model.params, &x, 50, 24.0, &cond).unwrap()))
    });
    let grid = SampleConfig::default().grid(sched.horizon()).unwrap();
    c.bench_function("sample_delta desk 20 stages", |b| {
        b.iter(|| black_box(sample_delta(&model, &sched, &grid, &x, &cohort.mask, 24.0, &cond, None).unwrap()))
    });
    let tuples: Vec<_> = (0..16).map(|i| cohort.tuple(i, 0, false)).collect();
    let mut rng = stream(0, "bench");
    let draws = draw_noise(tuples, sched.horizon(), &mut rng);
    let net = trainer.net.clone();
    c.bench_function("train_step desk batch 16", |b| {
        b.iter(|| black_box(train_step(&net, &mut trainer.params, &sched, &draws, &cohort.mask, 1).unwrap()))
    });
}

fn wilcoxon(c: &mut Criterion) {
    for n in [25, 400] {
        let a = noise(n, 3);
        let b = noise(n, 4);
        c.bench_function(&format!("wilcoxon n={n}"), |bch| {
            bch.iter(|| black_box(wilcoxon_signed_rank(&a, &b).unwrap()))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, network, wilcoxon
}
criterion_main!(benches);
