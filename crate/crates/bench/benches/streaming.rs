use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ogmm_core::simgen::gmwm_signal;
use ogmm_core::{
    Generator, KernelLrvConfig, KernelLrvState, ModwtState, OgmmState, SgmmConfig, SgmmState, SimModel, UpdateOptions,
    WeightingMode,
};

fn ogmm_update(c: &mut Criterion) {
    let sim = SimModel::M2;
    let model = sim.moment_model();
    let mut gen = Generator::new(sim, 1).unwrap();
    let batches = gen.batches(&[1000; 12]).unwrap();
    let mut group = c.benchmark_group("ogmm_update_batch_1000");
    for (label, mode) in [
        ("welford", WeightingMode::Welford),
        ("klrv", WeightingMode::KernelLrv(KernelLrvConfig::new(1, 1.0).with_pilot(1000))),
    ] {
        let mut state = OgmmState::init(model.as_ref(), &batches[0], sim.true_theta(), mode, UpdateOptions::default()).unwrap();
        for b in &batches[1..11] {
            state.step(model.as_ref(), b).unwrap();
        }
        let next = &batches[11];
        group.bench_function(label, |bench| bench.iter(|| state.update(model.as_ref(), next).unwrap()));
    }
    group.finish();
}

fn klrv_push(c: &mut Criterion) {
    let mut gen = Generator::new(SimModel::M2, 2).unwrap();
    let batch = gen.next_batch(10_000).unwrap();
    let rows: Vec<Vec<f64>> = batch.rows().map(<[f64]>::to_vec).collect();
    let mut state = KernelLrvState::new(rows[0].len(), KernelLrvConfig::new(1, 1.0)).unwrap();
    for r in &rows {
        state.push(r);
    }
    let mut i = 0;
    c.bench_function("klrv_push_dim7", |bench| {
        bench.iter(|| {
            state.push(&rows[i % rows.len()]);
            i += 1;
        })
    });
}

fn modwt_push(c: &mut Criterion) {
    let y = gmwm_signal(&[0.9, 1.0, 0.5], 4096, 3).unwrap();
    let (mut state, _) = ModwtState::init(&y[..1024], 8).unwrap();
    let mut out = vec![0.0; 8];
    let mut i = 1024;
    c.bench_function("modwt_push_8_levels", |bench| {
        bench.iter(|| {
            state.push_into(y[i % y.len()], &mut out);
            i += 1;
        })
    });
}

fn sgmm_step(c: &mut Criterion) {
    let sim = SimModel::M2;
    let model = sim.moment_model();
    let mut gen = Generator::new(sim, 4).unwrap();
    let batches = gen.batches(&[1000, 1000]).unwrap();
    let state = SgmmState::init(model.as_ref(), &batches[0], sim.true_theta(), &SgmmConfig::default()).unwrap();
    c.bench_function("sgmm_step_batch_1000", |bench| {
        bench.iter_batched(
            || state.clone(),
            |mut s| {
                s.step_batch(model.as_ref(), &batches[1]).unwrap();
                s
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, ogmm_update, klrv_push, modwt_push, sgmm_step);
criterion_main!(benches);
