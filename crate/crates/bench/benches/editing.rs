use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use microedit_bench::{bench_model, bench_requests, bench_world};
use microedit_core::editors::{apply_to_model, make_editor, rollback, Method};
use microedit_core::harness::default_hparams;
use microedit_core::microlm::causal_trace;
use microedit_core::rng::CounterRng;

fn rome_edit_bench(c: &mut Criterion) {
    let world = bench_world();
    let model = bench_model(&world);
    let requests = bench_requests(&world, 1);
    let mut hp = default_hparams(Method::Rome, &model.config).unwrap();
    // Keep the covariance sample small so each iteration stays short.
    microedit_core::harness::set_knob(&mut hp, "covariance_samples", 500_i64);
    microedit_core::harness::set_knob(&mut hp, "v_steps", 5_i64);

    c.bench_function("rome_single_edit", |b| {
        b.iter(|| {
            let mut m = model.clone();
            let mut editor = make_editor(Method::Rome, &world).unwrap();
            let mut outcome =
                apply_to_model(editor.as_mut(), &mut m, &requests, &hp, true).unwrap();
            rollback(editor.as_mut(), &mut m, &mut outcome).unwrap();
            black_box(outcome.extra_state_bytes)
        });
    });
}

fn trace_bench(c: &mut Criterion) {
    let world = bench_world();
    let model = bench_model(&world);
    let requests = bench_requests(&world, 1);
    c.bench_function("causal_trace_2_samples", |b| {
        b.iter(|| {
            let mut rng = CounterRng::seed(5);
            black_box(causal_trace(&model, &requests[0], 3.0, 2, &mut rng).unwrap())
        });
    });
}

criterion_group!(benches, rome_edit_bench, trace_bench);
criterion_main!(benches);
