use calmi::deltasolve::{solve_delta, CalibrationTarget, LinpredProfile};
use calmi::glm::{fit, FitOptions};
use calmi::simlab::{apply_method, replicate, ScenarioConfig};
use calmi::{DesignSpec, Mechanism, Method};
use calmi_bench::amputed_dataset;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn glm_fit(c: &mut Criterion) {
    let ds = amputed_dataset(5000, Mechanism::M4, 1);
    let observed = ds.response_indicator(ds.index_of("x").unwrap());
    let spec = DesignSpec::new("x", ["y"]);
    let options = FitOptions { rows: Some(&observed), ..FitOptions::default() };
    c.bench_function("glm_fit_binary_n5000", |b| b.iter(|| fit(black_box(&ds), &spec, &options).unwrap()));
}

fn delta_solve(c: &mut Criterion) {
    let binary = CalibrationTarget::binary(0.7, 0.6, 0.65).unwrap();
    let profiles = vec![LinpredProfile::new(vec![0.2], 300.0), LinpredProfile::new(vec![0.6], 400.0)];
    c.bench_function("delta_solve_binary", |b| b.iter(|| solve_delta(black_box(&binary), &profiles).unwrap()));

    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let cat = CalibrationTarget::new(names, vec![0.72, 0.12, 0.08, 0.08], vec![0.78, 0.1, 0.06, 0.06], 0.75).unwrap();
    let profiles: Vec<LinpredProfile> = (0..12)
        .map(|i| {
            let s = i as f64 / 12.0;
            LinpredProfile::new(vec![-1.8 + 0.4 * s, -2.2 + 0.3 * s, -2.3 - 0.2 * s], 10.0 + i as f64)
        })
        .collect();
    c.bench_function("delta_solve_4_levels", |b| b.iter(|| solve_delta(black_box(&cat), &profiles).unwrap()));
}

fn scenario_repetition(c: &mut Criterion) {
    let cfg = ScenarioConfig::desk(Mechanism::M4, 7);
    let mut group = c.benchmark_group("desk_repetition_m4");
    group.sample_size(20);
    for method in [Method::StandardMi, Method::CalibratedMi, Method::ConditionalWeightedMi] {
        group.bench_function(method.name(), |b| {
            b.iter_batched(
                || replicate(&cfg, 0).unwrap(),
                |data| apply_method(&data, method, cfg.m, 3).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, glm_fit, delta_solve, scenario_repetition);
criterion_main!(benches);
