use criterion::{criterion_group, criterion_main, Criterion};
use fracbayes_bench::uniforms;
use fracbayes_core::diagnostics::iact_ess;
use fracbayes_core::sampling::{select_theta, sus_resample, tempered_weights, ScaleSearch};
use nalgebra::DVector;

fn weights(c: &mut Criterion) {
    let n = 10_000;
    let fhat: Vec<f64> = uniforms(n, 1).iter().map(|u| 10.0 * u).collect();
    let f: Vec<f64> = fhat.iter().zip(uniforms(n, 2)).map(|(x, u)| x + 40.0 * u).collect();
    c.bench_function("tempered_weights_1e4", |b| b.iter(|| tempered_weights(&fhat, &f, 15.0).unwrap()));
    c.bench_function("select_theta_1e4", |b| {
        b.iter(|| select_theta(&fhat, &f, 2_000.0, 50, ScaleSearch::Bisection).unwrap())
    });
    let w = tempered_weights(&fhat, &f, 15.0).unwrap().weights;
    c.bench_function("sus_resample_1e4", |b| b.iter(|| sus_resample(&w, 7)));
}

fn chain_diagnostics(c: &mut Criterion) {
    // AR(1) chain with coefficient 0.9 in three coordinates.
    let noise = uniforms(3 * 20_000, 3);
    let mut state = DVector::zeros(3);
    let chain: Vec<DVector<f64>> = noise
        .chunks(3)
        .map(|u| {
            state = &state * 0.9 + DVector::from_fn(3, |i, _| u[i] - 0.5);
            state.clone()
        })
        .collect();
    c.bench_function("iact_ess_2e4_lag500", |b| b.iter(|| iact_ess(&chain, 500).unwrap()));
}

criterion_group!(benches, weights, chain_diagnostics);
criterion_main!(benches);
