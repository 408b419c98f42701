use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mfswitch_core::backward::driver_fn;
use mfswitch_core::forward::sde_fn;
use mfswitch_core::lq::scalar_blocks;
use mfswitch_core::measure::wasserstein2_1d;
use mfswitch_core::{
    simulate_conditional_mkv_sde, solve_control_problem, solve_mkv_bsde, BackwardConfig, Dims, EmpiricalMeasure,
    InitialCondition, LqCoefficients, NoiseBank, Numerics, SimulationSetup, Terminal, TimeGrid,
};

fn ou_bank(particles: usize) -> NoiseBank {
    let grid = TimeGrid::new(0.0, 2.0, 0.01).unwrap();
    NoiseBank::generate(&SimulationSetup::new(grid, particles, 4, 1, Dims::scalar(1))).unwrap()
}

fn forward(c: &mut Criterion) {
    let bank = ou_bank(1024);
    let ou = sde_fn(Dims::scalar(1), |_, x, _, mom, out| {
        out.drift[0] = -x[0] + 0.5 * mom.mean_x[0];
        out.diffusion[0] = 0.3;
        out.common[0] = 0.1;
    })
    .theta_free();
    let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.5] };
    c.bench_function("forward 4x1024x200", |b| b.iter(|| simulate_conditional_mkv_sde(&ou, &x0, black_box(&bank), None).unwrap()));
}

fn backward(c: &mut Criterion) {
    let bank = ou_bank(1024);
    let ou = sde_fn(Dims::scalar(1), |_, x, _, _, out| {
        out.drift[0] = -x[0];
        out.diffusion[0] = 0.3;
    })
    .theta_free();
    let ens = simulate_conditional_mkv_sde(&ou, &InitialCondition::Constant(vec![1.0]), &bank, None).unwrap();
    let drv = driver_fn(Dims::scalar(1), |ctx, x, th, _, out| out[0] = -th[0] + ctx.t.cos() + 0.5 * x[0]).regime_free();
    let cfg = BackwardConfig { sweeps: 4, ..BackwardConfig::default() };
    c.bench_function("backward 4x1024x200", |b| b.iter(|| solve_mkv_bsde(&drv, black_box(&ens), &Terminal::Zero, &cfg).unwrap()));
}

fn control(c: &mut Criterion) {
    let coeffs = LqCoefficients::homogeneous(Dims::scalar(1), scalar_blocks(-1.0, 0.5, 0.0, 0.0, 1.0, 1.0, 0.3)).unwrap();
    let num = Numerics::new(TimeGrid::new(0.0, 2.0, 0.02).unwrap(), 256, 4, 1);
    let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.5] };
    let mut g = c.benchmark_group("control");
    g.sample_size(10);
    g.bench_function("riccati 4x256x100", |b| b.iter(|| solve_control_problem(&coeffs, x0.clone(), 0, -0.5, black_box(&num)).unwrap()));
    g.finish();
}

fn wasserstein(c: &mut Criterion) {
    let a: Vec<f64> = (0..4096).map(|i| ((i * 7919) % 4096) as f64 / 4096.0).collect();
    let b: Vec<f64> = a.iter().map(|x| x * x).collect();
    let (mu, nu) = (EmpiricalMeasure::scalar(&a).unwrap(), EmpiricalMeasure::scalar(&b).unwrap());
    c.bench_function("w2 4096 atoms", |bch| bch.iter(|| wasserstein2_1d(black_box(&mu), black_box(&nu)).unwrap()));
}

criterion_group!(benches, forward, backward, control, wasserstein);
criterion_main!(benches);
