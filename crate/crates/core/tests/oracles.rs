//! Statistical and closed-form oracles that are too slow or too broad for the
//! unit tests next to each module.

use mfswitch_core::backward::{driver_fn, transversality_check};
use mfswitch_core::coeffs::{check_game_structure, DEFAULT_PD_DELTA};
use mfswitch_core::forward::{sde_fn, weighted_l2_profile};
use mfswitch_core::game::{nash_deviation_test, project_profile};
use mfswitch_core::lq::{random_direction, riccati_scalar_oracle, scalar_blocks};
use mfswitch_core::measure::conditional_mean;
use mfswitch_core::regime::{empirical_generator, jump_martingale_ledger, simulate_regime_path};
use mfswitch_core::rng::{stream, Domain};
use mfswitch_core::*;
use nalgebra::DMatrix;

fn generator(rows: &[&[f64]]) -> GeneratorMatrix {
    GeneratorMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

#[test]
fn symmetric_chain_spends_half_its_time_in_each_state() {
    let gen = generator(&[&[-1.0, 1.0], &[1.0, -1.0]]);
    let grid = TimeGrid::new(0.0, 1e4, 1.0).unwrap();
    let path = simulate_regime_path(&gen, 0, &grid, &mut stream(1, Domain::User, 0, 0)).unwrap();
    let total = path.occupation(2, 0.0, 1e4)[0] / 1e4;
    // batch means over 100 windows of length 100
    let batches: Vec<f64> = (0..100).map(|b| path.occupation(2, b as f64 * 100.0, (b + 1) as f64 * 100.0)[0] / 100.0).collect();
    let (_, sd) = mean_sd(&batches);
    assert!((total - 0.5).abs() <= 3.0 * sd / 10.0, "{total} (SE {})", sd / 10.0);
}

#[test]
fn holding_times_are_exponential() {
    let gen = generator(&[&[-2.0, 2.0], &[3.0, -3.0]]);
    let grid = TimeGrid::new(0.0, 1e4, 1.0).unwrap();
    let path = simulate_regime_path(&gen, 0, &grid, &mut stream(2, Domain::User, 0, 0)).unwrap();
    let hold = path.holding_times();
    for (state, rate) in [(0, 2.0), (1, 3.0)] {
        let t: Vec<f64> = hold.iter().filter(|h| h.0 == state).map(|h| h.1).collect();
        assert!(t.len() >= 10_000, "{} sojourns", t.len());
        let (m, sd) = mean_sd(&t);
        let n = t.len() as f64;
        let exact = 1.0 / rate;
        assert!((m - exact).abs() <= 3.0 * exact / n.sqrt(), "state {state}: mean {m}");
        assert!((sd - exact).abs() <= 3.0 * exact * (2.0 / n).sqrt(), "state {state}: sd {sd}");
    }
}

#[test]
fn jump_targets_follow_rate_ratios() {
    let gen = generator(&[&[-3.0, 1.0, 2.0], &[1.0, -2.0, 1.0], &[0.5, 0.5, -1.0]]);
    let grid = TimeGrid::new(0.0, 5000.0, 1.0).unwrap();
    let path = simulate_regime_path(&gen, 0, &grid, &mut stream(3, Domain::User, 0, 0)).unwrap();
    let counts = path.jump_counts(3, -1.0, 5000.0);
    for i in 0..3 {
        let out: u64 = counts[i].iter().sum();
        for j in (0..3).filter(|&j| j != i) {
            let p = gen.rate(i, j) / gen.exit_rate(i);
            let f = counts[i][j] as f64 / out as f64;
            assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / out as f64).sqrt(), "{i}->{j}: {f} vs {p}");
        }
    }
}

#[test]
fn jump_martingales_have_mean_zero_and_add_up() {
    let gen = generator(&[&[-1.0, 1.0], &[2.0, -2.0]]);
    let grid = TimeGrid::new(0.0, 5.0, 0.05).unwrap();
    let ledgers: Vec<_> = (0..10_000u64)
        .map(|i| {
            let p = simulate_regime_path(&gen, (i % 2) as usize, &grid, &mut stream(4, Domain::User, i, 0)).unwrap();
            jump_martingale_ledger(&p, &gen).unwrap()
        })
        .collect();
    for (i, j) in [(0, 1), (1, 0)] {
        let m: Vec<f64> = ledgers.iter().map(|l| l.terminal(i, j)).collect();
        let (mean, sd) = mean_sd(&m);
        assert!(mean.abs() <= 3.0 * sd / 100.0, "M{i}{j}: {mean}");
    }
    let l = &ledgers[7];
    for k in [1, 37, 99] {
        let split = l.sum_over(0, k, 0, 1) + l.sum_over(k, l.intervals(), 0, 1);
        assert!((split - l.terminal(0, 1)).abs() < 1e-12);
    }
}

#[test]
fn zero_generator_gives_zero_rates() {
    let gen = generator(&[&[0.0, 0.0], &[0.0, 0.0]]);
    let grid = TimeGrid::new(0.0, 10.0, 0.1).unwrap();
    let paths: Vec<_> = (0..20u64).map(|i| simulate_regime_path(&gen, (i % 2) as usize, &grid, &mut stream(5, Domain::User, i, 0)).unwrap()).collect();
    let est = empirical_generator(&paths, 2).unwrap();
    assert_eq!(est.rates[0].as_ref().unwrap()[1], 0.0);
    assert_eq!(est.rates[1].as_ref().unwrap()[0], 0.0);
    let l = jump_martingale_ledger(&paths[0], &gen).unwrap();
    assert!(l.increments.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn conditional_mean_follows_the_mean_field_ode() {
    let abar = -0.7;
    let dims = Dims::scalar(1);
    let grid = TimeGrid::new(0.0, 2.0, 0.01).unwrap();
    for (sigma, particles, tol) in [(0.0, 4, 1e-2), (0.3, 4096, 2e-2)] {
        let sde = sde_fn(dims, move |_, _, _, mom, out| {
            out.drift[0] = abar * mom.mean_x[0];
            out.diffusion[0] = sigma;
        })
        .theta_free();
        let bank = NoiseBank::generate(&SimulationSetup::new(grid, particles, 2, 6, dims)).unwrap();
        let ens = simulate_conditional_mkv_sde(&sde, &InitialCondition::Constant(vec![1.0]), &bank, None).unwrap();
        for e in &ens {
            for k in (0..grid.nodes()).step_by(20) {
                let want = (abar * grid.time(k)).exp();
                assert!((e.mean(k)[0] - want).abs() <= tol, "sigma {sigma}, t {}: {}", grid.time(k), e.mean(k)[0]);
            }
        }
    }
}

#[test]
fn ou_profile_reaches_the_stationary_variance() {
    let dims = Dims::scalar(1);
    let sde = sde_fn(dims, |_, x, _, _, out| {
        out.drift[0] = -2.0 * x[0];
        out.diffusion[0] = 0.5;
    })
    .theta_free();
    let grid = TimeGrid::new(0.0, 5.0, 0.01).unwrap();
    let (np, ns) = (2048, 4);
    let bank = NoiseBank::generate(&SimulationSetup::new(grid, np, ns, 7, dims)).unwrap();
    let ens = simulate_conditional_mkv_sde(&sde, &InitialCondition::Constant(vec![0.0]), &bank, None).unwrap();
    let (profile, _) = weighted_l2_profile(&ens, &grid, 0.0);
    let exact = 0.0625;
    // Var(X^2) = 2 sigma^4 for a centred Gaussian
    let se = exact * (2.0 / (np * ns) as f64).sqrt();
    let last = *profile.last().unwrap();
    assert!((last - exact).abs() <= 3.0 * se, "{last} vs {exact} (SE {se})");
}

fn ou_ensembles(t: f64, dt: f64, np: usize, ns: usize, m0: usize, drift: f64) -> Vec<ParticleEnsemble> {
    let dims = Dims::scalar(m0);
    let mut setup = SimulationSetup::new(TimeGrid::new(0.0, t, dt).unwrap(), np, ns, 8, dims);
    if m0 == 2 {
        setup = setup.with_regimes(generator(&[&[-1.0, 1.0], &[1.0, -1.0]]), 0);
    }
    let bank = NoiseBank::generate(&setup).unwrap();
    let sde = sde_fn(dims, move |_, x, _, _, out| {
        out.drift[0] = drift * x[0];
        out.diffusion[0] = 0.4;
        out.common[0] = 0.2;
    })
    .theta_free();
    simulate_conditional_mkv_sde(&sde, &InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.3] }, &bank, None).unwrap()
}

#[test]
fn backward_solution_is_linear_in_driver_and_terminal() {
    let ens = ou_ensembles(2.0, 0.02, 256, 3, 1, -1.0);
    let dims = Dims::scalar(1);
    let cfg = BackwardConfig { sweeps: 4, ..BackwardConfig::default() };
    let last = ens[0].nodes() - 1;
    let terminal = |f: fn(f64) -> f64| Terminal::Values(ens.iter().map(|e| (0..e.particles).map(|p| f(e.x(last, p)[0])).collect()).collect());
    let f1 = driver_fn(dims, |ctx, x, th, _, out| out[0] = -0.5 * th[0] + ctx.t.cos() + 0.3 * x[0]);
    let f2 = driver_fn(dims, |_, x, th, _, out| out[0] = -0.5 * th[0] + 0.2 * x[0] * x[0]);
    let f12 = driver_fn(dims, |ctx, x, th, _, out| out[0] = -0.5 * th[0] + ctx.t.cos() + 0.3 * x[0] + 0.2 * x[0] * x[0]);
    let a = solve_mkv_bsde(&f1, &ens, &terminal(|x| x * x), &cfg).unwrap();
    let b = solve_mkv_bsde(&f2, &ens, &terminal(f64::sin), &cfg).unwrap();
    let c = solve_mkv_bsde(&f12, &ens, &terminal(|x| x * x + x.sin()), &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for sc in 0..3 {
        for k in 0..=last {
            for p in 0..256 {
                for (u, v, w) in [(a.y(sc, k, p), b.y(sc, k, p), c.y(sc, k, p)), (a.z(sc, k, p), b.z(sc, k, p), c.z(sc, k, p))] {
                    worst = worst.max((u[0] + v[0] - w[0]).abs());
                }
                worst = worst.max((a.z0(sc, k, p)[0] + b.z0(sc, k, p)[0] - c.z0(sc, k, p)[0]).abs());
            }
        }
    }
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn regime_free_data_carry_no_jump_loading() {
    let ens = ou_ensembles(2.0, 0.02, 128, 2, 2, -1.0);
    let drv = driver_fn(Dims::scalar(2), |ctx, x, th, _, out| out[0] = -th[0] + ctx.t.sin() + x[0]).regime_free();
    let sol = solve_mkv_bsde(&drv, &ens, &Terminal::Zero, &BackwardConfig::default()).unwrap();
    assert!(sol.k.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn transversality_of_a_zero_problem_is_zero() {
    let ens = ou_ensembles(3.0, 0.05, 32, 2, 1, -1.0);
    let drv = driver_fn(Dims::scalar(1), |_, _, _, _, _| {});
    let sol = solve_mkv_bsde(&drv, &ens, &Terminal::Zero, &BackwardConfig::default()).unwrap();
    let t = transversality_check(&[&sol], -0.5, &[0.0, 1.0, 2.0], 0.05);
    assert!(t.values[0].iter().all(|v| *v == Some(0.0)));
    assert!(!t.flagged);
}

#[test]
fn lq_adjoint_is_horizon_insensitive() {
    let c = LqCoefficients::homogeneous(Dims::scalar(1), scalar_blocks(-1.0, 0.5, 0.0, 0.0, 1.0, 1.0, 0.3)).unwrap();
    let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.5] };
    let sols: Vec<_> = [10.0, 15.0, 20.0]
        .iter()
        .map(|&t| {
            let num = Numerics::new(TimeGrid::new(0.0, t, 0.05).unwrap(), 256, 2, 9);
            solve_control_problem(&c, x0.clone(), 0, -0.5, &num).unwrap()
        })
        .collect();
    let table = transversality_check(&sols.iter().map(|s| &s.fbsde.backward).collect::<Vec<_>>(), -0.5, &[0.0, 1.0, 2.0, 3.0, 4.0], 0.05);
    assert!(table.horizon_insensitive, "{table:?}");
    assert!(!table.flagged, "{table:?}");
}

#[test]
fn growing_adjoint_is_flagged() {
    // dX = X dt and f = X give Y_s = X_s (e^{T - s} - 1); with kappa = 0.5 the
    // weighted second moment grows in s away from the horizon
    let ens = ou_ensembles(6.0, 0.02, 128, 2, 1, 1.0);
    let drv = driver_fn(Dims::scalar(1), |_, x, _, _, out| out[0] = x[0]);
    let sol = solve_mkv_bsde(&drv, &ens, &Terminal::Zero, &BackwardConfig::default()).unwrap();
    let t = transversality_check(&[&sol], 0.5, &[0.0, 1.0, 2.0, 3.0], 0.05);
    assert!(t.flagged, "{t:?}");
}

#[test]
fn weakly_coupled_adjoint_matches_riccati() {
    let blocks = scalar_blocks(-1.0, 0.2, 0.0, 0.0, 1.0, 1.0, 0.3);
    let p = riccati_scalar_oracle(&blocks, -0.5).unwrap().p;
    let c = LqCoefficients::homogeneous(Dims::scalar(1), blocks).unwrap();
    let num = Numerics::new(TimeGrid::new(0.0, 8.0, 0.02).unwrap(), 256, 4, 10);
    let sol = solve_control_problem(&c, InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.5] }, 0, -0.5, &num).unwrap();
    let g = num.grid;
    let (k0, k1) = (g.node_at_or_before(0.8), g.node_at_or_before(4.8));
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (sc, e) in sol.fbsde.forward.iter().enumerate() {
        for k in k0..=k1 {
            for q in 0..e.particles {
                let (x, y) = (e.x(k, q)[0], sol.fbsde.backward.y(sc, k, q)[0]);
                sxx += x * x;
                sxy += x * y;
            }
        }
    }
    let ratio = sxy / sxx;
    assert!((ratio - p).abs() <= 0.05 * p, "Y/X = {ratio}, p = {p}");
}

#[test]
fn identical_regimes_make_the_generator_irrelevant() {
    let c = LqCoefficients::homogeneous(Dims::scalar(2), scalar_blocks(-1.0, 0.5, 0.1, 0.0, 1.0, 1.0, 0.3)).unwrap();
    let x0 = InitialCondition::Constant(vec![1.0]);
    let mut a = Numerics::new(TimeGrid::new(0.0, 2.0, 0.05).unwrap(), 32, 2, 11);
    a.generator = generator(&[&[-1.0, 1.0], &[2.0, -2.0]]);
    let mut b = a.clone();
    b.generator = generator(&[&[-5.0, 5.0], &[0.5, -0.5]]);
    let ra = solve_control_problem(&c, x0.clone(), 0, -0.5, &a).unwrap();
    let rb = solve_control_problem(&c, x0, 1, -0.5, &b).unwrap();
    assert_eq!(ra.control, rb.control);
    assert_eq!(ra.cost.total, rb.cost.total);
}

fn game_numerics(particles: usize, scenarios: usize) -> Numerics {
    let mut num = Numerics::new(TimeGrid::new(0.0, 2.0, 0.05).unwrap(), particles, scenarios, 12);
    num.picard.tol = 1e-10;
    num
}

#[test]
fn zero_game_has_a_zero_equilibrium() {
    let lq = LqCoefficients::homogeneous(Dims::scalar(1), LqBlocks::scalar_unit_r()).unwrap();
    let g = GameCoefficients::new(lq, vec![vec![s(0.0)]], vec![vec![s(0.0)]], 0.0).unwrap();
    let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.3] };
    let eq = solve_game_fixed_point(&g, &x0, 0, -0.5, &game_numerics(32, 2), GameMode::Direct, 0.5).unwrap();
    assert!(eq.converged);
    for sc in 0..2 {
        assert!(eq.control.scenario_values(sc).iter().all(|v| *v == 0.0));
    }
    let rep = nash_deviation_test(&g, &x0, &eq, 5, &[0.1, 0.3], 1).unwrap();
    assert_eq!(rep.base_cost, 0.0);
    assert!(rep.pass);
}

#[test]
fn equal_cross_bars_with_k_zero_solve() {
    let mut b = LqBlocks::scalar_unit_r();
    b.a = s(-1.0);
    b.b = s(0.8);
    b.q = s(1.0);
    b.q_bar = s(0.2);
    b.s = s(0.1);
    b.sigma[0] = 0.3;
    let lq = LqCoefficients::homogeneous(Dims::scalar(1), b).unwrap();
    let g = GameCoefficients::new(lq, vec![vec![s(0.2)]], vec![vec![s(0.2)]], 0.0).unwrap();
    assert!(check_game_structure(&g, DEFAULT_PD_DELTA).pass);
    let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.3] };
    let eq = solve_game_fixed_point(&g, &x0, 0, -0.5, &game_numerics(64, 2), GameMode::Direct, 0.5).unwrap();
    assert!(eq.converged, "{:?}", eq.failure);
}

#[test]
fn projection_is_the_within_scenario_average() {
    let ens = ou_ensembles(1.0, 0.05, 64, 3, 1, -1.0);
    let grid = ens[0].noise.regime.grid;
    let u = random_direction(1, &grid, 64, 3, 13, 0);
    let prof = project_profile(&u, &ens).unwrap();
    for (sc, e) in ens.iter().enumerate() {
        for k in [0, 7, grid.steps] {
            let cloud = EmpiricalMeasure::uniform(e.node(k).to_vec(), 1).unwrap();
            assert!((prof.x(sc, k)[0] - conditional_mean(&cloud)[0]).abs() < 1e-14);
            let us: Vec<f64> = (0..64).map(|p| u.at(sc, k, p)[0]).collect();
            let mu = conditional_mean(&EmpiricalMeasure::scalar(&us).unwrap())[0];
            assert!((prof.u(sc, k)[0] - mu).abs() < 1e-14);
        }
    }
}
