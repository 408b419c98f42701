//! Mean-field linear-quadratic control with regime switching and common noise.
//!
//! The cross terms `S`, `Sbar` are first removed by the control shift of
//! [`transform_cross_terms`]; the optimality system of the shifted problem is a
//! coupled conditional McKean-Vlasov FBSDE whose control is an explicit
//! function of the adjoint. The optimal control of the original problem is the
//! shift undone.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::backward::{solve_mkv_bsde, BackwardConfig, BackwardSolution, Driver};
use crate::coeffs::{
    check_positive_definiteness, compute_kappa_bounds, transform_cross_terms, Dims, KappaBounds, LqBlocks, LqCoefficients,
    LqPiece, PdReport, TransformedBlocks, TransformedCoefficients, DEFAULT_PD_DELTA,
};
use crate::coupled::{
    solve_fbsde_continuation, solve_fbsde_picard, BlockCtx, FbsdeProblem, FbsdeSolution, PicardConfig, TestFunctionals,
};
use crate::error::{Error, Result};
use crate::forward::{
    simulate_conditional_mkv_sde, InitialCondition, MomentSummary, NoiseBank, ParticleEnsemble, PointCtx, SdeCoefficients,
    SdeOutput, SimulationSetup,
};
use crate::game::PopulationProfile;
use crate::grid::TimeGrid;
use crate::linalg::{axpy, dot, gemv, gemv_t, lambda_min, norm_sq, spectral_norm};
use crate::regime::GeneratorMatrix;
use crate::rng::{stream, Domain};

/// Largest control or stacked-diffusion length handled without allocation.
pub(crate) const MAX_DIM: usize = 64;

/// Discretisation and solver settings shared by the control and game solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    pub grid: TimeGrid,
    pub particles: usize,
    pub scenarios: usize,
    pub seed: u64,
    pub generator: GeneratorMatrix,
    pub picard: PicardConfig,
    /// number of homotopy steps; 0 or 1 runs Picard on the target directly
    pub lambda_steps: usize,
    pub backward: BackwardConfig,
    pub kappa_star: f64,
}

impl Numerics {
    pub fn new(grid: TimeGrid, particles: usize, scenarios: usize, seed: u64) -> Self {
        Self {
            grid,
            particles,
            scenarios,
            seed,
            generator: GeneratorMatrix::trivial(),
            picard: PicardConfig::default(),
            lambda_steps: 0,
            // implicit adjoint step, so the control read off the stored adjoint
            // is the one the driver saw
            backward: BackwardConfig { sweeps: 4, ..BackwardConfig::default() },
            kappa_star: f64::INFINITY,
        }
    }

    pub fn setup(&self, dims: Dims, initial_regime: usize) -> SimulationSetup {
        SimulationSetup::new(self.grid, self.particles, self.scenarios, self.seed, dims)
            .with_regimes(self.generator.clone(), initial_regime)
    }

    pub fn schedule(&self) -> Vec<f64> {
        let k = self.lambda_steps.max(1);
        (0..=k).map(|i| i as f64 / k as f64).collect()
    }
}

pub(crate) fn run_solver(p: &FbsdeProblem, num: &Numerics) -> Result<FbsdeSolution> {
    if num.lambda_steps >= 2 {
        solve_fbsde_continuation(p, &num.schedule(), &num.picard)
    } else {
        solve_fbsde_picard(p, &num.picard)
    }
}

/// A control given pointwise on the simulation lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess {
    m: usize,
    particles: usize,
    nodes: usize,
    /// per scenario, `nodes x particles x m`
    values: Vec<Vec<f64>>,
    /// per scenario, `nodes x m`
    means: Vec<Vec<f64>>,
}

impl ControlProcess {
    pub fn new(m: usize, particles: usize, nodes: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().any(|v| v.len() != m * particles * nodes) {
            return Err(Error::DimensionMismatch("control values do not match nodes x particles x m".into()));
        }
        let means = values
            .iter()
            .map(|v| {
                let mut out = vec![0.0; nodes * m];
                for k in 0..nodes {
                    for p in 0..particles {
                        axpy(&mut out[k * m..(k + 1) * m], &v[(k * particles + p) * m..(k * particles + p + 1) * m], 1.0);
                    }
                }
                out.iter_mut().for_each(|x| *x /= particles as f64);
                out
            })
            .collect();
        Ok(Self { m, particles, nodes, values, means })
    }

    pub fn zeros(m: usize, particles: usize, nodes: usize, scenarios: usize) -> Self {
        Self::new(m, particles, nodes, vec![vec![0.0; m * particles * nodes]; scenarios]).expect("consistent sizes")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn scenarios(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn at(&self, s: usize, k: usize, p: usize) -> &[f64] {
        let o = (k * self.particles + p) * self.m;
        &self.values[s][o..o + self.m]
    }

    /// Scenario mean at node `k`.
    #[inline]
    pub fn mean(&self, s: usize, k: usize) -> &[f64] {
        &self.means[s][k * self.m..(k + 1) * self.m]
    }

    pub fn scenario_values(&self, s: usize) -> &[f64] {
        &self.values[s]
    }

    /// `self + eps * v`.
    pub fn perturbed(&self, v: &ControlProcess, eps: f64) -> Result<Self> {
        if v.m != self.m || v.particles != self.particles || v.nodes != self.nodes || v.values.len() != self.values.len() {
            return Err(Error::DimensionMismatch("perturbation direction has a different shape".into()));
        }
        let values = self.values.iter().zip(&v.values).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + eps * y).collect()).collect();
        Self::new(self.m, self.particles, self.nodes, values)
    }

    /// `sqrt(sum_k w_k e^{kappa t_k} E|u_k|^2)` over all scenarios and particles.
    pub fn weighted_norm(&self, grid: &TimeGrid, kappa: f64) -> f64 {
        let w = grid.discounted_weights(kappa);
        let total: f64 = self
            .values
            .iter()
            .map(|v| (0..self.nodes).map(|k| w[k] * norm_sq(&v[k * self.particles * self.m..(k + 1) * self.particles * self.m])).sum::<f64>())
            .sum();
        (total / (self.values.len() * self.particles) as f64).sqrt()
    }
}

/// Precomputed data of one piece and regime.
struct Kernel {
    raw: LqBlocks,
    t: TransformedBlocks,
    bb: DMatrix<f64>,
    db: DMatrix<f64>,
    nb: DMatrix<f64>,
    rr_lin: Vec<f64>,
    /// `R^-1 S` and `(R + Rbar)^-1 (S + Sbar)`
    rs: DMatrix<f64>,
    rrss: DMatrix<f64>,
}

impl Kernel {
    fn new(raw: &LqBlocks, t: &TransformedBlocks) -> Self {
        Self {
            raw: raw.clone(),
            t: t.clone(),
            bb: &raw.b + &raw.b_bar,
            db: &raw.d + &raw.d_bar,
            nb: &raw.n + &raw.n_bar,
            rr_lin: (&raw.r_lin + &raw.r_bar_lin).as_slice().to_vec(),
            rs: &t.r_inv * &raw.s,
            rrss: &t.rr_inv * (&raw.s + &raw.s_bar),
        }
    }

    /// `out += B^T y + D^T z + N^T z0`, or the same with the summed blocks.
    fn rho(&self, dims: Dims, theta: &[f64], summed: bool, out: &mut [f64]) {
        let (y, z, z0) = split(dims, theta);
        let (b, d, n) = if summed { (&self.bb, &self.db, &self.nb) } else { (&self.raw.b, &self.raw.d, &self.raw.n) };
        gemv_t(out, b, y, 1.0);
        gemv_t(out, d, z, 1.0);
        gemv_t(out, n, z0, 1.0);
    }

    /// Shifted control `v` and its scenario mean `ev`.
    fn controls(&self, dims: Dims, theta: &[f64], mean_theta: &[f64], v: &mut [f64], ev: &mut [f64]) {
        let m = dims.m;
        let mut buf = [0.0; MAX_DIM];
        let mu = &mut buf[..m];
        mu.copy_from_slice(&self.rr_lin);
        self.rho(dims, mean_theta, true, mu);
        ev.fill(0.0);
        gemv(ev, &self.t.rr_inv, mu, -1.0);
        let mut buf2 = [0.0; MAX_DIM];
        let delta = &mut buf2[..m];
        self.rho(dims, theta, false, delta);
        let mut buf3 = [0.0; MAX_DIM];
        let rm = &mut buf3[..m];
        self.rho(dims, mean_theta, false, rm);
        axpy(delta, rm, -1.0);
        v.copy_from_slice(ev);
        gemv(v, &self.t.r_inv, delta, -1.0);
    }

    /// `sign = -1` undoes the shift, `+1` applies it.
    fn shift(&self, x: &[f64], mean_x: &[f64], u: &[f64], sign: f64, out: &mut [f64]) {
        out.copy_from_slice(u);
        let mut buf = [0.0; MAX_DIM];
        let fl = &mut buf[..x.len()];
        for ((f, a), b) in fl.iter_mut().zip(x).zip(mean_x) {
            *f = a - b;
        }
        gemv(out, &self.rs, fl, sign);
        gemv(out, &self.rrss, mean_x, sign);
    }
}

fn split(dims: Dims, theta: &[f64]) -> (&[f64], &[f64], &[f64]) {
    let (n, d) = (dims.n, dims.d);
    (&theta[..n], &theta[n..n + n * d], &theta[n + n * d..])
}

fn check_max_dim(dims: Dims) -> Result<()> {
    if dims.m > MAX_DIM || dims.n > MAX_DIM {
        return Err(Error::DimensionMismatch(format!("state and control dimensions are limited to {MAX_DIM}")));
    }
    Ok(())
}

/// Forward coefficients and adjoint driver of the optimality system, with the
/// optimal shifted control substituted.
pub struct ControlHamiltonian {
    dims: Dims,
    kappa: f64,
    starts: Vec<f64>,
    kernels: Vec<Vec<Kernel>>,
    regime_dependent: bool,
}

impl ControlHamiltonian {
    fn kernel(&self, t: f64, regime: usize) -> &Kernel {
        let piece = self.starts.iter().rposition(|s| *s <= t + 1e-12).unwrap_or(0);
        &self.kernels[piece][regime]
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Shifted control at one point.
    pub fn shifted_control(&self, t: f64, regime: usize, theta: &[f64], mean_theta: &[f64], v: &mut [f64], ev: &mut [f64]) {
        self.kernel(t, regime).controls(self.dims, theta, mean_theta, v, ev)
    }

    /// Control of the original problem at one point.
    #[allow(clippy::too_many_arguments)]
    pub fn control(&self, t: f64, regime: usize, x: &[f64], mean_x: &[f64], theta: &[f64], mean_theta: &[f64], u: &mut [f64]) {
        let k = self.kernel(t, regime);
        let m = self.dims.m;
        let (mut v, mut ev) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        k.controls(self.dims, theta, mean_theta, &mut v[..m], &mut ev[..m]);
        k.shift(x, mean_x, &v[..m], -1.0, u);
    }

    /// `u -> u + R^-1 S (x - m) + (R + Rbar)^-1 (S + Sbar) m`
    pub fn shift_control(&self, t: f64, regime: usize, x: &[f64], mean_x: &[f64], u: &[f64], out: &mut [f64]) {
        self.kernel(t, regime).shift(x, mean_x, u, 1.0, out)
    }
}

pub fn assemble_control_hamiltonian(c: &LqCoefficients, tc: &TransformedCoefficients, kappa: f64) -> Result<ControlHamiltonian> {
    check_max_dim(c.dims)?;
    if tc.pieces.len() != c.pieces.len() {
        return Err(Error::DimensionMismatch("transformed blocks do not match the coefficients".into()));
    }
    let kernels = c
        .pieces
        .iter()
        .zip(&tc.pieces)
        .map(|(p, tp)| p.regimes.iter().zip(tp).map(|(b, t)| Kernel::new(b, t)).collect())
        .collect();
    Ok(ControlHamiltonian {
        dims: c.dims,
        kappa,
        starts: c.pieces.iter().map(|p| p.start).collect(),
        kernels,
        regime_dependent: !c.regime_independent(),
    })
}

impl SdeCoefficients for ControlHamiltonian {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>) {
        let k = self.kernel(ctx.t, ctx.regime);
        let (m, tl) = (self.dims.m, self.dims.theta_len());
        let zeros = [0.0; 3 * MAX_DIM];
        let th = if theta.is_empty() { &zeros[..tl] } else { theta };
        let mth = if mom.mean_theta.is_empty() { &zeros[..tl] } else { &mom.mean_theta[..] };
        let (mut v, mut ev) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        let (v, ev) = (&mut v[..m], &mut ev[..m]);
        k.controls(self.dims, th, mth, v, ev);
        let mx = &mom.mean_x;
        let (t, raw) = (&k.t, &k.raw);
        for (o, a, abar, u, ubar, c) in [
            (&mut *out.drift, &t.a, &t.a_bar, &raw.b, &raw.b_bar, &raw.drift),
            (&mut *out.diffusion, &t.c, &t.c_bar, &raw.d, &raw.d_bar, &raw.sigma),
            (&mut *out.common, &t.m, &t.m_bar, &raw.n, &raw.n_bar, &raw.gamma),
        ] {
            gemv(o, a, x, 1.0);
            gemv(o, abar, mx, 1.0);
            gemv(o, u, v, 1.0);
            gemv(o, ubar, ev, 1.0);
            axpy(o, c.as_slice(), 1.0);
        }
    }
}

impl Driver for ControlHamiltonian {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut [f64]) {
        let k = self.kernel(ctx.t, ctx.regime);
        let t = &k.t;
        gemv(out, &t.q, x, 1.0);
        gemv(out, &t.q_bar, &mom.mean_x, 1.0);
        axpy(out, t.q_lin.as_slice(), 1.0);
        axpy(out, t.q_bar_lin.as_slice(), 1.0);
        if theta.is_empty() {
            return;
        }
        let (y, z, z0) = split(self.dims, theta);
        axpy(out, y, self.kappa);
        gemv_t(out, &t.a, y, 1.0);
        gemv_t(out, &t.c, z, 1.0);
        gemv_t(out, &t.m, z0, 1.0);
        if !mom.mean_theta.is_empty() {
            let (my, mz, mz0) = split(self.dims, &mom.mean_theta);
            gemv_t(out, &t.a_bar, my, 1.0);
            gemv_t(out, &t.c_bar, mz, 1.0);
            gemv_t(out, &t.m_bar, mz0, 1.0);
        }
    }

    fn regime_dependent(&self) -> bool {
        self.regime_dependent
    }
}

/// The optimality system as a coupled FBSDE. `kappa_x` comes from the bounds
/// and `kappa_y` is matched to it.
pub fn control_problem(
    c: &LqCoefficients,
    x0: InitialCondition,
    initial_regime: usize,
    kappa: f64,
    num: &Numerics,
) -> Result<(FbsdeProblem, Arc<ControlHamiltonian>, KappaBounds)> {
    validate_regimes(c.dims, num, initial_regime)?;
    let tc = transform_cross_terms(c)?;
    let bounds = compute_kappa_bounds(&tc, kappa, num.kappa_star);
    let ham = Arc::new(assemble_control_hamiltonian(c, &tc, kappa)?);
    let mut p = FbsdeProblem::new(ham.clone(), ham.clone(), x0, num.setup(c.dims, initial_regime), kappa)?
        .with_kappa_x(bounds.kappa_x)
        .with_backward(num.backward);
    p.kappa_star = num.kappa_star;
    Ok((p, ham, bounds))
}

pub(crate) fn validate_regimes(dims: Dims, num: &Numerics, initial_regime: usize) -> Result<()> {
    if num.generator.m0() != dims.m0 {
        return Err(Error::DimensionMismatch(format!("generator has {} regimes, coefficients {}", num.generator.m0(), dims.m0)));
    }
    if initial_regime >= dims.m0 {
        return Err(Error::StateOutOfRange(initial_regime));
    }
    Ok(())
}

/// Optimal control of the original problem read off a solved optimality system.
pub fn extract_control(ham: &ControlHamiltonian, sol: &FbsdeSolution) -> Result<ControlProcess> {
    let dims = ham.dims;
    let grid = *sol.grid();
    let (n, m) = (dims.n, dims.m);
    let values: Vec<Vec<f64>> = sol
        .forward
        .par_iter()
        .map(|e| {
            let th = &sol.backward.theta[e.scenario];
            let np = e.particles;
            let mut out = vec![0.0; grid.nodes() * np * m];
            for k in 0..grid.nodes() {
                let (t, reg) = (grid.time(k), e.regime(k));
                let mx = e.mean(k);
                let mth = th.mean(k);
                for p in 0..np {
                    let o = (k * np + p) * m;
                    ham.control(t, reg, &e.x(k, p)[..n], &mx, th.at(k, p), &mth, &mut out[o..o + m]);
                }
            }
            out
        })
        .collect();
    ControlProcess::new(m, sol.backward.theta.first().map_or(0, |t| t.particles), grid.nodes(), values)
}

/// Open-loop state dynamics driven by a given control. With a profile, the
/// mean-field inputs are frozen at it instead of the empirical means.
struct OpenLoop<'a> {
    c: &'a LqCoefficients,
    u: &'a ControlProcess,
    profile: Option<&'a PopulationProfile>,
}

impl SdeCoefficients for OpenLoop<'_> {
    fn dims(&self) -> Dims {
        self.c.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], _: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>) {
        let b = self.c.blocks(ctx.t, ctx.regime);
        let u = self.u.at(ctx.scenario, ctx.node, ctx.particle);
        let (mx, mu) = match self.profile {
            Some(pr) => (pr.x(ctx.scenario, ctx.node), pr.u(ctx.scenario, ctx.node)),
            None => (&mom.mean_x[..], self.u.mean(ctx.scenario, ctx.node)),
        };
        for (o, a, abar, bu, bubar, c) in [
            (&mut *out.drift, &b.a, &b.a_bar, &b.b, &b.b_bar, &b.drift),
            (&mut *out.diffusion, &b.c, &b.c_bar, &b.d, &b.d_bar, &b.sigma),
            (&mut *out.common, &b.m, &b.m_bar, &b.n, &b.n_bar, &b.gamma),
        ] {
            gemv(o, a, x, 1.0);
            gemv(o, abar, mx, 1.0);
            gemv(o, bu, u, 1.0);
            gemv(o, bubar, mu, 1.0);
            axpy(o, c.as_slice(), 1.0);
        }
    }

    fn depends_on_theta(&self) -> bool {
        false
    }
}

fn check_control_shape(c: &LqCoefficients, bank: &NoiseBank, u: &ControlProcess) -> Result<()> {
    if u.m != c.dims.m || u.particles != bank.setup.particles || u.nodes != bank.grid().nodes() || u.scenarios() != bank.scenarios.len() {
        return Err(Error::DimensionMismatch("control does not match the noise bank".into()));
    }
    Ok(())
}

/// State generated by `u` on the noise of `bank`.
pub fn simulate_controlled_state(
    c: &LqCoefficients,
    x0: &InitialCondition,
    bank: &NoiseBank,
    u: &ControlProcess,
) -> Result<Vec<ParticleEnsemble>> {
    check_control_shape(c, bank, u)?;
    simulate_conditional_mkv_sde(&OpenLoop { c, u, profile: None }, x0, bank, None)
}

pub(crate) fn simulate_against_profile(
    c: &LqCoefficients,
    x0: &InitialCondition,
    bank: &NoiseBank,
    u: &ControlProcess,
    profile: &PopulationProfile,
) -> Result<Vec<ParticleEnsemble>> {
    check_control_shape(c, bank, u)?;
    simulate_conditional_mkv_sde(&OpenLoop { c, u, profile: Some(profile) }, x0, bank, None)
}

/// Discounted cost split by term. Every term already carries the factor 1/2.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub total: f64,
    /// `<QX, X>`
    pub state_quadratic: f64,
    /// `<Ru, u>`
    pub control_quadratic: f64,
    /// `2<SX, u>` and `2<Sbar E X, E u>`
    pub cross: f64,
    /// `<Qbar E X, E X>` and `<Rbar E u, E u>`
    pub mean_field_quadratic: f64,
    /// the linear terms
    pub linear: f64,
    /// Monte Carlo standard error of `total`
    pub se: f64,
    /// `exp((kappa - kappa_bar)(T - t0))`, when `kappa_bar` is known
    pub tail_factor: Option<f64>,
    /// `tail_factor * |total|`
    pub tail_bound: Option<f64>,
    #[serde(skip)]
    pub scenario_totals: Vec<f64>,
}

pub(crate) const COMPONENTS: usize = 5;

/// Integrate per-particle cost components `g(s, k, p) -> [f64; 5]` (already
/// including the factor 1/2) against the discounted trapezoid weights.
pub(crate) fn integrate_cost<F>(
    grid: &TimeGrid,
    kappa: f64,
    kappa_bar: Option<f64>,
    scenarios: usize,
    particles: usize,
    g: F,
) -> CostBreakdown
where
    F: Fn(usize, usize, usize) -> [f64; COMPONENTS] + Sync,
{
    let w = grid.discounted_weights(kappa);
    // per scenario: component means and per-particle totals
    let per: Vec<([f64; COMPONENTS], Vec<f64>)> = (0..scenarios)
        .into_par_iter()
        .map(|s| {
            let mut comp = [0.0; COMPONENTS];
            let mut totals = vec![0.0; particles];
            for (k, wk) in w.iter().enumerate() {
                for (p, tot) in totals.iter_mut().enumerate() {
                    let v = g(s, k, p);
                    for i in 0..COMPONENTS {
                        comp[i] += wk * v[i];
                        *tot += wk * v[i];
                    }
                }
            }
            comp.iter_mut().for_each(|c| *c /= particles as f64);
            (comp, totals)
        })
        .collect();
    let mut comp = [0.0; COMPONENTS];
    for (c, _) in &per {
        for i in 0..COMPONENTS {
            comp[i] += c[i] / scenarios as f64;
        }
    }
    let scenario_totals: Vec<f64> = per.iter().map(|(c, _)| c.iter().sum()).collect();
    let se = if scenarios >= 2 {
        std_error(&scenario_totals)
    } else {
        per.first().map_or(0.0, |(_, t)| std_error(t))
    };
    let total: f64 = comp.iter().sum();
    let tail_factor = kappa_bar.map(|kb| ((kappa - kb) * (grid.horizon() - grid.t0)).exp());
    CostBreakdown {
        total,
        state_quadratic: comp[0],
        control_quadratic: comp[1],
        cross: comp[2],
        mean_field_quadratic: comp[3],
        linear: comp[4],
        se,
        tail_factor,
        tail_bound: tail_factor.map(|f| f * total.abs()),
        scenario_totals,
    }
}

pub(crate) fn std_error(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `<A x, y>` without allocation.
#[inline]
pub(crate) fn bilinear(a: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let mut buf = [0.0; MAX_DIM];
    let ax = &mut buf[..a.nrows()];
    gemv(ax, a, x, 1.0);
    dot(ax, y)
}

/// Discounted cost `J(u)` of a control along the state it generates.
pub fn evaluate_cost(
    c: &LqCoefficients,
    kappa: f64,
    kappa_bar: Option<f64>,
    states: &[ParticleEnsemble],
    u: &ControlProcess,
) -> Result<CostBreakdown> {
    let first = states.first().ok_or(Error::EmptySample)?;
    let grid = first.noise.regime.grid;
    if u.scenarios() != states.len() || u.particles != first.particles || u.nodes != grid.nodes() || u.m != c.dims.m {
        return Err(Error::DimensionMismatch("control does not match the states".into()));
    }
    let means: Vec<Vec<Vec<f64>>> = states.iter().map(|e| (0..grid.nodes()).map(|k| e.mean(k)).collect()).collect();
    Ok(integrate_cost(&grid, kappa, kappa_bar, states.len(), first.particles, |s, k, p| {
        let e = &states[s];
        let b = c.blocks(grid.time(k), e.regime(k));
        let (x, ux) = (e.x(k, p), u.at(s, k, p));
        let (mx, mu) = (&means[s][k][..], u.mean(s, k));
        let lin = 2.0 * dot(b.q_lin.as_slice(), x)
            + 2.0 * dot(b.q_bar_lin.as_slice(), mx)
            + 2.0 * dot(b.r_lin.as_slice(), ux)
            + 2.0 * dot(b.r_bar_lin.as_slice(), mu);
        [
            0.5 * bilinear(&b.q, x, x),
            0.5 * bilinear(&b.r, ux, ux),
            0.5 * (2.0 * bilinear(&b.s, x, ux) + 2.0 * bilinear(&b.s_bar, mx, mu)),
            0.5 * (bilinear(&b.q_bar, mx, mx) + bilinear(&b.r_bar, mu, mu)),
            0.5 * lin,
        ]
    }))
}

/// Cost of the shifted problem, evaluated on the shifted control of `u`.
pub fn evaluate_transformed_cost(
    c: &LqCoefficients,
    tc: &TransformedCoefficients,
    kappa: f64,
    states: &[ParticleEnsemble],
    u: &ControlProcess,
) -> Result<f64> {
    let ham = assemble_control_hamiltonian(c, tc, kappa)?;
    let v = shift_process(&ham, states, u, 1.0)?;
    let first = states.first().ok_or(Error::EmptySample)?;
    let grid = first.noise.regime.grid;
    let means: Vec<Vec<Vec<f64>>> = states.iter().map(|e| (0..grid.nodes()).map(|k| e.mean(k)).collect()).collect();
    let cost = integrate_cost(&grid, kappa, None, states.len(), first.particles, |s, k, p| {
        let e = &states[s];
        let t = grid.time(k);
        let reg = e.regime(k);
        let kr = ham.kernel(t, reg);
        let (tb, b) = (&kr.t, &kr.raw);
        let (x, vx) = (e.x(k, p), v.at(s, k, p));
        let (mx, mv) = (&means[s][k][..], v.mean(s, k));
        let quad = bilinear(&tb.q, x, x) + bilinear(&b.r, vx, vx) + bilinear(&tb.q_bar, mx, mx) + bilinear(&b.r_bar, mv, mv);
        let lin = 2.0 * dot(tb.q_lin.as_slice(), x)
            + 2.0 * dot(b.r_lin.as_slice(), vx)
            + 2.0 * dot(tb.q_bar_lin.as_slice(), mx)
            + 2.0 * dot(b.r_bar_lin.as_slice(), mv);
        [0.5 * quad, 0.0, 0.0, 0.0, 0.5 * lin]
    });
    Ok(cost.total)
}

/// Apply (`sign = 1`) or undo (`-1`) the control shift along the given states.
pub fn shift_process(ham: &ControlHamiltonian, states: &[ParticleEnsemble], u: &ControlProcess, sign: f64) -> Result<ControlProcess> {
    let first = states.first().ok_or(Error::EmptySample)?;
    let grid = first.noise.regime.grid;
    let m = u.m;
    let values = states
        .par_iter()
        .map(|e| {
            let mut out = vec![0.0; u.values[e.scenario].len()];
            for k in 0..grid.nodes() {
                let kr = ham.kernel(grid.time(k), e.regime(k));
                let mx = e.mean(k);
                for p in 0..e.particles {
                    let o = (k * e.particles + p) * m;
                    kr.shift(e.x(k, p), &mx, u.at(e.scenario, k, p), sign, &mut out[o..o + m]);
                }
            }
            out
        })
        .collect();
    ControlProcess::new(m, u.particles, u.nodes, values)
}

#[derive(Debug, Clone)]
pub struct ControlSolution {
    /// optimal control of the original problem
    pub control: ControlProcess,
    /// state generated by `control`, on the solver's noise
    pub state: Vec<ParticleEnsemble>,
    pub fbsde: FbsdeSolution,
    pub cost: CostBreakdown,
    pub bounds: KappaBounds,
    pub pd: PdReport,
    pub hamiltonian: Arc<ControlHamiltonian>,
}

impl std::fmt::Debug for ControlHamiltonian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlHamiltonian").field("dims", &self.dims).field("kappa", &self.kappa).finish_non_exhaustive()
    }
}

/// Solve the control problem. A run that fails to converge still returns its
/// last iterate; check `fbsde.converged`.
pub fn solve_control_problem(
    c: &LqCoefficients,
    x0: InitialCondition,
    initial_regime: usize,
    kappa: f64,
    num: &Numerics,
) -> Result<ControlSolution> {
    let pd = check_positive_definiteness(c, DEFAULT_PD_DELTA).into_result()?;
    let (p, ham, bounds) = control_problem(c, x0.clone(), initial_regime, kappa, num)?;
    let fbsde = run_solver(&p, num)?;
    let control = extract_control(&ham, &fbsde)?;
    let state = simulate_controlled_state(c, &x0, &fbsde.bank, &control)?;
    let cost = evaluate_cost(c, kappa, Some(bounds.kappa_bar), &state, &control)?;
    Ok(ControlSolution { control, state, fbsde, cost, bounds, pd, hamiltonian: ham })
}

/// Adjoint of the shifted problem along given states, cross-fitted.
pub fn solve_adjoint(ham: &ControlHamiltonian, states: &[ParticleEnsemble], cfg: &BackwardConfig) -> Result<BackwardSolution> {
    let cfg = BackwardConfig { cross_fit: true, ..*cfg };
    solve_mkv_bsde(ham, states, &crate::backward::Terminal::Zero, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    /// `sqrt(E|residual|^2)` per node
    pub per_node: Vec<f64>,
    /// `sqrt(int e^{kappa s} E|residual|^2 ds)`
    pub weighted_norm: f64,
}

/// First-order optimality residual
/// `B^T Y + Bbar^T E Y + D^T Z + Dbar^T E Z + N^T Z0 + Nbar^T E Z0 + R v + Rbar E v + r + rbar`
/// where `v` is the shifted control of `u` and the adjoint is solved along the
/// state of `u`.
pub fn stationarity_residual(
    ham: &ControlHamiltonian,
    states: &[ParticleEnsemble],
    u: &ControlProcess,
    adjoint: &BackwardSolution,
) -> Result<StationarityReport> {
    let first = states.first().ok_or(Error::EmptySample)?;
    let grid = first.noise.regime.grid;
    let v = shift_process(ham, states, u, 1.0)?;
    let dims = ham.dims;
    let m = dims.m;
    let per_scenario: Vec<Vec<f64>> = states
        .par_iter()
        .map(|e| {
            let s = e.scenario;
            let th = &adjoint.theta[s];
            (0..grid.nodes())
                .map(|k| {
                    let kr = ham.kernel(grid.time(k), e.regime(k));
                    let mth = th.mean(k);
                    let mut base = [0.0; MAX_DIM];
                    let base = &mut base[..m];
                    // Bbar^T E Y + ... = rho2(E theta) - rho1(E theta)
                    base.copy_from_slice(&kr.rr_lin);
                    kr.rho(dims, &mth, true, base);
                    let mut r1 = [0.0; MAX_DIM];
                    kr.rho(dims, &mth, false, &mut r1[..m]);
                    axpy(base, &r1[..m], -1.0);
                    gemv(base, &kr.raw.r_bar, v.mean(s, k), 1.0);
                    let mut acc = 0.0;
                    for p in 0..e.particles {
                        let mut res = [0.0; MAX_DIM];
                        let res = &mut res[..m];
                        res.copy_from_slice(base);
                        kr.rho(dims, th.at(k, p), false, res);
                        gemv(res, &kr.raw.r, v.at(s, k, p), 1.0);
                        acc += norm_sq(res);
                    }
                    acc / e.particles as f64
                })
                .collect()
        })
        .collect();
    let ms: Vec<f64> = (0..grid.nodes()).map(|k| per_scenario.iter().map(|v| v[k]).sum::<f64>() / states.len() as f64).collect();
    let w = grid.discounted_weights(ham.kappa);
    let weighted_norm = ms.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().sqrt();
    Ok(StationarityReport { per_node: ms.iter().map(|x| x.sqrt()).collect(), weighted_norm })
}

/// Stabilising root of the scalar algebraic Riccati equation and the feedback
/// gain on the state fluctuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarRiccati {
    pub p: f64,
    pub gain: f64,
}

/// Largest non-negative root of
/// `(kappa + 2a + c^2 + m^2) p + q - p^2 (b + c d + m n)^2 / (r + p (d^2 + n^2)) = 0`.
pub fn riccati_scalar_oracle(blocks: &LqBlocks, kappa: f64) -> Result<ScalarRiccati> {
    if blocks.q.shape() != (1, 1) || blocks.r.shape() != (1, 1) || blocks.c.shape() != (1, 1) || blocks.m.shape() != (1, 1) {
        return Err(Error::InvalidArgument("the Riccati oracle needs n = m = d = d0 = 1".into()));
    }
    let s = |m: &DMatrix<f64>| m[(0, 0)];
    if s(&blocks.s) != 0.0 {
        return Err(Error::InvalidArgument("the Riccati oracle needs S = 0".into()));
    }
    let (a, b, c, d, m, n, q, r) =
        (s(&blocks.a), s(&blocks.b), s(&blocks.c), s(&blocks.d), s(&blocks.m), s(&blocks.n), s(&blocks.q), s(&blocks.r));
    if !(r > 0.0) || q < 0.0 {
        return Err(Error::NoPsdRoot);
    }
    let lin = kappa + 2.0 * a + c * c + m * m;
    let beta = b + c * d + m * n;
    let gam = d * d + n * n;
    let f = |p: f64| lin * p + q - p * p * beta * beta / (r + p * gam);
    let gain = |p: f64| -p * beta / (r + p * gam);
    if q == 0.0 && lin <= 0.0 {
        return Ok(ScalarRiccati { p: 0.0, gain: 0.0 });
    }
    let mut hi = 1.0;
    let mut tries = 0;
    while f(hi) >= 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 200 {
            return Err(Error::NoPsdRoot);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    let p = 0.5 * (lo + hi);
    Ok(ScalarRiccati { p, gain: gain(p) })
}

/// Pooled least-squares fit `u = gain * x + intercept` of a scalar control
/// over the nodes in `[t0 + lo (T - t0), t0 + hi (T - t0)]`.
pub fn estimate_feedback_gain(states: &[ParticleEnsemble], u: &ControlProcess, window: (f64, f64)) -> Result<(f64, f64)> {
    let first = states.first().ok_or(Error::EmptySample)?;
    if first.n != 1 || u.m != 1 {
        return Err(Error::InvalidArgument("gain estimate is for scalar state and control".into()));
    }
    let grid = first.noise.regime.grid;
    let span = grid.horizon() - grid.t0;
    let (k0, k1) = (grid.node_at_or_before(grid.t0 + window.0 * span), grid.node_at_or_before(grid.t0 + window.1 * span));
    let (mut sx, mut su, mut sxx, mut sxu, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for e in states {
        for k in k0..=k1 {
            for p in 0..e.particles {
                let (x, v) = (e.x(k, p)[0], u.at(e.scenario, k, p)[0]);
                sx += x;
                su += v;
                sxx += x * x;
                sxu += x * v;
                cnt += 1.0;
            }
        }
    }
    let var = sxx / cnt - (sx / cnt).powi(2);
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("state has no spread in the fitting window".into()));
    }
    let gain = (sxu / cnt - sx * su / (cnt * cnt)) / var;
    Ok((gain, su / cnt - gain * sx / cnt))
}

/// The problem whose data are the shifted blocks and whose cross terms are
/// zero. Its own shift is the identity, so its optimal control is the shifted
/// optimal control of `c`.
pub fn twin_problem(c: &LqCoefficients) -> Result<LqCoefficients> {
    let tc = transform_cross_terms(c)?;
    let pieces = c
        .pieces
        .iter()
        .zip(&tc.pieces)
        .map(|(p, tp)| LqPiece {
            start: p.start,
            regimes: p
                .regimes
                .iter()
                .zip(tp)
                .map(|(b, t)| LqBlocks {
                    a: t.a.clone(),
                    a_bar: t.a_bar.clone(),
                    c: t.c.clone(),
                    c_bar: t.c_bar.clone(),
                    m: t.m.clone(),
                    m_bar: t.m_bar.clone(),
                    q: t.q.clone(),
                    q_bar: t.q_bar.clone(),
                    s: DMatrix::zeros(b.s.nrows(), b.s.ncols()),
                    s_bar: DMatrix::zeros(b.s.nrows(), b.s.ncols()),
                    q_lin: t.q_lin.clone(),
                    q_bar_lin: t.q_bar_lin.clone(),
                    ..b.clone()
                })
                .collect(),
        })
        .collect();
    LqCoefficients::new(c.dims, pieces)
}

/// Smooth-plus-noise perturbation direction
/// `a + b sin(f pi (s - t0) / (T - t0)) + c zeta_p`, with standard normal
/// coefficients per control component and an independent normal `zeta_p` per
/// particle.
pub fn random_direction(m: usize, grid: &TimeGrid, particles: usize, scenarios: usize, seed: u64, index: u64) -> ControlProcess {
    let mut rng = stream(seed, Domain::Perturbation, index, 0);
    let coef: Vec<(f64, f64, f64, f64)> = (0..m)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let c: f64 = StandardNormal.sample(&mut rng);
            (a, b, c, rng.random_range(1..=3) as f64)
        })
        .collect();
    let span = grid.horizon() - grid.t0;
    let values = (0..scenarios)
        .map(|s| {
            let mut r = stream(seed, Domain::Perturbation, index, 1 + s as u64);
            let zeta: Vec<f64> = (0..particles * m).map(|_| StandardNormal.sample(&mut r)).collect();
            let mut out = vec![0.0; grid.nodes() * particles * m];
            for k in 0..grid.nodes() {
                let tau = (grid.time(k) - grid.t0) / span;
                for p in 0..particles {
                    for (i, &(a, b, c, f)) in coef.iter().enumerate() {
                        out[(k * particles + p) * m + i] = a + b * (f * std::f64::consts::PI * tau).sin() + c * zeta[p * m + i];
                    }
                }
            }
            out
        })
        .collect();
    ControlProcess::new(m, particles, grid.nodes(), values).expect("consistent sizes")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationTrial {
    pub direction: u64,
    pub eps: f64,
    pub cost: f64,
    /// `J(u* + eps v) - J(u*)`
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub base_cost: f64,
    pub se: f64,
    pub trials: Vec<PerturbationTrial>,
    /// smallest `delta`
    pub worst_delta: f64,
    /// every `delta >= -2 se`
    pub pass: bool,
}

pub(crate) fn summarize_perturbations(base_cost: f64, se: f64, trials: Vec<PerturbationTrial>) -> PerturbationReport {
    let worst_delta = trials.iter().map(|t| t.delta).fold(f64::INFINITY, f64::min);
    let pass = trials.iter().all(|t| t.delta >= -2.0 * se);
    PerturbationReport { base_cost, se, trials, worst_delta, pass }
}

/// Compare `J(u* + eps v)` with `J(u*)` for random directions, every cost
/// evaluated on the state its control generates, on the solver's noise.
pub fn perturbation_test(
    c: &LqCoefficients,
    x0: &InitialCondition,
    sol: &ControlSolution,
    directions: usize,
    eps: &[f64],
    seed: u64,
) -> Result<PerturbationReport> {
    let grid = *sol.fbsde.grid();
    let kappa = sol.bounds.kappa;
    let u = &sol.control;
    let mut trials = Vec::new();
    for j in 0..directions as u64 {
        let v = random_direction(u.m, &grid, u.particles, u.scenarios(), seed, j);
        for &e in eps {
            let w = u.perturbed(&v, e)?;
            let st = simulate_controlled_state(c, x0, &sol.fbsde.bank, &w)?;
            let cost = evaluate_cost(c, kappa, None, &st, &w)?.total;
            trials.push(PerturbationTrial { direction: j, eps: e, cost, delta: cost - sol.cost.total });
        }
    }
    Ok(summarize_perturbations(sol.cost.total, sol.cost.se, trials))
}

/// Constants and functionals of the domination conditions for the control
/// problem: `beta1 = min(1 / L1, L2)`, `beta2 = 0`, `psi = 0` and
/// `varphi = |rho1(dTheta) - E rho1(dTheta)|^2 + |E rho2(dTheta)|^2`.
pub fn control_test_functionals(c: &LqCoefficients) -> Result<TestFunctionals<'_>> {
    let tc = transform_cross_terms(c)?;
    let mut l1: f64 = 0.0;
    let mut l2 = f64::INFINITY;
    for (p, tp) in c.pieces.iter().zip(&tc.pieces) {
        for (b, t) in p.regimes.iter().zip(tp) {
            for (u, ub) in [(&b.b, &b.b_bar), (&b.d, &b.d_bar), (&b.n, &b.n_bar)] {
                l1 = l1.max(2.0 * spectral_norm(&(u * &t.r_inv)).powi(2));
                l1 = l1.max(2.0 * spectral_norm(&((u + ub) * &t.rr_inv)).powi(2));
            }
            l2 = l2.min(lambda_min(&t.r_inv)).min(lambda_min(&t.rr_inv));
        }
    }
    let beta1 = if l1 > 0.0 { (1.0 / l1).min(l2) } else { l2 };
    let dims = c.dims;
    let kernels: Vec<Vec<Kernel>> =
        c.pieces.iter().zip(&tc.pieces).map(|(p, tp)| p.regimes.iter().zip(tp).map(|(b, t)| Kernel::new(b, t)).collect()).collect();
    let varphi = move |ctx: &BlockCtx, ta: &[f64], tb: &[f64]| -> f64 {
        let kr = &kernels[c.piece_index(ctx.t)][ctx.regime];
        let (tl, m, np) = (dims.theta_len(), dims.m, ctx.particles);
        let diff: Vec<f64> = ta.iter().zip(tb).map(|(a, b)| a - b).collect();
        let mut rho = vec![0.0; np * m];
        for q in 0..np {
            kr.rho(dims, &diff[q * tl..(q + 1) * tl], false, &mut rho[q * m..(q + 1) * m]);
        }
        let mean_rho = crate::forward::column_mean(&rho, m);
        let mean_diff = crate::forward::column_mean(&diff, tl);
        let mut r2 = vec![0.0; m];
        kr.rho(dims, &mean_diff, true, &mut r2);
        let fluct: f64 = (0..np).map(|q| (0..m).map(|i| (rho[q * m + i] - mean_rho[i]).powi(2)).sum::<f64>()).sum::<f64>() / np as f64;
        fluct + norm_sq(&r2)
    };
    Ok(TestFunctionals { beta1, beta2: 0.0, psi: Box::new(|_, _, _| 0.0), varphi: Box::new(varphi) })
}

/// Scalar LQ data from the usual letters, all mean-field and cross blocks zero.
#[allow(clippy::too_many_arguments)]
pub fn scalar_blocks(a: f64, b: f64, c: f64, d: f64, q: f64, r: f64, sigma: f64) -> LqBlocks {
    let mut bl = LqBlocks::scalar_unit_r();
    bl.a[(0, 0)] = a;
    bl.b[(0, 0)] = b;
    bl.c[(0, 0)] = c;
    bl.d[(0, 0)] = d;
    bl.q[(0, 0)] = q;
    bl.r[(0, 0)] = r;
    bl.sigma = DVector::from_element(1, sigma);
    bl
}
