//! Mean-field LQ games: the best response to a frozen population profile, the
//! projection back to a profile, and the equilibrium either from the
//! conditional-mean-coupled Hamiltonian system in one solve (`Direct`) or by
//! damped iteration of best response and projection (`Iterate`).

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::Driver;
use crate::coeffs::{
    check_game_structure, compute_game_kappa_bounds, Dims, GameCoefficients, GameStructureReport, KappaBounds, LqBlocks,
    DEFAULT_PD_DELTA,
};
use crate::coupled::{BlockCtx, FbsdeProblem, FbsdeSolution, TestFunctionals};
use crate::error::{Error, Result};
use crate::forward::{InitialCondition, MomentSummary, NoiseBank, ParticleEnsemble, PointCtx, SdeCoefficients, SdeOutput};
use crate::grid::TimeGrid;
use crate::linalg::{axpy, dot, gemv, gemv_t, inverse, lambda_min, norm_sq};
use crate::lq::{
    bilinear, integrate_cost, random_direction, run_solver, simulate_against_profile, summarize_perturbations, validate_regimes,
    ControlProcess, CostBreakdown, Numerics, PerturbationReport, PerturbationTrial, MAX_DIM,
};

/// `(X, u)` population means per scenario and node, measurable with respect to
/// the common noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationProfile {
    pub n: usize,
    pub m: usize,
    pub nodes: usize,
    /// per scenario, `nodes x n`
    pub x: Vec<Vec<f64>>,
    /// per scenario, `nodes x m`
    pub u: Vec<Vec<f64>>,
}

impl PopulationProfile {
    pub fn zeros(n: usize, m: usize, nodes: usize, scenarios: usize) -> Self {
        Self { n, m, nodes, x: vec![vec![0.0; nodes * n]; scenarios], u: vec![vec![0.0; nodes * m]; scenarios] }
    }

    #[inline]
    pub fn x(&self, s: usize, k: usize) -> &[f64] {
        &self.x[s][k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn u(&self, s: usize, k: usize) -> &[f64] {
        &self.u[s][k * self.m..(k + 1) * self.m]
    }

    pub fn scenarios(&self) -> usize {
        self.x.len()
    }

    /// `sum_k w_k e^{kappa t_k} mean_s(|dX|^2 + |du|^2)`, the same squared
    /// weighted measure the Picard solver uses.
    pub fn gap(&self, other: &PopulationProfile, grid: &TimeGrid, kappa: f64) -> f64 {
        let w = grid.discounted_weights(kappa);
        let sc = self.scenarios().max(1) as f64;
        let mut total = 0.0;
        for s in 0..self.scenarios() {
            for (k, wk) in w.iter().enumerate() {
                let dx: f64 = self.x(s, k).iter().zip(other.x(s, k)).map(|(a, b)| (a - b) * (a - b)).sum();
                let du: f64 = self.u(s, k).iter().zip(other.u(s, k)).map(|(a, b)| (a - b) * (a - b)).sum();
                total += wk * (dx + du);
            }
        }
        total / sc
    }

    /// `(1 - a) self + a other`
    pub fn blend(&self, other: &PopulationProfile, a: f64) -> Self {
        let mix = |p: &[Vec<f64>], q: &[Vec<f64>]| -> Vec<Vec<f64>> {
            p.iter().zip(q).map(|(u, v)| u.iter().zip(v).map(|(x, y)| (1.0 - a) * x + a * y).collect()).collect()
        };
        Self { n: self.n, m: self.m, nodes: self.nodes, x: mix(&self.x, &other.x), u: mix(&self.u, &other.u) }
    }
}

/// Within-scenario particle means of a state cloud and a control.
pub fn project_profile(u: &ControlProcess, states: &[ParticleEnsemble]) -> Result<PopulationProfile> {
    let first = states.first().ok_or(Error::EmptySample)?;
    let nodes = first.nodes();
    if u.scenarios() != states.len() || u.nodes() != nodes || u.particles() != first.particles {
        return Err(Error::DimensionMismatch("control does not match the states".into()));
    }
    let (n, m) = (first.n, u.m());
    let x = states.iter().map(|e| (0..nodes).flat_map(|k| e.mean(k)).collect()).collect();
    let um = states.iter().map(|e| (0..nodes).flat_map(|k| u.mean(e.scenario, k).to_vec()).collect()).collect();
    Ok(PopulationProfile { n, m, nodes, x, u: um })
}

struct GameKernel {
    raw: LqBlocks,
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
    ss1: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    rr_inv: DMatrix<f64>,
}

impl GameKernel {
    fn rho1(&self, dims: Dims, theta: &[f64], out: &mut [f64]) {
        let (n, d) = (dims.n, dims.d);
        gemv_t(out, &self.raw.b, &theta[..n], 1.0);
        gemv_t(out, &self.raw.d, &theta[n..n + n * d], 1.0);
        gemv_t(out, &self.raw.n, &theta[n + n * d..], 1.0);
    }

    /// Equilibrium control and its scenario mean.
    #[allow(clippy::too_many_arguments)]
    fn equilibrium(&self, dims: Dims, x: &[f64], mx: &[f64], theta: &[f64], mth: &[f64], u: &mut [f64], eu: &mut [f64]) {
        let m = dims.m;
        let mut b1 = [0.0; MAX_DIM];
        let acc = &mut b1[..m];
        acc.copy_from_slice(self.raw.r_lin.as_slice());
        gemv(acc, &self.ss1, mx, 1.0);
        self.rho1(dims, mth, acc);
        eu.fill(0.0);
        gemv(eu, &self.rr_inv, acc, -1.0);
        let mut b2 = [0.0; MAX_DIM];
        let dev = &mut b2[..m];
        let mut fl = [0.0; MAX_DIM];
        for i in 0..dims.n {
            fl[i] = x[i] - mx[i];
        }
        gemv(dev, &self.raw.s, &fl[..dims.n], 1.0);
        self.rho1(dims, theta, dev);
        let mut b3 = [0.0; MAX_DIM];
        self.rho1(dims, mth, &mut b3[..m]);
        axpy(dev, &b3[..m], -1.0);
        u.copy_from_slice(eu);
        gemv(u, &self.r_inv, dev, -1.0);
    }

    /// Best response to a frozen profile.
    fn best_response(&self, dims: Dims, x: &[f64], theta: &[f64], px: &[f64], pu: &[f64], u: &mut [f64]) {
        let m = dims.m;
        let mut b = [0.0; MAX_DIM];
        let acc = &mut b[..m];
        acc.copy_from_slice(self.raw.r_lin.as_slice());
        gemv(acc, &self.raw.s, x, 1.0);
        self.rho1(dims, theta, acc);
        gemv(acc, &self.s1, px, 1.0);
        gemv(acc, &self.raw.r_bar, pu, 1.0);
        u.fill(0.0);
        gemv(u, &self.r_inv, acc, -1.0);
    }

    /// State coefficients at `(x, u)` with mean-field inputs `(mx, mu)`.
    fn state(&self, x: &[f64], mx: &[f64], u: &[f64], mu: &[f64], out: &mut SdeOutput<'_>) {
        let b = &self.raw;
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

    /// `kappa y + A^T y + C^T z + M^T z0 + Q x + S^T u + Qbar mx + S2bar^T mu + q`
    #[allow(clippy::too_many_arguments)]
    fn driver(&self, dims: Dims, kappa: f64, x: &[f64], theta: &[f64], u: &[f64], mx: &[f64], mu: &[f64], out: &mut [f64]) {
        let b = &self.raw;
        let (n, d) = (dims.n, dims.d);
        let y = &theta[..n];
        axpy(out, y, kappa);
        gemv_t(out, &b.a, y, 1.0);
        gemv_t(out, &b.c, &theta[n..n + n * d], 1.0);
        gemv_t(out, &b.m, &theta[n + n * d..], 1.0);
        gemv(out, &b.q, x, 1.0);
        gemv_t(out, &b.s, u, 1.0);
        gemv(out, &b.q_bar, mx, 1.0);
        gemv_t(out, &self.s2, mu, 1.0);
        axpy(out, b.q_lin.as_slice(), 1.0);
    }
}

struct Kernels {
    dims: Dims,
    kappa: f64,
    starts: Vec<f64>,
    kernels: Vec<Vec<GameKernel>>,
    regime_dependent: bool,
}

impl Kernels {
    fn new(g: &GameCoefficients, kappa: f64) -> Result<Self> {
        let dims = g.lq.dims;
        if dims.m > MAX_DIM || dims.n > MAX_DIM {
            return Err(Error::DimensionMismatch(format!("state and control dimensions are limited to {MAX_DIM}")));
        }
        let mut kernels = Vec::new();
        for (pi, p) in g.lq.pieces.iter().enumerate() {
            let mut row = Vec::new();
            for (ri, b) in p.regimes.iter().enumerate() {
                let r_inv = inverse(&b.r).ok_or_else(|| Error::Singular { block: format!("R (piece {pi}, regime {ri})") })?;
                let rr_inv = inverse(&(&b.r + &b.r_bar))
                    .ok_or_else(|| Error::Singular { block: format!("R+Rbar (piece {pi}, regime {ri})") })?;
                let (s1, s2) = (g.s1_bar[pi][ri].clone(), g.s2_bar[pi][ri].clone());
                row.push(GameKernel { ss1: &b.s + &s1, raw: b.clone(), s1, s2, r_inv, rr_inv });
            }
            kernels.push(row);
        }
        Ok(Self {
            dims,
            kappa,
            starts: g.lq.pieces.iter().map(|p| p.start).collect(),
            kernels,
            regime_dependent: !g.regime_independent(),
        })
    }

    fn at(&self, t: f64, regime: usize) -> &GameKernel {
        let piece = self.starts.iter().rposition(|s| *s <= t + 1e-12).unwrap_or(0);
        &self.kernels[piece][regime]
    }
}

/// The equilibrium system: every player plays the explicit equilibrium control
/// and the mean-field inputs are the conditional means of the population.
pub struct GameHamiltonian(Kernels);

/// The best-response system against a frozen profile; not mean-field.
pub struct BestResponseSystem<'a> {
    k: &'a Kernels,
    profile: &'a PopulationProfile,
}

const ZEROS: [f64; 3 * MAX_DIM] = [0.0; 3 * MAX_DIM];

fn or_zeros(v: &[f64], len: usize) -> &[f64] {
    if v.is_empty() {
        &ZEROS[..len]
    } else {
        v
    }
}

impl SdeCoefficients for GameHamiltonian {
    fn dims(&self) -> Dims {
        self.0.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>) {
        let (dims, tl) = (self.0.dims, self.0.dims.theta_len());
        let k = self.0.at(ctx.t, ctx.regime);
        let (mut u, mut eu) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        let (u, eu) = (&mut u[..dims.m], &mut eu[..dims.m]);
        k.equilibrium(dims, x, &mom.mean_x, or_zeros(theta, tl), or_zeros(&mom.mean_theta, tl), u, eu);
        k.state(x, &mom.mean_x, u, eu, out);
    }
}

impl Driver for GameHamiltonian {
    fn dims(&self) -> Dims {
        self.0.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut [f64]) {
        let (dims, tl) = (self.0.dims, self.0.dims.theta_len());
        let k = self.0.at(ctx.t, ctx.regime);
        let (mut u, mut eu) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        let (u, eu) = (&mut u[..dims.m], &mut eu[..dims.m]);
        let th = or_zeros(theta, tl);
        k.equilibrium(dims, x, &mom.mean_x, th, or_zeros(&mom.mean_theta, tl), u, eu);
        k.driver(dims, self.0.kappa, x, th, u, &mom.mean_x, eu, out);
    }

    fn regime_dependent(&self) -> bool {
        self.0.regime_dependent
    }
}

impl SdeCoefficients for BestResponseSystem<'_> {
    fn dims(&self) -> Dims {
        self.k.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], _: &MomentSummary, out: &mut SdeOutput<'_>) {
        let dims = self.k.dims;
        let k = self.k.at(ctx.t, ctx.regime);
        let (px, pu) = (self.profile.x(ctx.scenario, ctx.node), self.profile.u(ctx.scenario, ctx.node));
        let mut u = [0.0; MAX_DIM];
        let u = &mut u[..dims.m];
        k.best_response(dims, x, or_zeros(theta, dims.theta_len()), px, pu, u);
        k.state(x, px, u, pu, out);
    }
}

impl Driver for BestResponseSystem<'_> {
    fn dims(&self) -> Dims {
        self.k.dims
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], _: &MomentSummary, out: &mut [f64]) {
        let dims = self.k.dims;
        let k = self.k.at(ctx.t, ctx.regime);
        let (px, pu) = (self.profile.x(ctx.scenario, ctx.node), self.profile.u(ctx.scenario, ctx.node));
        let mut u = [0.0; MAX_DIM];
        let u = &mut u[..dims.m];
        let th = or_zeros(theta, dims.theta_len());
        k.best_response(dims, x, th, px, pu, u);
        k.driver(dims, self.k.kappa, x, th, u, px, pu, out);
    }

    fn regime_dependent(&self) -> bool {
        self.k.regime_dependent
    }
}

/// Equilibrium system as a coupled FBSDE, with `kappa_x` from the game bounds.
pub fn game_problem(
    g: &GameCoefficients,
    x0: InitialCondition,
    initial_regime: usize,
    kappa: f64,
    num: &Numerics,
) -> Result<(FbsdeProblem, Arc<GameHamiltonian>, KappaBounds)> {
    validate_regimes(g.lq.dims, num, initial_regime)?;
    let bounds = compute_game_kappa_bounds(g, kappa, num.kappa_star)?;
    let ham = Arc::new(GameHamiltonian(Kernels::new(g, kappa)?));
    let mut p = FbsdeProblem::new(ham.clone(), ham.clone(), x0, num.setup(g.lq.dims, initial_regime), kappa)?
        .with_kappa_x(bounds.kappa_x)
        .with_backward(num.backward);
    p.kappa_star = num.kappa_star;
    Ok((p, ham, bounds))
}

fn check_pd_r(g: &GameCoefficients) -> Result<()> {
    for (pi, p) in g.lq.pieces.iter().enumerate() {
        for (ri, b) in p.regimes.iter().enumerate() {
            let ev = lambda_min(&b.r);
            if ev < DEFAULT_PD_DELTA {
                return Err(Error::PdViolation { block: "R".into(), piece: pi, regime: ri, min_eigenvalue: ev });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub control: ControlProcess,
    /// state generated by `control` against the profile
    pub state: Vec<ParticleEnsemble>,
    pub fbsde: FbsdeSolution,
}

/// Optimal control of one player facing the frozen `profile`.
pub fn best_response(
    g: &GameCoefficients,
    profile: &PopulationProfile,
    x0: &InitialCondition,
    initial_regime: usize,
    kappa: f64,
    num: &Numerics,
) -> Result<BestResponse> {
    check_pd_r(g)?;
    validate_regimes(g.lq.dims, num, initial_regime)?;
    let dims = g.lq.dims;
    if profile.nodes != num.grid.nodes() || profile.scenarios() != num.scenarios || profile.n != dims.n || profile.m != dims.m {
        return Err(Error::DimensionMismatch("profile is not on the solver grid".into()));
    }
    let bounds = compute_game_kappa_bounds(g, kappa, num.kappa_star)?;
    let kernels = Kernels::new(g, kappa)?;
    // The problem owns its callbacks, so the borrowed system is wrapped in a
    // scoped Arc over cloned data.
    let sys = Arc::new(OwnedBestResponse { k: kernels, profile: profile.clone() });
    let mut p = FbsdeProblem::new(sys.clone(), sys.clone(), x0.clone(), num.setup(dims, initial_regime), kappa)?
        .with_kappa_x(bounds.kappa_x)
        .with_backward(num.backward);
    p.kappa_star = num.kappa_star;
    let fbsde = run_solver(&p, num)?;
    let view = BestResponseSystem { k: &sys.k, profile };
    let control = extract(&fbsde, dims, |t, reg, s, k, x, _, th, _, u| {
        view.k.at(t, reg).best_response(dims, x, th, view.profile.x(s, k), view.profile.u(s, k), u)
    })?;
    let state = simulate_against_profile(&g.lq, x0, &fbsde.bank, &control, profile)?;
    Ok(BestResponse { control, state, fbsde })
}

struct OwnedBestResponse {
    k: Kernels,
    profile: PopulationProfile,
}

impl SdeCoefficients for OwnedBestResponse {
    fn dims(&self) -> Dims {
        self.k.dims
    }
    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>) {
        SdeCoefficients::eval(&BestResponseSystem { k: &self.k, profile: &self.profile }, ctx, x, theta, mom, out)
    }
}

impl Driver for OwnedBestResponse {
    fn dims(&self) -> Dims {
        self.k.dims
    }
    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut [f64]) {
        Driver::eval(&BestResponseSystem { k: &self.k, profile: &self.profile }, ctx, x, theta, mom, out)
    }
    fn regime_dependent(&self) -> bool {
        self.k.regime_dependent
    }
}

/// Evaluate a pointwise control rule on every node and particle of a solution.
fn extract<F>(sol: &FbsdeSolution, dims: Dims, rule: F) -> Result<ControlProcess>
where
    F: Fn(f64, usize, usize, usize, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Sync,
{
    let grid = *sol.grid();
    let m = dims.m;
    let values = sol
        .forward
        .par_iter()
        .map(|e| {
            let th = &sol.backward.theta[e.scenario];
            let mut out = vec![0.0; grid.nodes() * e.particles * m];
            for k in 0..grid.nodes() {
                let (mx, mth) = (e.mean(k), th.mean(k));
                for p in 0..e.particles {
                    let o = (k * e.particles + p) * m;
                    rule(grid.time(k), e.regime(k), e.scenario, k, e.x(k, p), &mx, th.at(k, p), &mth, &mut out[o..o + m]);
                }
            }
            out
        })
        .collect();
    ControlProcess::new(m, sol.bank.setup.particles, grid.nodes(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameMode {
    Direct,
    Iterate,
}

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub mode: GameMode,
    /// equilibrium control
    pub control: ControlProcess,
    /// state generated by `control` against `profile`
    pub state: Vec<ParticleEnsemble>,
    pub profile: PopulationProfile,
    /// the equilibrium system (direct) or the last best response (iterate)
    pub fbsde: FbsdeSolution,
    pub converged: bool,
    /// profile gap after each outer step (iterate mode)
    pub outer_history: Vec<f64>,
    /// weighted squared distance between `T(profile)` and `profile`
    pub gap: f64,
    /// weighted squared distance between the means of `(state, control)` and
    /// `profile`
    pub consistency: f64,
    pub bounds: KappaBounds,
    pub structure: GameStructureReport,
    pub failure: Option<Error>,
}

/// Equilibrium of the game. `Direct` requires the structure conditions;
/// `Iterate` runs regardless and damps the profile update by `damping`.
pub fn solve_game_fixed_point(
    g: &GameCoefficients,
    x0: &InitialCondition,
    initial_regime: usize,
    kappa: f64,
    num: &Numerics,
    mode: GameMode,
    damping: f64,
) -> Result<EquilibriumReport> {
    let structure = check_game_structure(g, DEFAULT_PD_DELTA);
    let grid = num.grid;
    match mode {
        GameMode::Direct => {
            if let Some(f) = structure.first_failure() {
                return Err(Error::StructureViolation(format!("{} (piece {}, regime {})", f.name, f.piece, f.regime)));
            }
            let (p, ham, bounds) = game_problem(g, x0.clone(), initial_regime, kappa, num)?;
            let fbsde = run_solver(&p, num)?;
            let dims = g.lq.dims;
            let control = extract(&fbsde, dims, |t, reg, _, _, x, mx, th, mth, u| {
                let mut eu = [0.0; MAX_DIM];
                ham.0.at(t, reg).equilibrium(dims, x, mx, th, mth, u, &mut eu[..dims.m]);
            })?;
            let profile = project_profile(&control, &fbsde.forward)?;
            let state = simulate_against_profile(&g.lq, x0, &fbsde.bank, &control, &profile)?;
            let consistency = project_profile(&control, &state)?.gap(&profile, &grid, kappa);
            let br = best_response(g, &profile, x0, initial_regime, kappa, num)?;
            let gap = project_profile(&br.control, &br.state)?.gap(&profile, &grid, kappa);
            let converged = fbsde.converged;
            let failure = fbsde.failure.clone();
            Ok(EquilibriumReport {
                mode,
                control,
                state,
                profile,
                fbsde,
                converged,
                outer_history: Vec::new(),
                gap,
                consistency,
                bounds,
                structure,
                failure,
            })
        }
        GameMode::Iterate => {
            if !(damping > 0.0 && damping <= 1.0) {
                return Err(Error::InvalidArgument(format!("damping {damping} outside (0, 1]")));
            }
            let bounds = compute_game_kappa_bounds(g, kappa, num.kappa_star)?;
            let dims = g.lq.dims;
            let mut profile = PopulationProfile::zeros(dims.n, dims.m, grid.nodes(), num.scenarios);
            let mut history = Vec::new();
            let tol = num.picard.tol;
            let mut last = None;
            for _ in 0..num.picard.max_iters {
                let br = best_response(g, &profile, x0, initial_regime, kappa, num)?;
                let next = project_profile(&br.control, &br.state)?;
                let gap = next.gap(&profile, &grid, kappa);
                history.push(gap);
                let done = gap < tol || !gap.is_finite();
                if done {
                    last = Some((br, gap));
                    break;
                }
                profile = profile.blend(&next, damping);
                last = Some((br, gap));
            }
            let (br, gap) = last.expect("at least one outer step");
            let converged = gap < tol && br.fbsde.converged;
            let failure = if converged {
                None
            } else if !br.fbsde.converged {
                br.fbsde.failure.clone()
            } else {
                Some(Error::NoConvergence { sweeps: history.len(), last_error: gap })
            };
            let consistency = project_profile(&br.control, &br.state)?.gap(&profile, &grid, kappa);
            Ok(EquilibriumReport {
                mode,
                control: br.control,
                state: br.state,
                profile,
                fbsde: br.fbsde,
                converged,
                outer_history: history,
                gap,
                consistency,
                bounds,
                structure,
                failure,
            })
        }
    }
}

/// Cost of one player using `u` against the frozen `profile`, along `states`
/// (which must be generated against the same profile).
pub fn evaluate_game_cost(
    g: &GameCoefficients,
    kappa: f64,
    profile: &PopulationProfile,
    states: &[ParticleEnsemble],
    u: &ControlProcess,
) -> Result<CostBreakdown> {
    let first = states.first().ok_or(Error::EmptySample)?;
    let grid = first.noise.regime.grid;
    if u.scenarios() != states.len() || u.particles() != first.particles || u.nodes() != grid.nodes() {
        return Err(Error::DimensionMismatch("control does not match the states".into()));
    }
    Ok(integrate_cost(&grid, kappa, None, states.len(), first.particles, |s, k, p| {
        let e = &states[s];
        let t = grid.time(k);
        let reg = e.regime(k);
        let pi = g.lq.piece_index(t);
        let b = &g.lq.pieces[pi].regimes[reg];
        let (s1, s2) = (&g.s1_bar[pi][reg], &g.s2_bar[pi][reg]);
        let (x, ux) = (e.x(k, p), u.at(s, k, p));
        let (px, pu) = (profile.x(s, k), profile.u(s, k));
        let lin = 2.0 * dot(b.q_lin.as_slice(), x)
            + 2.0 * dot(b.q_bar_lin.as_slice(), px)
            + 2.0 * dot(b.r_lin.as_slice(), ux)
            + 2.0 * dot(b.r_bar_lin.as_slice(), pu);
        let mf = 2.0 * bilinear(&b.q_bar, px, x) + 2.0 * bilinear(s1, px, ux) + 2.0 * bilinear(s2, x, pu) + 2.0 * bilinear(&b.r_bar, pu, ux);
        [
            0.5 * bilinear(&b.q, x, x),
            0.5 * bilinear(&b.r, ux, ux),
            bilinear(&b.s, x, ux),
            0.5 * mf,
            0.5 * lin,
        ]
    }))
}

/// Unilateral deviations `u + eps v` against the frozen profile, on `bank`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_test(
    g: &GameCoefficients,
    x0: &InitialCondition,
    kappa: f64,
    profile: &PopulationProfile,
    u: &ControlProcess,
    bank: &NoiseBank,
    directions: usize,
    eps: &[f64],
    seed: u64,
) -> Result<PerturbationReport> {
    let grid = *bank.grid();
    let base_state = simulate_against_profile(&g.lq, x0, bank, u, profile)?;
    let base = evaluate_game_cost(g, kappa, profile, &base_state, u)?;
    let mut trials = Vec::new();
    for j in 0..directions as u64 {
        let v = random_direction(u.m(), &grid, u.particles(), u.scenarios(), seed, j);
        for &e in eps {
            let w = u.perturbed(&v, e)?;
            let st = simulate_against_profile(&g.lq, x0, bank, &w, profile)?;
            let cost = evaluate_game_cost(g, kappa, profile, &st, &w)?.total;
            trials.push(PerturbationTrial { direction: j, eps: e, cost, delta: cost - base.total });
        }
    }
    Ok(summarize_perturbations(base.total, base.se, trials))
}

/// Nash check of a reported equilibrium: no unilateral deviation lowers the
/// cost by more than two standard errors.
pub fn nash_deviation_test(
    g: &GameCoefficients,
    x0: &InitialCondition,
    report: &EquilibriumReport,
    directions: usize,
    eps: &[f64],
    seed: u64,
) -> Result<PerturbationReport> {
    deviation_test(g, x0, report.bounds.kappa, &report.profile, &report.control, &report.fbsde.bank, directions, eps, seed)
}

/// Deviation table as CSV.
pub fn deviation_csv(rep: &PerturbationReport) -> String {
    let mut s = String::from("direction,eps,cost,delta,pass\n");
    for t in &rep.trials {
        s.push_str(&format!("{},{},{:.12e},{:.12e},{}\n", t.direction, t.eps, t.cost, t.delta, t.delta >= -2.0 * rep.se));
    }
    s
}

/// The constant `L2` of the equilibrium monotonicity estimate:
/// `min(lambda_min R^-1, (k + 1) lambda_min (R + Rbar)^-1)` for `k > -1` and
/// `4 lambda_min R^-1` for `k = -1`.
pub fn game_l2(g: &GameCoefficients) -> Result<f64> {
    let mut l_r = f64::INFINITY;
    let mut l_rr = f64::INFINITY;
    for p in &g.lq.pieces {
        for b in &p.regimes {
            let ri = inverse(&b.r).ok_or_else(|| Error::Singular { block: "R".into() })?;
            let rri = inverse(&(&b.r + &b.r_bar)).ok_or_else(|| Error::Singular { block: "R+Rbar".into() })?;
            l_r = l_r.min(lambda_min(&ri));
            l_rr = l_rr.min(lambda_min(&rri));
        }
    }
    Ok(if g.k == -1.0 { 4.0 * l_r } else { l_r.min((g.k + 1.0) * l_rr) })
}

/// `beta1 = L2`, `beta2 = 0`, `psi = 0`, `varphi = |rho1(dTheta)|^2`. Only the
/// monotonicity check of the verifier is meaningful with these.
pub fn game_test_functionals(g: &GameCoefficients) -> Result<TestFunctionals<'_>> {
    let beta1 = game_l2(g)?;
    let dims = g.lq.dims;
    let varphi = move |ctx: &BlockCtx, ta: &[f64], tb: &[f64]| -> f64 {
        let b = g.lq.blocks(ctx.t, ctx.regime);
        let (tl, m, np) = (dims.theta_len(), dims.m, ctx.particles);
        let (n, d) = (dims.n, dims.d);
        let mut acc = 0.0;
        for q in 0..np {
            let diff: Vec<f64> = (0..tl).map(|i| ta[q * tl + i] - tb[q * tl + i]).collect();
            let mut r = vec![0.0; m];
            gemv_t(&mut r, &b.b, &diff[..n], 1.0);
            gemv_t(&mut r, &b.d, &diff[n..n + n * d], 1.0);
            gemv_t(&mut r, &b.n, &diff[n + n * d..], 1.0);
            acc += norm_sq(&r);
        }
        acc / np as f64
    };
    Ok(TestFunctionals { beta1, beta2: 0.0, psi: Box::new(|_, _, _| 0.0), varphi: Box::new(varphi) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::LqCoefficients;
    use crate::coupled::{verify_domination_monotonicity, VerifierConfig};
    use crate::forward::SimulationSetup;
    use crate::lq::solve_control_problem;
    use crate::regime::GeneratorMatrix;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn game_of(b: LqBlocks, s1: f64, s2: f64, k: f64, m0: usize) -> GameCoefficients {
        let lq = LqCoefficients::homogeneous(Dims::scalar(m0), b).unwrap();
        let p = lq.pieces.len();
        GameCoefficients::new(lq, vec![vec![s(s1); m0]; p], vec![vec![s(s2); m0]; p], k).unwrap()
    }

    fn numerics(particles: usize, scenarios: usize) -> Numerics {
        let mut num = Numerics::new(TimeGrid::new(0.0, 2.0, 0.05).unwrap(), particles, scenarios, 5);
        num.picard.tol = 1e-10;
        num
    }

    fn base_blocks() -> LqBlocks {
        let mut b = LqBlocks::scalar_unit_r();
        b.a = s(-1.0);
        b.b = s(0.8);
        b.q = s(1.0);
        b.sigma[0] = 0.3;
        b.gamma[0] = 0.2;
        b.q_lin[0] = 0.2;
        b
    }

    /// (S1)-(S3) compliant: k = 0.5, Bbar = kB, S2bar = kS + (k+1) S1bar.
    fn compliant() -> GameCoefficients {
        let mut b = base_blocks();
        b.b_bar = s(0.4);
        b.s = s(0.2);
        b.q_bar = s(0.3);
        b.r_bar = s(0.5);
        b.r_lin[0] = 0.1;
        game_of(b, 0.1, 0.5 * 0.2 + 1.5 * 0.1, 0.5, 1)
    }

    #[test]
    fn projection_examples() {
        let grid = TimeGrid::new(0.0, 0.1, 0.1).unwrap();
        let bank = NoiseBank::generate(&SimulationSetup::new(grid, 4, 1, 1, Dims::scalar(1))).unwrap();
        let still = crate::forward::sde_fn(Dims::scalar(1), |_, _, _, _, _| {}).theta_free();
        let x0 = InitialCondition::Samples(vec![1.0, -1.0, 2.0, -2.0]);
        let ens = crate::forward::simulate_conditional_mkv_sde(&still, &x0, &bank, None).unwrap();
        let u = ControlProcess::new(1, 4, 2, vec![vec![1.0, -1.0, 3.0, -3.0, 0.5, 0.5, 0.5, 0.5]]).unwrap();
        let p = project_profile(&u, &ens).unwrap();
        assert_eq!(p.x(0, 0), &[0.0]);
        assert_eq!(p.u(0, 0), &[0.0]);
        assert_eq!(p.u(0, 1), &[0.5]);
    }

    #[test]
    fn zero_bars_match_the_control_problem() {
        let g = game_of(base_blocks(), 0.0, 0.0, 0.0, 1);
        let num = numerics(64, 4);
        let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.3] };
        let ctl = solve_control_problem(&g.lq, x0.clone(), 0, -0.5, &num).unwrap();
        let eq = solve_game_fixed_point(&g, &x0, 0, -0.5, &num, GameMode::Direct, 0.5).unwrap();
        assert!(eq.converged);
        let diff = ctl.control.perturbed(&eq.control, -1.0).unwrap().weighted_norm(&num.grid, -0.5).powi(2);
        assert!(diff < 2.0 * num.picard.tol, "{diff}");
        let zero = PopulationProfile::zeros(1, 1, num.grid.nodes(), 4);
        let br = best_response(&g, &zero, &x0, 0, -0.5, &num).unwrap();
        let diff = ctl.control.perturbed(&br.control, -1.0).unwrap().weighted_norm(&num.grid, -0.5).powi(2);
        assert!(diff < 2.0 * num.picard.tol, "{diff}");
    }

    #[test]
    fn direct_and_iterate_agree() {
        let g = compliant();
        assert!(check_game_structure(&g, DEFAULT_PD_DELTA).pass);
        let num = numerics(64, 4);
        let x0 = InitialCondition::Gaussian { mean: vec![1.0], std: vec![0.3] };
        let d = solve_game_fixed_point(&g, &x0, 0, -0.5, &num, GameMode::Direct, 0.5).unwrap();
        let it = solve_game_fixed_point(&g, &x0, 0, -0.5, &num, GameMode::Iterate, 0.5).unwrap();
        assert!(d.converged && it.converged, "{:?} {:?}", d.failure, it.failure);
        let diff = d.control.perturbed(&it.control, -1.0).unwrap().weighted_norm(&num.grid, -0.5).powi(2);
        assert!(diff < 3.0 * num.picard.tol, "{diff}");
        assert!(d.gap < 1e-9 && d.consistency < 1e-9, "{} {}", d.gap, d.consistency);
        let rep = nash_deviation_test(&g, &x0, &d, 5, &[0.1, 0.3], 3).unwrap();
        assert!(rep.pass, "{rep:?}");
        let mut shifted = d.clone();
        shifted.control = d.control.perturbed(&ControlProcess::new(1, 64, num.grid.nodes(), vec![vec![1.0; 64 * num.grid.nodes()]; 4]).unwrap(), 0.5).unwrap();
        assert!(!nash_deviation_test(&g, &x0, &shifted, 5, &[0.1, 0.3], 3).unwrap().pass);
    }

    #[test]
    fn generator_does_not_matter_for_identical_regimes() {
        let g = game_of(base_blocks(), 0.0, 0.0, 0.0, 2);
        let x0 = InitialCondition::Constant(vec![1.0]);
        let mut a = numerics(32, 2);
        a.generator = GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let mut b = a.clone();
        b.generator = GeneratorMatrix::new(vec![vec![-5.0, 5.0], vec![0.5, -0.5]]).unwrap();
        let ra = solve_game_fixed_point(&g, &x0, 0, -0.5, &a, GameMode::Direct, 0.5).unwrap();
        let rb = solve_game_fixed_point(&g, &x0, 0, -0.5, &b, GameMode::Direct, 0.5).unwrap();
        assert_eq!(ra.control, rb.control);
    }

    fn monotonicity_margin(g: &GameCoefficients) -> f64 {
        let num = numerics(8, 1);
        let (p, _, _) = game_problem(g, InitialCondition::Constant(vec![0.0]), 0, 0.0, &num).unwrap();
        let fns = game_test_functionals(g).unwrap();
        let rep = verify_domination_monotonicity(&p, &fns, &VerifierConfig { samples: 300, ..Default::default() });
        rep.checks.iter().find(|c| c.name == "monotonicity").unwrap().worst_margin
    }

    #[test]
    fn proof_inequality_holds_for_k_above_minus_one() {
        assert!(monotonicity_margin(&compliant()) >= -1e-8);
    }

    #[test]
    fn k_minus_one_constant_is_too_large() {
        let mut b = base_blocks();
        b.b_bar = s(-0.8);
        b.r_bar = s(0.5);
        let g = game_of(b, 0.0, 0.0, -1.0, 1);
        assert!(check_game_structure(&g, DEFAULT_PD_DELTA).pass);
        assert!(monotonicity_margin(&g) < -1e-3);
    }
}
