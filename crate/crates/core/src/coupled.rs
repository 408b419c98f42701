//! Fully coupled conditional McKean-Vlasov FBSDEs.
//!
//! A sweep simulates the forward equation with the current adjoint frozen,
//! then solves the backward equation along the new states. Sweeps reuse one
//! noise bank, so the error sequence is free of Monte Carlo chatter. The
//! continuation solver walks `lambda` from the decoupled system at 0 to the
//! target at 1, warm-starting each step from the previous one.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::backward::{solve_mkv_bsde, BackwardConfig, BackwardSolution, Driver, Terminal};
use crate::coeffs::Dims;
use crate::error::{Error, Result};
use crate::forward::{
    column_mean, sde_fn, simulate_conditional_mkv_sde, InitialCondition, MomentSummary, NoiseBank, ParticleEnsemble, PointCtx,
    SdeCoefficients, SdeOutput, SimulationSetup, ThetaField,
};
use crate::grid::TimeGrid;
use crate::rng::{stream, Domain};

/// Deterministic forcing `g(t)` added to a drift or driver (length `n`).
pub type Forcing = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct FbsdeProblem {
    pub sde: Arc<dyn SdeCoefficients + Send>,
    pub driver: Arc<dyn Driver + Send>,
    pub x0: InitialCondition,
    pub setup: SimulationSetup,
    pub kappa: f64,
    pub kappa_star: f64,
    /// Constants of the monotonicity conditions. The decoupled base system
    /// uses drift `kappa_x / 2 * x` and driver `kappa_y * y`.
    pub kappa_x: f64,
    pub kappa_y: f64,
    pub drift_forcing: Option<Forcing>,
    pub driver_forcing: Option<Forcing>,
    pub terminal: Terminal,
    pub backward: BackwardConfig,
}

impl FbsdeProblem {
    pub fn new(
        sde: Arc<dyn SdeCoefficients + Send>,
        driver: Arc<dyn Driver + Send>,
        x0: InitialCondition,
        setup: SimulationSetup,
        kappa: f64,
    ) -> Result<Self> {
        let (a, b) = (sde.dims(), driver.dims());
        if a.n != b.n || a.d != b.d || a.d0 != b.d0 {
            return Err(Error::DimensionMismatch("forward and backward coefficients disagree on (n, d, d0)".into()));
        }
        if a.d != setup.d || a.d0 != setup.d0 {
            return Err(Error::DimensionMismatch("coefficients and noise setup disagree on (d, d0)".into()));
        }
        Ok(Self {
            sde,
            driver,
            x0,
            setup,
            kappa,
            kappa_star: f64::INFINITY,
            kappa_x: 0.0,
            kappa_y: kappa,
            drift_forcing: None,
            driver_forcing: None,
            terminal: Terminal::Zero,
            backward: BackwardConfig::default(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.sde.dims()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.setup.grid
    }

    /// Set `kappa_x` and the matching `kappa_y = kappa + kappa_x / 2`.
    pub fn with_kappa_x(mut self, kappa_x: f64) -> Self {
        self.kappa_x = kappa_x;
        self.kappa_y = self.kappa + kappa_x / 2.0;
        self
    }

    pub fn with_backward(mut self, cfg: BackwardConfig) -> Self {
        self.backward = cfg;
        self
    }

    pub fn with_terminal(mut self, terminal: Terminal) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_forcing(mut self, drift: Option<Forcing>, driver: Option<Forcing>) -> Self {
        self.drift_forcing = drift;
        self.driver_forcing = driver;
        self
    }
}

/// The problem at homotopy parameter `lambda`.
struct Homotopy<'a> {
    p: &'a FbsdeProblem,
    lambda: f64,
}

impl SdeCoefficients for Homotopy<'_> {
    fn dims(&self) -> Dims {
        self.p.sde.dims()
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>) {
        let l = self.lambda;
        if l != 0.0 {
            self.p.sde.eval(ctx, x, theta, mom, out);
            if l != 1.0 {
                out.drift.iter_mut().chain(out.diffusion.iter_mut()).chain(out.common.iter_mut()).for_each(|v| *v *= l);
            }
        }
        let c = (1.0 - l) * 0.5 * self.p.kappa_x;
        if c != 0.0 {
            for (o, xi) in out.drift.iter_mut().zip(x) {
                *o += c * xi;
            }
        }
        if let Some(b0) = &self.p.drift_forcing {
            b0(ctx.t, out.drift);
        }
    }

    fn depends_on_theta(&self) -> bool {
        self.lambda != 0.0 && self.p.sde.depends_on_theta()
    }
}

impl Driver for Homotopy<'_> {
    fn dims(&self) -> Dims {
        self.p.driver.dims()
    }

    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut [f64]) {
        let l = self.lambda;
        if l != 0.0 {
            self.p.driver.eval(ctx, x, theta, mom, out);
            if l != 1.0 {
                out.iter_mut().for_each(|v| *v *= l);
            }
        }
        let c = (1.0 - l) * self.p.kappa_y;
        if c != 0.0 {
            for (o, y) in out.iter_mut().zip(theta) {
                *o += c * y;
            }
        }
        if let Some(f0) = &self.p.driver_forcing {
            f0(ctx.t, out);
        }
    }

    fn regime_dependent(&self) -> bool {
        self.lambda != 0.0 && self.p.driver.regime_dependent()
    }

    fn depends_on_theta(&self) -> bool {
        (self.lambda != 0.0 && self.p.driver.depends_on_theta()) || (self.lambda != 1.0 && self.p.kappa_y != 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PicardConfig {
    /// weight of the new adjoint in the blend, in (0, 1]
    pub damping: f64,
    /// threshold on the weighted squared sweep difference
    pub tol: f64,
    pub max_iters: usize,
    /// a sweep error this many times the first one counts as divergence
    pub divergence: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { damping: 0.5, tol: 1e-6, max_iters: 60, divergence: 1e6 }
    }
}

impl PicardConfig {
    fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping {} outside (0, 1]", self.damping)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument("tolerance must be positive and max_iters at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    /// running sweep index over the whole solve, from 1
    pub sweep: usize,
    pub lambda: f64,
    pub error: f64,
    /// `error / previous error` within the same lambda step
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaStep {
    pub lambda: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub final_error: f64,
}

#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub forward: Vec<ParticleEnsemble>,
    pub backward: BackwardSolution,
    pub bank: NoiseBank,
    pub history: Vec<IterationRecord>,
    /// Every attempted lambda step, including failed ones that triggered a
    /// bisection.
    pub steps: Vec<LambdaStep>,
    pub converged: bool,
    pub final_error: f64,
    /// Why the solve stopped short, when it did.
    pub failure: Option<Error>,
}

impl FbsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.backward.grid
    }

    /// Turn a non-converged solve into its error.
    pub fn ok(self) -> Result<Self> {
        match (&self.failure, self.converged) {
            (None, true) => Ok(self),
            (Some(e), _) => Err(e.clone()),
            (None, false) => Err(Error::NoConvergence { sweeps: self.history.len(), last_error: self.final_error }),
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.history.iter().filter_map(|r| r.ratio).filter(|r| r.is_finite()).collect()
    }

    /// Median sweep-to-sweep error ratio: the measured contraction constant.
    pub fn median_ratio(&self) -> Option<f64> {
        let mut r = self.ratios();
        if r.is_empty() {
            return None;
        }
        r.sort_by(f64::total_cmp);
        let mid = r.len() / 2;
        Some(if r.len() % 2 == 1 { r[mid] } else { 0.5 * (r[mid - 1] + r[mid]) })
    }

    /// Smallest lambda increment that converged, a measured stand-in for the
    /// admissible homotopy step.
    pub fn smallest_successful_step(&self) -> Option<f64> {
        let mut prev = 0.0;
        let mut best: Option<f64> = None;
        for s in self.steps.iter().filter(|s| s.converged) {
            if s.lambda > prev {
                let inc = s.lambda - prev;
                best = Some(best.map_or(inc, |b| b.min(inc)));
            }
            prev = s.lambda;
        }
        best
    }

    /// Lambda values that converged, in order.
    pub fn schedule_used(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.converged).map(|s| s.lambda).collect()
    }

    /// Columns `sweep,lambda,error,ratio`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("sweep,lambda,error,ratio\n");
        for r in &self.history {
            let ratio = r.ratio.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!("{},{},{},{}\n", r.sweep, r.lambda, r.error, ratio));
        }
        s
    }
}

/// Per-node sums of squared differences for one scenario.
fn node_sq_diff(a: &[f64], b: &[f64], nodes: usize, out: &mut [f64]) {
    let w = a.len() / nodes;
    for k in 0..nodes {
        out[k] += a[k * w..(k + 1) * w].iter().zip(&b[k * w..(k + 1) * w]).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
}

/// `E int e^{kappa s} (|X - X'|^2 + |Theta - Theta'|^2) ds` over all scenarios
/// and particles, trapezoid in time.
pub fn weighted_gap(
    grid: &TimeGrid,
    kappa: f64,
    xa: &[ParticleEnsemble],
    ta: &[ThetaField],
    xb: &[ParticleEnsemble],
    tb: &[ThetaField],
) -> f64 {
    let xs: Vec<&[f64]> = xa.iter().map(|e| e.states.as_slice()).collect();
    let ys: Vec<&[f64]> = xb.iter().map(|e| e.states.as_slice()).collect();
    gap_raw(grid, kappa, &xs, ta, &ys, tb)
}

fn gap_raw(grid: &TimeGrid, kappa: f64, xa: &[&[f64]], ta: &[ThetaField], xb: &[&[f64]], tb: &[ThetaField]) -> f64 {
    let nodes = grid.nodes();
    let per: Vec<Vec<f64>> = (0..xa.len())
        .into_par_iter()
        .map(|s| {
            let mut acc = vec![0.0; nodes];
            node_sq_diff(xa[s], xb[s], nodes, &mut acc);
            node_sq_diff(&ta[s].data, &tb[s].data, nodes, &mut acc);
            acc
        })
        .collect();
    let particles = ta.first().map_or(1, |t| t.particles.max(1));
    let count = (xa.len() * particles) as f64;
    let mut total = vec![0.0; nodes];
    for acc in &per {
        for (t, v) in total.iter_mut().zip(acc) {
            *t += v;
        }
    }
    let w = grid.discounted_weights(kappa);
    let vals: Vec<f64> = total.iter().zip(&w).map(|(v, w)| v * w / count).collect();
    grid.trapezoid(&vals)
}

/// Weighted distance between two solutions on the same grid and noise.
pub fn solution_distance(a: &FbsdeSolution, b: &FbsdeSolution, kappa: f64) -> f64 {
    weighted_gap(a.grid(), kappa, &a.forward, &a.backward.theta, &b.forward, &b.backward.theta)
}

struct Iterate {
    x: Vec<Vec<f64>>,
    theta: Vec<ThetaField>,
}

struct Run {
    forward: Vec<ParticleEnsemble>,
    backward: BackwardSolution,
    converged: bool,
    error: f64,
    sweeps: usize,
    failure: Option<Error>,
}

fn cold_start(p: &FbsdeProblem, bank: &NoiseBank) -> Result<Iterate> {
    let dims = p.dims();
    let still = sde_fn(dims, |_, _, _, _, _| {}).theta_free();
    let ens = simulate_conditional_mkv_sde(&still, &p.x0, bank, None)?;
    let nodes = bank.grid().nodes();
    Ok(Iterate {
        x: ens.into_iter().map(|e| e.states).collect(),
        theta: bank.scenarios.iter().map(|_| ThetaField::zeros(nodes, bank.setup.particles, dims.theta_len())).collect(),
    })
}

fn picard(
    p: &FbsdeProblem,
    lambda: f64,
    bank: &NoiseBank,
    mut cur: Iterate,
    cfg: &PicardConfig,
    history: &mut Vec<IterationRecord>,
) -> Result<Run> {
    let h = Homotopy { p, lambda };
    let grid = *bank.grid();
    let damping = if SdeCoefficients::depends_on_theta(&h) { cfg.damping } else { 1.0 };
    let mut last: Option<(Vec<ParticleEnsemble>, BackwardSolution)> = None;
    let mut first_error = None;
    let mut prev_error: Option<f64> = None;
    let mut error = f64::INFINITY;
    for sweep in 1..=cfg.max_iters {
        let step = simulate_conditional_mkv_sde(&h, &p.x0, bank, Some(&cur.theta))
            .and_then(|ens| solve_mkv_bsde(&h, &ens, &p.terminal, &p.backward).map(|sol| (ens, sol)));
        let (ens, sol) = match step {
            Ok(v) => v,
            Err(e @ (Error::NonFiniteState { .. } | Error::NonFiniteAdjoint { .. })) => {
                return match last {
                    Some((forward, backward)) => {
                        Ok(Run { forward, backward, converged: false, error, sweeps: sweep - 1, failure: Some(e) })
                    }
                    None => Err(e),
                };
            }
            Err(e) => return Err(e),
        };
        let mut theta = sol.theta.clone();
        if damping < 1.0 {
            for (new, old) in theta.iter_mut().zip(&cur.theta) {
                for (a, b) in new.data.iter_mut().zip(&old.data) {
                    *a = damping * *a + (1.0 - damping) * b;
                }
            }
        }
        let xs: Vec<&[f64]> = ens.iter().map(|e| e.states.as_slice()).collect();
        let xo: Vec<&[f64]> = cur.x.iter().map(Vec::as_slice).collect();
        error = gap_raw(&grid, p.kappa, &xs, &theta, &xo, &cur.theta);
        let ratio = prev_error.map(|e| error / e);
        history.push(IterationRecord { sweep: history.len() + 1, lambda, error, ratio });
        prev_error = Some(error);
        let first = *first_error.get_or_insert(error);
        cur = Iterate { x: ens.iter().map(|e| e.states.clone()).collect(), theta };
        last = Some((ens, sol));
        let (forward, backward) = last.as_ref().map(|(f, b)| (f, b)).expect("just set");
        if error < cfg.tol {
            return Ok(Run { forward: forward.clone(), backward: backward.clone(), converged: true, error, sweeps: sweep, failure: None });
        }
        if !error.is_finite() || (sweep > 2 && error > cfg.divergence * first.max(cfg.tol)) {
            break;
        }
    }
    let (forward, backward) = last.expect("at least one sweep");
    let sweeps = history.iter().rev().take_while(|r| r.lambda == lambda).count();
    Ok(Run {
        forward,
        backward,
        converged: false,
        error,
        sweeps,
        failure: Some(Error::NoConvergence { sweeps, last_error: error }),
    })
}

fn finish(run: Run, bank: NoiseBank, history: Vec<IterationRecord>, steps: Vec<LambdaStep>) -> FbsdeSolution {
    FbsdeSolution {
        forward: run.forward,
        backward: run.backward,
        bank,
        history,
        steps,
        converged: run.converged,
        final_error: run.error,
        failure: run.failure,
    }
}

/// Damped Picard sweeps on the target system from a cold start (states frozen
/// at the initial value, zero adjoint).
pub fn solve_fbsde_picard(p: &FbsdeProblem, cfg: &PicardConfig) -> Result<FbsdeSolution> {
    solve_at_lambda(p, 1.0, cfg)
}

/// Cold-start Picard on the homotopy member at `lambda`.
pub fn solve_at_lambda(p: &FbsdeProblem, lambda: f64, cfg: &PicardConfig) -> Result<FbsdeSolution> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidSchedule(format!("lambda {lambda} outside [0, 1]")));
    }
    let bank = NoiseBank::generate(&p.setup)?;
    let start = cold_start(p, &bank)?;
    let mut history = Vec::new();
    let run = picard(p, lambda, &bank, start, cfg, &mut history)?;
    let steps = vec![LambdaStep { lambda, sweeps: run.sweeps, converged: run.converged, final_error: run.error }];
    Ok(finish(run, bank, history, steps))
}

/// Continuation in `lambda` along `schedule` (from 0 to 1, increasing). A
/// failed step is bisected down to 1/64 of the first increment.
pub fn solve_fbsde_continuation(p: &FbsdeProblem, schedule: &[f64], cfg: &PicardConfig) -> Result<FbsdeSolution> {
    cfg.validate()?;
    if schedule.len() < 2 || schedule[0] != 0.0 || *schedule.last().expect("nonempty") != 1.0 {
        return Err(Error::InvalidSchedule("schedule must start at 0 and end at 1".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSchedule("schedule must be strictly increasing".into()));
    }
    let floor = (schedule[1] - schedule[0]) / 64.0;
    let bank = NoiseBank::generate(&p.setup)?;
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let start = cold_start(p, &bank)?;
    let mut run = picard(p, 0.0, &bank, start, cfg, &mut history)?;
    steps.push(LambdaStep { lambda: 0.0, sweeps: run.sweeps, converged: run.converged, final_error: run.error });
    if !run.converged {
        return Ok(finish(run, bank, history, steps));
    }
    let mut lam = 0.0;
    for &goal in &schedule[1..] {
        while lam < goal {
            let mut trial = goal;
            loop {
                let warm = Iterate { x: run.forward.iter().map(|e| e.states.clone()).collect(), theta: run.backward.theta.clone() };
                let attempt = picard(p, trial, &bank, warm, cfg, &mut history);
                let ok = matches!(&attempt, Ok(r) if r.converged);
                if let Ok(r) = &attempt {
                    steps.push(LambdaStep { lambda: trial, sweeps: r.sweeps, converged: r.converged, final_error: r.error });
                }
                if ok {
                    run = attempt.expect("checked");
                    lam = trial;
                    break;
                }
                if let Err(e) = &attempt {
                    if !matches!(e, Error::NonFiniteState { .. } | Error::NonFiniteAdjoint { .. }) {
                        return Err(e.clone());
                    }
                    steps.push(LambdaStep { lambda: trial, sweeps: 0, converged: false, final_error: f64::NAN });
                }
                let inc = (trial - lam) / 2.0;
                if inc < floor * (1.0 - 1e-12) {
                    run.converged = false;
                    run.failure = Some(Error::StepFloorReached { lambda: lam });
                    return Ok(finish(run, bank, history, steps));
                }
                trial = lam + inc;
            }
        }
    }
    Ok(finish(run, bank, history, steps))
}

/// Weighted change produced by one more forward and backward pass started
/// from the reported solution, on the same noise.
pub fn fixed_point_residual(p: &FbsdeProblem, sol: &FbsdeSolution) -> Result<f64> {
    let h = Homotopy { p, lambda: 1.0 };
    let ens = simulate_conditional_mkv_sde(&h, &p.x0, &sol.bank, Some(&sol.backward.theta))?;
    let back = solve_mkv_bsde(&h, &ens, &p.terminal, &p.backward)?;
    Ok(weighted_gap(sol.grid(), p.kappa, &ens, &back.theta, &sol.forward, &sol.backward.theta))
}

/// Where a test functional is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCtx {
    pub t: f64,
    pub node: usize,
    pub regime: usize,
    pub particles: usize,
}

/// Block mean of a test functional on two particle blocks (`particles x width`).
pub type BlockFunctional<'a> = Box<dyn Fn(&BlockCtx, &[f64], &[f64]) -> f64 + Sync + 'a>;

/// Constants and functionals of the domination and monotonicity conditions
/// (the initial-value functional is zero: initial states here never depend on
/// the adjoint).
pub struct TestFunctionals<'a> {
    pub beta1: f64,
    pub beta2: f64,
    /// `E psi(X, Xbar)`
    pub psi: BlockFunctional<'a>,
    /// `E varphi(Theta, Thetabar)`
    pub varphi: BlockFunctional<'a>,
}

impl TestFunctionals<'_> {
    pub fn zero() -> Self {
        Self { beta1: 0.0, beta2: 0.0, psi: Box::new(|_, _, _| 0.0), varphi: Box::new(|_, _, _| 0.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifierConfig {
    pub samples: usize,
    /// particles per block; the block is one conditional law
    pub block: usize,
    pub seed: u64,
    /// spread of the sampled states and adjoints
    pub scale: f64,
    /// margins below `-tol` count as violations
    pub tol: f64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self { samples: 1000, block: 8, seed: 7, scale: 1.0, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalitySummary {
    pub name: String,
    pub worst_margin: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub samples: usize,
    pub tol: f64,
    pub checks: Vec<InequalitySummary>,
    pub worst_margin: f64,
    pub holds: bool,
}

struct Block {
    x: Vec<f64>,
    theta: Vec<f64>,
}

fn moments(b: &Block, n: usize, tl: usize, np: usize) -> MomentSummary {
    MomentSummary {
        mean_x: column_mean(&b.x, n),
        second_x: b.x.iter().map(|v| v * v).sum::<f64>() / np as f64,
        mean_theta: column_mean(&b.theta, tl),
    }
}

struct Evaluated {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    common: Vec<f64>,
    f: Vec<f64>,
}

fn evaluate(p: &FbsdeProblem, ctx: &BlockCtx, x: &Block, th: &Block, dims: Dims) -> Evaluated {
    // x comes from one block, theta from the other; the law is their joint one
    let (n, d, d0, tl, np) = (dims.n, dims.d, dims.d0, dims.theta_len(), ctx.particles);
    let mixed = Block { x: x.x.clone(), theta: th.theta.clone() };
    let mom = moments(&mixed, n, tl, np);
    let mut e = Evaluated { drift: vec![0.0; np * n], diffusion: vec![0.0; np * n * d], common: vec![0.0; np * n * d0], f: vec![0.0; np * n] };
    for q in 0..np {
        let pc = PointCtx { t: ctx.t, node: ctx.node, scenario: 0, particle: q, regime: ctx.regime };
        let xq = &mixed.x[q * n..(q + 1) * n];
        let tq = &mixed.theta[q * tl..(q + 1) * tl];
        p.sde.eval(
            &pc,
            xq,
            tq,
            &mom,
            &mut SdeOutput {
                drift: &mut e.drift[q * n..(q + 1) * n],
                diffusion: &mut e.diffusion[q * n * d..(q + 1) * n * d],
                common: &mut e.common[q * n * d0..(q + 1) * n * d0],
            },
        );
        p.driver.eval(&pc, xq, tq, &mom, &mut e.f[q * n..(q + 1) * n]);
    }
    e
}

fn mean_sq_diff(a: &[f64], b: &[f64], np: usize) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / np as f64
}

/// Sample pairs of particle blocks and test the Case-1 monotonicity inequality
/// and the domination inequalities for `b`, `sigma`, `sigma0` and `f`.
///
/// Domination margins are reported as `E varphi - beta1 E|dh|^2` (and the same
/// with `psi`, `beta2` for `f`), which stays meaningful when a beta is zero.
pub fn verify_domination_monotonicity(p: &FbsdeProblem, fns: &TestFunctionals<'_>, cfg: &VerifierConfig) -> MonotonicityReport {
    let dims = p.dims();
    let (n, d, tl, np) = (dims.n, dims.d, dims.theta_len(), cfg.block.max(1));
    let grid = *p.grid();
    let m0 = p.setup.generator.m0();
    let kx = -p.kappa_x / 2.0 + p.kappa_y;
    let margins: Vec<[f64; 5]> = (0..cfg.samples)
        .into_par_iter()
        .map(|sample| {
            let mut rng = stream(cfg.seed, Domain::User, 0x6d6f6e, sample as u64);
            let t = grid.t0 + rng.random::<f64>() * (grid.horizon() - grid.t0);
            let ctx = BlockCtx { t, node: grid.node_at_or_before(t), regime: rng.random_range(0..m0), particles: np };
            let mut draw = |len: usize| -> Vec<f64> {
                let shift: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
                (0..np * len)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cfg.scale * (z + shift[i % len])
                    })
                    .collect()
            };
            let a = Block { x: draw(n), theta: draw(tl) };
            let b = Block { x: draw(n), theta: draw(tl) };
            let ea = evaluate(p, &ctx, &a, &a, dims);
            let eb = evaluate(p, &ctx, &b, &b, dims);
            // <(-df, dGamma), (dX, dTheta)> + (-kx/2 + ky) <dX, dY>
            let mut lhs = 0.0;
            for q in 0..np {
                let dx: Vec<f64> = (0..n).map(|i| a.x[q * n + i] - b.x[q * n + i]).collect();
                let dth: Vec<f64> = (0..tl).map(|i| a.theta[q * tl + i] - b.theta[q * tl + i]).collect();
                for i in 0..n {
                    lhs -= (ea.f[q * n + i] - eb.f[q * n + i]) * dx[i];
                    lhs += (ea.drift[q * n + i] - eb.drift[q * n + i]) * dth[i];
                    lhs += kx * dx[i] * dth[i];
                }
                let zd = n * d;
                for j in 0..zd {
                    lhs += (ea.diffusion[q * zd + j] - eb.diffusion[q * zd + j]) * dth[n + j];
                }
                let z0 = n * dims.d0;
                for j in 0..z0 {
                    lhs += (ea.common[q * z0 + j] - eb.common[q * z0 + j]) * dth[n + zd + j];
                }
            }
            lhs /= np as f64;
            let psi = (fns.psi)(&ctx, &a.x, &b.x);
            let varphi = (fns.varphi)(&ctx, &a.theta, &b.theta);
            let mono = -fns.beta2 * psi - fns.beta1 * varphi - lhs;
            // h(X, Theta) - h(X, Thetabar) and f(X, Theta) - f(Xbar, Theta)
            let eh = evaluate(p, &ctx, &a, &b, dims);
            let ef = evaluate(p, &ctx, &b, &a, dims);
            let dom = |u: &[f64], v: &[f64]| varphi - fns.beta1 * mean_sq_diff(u, v, np);
            [
                mono,
                dom(&ea.drift, &eh.drift),
                dom(&ea.diffusion, &eh.diffusion),
                dom(&ea.common, &eh.common),
                psi - fns.beta2 * mean_sq_diff(&ea.f, &ef.f, np),
            ]
        })
        .collect();
    let names = ["monotonicity", "domination b", "domination sigma", "domination sigma0", "domination f"];
    let checks: Vec<InequalitySummary> = names
        .iter()
        .enumerate()
        .map(|(i, name)| InequalitySummary {
            name: (*name).to_string(),
            worst_margin: margins.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min),
            violations: margins.iter().filter(|m| !(m[i] >= -cfg.tol)).count(),
        })
        .collect();
    let worst_margin = checks.iter().map(|c| c.worst_margin).fold(f64::INFINITY, f64::min);
    let holds = checks.iter().all(|c| c.violations == 0);
    MonotonicityReport { samples: cfg.samples, tol: cfg.tol, checks, worst_margin, holds }
}
