//! The solve pipeline shared by `solve` and `convergence`.

use std::time::Instant;

use mfswitch_core::coupled::{IterationRecord, LambdaStep};
use mfswitch_core::game::{deviation_csv, evaluate_game_cost, nash_deviation_test, project_profile};
use mfswitch_core::lq::{
    estimate_feedback_gain, perturbation_test, riccati_scalar_oracle, solve_adjoint, stationarity_residual, PerturbationReport,
};
use mfswitch_core::{
    solve_control_problem, solve_game_fixed_point, ControlProcess, CostBreakdown, KappaBounds, Numerics, ParticleEnsemble,
    TimeGrid,
};
use serde::Serialize;

use crate::check::{check, HorizonInfo};
use crate::spec::{Built, ProblemKind, ProblemSpec, SCHEMA_VERSION};
use crate::CliError;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// solve even if the check fails
    pub force: bool,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainEstimate {
    /// fraction of the horizon
    pub window: [f64; 2],
    pub gain: f64,
    pub intercept: f64,
    pub oracle_gain: Option<f64>,
    pub riccati_p: Option<f64>,
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualNorms {
    /// weighted norm of the first-order condition along the optimal state
    pub stationarity: Option<f64>,
    /// squared weighted change in the last Picard sweep
    pub fixed_point_gap: f64,
    /// squared weighted distance between population means and the profile
    pub consistency: Option<f64>,
    /// squared weighted distance between the profile and its best response
    pub equilibrium_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSummary {
    pub picard_sweeps: usize,
    pub median_ratio: Option<f64>,
    pub lambda_steps: Vec<LambdaStep>,
    /// profile gap after each outer step (game, iterate mode)
    pub outer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSummary {
    pub directions: usize,
    pub eps: Vec<f64>,
    pub base_cost: f64,
    pub se: f64,
    pub worst_delta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Results {
    pub schema_version: u32,
    pub problem: ProblemKind,
    pub converged: bool,
    pub failure: Option<String>,
    pub seed: u64,
    pub horizon: HorizonInfo,
    pub particles: usize,
    pub scenarios: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "SE")]
    pub se: f64,
    pub tail_bound: Option<f64>,
    pub cost: CostBreakdown,
    pub gain_estimates: Option<GainEstimate>,
    pub residual_norms: ResidualNorms,
    pub kappa_bounds: KappaBounds,
    pub iterations: IterationSummary,
    pub game_mode: Option<mfswitch_core::GameMode>,
    pub deviation: Option<DeviationSummary>,
}

/// Everything a run produces, before it is written anywhere.
#[derive(Debug)]
pub struct Outcome {
    pub results: Results,
    pub grid: TimeGrid,
    pub control: ControlProcess,
    pub state: Vec<ParticleEnsemble>,
    pub history: Vec<IterationRecord>,
    /// `node,time,...` rows for residuals.csv, without the header
    pub residual_header: String,
    pub residual_rows: Vec<Vec<f64>>,
    pub deviation: Option<PerturbationReport>,
    pub seconds: f64,
}

impl Outcome {
    pub fn converged(&self) -> bool {
        self.results.converged
    }

    pub fn deviation_csv(&self) -> Option<String> {
        self.deviation.as_ref().map(deviation_csv)
    }
}

pub fn numerics(spec: &ProblemSpec, built: &Built, grid: TimeGrid, seed: u64) -> Numerics {
    let n = &spec.numerics;
    let mut num = Numerics::new(grid, n.particles, n.scenarios, seed);
    num.generator = built.generator.clone();
    num.picard.tol = n.tol;
    num.picard.max_iters = n.max_iters;
    num.picard.damping = n.damping;
    num.lambda_steps = n.lambda_steps;
    num.backward.degree = n.basis_degree;
    num.kappa_star = spec.kappa_star();
    num
}

fn gain(spec: &ProblemSpec, built: &Built, state: &[ParticleEnsemble], u: &ControlProcess) -> Option<GainEstimate> {
    let d = built.dims;
    if d.n != 1 || d.m != 1 {
        return None;
    }
    let w = spec.numerics.gain_window;
    let (g, c) = estimate_feedback_gain(state, u, (w[0], w[1])).ok()?;
    let lq = &built.lq;
    let oracle = if spec.problem == ProblemKind::Control && lq.pieces.len() == 1 && lq.regime_independent() {
        riccati_scalar_oracle(&lq.pieces[0].regimes[0], spec.kappa).ok()
    } else {
        None
    };
    Some(GainEstimate {
        window: w,
        gain: g,
        intercept: c,
        oracle_gain: oracle.as_ref().map(|o| o.gain),
        riccati_p: oracle.as_ref().map(|o| o.p),
        relative_error: oracle.as_ref().map(|o| (g - o.gain).abs() / o.gain.abs().max(f64::MIN_POSITIVE)),
    })
}

/// Check, solve and post-process. Non-convergence is reported through
/// `Outcome::converged`, not as an error, so partial output can be written.
pub fn run(spec: &ProblemSpec, opts: RunOptions) -> Result<Outcome, CliError> {
    let checked = check(spec);
    if !checked.report.pass && !opts.force {
        return Err(CliError::validation(format!("check failed: {}", checked.report.failures.join("; "))));
    }
    let built = checked.built.ok_or_else(|| CliError::validation(checked.report.failures.join("; ")))?;
    let grid = checked.grid.ok_or_else(|| CliError::validation(checked.report.failures.join("; ")))?;
    let seed = opts.seed_override.unwrap_or(spec.numerics.seed);
    let num = numerics(spec, &built, grid, seed);
    let started = Instant::now();
    let mut out = match spec.problem {
        ProblemKind::Control => run_control(spec, &built, &num)?,
        ProblemKind::Game => run_game(spec, &built, &num)?,
    };
    out.results.seed = seed;
    out.seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

fn directions(spec: &ProblemSpec) -> usize {
    let default = if spec.problem == ProblemKind::Game { 20 } else { 0 };
    spec.numerics.deviation_directions.unwrap_or(default)
}

fn deviation_summary(spec: &ProblemSpec, rep: &PerturbationReport) -> DeviationSummary {
    DeviationSummary {
        directions: directions(spec),
        eps: spec.numerics.deviation_eps.clone(),
        base_cost: rep.base_cost,
        se: rep.se,
        worst_delta: rep.worst_delta,
        pass: rep.pass,
    }
}

fn failure_text(f: &Option<mfswitch_core::Error>) -> Option<String> {
    f.as_ref().map(ToString::to_string)
}

fn run_control(spec: &ProblemSpec, built: &Built, num: &Numerics) -> Result<Outcome, CliError> {
    let sol = solve_control_problem(&built.lq, built.x0.clone(), built.initial_regime, spec.kappa, num)?;
    let grid = num.grid;
    let adjoint = solve_adjoint(&sol.hamiltonian, &sol.state, &num.backward)?;
    let stat = stationarity_residual(&sol.hamiltonian, &sol.state, &sol.control, &adjoint)?;
    let dirs = directions(spec);
    let deviation = if dirs > 0 {
        Some(perturbation_test(&built.lq, &built.x0, &sol, dirs, &spec.numerics.deviation_eps, num.seed)?)
    } else {
        None
    };
    let results = Results {
        schema_version: SCHEMA_VERSION,
        problem: spec.problem,
        converged: sol.fbsde.converged,
        failure: failure_text(&sol.fbsde.failure),
        seed: num.seed,
        horizon: grid.into(),
        particles: num.particles,
        scenarios: num.scenarios,
        j: sol.cost.total,
        se: sol.cost.se,
        tail_bound: sol.cost.tail_bound,
        cost: sol.cost.clone(),
        gain_estimates: gain(spec, built, &sol.state, &sol.control),
        residual_norms: ResidualNorms {
            stationarity: Some(stat.weighted_norm),
            fixed_point_gap: sol.fbsde.final_error,
            consistency: None,
            equilibrium_gap: None,
        },
        kappa_bounds: sol.bounds,
        iterations: IterationSummary {
            picard_sweeps: sol.fbsde.history.len(),
            median_ratio: sol.fbsde.median_ratio(),
            lambda_steps: sol.fbsde.steps.clone(),
            outer: Vec::new(),
        },
        game_mode: None,
        deviation: deviation.as_ref().map(|d| deviation_summary(spec, d)),
    };
    let residual_rows = stat.per_node.iter().enumerate().map(|(k, r)| vec![grid.time(k), *r]).collect();
    Ok(Outcome {
        results,
        grid,
        history: sol.fbsde.history.clone(),
        control: sol.control,
        state: sol.state,
        residual_header: "stationarity".into(),
        residual_rows,
        deviation,
        seconds: 0.0,
    })
}

fn run_game(spec: &ProblemSpec, built: &Built, num: &Numerics) -> Result<Outcome, CliError> {
    let g = built.game.as_ref().expect("game problems build game coefficients");
    let rep = solve_game_fixed_point(
        g,
        &built.x0,
        built.initial_regime,
        spec.kappa,
        num,
        spec.numerics.mode,
        spec.numerics.profile_damping,
    )?;
    let grid = num.grid;
    let cost = evaluate_game_cost(g, spec.kappa, &rep.profile, &rep.state, &rep.control)?;
    let dirs = directions(spec);
    let deviation = if dirs > 0 {
        Some(nash_deviation_test(g, &built.x0, &rep, dirs, &spec.numerics.deviation_eps, num.seed)?)
    } else {
        None
    };

    // per-node consistency: RMS over scenarios of the mean-vs-profile mismatch
    let means = project_profile(&rep.control, &rep.state)?;
    let sc = means.scenarios() as f64;
    let residual_rows = (0..grid.nodes())
        .map(|k| {
            let (mut ex, mut eu) = (0.0, 0.0);
            for s in 0..means.scenarios() {
                ex += means.x(s, k).iter().zip(rep.profile.x(s, k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                eu += means.u(s, k).iter().zip(rep.profile.u(s, k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            vec![grid.time(k), (ex / sc).sqrt(), (eu / sc).sqrt()]
        })
        .collect();

    let converged = rep.converged && rep.fbsde.converged;
    let failure = failure_text(&rep.failure).or_else(|| failure_text(&rep.fbsde.failure));
    let results = Results {
        schema_version: SCHEMA_VERSION,
        problem: spec.problem,
        converged,
        failure,
        seed: num.seed,
        horizon: grid.into(),
        particles: num.particles,
        scenarios: num.scenarios,
        j: cost.total,
        se: cost.se,
        tail_bound: cost.tail_bound,
        cost: cost.clone(),
        gain_estimates: gain(spec, built, &rep.state, &rep.control),
        residual_norms: ResidualNorms {
            stationarity: None,
            fixed_point_gap: rep.fbsde.final_error,
            consistency: Some(rep.consistency),
            equilibrium_gap: Some(rep.gap),
        },
        kappa_bounds: rep.bounds,
        iterations: IterationSummary {
            picard_sweeps: rep.fbsde.history.len(),
            median_ratio: rep.fbsde.median_ratio(),
            lambda_steps: rep.fbsde.steps.clone(),
            outer: rep.outer_history.clone(),
        },
        game_mode: Some(rep.mode),
        deviation: deviation.as_ref().map(|d| deviation_summary(spec, d)),
    };
    Ok(Outcome {
        results,
        grid,
        history: rep.fbsde.history.clone(),
        control: rep.control,
        state: rep.state,
        residual_header: "consistency_x,consistency_u".into(),
        residual_rows,
        deviation,
        seconds: 0.0,
    })
}
