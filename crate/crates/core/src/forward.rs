//! Euler-Maruyama simulation of conditional McKean-Vlasov SDEs over particle
//! clouds, one cloud per common-noise scenario.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::coeffs::Dims;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::regime::{jump_martingale_ledger, simulate_regime_path, GeneratorMatrix, MartingaleLedger, RegimePath};
use crate::rng::{stream, Domain};

/// Where a coefficient is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCtx {
    pub t: f64,
    pub node: usize,
    pub scenario: usize,
    pub particle: usize,
    pub regime: usize,
}

/// Within-scenario moments at one node: the conditional law enters only
/// through these.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentSummary {
    pub mean_x: Vec<f64>,
    /// mean of `|x|^2`
    pub second_x: f64,
    /// mean of the packed adjoint `(y, z, z0)`; empty for a plain SDE
    pub mean_theta: Vec<f64>,
}

/// Output buffers, zeroed before every call.
pub struct SdeOutput<'a> {
    pub drift: &'a mut [f64],
    /// `n*d`, column-stacked
    pub diffusion: &'a mut [f64],
    /// `n*d0`, column-stacked
    pub common: &'a mut [f64],
}

pub trait SdeCoefficients: Sync {
    fn dims(&self) -> Dims;
    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>);
    /// Whether `eval` reads `theta` or `mom.mean_theta`.
    fn depends_on_theta(&self) -> bool {
        true
    }
}

/// Closure-backed coefficients.
pub struct FnSde<F> {
    dims: Dims,
    depends_on_theta: bool,
    f: F,
}

pub fn sde_fn<F>(dims: Dims, f: F) -> FnSde<F>
where
    F: Fn(&PointCtx, &[f64], &[f64], &MomentSummary, &mut SdeOutput<'_>) + Sync,
{
    FnSde { dims, depends_on_theta: true, f }
}

impl<F> FnSde<F> {
    pub fn theta_free(mut self) -> Self {
        self.depends_on_theta = false;
        self
    }
}

impl<F> SdeCoefficients for FnSde<F>
where
    F: Fn(&PointCtx, &[f64], &[f64], &MomentSummary, &mut SdeOutput<'_>) + Sync,
{
    fn dims(&self) -> Dims {
        self.dims
    }
    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut SdeOutput<'_>) {
        (self.f)(ctx, x, theta, mom, out)
    }
    fn depends_on_theta(&self) -> bool {
        self.depends_on_theta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSetup {
    pub grid: TimeGrid,
    pub particles: usize,
    pub scenarios: usize,
    pub seed: u64,
    pub generator: GeneratorMatrix,
    pub initial_regime: usize,
    /// Brownian dimensions drawn per particle and per scenario.
    pub d: usize,
    pub d0: usize,
    /// Offset added to particle indices when keying idiosyncratic streams, so a
    /// sub-cloud can be replayed on its own.
    pub first_particle: u64,
}

impl SimulationSetup {
    pub fn new(grid: TimeGrid, particles: usize, scenarios: usize, seed: u64, dims: Dims) -> Self {
        Self {
            grid,
            particles,
            scenarios,
            seed,
            generator: GeneratorMatrix::trivial(),
            initial_regime: 0,
            d: dims.d,
            d0: dims.d0,
            first_particle: 0,
        }
    }

    pub fn with_regimes(mut self, generator: GeneratorMatrix, initial_regime: usize) -> Self {
        self.generator = generator;
        self.initial_regime = initial_regime;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonNoisePath {
    /// `steps x d0`, each entry `N(0, dt)`
    pub increments: Vec<f64>,
    pub seed: (u64, u64),
}

/// Everything random about one scenario. Shared by every sweep of a solver so
/// iterations see common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioNoise {
    pub scenario: usize,
    pub regime: RegimePath,
    pub ledger: MartingaleLedger,
    pub common: CommonNoisePath,
    /// `steps x particles x d`
    pub idiosyncratic: Vec<f64>,
    pub particle_seeds: Vec<(u64, u64, u64)>,
    pub particles: usize,
    pub d: usize,
    pub d0: usize,
}

impl ScenarioNoise {
    #[inline]
    pub fn dw(&self, k: usize, p: usize) -> &[f64] {
        let off = (k * self.particles + p) * self.d;
        &self.idiosyncratic[off..off + self.d]
    }

    #[inline]
    pub fn dw0(&self, k: usize) -> &[f64] {
        &self.common.increments[k * self.d0..(k + 1) * self.d0]
    }
}

#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub setup: SimulationSetup,
    pub scenarios: Vec<Arc<ScenarioNoise>>,
}

impl NoiseBank {
    pub fn generate(setup: &SimulationSetup) -> Result<Self> {
        if setup.particles == 0 || setup.scenarios == 0 {
            return Err(Error::InvalidArgument("need at least one particle and one scenario".into()));
        }
        let g = setup.grid;
        let sqdt = g.dt.sqrt();
        let scenarios = (0..setup.scenarios)
            .into_par_iter()
            .map(|s| {
                let mut rr = stream(setup.seed, Domain::Regime, s as u64, 0);
                let regime = simulate_regime_path(&setup.generator, setup.initial_regime, &g, &mut rr)?;
                let ledger = jump_martingale_ledger(&regime, &setup.generator)?;
                let mut rc = stream(setup.seed, Domain::Common, s as u64, 0);
                let increments =
                    (0..g.steps * setup.d0).map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rc);
                        sqdt * z
                    }).collect::<Vec<f64>>();
                let (n, d) = (setup.particles, setup.d);
                let mut idio = vec![0.0; g.steps * n * d];
                let mut particle_seeds = Vec::with_capacity(n);
                for p in 0..n {
                    let id = setup.first_particle + p as u64;
                    particle_seeds.push((setup.seed, s as u64, id));
                    let mut ri = stream(setup.seed, Domain::Idiosyncratic, s as u64, id);
                    for k in 0..g.steps {
                        for j in 0..d {
                            let v: f64 = StandardNormal.sample(&mut ri);
                            idio[(k * n + p) * d + j] = sqdt * v;
                        }
                    }
                }
                Ok(Arc::new(ScenarioNoise {
                    scenario: s,
                    regime,
                    ledger,
                    common: CommonNoisePath { increments, seed: (setup.seed, s as u64) },
                    idiosyncratic: idio,
                    particle_seeds,
                    particles: n,
                    d,
                    d0: setup.d0,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { setup: setup.clone(), scenarios })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.setup.grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Every particle starts at the same point.
    Constant(Vec<f64>),
    /// `particles x n` values, reused in every scenario.
    Samples(Vec<f64>),
    /// Independent normal draws per particle with the given mean and
    /// per-coordinate standard deviation.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialCondition {
    fn fill(&self, n: usize, particles: usize, seed: u64, scenario: usize, out: &mut [f64]) -> Result<()> {
        match self {
            Self::Constant(x) => {
                if x.len() != n {
                    return Err(Error::DimensionMismatch(format!("x0 has length {}, state is {n}", x.len())));
                }
                for p in 0..particles {
                    out[p * n..(p + 1) * n].copy_from_slice(x);
                }
            }
            Self::Samples(v) => {
                if v.len() != n * particles {
                    return Err(Error::DimensionMismatch(format!("{} initial values for {particles} x {n}", v.len())));
                }
                out.copy_from_slice(v);
            }
            Self::Gaussian { mean, std } => {
                if mean.len() != n || std.len() != n {
                    return Err(Error::DimensionMismatch("initial law dimension".into()));
                }
                for p in 0..particles {
                    let mut r = stream(seed, Domain::Initial, scenario as u64, p as u64);
                    for i in 0..n {
                        let z: f64 = StandardNormal.sample(&mut r);
                        out[p * n + i] = mean[i] + std[i] * z;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Packed `(y, z, z0)` per node and particle for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    pub particles: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl ThetaField {
    pub fn zeros(nodes: usize, particles: usize, len: usize) -> Self {
        Self { particles, len, data: vec![0.0; nodes * particles * len] }
    }

    #[inline]
    pub fn at(&self, k: usize, p: usize) -> &[f64] {
        let off = (k * self.particles + p) * self.len;
        &self.data[off..off + self.len]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize, p: usize) -> &mut [f64] {
        let off = (k * self.particles + p) * self.len;
        &mut self.data[off..off + self.len]
    }

    pub fn node(&self, k: usize) -> &[f64] {
        let w = self.particles * self.len;
        &self.data[k * w..(k + 1) * w]
    }

    pub fn mean(&self, k: usize) -> Vec<f64> {
        column_mean(self.node(k), self.len)
    }
}

pub(crate) fn column_mean(rows: &[f64], width: usize) -> Vec<f64> {
    let mut m = vec![0.0; width];
    if width == 0 {
        return m;
    }
    let count = rows.len() / width;
    for r in rows.chunks_exact(width) {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    for a in &mut m {
        *a /= count as f64;
    }
    m
}

/// One scenario's particle cloud over the whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub scenario: usize,
    pub noise: Arc<ScenarioNoise>,
    pub particles: usize,
    pub n: usize,
    /// `nodes x particles x n`
    pub states: Vec<f64>,
}

impl ParticleEnsemble {
    #[inline]
    pub fn x(&self, k: usize, p: usize) -> &[f64] {
        let off = (k * self.particles + p) * self.n;
        &self.states[off..off + self.n]
    }

    pub fn node(&self, k: usize) -> &[f64] {
        let w = self.particles * self.n;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn mean(&self, k: usize) -> Vec<f64> {
        column_mean(self.node(k), self.n)
    }

    pub fn second_moment(&self, k: usize) -> f64 {
        self.node(k).iter().map(|v| v * v).sum::<f64>() / self.particles as f64
    }

    pub fn regime(&self, k: usize) -> usize {
        self.noise.regime.at_node(k)
    }

    pub fn nodes(&self) -> usize {
        self.states.len() / (self.particles * self.n)
    }
}

/// Simulate every scenario of `bank`, optionally with a frozen adjoint field per
/// scenario feeding the coefficients.
pub fn simulate_conditional_mkv_sde(
    cb: &dyn SdeCoefficients,
    x0: &InitialCondition,
    bank: &NoiseBank,
    theta: Option<&[ThetaField]>,
) -> Result<Vec<ParticleEnsemble>> {
    let dims = cb.dims();
    if dims.d != bank.setup.d || dims.d0 != bank.setup.d0 {
        return Err(Error::DimensionMismatch(format!(
            "coefficients use d = {}, d0 = {}; noise has d = {}, d0 = {}",
            dims.d, dims.d0, bank.setup.d, bank.setup.d0
        )));
    }
    if let Some(th) = theta {
        if th.len() != bank.scenarios.len() || th.iter().any(|t| t.len != dims.theta_len() || t.particles != bank.setup.particles) {
            return Err(Error::DimensionMismatch("adjoint field does not match the noise bank".into()));
        }
    }
    bank.scenarios
        .par_iter()
        .map(|noise| simulate_scenario(cb, x0, bank, noise, theta.map(|t| &t[noise.scenario])))
        .collect()
}

fn simulate_scenario(
    cb: &dyn SdeCoefficients,
    x0: &InitialCondition,
    bank: &NoiseBank,
    noise: &Arc<ScenarioNoise>,
    theta: Option<&ThetaField>,
) -> Result<ParticleEnsemble> {
    let dims = cb.dims();
    let (n, d, d0) = (dims.n, dims.d, dims.d0);
    let g = bank.setup.grid;
    let np = bank.setup.particles;
    let width = np * n;
    let mut states = vec![0.0; g.nodes() * width];
    x0.fill(n, np, bank.setup.seed, noise.scenario, &mut states[..width])?;
    let empty: Vec<f64> = Vec::new();
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n * d];
    let mut common = vec![0.0; n * d0];
    for k in 0..g.steps {
        let (head, tail) = states.split_at_mut((k + 1) * width);
        let cur = &head[k * width..];
        let next = &mut tail[..width];
        let mom = MomentSummary {
            mean_x: column_mean(cur, n),
            second_x: cur.iter().map(|v| v * v).sum::<f64>() / np as f64,
            mean_theta: theta.map_or_else(Vec::new, |t| t.mean(k)),
        };
        let dw0 = noise.dw0(k);
        let regime = noise.regime.at_node(k);
        for p in 0..np {
            let x = &cur[p * n..(p + 1) * n];
            let th = theta.map_or(&empty[..], |t| t.at(k, p));
            drift.fill(0.0);
            diff.fill(0.0);
            common.fill(0.0);
            let ctx = PointCtx { t: g.time(k), node: k, scenario: noise.scenario, particle: p, regime };
            cb.eval(&ctx, x, th, &mom, &mut SdeOutput { drift: &mut drift, diffusion: &mut diff, common: &mut common });
            let dw = noise.dw(k, p);
            let out = &mut next[p * n..(p + 1) * n];
            for i in 0..n {
                let mut v = x[i] + drift[i] * g.dt;
                for j in 0..d {
                    v += diff[j * n + i] * dw[j];
                }
                for j in 0..d0 {
                    v += common[j * n + i] * dw0[j];
                }
                out[i] = v;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { node: k + 1, scenario: noise.scenario });
        }
    }
    Ok(ParticleEnsemble { scenario: noise.scenario, noise: noise.clone(), particles: np, n, states })
}

/// Per-node `e^{kappa s} E|X_s|^2` over all scenarios and particles, and its
/// trapezoid integral.
pub fn weighted_l2_profile(ens: &[ParticleEnsemble], grid: &TimeGrid, kappa: f64) -> (Vec<f64>, f64) {
    let profile: Vec<f64> = (0..grid.nodes())
        .map(|k| {
            let m: f64 = ens.iter().map(|e| e.second_moment(k)).sum::<f64>() / ens.len() as f64;
            (kappa * grid.time(k)).exp() * m
        })
        .collect();
    let integral = grid.trapezoid(&profile);
    (profile, integral)
}
