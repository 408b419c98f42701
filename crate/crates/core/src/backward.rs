//! Conditional McKean-Vlasov BSDEs by backward least-squares Monte Carlo.
//!
//! At each step the one-step-ahead value is projected on features of
//! `(X_k, E0[X_k])`, pooled over all scenarios and particles (per regime when
//! the problem is regime dependent). `Z` and `Z0` come from projecting the
//! residual times the Brownian increments, `K` from projecting the residual on
//! the compensated regime-jump increments.

use rayon::prelude::*;
use serde::Serialize;

use crate::coeffs::Dims;
use crate::error::{Error, Result};
use crate::forward::{column_mean, MomentSummary, ParticleEnsemble, PointCtx, ThetaField};
use crate::grid::TimeGrid;
use crate::regression::{Basis, Design, Fit, FitInfo, Fold};

pub trait Driver: Sync {
    fn dims(&self) -> Dims;
    /// Write `f(t, x, theta, moments, regime)` into `out` (length `n`, zeroed).
    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut [f64]);
    /// Regime-independent problems (driver and terminal value) are regressed
    /// without regime indicators and carry `K = 0`.
    fn regime_dependent(&self) -> bool {
        true
    }
    fn depends_on_theta(&self) -> bool {
        true
    }
}

pub struct FnDriver<F> {
    dims: Dims,
    regime_dependent: bool,
    f: F,
}

pub fn driver_fn<F>(dims: Dims, f: F) -> FnDriver<F>
where
    F: Fn(&PointCtx, &[f64], &[f64], &MomentSummary, &mut [f64]) + Sync,
{
    FnDriver { dims, regime_dependent: true, f }
}

impl<F> FnDriver<F> {
    pub fn regime_free(mut self) -> Self {
        self.regime_dependent = false;
        self
    }
}

impl<F> Driver for FnDriver<F>
where
    F: Fn(&PointCtx, &[f64], &[f64], &MomentSummary, &mut [f64]) + Sync,
{
    fn dims(&self) -> Dims {
        self.dims
    }
    fn eval(&self, ctx: &PointCtx, x: &[f64], theta: &[f64], mom: &MomentSummary, out: &mut [f64]) {
        (self.f)(ctx, x, theta, mom, out)
    }
    fn regime_dependent(&self) -> bool {
        self.regime_dependent
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    Zero,
    /// per scenario, `particles x n`
    Values(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackwardConfig {
    /// polynomial degree of the basis, 1 or 2
    pub degree: u8,
    /// include the scenario mean of `X` as a regressor
    pub use_mean: bool,
    /// fixed-point sweeps for the implicit `Y_k` step
    pub sweeps: usize,
    /// two-fold cross-fitting by particle parity
    pub cross_fit: bool,
    /// scaled condition number above which the basis is downgraded
    pub cond_max: f64,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self { degree: 2, use_mean: true, sweeps: 1, cross_fit: false, cond_max: 1e10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeDiagnostics {
    pub node: usize,
    pub r2: f64,
    pub condition: f64,
    pub downgraded: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub dims: Dims,
    pub grid: TimeGrid,
    /// per scenario
    pub theta: Vec<ThetaField>,
    /// per scenario, `nodes x particles x (m0 * m0 * n)`; empty when `m0 == 1`
    pub k: Vec<Vec<f64>>,
    pub m0: usize,
    pub diagnostics: Vec<NodeDiagnostics>,
}

impl BackwardSolution {
    #[inline]
    pub fn y(&self, s: usize, k: usize, p: usize) -> &[f64] {
        &self.theta[s].at(k, p)[..self.dims.n]
    }

    #[inline]
    pub fn z(&self, s: usize, k: usize, p: usize) -> &[f64] {
        let n = self.dims.n;
        &self.theta[s].at(k, p)[n..n + n * self.dims.d]
    }

    #[inline]
    pub fn z0(&self, s: usize, k: usize, p: usize) -> &[f64] {
        let n = self.dims.n;
        &self.theta[s].at(k, p)[n + n * self.dims.d..]
    }

    /// Loading of `Y` on `M_ij` (length `n`).
    pub fn k_loading(&self, s: usize, k: usize, p: usize, i: usize, j: usize) -> &[f64] {
        let (n, m0) = (self.dims.n, self.m0);
        if self.k.is_empty() {
            return &ZEROS[..n.min(ZEROS.len())];
        }
        let w = m0 * m0 * n;
        let off = (k * self.theta[s].particles + p) * w + (i * m0 + j) * n;
        &self.k[s][off..off + n]
    }
}

static ZEROS: [f64; 64] = [0.0; 64];

/// Solve backward along the given forward ensembles.
pub fn solve_mkv_bsde(
    driver: &dyn Driver,
    forward: &[ParticleEnsemble],
    terminal: &Terminal,
    cfg: &BackwardConfig,
) -> Result<BackwardSolution> {
    let dims = driver.dims();
    let (n, d, d0) = (dims.n, dims.d, dims.d0);
    let tl = dims.theta_len();
    let first = forward.first().ok_or(Error::EmptySample)?;
    let grid = first.noise.regime.grid;
    let np = first.particles;
    let nodes = grid.nodes();
    let m0 = first.noise.ledger.m0;
    if forward.iter().any(|e| e.n != n || e.particles != np) {
        return Err(Error::DimensionMismatch("ensembles disagree on state dimension or particle count".into()));
    }
    if n > ZEROS.len() {
        return Err(Error::DimensionMismatch("state dimension above 64".into()));
    }
    let regime_dep = driver.regime_dependent() && m0 > 1;
    let with_k = m0 > 1 && regime_dep;
    let basis = Basis { degree: cfg.degree.clamp(1, 2), use_mean: cfg.use_mean, n };
    let p = basis.len();
    let p_low = basis.len_for(1);
    let mut theta: Vec<ThetaField> = forward.iter().map(|_| ThetaField::zeros(nodes, np, tl)).collect();
    let mut kload: Vec<Vec<f64>> =
        if with_k { forward.iter().map(|_| vec![0.0; nodes * np * m0 * m0 * n]).collect() } else { Vec::new() };

    match terminal {
        Terminal::Zero => {}
        Terminal::Values(v) => {
            if v.len() != forward.len() || v.iter().any(|x| x.len() != np * n) {
                return Err(Error::DimensionMismatch("terminal values do not match the ensembles".into()));
            }
            for (th, vals) in theta.iter_mut().zip(v) {
                for q in 0..np {
                    th.at_mut(grid.steps, q)[..n].copy_from_slice(&vals[q * n..(q + 1) * n]);
                }
            }
        }
    }

    let mut diagnostics = Vec::with_capacity(grid.steps);
    let folds: &[Fold] = if cfg.cross_fit { &[Fold::Parity(0), Fold::Parity(1)] } else { &[Fold::All] };
    for k in (0..grid.steps).rev() {
        let design = build_design(forward, k, basis, p, p_low, regime_dep, m0);
        let y_next: Vec<Vec<f64>> = theta
            .iter()
            .map(|th| (0..np).flat_map(|q| th.at(k + 1, q)[..n].to_vec()).collect())
            .collect();
        let fit_all = |targets: &[Vec<f64>], t: usize| -> Vec<Fit> {
            folds.iter().map(|&f| design.fit(targets, t, f, cfg.cond_max)).collect()
        };
        let predict = |fits: &[Fit], s: usize, t: usize| -> Vec<f64> {
            let mut out = vec![0.0; np * t];
            if fits.len() == 2 {
                let pair: &[Fit; 2] = fits.try_into().expect("two folds");
                design.predict_cross(pair, s, t, &mut out);
            } else {
                design.predict_into(&fits[0], s, t, &mut out);
            }
            out
        };

        let fits_y = fit_all(&y_next, n);
        let y_hat: Vec<Vec<f64>> = (0..forward.len()).map(|s| predict(&fits_y, s, n)).collect();
        let resid: Vec<Vec<f64>> = y_next.iter().zip(&y_hat).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect()).collect();

        // Z and Z0 from residual times increments.
        let zt = n * (d + d0);
        let zz_targets: Vec<Vec<f64>> = forward
            .par_iter()
            .zip(&resid)
            .map(|(e, r)| {
                let mut out = vec![0.0; np * zt];
                let dw0 = e.noise.dw0(k);
                for q in 0..np {
                    let dw = e.noise.dw(k, q);
                    let row = &mut out[q * zt..(q + 1) * zt];
                    for i in 0..n {
                        let ri = r[q * n + i] / grid.dt;
                        for j in 0..d {
                            row[j * n + i] = ri * dw[j];
                        }
                        for j in 0..d0 {
                            row[n * d + j * n + i] = ri * dw0[j];
                        }
                    }
                }
                out
            })
            .collect();
        let zz = if zt > 0 {
            let fits_z = fit_all(&zz_targets, zt);
            (0..forward.len()).map(|s| predict(&fits_z, s, zt)).collect()
        } else {
            vec![Vec::new(); forward.len()]
        };

        if with_k {
            fit_jump_loadings(forward, &design, &resid, k, n, m0, folds, cfg.cond_max, &mut kload);
        }

        // Y_k = E[Y_{k+1} | F_k] + f dt, with `sweeps` fixed-point passes.
        let sweeps = if driver.depends_on_theta() { cfg.sweeps.max(1) } else { 1 };
        let mut y_k = y_hat.clone();
        for _ in 0..sweeps {
            let new: Vec<Vec<f64>> = forward
                .par_iter()
                .enumerate()
                .map(|(s, e)| {
                    let mut th_node = vec![0.0; np * tl];
                    for q in 0..np {
                        let row = &mut th_node[q * tl..(q + 1) * tl];
                        row[..n].copy_from_slice(&y_k[s][q * n..(q + 1) * n]);
                        row[n..].copy_from_slice(&zz[s][q * zt..(q + 1) * zt]);
                    }
                    let xs = e.node(k);
                    let mom = MomentSummary {
                        mean_x: column_mean(xs, n),
                        second_x: xs.iter().map(|v| v * v).sum::<f64>() / np as f64,
                        mean_theta: column_mean(&th_node, tl),
                    };
                    let regime = e.regime(k);
                    let mut f = vec![0.0; n];
                    let mut out = vec![0.0; np * n];
                    for q in 0..np {
                        f.fill(0.0);
                        let ctx = PointCtx { t: grid.time(k), node: k, scenario: e.scenario, particle: q, regime };
                        driver.eval(&ctx, e.x(k, q), &th_node[q * tl..(q + 1) * tl], &mom, &mut f);
                        for i in 0..n {
                            out[q * n + i] = y_hat[s][q * n + i] + f[i] * grid.dt;
                        }
                    }
                    out
                })
                .collect();
            y_k = new;
        }

        for (s, th) in theta.iter_mut().enumerate() {
            for q in 0..np {
                let row = th.at_mut(k, q);
                row[..n].copy_from_slice(&y_k[s][q * n..(q + 1) * n]);
                row[n..].copy_from_slice(&zz[s][q * zt..(q + 1) * zt]);
            }
            if th.node(k).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteAdjoint { node: k });
            }
        }
        diagnostics.push(node_diagnostics(k, &fits_y[0].info, &y_next, &y_hat));
    }
    diagnostics.reverse();
    Ok(BackwardSolution { dims, grid, theta, k: kload, m0, diagnostics })
}

fn build_design(forward: &[ParticleEnsemble], k: usize, basis: Basis, p: usize, p_low: usize, regime_dep: bool, m0: usize) -> Design {
    let feats: Vec<Vec<f64>> = forward
        .par_iter()
        .map(|e| {
            let m = e.mean(k);
            let mut f = vec![0.0; e.particles * p];
            for q in 0..e.particles {
                basis.fill(e.x(k, q), &m, &mut f[q * p..(q + 1) * p]);
            }
            f
        })
        .collect();
    let group: Vec<usize> = forward.iter().map(|e| if regime_dep { e.regime(k) } else { 0 }).collect();
    Design { p, p_low, feats, group, groups: if regime_dep { m0 } else { 1 }, particles: forward[0].particles }
}

#[allow(clippy::too_many_arguments)]
fn fit_jump_loadings(
    forward: &[ParticleEnsemble],
    design: &Design,
    resid: &[Vec<f64>],
    k: usize,
    n: usize,
    m0: usize,
    folds: &[Fold],
    cond_max: f64,
    kload: &mut [Vec<f64>],
) {
    let np = design.particles;
    let p = design.p;
    for i in 0..m0 {
        let members: Vec<usize> = (0..forward.len()).filter(|&s| forward[s].regime(k) == i).collect();
        if members.is_empty() {
            continue;
        }
        // Targets j with at least one observed jump i -> j; without one the
        // compensated increment is deterministic and the loading stays 0.
        let targets: Vec<usize> = (0..m0)
            .filter(|&j| j != i && members.iter().any(|&s| forward[s].noise.ledger.counting[k][i * m0 + j] > 0.0))
            .collect();
        if targets.is_empty() {
            continue;
        }
        // Leading column is an intercept; the loadings are the remaining ones.
        let pj = 1 + p * targets.len();
        let sub = Design {
            p: pj,
            p_low: pj,
            feats: members
                .iter()
                .map(|&s| {
                    let f = &design.feats[s];
                    let mut out = vec![0.0; np * pj];
                    for q in 0..np {
                        out[q * pj] = 1.0;
                        for (t, &j) in targets.iter().enumerate() {
                            let dm = forward[s].noise.ledger.increment(k, i, j);
                            for l in 0..p {
                                out[q * pj + 1 + t * p + l] = f[q * p + l] * dm;
                            }
                        }
                    }
                    out
                })
                .collect(),
            group: vec![0; members.len()],
            groups: 1,
            particles: np,
        };
        let r: Vec<Vec<f64>> = members.iter().map(|&s| resid[s].clone()).collect();
        let fits: Vec<Fit> = folds.iter().map(|&f| sub.fit(&r, n, f, cond_max)).collect();
        let w = m0 * m0 * n;
        for &s in &members {
            for (fi, fit) in fits.iter().enumerate() {
                let Some(c) = &fit.coef[0] else { continue };
                for q in 0..np {
                    if fits.len() == 2 && q % 2 == fi {
                        continue;
                    }
                    let phi = &design.feats[s][q * p..(q + 1) * p];
                    for (t, &j) in targets.iter().enumerate() {
                        for comp in 0..n {
                            let v: f64 = (0..p).map(|l| phi[l] * c[(1 + t * p + l, comp)]).sum();
                            kload[s][(k * np + q) * w + (i * m0 + j) * n + comp] = v;
                        }
                    }
                }
            }
        }
    }
}

fn node_diagnostics(k: usize, info: &[FitInfo], y: &[Vec<f64>], y_hat: &[Vec<f64>]) -> NodeDiagnostics {
    let count: usize = y.iter().map(Vec::len).sum();
    let mean = y.iter().flatten().sum::<f64>() / count.max(1) as f64;
    let tss: f64 = y.iter().flatten().map(|v| (v - mean).powi(2)).sum();
    let rss: f64 = y.iter().flatten().zip(y_hat.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let used: Vec<&FitInfo> = info.iter().filter(|i| i.samples > 0).collect();
    NodeDiagnostics {
        node: k,
        r2,
        condition: used.iter().map(|i| i.condition).fold(0.0, f64::max),
        downgraded: used.iter().any(|i| i.downgraded),
        truncated: used.iter().any(|i| i.truncated),
    }
}

/// `e^{kappa T'} E|Y_{T'}|^2` at probe times, for solutions of the same problem
/// on several truncation horizons.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransversalityTable {
    pub probes: Vec<f64>,
    pub horizons: Vec<f64>,
    /// `[horizon][probe]`, `None` where the probe lies beyond the horizon
    pub values: Vec<Vec<Option<f64>>>,
    /// per horizon: non-increasing across probes
    pub decreasing: Vec<bool>,
    /// per probe: max relative deviation from the longest horizon
    pub relative_spread: Vec<f64>,
    pub horizon_insensitive: bool,
    /// set when a probe sequence grows
    pub flagged: bool,
}

pub fn transversality_check(solutions: &[&BackwardSolution], kappa: f64, probes: &[f64], spread_tol: f64) -> TransversalityTable {
    let horizons: Vec<f64> = solutions.iter().map(|s| s.grid.horizon()).collect();
    let values: Vec<Vec<Option<f64>>> = solutions
        .iter()
        .map(|sol| {
            probes
                .iter()
                .map(|&tp| {
                    if tp > sol.grid.horizon() + 1e-12 {
                        return None;
                    }
                    let k = sol.grid.node_at_or_before(tp);
                    let mut acc = 0.0;
                    let mut cnt = 0usize;
                    for th in &sol.theta {
                        for q in 0..th.particles {
                            acc += th.at(k, q)[..sol.dims.n].iter().map(|v| v * v).sum::<f64>();
                            cnt += 1;
                        }
                    }
                    Some((kappa * sol.grid.time(k)).exp() * acc / cnt as f64)
                })
                .collect()
        })
        .collect();
    let decreasing: Vec<bool> = values
        .iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().flatten().copied().collect();
            v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-300)
        })
        .collect();
    let reference = values.last().cloned().unwrap_or_default();
    let relative_spread: Vec<f64> = (0..probes.len())
        .map(|j| {
            let Some(r) = reference.get(j).copied().flatten() else { return f64::NAN };
            values
                .iter()
                .filter_map(|row| row[j])
                .map(|v| if r.abs() > 0.0 { (v - r).abs() / r.abs() } else { v.abs() })
                .fold(0.0, f64::max)
        })
        .collect();
    let horizon_insensitive = relative_spread.iter().filter(|v| v.is_finite()).all(|&v| v <= spread_tol);
    let flagged = decreasing.iter().any(|d| !d);
    TransversalityTable { probes: probes.to_vec(), horizons, values, decreasing, relative_spread, horizon_insensitive, flagged }
}
