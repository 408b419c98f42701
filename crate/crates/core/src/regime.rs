//! Finite-state continuous-time Markov chain driving the regime.
//!
//! Regimes are indexed `0..m0` internally; file formats use `1..=m0`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMatrix {
    a: Vec<Vec<f64>>,
}

impl GeneratorMatrix {
    /// Validate a raw intensity matrix.
    pub fn new(raw: Vec<Vec<f64>>) -> Result<Self> {
        let m0 = raw.len();
        if m0 == 0 {
            return Err(Error::NotSquare { rows: 0, row: 0, len: 0 });
        }
        for (row, r) in raw.iter().enumerate() {
            if r.len() != m0 {
                return Err(Error::NotSquare { rows: m0, row, len: r.len() });
            }
        }
        for (i, r) in raw.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if i != j && !(v >= 0.0) {
                    return Err(Error::NegativeIntensity { i, j, value: v });
                }
            }
            let sum: f64 = r.iter().sum();
            if !(sum.abs() <= ROW_TOL) {
                return Err(Error::RowSumNonzero { row: i, sum });
            }
        }
        Ok(Self { a: raw })
    }

    /// Single regime, no switching.
    pub fn trivial() -> Self {
        Self { a: vec![vec![0.0]] }
    }

    pub fn m0(&self) -> usize {
        self.a.len()
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.a[i][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.a
    }
}

/// One regime trajectory: exact jump instants plus the right-continuous value at
/// every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub grid: TimeGrid,
    pub initial: usize,
    pub states: Vec<usize>,
    pub jump_times: Vec<f64>,
    pub jump_pairs: Vec<(usize, usize)>,
}

impl RegimePath {
    pub fn constant(grid: TimeGrid, state: usize) -> Self {
        Self { grid, initial: state, states: vec![state; grid.nodes()], jump_times: Vec::new(), jump_pairs: Vec::new() }
    }

    /// Regime right-continuous at node `k`.
    #[inline]
    pub fn at_node(&self, k: usize) -> usize {
        self.states[k]
    }

    /// Exact occupation time of every state on `[a, b]`.
    pub fn occupation(&self, m0: usize, a: f64, b: f64) -> Vec<f64> {
        let mut occ = vec![0.0; m0];
        let mut state = self.initial;
        let mut last = self.grid.t0;
        for (&tau, &(_, to)) in self.jump_times.iter().zip(&self.jump_pairs) {
            let lo = last.max(a);
            let hi = tau.min(b);
            if hi > lo {
                occ[state] += hi - lo;
            }
            state = to;
            last = tau;
        }
        let lo = last.max(a);
        if b > lo {
            occ[state] += b - lo;
        }
        occ
    }

    /// Jumps `i -> j` in the half-open window `(a, b]`.
    pub fn jump_counts(&self, m0: usize, a: f64, b: f64) -> Vec<Vec<u64>> {
        let mut c = vec![vec![0u64; m0]; m0];
        for (&tau, &(i, j)) in self.jump_times.iter().zip(&self.jump_pairs) {
            if tau > a && tau <= b {
                c[i][j] += 1;
            }
        }
        c
    }

    /// Sojourn lengths per state, excluding the final censored sojourn.
    pub fn holding_times(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.jump_times.len());
        let mut last = self.grid.t0;
        for (&tau, &(from, _)) in self.jump_times.iter().zip(&self.jump_pairs) {
            out.push((from, tau - last));
            last = tau;
        }
        out
    }
}

/// Simulate by exponential holding times, then project right-continuously onto
/// the grid.
pub fn simulate_regime_path<R: Rng + ?Sized>(
    gen: &GeneratorMatrix,
    initial: usize,
    grid: &TimeGrid,
    rng: &mut R,
) -> Result<RegimePath> {
    let m0 = gen.m0();
    if initial >= m0 {
        return Err(Error::StateOutOfRange(initial));
    }
    let horizon = grid.horizon();
    let mut jump_times = Vec::new();
    let mut jump_pairs = Vec::new();
    let mut state = initial;
    let mut now = grid.t0;
    loop {
        let rate = gen.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        now += Exp::new(rate).expect("positive rate").sample(rng);
        if now > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut target = state;
        for j in (0..m0).filter(|&j| j != state) {
            acc += gen.rate(state, j);
            target = j;
            if u < acc {
                break;
            }
        }
        jump_times.push(now);
        jump_pairs.push((state, target));
        state = target;
    }
    let mut states = Vec::with_capacity(grid.nodes());
    let mut idx = 0;
    let mut cur = initial;
    for k in 0..grid.nodes() {
        let t = grid.time(k);
        while idx < jump_times.len() && jump_times[idx] <= t {
            cur = jump_pairs[idx].1;
            idx += 1;
        }
        states.push(cur);
    }
    Ok(RegimePath { grid: *grid, initial, states, jump_times, jump_pairs })
}

/// Per grid interval and per ordered pair `(i, j)`: jump count, compensator
/// `a_ij * (exact time spent in i)`, and their difference.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleLedger {
    pub m0: usize,
    /// `[interval][i * m0 + j]`
    pub counting: Vec<Vec<f64>>,
    pub compensator: Vec<Vec<f64>>,
    pub increments: Vec<Vec<f64>>,
}

impl MartingaleLedger {
    pub fn intervals(&self) -> usize {
        self.increments.len()
    }

    #[inline]
    pub fn increment(&self, k: usize, i: usize, j: usize) -> f64 {
        self.increments[k][i * self.m0 + j]
    }

    /// Sum of increments over intervals `k0..k1`.
    pub fn sum_over(&self, k0: usize, k1: usize, i: usize, j: usize) -> f64 {
        (k0..k1).map(|k| self.increment(k, i, j)).sum()
    }

    /// `M_ij` at the horizon.
    pub fn terminal(&self, i: usize, j: usize) -> f64 {
        self.sum_over(0, self.intervals(), i, j)
    }
}

pub fn jump_martingale_ledger(path: &RegimePath, gen: &GeneratorMatrix) -> Result<MartingaleLedger> {
    let m0 = gen.m0();
    if path.initial >= m0 {
        return Err(Error::StateOutOfRange(path.initial));
    }
    if let Some(&(i, j)) = path.jump_pairs.iter().find(|&&(i, j)| i >= m0 || j >= m0) {
        return Err(Error::StateOutOfRange(i.max(j)));
    }
    let grid = &path.grid;
    let mut counting = Vec::with_capacity(grid.steps);
    let mut compensator = Vec::with_capacity(grid.steps);
    let mut increments = Vec::with_capacity(grid.steps);
    let mut jump_idx = 0;
    let mut state = path.initial;
    let mut last = grid.t0;
    for k in 0..grid.steps {
        let (a, b) = (grid.time(k), grid.time(k + 1));
        let mut cnt = vec![0.0; m0 * m0];
        let mut occ = vec![0.0; m0];
        while jump_idx < path.jump_times.len() && path.jump_times[jump_idx] <= b {
            let tau = path.jump_times[jump_idx];
            let (from, to) = path.jump_pairs[jump_idx];
            occ[state] += tau - last.max(a);
            cnt[from * m0 + to] += 1.0;
            state = to;
            last = tau;
            jump_idx += 1;
        }
        occ[state] += b - last.max(a);
        last = b;
        let comp: Vec<f64> = (0..m0 * m0)
            .map(|ij| {
                let (i, j) = (ij / m0, ij % m0);
                if i == j { 0.0 } else { gen.rate(i, j) * occ[i] }
            })
            .collect();
        increments.push(cnt.iter().zip(&comp).map(|(c, p)| c - p).collect());
        counting.push(cnt);
        compensator.push(comp);
    }
    Ok(MartingaleLedger { m0, counting, compensator, increments })
}

/// Occupation-time rate estimate with Poisson standard errors. Rows of states
/// that were never occupied are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorEstimate {
    pub rates: Vec<Option<Vec<f64>>>,
    pub std_errors: Vec<Option<Vec<f64>>>,
    pub occupation: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

pub fn empirical_generator(paths: &[RegimePath], m0: usize) -> Result<GeneratorEstimate> {
    if paths.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut occupation = vec![0.0; m0];
    let mut counts = vec![vec![0u64; m0]; m0];
    for p in paths {
        if p.initial >= m0 || p.jump_pairs.iter().any(|&(i, j)| i >= m0 || j >= m0) {
            return Err(Error::StateOutOfRange(m0));
        }
        let (a, b) = (p.grid.t0, p.grid.horizon());
        for (o, v) in occupation.iter_mut().zip(p.occupation(m0, a, b)) {
            *o += v;
        }
        for (row, r) in counts.iter_mut().zip(p.jump_counts(m0, a - 1.0, b)) {
            for (c, v) in row.iter_mut().zip(r) {
                *c += v;
            }
        }
    }
    let mut rates = Vec::with_capacity(m0);
    let mut std_errors = Vec::with_capacity(m0);
    for i in 0..m0 {
        if occupation[i] <= 0.0 {
            rates.push(None);
            std_errors.push(None);
            continue;
        }
        let mut r = vec![0.0; m0];
        let mut se = vec![0.0; m0];
        for j in (0..m0).filter(|&j| j != i) {
            r[j] = counts[i][j] as f64 / occupation[i];
            se[j] = (counts[i][j] as f64).sqrt() / occupation[i];
        }
        r[i] = -r.iter().sum::<f64>();
        se[i] = (counts[i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &c)| c).sum::<u64>() as f64).sqrt()
            / occupation[i];
        rates.push(Some(r));
        std_errors.push(Some(se));
    }
    Ok(GeneratorEstimate { rates, std_errors, occupation, counts })
}
