use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t0, t0 + dt, ..., t0 + steps * dt`.
///
/// The truncation horizon is `t0 + steps * dt`, where `steps` is the nearest
/// integer to `(horizon - t0) / dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !t0.is_finite() || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("t0={t0}, T={horizon}, dt={dt}")));
        }
        let steps = ((horizon - t0) / dt).round();
        if steps < 1.0 {
            return Err(Error::InvalidGrid(format!("horizon {horizon} not after start {t0}")));
        }
        Ok(Self { t0, dt, steps: steps as usize })
    }

    /// Horizon chosen so the discounted tail `exp(-(kbar - kappa)(T - t0))` is
    /// below `tail_tol`.
    pub fn from_tail_tolerance(t0: f64, kappa: f64, kappa_bar: f64, tail_tol: f64, dt: f64) -> Result<Self> {
        let gap = kappa_bar - kappa;
        if !(gap > 0.0) || !(tail_tol > 0.0 && tail_tol < 1.0) {
            return Err(Error::InvalidGrid(format!(
                "tail tolerance needs kappa < kappa_bar and 0 < tol < 1 (gap {gap}, tol {tail_tol})"
            )));
        }
        Self::new(t0, t0 + (1.0 / tail_tol).ln() / gap, dt)
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Index of the last node `<= s`.
    pub fn node_at_or_before(&self, s: f64) -> usize {
        let k = ((s - self.t0) / self.dt + 1e-9).floor();
        (k.max(0.0) as usize).min(self.steps)
    }

    /// Trapezoid rule over node values.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.nodes());
        let inner: f64 = values[1..self.steps].iter().sum();
        self.dt * (inner + 0.5 * (values[0] + values[self.steps]))
    }

    /// Trapezoid weights `e^{kappa t_k} w_k`.
    pub fn discounted_weights(&self, kappa: f64) -> Vec<f64> {
        (0..self.nodes())
            .map(|k| {
                let w = if k == 0 || k == self.steps { 0.5 } else { 1.0 };
                w * self.dt * (kappa * self.time(k)).exp()
            })
            .collect()
    }
}
