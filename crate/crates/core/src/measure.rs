//! Empirical measures standing in for the conditional law of a scenario's
//! particle cloud.

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl EmpiricalMeasure {
    /// Uniform weights over row-major `points` of dimension `dim`.
    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!("{} values for dimension {dim}", points.len())));
        }
        Ok(Self { dim, points, weights: None })
    }

    pub fn weighted(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        let mut mu = Self::uniform(points, dim)?;
        if weights.len() != mu.len() {
            return Err(Error::DimensionMismatch(format!("{} weights for {} atoms", weights.len(), mu.len())));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidWeights("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidWeights(format!("sum is {total}")));
        }
        mu.weights = Some(weights);
        Ok(mu)
    }

    pub fn scalar(points: &[f64]) -> Result<Self> {
        Self::uniform(points.to_vec(), 1)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0 / self.len() as f64, |w| w[i])
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }
}

pub fn conditional_mean(mu: &EmpiricalMeasure) -> Vec<f64> {
    let mut mean = vec![0.0; mu.dim];
    for i in 0..mu.len() {
        let w = mu.weight(i);
        for (m, x) in mean.iter_mut().zip(mu.point(i)) {
            *m += w * x;
        }
    }
    mean
}

pub fn second_moment(mu: &EmpiricalMeasure) -> f64 {
    (0..mu.len()).map(|i| mu.weight(i) * mu.point(i).iter().map(|x| x * x).sum::<f64>()).sum()
}

fn sorted_atoms(mu: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = (0..mu.len()).map(|i| (mu.points[i], mu.weight(i))).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    atoms
}

/// Exact one-dimensional W2 distance. Equal-count uniform measures use the
/// sorted order statistics; anything else couples the quantile functions
/// directly, which is exact for arbitrary weights.
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != 1 || nu.dim != 1 {
        return Err(Error::DimensionMismatch(format!("W2 is one-dimensional, got {} and {}", mu.dim, nu.dim)));
    }
    let a = sorted_atoms(mu);
    let b = sorted_atoms(nu);
    if mu.is_uniform() && nu.is_uniform() && a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x.0 - y.0).powi(2)).sum();
        return Ok((s / a.len() as f64).sqrt());
    }
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        cost += mass * (a[i].0 - b[j].0).powi(2);
        ra -= mass;
        rb -= mass;
        if ra <= WEIGHT_TOL {
            i += 1;
            if i < a.len() {
                ra += a[i].1;
            }
        }
        if rb <= WEIGHT_TOL {
            j += 1;
            if j < b.len() {
                rb += b[j].1;
            }
        }
    }
    Ok(cost.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E1Report {
    pub lhs: f64,
    pub mid: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `|E xi1 - E xi2| <= W2(law xi1, law xi2) <= (E|xi1 - xi2|^2)^(1/2)` on paired
/// scalar samples.
pub fn check_e1_inequality(xi1: &[f64], xi2: &[f64]) -> Result<E1Report> {
    if xi1.len() != xi2.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} samples", xi1.len(), xi2.len())));
    }
    if xi1.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = xi1.len() as f64;
    let lhs = (xi1.iter().sum::<f64>() / n - xi2.iter().sum::<f64>() / n).abs();
    let mid = wasserstein2_1d(&EmpiricalMeasure::scalar(xi1)?, &EmpiricalMeasure::scalar(xi2)?)?;
    let rhs = (xi1.iter().zip(xi2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    let slack = 1e-12 * (1.0 + rhs);
    Ok(E1Report { lhs, mid, rhs, holds: lhs <= mid + slack && mid <= rhs + slack })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        let mu = EmpiricalMeasure::weighted(vec![0.0, 1.0, 2.0, 3.0], 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((conditional_mean(&mu)[0] - 2.0).abs() < 1e-12);
        assert_eq!(conditional_mean(&EmpiricalMeasure::scalar(&[-1.0, 1.0]).unwrap()), vec![0.0]);
        assert_eq!(conditional_mean(&EmpiricalMeasure::scalar(&[4.5]).unwrap()), vec![4.5]);
        assert_eq!(second_moment(&EmpiricalMeasure::scalar(&[0.0]).unwrap()), 0.0);
        assert_eq!(second_moment(&EmpiricalMeasure::scalar(&[-1.0, 1.0]).unwrap()), 1.0);
        assert_eq!(second_moment(&EmpiricalMeasure::uniform(vec![3.0, 4.0], 2).unwrap()), 25.0);
    }

    #[test]
    fn invalid_weights() {
        assert!(EmpiricalMeasure::weighted(vec![0.0, 1.0], 1, vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::weighted(vec![0.0, 1.0], 1, vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::uniform(vec![1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn w2_simple_cases() {
        let d = |a: &[f64], b: &[f64]| {
            wasserstein2_1d(&EmpiricalMeasure::scalar(a).unwrap(), &EmpiricalMeasure::scalar(b).unwrap()).unwrap()
        };
        assert_eq!(d(&[1.0, 5.0], &[5.0, 1.0]), 0.0);
        assert_eq!(d(&[2.0], &[-1.5]), 3.5);
        // {0,1,2} vs {1,2,4}: sorted pairing costs 1 + 1 + 4.
        assert!((d(&[0.0, 1.0, 2.0], &[1.0, 2.0, 4.0]) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn w2_general_weights_matches_replicated_atoms() {
        // Weights 1/4, 3/4 equal the uniform measure on {0, 1, 1, 1}.
        let mu = EmpiricalMeasure::weighted(vec![0.0, 1.0], 1, vec![0.25, 0.75]).unwrap();
        let nu = EmpiricalMeasure::scalar(&[2.0, 3.0]).unwrap();
        let rep = EmpiricalMeasure::scalar(&[0.0, 1.0, 1.0, 1.0]).unwrap();
        let nu_rep = EmpiricalMeasure::scalar(&[2.0, 2.0, 3.0, 3.0]).unwrap();
        let a = wasserstein2_1d(&mu, &nu).unwrap();
        let b = wasserstein2_1d(&rep, &nu_rep).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(wasserstein2_1d(&EmpiricalMeasure::uniform(vec![0.0, 0.0], 2).unwrap(), &nu).is_err());
    }

    #[test]
    fn e1_examples() {
        let r = check_e1_inequality(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.lhs, r.mid, r.rhs, r.holds), (0.0, 0.0, 0.0, true));
        let r = check_e1_inequality(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 1.0));
        assert!((r.mid - 1.0).abs() < 1e-15 && r.holds);
    }
}
