//! Pooled least-squares projection used by the backward recursion.
//!
//! Features at a node are polynomials in the particle state `x` and the
//! scenario mean `m`; samples are grouped by regime when the problem depends on
//! it. Degree-one features form a prefix of the degree-two list, so downgrading
//! the basis is a truncation.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::linalg::psd_solve;

const RCOND: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Basis {
    pub degree: u8,
    pub use_mean: bool,
    pub n: usize,
}

impl Basis {
    pub fn len_for(&self, degree: u8) -> usize {
        let n = self.n;
        let k = if self.use_mean { 2 * n } else { n };
        if degree <= 1 {
            1 + k
        } else {
            1 + k + k * (k + 1) / 2
        }
    }

    pub fn len(&self) -> usize {
        self.len_for(self.degree)
    }

    pub fn fill(&self, x: &[f64], m: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        let k = if self.use_mean { 2 * self.n } else { self.n };
        let v = |i: usize| if i < self.n { x[i] } else { m[i - self.n] };
        for i in 0..k {
            out[1 + i] = v(i);
        }
        if self.degree >= 2 {
            let mut idx = 1 + k;
            for i in 0..k {
                for j in i..k {
                    out[idx] = v(i) * v(j);
                    idx += 1;
                }
            }
        }
    }
}

/// Features of every sample at one node.
pub(crate) struct Design {
    pub p: usize,
    pub p_low: usize,
    /// per scenario, `particles x p`
    pub feats: Vec<Vec<f64>>,
    /// per scenario
    pub group: Vec<usize>,
    pub groups: usize,
    pub particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct FitInfo {
    pub condition: f64,
    pub downgraded: bool,
    pub truncated: bool,
    pub samples: usize,
}

/// Which particles enter a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Fold {
    All,
    Parity(usize),
}

impl Fold {
    #[inline]
    fn contains(self, p: usize) -> bool {
        match self {
            Fold::All => true,
            Fold::Parity(f) => p % 2 == f,
        }
    }
}

pub(crate) struct Fit {
    /// per group, `p x targets`; `None` for groups without samples
    pub coef: Vec<Option<DMatrix<f64>>>,
    pub info: Vec<FitInfo>,
}

impl Design {
    /// Least squares of `targets` (per scenario, `particles x t`) on the
    /// features, restricted to the samples of `fold` and optionally to a subset
    /// of scenarios.
    pub fn fit(&self, targets: &[Vec<f64>], t: usize, fold: Fold, cond_max: f64) -> Fit {
        let p = self.p;
        // Means first so the intercept is handled exactly and the Gram matrix
        // of the centred features stays well conditioned.
        let sums: Vec<(usize, Vec<f64>, Vec<f64>, usize)> = (0..self.feats.len())
            .into_par_iter()
            .map(|s| {
                let mut fs = vec![0.0; p];
                let mut ys = vec![0.0; t];
                let mut cnt = 0;
                for q in (0..self.particles).filter(|&q| fold.contains(q)) {
                    cnt += 1;
                    for (a, v) in fs.iter_mut().zip(&self.feats[s][q * p..(q + 1) * p]) {
                        *a += v;
                    }
                    for (a, v) in ys.iter_mut().zip(&targets[s][q * t..(q + 1) * t]) {
                        *a += v;
                    }
                }
                (self.group[s], fs, ys, cnt)
            })
            .collect();
        let mut fmean = vec![vec![0.0; p]; self.groups];
        let mut ymean = vec![vec![0.0; t]; self.groups];
        let mut counts = vec![0usize; self.groups];
        for (grp, fs, ys, c) in &sums {
            for (a, v) in fmean[*grp].iter_mut().zip(fs) {
                *a += v;
            }
            for (a, v) in ymean[*grp].iter_mut().zip(ys) {
                *a += v;
            }
            counts[*grp] += c;
        }
        for g in 0..self.groups {
            if counts[g] > 0 {
                let c = counts[g] as f64;
                fmean[g].iter_mut().for_each(|v| *v /= c);
                ymean[g].iter_mut().for_each(|v| *v /= c);
            }
        }
        let pc = p - 1;
        let parts: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..self.feats.len())
            .into_par_iter()
            .map(|s| {
                let grp = self.group[s];
                let (fm, ym) = (&fmean[grp], &ymean[grp]);
                let mut g = vec![0.0; pc * pc];
                let mut b = vec![0.0; pc * t];
                let mut phi = vec![0.0; pc];
                let mut yc = vec![0.0; t];
                for q in (0..self.particles).filter(|&q| fold.contains(q)) {
                    let row = &self.feats[s][q * p..(q + 1) * p];
                    for i in 0..pc {
                        phi[i] = row[i + 1] - fm[i + 1];
                    }
                    for c in 0..t {
                        yc[c] = targets[s][q * t + c] - ym[c];
                    }
                    for i in 0..pc {
                        let pi = phi[i];
                        for j in i..pc {
                            g[i * pc + j] += pi * phi[j];
                        }
                        for c in 0..t {
                            b[i * t + c] += pi * yc[c];
                        }
                    }
                }
                (grp, g, b)
            })
            .collect();
        let mut grams = vec![vec![0.0; pc * pc]; self.groups];
        let mut rhs = vec![vec![0.0; pc * t]; self.groups];
        for (grp, g, b) in parts {
            for (a, v) in grams[grp].iter_mut().zip(&g) {
                *a += v;
            }
            for (a, v) in rhs[grp].iter_mut().zip(&b) {
                *a += v;
            }
        }
        let mut coef = Vec::with_capacity(self.groups);
        let mut info = Vec::with_capacity(self.groups);
        for grp in 0..self.groups {
            if counts[grp] == 0 {
                coef.push(None);
                info.push(FitInfo::default());
                continue;
            }
            let gm = DMatrix::from_fn(pc, pc, |i, j| if i <= j { grams[grp][i * pc + j] } else { grams[grp][j * pc + i] });
            let bm = DMatrix::from_fn(pc, t, |i, c| rhs[grp][i * t + c]);
            let (mut beta, mut cond) = if pc > 0 { psd_solve(&gm, &bm, RCOND) } else { (DMatrix::zeros(0, t), 1.0) };
            let mut downgraded = false;
            let low = self.p_low - 1;
            if cond > cond_max && low < pc {
                let (b_low, c_low) =
                    psd_solve(&gm.view((0, 0), (low, low)).into_owned(), &bm.rows(0, low).into_owned(), RCOND);
                beta = DMatrix::zeros(pc, t);
                beta.rows_mut(0, low).copy_from(&b_low);
                cond = c_low;
                downgraded = true;
            }
            let mut sol = DMatrix::zeros(p, t);
            for c in 0..t {
                let mut icpt = ymean[grp][c];
                for i in 0..pc {
                    sol[(i + 1, c)] = beta[(i, c)];
                    icpt -= fmean[grp][i + 1] * beta[(i, c)];
                }
                sol[(0, c)] = icpt;
            }
            info.push(FitInfo { condition: cond, downgraded, truncated: cond > cond_max, samples: counts[grp] });
            coef.push(Some(sol));
        }
        Fit { coef, info }
    }

    /// Fitted values for every sample of scenario `s` into `out` (`particles x t`).
    pub fn predict_into(&self, fit: &Fit, s: usize, t: usize, out: &mut [f64]) {
        let p = self.p;
        let f = &self.feats[s];
        match &fit.coef[self.group[s]] {
            None => out.fill(0.0),
            Some(c) => {
                for q in 0..self.particles {
                    let phi = &f[q * p..(q + 1) * p];
                    for col in 0..t {
                        let mut acc = 0.0;
                        for i in 0..p {
                            acc += phi[i] * c[(i, col)];
                        }
                        out[q * t + col] = acc;
                    }
                }
            }
        }
    }

    /// Fitted values where fold `f` particles are predicted by `fits[f]`.
    pub fn predict_cross(&self, fits: &[Fit; 2], s: usize, t: usize, out: &mut [f64]) {
        let mut tmp = vec![0.0; self.particles * t];
        for (f, fit) in fits.iter().enumerate() {
            self.predict_into(fit, s, t, &mut tmp);
            for q in (0..self.particles).filter(|q| q % 2 != f) {
                out[q * t..(q + 1) * t].copy_from_slice(&tmp[q * t..(q + 1) * t]);
            }
        }
    }
}
