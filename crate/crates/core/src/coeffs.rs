//! Coefficients of the mean-field LQ control and game problems, the
//! cross-term-eliminated blocks, admissibility constants and structural checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{inverse, lambda_max, lambda_min, max_abs, spectral_norm};

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
pub const DEFAULT_PD_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    /// state
    pub n: usize,
    /// control
    pub m: usize,
    /// idiosyncratic Brownian motion
    pub d: usize,
    /// common Brownian motion
    pub d0: usize,
    /// regimes
    pub m0: usize,
}

impl Dims {
    pub fn scalar(m0: usize) -> Self {
        Self { n: 1, m: 1, d: 1, d0: 1, m0 }
    }

    /// Length of a packed adjoint `(y, z, z0)`.
    pub fn theta_len(&self) -> usize {
        self.n * (1 + self.d + self.d0)
    }
}

/// All data of one regime on one time piece. Diffusion blocks act on stacked
/// columns: `C x` is the `n*d` vector `[C_1 x; ...; C_d x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqBlocks {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub m_bar: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub n_bar: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub s_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_bar: DMatrix<f64>,
    /// drift offset `b(s)`
    pub drift: DVector<f64>,
    /// idiosyncratic diffusion offset `sigma(s)`, length `n*d`
    pub sigma: DVector<f64>,
    /// common diffusion offset `gamma(s)`, length `n*d0`
    pub gamma: DVector<f64>,
    pub q_lin: DVector<f64>,
    pub q_bar_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
    pub r_bar_lin: DVector<f64>,
}

impl LqBlocks {
    pub fn zeros(dims: Dims) -> Self {
        let Dims { n, m, d, d0, .. } = dims;
        let z = DMatrix::zeros;
        Self {
            a: z(n, n),
            a_bar: z(n, n),
            b: z(n, m),
            b_bar: z(n, m),
            c: z(n * d, n),
            c_bar: z(n * d, n),
            d: z(n * d, m),
            d_bar: z(n * d, m),
            m: z(n * d0, n),
            m_bar: z(n * d0, n),
            n: z(n * d0, m),
            n_bar: z(n * d0, m),
            q: z(n, n),
            q_bar: z(n, n),
            s: z(m, n),
            s_bar: z(m, n),
            r: z(m, m),
            r_bar: z(m, m),
            drift: DVector::zeros(n),
            sigma: DVector::zeros(n * d),
            gamma: DVector::zeros(n * d0),
            q_lin: DVector::zeros(n),
            q_bar_lin: DVector::zeros(n),
            r_lin: DVector::zeros(m),
            r_bar_lin: DVector::zeros(m),
        }
    }

    /// Scalar blocks with `R = 1` and everything else zero.
    pub fn scalar_unit_r() -> Self {
        let mut b = Self::zeros(Dims::scalar(1));
        b.r[(0, 0)] = 1.0;
        b
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        let Dims { n, m, d, d0, .. } = dims;
        let expected: [(&str, &DMatrix<f64>, usize, usize); 18] = [
            ("A", &self.a, n, n),
            ("Abar", &self.a_bar, n, n),
            ("B", &self.b, n, m),
            ("Bbar", &self.b_bar, n, m),
            ("C", &self.c, n * d, n),
            ("Cbar", &self.c_bar, n * d, n),
            ("D", &self.d, n * d, m),
            ("Dbar", &self.d_bar, n * d, m),
            ("M", &self.m, n * d0, n),
            ("Mbar", &self.m_bar, n * d0, n),
            ("N", &self.n, n * d0, m),
            ("Nbar", &self.n_bar, n * d0, m),
            ("Q", &self.q, n, n),
            ("Qbar", &self.q_bar, n, n),
            ("S", &self.s, m, n),
            ("Sbar", &self.s_bar, m, n),
            ("R", &self.r, m, m),
            ("Rbar", &self.r_bar, m, m),
        ];
        for (name, mat, r, c) in expected {
            if mat.shape() != (r, c) {
                return Err(Error::DimensionMismatch(format!("{name} is {:?}, expected ({r}, {c})", mat.shape())));
            }
        }
        for (name, v, len) in [
            ("b", &self.drift, n),
            ("sigma", &self.sigma, n * d),
            ("gamma", &self.gamma, n * d0),
            ("q", &self.q_lin, n),
            ("qbar", &self.q_bar_lin, n),
            ("r", &self.r_lin, m),
            ("rbar", &self.r_bar_lin, m),
        ] {
            if v.len() != len {
                return Err(Error::DimensionMismatch(format!("{name} has length {}, expected {len}", v.len())));
            }
        }
        for (name, mat) in [("Q", &self.q), ("Qbar", &self.q_bar), ("R", &self.r), ("Rbar", &self.r_bar)] {
            if max_abs(&(mat - mat.transpose())) > SYM_TOL {
                return Err(Error::DimensionMismatch(format!("{name} is not symmetric")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqPiece {
    pub start: f64,
    pub regimes: Vec<LqBlocks>,
}

/// Piecewise-constant-in-time, per-regime LQ data.
#[derive(Debug, Clone, PartialEq)]
pub struct LqCoefficients {
    pub dims: Dims,
    pub pieces: Vec<LqPiece>,
}

impl LqCoefficients {
    pub fn new(dims: Dims, pieces: Vec<LqPiece>) -> Result<Self> {
        if dims.n == 0 || dims.m == 0 || dims.m0 == 0 {
            return Err(Error::DimensionMismatch("n, m and m0 must be positive".into()));
        }
        if pieces.is_empty() {
            return Err(Error::DimensionMismatch("no coefficient pieces".into()));
        }
        for w in pieces.windows(2) {
            if !(w[0].start < w[1].start) {
                return Err(Error::DimensionMismatch("breakpoints must be strictly increasing".into()));
            }
        }
        for p in &pieces {
            if p.regimes.len() != dims.m0 {
                return Err(Error::DimensionMismatch(format!("{} regime blocks for m0 = {}", p.regimes.len(), dims.m0)));
            }
            for b in &p.regimes {
                b.validate(dims)?;
            }
        }
        Ok(Self { dims, pieces })
    }

    /// Same blocks in every regime, one time piece.
    pub fn homogeneous(dims: Dims, blocks: LqBlocks) -> Result<Self> {
        Self::new(dims, vec![LqPiece { start: f64::NEG_INFINITY, regimes: vec![blocks; dims.m0] }])
    }

    #[inline]
    pub fn piece_index(&self, t: f64) -> usize {
        self.pieces.iter().rposition(|p| p.start <= t + 1e-12).unwrap_or(0)
    }

    #[inline]
    pub fn blocks(&self, t: f64, regime: usize) -> &LqBlocks {
        &self.pieces[self.piece_index(t)].regimes[regime]
    }

    /// True when every regime carries identical data on every piece.
    pub fn regime_independent(&self) -> bool {
        self.pieces.iter().all(|p| p.regimes.iter().all(|b| b == &p.regimes[0]))
    }

    pub fn map_blocks(&self, f: impl Fn(&LqBlocks) -> LqBlocks) -> Self {
        Self {
            dims: self.dims,
            pieces: self
                .pieces
                .iter()
                .map(|p| LqPiece { start: p.start, regimes: p.regimes.iter().map(&f).collect() })
                .collect(),
        }
    }
}

/// Cross-term-eliminated blocks of one regime/piece, with the two inverses the
/// Hamiltonian needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedBlocks {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub m_bar: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub q_bar_lin: DVector<f64>,
    pub r_inv: DMatrix<f64>,
    pub rr_inv: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformedCoefficients {
    pub dims: Dims,
    pub starts: Vec<f64>,
    pub pieces: Vec<Vec<TransformedBlocks>>,
}

impl TransformedCoefficients {
    pub fn blocks(&self, piece: usize, regime: usize) -> &TransformedBlocks {
        &self.pieces[piece][regime]
    }

    fn iter(&self) -> impl Iterator<Item = &TransformedBlocks> {
        self.pieces.iter().flatten()
    }
}

fn inverses(b: &LqBlocks, piece: usize, regime: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r_inv = inverse(&b.r).ok_or_else(|| Error::Singular { block: format!("R (piece {piece}, regime {regime})") })?;
    let rr_inv = inverse(&(&b.r + &b.r_bar))
        .ok_or_else(|| Error::Singular { block: format!("R+Rbar (piece {piece}, regime {regime})") })?;
    Ok((r_inv, rr_inv))
}

fn transform_blocks(b: &LqBlocks, piece: usize, regime: usize) -> Result<TransformedBlocks> {
    let (r_inv, rr_inv) = inverses(b, piece, regime)?;
    let rs = &r_inv * &b.s;
    let ss = &b.s + &b.s_bar;
    let rrss = &rr_inv * &ss;
    // A - B R^-1 S and Abar + B R^-1 S - (B + Bbar)(R + Rbar)^-1 (S + Sbar), and
    // the same pattern for (C, D) and (M, N).
    let script = |x: &DMatrix<f64>, xbar: &DMatrix<f64>, u: &DMatrix<f64>, ubar: &DMatrix<f64>| {
        (x - u * &rs, xbar + u * &rs - (u + ubar) * &rrss)
    };
    let (a, a_bar) = script(&b.a, &b.a_bar, &b.b, &b.b_bar);
    let (c, c_bar) = script(&b.c, &b.c_bar, &b.d, &b.d_bar);
    let (m, m_bar) = script(&b.m, &b.m_bar, &b.n, &b.n_bar);
    let st_rinv = b.s.transpose() * &r_inv;
    let q = &b.q - &st_rinv * &b.s;
    let q_bar = &b.q_bar + &st_rinv * &b.s - ss.transpose() * &rrss;
    let q_lin = &b.q_lin - &st_rinv * &b.r_lin;
    let q_bar_lin = &b.q_bar_lin + &st_rinv * &b.r_lin - ss.transpose() * &rr_inv * (&b.r_lin + &b.r_bar_lin);
    Ok(TransformedBlocks { a, a_bar, c, c_bar, m, m_bar, q, q_bar, q_lin, q_bar_lin, r_inv, rr_inv })
}

pub fn transform_cross_terms(c: &LqCoefficients) -> Result<TransformedCoefficients> {
    let mut pieces = Vec::with_capacity(c.pieces.len());
    for (pi, p) in c.pieces.iter().enumerate() {
        pieces.push(p.regimes.iter().enumerate().map(|(ri, b)| transform_blocks(b, pi, ri)).collect::<Result<_>>()?);
    }
    Ok(TransformedCoefficients { dims: c.dims, starts: c.pieces.iter().map(|p| p.start).collect(), pieces })
}

/// `u -> u + R^-1 S (x - m) + (R + Rbar)^-1 (S + Sbar) m`, written into `out`.
pub fn transform_control(b: &LqBlocks, tb: &TransformedBlocks, x: &[f64], mean_x: &[f64], u: &[f64], out: &mut [f64]) {
    shift_control(b, tb, x, mean_x, u, out, 1.0)
}

/// Inverse of [`transform_control`].
pub fn untransform_control(b: &LqBlocks, tb: &TransformedBlocks, x: &[f64], mean_x: &[f64], v: &[f64], out: &mut [f64]) {
    shift_control(b, tb, x, mean_x, v, out, -1.0)
}

fn shift_control(b: &LqBlocks, tb: &TransformedBlocks, x: &[f64], mean_x: &[f64], u: &[f64], out: &mut [f64], sign: f64) {
    let fluct: DVector<f64> = DVector::from_iterator(x.len(), x.iter().zip(mean_x).map(|(a, m)| a - m));
    let mean = DVector::from_column_slice(mean_x);
    let shift = &tb.r_inv * (&b.s * fluct) + &tb.rr_inv * ((&b.s + &b.s_bar) * mean);
    for ((o, ui), s) in out.iter_mut().zip(u).zip(shift.iter()) {
        *o = ui + sign * s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaBounds {
    pub kappa: f64,
    pub kappa_star: f64,
    pub kappa_x: f64,
    pub kappa_xmu: f64,
    pub kappa_y: f64,
    pub kappa_ynu: f64,
    #[serde(rename = "K")]
    pub k_const: f64,
    pub kappa_bar: f64,
    pub kappa_under: f64,
    pub feasible_kappa: f64,
    pub window_ok: bool,
}

impl KappaBounds {
    fn assemble(kappa: f64, kappa_star: f64, kx: f64, kxmu: f64, half_amax: f64, kynu: f64, k_const: f64) -> Self {
        let kappa_y = kappa + half_amax;
        let kappa_bar = (-kx - kxmu.max(0.0)).min(kappa_star);
        let kappa_under = 2.0 * (kappa_y + kynu.max(0.0) + k_const);
        let feasible_kappa = -kx / 2.0 + kappa_y;
        Self {
            kappa,
            kappa_star,
            kappa_x: kx,
            kappa_xmu: kxmu,
            kappa_y,
            kappa_ynu: kynu,
            k_const,
            kappa_bar,
            kappa_under,
            feasible_kappa,
            window_ok: feasible_kappa > kappa_under && feasible_kappa < kappa_bar,
        }
    }
}

fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * x
}

fn sq_norm(x: &DMatrix<f64>) -> f64 {
    spectral_norm(x).powi(2)
}

fn fold_max(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, f64::max)
}

pub fn compute_kappa_bounds(tc: &TransformedCoefficients, kappa: f64, kappa_star: f64) -> KappaBounds {
    let kx = fold_max(tc.iter().map(|b| lambda_max(&(&b.a + b.a.transpose() + gram(&b.c) + gram(&b.m)))));
    let kxmu = fold_max(tc.iter().map(|b| {
        let cc = &b.c + &b.c_bar;
        let mm = &b.m + &b.m_bar;
        lambda_max(&(&b.a_bar + b.a_bar.transpose() + gram(&cc) - gram(&b.c) + gram(&mm) - gram(&b.m)))
    }));
    let half_amax = 0.5 * fold_max(tc.iter().map(|b| lambda_max(&(&b.a + b.a.transpose()))));
    let kynu = 0.5 * fold_max(tc.iter().map(|b| lambda_max(&(&b.a_bar + b.a_bar.transpose()))));
    let k_const = fold_max(tc.iter().map(|b| {
        sq_norm(&b.q) + sq_norm(&b.c) + sq_norm(&b.m) + sq_norm(&b.q_bar).max(sq_norm(&b.c_bar)).max(sq_norm(&b.m_bar))
    }));
    KappaBounds::assemble(kappa, kappa_star, kx, kxmu, half_amax, kynu, k_const)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdCheck {
    pub block: String,
    pub piece: usize,
    pub regime: usize,
    pub min_eigenvalue: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdReport {
    pub delta: f64,
    pub checks: Vec<PdCheck>,
    pub pass: bool,
}

impl PdReport {
    pub fn first_failure(&self) -> Option<&PdCheck> {
        self.checks.iter().find(|c| !c.pass)
    }

    pub fn into_result(self) -> Result<Self> {
        match self.first_failure() {
            Some(c) => Err(Error::PdViolation {
                block: c.block.clone(),
                piece: c.piece,
                regime: c.regime,
                min_eigenvalue: c.min_eigenvalue,
            }),
            None => Ok(self),
        }
    }

    fn push(&mut self, block: &str, piece: usize, regime: usize, mat: &DMatrix<f64>, threshold: f64) {
        let min_eigenvalue = lambda_min(mat);
        let pass = min_eigenvalue >= threshold;
        self.pass &= pass;
        self.checks.push(PdCheck { block: block.to_string(), piece, regime, min_eigenvalue, threshold, pass });
    }
}

fn block2(q: &DMatrix<f64>, upper: &DMatrix<f64>, lower: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (q.nrows(), r.nrows());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(q);
    out.view_mut((0, n), (n, m)).copy_from(upper);
    out.view_mut((n, 0), (m, n)).copy_from(lower);
    out.view_mut((n, n), (m, m)).copy_from(r);
    out
}

pub fn check_positive_definiteness(c: &LqCoefficients, delta: f64) -> PdReport {
    let mut rep = PdReport { delta, checks: Vec::new(), pass: true };
    for (pi, p) in c.pieces.iter().enumerate() {
        for (ri, b) in p.regimes.iter().enumerate() {
            let rr = &b.r + &b.r_bar;
            let ss = &b.s + &b.s_bar;
            rep.push("R", pi, ri, &b.r, delta);
            rep.push("R+Rbar", pi, ri, &rr, delta);
            rep.push("[[Q,S^T],[S,R]]", pi, ri, &block2(&b.q, &b.s.transpose(), &b.s, &b.r), -PSD_TOL);
            rep.push(
                "[[Q+Qbar,(S+Sbar)^T],[S+Sbar,R+Rbar]]",
                pi,
                ri,
                &block2(&(&b.q + &b.q_bar), &ss.transpose(), &ss, &rr),
                -PSD_TOL,
            );
        }
    }
    rep
}

/// Game data: the LQ blocks (their `s_bar` is unused) plus the two mean-field
/// cross blocks and the structure constant `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameCoefficients {
    pub lq: LqCoefficients,
    /// `[piece][regime]`
    pub s1_bar: Vec<Vec<DMatrix<f64>>>,
    pub s2_bar: Vec<Vec<DMatrix<f64>>>,
    pub k: f64,
}

impl GameCoefficients {
    pub fn new(lq: LqCoefficients, s1_bar: Vec<Vec<DMatrix<f64>>>, s2_bar: Vec<Vec<DMatrix<f64>>>, k: f64) -> Result<Self> {
        let (m, n) = (lq.dims.m, lq.dims.n);
        for s in [&s1_bar, &s2_bar] {
            if s.len() != lq.pieces.len() || s.iter().any(|p| p.len() != lq.dims.m0 || p.iter().any(|x| x.shape() != (m, n))) {
                return Err(Error::DimensionMismatch("S1bar/S2bar must be m x n per piece and regime".into()));
            }
        }
        Ok(Self { lq, s1_bar, s2_bar, k })
    }

    /// Zero `S1bar`, `S2bar` and `k = 0`.
    pub fn from_lq(lq: LqCoefficients) -> Self {
        let z = vec![vec![DMatrix::zeros(lq.dims.m, lq.dims.n); lq.dims.m0]; lq.pieces.len()];
        Self { s1_bar: z.clone(), s2_bar: z, lq, k: 0.0 }
    }

    pub fn regime_independent(&self) -> bool {
        self.lq.regime_independent()
            && [&self.s1_bar, &self.s2_bar].iter().all(|s| s.iter().all(|p| p.iter().all(|x| x == &p[0])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureCheck {
    pub name: String,
    pub piece: usize,
    pub regime: usize,
    pub deviation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameStructureReport {
    pub k: f64,
    pub checks: Vec<StructureCheck>,
    pub pass: bool,
}

impl GameStructureReport {
    pub fn first_failure(&self) -> Option<&StructureCheck> {
        self.checks.iter().find(|c| !c.pass)
    }
}

pub fn check_game_structure(g: &GameCoefficients, delta: f64) -> GameStructureReport {
    let mut checks = Vec::new();
    let k = g.k;
    let mut add = |name: &str, piece, regime, deviation: f64, tol: f64| {
        checks.push(StructureCheck { name: name.into(), piece, regime, deviation, pass: deviation <= tol });
    };
    add("k >= -1", 0, 0, (-1.0 - k).max(0.0), 0.0);
    for (pi, p) in g.lq.pieces.iter().enumerate() {
        for (ri, b) in p.regimes.iter().enumerate() {
            let (s1, s2) = (&g.s1_bar[pi][ri], &g.s2_bar[pi][ri]);
            let s1i = max_abs(&b.a_bar).max(max_abs(&b.c_bar)).max(max_abs(&b.m_bar));
            add("(S1)-(i) Abar = Cbar = Mbar = 0", pi, ri, s1i, SYM_TOL);
            let s1ii = max_abs(&(&b.b_bar - &b.b * k))
                .max(max_abs(&(&b.d_bar - &b.d * k)))
                .max(max_abs(&(&b.n_bar - &b.n * k)));
            add("(S1)-(ii) Bbar = kB, Dbar = kD, Nbar = kN", pi, ri, s1ii, SYM_TOL);
            add("(S2)-(ii) kS + (k+1)S1bar - S2bar = 0", pi, ri, max_abs(&(&b.s * k + s1 * (k + 1.0) - s2)), SYM_TOL);
            let rr = &b.r + &b.r_bar;
            add("(PD)_G R >> 0", pi, ri, (delta - lambda_min(&b.r)).max(0.0), 0.0);
            add(
                "(PD)_G [[Q,S^T],[S,R]] >= 0",
                pi,
                ri,
                (-lambda_min(&block2(&b.q, &b.s.transpose(), &b.s, &b.r))).max(0.0),
                PSD_TOL,
            );
            add("(PD)_G R+Rbar >> 0", pi, ri, (delta - lambda_min(&rr)).max(0.0), 0.0);
            let asym = block2(&(&b.q + &b.q_bar), &(&b.s + s2).transpose(), &(&b.s + s1), &rr);
            add("(PD)_G [[Q+Qbar,(S+S2bar)^T],[S+S1bar,R+Rbar]] >= 0", pi, ri, (-lambda_min(&asym)).max(0.0), PSD_TOL);
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    GameStructureReport { k, checks, pass }
}

/// Script, tilde and blackboard blocks of the equilibrium system.
#[derive(Debug, Clone, PartialEq)]
pub struct GameBlocks {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub a_tilde: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub m_tilde: DMatrix<f64>,
    pub q_tilde: DMatrix<f64>,
    pub a_bb: DMatrix<f64>,
    pub c_bb: DMatrix<f64>,
    pub m_bb: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub rr_inv: DMatrix<f64>,
}

pub fn game_blocks(g: &GameCoefficients) -> Result<Vec<Vec<GameBlocks>>> {
    let mut out = Vec::new();
    for (pi, p) in g.lq.pieces.iter().enumerate() {
        let mut row = Vec::new();
        for (ri, b) in p.regimes.iter().enumerate() {
            let (r_inv, rr_inv) = inverses(b, pi, ri)?;
            let (s1, s2) = (&g.s1_bar[pi][ri], &g.s2_bar[pi][ri]);
            let rs = &r_inv * &b.s;
            let rrs1 = &rr_inv * (&b.s + s1);
            let rrs2 = &rr_inv * (&b.s + s2);
            let tilde = |xbar: &DMatrix<f64>, u: &DMatrix<f64>, ubar: &DMatrix<f64>| xbar + u * &rs - (u + ubar) * &rrs1;
            let bb = |u: &DMatrix<f64>| u * &rs - u * &rrs2;
            row.push(GameBlocks {
                a: &b.a - &b.b * &rs,
                c: &b.c - &b.d * &rs,
                m: &b.m - &b.n * &rs,
                q: &b.q - b.s.transpose() * &rs,
                a_tilde: tilde(&b.a_bar, &b.b, &b.b_bar),
                c_tilde: tilde(&b.c_bar, &b.d, &b.d_bar),
                m_tilde: tilde(&b.m_bar, &b.n, &b.n_bar),
                q_tilde: &b.q_bar + b.s.transpose() * &rs - (&b.s + s2).transpose() * &rrs1,
                a_bb: bb(&b.b),
                c_bb: bb(&b.d),
                m_bb: bb(&b.n),
                r_inv,
                rr_inv,
            });
        }
        out.push(row);
    }
    Ok(out)
}

pub fn compute_game_kappa_bounds(g: &GameCoefficients, kappa: f64, kappa_star: f64) -> Result<KappaBounds> {
    let blocks = game_blocks(g)?;
    let it = || blocks.iter().flatten();
    let kx = fold_max(it().map(|b| lambda_max(&(&b.a + b.a.transpose() + gram(&b.c) + gram(&b.m)))));
    let kxnu = fold_max(it().map(|b| {
        let cc = &b.c + &b.c_tilde;
        let mm = &b.m + &b.m_tilde;
        lambda_max(&(&b.a_tilde + b.a_tilde.transpose() + gram(&cc) - gram(&b.c) + gram(&mm) - gram(&b.m)))
    }));
    let half_amax = 0.5 * fold_max(it().map(|b| lambda_max(&(&b.a + b.a.transpose()))));
    let kynu = 0.5 * fold_max(it().map(|b| lambda_max(&(&b.a_bb + b.a_bb.transpose()))));
    let k_const = fold_max(it().map(|b| {
        sq_norm(&b.q) + sq_norm(&b.c) + sq_norm(&b.m) + sq_norm(&b.q_tilde).max(sq_norm(&b.c_bb)).max(sq_norm(&b.m_bb))
    }));
    Ok(KappaBounds::assemble(kappa, kappa_star, kx, kxnu, half_amax, kynu, k_const))
}
