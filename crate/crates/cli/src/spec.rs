//! Problem-spec JSON: parsing and conversion into core types.
//!
//! Regimes are numbered from 1 in files. Omitted coefficient blocks are zero,
//! except `R`, which defaults to the identity.

use std::path::Path;

use mfswitch_core::coeffs::{GameCoefficients, LqBlocks, LqCoefficients, LqPiece};
use mfswitch_core::{Dims, GameMode, GeneratorMatrix, InitialCondition, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Control,
    Game,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub struct DimsSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub d0: usize,
    pub m0: usize,
}

impl From<DimsSpec> for Dims {
    fn from(d: DimsSpec) -> Self {
        Dims { n: d.n, m: d.m, d: d.d, d0: d.d0, m0: d.m0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSpec {
    #[serde(default)]
    pub t: f64,
    #[serde(rename = "T", default)]
    pub end: Option<f64>,
    #[serde(default)]
    pub tail_tol: Option<f64>,
}

/// A matrix as rows, or a number meaning that multiple of the identity.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

/// A vector, or a number broadcast to every entry.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Items(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct BlockSpec {
    pub A: Option<MatrixSpec>,
    pub Abar: Option<MatrixSpec>,
    pub B: Option<MatrixSpec>,
    pub Bbar: Option<MatrixSpec>,
    pub C: Option<MatrixSpec>,
    pub Cbar: Option<MatrixSpec>,
    pub D: Option<MatrixSpec>,
    pub Dbar: Option<MatrixSpec>,
    pub M: Option<MatrixSpec>,
    pub Mbar: Option<MatrixSpec>,
    pub N: Option<MatrixSpec>,
    pub Nbar: Option<MatrixSpec>,
    pub Q: Option<MatrixSpec>,
    pub Qbar: Option<MatrixSpec>,
    pub S: Option<MatrixSpec>,
    pub Sbar: Option<MatrixSpec>,
    pub R: Option<MatrixSpec>,
    pub Rbar: Option<MatrixSpec>,
    pub b: Option<VectorSpec>,
    pub sigma: Option<VectorSpec>,
    pub gamma: Option<VectorSpec>,
    pub q: Option<VectorSpec>,
    pub qbar: Option<VectorSpec>,
    pub r: Option<VectorSpec>,
    pub rbar: Option<VectorSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PieceSpec {
    pub start: f64,
    pub regimes: Vec<BlockSpec>,
}

/// Either one set of per-regime blocks for all time, or time pieces.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSpec {
    #[serde(default)]
    pub regimes: Option<Vec<BlockSpec>>,
    #[serde(default)]
    pub pieces: Option<Vec<PieceSpec>>,
}

/// One matrix for everything, one per regime, or one per piece and regime.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum CrossSpec {
    All(MatrixSpec),
    PerRegime(Vec<Vec<Vec<f64>>>),
    PerPiece(Vec<Vec<Vec<Vec<f64>>>>),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct GameExtrasSpec {
    #[serde(default)]
    pub S1bar: Option<CrossSpec>,
    #[serde(default)]
    pub S2bar: Option<CrossSpec>,
    #[serde(default)]
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialSpec {
    Constant(Vec<f64>),
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

fn default_tol() -> f64 {
    1e-6
}
fn default_max_iters() -> usize {
    60
}
fn default_damping() -> f64 {
    0.5
}
fn default_degree() -> u8 {
    2
}
fn default_export() -> usize {
    16
}
fn default_eps() -> Vec<f64> {
    vec![0.1, 0.3]
}
fn default_window() -> [f64; 2] {
    [0.1, 0.6]
}
fn default_mode() -> GameMode {
    GameMode::Direct
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSpec {
    pub dt: f64,
    pub particles: usize,
    pub scenarios: usize,
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub lambda_steps: usize,
    /// Picard damping
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// profile damping in iterate mode
    #[serde(default = "default_damping")]
    pub profile_damping: f64,
    #[serde(default = "default_mode")]
    pub mode: GameMode,
    #[serde(default = "default_degree")]
    pub basis_degree: u8,
    /// particles per scenario written to the CSV exports
    #[serde(default = "default_export")]
    pub export_particles: usize,
    /// random deviation directions; defaults to 20 for games and 0 for control
    #[serde(default)]
    pub deviation_directions: Option<usize>,
    #[serde(default = "default_eps")]
    pub deviation_eps: Vec<f64>,
    /// fraction of the horizon used for the feedback-gain fit
    #[serde(default = "default_window")]
    pub gain_window: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub problem: ProblemKind,
    pub dims: DimsSpec,
    #[serde(default)]
    pub generator: Option<Vec<Vec<f64>>>,
    /// 1-based
    #[serde(default = "one")]
    pub initial_regime: usize,
    #[serde(default)]
    pub x0: Option<InitialSpec>,
    pub horizon: HorizonSpec,
    pub kappa: f64,
    /// `null` or absent means no cap
    #[serde(default)]
    pub kappa_star: Option<f64>,
    #[serde(default)]
    pub coefficients: CoefficientsSpec,
    pub numerics: NumericsSpec,
    #[serde(default)]
    pub game_extras: Option<GameExtrasSpec>,
}

fn one() -> usize {
    1
}

/// Reads and parses a spec. Any failure here is a malformed input.
pub fn load(path: &Path) -> Result<(ProblemSpec, Vec<u8>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::malformed(format!("cannot read {}: {e}", path.display())))?;
    let spec = parse(&bytes)?;
    Ok((spec, bytes))
}

pub fn parse(bytes: &[u8]) -> Result<ProblemSpec, CliError> {
    let spec: ProblemSpec = serde_json::from_slice(bytes).map_err(|e| CliError::malformed(format!("spec: {e}")))?;
    if let Some(v) = spec.schema_version {
        if v != SCHEMA_VERSION {
            return Err(CliError::malformed(format!("unsupported schema_version {v}")));
        }
    }
    let n = &spec.numerics;
    if !(n.dt > 0.0) || n.particles == 0 || n.scenarios == 0 {
        return Err(CliError::malformed("numerics: dt, particles and scenarios must be positive"));
    }
    if spec.horizon.end.is_some() == spec.horizon.tail_tol.is_some() {
        return Err(CliError::malformed("horizon: give exactly one of T and tail_tol"));
    }
    if spec.coefficients.regimes.is_some() && spec.coefficients.pieces.is_some() {
        return Err(CliError::malformed("coefficients: give regimes or pieces, not both"));
    }
    if !(0.0..=1.0).contains(&n.gain_window[0]) || !(n.gain_window[0] < n.gain_window[1] && n.gain_window[1] <= 1.0) {
        return Err(CliError::malformed("numerics.gain_window must satisfy 0 <= a < b <= 1"));
    }
    Ok(spec)
}

fn matrix(name: &str, spec: Option<&MatrixSpec>, rows: usize, cols: usize, default_identity: bool) -> Result<DMatrix<f64>, String> {
    match spec {
        None if default_identity && rows == cols => Ok(DMatrix::identity(rows, cols)),
        None => Ok(DMatrix::zeros(rows, cols)),
        Some(MatrixSpec::Scalar(v)) => {
            if rows != cols {
                return Err(format!("{name}: a scalar needs a square block, expected {rows}x{cols}"));
            }
            Ok(DMatrix::identity(rows, cols) * *v)
        }
        Some(MatrixSpec::Rows(r)) => rows_to_matrix(name, r, rows, cols),
    }
}

fn rows_to_matrix(name: &str, r: &[Vec<f64>], rows: usize, cols: usize) -> Result<DMatrix<f64>, String> {
    if r.len() != rows || r.iter().any(|row| row.len() != cols) {
        let got_cols = r.first().map_or(0, Vec::len);
        return Err(format!("{name} is {}x{got_cols}, expected {rows}x{cols}", r.len()));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| r[i][j]))
}

fn vector(name: &str, spec: Option<&VectorSpec>, len: usize) -> Result<DVector<f64>, String> {
    match spec {
        None => Ok(DVector::zeros(len)),
        Some(VectorSpec::Scalar(v)) => Ok(DVector::from_element(len, *v)),
        Some(VectorSpec::Items(v)) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(VectorSpec::Items(v)) => Err(format!("{name} has length {}, expected {len}", v.len())),
    }
}

fn blocks(b: &BlockSpec, dims: Dims) -> Result<LqBlocks, String> {
    let Dims { n, m, d, d0, .. } = dims;
    Ok(LqBlocks {
        a: matrix("A", b.A.as_ref(), n, n, false)?,
        a_bar: matrix("Abar", b.Abar.as_ref(), n, n, false)?,
        b: matrix("B", b.B.as_ref(), n, m, false)?,
        b_bar: matrix("Bbar", b.Bbar.as_ref(), n, m, false)?,
        c: matrix("C", b.C.as_ref(), n * d, n, false)?,
        c_bar: matrix("Cbar", b.Cbar.as_ref(), n * d, n, false)?,
        d: matrix("D", b.D.as_ref(), n * d, m, false)?,
        d_bar: matrix("Dbar", b.Dbar.as_ref(), n * d, m, false)?,
        m: matrix("M", b.M.as_ref(), n * d0, n, false)?,
        m_bar: matrix("Mbar", b.Mbar.as_ref(), n * d0, n, false)?,
        n: matrix("N", b.N.as_ref(), n * d0, m, false)?,
        n_bar: matrix("Nbar", b.Nbar.as_ref(), n * d0, m, false)?,
        q: matrix("Q", b.Q.as_ref(), n, n, false)?,
        q_bar: matrix("Qbar", b.Qbar.as_ref(), n, n, false)?,
        s: matrix("S", b.S.as_ref(), m, n, false)?,
        s_bar: matrix("Sbar", b.Sbar.as_ref(), m, n, false)?,
        r: matrix("R", b.R.as_ref(), m, m, true)?,
        r_bar: matrix("Rbar", b.Rbar.as_ref(), m, m, false)?,
        drift: vector("b", b.b.as_ref(), n)?,
        sigma: vector("sigma", b.sigma.as_ref(), n * d)?,
        gamma: vector("gamma", b.gamma.as_ref(), n * d0)?,
        q_lin: vector("q", b.q.as_ref(), n)?,
        q_bar_lin: vector("qbar", b.qbar.as_ref(), n)?,
        r_lin: vector("r", b.r.as_ref(), m)?,
        r_bar_lin: vector("rbar", b.rbar.as_ref(), m)?,
    })
}

/// Result of one dimension or consistency check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Core objects built from a spec.
#[derive(Debug, Clone)]
pub struct Built {
    pub dims: Dims,
    pub generator: GeneratorMatrix,
    /// 0-based
    pub initial_regime: usize,
    pub x0: InitialCondition,
    pub lq: LqCoefficients,
    pub game: Option<GameCoefficients>,
}

impl ProblemSpec {
    pub fn dims(&self) -> Dims {
        self.dims.into()
    }

    pub fn kappa_star(&self) -> f64 {
        self.kappa_star.unwrap_or(f64::INFINITY)
    }

    /// Runs every dimension check. `Built` is returned only if all pass.
    pub fn build(&self) -> (Vec<DimensionCheck>, Option<Built>) {
        let dims = self.dims();
        let mut checks = Vec::new();
        let mut record = |name: &str, r: Result<(), String>| {
            let pass = r.is_ok();
            checks.push(DimensionCheck { name: name.into(), pass, detail: r.err().unwrap_or_default() });
            pass
        };

        let ok_dims = record(
            "dims",
            if dims.n == 0 || dims.m == 0 || dims.m0 == 0 { Err("n, m and m0 must be positive".into()) } else { Ok(()) },
        );

        let generator = match &self.generator {
            None if dims.m0 == 1 => Ok(GeneratorMatrix::trivial()),
            None => Err(format!("m0 = {} needs a generator", dims.m0)),
            Some(rows) => GeneratorMatrix::new(rows.clone()).map_err(|e| e.to_string()).and_then(|g| {
                if g.m0() == dims.m0 {
                    Ok(g)
                } else {
                    Err(format!("generator is {0}x{0}, m0 = {1}", g.m0(), dims.m0))
                }
            }),
        };
        let ok_gen = record("generator", generator.as_ref().map(|_| ()).map_err(Clone::clone));

        let ok_regime = record(
            "initial_regime",
            if (1..=dims.m0).contains(&self.initial_regime) {
                Ok(())
            } else {
                Err(format!("initial_regime {} outside 1..={}", self.initial_regime, dims.m0))
            },
        );

        let x0 = match &self.x0 {
            None => Ok(InitialCondition::Constant(vec![0.0; dims.n])),
            Some(InitialSpec::Constant(x)) if x.len() == dims.n => Ok(InitialCondition::Constant(x.clone())),
            Some(InitialSpec::Gaussian { mean, std }) if mean.len() == dims.n && std.len() == dims.n => {
                if std.iter().any(|s| !(*s >= 0.0)) {
                    Err("x0.gaussian.std must be non-negative".to_string())
                } else {
                    Ok(InitialCondition::Gaussian { mean: mean.clone(), std: std.clone() })
                }
            }
            Some(_) => Err(format!("x0 must have length n = {}", dims.n)),
        };
        let ok_x0 = record("x0", x0.as_ref().map(|_| ()).map_err(Clone::clone));

        let lq = if ok_dims { self.lq(dims) } else { Err("skipped".into()) };
        let ok_lq = record("coefficients", lq.as_ref().map(|_| ()).map_err(Clone::clone));

        let game = match (self.problem, &lq) {
            (ProblemKind::Game, Ok(lq)) => Some(self.game(lq.clone())),
            (ProblemKind::Game, Err(_)) => Some(Err("skipped".into())),
            (ProblemKind::Control, _) => {
                if self.game_extras.is_some() {
                    Some(Err("game_extras given for a control problem".into()))
                } else {
                    None
                }
            }
        };
        let ok_game = match &game {
            Some(g) => record("game_extras", g.as_ref().map(|_| ()).map_err(Clone::clone)),
            None => true,
        };

        if !(ok_dims && ok_gen && ok_regime && ok_x0 && ok_lq && ok_game) {
            return (checks, None);
        }
        let built = Built {
            dims,
            generator: generator.expect("checked"),
            initial_regime: self.initial_regime - 1,
            x0: x0.expect("checked"),
            lq: lq.expect("checked"),
            game: game.map(|g| g.expect("checked")),
        };
        (checks, Some(built))
    }

    fn lq(&self, dims: Dims) -> Result<LqCoefficients, String> {
        let c = &self.coefficients;
        let pieces: Vec<(f64, &[BlockSpec])> = match (&c.regimes, &c.pieces) {
            (Some(r), None) => vec![(f64::NEG_INFINITY, r.as_slice())],
            (None, Some(p)) if !p.is_empty() => p.iter().map(|p| (p.start, p.regimes.as_slice())).collect(),
            (None, Some(_)) => return Err("pieces is empty".into()),
            (None, None) => return LqCoefficients::homogeneous(dims, blocks(&BlockSpec::default(), dims)?).map_err(|e| e.to_string()),
            (Some(_), Some(_)) => return Err("give regimes or pieces, not both".into()),
        };
        let mut out = Vec::with_capacity(pieces.len());
        for (pi, (start, regimes)) in pieces.into_iter().enumerate() {
            // a single block applies to every regime
            let regimes: Vec<LqBlocks> = if regimes.len() == 1 && dims.m0 > 1 {
                vec![blocks(&regimes[0], dims).map_err(|e| format!("piece {}: {e}", pi + 1))?; dims.m0]
            } else {
                regimes
                    .iter()
                    .enumerate()
                    .map(|(ri, b)| blocks(b, dims).map_err(|e| format!("piece {}, regime {}: {e}", pi + 1, ri + 1)))
                    .collect::<Result<_, _>>()?
            };
            out.push(LqPiece { start, regimes });
        }
        LqCoefficients::new(dims, out).map_err(|e| e.to_string())
    }

    fn game(&self, lq: LqCoefficients) -> Result<GameCoefficients, String> {
        let extras = self.game_extras.clone().unwrap_or(GameExtrasSpec { S1bar: None, S2bar: None, k: 0.0 });
        let (pieces, m0, m, n) = (lq.pieces.len(), lq.dims.m0, lq.dims.m, lq.dims.n);
        let expand = |name: &str, s: &Option<CrossSpec>| -> Result<Vec<Vec<DMatrix<f64>>>, String> {
            match s {
                None => Ok(vec![vec![DMatrix::zeros(m, n); m0]; pieces]),
                Some(CrossSpec::All(ms)) => Ok(vec![vec![matrix(name, Some(ms), m, n, false)?; m0]; pieces]),
                Some(CrossSpec::PerRegime(rs)) => {
                    if rs.len() != m0 {
                        return Err(format!("{name}: {} regime matrices for m0 = {m0}", rs.len()));
                    }
                    let per: Vec<DMatrix<f64>> = rs.iter().map(|r| rows_to_matrix(name, r, m, n)).collect::<Result<_, _>>()?;
                    Ok(vec![per; pieces])
                }
                Some(CrossSpec::PerPiece(ps)) => {
                    if ps.len() != pieces || ps.iter().any(|p| p.len() != m0) {
                        return Err(format!("{name}: expected {pieces} pieces of {m0} regime matrices"));
                    }
                    ps.iter().map(|p| p.iter().map(|r| rows_to_matrix(name, r, m, n)).collect()).collect()
                }
            }
        };
        let s1 = expand("S1bar", &extras.S1bar)?;
        let s2 = expand("S2bar", &extras.S2bar)?;
        GameCoefficients::new(lq, s1, s2, extras.k).map_err(|e| e.to_string())
    }

    /// Time grid; the tail-tolerance form needs the upper end of the window.
    pub fn grid(&self, kappa_bar: f64) -> mfswitch_core::Result<TimeGrid> {
        let h = &self.horizon;
        match (h.end, h.tail_tol) {
            (Some(end), _) => TimeGrid::new(h.t, end, self.numerics.dt),
            (None, Some(tol)) => TimeGrid::from_tail_tolerance(h.t, self.kappa, kappa_bar, tol, self.numerics.dt),
            (None, None) => unreachable!("checked at parse time"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"problem":"control","dims":{"n":1,"m":1,"d":1,"d0":1,"m0":1},
            "horizon":{"T":1.0},"kappa":-0.5,
            "numerics":{"dt":0.1,"particles":8,"scenarios":2,"seed":1}}"#
            .to_string()
    }

    #[test]
    fn omitted_blocks_are_zero_with_unit_r() {
        let spec = parse(minimal().as_bytes()).unwrap();
        let (checks, built) = spec.build();
        assert!(checks.iter().all(|c| c.pass));
        let b = &built.unwrap().lq.pieces[0].regimes[0];
        assert_eq!(b.r[(0, 0)], 1.0);
        assert_eq!(b.q[(0, 0)], 0.0);
    }

    #[test]
    fn missing_seed_is_malformed() {
        let s = minimal().replace(r#","seed":1"#, "");
        assert_eq!(parse(s.as_bytes()).unwrap_err().code, crate::EXIT_MALFORMED);
    }

    #[test]
    fn unknown_block_is_malformed() {
        let s = minimal().replace(r#""kappa":-0.5"#, r#""kappa":-0.5,"coefficients":{"regimes":[{"Z":1}]}"#);
        assert!(parse(s.as_bytes()).is_err());
    }

    #[test]
    fn wrong_shape_is_a_failed_check() {
        let s = minimal().replace(r#""kappa":-0.5"#, r#""kappa":-0.5,"coefficients":{"regimes":[{"B":[[1,2]]}]}"#);
        let (checks, built) = parse(s.as_bytes()).unwrap().build();
        assert!(built.is_none());
        let bad = checks.iter().find(|c| !c.pass).unwrap();
        assert_eq!(bad.name, "coefficients");
        assert!(bad.detail.contains("B is 1x2"), "{}", bad.detail);
    }

    #[test]
    fn regimes_are_one_based() {
        let s = minimal()
            .replace(r#""m0":1"#, r#""m0":2"#)
            .replace(r#""kappa":-0.5"#, r#""kappa":-0.5,"generator":[[-1,1],[2,-2]],"initial_regime":2"#);
        let (_, built) = parse(s.as_bytes()).unwrap().build();
        let built = built.unwrap();
        assert_eq!(built.initial_regime, 1);
        assert_eq!(built.lq.pieces[0].regimes.len(), 2);
    }

    #[test]
    fn horizon_needs_exactly_one_form() {
        let s = minimal().replace(r#"{"T":1.0}"#, r#"{"T":1.0,"tail_tol":1e-3}"#);
        assert!(parse(s.as_bytes()).is_err());
    }
}
