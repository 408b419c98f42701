use mfswitch_core::coeffs::{check_game_structure, GameStructureReport, DEFAULT_PD_DELTA};
use mfswitch_core::{
    check_positive_definiteness, compute_game_kappa_bounds, compute_kappa_bounds, transform_cross_terms, Dims, KappaBounds,
    PdReport, TimeGrid,
};
use serde::Serialize;

use crate::spec::{Built, DimensionCheck, ProblemKind, ProblemSpec, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaVariants {
    pub control: Option<KappaBounds>,
    pub game: Option<KappaBounds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonInfo {
    pub t0: f64,
    #[serde(rename = "T")]
    pub end: f64,
    pub dt: f64,
    pub steps: usize,
}

impl From<TimeGrid> for HorizonInfo {
    fn from(g: TimeGrid) -> Self {
        Self { t0: g.t0, end: g.horizon(), dt: g.dt, steps: g.steps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub schema_version: u32,
    pub problem: ProblemKind,
    pub dims: Dims,
    pub dimension_checks: Vec<DimensionCheck>,
    pub pd: Option<PdReport>,
    pub structure: Option<GameStructureReport>,
    pub kappa_bounds: KappaVariants,
    pub window_ok: bool,
    pub horizon: Option<HorizonInfo>,
    pub pass: bool,
    /// one line per failed check
    pub failures: Vec<String>,
    /// reported but not failing; an empty window only voids the a-priori
    /// well-posedness guarantee
    pub warnings: Vec<String>,
}

/// Everything later stages need from a passing (or forced) check.
#[derive(Debug, Clone)]
pub struct Checked {
    pub report: CheckReport,
    pub built: Option<Built>,
    /// bounds of the problem being solved
    pub bounds: Option<KappaBounds>,
    pub grid: Option<TimeGrid>,
}

pub fn check(spec: &ProblemSpec) -> Checked {
    let (dimension_checks, built) = spec.build();
    let mut failures: Vec<String> =
        dimension_checks.iter().filter(|c| !c.pass).map(|c| format!("dimension: {}: {}", c.name, c.detail)).collect();
    let mut report = CheckReport {
        schema_version: SCHEMA_VERSION,
        problem: spec.problem,
        dims: spec.dims(),
        dimension_checks,
        pd: None,
        structure: None,
        kappa_bounds: KappaVariants { control: None, game: None },
        window_ok: false,
        horizon: None,
        pass: false,
        failures: Vec::new(),
        warnings: Vec::new(),
    };
    let Some(b) = built else {
        report.failures = failures;
        return Checked { report, built: None, bounds: None, grid: None };
    };

    let kappa_star = spec.kappa_star();
    let pd = check_positive_definiteness(&b.lq, DEFAULT_PD_DELTA);
    let control_bounds = if pd.pass {
        match transform_cross_terms(&b.lq) {
            Ok(tc) => Some(compute_kappa_bounds(&tc, spec.kappa, kappa_star)),
            Err(e) => {
                failures.push(format!("transform: {e}"));
                None
            }
        }
    } else {
        None
    };

    let bounds = match spec.problem {
        ProblemKind::Control => {
            for c in pd.checks.iter().filter(|c| !c.pass) {
                failures.push(format!(
                    "PD: {} (piece {}, regime {}) has smallest eigenvalue {:.3e}",
                    c.block,
                    c.piece + 1,
                    c.regime + 1,
                    c.min_eigenvalue
                ));
            }
            control_bounds
        }
        ProblemKind::Game => {
            let g = b.game.as_ref().expect("game problems build game coefficients");
            let structure = check_game_structure(g, DEFAULT_PD_DELTA);
            for c in structure.checks.iter().filter(|c| !c.pass) {
                failures.push(format!(
                    "structure: {} (piece {}, regime {}) off by {:.3e}",
                    c.name,
                    c.piece + 1,
                    c.regime + 1,
                    c.deviation
                ));
            }
            report.structure = Some(structure);
            match compute_game_kappa_bounds(g, spec.kappa, kappa_star) {
                Ok(kb) => {
                    report.kappa_bounds.game = Some(kb);
                    Some(kb)
                }
                Err(e) => {
                    failures.push(format!("game bounds: {e}"));
                    None
                }
            }
        }
    };
    report.pd = Some(pd);
    report.kappa_bounds.control = control_bounds;

    if let Some(kb) = &bounds {
        report.window_ok = kb.window_ok;
        if !kb.window_ok {
            report.warnings.push(format!(
                "kappa window: -kappa_x/2 + kappa_y = {:.6} must lie in ({:.6}, {:.6})",
                kb.feasible_kappa, kb.kappa_under, kb.kappa_bar
            ));
        }
    }
    // a fixed horizon needs no bounds; the tail form needs kappa_bar
    let grid = match (spec.horizon.end.is_some(), &bounds) {
        (true, _) => spec.grid(f64::NAN),
        (false, Some(kb)) => spec.grid(kb.kappa_bar),
        (false, None) => Err(mfswitch_core::Error::InvalidGrid("tail tolerance needs kappa bounds".into())),
    };
    let grid = match grid {
        Ok(g) => {
            report.horizon = Some(g.into());
            Some(g)
        }
        Err(e) => {
            failures.push(format!("horizon: {e}"));
            None
        }
    };
    report.pass = failures.is_empty();
    report.failures = failures;
    Checked { report, built: Some(b), bounds, grid }
}
