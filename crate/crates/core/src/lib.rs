//! Infinite-horizon conditional McKean-Vlasov FBSDEs with Markov regime switching
//! and common noise, solved by particle Monte Carlo, least-squares regression and
//! damped Picard iteration with an optional homotopy in the coupling strength.
//!
//! The [`lq`] and [`game`] modules build mean-field linear-quadratic control and
//! Nash game problems on top of the generic solver in [`coupled`].

pub mod backward;
pub mod coeffs;
pub mod coupled;
pub mod error;
pub mod forward;
pub mod game;
pub mod grid;
pub mod linalg;
pub mod lq;
pub mod measure;
pub mod regime;
pub mod rng;

mod regression;

pub use backward::{solve_mkv_bsde, BackwardConfig, BackwardSolution, Driver, Terminal};
pub use coeffs::{
    check_game_structure, check_positive_definiteness, compute_game_kappa_bounds, compute_kappa_bounds, transform_cross_terms, Dims,
    GameCoefficients, KappaBounds, LqBlocks, LqCoefficients, LqPiece, PdReport, TransformedCoefficients,
};
pub use coupled::{
    solve_fbsde_continuation, solve_fbsde_picard, verify_domination_monotonicity, FbsdeProblem, FbsdeSolution, PicardConfig,
    TestFunctionals, VerifierConfig,
};
pub use error::{Error, Result};
pub use forward::{simulate_conditional_mkv_sde, InitialCondition, NoiseBank, ParticleEnsemble, SdeCoefficients, SimulationSetup};
pub use game::{solve_game_fixed_point, EquilibriumReport, GameMode, PopulationProfile};
pub use grid::TimeGrid;
pub use lq::{solve_control_problem, ControlProcess, ControlSolution, CostBreakdown, Numerics};
pub use measure::EmpiricalMeasure;
pub use regime::{GeneratorMatrix, RegimePath};
