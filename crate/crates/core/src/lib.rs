//! Game option pricing on recombining jump-diffusion lattices.
//!
//! The lattice is built in [`lattice`], solved by backward induction in [`dynkin`],
//! and checked against brute-force and Monte Carlo references in [`oracle`].

pub mod converge;
pub mod dynkin;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod payoff;

pub use converge::{grid_gap_bound, richardson, value_sequence, ConvergenceTable, GridGapBound};
pub use dynkin::{
    extract_strategies, solve, DPResult, FilteredLattice, LatticeBuilder, StoppingRule,
};
pub use lattice::{build, EngineKind, EnginePolicy, ModelLattice};
pub use model::{step_params, JumpLaw, MertonParams, StepParams};
pub use payoff::{PayoffKind, PayoffSpec};
