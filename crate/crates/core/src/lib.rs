//! Distribution-constrained optimal stopping of Brownian motion on discrete
//! path models: linear programs over randomized stopping times, barrier
//! extraction, Stop-Go checks and Monte Carlo validation.

pub mod costs;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod lp;
pub mod mc;
pub mod tree;

pub use costs::{CostFunctional, CostVector};
pub use error::{Error, Result};
pub use geometry::{Barrier, PhaseProcess};
pub use grid::{HorizonPolicy, MuSpec, TargetDistribution, TimeGrid};
pub use lp::{RandomizedStoppingTime, Solution, StoppingLp};
pub use tree::{Model, PathPrefix, PathTree, StateKind, StateLattice, TreeNode};
