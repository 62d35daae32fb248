//! Stackelberg-Nash hierarchical null control of a 1-D stochastic heat
//! equation on a finite scenario tree.
//!
//! Two followers play a Nash game given the leaders' controls; the leaders
//! then drive the state to zero at the final time by penalized HUM. All
//! adjoints are exact transposes of the forward scheme, so every duality
//! identity holds to round-off.

pub mod carleman;
pub mod error;
pub mod grid;
mod krylov;
pub mod nash;
pub mod nullctrl;
pub mod oracle;
pub mod prob_tree;
pub mod problem;
pub mod spde_backward;
pub mod spde_forward;

pub use error::{Error, Result};
pub use grid::{Mask, SpatialGrid, Subdomain};
pub use nash::{FollowerPair, LeaderPair};
pub use prob_tree::{AdaptedField, LeafField, TreeTopology};
pub use problem::{Coefficients, Player, ProblemData, ProblemSpec};
