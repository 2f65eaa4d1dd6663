//! Planar deformable-linear-object-network (DLON) toolkit: a quasi-static
//! simulator, excitation datasets, sparse identification of terminal
//! dynamics, adaptive composite models, a constrained receding-horizon
//! controller and the sequential installation planner.

pub mod config;
pub mod dataset;
pub mod linalg;
pub mod models;
pub mod mpc;
pub mod planner;
pub mod scalar;
pub mod scenario;
pub mod se2;
pub mod sim;
pub mod sysid;

pub use scalar::Real;

/// Double-precision instantiations used by the simulator, controller and CLI.
pub type Pose = se2::Pose2<f64>;
pub type Twist = se2::Twist2<f64>;
pub type Composite = models::CompositeModel<f64>;
pub type LocalLinear = models::LocalLinearModel<f64>;
pub type Sparse = sysid::SparseModel<f64>;
