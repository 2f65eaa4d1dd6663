//! Quasi-static planar simulator of a branched stiff cable network.
//!
//! Links are rigid segments joined by revolute joints in a tree. Motion is
//! overdamped: joint rates balance elastic, ground-drag and pin forces against
//! joint damping, with Coulomb stick-slip per joint. The held terminal follows
//! its velocity command exactly.

mod dynamics;
mod state;
mod topology;

pub use dynamics::{grasp, mate, relax_to_equilibrium, release, settle, step, RelaxConfig};
pub use state::{link_frames, observe, Anchor, Output, SimState, TerminalStatus};
pub use topology::{BranchSpec, DlonTopology, JointParams, Link, LinkEnd, TerminalSite, TopologySpec};

use serde::{Deserialize, Serialize};

/// Simulation rate, Hz.
pub const SIM_RATE: f64 = 240.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("no terminal is held")]
    NoHeldTerminal,
    #[error("terminal {0} does not exist")]
    UnknownTerminal(usize),
    #[error("terminal {0} is not free")]
    NotFree(usize),
    #[error("terminal {0} is not held")]
    NotHeld(usize),
    #[error("grasp of terminal {terminal} infeasible (margin {margin:.4} m)")]
    GraspInfeasible { terminal: usize, margin: f64 },
    #[error("terminal {terminal} is not at its goal (d_beta {distance:.3e})")]
    MateNotAtGoal { terminal: usize, distance: f64 },
    #[error("relaxation did not converge after {iterations} iterations (reproduction error {reproduction:.3e} m)")]
    NoConvergence { iterations: usize, reproduction: f64 },
}

/// Mated-terminal pin parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinConfig {
    /// Rotational pin stiffness as a multiple of joint stiffness.
    pub stiffness_ratio: f64,
    /// Allowed pinned-pose drift, meters.
    pub tolerance: f64,
}

impl Default for PinConfig {
    fn default() -> Self {
        Self { stiffness_ratio: 100.0, tolerance: 1e-3 }
    }
}
