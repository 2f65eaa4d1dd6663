//! Installation problem instance and the clearance constraints `c(y)`.

use serde::{Deserialize, Serialize};

use crate::se2::Pose2;
use crate::sim::Output;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Workspace {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Signed distance to the boundary: negative inside, positive outside.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x_min - x).max(x - self.x_max);
        let dy = (self.y_min - y).max(y - self.y_max);
        if dx <= 0.0 && dy <= 0.0 {
            dx.max(dy)
        } else {
            dx.max(0.0).hypot(dy.max(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Receptacle {
    pub pose: Pose2,
    #[serde(default)]
    pub insertion_offset: Pose2,
}

impl Receptacle {
    pub fn goal(&self) -> Pose2 {
        goal_from_receptacle(&self.pose, &self.insertion_offset)
    }
}

/// Goal pose of a terminal: receptacle pose composed with the insertion offset.
pub fn goal_from_receptacle(receptacle: &Pose2, offset: &Pose2) -> Pose2 {
    receptacle.compose(offset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub workspace: Workspace,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// One per terminal, indexed by terminal id.
    #[serde(default)]
    pub receptacles: Vec<Receptacle>,
    pub terminal_radius: f64,
    pub clearance: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let w = &self.workspace;
        if !(w.x_max > w.x_min && w.y_max > w.y_min) {
            return bad("empty workspace".into());
        }
        if !(self.terminal_radius > 0.0 && self.clearance > 0.0) {
            return bad("terminal_radius and clearance must be > 0".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) {
                return bad(format!("obstacle {i} radius must be > 0"));
            }
        }
        for (i, r) in self.receptacles.iter().enumerate() {
            let g = r.goal();
            if !w.contains(g.x, g.y) {
                return bad(format!("goal of terminal {i} lies outside the workspace"));
            }
            if self.worst_margin(g.x, g.y) >= 0.0 {
                return bad(format!("goal of terminal {i} violates an obstacle clearance"));
            }
        }
        Ok(())
    }

    pub fn goals(&self) -> Vec<Pose2> {
        self.receptacles.iter().map(Receptacle::goal).collect()
    }

    /// `r_{t,o} = r_o + r_t + r_eps`
    pub fn safety_radius(&self, o: &Obstacle) -> f64 {
        o.radius + self.terminal_radius + self.clearance
    }

    /// Margins of one terminal position: one per obstacle, then the
    /// workspace exit margin. Positive entries are violations.
    pub fn terminal_margins(&self, x: f64, y: f64) -> impl Iterator<Item = f64> + '_ {
        self.obstacles
            .iter()
            .map(move |o| self.safety_radius(o) - (x - o.center[0]).hypot(y - o.center[1]))
            .chain(std::iter::once(self.workspace.signed_distance(x, y)))
    }

    /// Largest margin of one terminal position.
    pub fn worst_margin(&self, x: f64, y: f64) -> f64 {
        self.terminal_margins(x, y).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Entries per terminal in `check_constraints`.
    pub fn margins_per_terminal(&self) -> usize {
        self.obstacles.len() + 1
    }
}

/// `c(y)`: for each terminal, `r_{t,o} - |p_t - p_o|` for every obstacle
/// followed by the workspace exit margin.
pub fn check_constraints(y: &Output, scenario: &Scenario) -> Vec<f64> {
    y.poses.iter().flat_map(|p| scenario.terminal_margins(p.x, p.y)).collect()
}

/// Maximum entry of `c(y)`.
pub fn max_violation(y: &Output, scenario: &Scenario) -> f64 {
    check_constraints(y, scenario).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn scen(obstacles: Vec<Obstacle>) -> Scenario {
        Scenario {
            workspace: Workspace { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 },
            obstacles,
            receptacles: vec![],
            terminal_radius: 0.03,
            clearance: 0.02,
        }
    }

    #[test]
    fn margin_boundary_and_offset() {
        let s = scen(vec![Obstacle { center: [0.5, 0.5], radius: 0.05 }]);
        let rto = 0.1;
        let at = Output::from_poses(vec![Pose2::new(0.5 + rto, 0.5, 0.0)]);
        assert!(check_constraints(&at, &s)[0].abs() < 1e-12);
        let away = Output::from_poses(vec![Pose2::new(0.5, 0.5 + rto + 0.1, 0.0)]);
        assert!((check_constraints(&away, &s)[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_obstacles_gives_workspace_only() {
        let s = scen(vec![]);
        let y = Output::from_poses(vec![Pose2::new(0.2, 0.5, 0.0), Pose2::new(1.3, 1.4, 0.0)]);
        let c = check_constraints(&y, &s);
        assert_eq!(c.len(), 2);
        assert!((c[0] + 0.2).abs() < 1e-12);
        assert!((c[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn goal_composition() {
        let r = Receptacle { pose: Pose2::new(0.0, 0.0, FRAC_PI_2), insertion_offset: Pose2::new(0.1, 0.0, 0.0) };
        let g = r.goal();
        assert!(g.x.abs() < 1e-15 && (g.y - 0.1).abs() < 1e-15 && (g.theta - FRAC_PI_2).abs() < 1e-15);
        let z = Receptacle { pose: Pose2::new(0.3, 0.2, 1.0), insertion_offset: Pose2::identity() };
        assert_eq!(z.goal(), z.pose);
    }
}
