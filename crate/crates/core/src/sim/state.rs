use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::se2::Pose2;
use crate::sim::topology::{DlonTopology, LinkEnd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalStatus {
    Free,
    Held,
    Mated,
}

/// What `SimState::root_pose` is the pose of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    /// Proximal frame of link 0.
    RootLink,
    Terminal(usize),
}

/// Full configuration of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub root_pose: Pose2,
    pub anchor: Anchor,
    pub joint_angles: Vec<f64>,
    pub terminal_status: Vec<TerminalStatus>,
    pub mated_poses: BTreeMap<usize, Pose2>,
}

impl SimState {
    /// Rest shape with link 0's proximal frame at `root_pose`, nothing held.
    pub fn at_rest(topo: &DlonTopology, root_pose: Pose2) -> Self {
        Self {
            root_pose,
            anchor: Anchor::RootLink,
            joint_angles: topo.rest_angles(),
            terminal_status: vec![TerminalStatus::Free; topo.n_terminals()],
            mated_poses: BTreeMap::new(),
        }
    }

    pub fn held(&self) -> Option<usize> {
        self.terminal_status.iter().position(|s| *s == TerminalStatus::Held)
    }

    /// Moves the anchor to another terminal without changing any geometry.
    pub fn rerooted(&self, topo: &DlonTopology, anchor: Anchor) -> SimState {
        let frames = link_frames(self, topo);
        let root_pose = match anchor {
            Anchor::RootLink => frames[0],
            Anchor::Terminal(t) => terminal_pose(&frames, topo, t),
        };
        SimState { root_pose, anchor, ..self.clone() }
    }
}

/// Stacked terminal poses with their status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub poses: Vec<Pose2>,
    pub status: Vec<TerminalStatus>,
}

impl Output {
    pub fn n_terminals(&self) -> usize {
        self.poses.len()
    }

    /// `[x0, y0, theta0, x1, ...]`
    pub fn to_vec(&self) -> Vec<f64> {
        self.poses.iter().flat_map(|p| [p.x, p.y, p.theta]).collect()
    }

    pub fn from_poses(poses: Vec<Pose2>) -> Self {
        let status = vec![TerminalStatus::Free; poses.len()];
        Self { poses, status }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::from_poses(v.chunks_exact(3).map(|c| Pose2::new(c[0], c[1], c[2])).collect())
    }
}

/// World frames (proximal point, heading) of every link.
pub fn link_frames(state: &SimState, topo: &DlonTopology) -> Vec<Pose2> {
    let canon = canonical_frames(&state.joint_angles, topo);
    let anchor_canon = match state.anchor {
        Anchor::RootLink => canon[0],
        Anchor::Terminal(t) => terminal_pose(&canon, topo, t),
    };
    let world = state.root_pose.compose(&anchor_canon.inverse());
    canon.iter().map(|f| world.compose(f)).collect()
}

/// Link frames with link 0 at the identity.
fn canonical_frames(joint_angles: &[f64], topo: &DlonTopology) -> Vec<Pose2> {
    let links = topo.links();
    let mut frames: Vec<Pose2> = Vec::with_capacity(links.len());
    frames.push(Pose2::identity());
    for (i, link) in links.iter().enumerate().skip(1) {
        let p = link.parent.expect("non-root link has a parent");
        let pf = frames[p];
        let (s, c) = pf.theta.sin_cos();
        let pl = links[p].length;
        frames.push(Pose2::new(pf.x + pl * c, pf.y + pl * s, pf.theta + joint_angles[i - 1]));
    }
    frames
}

pub(crate) fn terminal_pose(frames: &[Pose2], topo: &DlonTopology, t: usize) -> Pose2 {
    let site = topo.terminals()[t];
    let f = frames[site.link];
    match site.end {
        LinkEnd::Proximal => f,
        LinkEnd::Distal => {
            let l = topo.links()[site.link].length;
            let (s, c) = f.theta.sin_cos();
            Pose2::new(f.x + l * c, f.y + l * s, f.theta)
        }
    }
}

/// Forward kinematics: world-frame terminal poses.
pub fn observe(state: &SimState, topo: &DlonTopology) -> Output {
    let frames = link_frames(state, topo);
    Output {
        poses: (0..topo.n_terminals()).map(|t| terminal_pose(&frames, topo, t)).collect(),
        status: state.terminal_status.clone(),
    }
}
