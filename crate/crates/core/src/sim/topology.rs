use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::{PinConfig, SimError};

/// Joint parameters shared by every revolute joint of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointParams {
    /// N·m/rad
    pub stiffness: f64,
    /// N·m·s/rad
    pub damping: f64,
    /// Maximum deflection from the rest angle, radians.
    pub angle_limit: f64,
    /// Coulomb friction threshold, N·m.
    pub friction_torque: f64,
}

impl Default for JointParams {
    fn default() -> Self {
        Self {
            stiffness: 0.05,
            damping: 0.01,
            angle_limit: 0.6,
            friction_torque: 0.004,
        }
    }
}

/// One chain of identical links.
///
/// Branch 0 is the trunk: its first link carries terminal 0 at its proximal
/// end. Every other branch hangs off the distal end of its `parent` branch,
/// bent by `attach_angle` at rest. Branches without children end in a
/// terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    #[serde(default)]
    pub parent: Option<usize>,
    pub links: usize,
    #[serde(default)]
    pub attach_angle: f64,
    /// Overrides the topology-wide link length for this branch.
    #[serde(default)]
    pub link_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySpec {
    pub link_length: f64,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub joints: JointParams,
    /// Viscous ground drag per link, N·s/m, acting at link midpoints.
    #[serde(default = "default_ground_drag")]
    pub ground_drag: f64,
    #[serde(default)]
    pub pins: PinConfig,
}

fn default_ground_drag() -> f64 {
    0.03
}

impl Default for TopologySpec {
    /// Three branches: a 10-link trunk into a junction feeding a 12-link and
    /// a 6-link branch, 25 mm links (27 joints, about 0.55 m tip to tip).
    fn default() -> Self {
        Self {
            link_length: 0.025,
            branches: vec![
                BranchSpec { parent: None, links: 10, attach_angle: 0.0, link_length: None },
                BranchSpec { parent: Some(0), links: 12, attach_angle: -0.35, link_length: None },
                BranchSpec { parent: Some(0), links: 6, attach_angle: 0.9, link_length: None },
            ],
            joints: JointParams::default(),
            ground_drag: default_ground_drag(),
            pins: PinConfig::default(),
        }
    }
}

/// Which end of a link a terminal sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkEnd {
    Proximal,
    Distal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub length: f64,
    /// Parent link; `None` only for link 0. Parents always have lower indices.
    pub parent: Option<usize>,
    /// Rest angle of the joint to the parent.
    pub rest_angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalSite {
    pub link: usize,
    pub end: LinkEnd,
}

/// Validated link tree. Joint `j` connects link `j + 1` to its parent.
#[derive(Debug, Clone)]
pub struct DlonTopology {
    spec: TopologySpec,
    links: Vec<Link>,
    terminals: Vec<TerminalSite>,
    joint_params: Vec<JointParams>,
    /// `subtree[c * n + k]`: link `k` lies in the subtree rooted at link `c`.
    subtree: Vec<bool>,
}

impl DlonTopology {
    pub fn new(spec: TopologySpec) -> Result<Self, SimError> {
        let bad = |msg: String| Err(SimError::InvalidTopology(msg));
        if spec.branches.is_empty() {
            return bad("no branches".into());
        }
        if spec.branches[0].parent.is_some() {
            return bad("branch 0 must be the trunk (no parent)".into());
        }
        let jp = spec.joints;
        if !(jp.angle_limit > 0.0 && jp.angle_limit < std::f64::consts::PI) {
            return bad(format!("angle_limit {} outside (0, pi)", jp.angle_limit));
        }
        if !(jp.stiffness >= 0.0 && jp.damping > 0.0 && jp.friction_torque >= 0.0) {
            return bad("joint stiffness/friction must be >= 0 and damping > 0".into());
        }
        if !(spec.ground_drag >= 0.0) {
            return bad("ground_drag must be >= 0".into());
        }

        let mut links: Vec<Link> = Vec::new();
        let mut branch_last: Vec<usize> = Vec::with_capacity(spec.branches.len());
        let mut has_child = vec![false; spec.branches.len()];
        for (b, br) in spec.branches.iter().enumerate() {
            let len = br.link_length.unwrap_or(spec.link_length);
            if br.links == 0 {
                return bad(format!("branch {b} has no links"));
            }
            if !(len > 0.0) {
                return bad(format!("branch {b} link length must be > 0"));
            }
            let attach_to = match br.parent {
                None if b == 0 => None,
                None => return bad(format!("branch {b} needs a parent")),
                Some(p) if p >= b => return bad(format!("branch {b} parent {p} must precede it")),
                Some(p) => {
                    has_child[p] = true;
                    Some(branch_last[p])
                }
            };
            for i in 0..br.links {
                let (parent, rest_angle) = if i == 0 {
                    (attach_to, br.attach_angle)
                } else {
                    (Some(links.len() - 1), 0.0)
                };
                links.push(Link { length: len, parent, rest_angle });
            }
            branch_last.push(links.len() - 1);
        }

        let mut terminals = vec![TerminalSite { link: 0, end: LinkEnd::Proximal }];
        for (b, &last) in branch_last.iter().enumerate() {
            if !has_child[b] {
                terminals.push(TerminalSite { link: last, end: LinkEnd::Distal });
            }
        }
        if terminals.len() < 2 {
            return bad("need at least two terminals".into());
        }

        let n = links.len();
        let mut subtree = vec![false; n * n];
        for k in 0..n {
            let mut cur = Some(k);
            while let Some(c) = cur {
                subtree[c * n + k] = true;
                cur = links[c].parent;
            }
        }
        let joint_params = vec![jp; n.saturating_sub(1)];
        Ok(Self { spec, links, terminals, joint_params, subtree })
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn terminals(&self) -> &[TerminalSite] {
        &self.terminals
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn n_joints(&self) -> usize {
        self.links.len() - 1
    }

    pub fn joint(&self, j: usize) -> &JointParams {
        &self.joint_params[j]
    }

    pub fn ground_drag(&self) -> f64 {
        self.spec.ground_drag
    }

    pub fn rest_angles(&self) -> Vec<f64> {
        self.links[1..].iter().map(|l| l.rest_angle).collect()
    }

    pub fn in_subtree(&self, root: usize, link: usize) -> bool {
        self.subtree[root * self.links.len() + link]
    }

    /// Sum of all link lengths.
    /// Rest angles with every branch bowed into an arc turning through `sag`
    /// rad, each arc keeping its straight chord's direction. Shortens every
    /// branch chord by about `length * sag^2 / 24`.
    pub fn sagged_angles(&self, sag: f64) -> Vec<f64> {
        let mut heading = vec![0.0; self.links.len()];
        let mut first = 0;
        for br in &self.spec.branches {
            let n = br.links as f64;
            for k in 0..br.links {
                heading[first + k] = sag * ((k as f64 + 0.5) / n - 0.5);
            }
            first += br.links;
        }
        // link 0 has no joint: the layout turns rigidly about its root frame
        (1..self.links.len())
            .map(|i| {
                let p = self.links[i].parent.expect("non-root link has a parent");
                self.links[i].rest_angle + heading[i] - heading[p]
            })
            .collect()
    }

    pub fn total_length(&self) -> f64 {
        self.links.iter().map(|l| l.length).sum()
    }

    /// Stable content hash, hex encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&self.spec).expect("topology serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
