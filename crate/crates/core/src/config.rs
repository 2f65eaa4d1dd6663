//! Experiment files: one TOML document with `scenario`, `topology`,
//! `initial`, `controller`, `model`, `dataset` and optional `goal_layout`
//! tables. Everything except `scenario` has defaults. Dotted `key=value`
//! overrides are applied to the parsed document before it is typed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetConfig;
use crate::mpc::{MpcConfig, MpcError};
use crate::planner::PlannerConfig;
use crate::scenario::{Receptacle, Scenario, ScenarioError};
use crate::se2::Pose2;
use crate::sim::{self, observe, DlonTopology, SimError, SimState, TopologySpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("bad override '{0}' (expected dotted.key=value)")]
    Override(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Topology(#[from] SimError),
    #[error(transparent)]
    Controller(#[from] MpcError),
}

/// Where the network starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    /// Pose of terminal 0 with the network at its rest shape.
    pub root_pose: Pose2,
    /// Offsets added to the rest joint angles, rad; empty for none.
    pub joint_offsets: Vec<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { root_pose: Pose2::new(0.2, 0.45, 0.0), joint_offsets: Vec::new() }
    }
}

/// Receptacles laid out as the network's rest shape placed at `pose`; used
/// when the scenario lists no receptacles. Straight branches leave no slack
/// to absorb goal tolerance, so each branch can be bowed by `sag` rad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalLayout {
    pub pose: Pose2,
    #[serde(default)]
    pub insertion_offset: Pose2,
    #[serde(default)]
    pub sag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub goal_layout: Option<GoalLayout>,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub controller: MpcConfig,
    #[serde(default)]
    pub model: PlannerConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

/// A config with its derived objects built and validated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub topology: DlonTopology,
    pub scenario: Scenario,
    pub initial_state: SimState,
}

fn parse_value(raw: &str) -> toml::Value {
    // accept any TOML literal; fall back to a bare string
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `dotted.path=value` inside `doc`, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.into()));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.into()))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text, overrides)
    }

    pub fn build(self) -> Result<Experiment, ConfigError> {
        let topology = DlonTopology::new(self.topology.clone())?;
        self.controller.validate()?;
        let mut scenario = self.scenario.clone();
        if scenario.receptacles.is_empty() {
            if let Some(layout) = &self.goal_layout {
                let mut shape = SimState::at_rest(&topology, layout.pose);
                shape.joint_angles = topology.sagged_angles(layout.sag);
                scenario.receptacles = observe(&shape, &topology)
                    .poses
                    .into_iter()
                    .map(|pose| Receptacle { pose, insertion_offset: layout.insertion_offset })
                    .collect();
            }
        }
        scenario.validate()?;
        let mut initial_state = SimState::at_rest(&topology, self.initial.root_pose);
        for (q, off) in initial_state.joint_angles.iter_mut().zip(&self.initial.joint_offsets) {
            *q += off;
        }
        Ok(Experiment { config: self, topology, scenario, initial_state })
    }
}

impl Experiment {
    /// Let the initial shape come to rest for `seconds` before anything runs.
    pub fn settled_initial_state(&self, seconds: f64) -> SimState {
        let dt = 1.0 / self.config.model.sim_rate;
        let mut s = self.initial_state.clone();
        for _ in 0..(seconds / dt).round() as usize {
            s = sim::settle(&s, &self.topology, dt);
        }
        s
    }
}
