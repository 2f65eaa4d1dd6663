//! Terminal selection and the grasp / control / mate-or-release installation
//! loop.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{CompositeModel, ModelConfig};
use crate::mpc::{self, goal_reached, MpcConfig, MpcError, MpcSolution};
use crate::scenario::{max_violation, Scenario};
use crate::se2::{normalize_angle, Twist2};
use crate::sim::{self, observe, DlonTopology, Output, SimError, SimState, TerminalStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("scenario has {receptacles} receptacles for {terminals} terminals")]
    ReceptacleCount { receptacles: usize, terminals: usize },
}

/// Pick the free terminal closest to violating its constraints.
///
/// A terminal qualifies when it is free and every entry of its margin vector
/// (obstacles and workspace) is strictly negative. Among those the largest
/// worst margin wins; ties go to the lowest id.
pub fn select_terminal(y: &Output, scenario: &Scenario) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (t, p) in y.poses.iter().enumerate() {
        if y.status.get(t).is_some_and(|s| *s != TerminalStatus::Free) {
            continue;
        }
        let m = scenario.worst_margin(p.x, p.y);
        if !(m < 0.0) {
            continue;
        }
        if best.is_none_or(|(_, bm)| m > bm) {
            best = Some((t, m));
        }
    }
    best.map(|(t, _)| t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Rigid,
    Composite,
}

impl std::str::FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "composite" => Ok(Self::Composite),
            other => Err(format!("unknown model '{other}' (rigid | composite)")),
        }
    }
}

impl std::fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rigid => "rigid",
            Self::Composite => "composite",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub model: ModelChoice,
    pub model_config: ModelConfig,
    /// Free settling between manipulations, s.
    pub settle_seconds: f64,
    /// Failed manipulations tolerated per terminal before giving up.
    pub max_retries: usize,
    pub sim_rate: f64,
    pub record_events: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Composite,
            model_config: ModelConfig::default(),
            settle_seconds: 1.0,
            max_retries: 2,
            sim_rate: sim::SIM_RATE,
            record_events: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmRecord {
    pub held_terminal: usize,
    pub steps_used: usize,
    pub goal_reached: bool,
    /// Largest entry of `c(y)` seen during the manipulation.
    pub max_c: f64,
    /// Largest entry of `c(y)` when the manipulation ends.
    pub final_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub time: f64,
    pub held: usize,
    pub y: Vec<f64>,
    pub u: Twist2,
    pub c_max: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallReport {
    pub tms: Vec<TmRecord>,
    pub success: bool,
    /// Set when the loop stopped because a terminal ran out of retries.
    pub aborted: Option<usize>,
    pub final_output: Vec<f64>,
    #[serde(skip)]
    pub events: Vec<StepEvent>,
    /// Not part of any deterministic artifact.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl InstallReport {
    pub fn max_c(&self) -> f64 {
        self.tms.iter().map(|r| r.max_c).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_c(&self) -> f64 {
        self.tms.last().map_or(f64::NAN, |r| r.final_c)
    }
}

/// Per-step log as CSV: `time, held, y..., vx, vy, om, c_max, alpha`.
pub fn events_csv(events: &[StepEvent]) -> String {
    let n_y = events.first().map_or(0, |e| e.y.len());
    let mut s = String::from("time_s,held");
    for t in 0..n_y / 3 {
        let _ = write!(s, ",x{t}_m,y{t}_m,th{t}_rad");
    }
    s.push_str(",vx_mps,vy_mps,om_radps,c_max_m,alpha\n");
    for e in events {
        let _ = write!(s, "{:.4},{}", e.time, e.held);
        for v in &e.y {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = writeln!(s, ",{:.6},{:.6},{:.6},{:.6},{:.6}", e.u.vx, e.u.vy, e.u.omega, e.c_max, e.alpha);
    }
    s
}

/// Stacked twist estimate from two consecutive outputs.
fn backward_rate(prev: &Output, next: &Output, dt: f64) -> Vec<f64> {
    prev.poses
        .iter()
        .zip(&next.poses)
        .flat_map(|(a, b)| [(b.x - a.x) / dt, (b.y - a.y) / dt, normalize_angle(b.theta - a.theta) / dt])
        .collect()
}

/// Run the installation loop on `state` until every terminal is mated, no
/// terminal qualifies for selection, or a terminal exhausts its retries.
pub fn install_dlon(
    state: &SimState,
    topo: &DlonTopology,
    scenario: &Scenario,
    mpc_cfg: &MpcConfig,
    cfg: &PlannerConfig,
) -> Result<InstallReport, PlannerError> {
    let started = Instant::now();
    let n_t = topo.n_terminals();
    if scenario.receptacles.len() != n_t {
        return Err(PlannerError::ReceptacleCount { receptacles: scenario.receptacles.len(), terminals: n_t });
    }
    let goals = scenario.goals();
    let sim_dt = 1.0 / cfg.sim_rate;
    let substeps = ((mpc_cfg.dt * cfg.sim_rate).round() as usize).max(1);
    let ctrl_dt = substeps as f64 * sim_dt;
    let settle_steps = (cfg.settle_seconds * cfg.sim_rate).round() as usize;

    let mut state = state.clone();
    let mut time = 0.0;
    let mut failures = vec![0usize; n_t];
    let mut tms = Vec::new();
    let mut events = Vec::new();
    let mut aborted = None;

    loop {
        let y = observe(&state, topo);
        let Some(t) = select_terminal(&y, scenario) else { break };
        state = sim::grasp(&state, topo, scenario, t)?;
        let mut model = match cfg.model {
            ModelChoice::Rigid => CompositeModel::rigid_only(t, n_t),
            ModelChoice::Composite => CompositeModel::new(t, n_t, &cfg.model_config),
        };
        let goal = goals[t];
        let mut u_prev = Twist2::zero();
        let mut warm: Option<MpcSolution> = None;
        let mut max_c = f64::NEG_INFINITY;
        let mut steps = 0;
        let mut reached = false;
        let mut y = observe(&state, topo);
        loop {
            max_c = max_c.max(max_violation(&y, scenario));
            if goal_reached(&y.poses[t], &goal, mpc_cfg) {
                reached = true;
                break;
            }
            if steps == mpc_cfg.max_tm_steps {
                break;
            }
            if cfg.model == ModelChoice::Composite {
                model.local.fit_ls();
            }
            let sol = mpc::solve(&y, &model, &goal, scenario, mpc_cfg, &u_prev, warm.as_ref())?;
            let u = sol.first();
            for _ in 0..substeps {
                state = sim::step(&state, topo, &u, sim_dt)?;
            }
            time += ctrl_dt;
            let y_next = observe(&state, topo);
            if cfg.record_events {
                events.push(StepEvent {
                    time,
                    held: t,
                    y: y_next.to_vec(),
                    u,
                    c_max: max_violation(&y_next, scenario),
                    alpha: model.alpha(),
                });
            }
            if cfg.model == ModelChoice::Composite {
                model.discount();
                model.local.update_window(&backward_rate(&y, &y_next, ctrl_dt), &u);
            }
            y = y_next;
            u_prev = u;
            warm = Some(sol);
            steps += 1;
        }
        let final_c = max_violation(&y, scenario);
        tms.push(TmRecord { held_terminal: t, steps_used: steps, goal_reached: reached, max_c, final_c });
        if reached {
            state = sim::mate(&state, topo, t, &goal, mpc_cfg.goal_tol, mpc_cfg.beta)?;
        } else {
            state = sim::release(&state)?;
            failures[t] += 1;
        }
        for _ in 0..settle_steps {
            state = sim::settle(&state, topo, sim_dt);
        }
        time += settle_steps as f64 * sim_dt;
        if failures[t] > cfg.max_retries {
            aborted = Some(t);
            break;
        }
    }

    let y = observe(&state, topo);
    let success = y.status.iter().all(|s| *s == TerminalStatus::Mated);
    Ok(InstallReport {
        tms,
        success,
        aborted,
        final_output: y.to_vec(),
        events,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Receptacle, Workspace};
    use crate::se2::Pose2;

    fn scen() -> Scenario {
        Scenario {
            workspace: Workspace { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 },
            obstacles: vec![],
            receptacles: vec![],
            terminal_radius: 0.02,
            clearance: 0.01,
        }
    }

    fn at(xs: &[(f64, f64)], status: &[TerminalStatus]) -> Output {
        let mut y = Output::from_poses(xs.iter().map(|&(a, b)| Pose2::new(a, b, 0.0)).collect());
        y.status = status.to_vec();
        y
    }

    #[test]
    fn picks_terminal_closest_to_violation() {
        use TerminalStatus::*;
        // workspace margins -0.05 and -0.20
        let y = at(&[(0.5, 0.5), (0.05, 0.5), (0.2, 0.5)], &[Mated, Free, Free]);
        assert_eq!(select_terminal(&y, &scen()), Some(1));
    }

    #[test]
    fn none_when_nothing_qualifies() {
        use TerminalStatus::*;
        let y = at(&[(0.5, 0.5), (0.3, 0.3)], &[Mated, Mated]);
        assert_eq!(select_terminal(&y, &scen()), None);
        let y = at(&[(1.5, 0.5)], &[Free]);
        assert_eq!(select_terminal(&y, &scen()), None);
        let y = at(&[(0.5, 0.5), (0.5, 0.5)], &[Held, Free]);
        assert_eq!(select_terminal(&y, &scen()), Some(1));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let y = at(&[(0.3, 0.5), (0.7, 0.5)], &[TerminalStatus::Free; 2]);
        assert_eq!(select_terminal(&y, &scen()), Some(0));
    }

    #[test]
    fn every_terminal_in_violation_gives_empty_report() {
        use crate::sim::TopologySpec;
        let topo = DlonTopology::new(TopologySpec::default()).unwrap();
        let state = SimState::at_rest(&topo, Pose2::new(5.0, 5.0, 0.0));
        let mut sc = scen();
        sc.receptacles = vec![Receptacle { pose: Pose2::new(0.5, 0.5, 0.0), insertion_offset: Pose2::identity() }; 3];
        let r = install_dlon(&state, &topo, &sc, &MpcConfig::default(), &PlannerConfig::default()).unwrap();
        assert!(r.tms.is_empty());
        assert!(!r.success);
    }

    #[test]
    fn terminals_at_goal_mate_immediately() {
        use crate::sim::TopologySpec;
        let topo = DlonTopology::new(TopologySpec::default()).unwrap();
        let state = SimState::at_rest(&topo, Pose2::new(0.2, 0.5, 0.0));
        let y = observe(&state, &topo);
        let mut sc = scen();
        sc.receptacles = y.poses.iter().map(|p| Receptacle { pose: *p, insertion_offset: Pose2::identity() }).collect();
        let r = install_dlon(&state, &topo, &sc, &MpcConfig::default(), &PlannerConfig::default()).unwrap();
        assert!(r.success, "{r:?}");
        assert_eq!(r.tms.len(), 3);
        assert!(r.tms.iter().all(|tm| tm.steps_used == 0 && tm.goal_reached));
    }
}
