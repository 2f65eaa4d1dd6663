//! Open-loop trajectory prediction benchmark: fit the local model on a short
//! prefix of each recorded trajectory, then roll every model forward and
//! record its worst pose error against the recording.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{composite_matrix, propagate, rigid_body_matrix, LocalLinearModel, ModelConfig};
use crate::dataset::{Dataset, Trajectory};
use crate::se2::{normalize_angle, Pose2};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectory {index} has {have} samples, need {need}")]
    TrajectoryTooShort { index: usize, have: usize, need: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Where the composite weight starts when the rollout begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// Carry on from the fitting window: `gamma^N_e` at the first predicted
    /// step, discounted once per step after that.
    Continue,
    /// Start again from 1 at the first predicted step.
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fit_seconds: f64,
    pub horizon_seconds: f64,
    pub held: usize,
    pub model: ModelConfig,
    pub alpha: AlphaSchedule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fit_seconds: 1.0,
            horizon_seconds: 5.0,
            held: 0,
            model: ModelConfig::default(),
            alpha: AlphaSchedule::Restart,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rigid,
    Ls,
    Composite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Rigid, ModelKind::Ls, ModelKind::Composite];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Rigid => "rigid",
            ModelKind::Ls => "ls",
            ModelKind::Composite => "composite",
        }
    }
}

/// Worst free-terminal error of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxError {
    /// meters
    pub translational: f64,
    /// radians
    pub rotational: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub model: ModelKind,
    pub translational_mean: f64,
    pub translational_std: f64,
    pub rotational_mean: f64,
    pub rotational_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    /// `per_trajectory[i][m]` follows the order of `ModelKind::ALL`.
    pub per_trajectory: Vec<[MaxError; 3]>,
}

impl ErrorTable {
    pub fn row(&self, kind: ModelKind) -> &ErrorRow {
        self.rows.iter().find(|r| r.model == kind).expect("every model has a row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "model,translational_mean_m,translational_std_m,rotational_mean_rad,rotational_std_rad\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.model.name(),
                r.translational_mean,
                r.translational_std,
                r.rotational_mean,
                r.rotational_std
            ));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn rollout_error(
    traj: &Trajectory,
    start: usize,
    steps: usize,
    dt: f64,
    held: usize,
    mut matrix: impl FnMut(usize, &[Pose2]) -> nalgebra::DMatrix<f64>,
) -> MaxError {
    let mut y = traj.samples[start].y.poses.clone();
    let mut worst = MaxError { translational: 0.0, rotational: 0.0 };
    for k in 0..steps {
        let s = &traj.samples[start + k];
        let b = matrix(k, &y);
        y = propagate(&y, &b, &s.u, dt);
        let truth = &traj.samples[start + k + 1].y.poses;
        for (t, (p, q)) in y.iter().zip(truth).enumerate() {
            if t == held {
                continue;
            }
            worst.translational = worst.translational.max(p.distance(q));
            worst.rotational = worst.rotational.max(normalize_angle(p.theta - q.theta).abs());
        }
    }
    worst
}

/// Max-error of the three models on a single trajectory.
pub fn evaluate_trajectory(traj: &Trajectory, index: usize, dt: f64, cfg: &EvalConfig) -> Result<[MaxError; 3], EvalError> {
    let n_fit = (cfg.fit_seconds / dt).round() as usize;
    let n_roll = (cfg.horizon_seconds / dt).round() as usize;
    let need = n_fit + n_roll + 1;
    if traj.len() < need {
        return Err(EvalError::TrajectoryTooShort { index, have: traj.len(), need });
    }
    let n_t = traj.samples[0].y.n_terminals();
    let mut local = LocalLinearModel::new(3 * n_t, cfg.model.window.max(n_fit), cfg.model.ridge);
    for s in &traj.samples[..n_fit] {
        let yd: Vec<f64> = s.y_dot.iter().flat_map(|w| w.to_array()).collect();
        local.update_window(&yd, &s.u);
    }
    let b_ls = local.fit_ls().clone();
    let held = cfg.held;
    let gamma = cfg.model.gamma;
    let alpha0 = match cfg.alpha {
        AlphaSchedule::Continue => gamma.powi(n_fit as i32),
        AlphaSchedule::Restart => 1.0,
    };

    let rigid = rollout_error(traj, n_fit, n_roll, dt, held, |_, y| rigid_body_matrix(y, held));
    let ls = rollout_error(traj, n_fit, n_roll, dt, held, |_, _| b_ls.clone());
    let comp = rollout_error(traj, n_fit, n_roll, dt, held, |k, y| {
        let alpha = alpha0 * gamma.powi(k as i32);
        composite_matrix(alpha, &rigid_body_matrix(y, held), &b_ls)
    });
    Ok([rigid, ls, comp])
}

/// Table of mean and standard deviation of per-trajectory max errors.
pub fn evaluate_models(dataset: &Dataset, cfg: &EvalConfig) -> Result<ErrorTable, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let dt = dataset.dt();
    let per_trajectory = dataset
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, tr)| evaluate_trajectory(tr, i, dt, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = ModelKind::ALL
        .iter()
        .enumerate()
        .map(|(m, &model)| {
            let tr: Vec<f64> = per_trajectory.iter().map(|e| e[m].translational).collect();
            let rot: Vec<f64> = per_trajectory.iter().map(|e| e[m].rotational).collect();
            let (tm, ts) = mean_std(&tr);
            let (rm, rs) = mean_std(&rot);
            ErrorRow { model, translational_mean: tm, translational_std: ts, rotational_mean: rm, rotational_std: rs }
        })
        .collect();
    Ok(ErrorTable { rows, per_trajectory })
}
