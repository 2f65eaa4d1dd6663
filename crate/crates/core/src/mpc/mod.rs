//! Receding-horizon terminal manipulation controller.
//!
//! The input matrix is frozen at the current output, so predicted outputs
//! are affine in the stacked inputs. Each sequential-convexification pass
//! linearizes the chord heading cost and the circular obstacle margins about
//! the nominal rollout and solves the resulting QP with [`qp`].

pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InputBounds;
use crate::linalg::cholesky;
use crate::models::CompositeModel;
use crate::scenario::{check_constraints, Scenario};
use crate::se2::{d_beta, Pose2, Twist2};
use crate::sim::{Output, TerminalStatus};
use qp::{AdmmSettings, Qp, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("QP solver diverged")]
    SolverDiverged,
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

/// Controller weights and limits. Costs are in m² (heading enters through the
/// chord distance scaled by `beta`), inputs in m/s and rad/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// s
    pub dt: f64,
    /// Input weight, s²; row-major 3x3.
    pub q: [[f64; 3]; 3],
    /// Input increment weight, s²; row-major 3x3.
    pub q_delta: [[f64; 3]; 3],
    /// Terminal cost weight.
    pub terminal_weight: f64,
    /// Heading weight in `d_beta`, m².
    pub beta: f64,
    pub u_bounds: InputBounds,
    /// Goal tolerance on `d_beta`, m².
    pub goal_tol: f64,
    /// Control steps before a manipulation is abandoned.
    pub max_tm_steps: usize,
    pub scp_iterations: usize,
    /// Exact-penalty weight on linearized margin violations, per meter.
    pub slack_weight: f64,
    /// Obstacles and walls farther than this from every nominal position are
    /// left out of the QP, m.
    pub prune_distance: f64,
    #[serde(skip)]
    pub admm: AdmmSettings,
}

fn diag(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 1.0 / 30.0,
            q: diag(0.1, 0.1, 0.05),
            q_delta: diag(1.0, 1.0, 0.5),
            terminal_weight: 10.0,
            beta: 0.01,
            u_bounds: InputBounds::default(),
            goal_tol: 1e-4,
            max_tm_steps: 900,
            scp_iterations: 3,
            slack_weight: 1e4,
            prune_distance: 0.25,
            admm: AdmmSettings::default(),
        }
    }
}

fn to_matrix(m: &[[f64; 3]; 3]) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |r, c| m[r][c])
}

fn quad(m: &[[f64; 3]; 3], v: &[f64; 3]) -> f64 {
    (0..3).map(|r| (0..3).map(|c| v[r] * m[r][c] * v[c]).sum::<f64>()).sum()
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        if !(self.dt > 0.0 && self.goal_tol > 0.0) {
            return bad("dt and goal_tol must be > 0");
        }
        if !(self.terminal_weight >= 0.0 && self.beta >= 0.0 && self.slack_weight > 0.0) {
            return bad("weights must be non-negative");
        }
        if !(self.u_bounds.v_max > 0.0 && self.u_bounds.omega_max > 0.0) {
            return bad("input bounds must be > 0");
        }
        for (name, m) in [("q", &self.q), ("q_delta", &self.q_delta)] {
            let mm = to_matrix(m);
            if (&mm - mm.transpose()).amax() > 1e-12 || cholesky(&mm).is_none() {
                return Err(MpcError::InvalidConfig(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }

    fn input_scale(&self) -> [f64; 3] {
        [self.u_bounds.v_max, self.u_bounds.v_max, self.u_bounds.omega_max]
    }
}

/// `d_beta(rho_h, goal) + u'Qu + du'Q_delta du` with `du = u - u_prev`.
pub fn stage_cost(held: &Pose2, u: &Twist2, u_prev: &Twist2, goal: &Pose2, cfg: &MpcConfig) -> f64 {
    let ua = u.to_array();
    let pa = u_prev.to_array();
    let du = [ua[0] - pa[0], ua[1] - pa[1], ua[2] - pa[2]];
    d_beta(held, goal, cfg.beta) + quad(&cfg.q, &ua) + quad(&cfg.q_delta, &du)
}

/// `p * d_beta(rho_h, goal)`.
pub fn terminal_cost(held: &Pose2, goal: &Pose2, cfg: &MpcConfig) -> f64 {
    cfg.terminal_weight * d_beta(held, goal, cfg.beta)
}

/// Strict `d_beta < eps_g`.
pub fn goal_reached(held: &Pose2, goal: &Pose2, cfg: &MpcConfig) -> bool {
    d_beta(held, goal, cfg.beta) < cfg.goal_tol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleRelaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub u_sequence: Vec<Twist2>,
    /// `horizon + 1` outputs starting with `y0`.
    pub predicted_y: Vec<Output>,
    /// Nonlinear objective of `u_sequence`, margin penalty included.
    pub cost: f64,
    /// Merit after each accepted convexification pass (non-increasing).
    pub scp_costs: Vec<f64>,
    /// `c(y_k)` for every predicted step `k = 1..=N`.
    pub constraint_margins: Vec<Vec<f64>>,
    pub status: SolveStatus,
    pub qp_iterations: usize,
}

impl MpcSolution {
    /// First input, to be applied now.
    pub fn first(&self) -> Twist2 {
        self.u_sequence[0]
    }

    /// Shift forward by one step, repeating the last input.
    pub fn shifted(&self) -> Vec<Twist2> {
        let mut v: Vec<Twist2> = self.u_sequence.iter().skip(1).copied().collect();
        v.push(*self.u_sequence.last().expect("non-empty horizon"));
        v
    }
}

/// Affine prediction `y_k = y0 + G_k x` for scaled inputs `x`.
struct Prediction {
    y0: Vec<f64>,
    /// Row `3t + c` of `B` times `dt`, per scaled input channel.
    bdt: DMatrix<f64>,
    horizon: usize,
}

impl Prediction {
    fn new(y0: &Output, b: &DMatrix<f64>, cfg: &MpcConfig) -> Self {
        let scale = cfg.input_scale();
        let mut bdt = DMatrix::from_fn(b.nrows(), 3, |r, c| b[(r, c)] * cfg.dt * scale[c]);
        for (t, s) in y0.status.iter().enumerate() {
            if *s == TerminalStatus::Mated {
                bdt.rows_mut(3 * t, 3).fill(0.0);
            }
        }
        Self { y0: y0.to_vec(), bdt, horizon: cfg.horizon }
    }

    /// Coefficient row of output `d` at step `k` over the `3N` scaled inputs.
    fn row(&self, d: usize, k: usize) -> DVector<f64> {
        let mut r = DVector::zeros(3 * self.horizon);
        for i in 0..k.min(self.horizon) {
            for c in 0..3 {
                r[3 * i + c] = self.bdt[(d, c)];
            }
        }
        r
    }

    fn value(&self, d: usize, k: usize, x: &DVector<f64>) -> f64 {
        let mut v = self.y0[d];
        for i in 0..k.min(self.horizon) {
            for c in 0..3 {
                v += self.bdt[(d, c)] * x[3 * i + c];
            }
        }
        v
    }

    fn outputs(&self, x: &DVector<f64>, status: &[TerminalStatus]) -> Vec<Output> {
        (0..=self.horizon)
            .map(|k| {
                let v: Vec<f64> = (0..self.y0.len()).map(|d| self.value(d, k, x)).collect();
                let mut o = Output::from_slice(&v);
                o.status = status.to_vec();
                o
            })
            .collect()
    }
}

struct Problem<'a> {
    pred: Prediction,
    held: usize,
    goal: Pose2,
    u_prev: [f64; 3],
    scenario: &'a Scenario,
    /// Terminals whose margins are constrained.
    constrained: Vec<usize>,
    cfg: &'a MpcConfig,
}

impl Problem<'_> {
    fn inputs(&self, x: &DVector<f64>) -> Vec<Twist2> {
        let s = self.cfg.input_scale();
        (0..self.cfg.horizon)
            .map(|k| Twist2::new(x[3 * k] * s[0], x[3 * k + 1] * s[1], x[3 * k + 2] * s[2]))
            .collect()
    }

    fn held_pose(&self, k: usize, x: &DVector<f64>) -> Pose2 {
        let h = 3 * self.held;
        Pose2::new(self.pred.value(h, k, x), self.pred.value(h + 1, k, x), self.pred.value(h + 2, k, x))
    }

    fn violation(&self, k: usize, x: &DVector<f64>) -> f64 {
        self.constrained
            .iter()
            .map(|&t| {
                let px = self.pred.value(3 * t, k, x);
                let py = self.pred.value(3 * t + 1, k, x);
                self.scenario.terminal_margins(px, py).map(|m| m.max(0.0)).sum::<f64>()
            })
            .sum()
    }

    /// Nonlinear objective plus exact penalty on true margins.
    fn merit(&self, x: &DVector<f64>) -> f64 {
        let us = self.inputs(x);
        let mut prev = Twist2::from_array(self.u_prev);
        let mut j = 0.0;
        for (k, u) in us.iter().enumerate() {
            j += stage_cost(&self.held_pose(k, x), u, &prev, &self.goal, self.cfg);
            prev = *u;
        }
        j += terminal_cost(&self.held_pose(self.cfg.horizon, x), &self.goal, self.cfg);
        j + self.cfg.slack_weight * (1..=self.cfg.horizon).map(|k| self.violation(k, x)).sum::<f64>()
    }

    /// Convex model of the problem around the nominal `xn`.
    fn convexify(&self, xn: &DVector<f64>) -> Qp {
        let cfg = self.cfg;
        let n = 3 * cfg.horizon;
        let s = cfg.input_scale();
        let mut p = DMatrix::<f64>::zeros(n, n);
        let mut q = DVector::<f64>::zeros(n);
        let h = 3 * self.held;
        let g = [self.goal.x, self.goal.y];

        for k in 1..=cfg.horizon {
            let w = if k == cfg.horizon { cfg.terminal_weight } else { 1.0 };
            if w == 0.0 {
                continue;
            }
            for c in 0..2 {
                let r = self.pred.row(h + c, k);
                p.ger(2.0 * w, &r, &r, 1.0);
                q.axpy(2.0 * w * (self.pred.y0[h + c] - g[c]), &r, 1.0);
            }
            if cfg.beta > 0.0 {
                // chord residual linearized at the nominal heading:
                // |r(th)| ~ sin(th_n - th_g) + (th - th_n) along the tangent
                let r = self.pred.row(h + 2, k);
                let th_n = self.pred.value(h + 2, k, xn);
                let a = (th_n - self.goal.theta).sin() - r.dot(xn);
                p.ger(2.0 * w * cfg.beta, &r, &r, 1.0);
                q.axpy(2.0 * w * cfg.beta * a, &r, 1.0);
            }
        }

        let qm = to_matrix(&cfg.q);
        let qd = to_matrix(&cfg.q_delta);
        let sm = DMatrix::from_diagonal(&DVector::from_row_slice(&s));
        let qs = &sm * &qm * &sm;
        let qds = &sm * &qd * &sm;
        for k in 0..cfg.horizon {
            let b = 3 * k;
            let mut blk = p.view_mut((b, b), (3, 3));
            blk += &qs * 2.0;
            blk += &qds * 2.0;
            if k + 1 < cfg.horizon {
                let mut blk = p.view_mut((b, b), (3, 3));
                blk += &qds * 2.0;
                let mut off = p.view_mut((b, b + 3), (3, 3));
                off -= &qds * 2.0;
                let mut off = p.view_mut((b + 3, b), (3, 3));
                off -= &qds * 2.0;
            }
        }
        let up = DVector::from_row_slice(&self.u_prev);
        let gq = (&qd * &up).component_mul(&DVector::from_row_slice(&s));
        for c in 0..3 {
            q[c] -= 2.0 * gq[c];
        }

        // hard input box
        let mut rows: Vec<(DVector<f64>, f64, f64, Option<f64>)> = (0..n)
            .map(|i| {
                let mut a = DVector::zeros(n);
                a[i] = 1.0;
                (a, -1.0, 1.0, None)
            })
            .collect();

        // soft margins
        let ws = Some(cfg.slack_weight);
        let ws_box = &self.scenario.workspace;
        for &t in &self.constrained {
            let (dx, dy) = (3 * t, 3 * t + 1);
            for k in 1..=cfg.horizon {
                let px = self.pred.value(dx, k, xn);
                let py = self.pred.value(dy, k, xn);
                for o in &self.scenario.obstacles {
                    let r = self.scenario.safety_radius(o);
                    let (ex, ey) = (px - o.center[0], py - o.center[1]);
                    let dist = ex.hypot(ey);
                    if dist - r > cfg.prune_distance {
                        continue;
                    }
                    let (nx, ny) = if dist > 1e-9 { (ex / dist, ey / dist) } else { (1.0, 0.0) };
                    let a = -(self.pred.row(dx, k) * nx + self.pred.row(dy, k) * ny);
                    let ub = dist - r + nx * (self.pred.y0[dx] - px) + ny * (self.pred.y0[dy] - py);
                    rows.push((a, f64::NEG_INFINITY, ub, ws));
                }
                let walls = [
                    (dx, 1.0, ws_box.x_max, ws_box.x_max - px),
                    (dx, -1.0, -ws_box.x_min, px - ws_box.x_min),
                    (dy, 1.0, ws_box.y_max, ws_box.y_max - py),
                    (dy, -1.0, -ws_box.y_min, py - ws_box.y_min),
                ];
                for (d, sign, bound, gap) in walls {
                    if gap > cfg.prune_distance {
                        continue;
                    }
                    let a = self.pred.row(d, k) * sign;
                    rows.push((a, f64::NEG_INFINITY, bound - sign * self.pred.y0[d], ws));
                }
            }
        }

        let m = rows.len();
        let mut a = DMatrix::zeros(m, n);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        let mut soft = Vec::with_capacity(m);
        for (i, (row, l, u, w)) in rows.into_iter().enumerate() {
            // unit rows keep a single ADMM step size adequate for all of them
            let norm = row.norm().max(1e-12);
            a.set_row(i, &(row / norm).transpose());
            lower[i] = l / norm;
            upper[i] = u / norm;
            soft.push(w.map(|w| w * norm));
        }
        // keep the QP well scaled; the penalty weights scale with the cost
        let scale = 1.0 / p.diagonal().amax().max(1e-12);
        for w in soft.iter_mut().flatten() {
            *w *= scale;
        }
        Qp { p: p * scale, q: q * scale, a, lower, upper, soft }
    }
}

/// Solve the finite-horizon problem from `y0` for the model's held terminal.
/// `u_prev` is the input executed on the previous control step.
pub fn solve(
    y0: &Output,
    model: &CompositeModel<f64>,
    goal: &Pose2,
    scenario: &Scenario,
    cfg: &MpcConfig,
    u_prev: &Twist2,
    warm_start: Option<&MpcSolution>,
) -> Result<MpcSolution, MpcError> {
    let held = model.held();
    let b = model.composite_matrix(&y0.poses);
    let constrained = (0..y0.n_terminals())
        .filter(|&t| y0.status.get(t).is_none_or(|s| *s != TerminalStatus::Mated))
        .collect();
    let prob = Problem {
        pred: Prediction::new(y0, &b, cfg),
        held,
        goal: *goal,
        u_prev: u_prev.to_array(),
        scenario,
        constrained,
        cfg,
    };
    let s = cfg.input_scale();
    let n = 3 * cfg.horizon;
    let mut x = DVector::<f64>::zeros(n);
    if let Some(ws) = warm_start {
        for (k, u) in ws.shifted().iter().enumerate().take(cfg.horizon) {
            let a = u.to_array();
            for c in 0..3 {
                x[3 * k + c] = (a[c] / s[c]).clamp(-1.0, 1.0);
            }
        }
    }

    let mut merit = prob.merit(&x);
    let mut scp_costs = Vec::with_capacity(cfg.scp_iterations);
    let mut qp_iterations = 0;
    let mut hit_cap = false;
    let mut slack_active = false;
    for _ in 0..cfg.scp_iterations.max(1) {
        let qp = prob.convexify(&x);
        let res = qp.solve(Some(&x), &cfg.admm);
        qp_iterations += res.iterations;
        match res.status {
            QpStatus::Diverged => return Err(MpcError::SolverDiverged),
            QpStatus::MaxIterations => hit_cap = true,
            QpStatus::Solved => {}
        }
        let cand = res.x.map(|v| v.clamp(-1.0, 1.0));
        // accept the longest step along the QP direction that does not
        // increase the true merit
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..6 {
            let trial = &x + (&cand - &x) * step;
            let m = prob.merit(&trial);
            if m <= merit {
                accepted = Some((trial, m));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((xn, m)) => {
                let ax = &qp.a * &xn;
                slack_active = qp
                    .soft
                    .iter()
                    .enumerate()
                    .any(|(i, w)| w.is_some() && ax[i] > qp.upper[i] + 1e-6);
                let small = (&xn - &x).amax() < 1e-9;
                x = xn;
                merit = m;
                scp_costs.push(m);
                if small {
                    break;
                }
            }
            None => {
                scp_costs.push(merit);
                break;
            }
        }
    }

    let predicted_y = prob.pred.outputs(&x, &y0.status);
    let constraint_margins = predicted_y[1..].iter().map(|y| check_constraints(y, scenario)).collect();
    let status = if slack_active {
        SolveStatus::InfeasibleRelaxed
    } else if hit_cap {
        SolveStatus::MaxIter
    } else {
        SolveStatus::Optimal
    };
    Ok(MpcSolution {
        u_sequence: prob.inputs(&x),
        predicted_y,
        cost: merit,
        scp_costs,
        constraint_margins,
        status,
        qp_iterations,
    })
}
