use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky, cholesky_solve};
use crate::scenario::Scenario;
use crate::se2::{d_beta, integrate_pose, normalize_angle, Pose2, Twist2};
use crate::sim::state::{link_frames, observe, terminal_pose, Anchor, SimState, TerminalStatus};
use crate::sim::topology::DlonTopology;
use crate::sim::SimError;

/// Soft pin of one terminal to a fixed pose.
#[derive(Debug, Clone, Copy)]
struct Pin {
    terminal: usize,
    target: Pose2,
    k_lin: f64,
    k_rot: f64,
}

#[derive(Debug, Clone, Copy)]
struct StepOptions {
    friction: bool,
    drag: bool,
}

/// Partial derivatives of a point (and its link heading) on link `k` with
/// respect to every joint angle, holding the anchor link fixed.
struct Jacobians<'a> {
    topo: &'a DlonTopology,
    frames: &'a [Pose2],
    anchor_link: usize,
}

impl Jacobians<'_> {
    /// Sign with which joint `j` rotates link `k`.
    fn sign(&self, j: usize, k: usize) -> f64 {
        let c = j + 1;
        let k_in = self.topo.in_subtree(c, k);
        let a_in = self.topo.in_subtree(c, self.anchor_link);
        match (k_in, a_in) {
            (true, false) => 1.0,
            (false, true) => -1.0,
            _ => 0.0,
        }
    }

    /// Rows `[dx/dq; dy/dq; dheading/dq]` for point `q` rigidly attached to link `k`.
    fn point(&self, k: usize, q: [f64; 2]) -> [Vec<f64>; 3] {
        let n = self.topo.n_joints();
        let mut jx = vec![0.0; n];
        let mut jy = vec![0.0; n];
        let mut jt = vec![0.0; n];
        for j in 0..n {
            let s = self.sign(j, k);
            if s == 0.0 {
                continue;
            }
            let pivot = self.frames[j + 1];
            jx[j] = -s * (q[1] - pivot.y);
            jy[j] = s * (q[0] - pivot.x);
            jt[j] = s;
        }
        [jx, jy, jt]
    }
}

fn anchor_link(topo: &DlonTopology, anchor: Anchor) -> usize {
    match anchor {
        Anchor::RootLink => 0,
        Anchor::Terminal(t) => topo.terminals()[t].link,
    }
}

fn terminal_point_link(topo: &DlonTopology, t: usize) -> usize {
    topo.terminals()[t].link
}

fn link_midpoint(topo: &DlonTopology, frames: &[Pose2], k: usize) -> [f64; 2] {
    let f = frames[k];
    let h = 0.5 * topo.links()[k].length;
    [f.x + h * f.theta.cos(), f.y + h * f.theta.sin()]
}

fn rigid_velocity(u: &Twist2, pivot: &Pose2, q: [f64; 2]) -> [f64; 2] {
    [u.vx - u.omega * (q[1] - pivot.y), u.vy + u.omega * (q[0] - pivot.x)]
}

fn mate_pins(state: &SimState, topo: &DlonTopology) -> Vec<Pin> {
    let k_rot = topo.spec().pins.stiffness_ratio * topo.spec().joints.stiffness.max(1e-3);
    let l = topo.spec().link_length;
    state
        .mated_poses
        .iter()
        .map(|(&terminal, &target)| Pin { terminal, target, k_lin: k_rot / (l * l), k_rot })
        .collect()
}

/// One implicit overdamped step. `u` is the anchor's world-frame twist.
fn advance(
    state: &SimState,
    topo: &DlonTopology,
    u: &Twist2,
    dt: f64,
    pins: &[Pin],
    opts: StepOptions,
) -> (SimState, f64) {
    let n = topo.n_joints();
    let frames = link_frames(state, topo);
    let jac = Jacobians { topo, frames: &frames, anchor_link: anchor_link(topo, state.anchor) };
    let pivot = state.root_pose;

    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    for j in 0..n {
        let jp = topo.joint(j);
        let rest = topo.links()[j + 1].rest_angle;
        m[(j, j)] += jp.damping + dt * jp.stiffness;
        g[j] -= jp.stiffness * (state.joint_angles[j] - rest);
    }

    let drag = topo.ground_drag();
    if opts.drag && drag > 0.0 {
        for k in 0..topo.links().len() {
            let q = link_midpoint(topo, &frames, k);
            let [jx, jy, _] = jac.point(k, q);
            let v = rigid_velocity(u, &pivot, q);
            for a in 0..n {
                if jx[a] == 0.0 && jy[a] == 0.0 {
                    continue;
                }
                g[a] -= drag * (jx[a] * v[0] + jy[a] * v[1]);
                for b in 0..n {
                    m[(a, b)] += drag * (jx[a] * jx[b] + jy[a] * jy[b]);
                }
            }
        }
    }

    for pin in pins {
        let p = terminal_pose(&frames, topo, pin.terminal);
        let [jx, jy, jt] = jac.point(terminal_point_link(topo, pin.terminal), [p.x, p.y]);
        let v = rigid_velocity(u, &pivot, [p.x, p.y]);
        // pin error predicted at the end of the step under rigid anchor motion
        let ex = p.x - pin.target.x + dt * v[0];
        let ey = p.y - pin.target.y + dt * v[1];
        let et = normalize_angle(p.theta - pin.target.theta) + dt * u.omega;
        for a in 0..n {
            if jt[a] == 0.0 {
                continue;
            }
            g[a] -= pin.k_lin * (jx[a] * ex + jy[a] * ey) + pin.k_rot * jt[a] * et;
            for b in 0..n {
                m[(a, b)] += dt * (pin.k_lin * (jx[a] * jx[b] + jy[a] * jy[b]) + pin.k_rot * jt[a] * jt[b]);
            }
        }
    }

    let mut active: Vec<usize> = Vec::with_capacity(n);
    for j in 0..n {
        let f = topo.joint(j).friction_torque;
        if opts.friction && f > 0.0 {
            if g[j].abs() <= f {
                continue;
            }
            g[j] -= f * g[j].signum();
        }
        active.push(j);
    }

    let mut rates = vec![0.0; n];
    if !active.is_empty() {
        let na = active.len();
        let mut ma = DMatrix::<f64>::zeros(na, na);
        let mut ga = DVector::<f64>::zeros(na);
        for (ia, &a) in active.iter().enumerate() {
            ga[ia] = g[a];
            for (ib, &b) in active.iter().enumerate() {
                ma[(ia, ib)] = m[(a, b)];
            }
        }
        let l = cholesky(&ma).expect("damping keeps the joint system positive definite");
        let sol = cholesky_solve(&l, &ga);
        for (ia, &a) in active.iter().enumerate() {
            rates[a] = sol[ia];
        }
    }

    let mut next = state.clone();
    let mut max_change: f64 = 0.0;
    for j in 0..n {
        let rest = topo.links()[j + 1].rest_angle;
        let lim = topo.joint(j).angle_limit;
        let new = (state.joint_angles[j] + dt * rates[j]).clamp(rest - lim, rest + lim);
        max_change = max_change.max((new - state.joint_angles[j]).abs());
        next.joint_angles[j] = new;
    }
    next.root_pose = integrate_pose(&state.root_pose, u, dt);
    (next, max_change)
}

/// Advance the network by `dt` with the held terminal commanded at `u`.
pub fn step(state: &SimState, topo: &DlonTopology, u: &Twist2, dt: f64) -> Result<SimState, SimError> {
    let held = state.held().ok_or(SimError::NoHeldTerminal)?;
    let st = if state.anchor == Anchor::Terminal(held) {
        std::borrow::Cow::Borrowed(state)
    } else {
        std::borrow::Cow::Owned(state.rerooted(topo, Anchor::Terminal(held)))
    };
    let pins = mate_pins(&st, topo);
    let (next, _) = advance(&st, topo, u, dt, &pins, StepOptions { friction: true, drag: true });
    Ok(next)
}

/// Free evolution: the current anchor stays put while the rest settles.
pub fn settle(state: &SimState, topo: &DlonTopology, dt: f64) -> SimState {
    let pins = mate_pins(state, topo);
    advance(state, topo, &Twist2::zero(), dt, &pins, StepOptions { friction: true, drag: true }).0
}

pub fn grasp(state: &SimState, topo: &DlonTopology, scenario: &Scenario, terminal: usize) -> Result<SimState, SimError> {
    let status = *state.terminal_status.get(terminal).ok_or(SimError::UnknownTerminal(terminal))?;
    if status != TerminalStatus::Free || state.held().is_some() {
        return Err(SimError::NotFree(terminal));
    }
    let p = observe(state, topo).poses[terminal];
    let margin = scenario.worst_margin(p.x, p.y);
    if margin > 0.0 {
        return Err(SimError::GraspInfeasible { terminal, margin });
    }
    let mut next = state.rerooted(topo, Anchor::Terminal(terminal));
    next.terminal_status[terminal] = TerminalStatus::Held;
    Ok(next)
}

pub fn release(state: &SimState) -> Result<SimState, SimError> {
    let held = state.held().ok_or(SimError::NoHeldTerminal)?;
    let mut next = state.clone();
    next.terminal_status[held] = TerminalStatus::Free;
    Ok(next)
}

/// Pin the held terminal where it is, provided it is within `eps_g` of `goal`.
pub fn mate(
    state: &SimState,
    topo: &DlonTopology,
    terminal: usize,
    goal: &Pose2,
    eps_g: f64,
    beta: f64,
) -> Result<SimState, SimError> {
    if state.terminal_status.get(terminal) != Some(&TerminalStatus::Held) {
        return Err(SimError::NotHeld(terminal));
    }
    let p = observe(state, topo).poses[terminal];
    let distance = d_beta(&p, goal, beta);
    if !(distance < eps_g) {
        return Err(SimError::MateNotAtGoal { terminal, distance });
    }
    let mut next = state.clone();
    next.terminal_status[terminal] = TerminalStatus::Mated;
    next.mated_poses.insert(terminal, p);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxConfig {
    /// Joint-rate convergence threshold, rad/s.
    pub velocity_tol: f64,
    /// Allowed terminal reproduction error, meters.
    pub reproduction_tol: f64,
    pub max_iterations: usize,
    /// Pseudo time step of the implicit relaxation, seconds.
    pub pseudo_dt: f64,
    /// Pin stiffness as a multiple of joint stiffness.
    pub pin_ratio: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            velocity_tol: 1e-9,
            reproduction_tol: 1e-3,
            max_iterations: 2000,
            pseudo_dt: 0.5,
            pin_ratio: 1e4,
        }
    }
}

/// Frictionless elastic equilibrium with terminals held at `clamped`
/// (indexed by terminal id). The first terminal is held exactly; the others
/// are soft-pinned.
pub fn relax_to_equilibrium(
    state: &SimState,
    topo: &DlonTopology,
    clamped: &[Pose2],
    cfg: &RelaxConfig,
) -> Result<SimState, SimError> {
    assert_eq!(clamped.len(), topo.n_terminals(), "one clamped pose per terminal");
    let mut st = state.clone();
    st.anchor = Anchor::Terminal(0);
    st.root_pose = clamped[0];
    let k_rot = cfg.pin_ratio * topo.spec().joints.stiffness.max(1e-3);
    let l = topo.spec().link_length;
    let pins: Vec<Pin> = (1..topo.n_terminals())
        .map(|t| Pin { terminal: t, target: clamped[t], k_lin: k_rot / (l * l), k_rot })
        .collect();

    let opts = StepOptions { friction: false, drag: false };
    let zero = Twist2::zero();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (next, change) = advance(&st, topo, &zero, cfg.pseudo_dt, &pins, opts);
        st = next;
        if change / cfg.pseudo_dt < cfg.velocity_tol {
            converged = true;
            break;
        }
    }
    let y = observe(&st, topo);
    let reproduction = y
        .poses
        .iter()
        .zip(clamped)
        .map(|(a, b)| a.distance(b))
        .fold(0.0, f64::max);
    if !converged || !(reproduction < cfg.reproduction_tol) {
        return Err(SimError::NoConvergence { iterations, reproduction });
    }
    Ok(st.rerooted(topo, state.anchor))
}
