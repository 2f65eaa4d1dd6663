//! Acceptance suite. One line per criterion, PASS or FAIL, with the measured
//! value next to its bound. Criteria run one after another so the runtime
//! limits are measured without other tests competing for the CPU.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlon_bench::commands::{cmd_bench, run_install, InstallOutcome, SCENARIOS};
use dlon_bench::Common;
use dlon_core::config::ExperimentConfig;
use dlon_core::dataset::{self, InputBounds};
use dlon_core::models::{evaluate_models, propagate, rigid_body_matrix, CompositeModel, EvalConfig, LocalLinearModel, ModelKind};
use dlon_core::mpc::{self, goal_reached, MpcConfig};
use dlon_core::planner::{select_terminal, ModelChoice};
use dlon_core::scenario::{Obstacle, Scenario, Workspace};
use dlon_core::se2::{d_beta, normalize_angle, Pose2, Twist2};
use dlon_core::sim::{self, grasp, observe, relax_to_equilibrium, DlonTopology, Output, RelaxConfig, SimState, TerminalStatus, TopologySpec, SIM_RATE};
use dlon_core::sysid::{self, decompose_rigid_residual, feature_matrix, rigid_model, PolyLibrary, PolyModel};

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn open_field() -> Scenario {
    Scenario {
        workspace: Workspace { x_min: -10.0, x_max: 10.0, y_min: -10.0, y_max: 10.0 },
        obstacles: vec![],
        receptacles: vec![],
        terminal_radius: 0.02,
        clearance: 0.01,
    }
}

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict { ok, detail: detail.into() }
}

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    /// Runs `f`, adding `extra` (time spent on shared inputs) to its clock.
    fn check(&mut self, id: usize, name: &str, limit: Option<Duration>, extra: Duration, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = f();
        let elapsed = t.elapsed() + extra;
        let in_time = limit.is_none_or(|l| elapsed < l);
        let ok = v.ok && in_time;
        let clock = match limit {
            Some(l) => format!("{:.2} s, limit {:.0} s", elapsed.as_secs_f64(), l.as_secs_f64()),
            None => format!("{:.2} s", elapsed.as_secs_f64()),
        };
        println!("{} {id:>2}. {name}: {} [{clock}]", if ok { "PASS" } else { "FAIL" }, v.detail);
        if !ok {
            self.failed.push(format!("{id}. {name}"));
        }
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn metric_axioms() -> Verdict {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pose = |rng: &mut ChaCha8Rng| Pose2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-10.0..10.0));
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a = pose(&mut rng);
        let b = pose(&mut rng);
        let beta = rng.random_range(1e-3..10.0);
        let k = rng.random_range(-3..=3) as f64;
        let d = d_beta(&a, &b, beta);
        let a_wrapped = Pose2::new(a.x, a.y, a.theta + 2.0 * PI * k);
        // nudge a single coordinate so identity of indiscernibles is tested
        // on close but distinct poses too
        let c = match rng.random_range(0..3) {
            0 => Pose2::new(a.x + 1e-4, a.y, a.theta),
            1 => Pose2::new(a.x, a.y - 1e-4, a.theta),
            _ => Pose2::new(a.x, a.y, a.theta + 1e-4),
        };
        if !(d >= 0.0 && d_beta(&a, &c, beta) > 0.0) {
            return verdict(false, format!("non-positive distance between distinct poses {a:?}, {b:?}"));
        }
        worst = worst
            .max((d - d_beta(&b, &a, beta)).abs())
            .max(d_beta(&a, &a, beta).abs())
            .max((d - d_beta(&a_wrapped, &b, beta)).abs());
    }
    verdict(worst <= TOL, format!("10000 triples, worst violation {worst:.1e} <= {TOL:.0e}"))
}

fn rigid_oracle() -> Verdict {
    let mut spec = TopologySpec::default();
    spec.joints.stiffness *= 1000.0;
    spec.joints.friction_torque *= 1000.0;
    let topo = DlonTopology::new(spec).unwrap();
    let dt_sim = 1.0 / SIM_RATE;
    let per_control = 8;
    let dt = per_control as f64 * dt_sim;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ratio = 0.0f64;
    let mut worst_angle = 0.0f64;
    for _ in 0..5 {
        let u = InputBounds::default().sample(&mut rng);
        let mut s = grasp(&SimState::at_rest(&topo, Pose2::identity()), &topo, &open_field(), 0).unwrap();
        let mut model = observe(&s, &topo).poses;
        let mut truth = vec![model.clone()];
        let mut predicted = vec![model.clone()];
        for _ in 0..(5.0 / dt).round() as usize {
            for _ in 0..per_control {
                s = sim::step(&s, &topo, &u, dt_sim).unwrap();
            }
            let b = rigid_body_matrix(&model, 0);
            model = propagate(&model, &b, &u, dt);
            truth.push(observe(&s, &topo).poses);
            predicted.push(model.clone());
        }
        for t in 1..topo.n_terminals() {
            let path: f64 = truth.windows(2).map(|w| w[0][t].distance(&w[1][t])).sum();
            let err = truth.iter().zip(&predicted).map(|(a, b)| a[t].distance(&b[t])).fold(0.0, f64::max);
            let ang = truth
                .iter()
                .zip(&predicted)
                .map(|(a, b)| normalize_angle(a[t].theta - b[t].theta).abs())
                .fold(0.0, f64::max);
            worst_ratio = worst_ratio.max(err / path.max(1e-9));
            worst_angle = worst_angle.max(ang);
        }
    }
    verdict(
        worst_ratio < 0.01 && worst_angle < 0.01,
        format!(
            "5 rollouts of 5 s, worst translational error {:.3}% of path (< 1%), worst angular error {worst_angle:.1e} rad (< 0.01)",
            100.0 * worst_ratio
        ),
    )
}

fn ls_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n_out = 9;
    let b_star = DMatrix::<f64>::from_fn(n_out, 3, |_, _| rng.random_range(-2.0..2.0));
    let mut ls = LocalLinearModel::new(n_out, 30, 1e-9);
    for k in 0..30 {
        let mut u = [0.0; 3];
        u[k % 3] = rng.random_range(0.02..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let y_dot: Vec<f64> = (0..n_out).map(|o| (0..3).map(|a| b_star[(o, a)] * u[a]).sum()).collect();
        ls.update_window(&y_dot, &Twist2::from_array(u));
    }
    let err = (ls.fit_ls() - &b_star).norm();
    verdict(err < 1e-6, format!("|B_ls - B*|_F = {err:.1e} (< 1e-6) with mu = 1e-9"))
}

fn stlsq_recovery() -> Verdict {
    let lib = PolyLibrary::new(1, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ys: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let us: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let theta = feature_matrix(&ys, &us, &lib).unwrap();
    let targets = DMatrix::from_fn(200, 1, |r, _| 2.0 * ys[r][0] + 0.5 * us[r][0]);
    let m = sysid::fit(&theta, &targets, &lib, 1e-10, 0.05).unwrap();
    let (iy, iu) = (lib.index_of(&[0]).unwrap(), lib.index_of(&[1]).unwrap());
    let c = &m.model.coefficients;
    let spurious = (0..lib.len()).filter(|&i| i != iy && i != iu && c[(i, 0)] != 0.0).count();
    let err = (c[(iy, 0)] - 2.0).abs().max((c[(iu, 0)] - 0.5).abs());
    verdict(
        m.model.nonzeros() == 2 && spurious == 0 && err < 1e-6,
        format!("{} nonzeros of {} terms, {spurious} spurious, coefficient error {err:.1e} (< 1e-6)", m.model.nonzeros(), lib.len()),
    )
}

fn decomposition() -> Verdict {
    let n_t = 3;
    let lib = PolyLibrary::for_terminals(n_t, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut points = 0;
    for _ in 0..100 {
        let held = rng.random_range(0..n_t);
        let rb = rigid_model::<f64>(&lib, held).unwrap();
        let mut m = PolyModel::zeros(lib.clone());
        for d in 0..lib.n_y {
            let gain = rng.random_range(0.2..2.0);
            for i in 0..lib.len() {
                m.coefficients[(i, d)] = gain * rb.coefficients[(i, d)];
            }
        }
        for _ in 0..rng.random_range(0..20) {
            let (i, d) = (rng.random_range(0..lib.len()), rng.random_range(0..lib.n_y));
            m.coefficients[(i, d)] += rng.random_range(-1.0..1.0);
        }
        let dec = decompose_rigid_residual(&m, held).unwrap();
        for _ in 0..1000 {
            let y: Vec<f64> = (0..lib.n_y).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..lib.n_u).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direct = m.predict(&y, &u).unwrap();
            let rebuilt = dec.reconstruct(&y, &u).unwrap();
            worst = direct.iter().zip(&rebuilt).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            points += 1;
        }
    }
    verdict(worst < 1e-10, format!("100 models, {points} points, worst mismatch {worst:.1e} (< 1e-10)"))
}

fn error_ordering(ds: &dataset::Dataset) -> Verdict {
    let table = evaluate_models(ds, &EvalConfig::default()).unwrap();
    let (r, l, c) = (table.row(ModelKind::Rigid), table.row(ModelKind::Ls), table.row(ModelKind::Composite));
    let tr = c.translational_mean <= r.translational_mean && c.translational_mean <= l.translational_mean;
    let rot = c.rotational_mean <= r.rotational_mean && c.rotational_mean <= l.rotational_mean;
    verdict(
        tr && rot,
        format!(
            "{} trajectories; mean max error m / rad: rigid {:.4} / {:.4}, ls {:.4} / {:.4}, composite {:.4} / {:.4}",
            ds.trajectories.len(),
            r.translational_mean,
            r.rotational_mean,
            l.translational_mean,
            l.rotational_mean,
            c.translational_mean,
            c.rotational_mean
        ),
    )
}

fn rigid_r2(ds: &dataset::Dataset) -> Verdict {
    let held = 0;
    let per_dim = sysid::rigid_r_squared(ds, held).unwrap();
    let s = sysid::group_r_squared(&per_dim, held);
    verdict(
        s.translational > s.rotational && s.translational > 0.8,
        format!("rigid-body R²: translational {:.3} > rotational {:.3}, translational > 0.8", s.translational, s.rotational),
    )
}

fn invertibility() -> Verdict {
    let topo = DlonTopology::new(TopologySpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut base = SimState::at_rest(&topo, Pose2::new(0.1, 0.2, 0.3));
    for q in &mut base.joint_angles {
        *q += rng.random_range(-0.2..0.2);
    }
    let clamped = observe(&base, &topo).poses;
    let mut relaxed = Vec::new();
    let mut reproduction = 0.0f64;
    for _ in 0..20 {
        let mut start = base.clone();
        for q in &mut start.joint_angles {
            *q += rng.random_range(-0.15..0.15);
        }
        let eq = match relax_to_equilibrium(&start, &topo, &clamped, &RelaxConfig::default()) {
            Ok(s) => s,
            Err(e) => return verdict(false, format!("relaxation failed: {e}")),
        };
        let y = observe(&eq, &topo);
        reproduction = y.poses.iter().zip(&clamped).map(|(a, b)| a.distance(b)).fold(reproduction, f64::max);
        relaxed.push(eq.joint_angles);
    }
    let mut spread = 0.0f64;
    for i in 0..relaxed.len() {
        for j in i + 1..relaxed.len() {
            let ms = relaxed[i].iter().zip(&relaxed[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / relaxed[i].len() as f64;
            spread = spread.max(ms.sqrt());
        }
    }
    verdict(
        spread < 1e-3 && reproduction < 1e-3,
        format!("20 perturbations, worst pairwise RMS {spread:.1e} rad (< 1e-3), worst reproduction {reproduction:.1e} m (< 1e-3)"),
    )
}

fn mpc_fixed_point_and_convergence() -> Verdict {
    let cfg = MpcConfig::default();
    let field = open_field();
    let model = CompositeModel::rigid_only(0, 3);
    let status = vec![TerminalStatus::Held, TerminalStatus::Free, TerminalStatus::Free];
    let rigid_body = |held: Pose2| {
        let poses = vec![
            held,
            held.compose(&Pose2::new(0.25, 0.1, 0.4)),
            held.compose(&Pose2::new(0.2, -0.15, -0.6)),
        ];
        Output { poses, status: status.clone() }
    };

    let goal = Pose2::new(0.4, 0.3, 0.2);
    let at_goal = mpc::solve(&rigid_body(goal), &model, &goal, &field, &cfg, &Twist2::zero(), None).unwrap();
    let u_norm = at_goal.u_sequence.iter().map(Twist2::norm).fold(0.0, f64::max);

    let mut y = rigid_body(Pose2::new(goal.x - 0.12, goal.y - 0.16, goal.theta));
    let mut u_prev = Twist2::zero();
    let mut warm = None;
    let mut steps = None;
    for k in 0..cfg.max_tm_steps {
        if goal_reached(&y.poses[0], &goal, &cfg) {
            steps = Some(k);
            break;
        }
        let sol = mpc::solve(&y, &model, &goal, &field, &cfg, &u_prev, warm.as_ref()).unwrap();
        u_prev = sol.first();
        let b = rigid_body_matrix(&y.poses, 0);
        y.poses = propagate(&y.poses, &b, &u_prev, cfg.dt);
        warm = Some(sol);
    }
    let reached = steps.map_or(format!("not within {} steps", cfg.max_tm_steps), |k| format!("in {k} of {} steps", cfg.max_tm_steps));
    verdict(
        u_norm < 1e-6 && steps.is_some(),
        format!("at-goal |u| = {u_norm:.1e} (< 1e-6); 0.2 m offset reached d_beta < {:.0e} {reached}", cfg.goal_tol),
    )
}

fn install_sign_pattern() -> Verdict {
    let mut runs: Vec<(InstallOutcome, InstallOutcome)> = Vec::new();
    for name in SCENARIOS {
        let path = scenarios_dir().join(format!("{name}.toml"));
        let one = |m| {
            let mut cfg = ExperimentConfig::load(&path, &[]).unwrap();
            cfg.name = name.into();
            run_install(cfg, Some(m), 0).unwrap().2
        };
        runs.push((one(ModelChoice::Composite), one(ModelChoice::Rigid)));
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (c, r) in &runs {
        let finals_negative = c.report.tms.iter().all(|tm| tm.final_c < 0.0);
        let strictly_safe = !matches!(c.scenario.as_str(), "easy" | "rotated") || c.max_c < 0.0;
        let ordered = !(c.success && r.success) || c.final_c <= r.final_c;
        ok &= c.success && finals_negative && strictly_safe && ordered;
        parts.push(format!(
            "{}: composite {} max_c {:+.1e} final_c {:+.7}, rigid {} final_c {:+.7}",
            c.scenario,
            if c.success { "ok" } else { "FAILED" },
            c.max_c,
            c.final_c,
            if r.success { "ok" } else { "did not finish" },
            r.final_c
        ));
    }
    verdict(ok, parts.join("; "))
}

fn select_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let statuses = [TerminalStatus::Free, TerminalStatus::Held, TerminalStatus::Mated];
    let mut nones = 0;
    for case in 0..1000 {
        let obstacles = (0..rng.random_range(0..4))
            .map(|_| Obstacle { center: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)], radius: rng.random_range(0.01..0.2) })
            .collect();
        let sc = Scenario {
            workspace: Workspace { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 },
            obstacles,
            receptacles: vec![],
            terminal_radius: 0.02,
            clearance: 0.01,
        };
        let n = rng.random_range(1..6);
        let y = Output {
            poses: (0..n).map(|_| Pose2::new(rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1), 0.0)).collect(),
            status: (0..n).map(|_| statuses[rng.random_range(0..3)]).collect(),
        };
        // brute force: every free, currently feasible terminal, ranked by its
        // worst margin, ties to the lower index
        let mut best: Option<(usize, f64)> = None;
        for t in 0..n {
            if y.status[t] != TerminalStatus::Free {
                continue;
            }
            let m: Vec<f64> = sc.terminal_margins(y.poses[t].x, y.poses[t].y).collect();
            if m.iter().any(|v| *v >= 0.0) {
                continue;
            }
            let worst = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best.is_none_or(|(_, b)| worst > b) {
                best = Some((t, worst));
            }
        }
        let expected = best.map(|b| b.0);
        if expected.is_none() {
            nones += 1;
        }
        let got = select_terminal(&y, &sc);
        if got != expected {
            return verdict(false, format!("case {case}: selected {got:?}, brute force {expected:?}"));
        }
    }
    verdict(true, format!("1000 candidate sets agree, {nones} of them select nothing"))
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let bench = |out: &str| {
        let common = Common { scenario: None, seed: 0, out: root.path().join(out), overrides: vec![] };
        cmd_bench(&common, &scenarios_dir(), 1, None).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.path().join(out))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = bench("a");
    let b = bench("b");
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    verdict(a == b, format!("two bench runs, files {} byte-identical: {}", names.join(", "), a == b))
}

fn main() {
    let mut s = Suite { failed: Vec::new() };
    s.check(1, "metric axioms", secs(1), Duration::ZERO, metric_axioms);
    s.check(2, "rigid-body oracle", secs(10), Duration::ZERO, rigid_oracle);
    s.check(3, "LS recovery", secs(1), Duration::ZERO, ls_recovery);
    s.check(4, "STLSQ recovery", secs(1), Duration::ZERO, stlsq_recovery);
    s.check(5, "decomposition exactness", secs(5), Duration::ZERO, decomposition);

    // both dataset criteria are charged for generating the default dataset
    let t = Instant::now();
    let cfg = ExperimentConfig::load(&scenarios_dir().join("easy.toml"), &[]).unwrap();
    let exp = cfg.build().unwrap();
    let ds = dataset::generate(&exp.topology, &exp.config.dataset, 0).unwrap();
    let gen = t.elapsed();
    s.check(6, "prediction error ordering", secs(120), gen, || error_ordering(&ds));
    s.check(7, "rigid-body R² ordering", secs(30), gen, || rigid_r2(&ds));

    s.check(8, "invertibility", secs(30), Duration::ZERO, invertibility);
    s.check(9, "MPC fixed point and convergence", secs(30), Duration::ZERO, mpc_fixed_point_and_convergence);
    s.check(10, "install sign pattern", secs(300), Duration::ZERO, install_sign_pattern);
    s.check(11, "SELECT oracle", secs(1), Duration::ZERO, select_oracle);
    s.check(12, "bench determinism", None, Duration::ZERO, determinism);
    if !s.failed.is_empty() {
        eprintln!("failed criteria: {}", s.failed.join(", "));
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
