use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use dlon_core::config::{Experiment, ExperimentConfig};
use dlon_core::dataset::{self, Dataset};
use dlon_core::models::{evaluate_models, ErrorTable, EvalConfig, ModelKind};
use dlon_core::planner::{events_csv, install_dlon, InstallReport, ModelChoice};
use dlon_core::se2::Pose2;
use dlon_core::sim::{self, link_frames, observe, DlonTopology, SimState};
use dlon_core::sysid::{self, PolyLibrary, RSquaredSummary};

use crate::artifacts::Staging;
use crate::svg::{Canvas, PALETTE};
use crate::{CliError, Common};

/// Used when no `--scenario` is given.
const DEFAULT_EXPERIMENT: &str = include_str!("../../../scenarios/easy.toml");

/// The four benchmark problems, by file stem.
pub const SCENARIOS: [&str; 4] = ["easy", "rotated", "obstacles", "wall"];

/// Largest random joint offset of a perturbed start, rad.
const START_JITTER: f64 = 0.05;

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p, overrides)?,
        None => ExperimentConfig::from_toml(DEFAULT_EXPERIMENT, overrides)?,
    };
    if cfg.name.is_empty() {
        cfg.name = path.and_then(|p| p.file_stem()).map_or("easy".into(), |s| s.to_string_lossy().into_owned());
    }
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifacts serialize") + "\n"
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

fn write_run_info(stage: &Staging, command: &str, seed: u64, config: &ExperimentConfig) -> Result<(), CliError> {
    stage.write("run.json", &to_json(&RunInfo { command, seed, config }))
}

/// Initial shape for `seed`: the authored start for seed 0, otherwise every
/// joint offset by up to `START_JITTER` rad. Settled before use.
pub fn start_state(exp: &Experiment, seed: u64) -> SimState {
    let mut s = exp.initial_state.clone();
    if seed != 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in &mut s.joint_angles {
            *q += rng.random_range(-START_JITTER..=START_JITTER);
        }
    }
    let dt = 1.0 / exp.config.model.sim_rate;
    for _ in 0..(exp.config.model.settle_seconds / dt).round() as usize {
        s = sim::settle(&s, &exp.topology, dt);
    }
    s
}

fn draw_network(c: &mut Canvas, state: &SimState, topo: &DlonTopology, color: &str) {
    for (f, l) in link_frames(state, topo).iter().zip(topo.links()) {
        let (s, k) = f.theta.sin_cos();
        c.segment([f.x, f.y], [f.x + l.length * k, f.y + l.length * s], color, 2.0);
    }
}

fn pose_columns(n_t: usize) -> String {
    (0..n_t).map(|t| format!(",x{t}_m,y{t}_m,theta{t}_rad")).collect()
}

pub fn cmd_simulate(common: &Common, seconds: f64) -> Result<PathBuf, CliError> {
    let cfg = load_config(common.scenario.as_deref(), &common.overrides)?;
    let exp = cfg.build()?;
    let topo = &exp.topology;
    let start = start_state(&exp, 0);
    let mut state = sim::grasp(&start, topo, &exp.scenario, 0)?;
    let u = exp.config.dataset.inputs.sample(&mut ChaCha8Rng::seed_from_u64(common.seed));
    let rate = exp.config.model.sim_rate;
    let every = (rate / exp.config.dataset.control_rate).round().max(1.0) as usize;

    let n_t = topo.n_terminals();
    let mut csv = format!("t_s{}\n", pose_columns(n_t));
    let mut paths = vec![Vec::new(); n_t];
    let total = (seconds * rate).round() as usize;
    for k in 0..=total {
        if k % every == 0 {
            let y = observe(&state, topo);
            let _ = write!(csv, "{}", k as f64 / rate);
            for (t, p) in y.poses.iter().enumerate() {
                let _ = write!(csv, ",{},{},{}", p.x, p.y, p.theta);
                paths[t].push([p.x, p.y]);
            }
            csv.push('\n');
        }
        if k < total {
            state = sim::step(&state, topo, &u, 1.0 / rate)?;
        }
    }

    let stage = Staging::new(&common.out, common.seed)?;
    write_run_info(&stage, "simulate", common.seed, &exp.config)?;
    stage.write("trajectory.csv", &csv)?;
    let mut c = Canvas::new(&exp.scenario, &format!("simulate {} seed={} u=({}, {}, {})", exp.config.name, common.seed, u.vx, u.vy, u.omega));
    draw_network(&mut c, &start, topo, "#bbb");
    draw_network(&mut c, &state, topo, "#444");
    for (t, p) in paths.iter().enumerate() {
        c.polyline(p, PALETTE[t % PALETTE.len()], 1.5);
    }
    stage.write("snapshot.svg", &c.finish())?;
    stage.commit()
}

pub fn cmd_collect(common: &Common, trajectories: Option<usize>) -> Result<Dataset, CliError> {
    let mut cfg = load_config(common.scenario.as_deref(), &common.overrides)?;
    if let Some(n) = trajectories {
        cfg.dataset.trajectories = n;
    }
    let exp = cfg.build()?;
    let ds = dataset::generate(&exp.topology, &exp.config.dataset, common.seed)?;
    let stage = Staging::new(&common.out, common.seed)?;
    write_run_info(&stage, "collect", common.seed, &exp.config)?;
    dataset::save(&ds, stage.path())?;
    let dir = stage.commit()?;
    println!("{} trajectories of {} samples in {}", ds.trajectories.len(), ds.meta.samples_per_trajectory, dir.display());
    Ok(ds)
}

fn load_dataset(dir: &Path, topo: &DlonTopology) -> Result<Dataset, CliError> {
    if !dir.join("meta.json").is_file() {
        return Err(CliError::MissingDataset(dir.to_path_buf()));
    }
    let ds = dataset::load(dir, topo)?;
    if ds.is_empty() || ds.meta.samples_per_trajectory == 0 {
        return Err(CliError::MissingDataset(dir.to_path_buf()));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize)]
pub struct SysidReport {
    pub seed: u64,
    pub dataset_seed: u64,
    pub lambda: f64,
    pub threshold: f64,
    pub validation_error: f64,
    pub nonzeros: usize,
    /// Rigid-body gain per output dimension.
    pub c: Vec<f64>,
    pub c_positive_definite: bool,
    pub residual_nonzeros: usize,
    pub sparse_r2: RSquaredSummary,
    pub rigid_r2: RSquaredSummary,
    pub sparse_r2_per_dim: Vec<f64>,
    pub rigid_r2_per_dim: Vec<f64>,
}

/// R² of `coefficients` on every sample, the held terminal reported as 1.
fn sparse_r_squared(ds: &Dataset, lib: &PolyLibrary, coefficients: &DMatrix<f64>, held: usize) -> Result<Vec<f64>, CliError> {
    let (ys, us, targets) = sysid::dataset_rows(ds);
    let pred = sysid::feature_matrix(&ys, &us, lib)? * coefficients;
    let keep: Vec<usize> = (0..targets.ncols()).filter(|d| d / 3 != held).collect();
    let free = sysid::r_squared(&pred.select_columns(&keep), &targets.select_columns(&keep))?;
    let mut out = vec![1.0; targets.ncols()];
    for (k, d) in keep.iter().enumerate() {
        out[*d] = free[k];
    }
    Ok(out)
}

pub fn cmd_sysid(common: &Common, dataset_dir: &Path, lambda: f64, threshold: f64) -> Result<SysidReport, CliError> {
    let cfg = load_config(common.scenario.as_deref(), &common.overrides)?;
    let exp = cfg.build()?;
    let ds = load_dataset(dataset_dir, &exp.topology)?;
    let n_t = exp.topology.n_terminals();
    let held = 0;
    let lib = PolyLibrary::for_terminals(n_t, 2);

    // hold out every fifth trajectory for the grid search
    let split = |keep_val: bool| Dataset {
        trajectories: ds
            .trajectories
            .iter()
            .enumerate()
            .filter(|(i, _)| (i % 5 == 4) == keep_val || ds.trajectories.len() < 5)
            .map(|(_, t)| t.clone())
            .collect(),
        meta: ds.meta.clone(),
    };
    let rows = |d: &Dataset| -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
        let (ys, us, targets) = sysid::dataset_rows(d);
        Ok((sysid::feature_matrix(&ys, &us, &lib)?, targets))
    };
    let train = rows(&split(false))?;
    let val = rows(&split(true))?;
    let (model, validation_error) = sysid::fit_grid((&train.0, &train.1), (&val.0, &val.1), &lib, lambda, threshold)?;
    let dec = sysid::decompose_rigid_residual(&model.model, held)?;
    let sparse = sparse_r_squared(&ds, &lib, &model.model.coefficients, held)?;
    let rigid = sysid::rigid_r_squared(&ds, held)?;

    let report = SysidReport {
        seed: common.seed,
        dataset_seed: ds.meta.seed,
        lambda: model.lambda,
        threshold: model.threshold,
        validation_error,
        nonzeros: model.model.nonzeros(),
        c_positive_definite: dec.is_positive_definite(),
        c: dec.c.clone(),
        residual_nonzeros: dec.residual.nonzeros(),
        sparse_r2: sysid::group_r_squared(&sparse, held),
        rigid_r2: sysid::group_r_squared(&rigid, held),
        sparse_r2_per_dim: sparse,
        rigid_r2_per_dim: rigid,
    };

    let mut r2_csv = String::from("dim,r2_sparse,r2_rigid,rigid_gain_c\n");
    for d in 0..lib.n_y {
        let _ = writeln!(r2_csv, "{},{},{},{}", lib.output_name(d), report.sparse_r2_per_dim[d], report.rigid_r2_per_dim[d], report.c[d]);
    }
    let equations = model.model.equations();
    let stage = Staging::new(&common.out, common.seed)?;
    write_run_info(&stage, "sysid", common.seed, &exp.config)?;
    stage.write("model.txt", &model.to_text())?;
    stage.write("equations.txt", &equations)?;
    stage.write("residual.txt", &dec.residual.equations())?;
    stage.write("r_squared.csv", &r2_csv)?;
    stage.write("report.json", &to_json(&report))?;
    stage.commit()?;

    print!("{equations}");
    println!("\nR² (free terminals)   translational  rotational");
    println!("sparse model          {:>13.3}  {:>10.3}", report.sparse_r2.translational, report.sparse_r2.rotational);
    println!("rigid body            {:>13.3}  {:>10.3}", report.rigid_r2.translational, report.rigid_r2.rotational);
    Ok(report)
}

pub fn cmd_eval_models(common: &Common, dataset_dir: &Path) -> Result<ErrorTable, CliError> {
    let cfg = load_config(common.scenario.as_deref(), &common.overrides)?;
    let exp = cfg.build()?;
    let ds = load_dataset(dataset_dir, &exp.topology)?;
    let table = evaluate_models(&ds, &EvalConfig::default()).map_err(|e| CliError::Other(e.to_string()))?;

    let mut per = String::from("trajectory");
    for k in ModelKind::ALL {
        let _ = write!(per, ",{0}_translational_m,{0}_rotational_rad", k.name());
    }
    per.push('\n');
    for (i, row) in table.per_trajectory.iter().enumerate() {
        let _ = write!(per, "{i}");
        for e in row {
            let _ = write!(per, ",{},{}", e.translational, e.rotational);
        }
        per.push('\n');
    }
    #[derive(Serialize)]
    struct Out<'a> {
        seed: u64,
        dataset_seed: u64,
        table: &'a ErrorTable,
    }
    let stage = Staging::new(&common.out, common.seed)?;
    write_run_info(&stage, "eval-models", common.seed, &exp.config)?;
    stage.write("prediction_errors.csv", &table.to_csv())?;
    stage.write("prediction_errors_per_trajectory.csv", &per)?;
    stage.write("prediction_errors.json", &to_json(&Out { seed: common.seed, dataset_seed: ds.meta.seed, table: &table }))?;
    stage.commit()?;
    print!("{}", table.to_csv());
    Ok(table)
}

/// Install result plus what it was run on.
#[derive(Debug, Clone, Serialize)]
pub struct InstallOutcome {
    pub scenario: String,
    pub model: ModelChoice,
    pub seed: u64,
    pub success: bool,
    pub max_c: f64,
    pub final_c: f64,
    pub report: InstallReport,
}

/// Run one installation without writing anything.
pub fn run_install(mut cfg: ExperimentConfig, model: Option<ModelChoice>, seed: u64) -> Result<(Experiment, SimState, InstallOutcome), CliError> {
    if let Some(m) = model {
        cfg.model.model = m;
    }
    let exp = cfg.build()?;
    let start = start_state(&exp, seed);
    let report = install_dlon(&start, &exp.topology, &exp.scenario, &exp.config.controller, &exp.config.model)?;
    let outcome = InstallOutcome {
        scenario: exp.config.name.clone(),
        model: exp.config.model.model,
        seed,
        success: report.success,
        max_c: report.max_c(),
        final_c: report.final_c(),
        report,
    };
    Ok((exp, start, outcome))
}

fn tm_csv(o: &InstallOutcome) -> String {
    let mut s = String::from("scenario,model,seed,tm,held_terminal,steps_used,goal_reached,max_c_m,final_c_m\n");
    for (i, tm) in o.report.tms.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{i},{},{},{},{},{}",
            o.scenario, o.model, o.seed, tm.held_terminal, tm.steps_used, tm.goal_reached, tm.max_c, tm.final_c
        );
    }
    s
}

pub fn cmd_install(common: &Common, model: Option<ModelChoice>) -> Result<InstallOutcome, CliError> {
    let cfg = load_config(common.scenario.as_deref(), &common.overrides)?;
    let (exp, start, outcome) = run_install(cfg, model, common.seed)?;
    let topo = &exp.topology;
    let n_t = topo.n_terminals();

    let mut c = Canvas::new(
        &exp.scenario,
        &format!("install {} model={} seed={} success={}", outcome.scenario, outcome.model, outcome.seed, outcome.success),
    );
    draw_network(&mut c, &start, topo, "#bbb");
    let mut paths = vec![Vec::new(); n_t];
    for (t, p) in observe(&start, topo).poses.iter().enumerate() {
        paths[t].push([p.x, p.y]);
    }
    for e in &outcome.report.events {
        for (t, path) in paths.iter_mut().enumerate() {
            path.push([e.y[3 * t], e.y[3 * t + 1]]);
        }
    }
    for (t, p) in paths.iter().enumerate() {
        c.polyline(p, PALETTE[t % PALETTE.len()], 1.5);
    }
    for (t, v) in outcome.report.final_output.chunks(3).enumerate() {
        c.pose_marker(&Pose2::new(v[0], v[1], v[2]), PALETTE[t % PALETTE.len()], false);
    }

    let mut margins = String::from("time_s,held,c_max_m,alpha\n");
    for e in &outcome.report.events {
        let _ = writeln!(margins, "{},{},{},{}", e.time, e.held, e.c_max, e.alpha);
    }

    let stage = Staging::new(&common.out, common.seed)?;
    write_run_info(&stage, "install", common.seed, &exp.config)?;
    stage.write("report.json", &to_json(&outcome))?;
    stage.write("manipulations.csv", &tm_csv(&outcome))?;
    stage.write("events.csv", &events_csv(&outcome.report.events))?;
    stage.write("margins.csv", &margins)?;
    stage.write("trajectory.svg", &c.finish())?;
    stage.commit()?;

    println!("scenario,model,seed,success,max_c_m,final_c_m");
    println!("{},{},{},{},{:.4},{:.4}", outcome.scenario, outcome.model, outcome.seed, outcome.success, outcome.max_c, outcome.final_c);
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRun {
    pub scenario: String,
    pub model: ModelChoice,
    pub seed: u64,
    /// `success`, `failed` or `error`
    pub status: String,
    pub error: Option<String>,
    pub manipulations: usize,
    pub control_steps: usize,
    pub max_c: f64,
    pub final_c: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub scenario: String,
    pub model: ModelChoice,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Means over successful runs; NaN when there are none.
    pub mean_max_c: f64,
    pub mean_final_c: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub base_seed: u64,
    pub seeds: u64,
    pub runs: Vec<BenchRun>,
    pub summary: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn all_succeeded(&self) -> bool {
        self.runs.iter().all(|r| r.status == "success")
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("scenario,model,seed,status,manipulations,control_steps,max_c_m,final_c_m\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.scenario, r.model, r.seed, r.status, r.manipulations, r.control_steps, r.max_c, r.final_c
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("scenario,model,runs,successes,success_rate,mean_max_c_m,mean_final_c_m\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.scenario, r.model, r.runs, r.successes, r.success_rate, r.mean_max_c, r.mean_final_c
            );
        }
        s
    }
}

fn bench_one(scenarios: &Path, name: &str, model: ModelChoice, seed: u64, overrides: &[String]) -> BenchRun {
    let result = load_config(Some(&scenarios.join(format!("{name}.toml"))), overrides).and_then(|cfg| run_install(cfg, Some(model), seed));
    let mut run = BenchRun {
        scenario: name.to_string(),
        model,
        seed,
        status: "error".into(),
        error: None,
        manipulations: 0,
        control_steps: 0,
        max_c: f64::NAN,
        final_c: f64::NAN,
    };
    match result {
        Ok((_, _, o)) => {
            run.status = if o.success { "success" } else { "failed" }.into();
            run.manipulations = o.report.tms.len();
            run.control_steps = o.report.tms.iter().map(|t| t.steps_used).sum();
            run.max_c = o.max_c;
            run.final_c = o.final_c;
        }
        Err(e) => run.error = Some(e.to_string()),
    }
    run
}

pub fn cmd_bench(common: &Common, scenarios: &Path, seeds: u64, jobs: Option<usize>) -> Result<BenchReport, CliError> {
    if !scenarios.is_dir() {
        return Err(CliError::Io {
            path: scenarios.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "scenario directory not found"),
        });
    }
    let mut plan = Vec::new();
    for name in SCENARIOS {
        for model in [ModelChoice::Rigid, ModelChoice::Composite] {
            for k in 0..seeds {
                plan.push((name, model, common.seed + k));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let runs: Vec<BenchRun> = pool.install(|| {
        plan.par_iter().map(|&(name, model, seed)| bench_one(scenarios, name, model, seed, &common.overrides)).collect()
    });

    let mut summary = Vec::new();
    for name in SCENARIOS {
        for model in [ModelChoice::Rigid, ModelChoice::Composite] {
            let mine: Vec<&BenchRun> = runs.iter().filter(|r| r.scenario == name && r.model == model).collect();
            let ok: Vec<&&BenchRun> = mine.iter().filter(|r| r.status == "success").collect();
            let mean = |f: fn(&BenchRun) -> f64| {
                if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64 }
            };
            summary.push(BenchSummary {
                scenario: name.to_string(),
                model,
                runs: mine.len(),
                successes: ok.len(),
                success_rate: ok.len() as f64 / mine.len().max(1) as f64,
                mean_max_c: mean(|r| r.max_c),
                mean_final_c: mean(|r| r.final_c),
            });
        }
    }
    let report = BenchReport { base_seed: common.seed, seeds, runs, summary };

    let stage = Staging::new(&common.out, common.seed)?;
    stage.write("runs.csv", &report.runs_csv())?;
    stage.write("summary.csv", &report.summary_csv())?;
    stage.write("bench.json", &to_json(&report))?;
    stage.commit()?;
    print!("{}", report.summary_csv());
    for r in report.runs.iter().filter(|r| r.status != "success") {
        eprintln!("{} {} seed {}: {}{}", r.scenario, r.model, r.seed, r.status, r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default());
    }
    Ok(report)
}
