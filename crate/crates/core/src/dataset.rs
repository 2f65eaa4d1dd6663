//! Excitation trajectories: generation, filtering, differentiation and
//! persistence.
//!
//! On disk a dataset is a directory holding `meta.json` plus one CSV per
//! trajectory. CSV columns, in order:
//!
//! `t, vx, vy, omega`, then for each terminal `i`:
//! `x{i}, y{i}, theta{i}, dx{i}, dy{i}, dtheta{i}`, then the state snapshot
//! `root_x, root_y, root_theta, q0 .. q{n-1}`.
//!
//! Units are seconds, meters, radians (and their rates). Floats are written
//! in shortest round-trip form, so save/load is lossless.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::se2::{normalize_angle, Pose2, Twist2};
use crate::sim::{self, observe, Anchor, DlonTopology, Output, SimState, TerminalStatus, SIM_RATE};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("series has {0} samples, at least 3 are required")]
    SeriesTooShort(usize),
    #[error("simulation rate {sim} Hz is not a multiple of control rate {control} Hz")]
    IncompatibleRates { sim: f64, control: f64 },
    #[error("trajectory {index} has {len} samples, expected {expected}")]
    RaggedTrajectories { index: usize, len: usize, expected: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] sim::SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Box bounds on `(vx, vy, omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self { v_max: 0.05, omega_max: 0.3 }
    }
}

impl InputBounds {
    pub fn lower(&self) -> [f64; 3] {
        [-self.v_max, -self.v_max, -self.omega_max]
    }

    pub fn upper(&self) -> [f64; 3] {
        [self.v_max, self.v_max, self.omega_max]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Twist2 {
        Twist2::new(
            rng.random_range(-self.v_max..=self.v_max),
            rng.random_range(-self.v_max..=self.v_max),
            rng.random_range(-self.omega_max..=self.omega_max),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub trajectories: usize,
    /// Seconds of excitation per trajectory, burn-in included.
    pub duration: f64,
    pub burn_in: f64,
    pub sim_rate: f64,
    pub control_rate: f64,
    pub inputs: InputBounds,
    /// Pose of terminal 0 at the start of every trajectory.
    pub start: Pose2,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            trajectories: 100,
            duration: 15.0,
            burn_in: 2.0,
            sim_rate: SIM_RATE,
            control_rate: 30.0,
            inputs: InputBounds::default(),
            start: Pose2::identity(),
        }
    }
}

/// Raw simulator-rate recording of one excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub u: Twist2,
    pub states: Vec<SimState>,
    pub outputs: Vec<Output>,
}

/// One processed sample `{x, y, y_dot, u}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: SimState,
    pub y: Output,
    pub y_dot: Vec<Twist2>,
    pub u: Twist2,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sim_rate: f64,
    pub control_rate: f64,
    pub seed: u64,
    pub topology_hash: String,
    pub n_terminals: usize,
    pub n_joints: usize,
    pub samples_per_trajectory: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Rejects trajectories of unequal length.
    pub fn new(trajectories: Vec<Trajectory>, mut meta: DatasetMeta) -> Result<Self, DatasetError> {
        let expected = trajectories.first().map_or(0, Trajectory::len);
        for (index, t) in trajectories.iter().enumerate() {
            if t.len() != expected {
                return Err(DatasetError::RaggedTrajectories { index, len: t.len(), expected });
            }
        }
        meta.samples_per_trajectory = expected;
        meta.files = (0..trajectories.len()).map(trajectory_file_name).collect();
        Ok(Self { trajectories, meta })
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.meta.control_rate
    }
}

fn trajectory_file_name(i: usize) -> String {
    format!("traj_{i:04}.csv")
}

/// Seed of trajectory `index` within a dataset seeded by `seed`.
pub fn trajectory_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Hold terminal 0, apply one constant random input for `cfg.duration`
/// seconds at the simulation rate and drop the burn-in prefix.
pub fn excite(topo: &DlonTopology, cfg: &DatasetConfig, seed: u64) -> Result<RawTrajectory, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = cfg.inputs.sample(&mut rng);
    excite_with(topo, cfg, u)
}

/// As [`excite`] with a given input.
pub fn excite_with(topo: &DlonTopology, cfg: &DatasetConfig, u: Twist2) -> Result<RawTrajectory, DatasetError> {
    let dt = 1.0 / cfg.sim_rate;
    let total = (cfg.duration * cfg.sim_rate).round() as usize;
    let skip = (cfg.burn_in * cfg.sim_rate).round() as usize;
    let mut state = SimState::at_rest(topo, cfg.start);
    state.terminal_status[0] = TerminalStatus::Held;
    state = state.rerooted(topo, Anchor::Terminal(0));

    let mut states = Vec::with_capacity(total.saturating_sub(skip));
    let mut outputs = Vec::with_capacity(total.saturating_sub(skip));
    for k in 0..total {
        if k >= skip {
            outputs.push(observe(&state, topo));
            states.push(state.clone());
        }
        state = sim::step(&state, topo, &u, dt)?;
    }
    Ok(RawTrajectory { u, states, outputs })
}

/// Central differences on interior samples, one-sided first-order differences
/// at the ends. Channels flagged in `angular` difference the wrapped increment.
pub fn differentiate(series: &[Vec<f64>], rate: f64, angular: &[bool]) -> Result<Vec<Vec<f64>>, DatasetError> {
    let n = series.len();
    if n < 3 {
        return Err(DatasetError::SeriesTooShort(n));
    }
    let inc = |a: &[f64], b: &[f64], c: usize| {
        let d = b[c] - a[c];
        if angular.get(c).copied().unwrap_or(false) {
            normalize_angle(d)
        } else {
            d
        }
    };
    let dims = series[0].len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b, scale) = if k == 0 {
            (&series[0], &series[1], rate)
        } else if k == n - 1 {
            (&series[n - 2], &series[n - 1], rate)
        } else {
            (&series[k - 1], &series[k + 1], 0.5 * rate)
        };
        out.push((0..dims).map(|c| inc(a, b, c) * scale).collect());
    }
    Ok(out)
}

/// Terminal twists of an output series.
pub fn differentiate_outputs(ys: &[Output], rate: f64) -> Result<Vec<Vec<Twist2>>, DatasetError> {
    let series: Vec<Vec<f64>> = ys.iter().map(Output::to_vec).collect();
    let angular: Vec<bool> = (0..series.first().map_or(0, Vec::len)).map(|c| c % 3 == 2).collect();
    let d = differentiate(&series, rate, &angular)?;
    Ok(d.into_iter()
        .map(|row| row.chunks_exact(3).map(|c| Twist2::new(c[0], c[1], c[2])).collect())
        .collect())
}

fn decimation_factor(sim_rate: f64, control_rate: f64) -> Result<usize, DatasetError> {
    let ratio = sim_rate / control_rate;
    let w = ratio.round();
    if !(control_rate > 0.0) || w < 1.0 || (ratio - w).abs() > 1e-9 {
        return Err(DatasetError::IncompatibleRates { sim: sim_rate, control: control_rate });
    }
    Ok(w as usize)
}

/// Block moving average of width `F_s / F_c` followed by keeping one sample
/// per block. Angle channels are unwrapped before averaging and re-wrapped.
pub fn downsample(
    series: &[Vec<f64>],
    sim_rate: f64,
    control_rate: f64,
    angular: &[bool],
) -> Result<Vec<Vec<f64>>, DatasetError> {
    let w = decimation_factor(sim_rate, control_rate)?;
    let unwrapped = unwrap(series, angular);
    let inv = 1.0 / w as f64;
    Ok(unwrapped
        .chunks_exact(w)
        .map(|block| {
            (0..block[0].len())
                .map(|c| {
                    // mean as offset from the first sample keeps constant blocks exact
                    let base = block[0][c];
                    let m = base + block.iter().map(|r| r[c] - base).sum::<f64>() * inv;
                    if angular.get(c).copied().unwrap_or(false) {
                        normalize_angle(m)
                    } else {
                        m
                    }
                })
                .collect()
        })
        .collect())
}

fn unwrap(series: &[Vec<f64>], angular: &[bool]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(series.len());
    for (k, row) in series.iter().enumerate() {
        let mut r = row.clone();
        if k > 0 {
            for c in 0..r.len() {
                if angular.get(c).copied().unwrap_or(false) {
                    let prev = out[k - 1][c];
                    r[c] = prev + normalize_angle(row[c] - prev);
                }
            }
        }
        out.push(r);
    }
    out
}

fn state_vector(s: &SimState) -> Vec<f64> {
    let mut v = vec![s.root_pose.x, s.root_pose.y, s.root_pose.theta];
    v.extend_from_slice(&s.joint_angles);
    v
}

/// Filter and downsample a raw recording, then differentiate at the control rate.
///
/// The state is filtered and `y` recomputed from it, so every sample keeps
/// `y == observe(x)`.
pub fn process(raw: &RawTrajectory, topo: &DlonTopology, cfg: &DatasetConfig) -> Result<Trajectory, DatasetError> {
    let w = decimation_factor(cfg.sim_rate, cfg.control_rate)?;
    let series: Vec<Vec<f64>> = raw.states.iter().map(state_vector).collect();
    let mut angular = vec![false; series.first().map_or(3, Vec::len)];
    angular[2] = true;
    let filtered = downsample(&series, cfg.sim_rate, cfg.control_rate, &angular)?;
    let template = raw.states.first().cloned().unwrap_or_else(|| SimState::at_rest(topo, cfg.start));
    let xs: Vec<SimState> = filtered
        .iter()
        .map(|v| SimState {
            root_pose: Pose2::new(v[0], v[1], v[2]),
            joint_angles: v[3..].to_vec(),
            ..template.clone()
        })
        .collect();
    let ys: Vec<Output> = xs.iter().map(|x| observe(x, topo)).collect();
    let y_dot = differentiate_outputs(&ys, cfg.control_rate)?;
    let t0 = cfg.burn_in + 0.5 * (w as f64 - 1.0) / cfg.sim_rate;
    let samples = xs
        .into_iter()
        .zip(ys)
        .zip(y_dot)
        .enumerate()
        .map(|(k, ((x, y), y_dot))| TrajectorySample { t: t0 + k as f64 / cfg.control_rate, x, y, y_dot, u: raw.u })
        .collect();
    Ok(Trajectory { samples })
}

/// Generate a full dataset. Trajectories run in parallel; the result only
/// depends on `(topo, cfg, seed)`.
pub fn generate(topo: &DlonTopology, cfg: &DatasetConfig, seed: u64) -> Result<Dataset, DatasetError> {
    let trajectories = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let raw = excite(topo, cfg, trajectory_seed(seed, i))?;
            process(&raw, topo, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta = DatasetMeta {
        sim_rate: cfg.sim_rate,
        control_rate: cfg.control_rate,
        seed,
        topology_hash: topo.hash(),
        n_terminals: topo.n_terminals(),
        n_joints: topo.n_joints(),
        samples_per_trajectory: 0,
        files: vec![],
    };
    Dataset::new(trajectories, meta)
}

fn csv_header(n_terminals: usize, n_joints: usize) -> String {
    let mut cols: Vec<String> = ["t", "vx", "vy", "omega"].iter().map(|s| s.to_string()).collect();
    for i in 0..n_terminals {
        for c in ["x", "y", "theta", "dx", "dy", "dtheta"] {
            cols.push(format!("{c}{i}"));
        }
    }
    cols.extend(["root_x", "root_y", "root_theta"].iter().map(|s| s.to_string()));
    cols.extend((0..n_joints).map(|j| format!("q{j}")));
    cols.join(",")
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&dataset.meta).expect("metadata serializes");
    fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;
    let header = csv_header(dataset.meta.n_terminals, dataset.meta.n_joints);
    for (traj, name) in dataset.trajectories.iter().zip(&dataset.meta.files) {
        let path = dir.join(name);
        let mut out = String::with_capacity(traj.len() * 512);
        out.push_str(&header);
        out.push('\n');
        for s in &traj.samples {
            let mut row: Vec<f64> = vec![s.t, s.u.vx, s.u.vy, s.u.omega];
            for (p, d) in s.y.poses.iter().zip(&s.y_dot) {
                row.extend([p.x, p.y, p.theta, d.vx, d.vy, d.omega]);
            }
            row.extend(state_vector(&s.x));
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(out.as_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Load a dataset, checking it was recorded on `topo`.
pub fn load(dir: &Path, topo: &DlonTopology) -> Result<Dataset, DatasetError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| DatasetError::SchemaMismatch(format!("meta.json: {e}")))?;
    if meta.topology_hash != topo.hash() {
        return Err(DatasetError::SchemaMismatch(format!(
            "topology hash {} does not match {}",
            meta.topology_hash,
            topo.hash()
        )));
    }
    if meta.n_terminals != topo.n_terminals() || meta.n_joints != topo.n_joints() {
        return Err(DatasetError::SchemaMismatch("terminal or joint count differs".into()));
    }
    let header = csv_header(meta.n_terminals, meta.n_joints);
    let width = header.split(',').count();
    let mut template = SimState::at_rest(topo, Pose2::identity());
    template.terminal_status[0] = TerminalStatus::Held;
    template.anchor = Anchor::Terminal(0);

    let mut trajectories = Vec::with_capacity(meta.files.len());
    for name in &meta.files {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines();
        if lines.next() != Some(header.as_str()) {
            return Err(DatasetError::SchemaMismatch(format!("{name}: unexpected header")));
        }
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(str::parse::<f64>)
                .collect::<Result<_, _>>()
                .map_err(|e| DatasetError::SchemaMismatch(format!("{name}:{}: {e}", ln + 2)))?;
            if row.len() != width {
                return Err(DatasetError::SchemaMismatch(format!("{name}:{}: {} columns", ln + 2, row.len())));
            }
            let nt = meta.n_terminals;
            let mut poses = Vec::with_capacity(nt);
            let mut y_dot = Vec::with_capacity(nt);
            for i in 0..nt {
                let c = &row[4 + 6 * i..10 + 6 * i];
                poses.push(Pose2 { x: c[0], y: c[1], theta: c[2] });
                y_dot.push(Twist2::new(c[3], c[4], c[5]));
            }
            let sv = &row[4 + 6 * nt..];
            let x = SimState {
                root_pose: Pose2 { x: sv[0], y: sv[1], theta: sv[2] },
                joint_angles: sv[3..].to_vec(),
                ..template.clone()
            };
            let y = Output { poses, status: x.terminal_status.clone() };
            samples.push(TrajectorySample { t: row[0], x, y, y_dot, u: Twist2::new(row[1], row[2], row[3]) });
        }
        trajectories.push(Trajectory { samples });
    }
    Dataset::new(trajectories, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TopologySpec;

    #[test]
    fn differentiate_ramp_and_constant() {
        let ramp: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64 * 0.5]).collect();
        let d = differentiate(&ramp, 30.0, &[false]).unwrap();
        assert!(d.iter().all(|r| (r[0] - 15.0).abs() < 1e-12));
        let c: Vec<Vec<f64>> = vec![vec![2.0, 1.0]; 5];
        let d = differentiate(&c, 30.0, &[false, true]).unwrap();
        assert!(d.iter().flatten().all(|v| *v == 0.0));
        assert!(matches!(differentiate(&c[..2], 30.0, &[false]), Err(DatasetError::SeriesTooShort(2))));
    }

    #[test]
    fn differentiate_sine() {
        let rate = 240.0;
        let s: Vec<Vec<f64>> = (0..=240).map(|k| vec![(2.0 * std::f64::consts::PI * k as f64 / rate).sin()]).collect();
        let d = differentiate(&s, rate, &[false]).unwrap();
        let err = d
            .iter()
            .enumerate()
            .map(|(k, r)| (r[0] - 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * k as f64 / rate).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn differentiate_across_wrap() {
        let s = vec![vec![3.1], vec![-3.1], vec![-3.0]];
        let d = differentiate(&s, 1.0, &[true]).unwrap();
        let expect = (2.0 * std::f64::consts::PI - 6.2) * 1.0;
        assert!((d[0][0] - expect).abs() < 1e-12);
    }

    #[test]
    fn downsample_rates() {
        let s: Vec<Vec<f64>> = (0..240).map(|k| vec![k as f64]).collect();
        let d = downsample(&s, 240.0, 30.0, &[false]).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d[0][0], 3.5);
        assert_eq!(d[1][0], 11.5);
        assert_eq!(downsample(&s, 240.0, 240.0, &[false]).unwrap(), s);
        let c = vec![vec![0.25, 3.1]; 16];
        assert_eq!(downsample(&c, 240.0, 30.0, &[false, true]).unwrap(), vec![vec![0.25, 3.1]; 2]);
        assert!(matches!(downsample(&s, 240.0, 70.0, &[false]), Err(DatasetError::IncompatibleRates { .. })));
    }

    #[test]
    fn zero_input_gives_constant_trajectory() {
        let topo = DlonTopology::new(TopologySpec::default()).unwrap();
        let cfg = DatasetConfig { duration: 1.0, burn_in: 0.5, ..Default::default() };
        let raw = excite_with(&topo, &cfg, Twist2::zero()).unwrap();
        assert_eq!(raw.states.len(), 120);
        assert!(raw.outputs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn retained_sample_count() {
        let cfg = DatasetConfig::default();
        let total = (cfg.duration * cfg.sim_rate).round() as usize;
        let skip = (cfg.burn_in * cfg.sim_rate).round() as usize;
        assert_eq!(total - skip, 3120);
    }
}
