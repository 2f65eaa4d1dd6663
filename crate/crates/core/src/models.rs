//! Control-oriented input matrices mapping the held terminal's twist to all
//! terminal twists: the rigid-body matrix, a windowed least-squares fit, and
//! their discounted blend.

pub mod eval;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky, cholesky_solve};
use crate::scalar::Real;
use crate::se2::{Pose2, Twist2};

pub use eval::{evaluate_models, AlphaSchedule, ErrorRow, ErrorTable, EvalConfig, EvalError, MaxError, ModelKind};

/// Stacked rigid-body input matrix (`3 n_t x 3`). Block `t` is
/// `[[1, 0, y_h - y_t], [0, 1, x_t - x_h], [0, 0, 1]]`.
pub fn rigid_body_matrix<T: Real>(poses: &[Pose2<T>], held: usize) -> DMatrix<T> {
    let h = poses[held];
    let mut b = DMatrix::<T>::zeros(3 * poses.len(), 3);
    for (t, p) in poses.iter().enumerate() {
        let r = 3 * t;
        b[(r, 0)] = T::one();
        b[(r + 1, 1)] = T::one();
        b[(r + 2, 2)] = T::one();
        if t != held {
            b[(r, 2)] = h.y - p.y;
            b[(r + 1, 2)] = p.x - h.x;
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RigidBodyModel {
    pub held: usize,
}

impl RigidBodyModel {
    pub fn matrix<T: Real>(&self, poses: &[Pose2<T>]) -> DMatrix<T> {
        rigid_body_matrix(poses, self.held)
    }
}

/// Windowed ridge least-squares fit of `y_dot = B u` over the last `N_e` pairs.
#[derive(Debug, Clone)]
pub struct LocalLinearModel<T: Real = f64> {
    capacity: usize,
    outputs: usize,
    ridge: T,
    window: VecDeque<(DVector<T>, [T; 3])>,
    b_ls: DMatrix<T>,
}

impl<T: Real> LocalLinearModel<T> {
    /// `outputs` is the stacked output dimension `3 n_t`. `ridge` is applied
    /// after scaling the window inputs to unit RMS.
    pub fn new(outputs: usize, capacity: usize, ridge: T) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            outputs,
            ridge,
            window: VecDeque::with_capacity(capacity),
            b_ls: DMatrix::zeros(outputs, 3),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn clear(&mut self) {
        self.window.clear();
        self.b_ls = DMatrix::zeros(self.outputs, 3);
    }

    pub fn update_window(&mut self, y_dot: &[T], u: &Twist2<T>) {
        assert_eq!(y_dot.len(), self.outputs, "output dimension mismatch");
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((DVector::from_column_slice(y_dot), u.to_array()));
    }

    /// Refit and return `B_ls`. An empty or all-zero window yields zero.
    pub fn fit_ls(&mut self) -> &DMatrix<T> {
        let mut gram = DMatrix::<T>::zeros(3, 3);
        let mut cross = DMatrix::<T>::zeros(3, self.outputs);
        for (yd, u) in &self.window {
            for a in 0..3 {
                for b in 0..3 {
                    gram[(a, b)] += u[a] * u[b];
                }
                for o in 0..self.outputs {
                    cross[(a, o)] += u[a] * yd[o];
                }
            }
        }
        let n = T::from_usize_lossy(self.window.len().max(1));
        let scale2 = (gram[(0, 0)] + gram[(1, 1)] + gram[(2, 2)]) / (n * T::lit(3.0));
        if !(scale2 > T::zero()) {
            self.b_ls = DMatrix::zeros(self.outputs, 3);
            return &self.b_ls;
        }
        let mu = self.ridge * scale2 * n;
        for a in 0..3 {
            gram[(a, a)] += mu.max(T::epsilon() * scale2 * n);
        }
        let l = cholesky(&gram).expect("ridge keeps the window gram matrix positive definite");
        for o in 0..self.outputs {
            let col = cholesky_solve(&l, &cross.column(o).into_owned());
            for a in 0..3 {
                self.b_ls[(o, a)] = col[a];
            }
        }
        &self.b_ls
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.b_ls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-step discount of the rigid-body weight.
    pub gamma: f64,
    /// Least-squares window length in control steps.
    pub window: usize,
    pub ridge: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { gamma: 0.9, window: 30, ridge: 1e-6 }
    }
}

/// `B_hat(y) = alpha B_rb(y) + (1 - alpha) B_ls` with `alpha <- gamma alpha`
/// after every control step.
#[derive(Debug, Clone)]
pub struct CompositeModel<T: Real = f64> {
    alpha: T,
    gamma: T,
    pub rigid: RigidBodyModel,
    pub local: LocalLinearModel<T>,
}

impl<T: Real> CompositeModel<T> {
    pub fn new(held: usize, n_terminals: usize, cfg: &ModelConfig) -> Self {
        let gamma = T::lit(cfg.gamma);
        assert!(gamma > T::zero() && gamma < T::one(), "gamma must lie in (0, 1)");
        Self {
            alpha: T::one(),
            gamma,
            rigid: RigidBodyModel { held },
            local: LocalLinearModel::new(3 * n_terminals, cfg.window, T::lit(cfg.ridge)),
        }
    }

    /// A model that never leaves the rigid-body prior.
    pub fn rigid_only(held: usize, n_terminals: usize) -> Self {
        let mut m = Self::new(held, n_terminals, &ModelConfig::default());
        m.gamma = T::one();
        m
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.alpha = alpha.max(T::zero()).min(T::one());
    }

    pub fn held(&self) -> usize {
        self.rigid.held
    }

    /// Start of a terminal manipulation: `alpha = 1`, empty window.
    pub fn reset(&mut self, held: usize) {
        self.alpha = T::one();
        self.rigid.held = held;
        self.local.clear();
    }

    pub fn discount(&mut self) {
        self.alpha *= self.gamma;
    }

    pub fn composite_matrix(&self, poses: &[Pose2<T>]) -> DMatrix<T> {
        composite_matrix(self.alpha, &self.rigid.matrix(poses), self.local.matrix())
    }
}

/// Entrywise `alpha * rigid + (1 - alpha) * ls`.
pub fn composite_matrix<T: Real>(alpha: T, rigid: &DMatrix<T>, ls: &DMatrix<T>) -> DMatrix<T> {
    rigid.zip_map(ls, |r, l| alpha * r + (T::one() - alpha) * l)
}

/// Stacked terminal twists predicted by `b` for input `u`.
pub fn predict_twists<T: Real>(b: &DMatrix<T>, u: &Twist2<T>) -> Vec<T> {
    let u = u.to_array();
    (0..b.nrows()).map(|r| b[(r, 0)] * u[0] + b[(r, 1)] * u[1] + b[(r, 2)] * u[2]).collect()
}

/// One zero-order-hold step `y + dt B u` on stacked poses.
pub fn propagate<T: Real>(poses: &[Pose2<T>], b: &DMatrix<T>, u: &Twist2<T>, dt: T) -> Vec<Pose2<T>> {
    let d = predict_twists(b, u);
    poses
        .iter()
        .enumerate()
        .map(|(t, p)| Pose2::new(p.x + dt * d[3 * t], p.y + dt * d[3 * t + 1], p.theta + dt * d[3 * t + 2]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poses(v: &[(f64, f64)]) -> Vec<Pose2> {
        v.iter().map(|&(x, y)| Pose2::new(x, y, 0.0)).collect()
    }

    #[test]
    fn rigid_examples() {
        let b = rigid_body_matrix(&poses(&[(0.0, 0.0), (1.0, 0.0)]), 0);
        let tw = predict_twists(&b, &Twist2::new(0.0, 0.0, 1.0));
        assert_eq!(&tw[3..], &[0.0, 1.0, 1.0]);

        let b = rigid_body_matrix(&poses(&[(2.0, 1.0), (-1.0, 3.0)]), 0);
        let tw = predict_twists(&b, &Twist2::new(0.5, -0.2, 0.4));
        assert!((tw[3] + 0.3).abs() < 1e-12 && (tw[4] + 1.4).abs() < 1e-12 && (tw[5] - 0.4).abs() < 1e-12);

        let b = rigid_body_matrix(&poses(&[(2.0, 1.0), (2.0, 1.0)]), 0);
        assert_eq!(b.rows(3, 3), DMatrix::<f64>::identity(3, 3));
        assert_eq!(b.rows(0, 3), DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn empty_window_is_zero() {
        let mut m = LocalLinearModel::<f64>::new(6, 30, 1e-6);
        assert_eq!(m.fit_ls(), &DMatrix::zeros(6, 3));
    }

    #[test]
    fn rank_one_excitation() {
        let truth = DMatrix::from_fn(6, 3, |r, c| (r as f64 + 1.0) * 0.1 - c as f64 * 0.3);
        let u = Twist2::new(0.03, -0.01, 0.2);
        let mut m = LocalLinearModel::new(6, 30, 1e-9);
        for _ in 0..30 {
            let yd = predict_twists(&truth, &u);
            m.update_window(&yd, &u);
        }
        let b = m.fit_ls().clone();
        let got = predict_twists(&b, &u);
        let want = predict_twists(&truth, &u);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
        // orthogonal direction is not excited: minimum-norm answer is zero
        let ortho = Twist2::new(0.01, 0.03, 0.0);
        for v in predict_twists(&b, &ortho) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn window_is_bounded() {
        let mut m = LocalLinearModel::<f64>::new(3, 4, 1e-6);
        for k in 0..10 {
            m.update_window(&[k as f64, 0.0, 0.0], &Twist2::new(1.0, 0.0, 0.0));
        }
        assert_eq!(m.len(), 4);
        let b = m.fit_ls();
        assert!((b[(0, 0)] - 7.5).abs() < 1e-4);
    }

    #[test]
    fn composite_blend_and_discount() {
        let cfg = ModelConfig { gamma: 0.9, ..Default::default() };
        let mut cm = CompositeModel::<f64>::new(0, 2, &cfg);
        let ps = poses(&[(0.0, 0.0), (0.3, 0.1)]);
        assert_eq!(cm.composite_matrix(&ps), rigid_body_matrix(&ps, 0));
        cm.discount();
        assert!((cm.alpha() - 0.9).abs() < 1e-15);
        for _ in 0..9 {
            cm.discount();
        }
        assert!((cm.alpha() - 0.9f64.powi(10)).abs() < 1e-15);
        assert!(cm.alpha() > 0.0);
        cm.set_alpha(0.0);
        assert_eq!(cm.composite_matrix(&ps), DMatrix::zeros(6, 3));
        let r = rigid_body_matrix(&ps, 0);
        let l = DMatrix::from_element(6, 3, 2.0);
        let half = composite_matrix(0.5, &r, &l);
        assert_eq!(half, (r + l) * 0.5);
        cm.reset(1);
        assert_eq!(cm.alpha(), 1.0);
        assert!(cm.local.is_empty());
    }

    #[test]
    fn single_precision_model() {
        let ps: Vec<Pose2<f32>> = vec![Pose2::new(0.0, 0.0, 0.0), Pose2::new(1.0, 0.0, 0.0)];
        let b = rigid_body_matrix(&ps, 0);
        let tw = predict_twists(&b, &Twist2::new(0.0f32, 0.0, 1.0));
        assert_eq!(&tw[3..], &[0.0, 1.0, 1.0]);
    }
}
