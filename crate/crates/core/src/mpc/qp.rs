//! Dense ADMM for `min 1/2 x'Px + q'x` subject to `l <= Ax <= u`, in the
//! operator-splitting form popularized by OSQP. Rows may be softened: a soft
//! row only has an upper bound and pays `w * max(0, a'x - u)` instead of
//! being enforced, which is an exact penalty for weights above the optimal
//! multiplier.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky, cholesky_solve};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub sigma: f64,
    pub relaxation: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iterations: usize,
    /// Iterations between step-size updates.
    pub adapt_interval: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            max_iterations: 4000,
            adapt_interval: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Qp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Penalty weight per row; `None` for hard rows.
    pub soft: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl Qp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + self.penalty(x)
    }

    pub fn penalty(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        self.soft
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.map(|w| w * (ax[i] - self.upper[i]).max(0.0)))
            .sum()
    }

    fn project(&self, i: usize, v: f64, rho: f64) -> f64 {
        match self.soft[i] {
            None => v.clamp(self.lower[i], self.upper[i]),
            Some(w) => {
                let u = self.upper[i];
                if v <= u {
                    v
                } else if v > u + w / rho {
                    v - w / rho
                } else {
                    u
                }
            }
        }
    }

    fn factor(&self, rho: f64, sigma: f64) -> Option<DMatrix<f64>> {
        let mut k = &self.p + self.a.transpose() * &self.a * rho;
        for i in 0..k.nrows() {
            k[(i, i)] += sigma;
        }
        cholesky(&k)
    }

    pub fn solve(&self, x0: Option<&DVector<f64>>, s: &AdmmSettings) -> QpResult {
        let n = self.p.nrows();
        let m = self.a.nrows();
        let at = self.a.transpose();
        let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut z = DVector::from_iterator(m, (&self.a * &x).iter().enumerate().map(|(i, v)| self.project(i, *v, s.rho)));
        let mut y = DVector::<f64>::zeros(m);
        let mut rho = s.rho;
        let Some(mut l) = self.factor(rho, s.sigma) else {
            return QpResult { x, status: QpStatus::Diverged, iterations: 0 };
        };
        let alpha = s.relaxation;
        for it in 1..=s.max_iterations {
            let rhs = &x * s.sigma - &self.q + &at * (&z * rho - &y);
            let xt = cholesky_solve(&l, &rhs);
            let zt = &self.a * &xt;
            let x_new = &xt * alpha + &x * (1.0 - alpha);
            let zh = &zt * alpha + &z * (1.0 - alpha);
            let z_new = DVector::from_iterator(m, (0..m).map(|i| self.project(i, zh[i] + y[i] / rho, rho)));
            y += (&zh - &z_new) * rho;
            x = x_new;
            z = z_new;
            if !x.iter().all(|v| v.is_finite()) {
                return QpResult { x, status: QpStatus::Diverged, iterations: it };
            }

            let ax = &self.a * &x;
            let px = &self.p * &x;
            let aty = &at * &y;
            let r_prim = (&ax - &z).amax();
            let r_dual = (&px + &self.q + &aty).amax();
            let eps_prim = s.eps_abs + s.eps_rel * ax.amax().max(z.amax());
            let eps_dual = s.eps_abs + s.eps_rel * px.amax().max(aty.amax()).max(self.q.amax());
            if r_prim <= eps_prim && r_dual <= eps_dual {
                return QpResult { x, status: QpStatus::Solved, iterations: it };
            }
            if it % s.adapt_interval == 0 {
                let np = r_prim / ax.amax().max(z.amax()).max(1e-12);
                let nd = r_dual / px.amax().max(aty.amax()).max(self.q.amax()).max(1e-12);
                let ratio = (np / nd.max(1e-12)).sqrt();
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                    if let Some(nl) = self.factor(new_rho, s.sigma) {
                        // keep the unscaled multiplier; only the splitting changes
                        rho = new_rho;
                        l = nl;
                    }
                }
            }
        }
        QpResult { x, status: QpStatus::MaxIterations, iterations: s.max_iterations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_qp(target: [f64; 2], bound: f64) -> Qp {
        Qp {
            p: DMatrix::identity(2, 2) * 2.0,
            q: DVector::from_vec(vec![-2.0 * target[0], -2.0 * target[1]]),
            a: DMatrix::identity(2, 2),
            lower: DVector::from_element(2, -bound),
            upper: DVector::from_element(2, bound),
            soft: vec![None, None],
        }
    }

    #[test]
    fn interior_and_clamped_minimum() {
        let r = box_qp([0.3, -0.2], 1.0).solve(None, &AdmmSettings::default());
        assert_eq!(r.status, QpStatus::Solved);
        assert!((r.x[0] - 0.3).abs() < 1e-6 && (r.x[1] + 0.2).abs() < 1e-6);
        let r = box_qp([3.0, -0.2], 1.0).solve(None, &AdmmSettings::default());
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn soft_row_is_an_exact_penalty() {
        // min (x - 2)^2 subject to x <= 1 softened with weight w:
        // the multiplier of the hard problem is 2, so w = 10 is exact and
        // w = 1 stops where the slope 2(x - 2) + 1 vanishes, at x = 1.5.
        let mk = |w: f64| Qp {
            p: DMatrix::from_element(1, 1, 2.0),
            q: DVector::from_element(1, -4.0),
            a: DMatrix::from_element(1, 1, 1.0),
            lower: DVector::from_element(1, f64::NEG_INFINITY),
            upper: DVector::from_element(1, 1.0),
            soft: vec![Some(w)],
        };
        let r = mk(10.0).solve(None, &AdmmSettings::default());
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{}", r.x[0]);
        let r = mk(1.0).solve(None, &AdmmSettings::default());
        assert!((r.x[0] - 1.5).abs() < 1e-6, "{}", r.x[0]);
    }

    #[test]
    fn zero_gradient_stays_at_zero() {
        let r = box_qp([0.0, 0.0], 1.0).solve(None, &AdmmSettings::default());
        assert_eq!(r.status, QpStatus::Solved);
        assert!(r.x.amax() < 1e-12);
    }
}
