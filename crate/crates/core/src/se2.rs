//! Planar poses and twists.
//!
//! Headings are stored as raw radians normalized to `(-pi, pi]`. Anything that
//! compares headings goes through the chord distance between unit heading
//! vectors so that costs and regression targets never see a wraparound jump.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle<T: Real>(theta: T) -> T {
    let pi = T::PI();
    let two_pi = pi + pi;
    let mut a = theta % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}

/// A pose in SE(2): position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2<T = f64> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> Pose2<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn translation(&self) -> [T; 2] {
        [self.x, self.y]
    }

    /// Unit heading vector `(cos, sin)`.
    pub fn heading(&self) -> [T; 2] {
        [self.theta.cos(), self.theta.sin()]
    }

    /// Group composition `self * other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2<T>) -> Pose2<T> {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2<T> {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `self^-1 * other`, i.e. `other` seen from `self`.
    pub fn between(&self, other: &Pose2<T>) -> Pose2<T> {
        self.inverse().compose(other)
    }

    /// Euclidean distance between the translational parts.
    pub fn distance(&self, other: &Pose2<T>) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn cast<U: Real>(&self) -> Pose2<U> {
        Pose2::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.theta.as_f64()),
        )
    }
}

impl<T: Real> Default for Pose2<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// World-frame planar velocity command `[vx, vy, omega]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist2<T = f64> {
    pub vx: T,
    pub vy: T,
    pub omega: T,
}

impl<T: Real> Twist2<T> {
    /// Panics on non-finite components.
    pub fn new(vx: T, vy: T, omega: T) -> Self {
        Self::checked(vx, vy, omega).expect("twist components must be finite")
    }

    pub fn checked(vx: T, vy: T, omega: T) -> Option<Self> {
        (vx.is_finite() && vy.is_finite() && omega.is_finite()).then_some(Self { vx, vy, omega })
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(v: [T; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.vx, self.vy, self.omega]
    }

    pub fn scale(&self, k: T) -> Self {
        Self::new(self.vx * k, self.vy * k, self.omega * k)
    }

    pub fn norm(&self) -> T {
        (self.vx * self.vx + self.vy * self.vy + self.omega * self.omega).sqrt()
    }
}

impl<T: Real> Default for Twist2<T> {
    fn default() -> Self {
        Self::zero()
    }
}

/// Squared translational distance plus `beta` times the squared chord
/// distance between the unit heading vectors.
pub fn d_beta<T: Real>(p1: &Pose2<T>, p2: &Pose2<T>, beta: T) -> T {
    let dx = p1.x - p2.x;
    let dy = p1.y - p2.y;
    let dc = p1.theta.cos() - p2.theta.cos();
    let ds = p1.theta.sin() - p2.theta.sin();
    dx * dx + dy * dy + beta * (dc * dc + ds * ds)
}

/// Zero-order-hold integration of a world-frame twist: `p + dt * u`.
pub fn integrate_pose<T: Real>(p: &Pose2<T>, u: &Twist2<T>, dt: T) -> Pose2<T> {
    Pose2::new(p.x + dt * u.vx, p.y + dt * u.vy, p.theta + dt * u.omega)
}
