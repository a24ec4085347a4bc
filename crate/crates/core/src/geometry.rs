//! Planar points and rigid transforms.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Rotation by `theta` followed by translation: `p ↦ R(θ)·p + t`.
///
/// The rotation is stored as an angle so the matrix is orthonormal with
/// determinant +1 by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Rotation angle in radians.
    pub theta: f64,
    pub translation: Point,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        Self { theta: 0.0, translation: [0.0, 0.0] }
    }

    pub fn new(theta: f64, translation: Point) -> Self {
        Self { theta, translation }
    }

    pub fn from_translation(t: Point) -> Self {
        Self::new(0.0, t)
    }

    /// Rotation about `center` by `theta`.
    pub fn rotation_about(theta: f64, center: Point) -> Self {
        let r = Self::new(theta, [0.0, 0.0]);
        let rc = r.rotate(center);
        Self::new(theta, sub(center, rc))
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        [[c, -s], [s, c]]
    }

    #[inline]
    pub fn rotate(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        [c * p[0] - s * p[1], s * p[0] + c * p[1]]
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        add(self.rotate(p), self.translation)
    }

    pub fn inverse(&self) -> Self {
        let inv = Self::new(-self.theta, [0.0, 0.0]);
        let t = inv.rotate(self.translation);
        Self::new(-self.theta, [-t[0], -t[1]])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let t = self.apply(other.translation);
        Self::new(wrap_angle(self.theta + other.theta), t)
    }

    pub fn theta_degrees(&self) -> f64 {
        self.theta.to_degrees()
    }

    /// Express this transform in a pixel grid scaled by `s` (pixel centers
    /// stay at integer coordinates in both grids).
    pub fn rescaled(&self, s: f64) -> Self {
        let c = [(s - 1.0) / 2.0, (s - 1.0) / 2.0];
        let rc = self.rotate(c);
        Self::new(
            self.theta,
            [
                s * self.translation[0] + c[0] - rc[0],
                s * self.translation[1] + c[1] - rc[1],
            ],
        )
    }

    /// Angular difference in degrees (wrapped to [0, 180]) and translation
    /// difference in pixels.
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        let dtheta = wrap_angle(self.theta - other.theta).abs().to_degrees();
        (dtheta, dist(self.translation, other.translation))
    }
}

/// Wrap an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_inverse_is_identity() {
        let a = RigidTransform::new(0.7, [3.0, -2.0]);
        let id = a.compose(&a.inverse());
        assert!(id.theta.abs() < 1e-12);
        assert!(norm(id.translation) < 1e-12);
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let m = RigidTransform::new(1.234, [0.0, 0.0]).matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!((det - 1.0).abs() < 1e-12);
        let rtr00 = m[0][0] * m[0][0] + m[1][0] * m[1][0];
        let rtr01 = m[0][0] * m[0][1] + m[1][0] * m[1][1];
        assert!((rtr00 - 1.0).abs() < 1e-12 && rtr01.abs() < 1e-12);
    }

    #[test]
    fn rescaled_matches_conjugation() {
        let t = RigidTransform::new(0.3, [10.0, 4.0]);
        let s = 4.0;
        let p: Point = [7.0, 9.0];
        let to_fine = |q: Point| [s * (q[0] + 0.5) - 0.5, s * (q[1] + 0.5) - 0.5];
        let expected = to_fine(t.apply(p));
        let got = t.rescaled(s).apply(to_fine(p));
        assert!(dist(expected, got) < 1e-9);
    }
}
