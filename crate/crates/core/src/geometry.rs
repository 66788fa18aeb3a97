//! Vectors, directions, spherical angles and axis-aligned boxes.
//!
//! Positions are meters in a room frame whose origin sits at the center of the
//! floor, with `+z` pointing up. Directions follow the physics convention:
//! `theta` is the polar angle from `+z`, `phi` the azimuth from `+x`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on the norm of anything treated as a unit vector.
pub const UNIT_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalAngles {
    /// Polar angle from `+z`, radians.
    pub theta: f64,
    /// Azimuth from `+x`, radians.
    pub phi: f64,
}

impl SphericalAngles {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }
}

/// `[cos(phi) sin(theta), sin(phi) sin(theta), cos(theta)]`.
pub fn spherical_to_unit(angles: SphericalAngles) -> UnitVec3 {
    let (st, ct) = angles.theta.sin_cos();
    let (sp, cp) = angles.phi.sin_cos();
    // Already unit up to rounding; renormalize so the invariant holds to 1e-12.
    Unit::new_normalize(Vec3::new(cp * st, sp * st, ct))
}

/// Inverse of [`spherical_to_unit`]. `theta` lands in `[0, pi]` and `phi` in
/// `(-pi, pi]`; at the poles `phi` is canonicalized to `0`.
pub fn unit_to_spherical(v: &UnitVec3) -> SphericalAngles {
    let rho = v.x.hypot(v.y);
    let theta = rho.atan2(v.z);
    let phi = if rho == 0.0 {
        0.0
    } else {
        let p = v.y.atan2(v.x);
        if p <= -PI {
            PI
        } else {
            p
        }
    };
    SphericalAngles { theta, phi }
}

/// Checked unit vector construction.
pub fn unit(x: f64, y: f64, z: f64) -> Result<UnitVec3> {
    let v = Vec3::new(x, y, z);
    let n = v.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector [{x}, {y}, {z}]"
        )));
    }
    Ok(Unit::new_normalize(v))
}

pub fn is_unit(v: &Vec3) -> bool {
    (v.norm() - 1.0).abs() <= UNIT_NORM_TOL
}

pub fn is_finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// Axis-aligned box, used both for the room and for the estimator's search
/// region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl AxisBox {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    /// Room of the given width (x), depth (y) and height (z) with the floor
    /// centered at the origin.
    pub fn room(width: f64, depth: f64, height: f64) -> Self {
        Self {
            min: Vec3::new(-width / 2.0, -depth / 2.0, 0.0),
            max: Vec3::new(width / 2.0, depth / 2.0, height),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn is_degenerate(&self) -> bool {
        let e = self.extent();
        !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) || !is_finite(&self.min) || !is_finite(&self.max)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }
}

/// 1-norm condition estimate `||M||_1 ||M^-1||_1`, together with the inverse.
/// Returns `None` for the inverse when `M` is exactly singular.
pub fn inverse_with_condition(m: &Mat3) -> (Option<Mat3>, f64) {
    match m.try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => {
            let cond = norm1(m) * norm1(&inv);
            (Some(inv), cond)
        }
        _ => (None, f64::INFINITY),
    }
}

fn norm1(m: &Mat3) -> f64 {
    (0..3)
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Row-major nested array, the on-disk layout for matrices.
pub fn rows(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn polar_axis() {
        for phi in [-3.0, 0.0, 1.234, PI] {
            let v = spherical_to_unit(SphericalAngles::new(0.0, phi));
            assert!(close(&v, &Vec3::z(), 1e-15));
        }
    }

    #[test]
    fn equator_quarter_turn() {
        let v = spherical_to_unit(SphericalAngles::new(PI / 2.0, PI / 2.0));
        assert!(close(&v, &Vec3::y(), 1e-15));
    }

    #[test]
    fn hand_evaluated_direction() {
        let v = spherical_to_unit(SphericalAngles::new(PI / 3.0, PI / 6.0));
        // sin(pi/3) = sqrt(3)/2, cos(pi/6) = sqrt(3)/2, sin(pi/6) = 1/2
        let expected = Vec3::new(0.75, 3f64.sqrt() / 4.0, 0.5);
        assert!(close(&v, &expected, 1e-15));
    }

    #[test]
    fn pole_canonicalization() {
        let a = unit_to_spherical(&UnitVec3::new_unchecked(-Vec3::z()));
        assert_eq!(a, SphericalAngles::new(PI, 0.0));
        let b = unit_to_spherical(&UnitVec3::new_unchecked(Vec3::x()));
        assert_eq!(b, SphericalAngles::new(PI / 2.0, 0.0));
        let c = unit_to_spherical(&UnitVec3::new_unchecked(-Vec3::x()));
        assert_eq!(c.phi, PI);
    }

    #[test]
    fn room_box() {
        let r = AxisBox::room(4.0, 4.0, 3.0);
        assert_eq!(r.volume(), 48.0);
        assert!(r.contains(&Vec3::new(0.5, 0.5, 0.85)));
        assert!(!r.contains(&Vec3::new(2.1, 0.0, 1.0)));
        assert!(AxisBox::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0)).is_degenerate());
    }

    #[test]
    fn singular_inverse_reports_infinite_condition() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let (inv, cond) = inverse_with_condition(&(v * v.transpose()));
        assert!(inv.is_none() || cond > 1e12);
        let (inv, cond) = inverse_with_condition(&Mat3::identity());
        assert_eq!(inv.unwrap(), Mat3::identity());
        assert_eq!(cond, 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn spherical_output_is_unit(theta in -10.0f64..10.0, phi in -10.0f64..10.0) {
            let v = spherical_to_unit(SphericalAngles::new(theta, phi));
            prop_assert!((v.norm() - 1.0).abs() <= UNIT_NORM_TOL);
        }

        #[test]
        fn round_trip_is_identity(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(Vec3::new(x, y, z).norm() > 1e-3);
            let v = unit(x, y, z).unwrap();
            let a = unit_to_spherical(&v);
            prop_assert!(a.theta >= 0.0 && a.theta <= PI);
            prop_assert!(a.phi > -PI && a.phi <= PI);
            let back = spherical_to_unit(a);
            prop_assert!((back.into_inner() - v.into_inner()).amax() <= 1e-12);
        }
    }
}
