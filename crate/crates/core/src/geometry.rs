//! Rigid transforms, the equirectangular camera model and trajectory
//! interpolation.
//!
//! Poses map points from the world (LiDAR map) frame into the camera frame
//! unless stated otherwise. Pose updates are left-multiplicative:
//! `exp(delta) * pose`, with twists ordered `[rotation | translation]`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Points closer than this to the camera centre cannot be projected.
pub const EPSILON_RANGE: f64 = 1e-6;

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, renormalizing the rotation.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from a raw `(qx, qy, qz, qw)` quaternion without
    /// renormalizing it. The caller guarantees unit norm.
    pub(crate) fn from_unit_parts(q: Quaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_scaled_axis(axis_angle),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Left-multiplicative retraction `exp(delta) ∘ self`.
    pub fn exp_update(&self, delta: &Twist) -> Pose {
        delta.exp().compose(self)
    }

    pub fn log(&self) -> Twist {
        let omega = self.rotation.scaled_axis();
        let v = so3_left_jacobian_inverse(&omega) * self.translation;
        Twist {
            rotation: omega,
            translation: v,
        }
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

fn renormalize(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q)
}

/// Six-dimensional local coordinates of a rigid motion.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    /// Axis-angle rotation (radians).
    pub rotation: Vector3<f64>,
    /// Translational part (meters).
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// From `[wx, wy, wz, vx, vy, vz]`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// SE(3) exponential.
    pub fn exp(&self) -> Pose {
        let rotation = UnitQuaternion::from_scaled_axis(self.rotation);
        let translation = so3_left_jacobian(&self.rotation) * self.translation;
        Pose { rotation, translation }
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.rotation, -self.translation)
    }
}

pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let k = skew(omega);
    Matrix3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let d = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let k = skew(omega);
    Matrix3::identity() - k * 0.5 + k * k * d
}

/// Latitude `phi` in (−π/2, π/2) and longitude `theta` in [−π, π].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalCoord {
    pub phi: f64,
    pub theta: f64,
}

impl SphericalCoord {
    /// Returns `None` within [`EPSILON_RANGE`] of the origin.
    pub fn from_point(p: &Vector3<f64>) -> Option<Self> {
        if p.norm() <= EPSILON_RANGE {
            return None;
        }
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        Some(Self {
            phi: p.z.atan2(rho),
            theta: p.y.atan2(p.x),
        })
    }

    pub fn direction(&self) -> Vector3<f64> {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        Vector3::new(cp * ct, cp * st, sp)
    }
}

/// Row `u` in [0, H), column `v` in [0, W). Pixel centres sit at integer
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Equirectangular panorama model. By default row 0 is the nadir
/// (φ = −π/2); `zenith_at_row0` flips the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Equirect {
    pub height: usize,
    pub width: usize,
    pub zenith_at_row0: bool,
}

impl Equirect {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            zenith_at_row0: false,
        }
    }

    pub fn with_zenith_at_row0(mut self, flip: bool) -> Self {
        self.zenith_at_row0 = flip;
        self
    }

    fn scale_u(&self) -> f64 {
        let s = self.height as f64 / PI;
        if self.zenith_at_row0 {
            -s
        } else {
            s
        }
    }

    fn scale_v(&self) -> f64 {
        self.width as f64 / (2.0 * PI)
    }

    pub fn pixel_of(&self, s: &SphericalCoord) -> PixelCoord {
        let h = self.height as f64;
        let w = self.width as f64;
        let mut u = if self.zenith_at_row0 {
            (FRAC_PI_2 - s.phi) / PI * h
        } else {
            (s.phi + FRAC_PI_2) / PI * h
        };
        let mut v = (s.theta + PI) / (2.0 * PI) * w;
        if u >= h {
            u = h.next_down();
        }
        if u < 0.0 {
            u = 0.0;
        }
        if v >= w {
            v -= w;
        }
        if v < 0.0 {
            v = 0.0;
        }
        PixelCoord { u, v }
    }

    /// Camera-frame point to pixel; `None` when within [`EPSILON_RANGE`] of
    /// the camera centre.
    pub fn project(&self, p: &Vector3<f64>) -> Option<PixelCoord> {
        SphericalCoord::from_point(p).map(|s| self.pixel_of(&s))
    }

    pub fn spherical_of(&self, px: &PixelCoord) -> SphericalCoord {
        let h = self.height as f64;
        let w = self.width as f64;
        let phi = if self.zenith_at_row0 {
            FRAC_PI_2 - px.u / h * PI
        } else {
            px.u / h * PI - FRAC_PI_2
        };
        SphericalCoord {
            phi,
            theta: px.v / w * 2.0 * PI - PI,
        }
    }

    /// Unit viewing direction of a pixel.
    pub fn unproject(&self, px: &PixelCoord) -> Vector3<f64> {
        self.spherical_of(px).direction()
    }

    /// Projection together with ∂(u, v)/∂p. `None` when the point is
    /// unprojectable or on the polar axis where the longitude derivative is
    /// undefined.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>) -> Option<(PixelCoord, Matrix2x3<f64>)> {
        let px = self.project(p)?;
        let rho2 = p.x * p.x + p.y * p.y;
        if rho2 <= EPSILON_RANGE * EPSILON_RANGE {
            return None;
        }
        let rho = rho2.sqrt();
        let r2 = rho2 + p.z * p.z;
        let su = self.scale_u();
        let sv = self.scale_v();
        let dphi = [-p.x * p.z / (r2 * rho), -p.y * p.z / (r2 * rho), rho / r2];
        let dtheta = [-p.y / rho2, p.x / rho2, 0.0];
        let j = Matrix2x3::new(
            su * dphi[0],
            su * dphi[1],
            su * dphi[2],
            sv * dtheta[0],
            sv * dtheta[1],
            sv * dtheta[2],
        );
        Some((px, j))
    }
}

/// Equirectangular projection with the default orientation.
pub fn project(point: &Vector3<f64>, image_h: usize, image_w: usize) -> Option<PixelCoord> {
    Equirect::new(image_h, image_w).project(point)
}

pub fn transform_point(pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(point)
}

pub fn exp_update(pose: &Pose, delta: &Twist) -> Pose {
    pose.exp_update(delta)
}

/// Shortest-arc spherical interpolation.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion();
    let mut qb = *b.quaternion();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let q = if dot > 0.9995 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin) + qb * ((s * theta).sin() / sin)
    };
    UnitQuaternion::new_normalize(q)
}

pub(crate) fn check_increasing(samples: &[(f64, Pose)]) -> Result<()> {
    for (k, w) in samples.windows(2).enumerate() {
        if !(w[1].0 > w[0].0) {
            return Err(Error::NonMonotonic {
                index: k + 1,
                time: w[1].0,
            });
        }
    }
    Ok(())
}

/// Interpolates a time-ordered list of samples: translation linearly,
/// rotation by shortest-arc slerp.
pub fn interpolate_pose(trajectory: &[(f64, Pose)], query_time: f64) -> Result<Pose> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "trajectory needs at least 2 samples, got {}",
            trajectory.len()
        )));
    }
    check_increasing(trajectory)?;
    interpolate_sorted(trajectory, query_time)
}

pub(crate) fn interpolate_sorted(trajectory: &[(f64, Pose)], t: f64) -> Result<Pose> {
    let start = trajectory[0].0;
    let end = trajectory[trajectory.len() - 1].0;
    if !(t >= start && t <= end) {
        return Err(Error::OutOfRange { query: t, start, end });
    }
    let hi = trajectory.partition_point(|(ts, _)| *ts < t);
    if trajectory[hi].0 == t {
        return Ok(trajectory[hi].1);
    }
    let (t0, p0) = &trajectory[hi - 1];
    let (t1, p1) = &trajectory[hi];
    let s = (t - t0) / (t1 - t0);
    let translation = p0.translation * (1.0 - s) + p1.translation * s;
    let rotation = slerp(&p0.rotation, &p1.rotation, s);
    Ok(Pose { rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot_z(deg: f64) -> Pose {
        Pose::from_axis_angle(Vector3::z() * deg.to_radians(), Vector3::zeros())
    }

    #[test]
    fn forward_axis_maps_to_image_centre() {
        let px = project(&Vector3::new(1.0, 0.0, 0.0), 512, 1024).unwrap();
        assert_eq!(px, PixelCoord::new(256.0, 512.0));
    }

    #[test]
    fn near_zenith_approaches_last_row() {
        let px = project(&Vector3::new(0.0, 0.0, 1.0 - 1e-12), 512, 1024).unwrap();
        assert!(px.u < 512.0 && px.u > 511.999);
        let px = project(&Vector3::new(0.0, 0.0, 1.0), 512, 1024).unwrap();
        assert!(px.u < 512.0);
    }

    #[test]
    fn diagonal_point_matches_independent_spherical_route() {
        let p: Vector3<f64> = Vector3::new(1.0, 1.0, 0.0);
        // Longitude via acos of the planar cosine, latitude via asin.
        let rho: f64 = (p.x * p.x + p.y * p.y).sqrt();
        let theta: f64 = (p.x / rho).acos() * p.y.signum();
        let phi = (p.z / p.norm()).asin();
        let u = (phi + PI / 2.0) / PI * 512.0;
        let v = (theta + PI) / (2.0 * PI) * 1024.0;
        assert_relative_eq!(u, 256.0, epsilon = 1e-12);
        assert_relative_eq!(v, 640.0, epsilon = 1e-12);
        let px = project(&p, 512, 1024).unwrap();
        assert_relative_eq!(px.u, u, epsilon = 1e-9);
        assert_relative_eq!(px.v, v, epsilon = 1e-9);
    }

    #[test]
    fn origin_is_out_of_domain() {
        assert!(project(&Vector3::zeros(), 512, 1024).is_none());
        assert!(project(&Vector3::new(5e-7, 0.0, 0.0), 512, 1024).is_none());
        assert!(project(&Vector3::new(2e-6, 0.0, 0.0), 512, 1024).is_some());
    }

    #[test]
    fn flipped_rows_put_zenith_at_top() {
        let cam = Equirect::new(512, 1024).with_zenith_at_row0(true);
        let px = cam.project(&Vector3::new(0.0, 0.1, 1.0)).unwrap();
        assert!(px.u < 20.0);
        let back = cam.unproject(&px);
        assert_relative_eq!(back, Vector3::new(0.0, 0.1, 1.0).normalize(), epsilon = 1e-12);
    }

    #[test]
    fn transform_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let q = rot_z(90.0).transform_point(&Vector3::x());
        assert_relative_eq!(q, Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn interpolation_examples() {
        let traj = vec![
            (0.0, Pose::identity()),
            (2.0, Pose::from_translation(Vector3::new(2.0, 0.0, 0.0))),
        ];
        let mid = interpolate_pose(&traj, 1.0).unwrap();
        assert_relative_eq!(*mid.translation(), Vector3::new(1.0, 0.0, 0.0));

        let traj = vec![(0.0, Pose::identity()), (2.0, rot_z(90.0))];
        let mid = interpolate_pose(&traj, 1.0).unwrap();
        assert_relative_eq!(mid.rotation_angle_to(&rot_z(45.0)), 0.0, epsilon = 1e-12);

        let p1 = Pose::from_axis_angle(Vector3::new(0.3, -0.2, 0.1), Vector3::new(1.0, 2.0, 3.0));
        let traj = vec![(0.0, Pose::identity()), (1.0, p1), (2.0, rot_z(10.0))];
        assert_eq!(interpolate_pose(&traj, 1.0).unwrap(), p1);
        assert_eq!(interpolate_pose(&traj, 2.0).unwrap(), traj[2].1);
        assert_eq!(interpolate_pose(&traj, 0.0).unwrap(), traj[0].1);
    }

    #[test]
    fn interpolation_errors() {
        let traj = vec![(0.0, Pose::identity()), (1.0, Pose::identity())];
        assert!(matches!(interpolate_pose(&traj, 1.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(interpolate_pose(&traj, -0.1), Err(Error::OutOfRange { .. })));
        let bad = vec![(0.0, Pose::identity()), (0.0, Pose::identity())];
        assert!(matches!(interpolate_pose(&bad, 0.0), Err(Error::NonMonotonic { .. })));
        assert!(interpolate_pose(&traj[..1], 0.0).is_err());
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        let a = rot_z(170.0);
        let b = rot_z(-170.0);
        let traj = vec![(0.0, a), (1.0, b)];
        let mid = interpolate_pose(&traj, 0.5).unwrap();
        assert_relative_eq!(mid.rotation_angle_to(&rot_z(180.0)), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn exp_update_examples() {
        let p = Pose::from_axis_angle(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, -1.0, 2.0));
        assert_eq!(p.exp_update(&Twist::zero()), p);
        let q = Pose::identity().exp_update(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        assert_relative_eq!(q.rotation_angle_to(&rot_z(90.0)), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn small_twist_is_first_order() {
        let w = Vector3::new(3e-4, -5e-4, 2e-4);
        let v = Vector3::new(1e-4, 4e-4, -6e-4);
        let e = Twist::new(w, v).exp();
        let first = Matrix3::identity() + skew(&w);
        assert!((e.rotation_matrix() - first).abs().max() < 1e-6);
        assert!((e.translation() - v).abs().max() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Equirect::new(512, 1024);
        let p = Vector3::new(2.0, -1.3, 0.7);
        let (_, j) = cam.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut dp = Vector3::zeros();
            dp[k] = h;
            let a = cam.project(&(p + dp)).unwrap();
            let b = cam.project(&(p - dp)).unwrap();
            assert_relative_eq!((a.u - b.u) / (2.0 * h), j[(0, k)], epsilon = 1e-5);
            assert_relative_eq!((a.v - b.v) / (2.0 * h), j[(1, k)], epsilon = 1e-5);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_map(|(w, t)| Pose::from_axis_angle(Vector3::from(w) * 0.9, Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn quaternion_stays_unit(a in arb_pose(), b in arb_pose()) {
            let c = a.compose(&b).compose(&a.inverse());
            prop_assert!((c.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compose_with_inverse_is_identity(p in arb_pose()) {
            let e = p.compose(&p.inverse());
            prop_assert!(e.rotation().angle() < 1e-9);
            prop_assert!(e.translation().norm() < 1e-9);
        }

        #[test]
        fn transform_round_trip(p in arb_pose(), x in prop::array::uniform3(-50.0f64..50.0)) {
            let x = Vector3::from(x);
            let back = p.inverse().transform_point(&p.transform_point(&x));
            prop_assert!((back - x).norm() < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.rotation_angle_to(&r) < 1e-9);
            prop_assert!((l.translation() - r.translation()).norm() < 1e-9);
        }

        #[test]
        fn exp_log_round_trip(p in arb_pose()) {
            prop_assume!(p.rotation().angle() < PI - 1e-6);
            let q = p.log().exp();
            prop_assert!(q.rotation_angle_to(&p) < 1e-8);
            prop_assert!((q.translation() - p.translation()).norm() < 1e-8);
        }

        #[test]
        fn exp_update_local_inverse(p in arb_pose(), d in prop::array::uniform6(-0.05f64..0.05)) {
            let d = Twist::from_vector(&Vector6::from_row_slice(&d));
            let q = p.exp_update(&d).exp_update(&-d);
            prop_assert!(q.rotation_angle_to(&p) < 1e-8);
            prop_assert!((q.translation() - p.translation()).norm() < 1e-8);
        }

        #[test]
        fn unproject_reprojects(u in 0usize..256, v in 0usize..512) {
            let cam = Equirect::new(256, 512);
            let px = PixelCoord::new(u as f64 + 0.5, v as f64);
            let back = cam.project(&cam.unproject(&px)).unwrap();
            prop_assert!((back.u - px.u).abs() < 1e-6);
            let dv = (back.v - px.v).abs();
            prop_assert!(dv < 1e-6 || (512.0 - dv) < 1e-6);
        }

        #[test]
        fn projection_is_lipschitz_away_from_pole_and_seam(
            phi in -1.2f64..1.2,
            theta in -3.0f64..3.0,
            r in 1.0f64..20.0,
            d in prop::array::uniform3(-1e-4f64..1e-4),
        ) {
            let cam = Equirect::new(512, 1024);
            let p = SphericalCoord { phi, theta }.direction() * r;
            let q = p + Vector3::from(d);
            let a = cam.project(&p).unwrap();
            let b = cam.project(&q).unwrap();
            // Longitude rate is bounded by W/(2π ρ) with ρ ≥ r cos(1.2).
            let lip = 1024.0 / (2.0 * PI * r * 1.2f64.cos()) * 1.01 + 512.0 / (PI * r);
            let moved = ((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt();
            prop_assert!(moved <= lip * Vector3::from(d).norm() * 1.5);
        }
    }
}
