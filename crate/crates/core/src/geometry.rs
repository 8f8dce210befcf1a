//! Rigid transforms, θu (axis-angle) rotations and twist integration.
//!
//! A [`Pose`] maps points from a child frame into a parent frame:
//! `x_parent = rotation * x_child + translation`. Camera poses are stored
//! camera-to-world, so `relative_pose(goal, current)` gives the current
//! camera frame expressed in the goal (desired) camera frame.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Tolerance for the [`Pose`] constructor.
pub const POSE_ORTHO_TOL: f64 = 1e-9;
/// Tolerance accepted by [`rotmat_to_thetau`].
pub const INPUT_ORTHO_TOL: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;
const NEAR_PI: f64 = 1e-3;

/// Largest absolute entry of `RᵀR − I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).amax()
}

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee_antisym(r: &Mat3) -> Vec3 {
    // vee((R - Rᵀ)/2)
    Vec3::new(
        0.5 * (r[(2, 1)] - r[(1, 2)]),
        0.5 * (r[(0, 2)] - r[(2, 0)]),
        0.5 * (r[(1, 0)] - r[(0, 1)]),
    )
}

/// Axis-angle rotation vector with angle in `[0, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaU(Vec3);

impl ThetaU {
    pub fn new(v: Vec3) -> Result<Self> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidConfig("non-finite θu".into()));
        }
        if v.norm() > PI + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "θu angle {} exceeds π",
                v.norm()
            )));
        }
        Ok(Self(v))
    }

    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    /// Maps an unconstrained rotation vector onto the `[0, π]` branch that
    /// describes the same rotation.
    pub fn wrapped(v: Vec3) -> Self {
        let angle = v.norm();
        if angle <= PI || !angle.is_finite() {
            return Self(if angle.is_finite() { v } else { Vec3::zeros() });
        }
        let axis = v / angle;
        let mut a = angle % (2.0 * PI);
        let mut axis = axis;
        if a > PI {
            a = 2.0 * PI - a;
            axis = -axis;
        }
        Self(axis * a)
    }

    pub fn vector(&self) -> Vec3 {
        self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Rodrigues formula for an arbitrary rotation vector.
pub fn rodrigues(v: &Vec3) -> Mat3 {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(v);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        // second-order series: sinθ/θ ≈ 1, (1−cosθ)/θ² ≈ 1/2
        Mat3::identity() + k + 0.5 * k2
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        Mat3::identity() + a * k + b * k2
    }
}

pub fn thetau_to_rotmat(u: &ThetaU) -> Mat3 {
    rodrigues(&u.0)
}

pub fn rotmat_to_thetau(r: &Mat3) -> Result<ThetaU> {
    let err = orthonormality_error(r);
    if !(err <= INPUT_ORTHO_TOL) || r.determinant() < 0.0 {
        return Err(Error::NonOrthonormalInput(err));
    }
    let w = vee_antisym(r);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return Ok(ThetaU(w * (1.0 + theta * theta / 6.0)));
    }
    if theta < PI - NEAR_PI {
        return Ok(ThetaU(w * (theta / s)));
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part using the largest diagonal entry.
    let sym = 0.5 * (r + r.transpose());
    let one_minus_c = 1.0 - c;
    let i = (0..3)
        .max_by(|&a, &b| sym[(a, a)].partial_cmp(&sym[(b, b)]).unwrap())
        .unwrap();
    let mut axis = Vec3::zeros();
    axis[i] = ((sym[(i, i)] - c) / one_minus_c).max(0.0).sqrt();
    for j in 0..3 {
        if j != i {
            axis[j] = sym[(i, j)] / (one_minus_c * axis[i]);
        }
    }
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    Ok(ThetaU(axis * theta))
}

/// Rigid transform with an orthonormal rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if !(err < POSE_ORTHO_TOL) || (rotation.determinant() - 1.0).abs() > POSE_ORTHO_TOL {
            return Err(Error::NonOrthonormalInput(err));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidConfig("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Pose from a translation and a θu rotation (the label layout).
    pub fn from_thetau(t: Vec3, u: &ThetaU) -> Self {
        Self {
            rotation: thetau_to_rotmat(u),
            translation: t,
        }
    }

    pub fn thetau(&self) -> ThetaU {
        // rotation stays within the constructor tolerance, far inside the
        // converter's accepted range
        rotmat_to_thetau(&self.rotation).expect("pose rotation is orthonormal")
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * p.translation),
    }
}

/// `goal⁻¹ · current`: the current frame expressed in the goal frame.
pub fn relative_pose(goal: &Pose, current: &Pose) -> Pose {
    let rt = goal.rotation.transpose();
    Pose {
        rotation: rt * current.rotation,
        translation: rt * (current.translation - goal.translation),
    }
}

/// Camera velocity screw, expressed in the camera's own frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            linear: Vec3::zeros(),
            angular: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|c| c.is_finite())
    }

    /// Euclidean norm of the stacked 6-vector.
    pub fn norm(&self) -> f64 {
        (self.linear.norm_squared() + self.angular.norm_squared()).sqrt()
    }
}

/// Applies a body-frame twist for one step of length `dt`.
///
/// Rotation and translation are updated independently:
/// `R ← R·exp(ω·dt)`, `t ← t + R·v·dt`. This is not the full SE(3)
/// exponential; it matches the per-step velocity commands of the control
/// loop and keeps the proportional contraction of the translation error exact.
pub fn integrate_twist(p: &Pose, tw: &Twist, dt: f64) -> Pose {
    debug_assert!(dt > 0.0);
    let step = tw.angular * dt;
    let rotation = if step == Vec3::zeros() {
        p.rotation
    } else {
        p.rotation * rodrigues(&step)
    };
    let translation = if tw.linear == Vec3::zeros() {
        p.translation
    } else {
        p.translation + p.rotation * (tw.linear * dt)
    };
    Pose {
        rotation,
        translation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Quaternion, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand::rngs::StdRng;

    // Independent oracle: quaternion → matrix, written out by hand.
    fn quat_to_mat(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    fn axis_angle_quat(v: Vec3) -> (f64, f64, f64, f64) {
        let th = v.norm();
        if th == 0.0 {
            return (1.0, 0.0, 0.0, 0.0);
        }
        let a = v / th;
        let s = (th / 2.0).sin();
        ((th / 2.0).cos(), a.x * s, a.y * s, a.z * s)
    }

    fn random_unit_quat(rng: &mut StdRng) -> (f64, f64, f64, f64) {
        loop {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = q.norm();
            if n > 0.1 && n < 1.0 {
                let q = UnitQuaternion::from_quaternion(q);
                return (q.w, q.i, q.j, q.k);
            }
        }
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        let (w, x, y, z) = random_unit_quat(rng);
        Pose {
            rotation: quat_to_mat(w, x, y, z),
            translation: Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        }
    }

    #[test]
    fn identity_maps_to_zero() {
        let u = rotmat_to_thetau(&Mat3::identity()).unwrap();
        assert_eq!(u.vector(), Vec3::zeros());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let u = rotmat_to_thetau(&r).unwrap().vector();
        assert!((u - Vec3::new(0.0, 0.0, PI / 2.0)).amax() < 1e-15);
    }

    #[test]
    fn half_turn_about_z() {
        let r = thetau_to_rotmat(&ThetaU::new(Vec3::new(0.0, 0.0, PI)).unwrap());
        let expect = Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0));
        assert!((r - expect).amax() < 1e-15);
        let back = rotmat_to_thetau(&expect).unwrap().vector();
        assert!((back.norm() - PI).abs() < 1e-12);
        assert!(back.x.abs() < 1e-12 && back.y.abs() < 1e-12);
    }

    #[test]
    fn zero_thetau_is_identity() {
        assert_eq!(thetau_to_rotmat(&ThetaU::zero()), Mat3::identity());
    }

    #[test]
    fn rodrigues_matches_quaternion_oracle() {
        let v = Vec3::new(0.1, -0.2, 0.05);
        let (w, x, y, z) = axis_angle_quat(v);
        let r = thetau_to_rotmat(&ThetaU::new(v).unwrap());
        assert!((r - quat_to_mat(w, x, y, z)).amax() < 1e-10);
        assert!(orthonormality_error(&r) < 1e-10);
    }

    #[test]
    fn tiny_angle_series_is_orthonormal() {
        let v = Vec3::new(3e-9, -1e-9, 2e-9);
        let r = thetau_to_rotmat(&ThetaU::new(v).unwrap());
        assert!(orthonormality_error(&r) < 1e-10);
        let back = rotmat_to_thetau(&r).unwrap().vector();
        assert!((back - v).amax() < 1e-20);
    }

    #[test]
    fn random_quaternion_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let (w, x, y, z) = random_unit_quat(&mut rng);
            let r = quat_to_mat(w, x, y, z);
            let u = rotmat_to_thetau(&r).unwrap();
            assert!(u.angle() <= PI);
            let back = thetau_to_rotmat(&u);
            assert!((back - r).amax() < 1e-9);
        }
    }

    #[test]
    fn near_pi_round_trip() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = PI - rng.random_range(0.0..2e-3);
            let r = rodrigues(&(axis * angle));
            let u = rotmat_to_thetau(&r).unwrap();
            assert!((thetau_to_rotmat(&u) - r).amax() < 1e-8);
        }
    }

    #[test]
    fn non_orthonormal_rejected() {
        let mut r = Mat3::identity();
        r[(0, 1)] = 1e-3;
        assert!(matches!(
            rotmat_to_thetau(&r),
            Err(Error::NonOrthonormalInput(_))
        ));
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            assert_eq!(compose(&p, &Pose::identity()), p);
            let e = compose(&p, &inverse(&p));
            assert!((e.rotation - Mat3::identity()).amax() < 1e-10);
            assert!(e.translation.amax() < 1e-10);
        }
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let h = a.to_homogeneous() * b.to_homogeneous();
            assert!((compose(&a, &b).to_homogeneous() - h).amax() < 1e-12);
            let c = random_pose(&mut rng);
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            assert!((l.to_homogeneous() - r.to_homogeneous()).amax() < 1e-12);
        }
    }

    #[test]
    fn inverse_cases() {
        assert_eq!(inverse(&Pose::identity()), Pose::identity());
        let p = Pose::from_translation(Vec3::new(1.0, -2.0, 0.5));
        assert_eq!(inverse(&p).translation, Vec3::new(-1.0, 2.0, -0.5));
        assert_eq!(inverse(&p).rotation, Mat3::identity());
    }

    #[test]
    fn relative_pose_cases() {
        let mut rng = StdRng::seed_from_u64(13);
        let p = random_pose(&mut rng);
        let e = relative_pose(&p, &p);
        assert!((e.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(e.translation.amax() < 1e-12);

        let cur = Pose::from_translation(Vec3::new(0.1, 0.0, 0.0));
        let rel = relative_pose(&Pose::identity(), &cur);
        assert_eq!(rel.translation, Vec3::new(0.1, 0.0, 0.0));

        for _ in 0..100 {
            let g = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let h = g.to_homogeneous().try_inverse().unwrap() * c.to_homogeneous();
            assert!((relative_pose(&g, &c).to_homogeneous() - h).amax() < 1e-12);
        }
    }

    #[test]
    fn integrate_cases() {
        let mut rng = StdRng::seed_from_u64(14);
        let p = random_pose(&mut rng);
        let same = integrate_twist(&p, &Twist::zero(), 0.3);
        assert_eq!(same.translation, p.translation);
        assert_eq!(same.rotation, p.rotation);

        let tw = Twist {
            linear: Vec3::new(1.0, 0.0, 0.0),
            angular: Vec3::zeros(),
        };
        let q = integrate_twist(&Pose::identity(), &tw, 0.1);
        assert_eq!(q.translation, Vec3::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn rotation_steps_form_one_parameter_subgroup() {
        let mut rng = StdRng::seed_from_u64(15);
        let p = random_pose(&mut rng);
        let tw = Twist {
            linear: Vec3::zeros(),
            angular: Vec3::new(0.0, 0.0, 0.7),
        };
        let (n, dt) = (20, 0.1);
        let mut stepped = p;
        for _ in 0..n {
            stepped = integrate_twist(&stepped, &tw, dt);
        }
        let once = integrate_twist(&p, &tw, n as f64 * dt);
        assert!((stepped.rotation - once.rotation).amax() < 1e-9);
    }

    #[test]
    fn wrapped_thetau_stays_on_principal_branch() {
        let v = Vec3::new(0.0, 0.0, 1.5 * PI);
        let w = ThetaU::wrapped(v);
        assert!(w.angle() <= PI);
        assert!((rodrigues(&v) - thetau_to_rotmat(&w)).amax() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_pose() -> impl Strategy<Value = Pose> {
            (
                prop::array::uniform3(-1.0f64..1.0),
                0.0f64..3.0,
                prop::array::uniform3(-5.0f64..5.0),
            )
                .prop_filter("axis", |(a, _, _)| Vec3::from(*a).norm() > 1e-3)
                .prop_map(|(a, ang, t)| Pose {
                    rotation: rodrigues(&(Vec3::from(a).normalize() * ang)),
                    translation: Vec3::from(t),
                })
        }

        proptest! {
            #[test]
            fn inverse_of_product(a in arb_pose(), b in arb_pose()) {
                let l = inverse(&compose(&a, &b));
                let r = compose(&inverse(&b), &inverse(&a));
                prop_assert!((l.to_homogeneous() - r.to_homogeneous()).amax() < 1e-10);
            }

            #[test]
            fn relative_to_self_is_identity(p in arb_pose()) {
                let e = relative_pose(&p, &p);
                prop_assert!((e.rotation - Mat3::identity()).amax() < 1e-12);
                prop_assert!(e.translation.amax() < 1e-12);
            }

            #[test]
            fn thetau_round_trip(a in prop::array::uniform3(-1.0f64..1.0), ang in 0.0f64..(PI - 1e-3)) {
                let axis = Vec3::from(a);
                prop_assume!(axis.norm() > 1e-3);
                let r = rodrigues(&(axis.normalize() * ang));
                let back = thetau_to_rotmat(&rotmat_to_thetau(&r).unwrap());
                prop_assert!((back - r).amax() < 1e-8);
            }
        }
    }
}
