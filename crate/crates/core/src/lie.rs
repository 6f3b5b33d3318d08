//! SO(3) and SE(3) primitives.
//!
//! Conventions used across the crate:
//!
//! * A [`Twist`] is ordered rotation first, `xi = (phi, rho)`. This matches the
//!   column layout of [`odot`], so that `xi^ u == u^odot xi`.
//! * Errors are left-invariant, `dT = T^-1 T_tilde`, and states are perturbed as
//!   `T = T_bar exp(-dxi^)`.
//! * Closed forms switch to Taylor series below [`SMALL_ANGLE`].

use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Matrix4x6, Matrix6, Vector3, Vector4, Vector6};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle (rad) exp/log/Jacobians use Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Logarithms are refused when the rotation angle is within this of pi.
pub const PI_MARGIN: f64 = 1e-6;

// The SE(3) Jacobian coefficients cancel to fourth order in the angle, so the
// closed forms lose all precision well above SMALL_ANGLE. Series below this.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Direction cosine matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking it. Callers that read external data
    /// should go through [`Rotation::try_from_matrix`].
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Accepts `m` if `|m^T m - I|_F` and `|det m - 1|` are both within `tol`.
    pub fn try_from_matrix(m: Matrix3<f64>, tol: f64) -> std::result::Result<Self, f64> {
        let dev = orthonormality_deviation(&m);
        if dev <= tol {
            Ok(Rotation(m))
        } else {
            Err(dev)
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let k = skew(phi);
        let k2 = k * k;
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let half = 0.5 * theta;
            let s = half.sin() / half;
            (theta.sin() / theta, 0.5 * s * s)
        };
        Rotation(Matrix3::identity() + k * a + k2 * b)
    }

    pub fn log(&self) -> Result<Vector3<f64>> {
        let c = &self.0;
        let v = 0.5 * unskew(&(c - c.transpose()));
        let sin_theta = v.norm();
        let cos_theta = 0.5 * (c.trace() - 1.0);
        let theta = sin_theta.atan2(cos_theta);
        if theta > std::f64::consts::PI - PI_MARGIN {
            return Err(Error::AngleNearPi { angle: theta });
        }
        if theta < SMALL_ANGLE {
            Ok(v * (1.0 + theta * theta / 6.0))
        } else {
            Ok(v * (theta / sin_theta))
        }
    }

    pub fn angle(&self) -> f64 {
        let c = &self.0;
        let sin_theta = 0.5 * unskew(&(c - c.transpose())).norm();
        sin_theta.atan2(0.5 * (c.trace() - 1.0))
    }

    /// Principal rotation about axis 1 (frame rotation convention of the
    /// vehicle's roll), expressed as the active matrix `exp(angle e1^)`.
    pub fn about_x(angle: f64) -> Self {
        Self::exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    /// Nearest rotation in the Frobenius sense (polar decomposition).
    pub fn renormalized(&self) -> Self {
        Rotation(nearest_rotation(&self.0))
    }

    pub fn orthonormality_deviation(&self) -> f64 {
        orthonormality_deviation(&self.0)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

fn orthonormality_deviation(m: &Matrix3<f64>) -> f64 {
    let ortho = (m.transpose() * m - Matrix3::identity()).norm();
    let det = (m.determinant() - 1.0).abs();
    ortho.max(det)
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Element of the Lie algebra se(3), rotation block first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub phi: Vector3<f64>,
    pub rho: Vector3<f64>,
}

impl Twist {
    pub fn new(phi: Vector3<f64>, rho: Vector3<f64>) -> Self {
        Twist { phi, rho }
    }

    pub fn zero() -> Self {
        Twist::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.phi);
        v.fixed_rows_mut::<3>(3).copy_from(&self.rho);
        v
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist::new(self.phi * s, self.rho * s)
    }

    /// The 4x4 matrix `xi^`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.phi));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.rho);
        m
    }

    pub fn norm_inf(&self) -> f64 {
        self.to_vector().amax()
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.phi, -self.rho)
    }
}

/// Rigid-body transform, `[C r; 0 1]`.
///
/// Serializes as a row-major 3×3 rotation plus translation. Deserialization
/// does not check orthonormality; callers validate with
/// [`Rotation::orthonormality_deviation`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRecord", into = "PoseRecord")]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), translation)
    }

    pub fn inverse(&self) -> Self {
        let ct = self.rotation.transpose();
        Pose::new(ct, -(ct.matrix() * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the top 3x4 block of a homogeneous matrix; the bottom row is ignored.
    pub fn from_homogeneous_unchecked(m: &Matrix4<f64>) -> Self {
        Pose::new(
            Rotation::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into()),
            m.fixed_view::<3, 1>(0, 3).into(),
        )
    }

    pub fn exp(xi: &Twist) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Result<Twist> {
        se3_log(self)
    }

    /// Adjoint in the `(phi, rho)` ordering: `T exp(xi^) T^-1 = exp((Ad_T xi)^)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let c = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(c);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(c);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * c));
        ad
    }

    pub fn renormalized(&self) -> Self {
        Pose::new(self.rotation.renormalized(), self.translation)
    }

    /// `self * exp(-delta^)`, renormalized: the crate-wide state update.
    pub fn retract_minus(&self, delta: &Twist) -> Self {
        (*self * se3_exp(&-*delta)).renormalized()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<PoseRecord> for Pose {
    fn from(r: PoseRecord) -> Self {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Pose::new(Rotation::from_matrix_unchecked(m), Vector3::from(r.translation))
    }
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        let m = p.rotation.matrix();
        PoseRecord {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
            translation: p.translation.into(),
        }
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation.matrix() * rhs.translation + self.translation,
        )
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let phi = self.rotation.log().unwrap_or_else(|_| Vector3::repeat(f64::NAN));
        write!(
            f,
            "Pose(phi: [{:.6}, {:.6}, {:.6}] rad, r: [{:.6}, {:.6}, {:.6}] m)",
            phi.x, phi.y, phi.z, t.x, t.y, t.z
        )
    }
}

pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / half;
        (0.5 * s * s, coeff_a(theta))
    };
    Matrix3::identity() + k * b + k * k * c
}

pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0 + theta2 * theta2 * theta2 / 1209600.0
    } else {
        let half = 0.5 * theta;
        1.0 / theta2 - half.cos() / (half.sin() * 2.0 * theta)
    };
    Matrix3::identity() - k * 0.5 + k * k * d
}

// (theta - sin theta) / theta^3
fn coeff_a(theta: f64) -> f64 {
    if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

// (theta^2/2 + cos theta - 1) / theta^4
fn coeff_b(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2 * t2 * t2 / 3628800.0
    } else {
        (0.5 * t2 + theta.cos() - 1.0) / (t2 * t2)
    }
}

// (2 theta - 3 sin theta + theta cos theta) / (2 theta^5)
fn coeff_e(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    } else {
        (2.0 * theta - 3.0 * theta.sin() + theta * theta.cos()) / (2.0 * t2 * t2 * theta)
    }
}

/// Off-diagonal block of the SE(3) left Jacobian.
fn se3_q(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let ppr = p * pr;
    let rpp = rp * p;
    r * 0.5
        + (pr + rp + prp) * coeff_a(theta)
        + (ppr + rpp - prp * 3.0) * coeff_b(theta)
        + (prp * p + p * prp) * coeff_e(theta)
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rotation = Rotation::exp(&xi.phi);
    let translation = so3_left_jacobian(&xi.phi) * xi.rho;
    Pose::new(rotation, translation)
}

pub fn se3_log(t: &Pose) -> Result<Twist> {
    let phi = t.rotation.log()?;
    let rho = so3_left_jacobian_inverse(&phi) * t.translation;
    Ok(Twist::new(phi, rho))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianSide {
    Left,
    Right,
}

/// SE(3) Jacobian in the `(phi, rho)` ordering.
///
/// Left: `exp((xi + d)^) ~ exp((J_l d)^) exp(xi^)`.
/// Right: `exp((xi + d)^) ~ exp(xi^) exp((J_r d)^)`, with `J_r(xi) = J_l(-xi)`.
pub fn se3_jacobian(xi: &Twist, side: JacobianSide) -> Matrix6<f64> {
    let xi = match side {
        JacobianSide::Left => *xi,
        JacobianSide::Right => -*xi,
    };
    let j = so3_left_jacobian(&xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q(&xi.phi, &xi.rho));
    out
}

/// Closed-form inverse of [`se3_jacobian`].
pub fn se3_jacobian_inverse(xi: &Twist, side: JacobianSide) -> Matrix6<f64> {
    let xi = match side {
        JacobianSide::Left => *xi,
        JacobianSide::Right => -*xi,
    };
    let j_inv = so3_left_jacobian_inverse(&xi.phi);
    let q = se3_q(&xi.phi, &xi.rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(j_inv * q * j_inv)));
    out
}

/// `u^odot` for `u = [r; w]`: `[-r^  wI; 0 0]`.
pub fn odot(u: &Vector4<f64>) -> Matrix4x6<f64> {
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&u.xyz())));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * u.w));
    m
}

/// Top 3x6 block of `[r; 1]^odot`.
pub fn odot_point(r: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(r)));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    m
}

/// Geodesic interpolation `T_k exp(alpha log(T_k^-1 T_k1))`.
pub fn interpolate(t_k: &Pose, t_k1: &Pose, time_k: f64, time_k1: f64, time: f64) -> Result<Pose> {
    if !(time_k < time_k1) || time < time_k || time > time_k1 {
        return Err(Error::OutOfInterval {
            t: time,
            start: time_k,
            end: time_k1,
        });
    }
    if time == time_k {
        return Ok(*t_k);
    }
    let alpha = (time - time_k) / (time_k1 - time_k);
    let delta = se3_log(&(t_k.inverse() * *t_k1))?;
    Ok(*t_k * se3_exp(&delta.scaled(alpha)))
}

/// `log(T^-1 T_tilde)^vee`.
pub fn left_invariant_error(t: &Pose, t_tilde: &Pose) -> Result<Twist> {
    se3_log(&(t.inverse() * *t_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn max_abs(m: &Matrix4<f64>) -> f64 {
        m.amax()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn quarter_turn_about_third_axis() {
        let t = se3_exp(&Twist::new(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros()));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((t.rotation.matrix() - expected).amax() < 1e-15);
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
    }

    #[test]
    fn log_refuses_half_turn() {
        let t = se3_exp(&Twist::new(Vector3::new(PI - 1e-7, 0.0, 0.0), Vector3::zeros()));
        assert!(matches!(se3_log(&t), Err(Error::AngleNearPi { .. })));
        let ok = se3_exp(&Twist::new(
            Vector3::new(PI - 1e-4, 0.0, 0.0),
            Vector3::new(1.0, 2.0, 3.0),
        ));
        assert!(se3_log(&ok).is_ok());
    }

    #[test]
    fn round_trip_at_point_three() {
        let xi = Twist::new(Vector3::new(0.1, -0.2, 0.2), Vector3::new(1.0, -0.5, 0.25));
        assert!((xi.phi.norm() - 0.3).abs() < 1e-15);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert!((back.to_vector() - xi.to_vector()).amax() < 1e-12);
    }

    #[test]
    fn odot_layout() {
        let m = odot(&Vector4::new(1.0, 2.0, 3.0, 1.0));
        let tl = Matrix3::new(0.0, 3.0, -2.0, -3.0, 0.0, 1.0, 2.0, -1.0, 0.0);
        assert_eq!(m.fixed_view::<3, 3>(0, 0).into_owned(), tl);
        assert_eq!(m.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::identity());
        assert_eq!(m.row(3).amax(), 0.0);
        let z = odot(&Vector4::new(0.0, 0.0, 0.0, 1.0));
        assert_eq!(z.fixed_view::<3, 3>(0, 0).amax(), 0.0);
    }

    #[test]
    fn twist_order_is_rotation_first() {
        let v = Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let xi = Twist::from_vector(&v);
        assert_eq!(xi.phi, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(xi.rho, Vector3::new(4.0, 5.0, 6.0));
        // the rho block is what moves the origin
        let hat = xi.hat();
        assert_eq!(hat.fixed_view::<3, 1>(0, 3).into_owned(), xi.rho);
    }

    #[test]
    fn jacobians_at_zero_are_identity() {
        for side in [JacobianSide::Left, JacobianSide::Right] {
            assert_eq!(se3_jacobian(&Twist::zero(), side), Matrix6::identity());
            assert_eq!(se3_jacobian_inverse(&Twist::zero(), side), Matrix6::identity());
        }
    }

    #[test]
    fn small_angle_branches_are_continuous() {
        let dir = Vector3::new(0.3, -0.5, 0.8).normalize();
        let rho = Vector3::new(0.4, 1.0, -2.0);
        for side in [JacobianSide::Left, JacobianSide::Right] {
            let below = Twist::new(dir * 0.99e-8, rho);
            let above = Twist::new(dir * 1.01e-8, rho);
            let jb = se3_jacobian(&below, side);
            let ja = se3_jacobian(&above, side);
            assert!((jb - ja).amax() < 1e-9);
            let below = Twist::new(dir * 0.999e-2, rho);
            let above = Twist::new(dir * 1.001e-2, rho);
            let d = se3_jacobian_inverse(&below, side) - se3_jacobian_inverse(&above, side);
            assert!(d.amax() < 1e-4);
        }
        let below = Rotation::exp(&(dir * 0.99e-8));
        let above = Rotation::exp(&(dir * 1.01e-8));
        assert!((below.matrix() - above.matrix()).amax() < 1e-9);
    }

    #[test]
    fn interpolation_boundaries() {
        let a = se3_exp(&Twist::new(Vector3::new(0.1, 0.2, -0.3), Vector3::new(1.0, 2.0, 3.0)));
        let b = se3_exp(&Twist::new(Vector3::new(-0.2, 0.1, 0.4), Vector3::new(-1.0, 0.5, 2.0)));
        assert_eq!(interpolate(&a, &b, 2.0, 3.0, 2.0).unwrap(), a);
        assert!(matches!(
            interpolate(&a, &b, 2.0, 3.0, 3.5),
            Err(Error::OutOfInterval { .. })
        ));
        assert!(matches!(
            interpolate(&a, &b, 2.0, 2.0, 2.0),
            Err(Error::OutOfInterval { .. })
        ));
        let end = interpolate(&a, &b, 2.0, 3.0, 3.0).unwrap();
        assert!(max_abs(&(end.to_homogeneous() - b.to_homogeneous())) < 1e-14);
    }

    #[test]
    fn pure_translation_midpoint() {
        let a = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let b = Pose::from_translation(Vector3::new(3.0, -2.0, 5.0));
        let m = interpolate(&a, &b, 0.0, 4.0, 2.0).unwrap();
        assert!((m.translation - Vector3::new(2.0, 0.0, 4.0)).amax() < 1e-15);
        assert_eq!(*m.rotation.matrix(), Matrix3::identity());
    }

    #[test]
    fn left_invariant_error_construction() {
        let t = se3_exp(&Twist::new(Vector3::new(0.4, 0.2, -0.3), Vector3::new(3.0, -1.0, 2.0)));
        assert_eq!(left_invariant_error(&t, &t).unwrap().norm_inf(), 0.0);
        let xi = Twist::new(Vector3::new(1e-3, -2e-3, 5e-4), Vector3::new(1e-2, 3e-3, -4e-3));
        let e = left_invariant_error(&t, &(t * se3_exp(&xi))).unwrap();
        assert!((e.to_vector() - xi.to_vector()).amax() < 1e-12);
    }

    #[test]
    fn renormalization_is_idempotent_on_rotations() {
        let r = Rotation::exp(&Vector3::new(0.3, -1.2, 2.0));
        let n = r.renormalized();
        assert!((r.matrix() - n.matrix()).amax() < 1e-12);
        let noisy = Rotation::from_matrix_unchecked(r.matrix() + Matrix3::repeat(1e-4));
        let fixed = noisy.renormalized();
        assert!(fixed.orthonormality_deviation() < 1e-12);
    }

    #[test]
    fn try_from_matrix_rejects_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Rotation::try_from_matrix(m, 1e-6).is_err());
        assert!(Rotation::try_from_matrix(Matrix3::identity(), 1e-6).is_ok());
    }

    #[test]
    fn adjoint_conjugates_twists() {
        let t = se3_exp(&Twist::new(Vector3::new(0.4, -0.7, 0.2), Vector3::new(2.0, -1.0, 0.5)));
        let xi = Twist::new(Vector3::new(0.1, 0.05, -0.2), Vector3::new(0.3, 0.2, 0.1));
        let lhs = t * se3_exp(&xi) * t.inverse();
        let rhs = se3_exp(&Twist::from_vector(&(t.adjoint() * xi.to_vector())));
        assert!((lhs.to_homogeneous() - rhs.to_homogeneous()).amax() < 1e-12);
    }
}
