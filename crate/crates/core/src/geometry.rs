//! SE(3) pose algebra and pinhole projection.
//!
//! Tangent vectors are ordered `[rotation; translation]` and poses are
//! perturbed on the right: `x ⊕ δ = x ∘ exp(δ)`. All Jacobians in the
//! crate follow that convention.

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the closed-form exp/log switch to series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Points closer than this to the image plane are treated as behind the camera.
pub const DEFAULT_Z_MIN: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} is at the log branch cut (pi)")]
    BranchCut(f64),
    #[error("point is behind the camera (z = {0})")]
    Behind(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation matrix is not orthonormal")]
    NotOrthonormal,
}

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of se(3), `[rotation (rad); translation (m)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }
}

/// Rigid transform from a local frame to the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal
    /// matrices within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotOrthonormal);
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: *q.to_rotation_matrix().matrix(), translation }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Expresses a world point in this pose's local frame: `Rᵀ(p − t)`.
    pub fn transform_to_frame(&self, point_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point_world - self.translation)
    }

    /// Maps a local point to the world frame: `R p + t`.
    pub fn transform_from_frame(&self, point_local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point_local + self.translation
    }

    pub fn exp(t: &Twist) -> Pose {
        let (rotation, v) = so3_exp_with_v(&t.rotation);
        Pose { rotation, translation: v * t.translation }
    }

    /// Logarithm map. Fails within 1e-6 rad of a half turn, where the
    /// rotation axis is ambiguous.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let theta = rotation_angle(&self.rotation);
        if std::f64::consts::PI - theta < SMALL_ANGLE {
            return Err(GeometryError::BranchCut(theta));
        }
        Ok(self.log_unchecked())
    }

    /// Logarithm map that always returns a value. At a half turn one of the
    /// two equivalent axes is chosen.
    pub fn log_unchecked(&self) -> Twist {
        let omega = so3_log(&self.rotation);
        let v_inv = so3_left_jacobian_inv(&omega);
        Twist::new(omega, v_inv * self.translation)
    }

    /// Adjoint in `[rotation; translation]` ordering.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&self.translation) * self.rotation));
        ad
    }

    /// `self ∘ exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        self.compose(&Pose::exp(&Twist::from_vector(delta)))
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }
}

/// Robust rotation angle in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = vee(&(r - r.transpose())).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

fn so3_exp_with_v(omega: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let w2 = w * w;
    let (a, b, c) = if theta < 1e-3 {
        let t4 = theta2 * theta2;
        (1.0 - theta2 / 6.0 + t4 / 120.0, 0.5 - theta2 / 24.0 + t4 / 720.0, 1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0)
    } else {
        let (s, co) = theta.sin_cos();
        (s / theta, (1.0 - co) / theta2, (theta - s) / (theta2 * theta))
    };
    let r = Matrix3::identity() + w * a + w2 * b;
    let v = Matrix3::identity() + w * b + w2 * c;
    (r, v)
}

pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    so3_exp_with_v(omega).0
}

/// SO(3) logarithm valid over the whole group, half turns included.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let theta = rotation_angle(r);
    let axis_part = vee(&(r - r.transpose()));
    if theta < SMALL_ANGLE {
        // (R − Rᵀ)/2 ≈ ω^ to second order
        return axis_part * (0.5 + theta * theta / 12.0);
    }
    if std::f64::consts::PI - theta < 1e-3 {
        // Near a half turn the antisymmetric part vanishes; recover the axis
        // from the symmetric part R + Rᵀ = 2cosθ I + 2(1 − cosθ) a aᵀ.
        let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * theta.cos();
        let k = Vector3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]).imax();
        let mut axis = b.column(k).normalize();
        // sign from whatever antisymmetric part remains
        if axis.dot(&axis_part) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    axis_part * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3); equals the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    so3_exp_with_v(omega).1
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let coeff = if theta < 1e-2 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30_240.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * coeff
}

/// Coupling block `Q(ρ, φ)` of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (c1, c2, c3) = if theta < 0.1 {
        let t2 = theta2;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362_880.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40_320.0 - t6 / 3_628_800.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120_960.0 - t6 / 9_979_200.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        (
            (theta - s) / t3,
            (theta2 / 2.0 + c - 1.0) / (theta2 * theta2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t3 * theta2),
        )
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) in `[rotation; translation]` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.rotation);
    let q = se3_q(&xi.translation, &xi.rotation);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let j_inv = so3_left_jacobian_inv(&xi.rotation);
    let q = se3_q(&xi.translation, &xi.rotation);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(j_inv * q * j_inv)));
    out
}

/// Inverse right Jacobian: `log(exp(ξ) exp(δ)) ≈ ξ + Jr⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist::new(-xi.rotation, -xi.translation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Pinhole projection with the default near-plane cutoff.
    pub fn project(&self, point_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.project_with_cutoff(point_cam, DEFAULT_Z_MIN)
    }

    pub fn project_with_cutoff(&self, p: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= z_min {
            return Err(GeometryError::Behind(p.z));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx * depth, (pixel.y - self.cy) / self.fy * depth, depth)
    }
}

/// Axis-aligned pixel rectangle `(u_min, v_min, u_max, v_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl PixelBox {
    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0) * (self.v_max - self.v_min).max(0.0)
    }

    pub fn intersection(&self, other: &PixelBox) -> Option<PixelBox> {
        let b = PixelBox {
            u_min: self.u_min.max(other.u_min),
            v_min: self.v_min.max(other.v_min),
            u_max: self.u_max.min(other.u_max),
            v_max: self.v_max.min(other.v_max),
        };
        (b.u_max > b.u_min && b.v_max > b.v_min).then_some(b)
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection(other).map_or(0.0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: u32, height: u32) -> Option<PixelBox> {
        self.intersection(&PixelBox { u_min: 0.0, v_min: 0.0, u_max: width as f64, v_max: height as f64 })
    }

    pub fn expand(&self, fraction: f64) -> PixelBox {
        let du = (self.u_max - self.u_min) * fraction;
        let dv = (self.v_max - self.v_min) * fraction;
        PixelBox { u_min: self.u_min - du, v_min: self.v_min - dv, u_max: self.u_max + du, v_max: self.v_max + dv }
    }

    pub fn rounded(&self) -> [i64; 4] {
        [self.u_min.round() as i64, self.v_min.round() as i64, self.u_max.round() as i64, self.v_max.round() as i64]
    }
}

/// Projects the eight corners of a world axis-aligned box and returns the
/// unclipped pixel hull. `None` when the center is not in front of the
/// camera. Corners that fall behind the near plane are skipped.
pub fn project_box(
    k: &CameraIntrinsics,
    camera: &Pose,
    center: &Vector3<f64>,
    extent: &Vector3<f64>,
    z_min: f64,
) -> Option<PixelBox> {
    if camera.transform_to_frame(center).z <= z_min {
        return None;
    }
    let half = extent * 0.5;
    let mut hull: Option<PixelBox> = None;
    for i in 0..8 {
        let sign = |bit: usize| if i & bit == 0 { -1.0 } else { 1.0 };
        let corner = center + Vector3::new(sign(1) * half.x, sign(2) * half.y, sign(4) * half.z);
        let Ok(px) = k.project_with_cutoff(&camera.transform_to_frame(&corner), z_min) else {
            continue;
        };
        hull = Some(match hull {
            None => PixelBox { u_min: px.x, v_min: px.y, u_max: px.x, v_max: px.y },
            Some(b) => PixelBox {
                u_min: b.u_min.min(px.x),
                v_min: b.v_min.min(px.y),
                u_max: b.u_max.max(px.x),
                v_max: b.v_max.max(px.y),
            },
        });
    }
    hull
}
