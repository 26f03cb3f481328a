//! Similarity transforms and 9-DoF object poses.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

pub(crate) fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !err.is_finite() || err > ORTHO_TOL {
        return Err(Error::precondition(format!(
            "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::precondition(format!(
            "rotation determinant is {det}, expected +1"
        )));
    }
    Ok(())
}

/// Projects a near-rotation onto SO(3) via SVD.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// `x ↦ scale · R · x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        check_rotation(&rotation)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::precondition(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn apply_inverse(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation) / self.scale)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }
}

/// Rotation, translation (meters) and bounding-box size (meters).
///
/// The uniform NOCS→camera scale is the size diagonal: NOCS instances are
/// normalized so their bounding-box diagonal is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub size: Vector3<f64>,
}

impl Pose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        size: Vector3<f64>,
    ) -> Result<Self> {
        check_rotation(&rotation)?;
        if !size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::precondition(format!(
                "size must be positive, got {size:?}"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::precondition("translation is not finite"));
        }
        Ok(Self {
            rotation,
            translation,
            size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.rotation, self.translation, self.size).map(|_| ())
    }

    pub fn uniform_scale(&self) -> f64 {
        self.size.norm()
    }

    /// NOCS → camera similarity implied by this pose.
    pub fn to_similarity(&self) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation,
            translation: self.translation,
            scale: self.uniform_scale(),
        }
    }

    pub fn nocs_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        self.to_similarity().apply(p)
    }

    pub fn camera_to_nocs(&self, p: &Point3<f64>) -> Point3<f64> {
        self.to_similarity().apply_inverse(p)
    }

    /// Applies a rigid motion `(r, t)` on the camera side.
    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self {
            rotation: r * self.rotation,
            translation: r * self.translation + t,
            size: self.size,
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

/// Serialized pose layout shared by scene and result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub size: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self {
            rotation: p.rotation_row_major(),
            translation: p.translation.into(),
            size: p.size.into(),
        }
    }
}

impl TryFrom<&PoseRecord> for Pose {
    type Error = Error;

    fn try_from(r: &PoseRecord) -> Result<Self> {
        Pose::new(
            Matrix3::from_row_slice(&r.rotation),
            Vector3::from(r.translation),
            Vector3::from(r.size),
        )
    }
}

/// Geodesic angle between two rotations, degrees.
///
/// Uses `atan2(sin, cos)` so that tiny angles keep full precision.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let cos = (rel.trace() - 1.0) / 2.0;
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = axis.norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

pub fn axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle_rad).into_inner()
}
