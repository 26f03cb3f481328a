//! Closed-form least-squares similarity between corresponded point sets.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::cloud::SemanticCloud;
use crate::error::{Error, Result};
use crate::transform::SimilarityTransform;

/// Ratio of the second to the first singular value of the centered source
/// below which the configuration counts as collinear.
const RANK_TOL: f64 = 1e-10;

/// Solves `min Σ |s·R·x_i + t − y_i|²` over rotations (det +1), translations
/// and, when `with_scale`, positive scales. Point `i` of `source` pairs with
/// point `i` of `target`.
pub fn umeyama_solve(
    source: &SemanticCloud,
    target: &SemanticCloud,
    with_scale: bool,
) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::Dimension(format!(
            "source has {} points, target {}",
            source.len(),
            target.len()
        )));
    }
    umeyama_points(source.points(), target.points(), with_scale)
}

pub(crate) fn umeyama_points(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    with_scale: bool,
) -> Result<SimilarityTransform> {
    let n = source.len();
    if n < 3 || target.len() != n {
        return Err(Error::precondition(format!(
            "need at least 3 paired points, got {n} and {}",
            target.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_x: Vector3<f64> = source.iter().map(|p| p.coords).sum::<Vector3<f64>>() * inv_n;
    let mu_y: Vector3<f64> = target.iter().map(|p| p.coords).sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = x.coords - mu_x;
        let dy = y.coords - mu_y;
        cov += dy * dx.transpose();
        src_cov += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv_n;
    var_x *= inv_n;

    let sv = src_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().map(|v| v.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "source points are coincident or collinear".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let imin = d.imin();
        s_diag[imin] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = if with_scale {
        d.dot(&s_diag) / var_x
    } else {
        1.0
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateConfiguration(format!(
            "recovered scale {scale} is not positive"
        )));
    }
    let translation = mu_y - scale * rotation * mu_x;
    SimilarityTransform::new(rotation, translation, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Space;
    use crate::transform::{axis_angle, rotation_angle_deg};

    fn c(pts: Vec<Point3<f64>>) -> SemanticCloud {
        SemanticCloud::from_points(pts, Space::Nocs).unwrap()
    }

    fn tetra() -> Vec<Point3<f64>> {
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.3, 0.7, 0.2),
        ]
    }

    #[test]
    fn identity_case() {
        let t = umeyama_solve(&c(tetra()), &c(tetra()), true).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pure_translation() {
        let shifted: Vec<_> = tetra()
            .iter()
            .map(|p| p + Vector3::new(0.0, 0.0, 5.0))
            .collect();
        let t = umeyama_solve(&c(tetra()), &c(shifted), true).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!((t.translation - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_planar_configuration_without_reflection() {
        // planar (rank 2) source is allowed
        let src: Vec<_> = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
        ];
        let gt = SimilarityTransform::new(
            axis_angle(&Vector3::new(1.0, 0.2, 0.1), 2.5),
            Vector3::new(1.0, 2.0, 3.0),
            0.4,
        )
        .unwrap();
        let dst: Vec<_> = src.iter().map(|p| gt.apply(p)).collect();
        let t = umeyama_solve(&c(src), &c(dst), true).unwrap();
        assert!(rotation_angle_deg(&t.rotation, &gt.rotation) < 1e-6);
        assert!((t.scale - 0.4).abs() < 1e-9);
    }

    #[test]
    fn rigid_mode_keeps_unit_scale() {
        let gt = SimilarityTransform::new(
            axis_angle(&Vector3::y(), 0.4),
            Vector3::new(0.5, 0.0, 0.0),
            1.0,
        )
        .unwrap();
        let dst: Vec<_> = tetra().iter().map(|p| gt.apply(p)).collect();
        let t = umeyama_solve(&c(tetra()), &c(dst), false).unwrap();
        assert_eq!(t.scale, 1.0);
        assert!((t.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn rejects_collinear_and_small_inputs() {
        let line: Vec<_> = (0..5)
            .map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0))
            .collect();
        assert!(matches!(
            umeyama_solve(&c(line.clone()), &c(line), true),
            Err(Error::DegenerateConfiguration(_))
        ));
        let two = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            umeyama_solve(&c(two.clone()), &c(two), true),
            Err(Error::Precondition(_))
        ));
    }
}
