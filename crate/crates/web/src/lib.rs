//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each operation has a plain Rust core that returns `semshape::Result`, so
//! it can be tested natively; the exported wrappers only convert errors.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use wasm_bindgen::prelude::*;

use semshape::eval::iou3d;
use semshape::semantics::feature_pca;
use semshape::synth::{generate_instance, render_partial, CategorySpec, Family, SceneSpec};
use semshape::transform::{axis_angle, rotation_angle_deg, PoseRecord};
use semshape::umeyama::umeyama_solve;
use semshape::{Error, Pose, SemanticCloud, Space};

const PREVIEW_POINTS: usize = 1024;

fn family(name: &str) -> semshape::Result<Family> {
    match name.to_ascii_lowercase().as_str() {
        "box" => Ok(Family::Box),
        "cylinder" => Ok(Family::Cylinder),
        "bottle" => Ok(Family::Bottle),
        "mug" => Ok(Family::Mug),
        other => Err(Error::Usage(format!("unknown family `{other}`"))),
    }
}

fn flatten(points: &[Point3<f64>]) -> Vec<f32> {
    points
        .iter()
        .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
        .collect()
}

/// A synthetic instance and a culled view of it, both colored by a shared
/// PCA of their descriptors.
#[wasm_bindgen]
pub struct ShapePreview {
    full: Vec<f32>,
    full_colors: Vec<u8>,
    partial: Vec<f32>,
    partial_colors: Vec<u8>,
}

#[wasm_bindgen]
impl ShapePreview {
    /// Interleaved xyz of the full instance.
    #[wasm_bindgen(getter)]
    pub fn full(&self) -> Vec<f32> {
        self.full.clone()
    }

    /// Interleaved rgb of the full instance.
    #[wasm_bindgen(getter)]
    pub fn full_colors(&self) -> Vec<u8> {
        self.full_colors.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn partial(&self) -> Vec<f32> {
        self.partial.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn partial_colors(&self) -> Vec<u8> {
        self.partial_colors.clone()
    }
}

pub fn shape_preview_impl(
    name: &str,
    seed: u64,
    view: [f64; 3],
    cull: f64,
) -> semshape::Result<ShapePreview> {
    let mut spec = CategorySpec::new(family(name)?, 1, seed);
    spec.points_per_instance = PREVIEW_POINTS;
    let full = generate_instance(&spec, 0)?.cloud;
    let extents = full
        .extents()
        .ok_or_else(|| Error::Usage("empty instance".into()))?;
    let pose = Pose::new(
        Matrix3::identity(),
        Vector3::zeros(),
        extents / extents.norm(),
    )?;
    let scene = SceneSpec {
        gt_pose: PoseRecord::from(&pose),
        view_direction: view,
        cull_fraction: cull,
        noise_sigma: 0.0,
        outlier_count: 0,
        seed,
    };
    let partial = render_partial(&full, &scene)?;
    let partial = SemanticCloud::new(
        partial.points().to_vec(),
        partial.descriptors().cloned(),
        Space::Nocs,
    )?;
    let pca = feature_pca(&[full.clone(), partial.clone()])?;
    let colors = |c: &[[u8; 3]]| c.iter().flatten().copied().collect::<Vec<u8>>();
    Ok(ShapePreview {
        full: flatten(full.points()),
        full_colors: colors(&pca.colors[0]),
        partial: flatten(partial.points()),
        partial_colors: colors(&pca.colors[1]),
    })
}

/// Generates a `family` instance and its view along `(vx, vy, vz)` with
/// `cull` of the points removed.
#[wasm_bindgen]
pub fn shape_preview(
    family: &str,
    seed: u64,
    vx: f64,
    vy: f64,
    vz: f64,
    cull: f64,
) -> Result<ShapePreview, JsError> {
    shape_preview_impl(family, seed, [vx, vy, vz], cull).map_err(|e| JsError::new(&e.to_string()))
}

/// Errors of a similarity transform recovered from noisy correspondences.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct Recovery {
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub scale_error: f64,
    pub true_scale: f64,
    pub estimated_scale: f64,
}

pub fn recover_similarity_impl(seed: u64, points: usize, sigma: f64) -> semshape::Result<Recovery> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!(
            "noise sigma {sigma} must be finite and non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Usage(e.to_string()))?;
    let src: Vec<Point3<f64>> = (0..points)
        .map(|_| {
            Point3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();
    let axis = Vector3::new(
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
    );
    let rot = axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI));
    let t = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.5..1.5),
    );
    let s = rng.random_range(0.1..0.5);
    let dst: Vec<Point3<f64>> = src
        .iter()
        .map(|p| {
            Point3::from(s * (rot * p.coords) + t + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
        })
        .collect();
    let est = umeyama_solve(
        &SemanticCloud::from_points(src, Space::Nocs)?,
        &SemanticCloud::from_points(dst, Space::Camera)?,
        true,
    )?;
    Ok(Recovery {
        rotation_error_deg: rotation_angle_deg(&est.rotation, &rot),
        translation_error: (est.translation - t).norm(),
        scale_error: (est.scale - s).abs(),
        true_scale: s,
        estimated_scale: est.scale,
    })
}

/// Recovers a random similarity transform from `points` correspondences
/// jittered by Gaussian noise of standard deviation `sigma`.
#[wasm_bindgen]
pub fn recover_similarity(seed: u64, points: usize, sigma: f64) -> Result<Recovery, JsError> {
    recover_similarity_impl(seed, points, sigma).map_err(|e| JsError::new(&e.to_string()))
}

pub fn box_iou_impl(
    size_a: [f64; 3],
    size_b: [f64; 3],
    offset: [f64; 3],
    yaw_deg: f64,
) -> semshape::Result<f64> {
    let a = Pose::new(Matrix3::identity(), Vector3::zeros(), Vector3::from(size_a))?;
    let rot = axis_angle(&Vector3::z(), yaw_deg.to_radians());
    let b = Pose::new(rot, Vector3::from(offset), Vector3::from(size_b))?;
    Ok(iou3d(&a, &b)?.iou)
}

/// Exact IoU of an axis-aligned box at the origin and a second box moved by
/// `offset` and turned `yaw_deg` about z.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn box_iou(
    ax: f64,
    ay: f64,
    az: f64,
    bx: f64,
    by: f64,
    bz: f64,
    dx: f64,
    dy: f64,
    dz: f64,
    yaw_deg: f64,
) -> Result<f64, JsError> {
    box_iou_impl([ax, ay, az], [bx, by, bz], [dx, dy, dz], yaw_deg)
        .map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_colors_every_point() {
        let p = shape_preview_impl("mug", 3, [0.0, 0.0, 1.0], 0.5).unwrap();
        assert_eq!(p.full.len(), 3 * PREVIEW_POINTS);
        assert_eq!(p.full_colors.len(), p.full.len());
        assert_eq!(p.partial_colors.len(), p.partial.len());
        assert!(!p.partial.is_empty() && p.partial.len() < p.full.len());
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!(shape_preview_impl("teapot", 0, [0.0, 0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn noise_free_recovery_is_exact() {
        let r = recover_similarity_impl(5, 50, 0.0).unwrap();
        assert!(r.rotation_error_deg < 1e-6 && r.translation_error < 1e-9 && r.scale_error < 1e-9);
        let noisy = recover_similarity_impl(5, 50, 0.01).unwrap();
        assert!(noisy.rotation_error_deg > 0.0 && noisy.rotation_error_deg < 10.0);
    }

    #[test]
    fn box_iou_cases() {
        assert!((box_iou_impl([1.0; 3], [1.0; 3], [0.0; 3], 0.0).unwrap() - 1.0).abs() < 1e-12);
        let half = box_iou_impl([1.0; 3], [1.0; 3], [0.5, 0.0, 0.0], 0.0).unwrap();
        assert!((half - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            box_iou_impl([1.0; 3], [1.0; 3], [3.0, 0.0, 0.0], 45.0).unwrap(),
            0.0
        );
        assert!(box_iou_impl([1.0; 3], [0.0, 1.0, 1.0], [0.0; 3], 0.0).is_err());
    }
}
