//! Parametric synthetic categories with known deformation modes, procedural
//! descriptors and partial camera views.
//!
//! Every family is built from analytic surface patches sampled uniformly by
//! area. All instances of a category share one surface-sampling stream, so
//! equal mode parameters give identical clouds and point `i` sits at the
//! same parametric location across instances.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Point3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{FeatureMatrix, SemanticCloud, Space};
use crate::error::{Error, Result};
use crate::seed::derive;
use crate::spatial::KdTree;
use crate::transform::Pose;

/// Part channels of the procedural descriptor.
const PART_CHANNELS: usize = 8;
const DESCRIPTOR_BLUR_K: usize = 16;
const NORMAL_K: usize = 16;
/// Fewest points a rendered view may keep.
pub const MIN_VIEW_POINTS: usize = 32;
/// Outliers keep at least this NOCS distance from the object surface.
pub const OUTLIER_CLEARANCE: f64 = 0.15;

const BODY: usize = 0;
const TOP: usize = 1;
const BOTTOM: usize = 2;
const NECK: usize = 3;
const HANDLE: usize = 4;
const SHOULDER: usize = 5;
const FLANK: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    Box,
    Cylinder,
    Bottle,
    Mug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Symmetry {
    None,
    AxialZ,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::Bottle => "bottle",
            Family::Mug => "mug",
        }
    }

    /// Names of the two generative modes, in parameter order.
    pub fn mode_names(self) -> [&'static str; 2] {
        match self {
            Family::Box => ["length", "height"],
            Family::Cylinder => ["radius", "height"],
            Family::Bottle => ["body_height", "neck_radius"],
            Family::Mug => ["radius", "height"],
        }
    }

    pub fn default_mode_ranges(self) -> Vec<[f64; 2]> {
        match self {
            Family::Box => vec![[0.6, 1.2], [0.4, 1.0]],
            Family::Cylinder => vec![[0.25, 0.5], [0.6, 1.4]],
            Family::Bottle => vec![[0.45, 0.7], [0.08, 0.16]],
            Family::Mug => vec![[0.3, 0.45], [0.6, 1.0]],
        }
    }

    pub fn default_symmetry(self) -> Symmetry {
        match self {
            Family::Box | Family::Mug => Symmetry::None,
            Family::Cylinder | Family::Bottle => Symmetry::AxialZ,
        }
    }

    /// Closed interval each mode parameter must stay inside.
    fn mode_limits(self) -> [[f64; 2]; 2] {
        match self {
            Family::Box => [[0.05, 10.0], [0.05, 10.0]],
            Family::Cylinder => [[0.02, 5.0], [0.05, 10.0]],
            Family::Bottle => [[0.1, 0.8], [0.02, 0.28]],
            Family::Mug => [[0.05, 5.0], [0.1, 10.0]],
        }
    }
}

fn default_points() -> usize {
    2048
}

fn default_descriptor_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub family: Family,
    /// Defaults to the family name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<String>,
    /// One `[min, max]` interval per mode; empty selects the family defaults.
    #[serde(default)]
    pub mode_ranges: Vec<[f64; 2]>,
    pub instance_count: usize,
    #[serde(default = "default_points")]
    pub points_per_instance: usize,
    /// Defaults to the family's natural symmetry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry: Option<Symmetry>,
    #[serde(default = "default_descriptor_dim")]
    pub descriptor_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl CategorySpec {
    pub fn new(family: Family, instance_count: usize, seed: u64) -> Self {
        Self {
            family,
            category_id: None,
            mode_ranges: Vec::new(),
            instance_count,
            points_per_instance: default_points(),
            symmetry: None,
            descriptor_dim: default_descriptor_dim(),
            seed,
        }
    }

    pub fn id(&self) -> String {
        self.category_id
            .clone()
            .unwrap_or_else(|| self.family.name().to_string())
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry.unwrap_or(self.family.default_symmetry())
    }

    pub fn ranges(&self) -> Vec<[f64; 2]> {
        if self.mode_ranges.is_empty() {
            self.family.default_mode_ranges()
        } else {
            self.mode_ranges.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instance_count < 2 {
            return Err(Error::precondition("instance_count must be at least 2"));
        }
        if self.points_per_instance < DESCRIPTOR_BLUR_K {
            return Err(Error::precondition(format!(
                "points_per_instance must be at least {DESCRIPTOR_BLUR_K}"
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::precondition("descriptor_dim must be positive"));
        }
        let ranges = self.ranges();
        if ranges.len() != 2 {
            return Err(Error::Dimension(format!(
                "{} family has 2 modes, got {} ranges",
                self.family.name(),
                ranges.len()
            )));
        }
        let names = self.family.mode_names();
        for (k, ([lo, hi], [min, max])) in ranges.iter().zip(self.family.mode_limits()).enumerate()
        {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::precondition(format!(
                    "mode `{}` range [{lo}, {hi}] is not an interval",
                    names[k]
                )));
            }
            if *lo < min || *hi > max {
                return Err(Error::precondition(format!(
                    "mode `{}` range [{lo}, {hi}] leaves the valid interval [{min}, {max}]",
                    names[k]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    /// NOCS points with procedural descriptors.
    pub cloud: SemanticCloud,
    pub modes: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CategoryDataset {
    pub spec: CategorySpec,
    pub instances: Vec<Instance>,
}

impl CategoryDataset {
    pub fn symmetry(&self) -> Symmetry {
        self.spec.symmetry()
    }

    pub fn clouds(&self) -> Vec<SemanticCloud> {
        self.instances.iter().map(|i| i.cloud.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Surface patches

#[derive(Debug, Clone, Copy)]
enum Surface {
    /// Parallelogram `origin + u·e1 + v·e2`.
    Rect {
        origin: Vector3<f64>,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
    },
    /// Disk perpendicular to z.
    Disk { z: f64, radius: f64 },
    /// Lateral surface of a z-aligned frustum.
    Frustum { z0: f64, z1: f64, r0: f64, r1: f64 },
    /// Torus section in the xz-plane around `center`, major angle in `[-phi, phi]`.
    Torus {
        center: Vector3<f64>,
        major: f64,
        minor: f64,
        phi: f64,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Rect { e1, e2, .. } => e1.cross(&e2).norm(),
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::Frustum { z0, z1, r0, r1 } => {
                PI * (r0 + r1) * ((z1 - z0).powi(2) + (r1 - r0).powi(2)).sqrt()
            }
            Surface::Torus {
                major, minor, phi, ..
            } => 2.0 * phi * TAU * minor * major,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        match *self {
            Surface::Rect { origin, e1, e2 } => {
                origin + rng.random::<f64>() * e1 + rng.random::<f64>() * e2
            }
            Surface::Disk { z, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let th = TAU * rng.random::<f64>();
                Vector3::new(r * th.cos(), r * th.sin(), z)
            }
            Surface::Frustum { z0, z1, r0, r1 } => {
                // slant position with density proportional to the local radius
                let u: f64 = rng.random();
                let t = if (r1 - r0).abs() < 1e-12 {
                    u
                } else {
                    let a = r1 - r0;
                    (-r0 + (r0 * r0 + u * a * (2.0 * r0 + a)).sqrt()) / a
                };
                let r = r0 + (r1 - r0) * t;
                let th = TAU * rng.random::<f64>();
                Vector3::new(r * th.cos(), r * th.sin(), z0 + (z1 - z0) * t)
            }
            Surface::Torus {
                center,
                major,
                minor,
                phi,
            } => loop {
                let p = rng.random_range(-phi..=phi);
                let th = TAU * rng.random::<f64>();
                let w = (major + minor * th.cos()) / (major + minor);
                if rng.random::<f64>() <= w {
                    let ring = major + minor * th.cos();
                    break center + Vector3::new(ring * p.cos(), minor * th.sin(), ring * p.sin());
                }
            },
        }
    }
}

fn patches(family: Family, modes: &[f64]) -> Vec<(usize, Surface)> {
    let disk = |z, radius| Surface::Disk { z, radius };
    let side = |z0, z1, r| Surface::Frustum {
        z0,
        z1,
        r0: r,
        r1: r,
    };
    match family {
        Family::Box => {
            let (l, w, h) = (modes[0], 0.6, modes[1]);
            let o = Vector3::new(-l / 2.0, -w / 2.0, 0.0);
            let (ex, ey, ez) = (Vector3::x() * l, Vector3::y() * w, Vector3::z() * h);
            vec![
                (
                    BOTTOM,
                    Surface::Rect {
                        origin: o,
                        e1: ex,
                        e2: ey,
                    },
                ),
                (
                    TOP,
                    Surface::Rect {
                        origin: o + ez,
                        e1: ex,
                        e2: ey,
                    },
                ),
                (
                    BODY,
                    Surface::Rect {
                        origin: o,
                        e1: ey,
                        e2: ez,
                    },
                ),
                (
                    BODY,
                    Surface::Rect {
                        origin: o + ex,
                        e1: ey,
                        e2: ez,
                    },
                ),
                (
                    FLANK,
                    Surface::Rect {
                        origin: o,
                        e1: ex,
                        e2: ez,
                    },
                ),
                (
                    FLANK,
                    Surface::Rect {
                        origin: o + ey,
                        e1: ex,
                        e2: ez,
                    },
                ),
            ]
        }
        Family::Cylinder => {
            let (r, h) = (modes[0], modes[1]);
            vec![
                (BODY, side(0.0, h, r)),
                (TOP, disk(h, r)),
                (BOTTOM, disk(0.0, r)),
            ]
        }
        Family::Bottle => {
            let (r, hb, rn, total) = (0.3, modes[0], modes[1], 1.0);
            let hs = hb + 0.15;
            vec![
                (BOTTOM, disk(0.0, r)),
                (BODY, side(0.0, hb, r)),
                (
                    SHOULDER,
                    Surface::Frustum {
                        z0: hb,
                        z1: hs,
                        r0: r,
                        r1: rn,
                    },
                ),
                (NECK, side(hs, total, rn)),
                (TOP, disk(total, rn)),
            ]
        }
        Family::Mug => {
            let (r, h) = (modes[0], modes[1]);
            let major = 0.25 * h;
            vec![
                (BODY, side(0.0, h, r)),
                (BOTTOM, disk(0.0, r)),
                (
                    HANDLE,
                    Surface::Torus {
                        center: Vector3::new(r, 0.0, h / 2.0),
                        major,
                        minor: 0.04,
                        phi: PI / 2.0,
                    },
                ),
            ]
        }
    }
}

/// Samples `count` labelled surface points, then moves the centroid to the
/// origin and scales the tight bounding-box diagonal to one.
fn sample_surface(
    family: Family,
    modes: &[f64],
    count: usize,
    seed: u64,
) -> (Vec<Point3<f64>>, Vec<usize>) {
    let parts = patches(family, modes);
    let areas: Vec<f64> = parts.iter().map(|(_, s)| s.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < parts.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        pts.push(parts[k].1.sample(&mut rng));
        labels.push(parts[k].0);
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let diag = (hi - lo).norm();
    let pts = pts
        .iter()
        .map(|p| Point3::from((p - center) / diag))
        .collect();
    (pts, labels)
}

/// Smoothed part one-hot channels followed by low-frequency harmonics.
///
/// Harmonic channel `h` uses frequency `π·(1 + h/4)` (integer division) on
/// `sin x, sin y, sin z, cos r` in turn, `r` being the distance to the z axis.
pub fn procedural_descriptors(
    points: &[Point3<f64>],
    labels: &[usize],
    dim: usize,
) -> FeatureMatrix {
    let tree = KdTree::new(points);
    let k = DESCRIPTOR_BLUR_K.min(points.len());
    let mut f = FeatureMatrix::zeros(points.len(), dim);
    for (i, p) in points.iter().enumerate() {
        let row = f.row_mut(i);
        if dim > 0 {
            let mut hist = [0.0; PART_CHANNELS];
            for j in tree.knn(p, k) {
                hist[labels[j]] += 1.0 / k as f64;
            }
            let n = PART_CHANNELS.min(dim);
            row[..n].copy_from_slice(&hist[..n]);
        }
        for (h, v) in row.iter_mut().enumerate().skip(PART_CHANNELS) {
            let h = h - PART_CHANNELS;
            let w = PI * (1 + h / 4) as f64;
            *v = match h % 4 {
                0 => (w * p.x).sin(),
                1 => (w * p.y).sin(),
                2 => (w * p.z).sin(),
                _ => (w * p.x.hypot(p.y)).cos(),
            };
        }
    }
    f
}

fn mode_value<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn generate_instance(spec: &CategorySpec, index: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, 1 + index as u64));
    let modes: Vec<f64> = spec
        .ranges()
        .iter()
        .map(|r| mode_value(&mut rng, *r))
        .collect();
    instance_with_modes(spec, &format!("{}_{index:03}", spec.id()), modes)
}

/// Builds an instance with explicit mode parameters.
pub fn instance_with_modes(spec: &CategorySpec, id: &str, modes: Vec<f64>) -> Result<Instance> {
    let (pts, labels) = sample_surface(
        spec.family,
        &modes,
        spec.points_per_instance,
        derive(spec.seed, 0),
    );
    let feats = procedural_descriptors(&pts, &labels, spec.descriptor_dim);
    Ok(Instance {
        id: id.to_string(),
        cloud: SemanticCloud::new(pts, Some(feats), Space::Nocs)?,
        modes,
    })
}

pub fn generate_category(spec: &CategorySpec) -> Result<CategoryDataset> {
    spec.validate()?;
    let instances = (0..spec.instance_count)
        .map(|i| generate_instance(spec, i))
        .collect::<Result<_>>()?;
    Ok(CategoryDataset {
        spec: spec.clone(),
        instances,
    })
}

// ---------------------------------------------------------------------------
// Views

/// Outward unit normals from the smallest principal axis of each point's
/// neighbourhood, oriented away from the centroid.
pub fn estimate_normals(points: &[Point3<f64>]) -> Vec<Vector3<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(points);
    let k = NORMAL_K.min(points.len());
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / points.len() as f64;
    points
        .iter()
        .map(|p| {
            let nb = tree.knn(p, k);
            let mean = nb
                .iter()
                .fold(Vector3::zeros(), |a, &j| a + points[j].coords)
                / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &j in &nb {
                let d = points[j].coords - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let (mut imin, mut vmin) = (0, f64::INFINITY);
            for i in 0..3 {
                if eig.eigenvalues[i] < vmin {
                    vmin = eig.eigenvalues[i];
                    imin = i;
                }
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(imin).into();
            let out = p.coords - c;
            if n.dot(&out) < 0.0 {
                n = -n;
            }
            n
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub gt_pose: crate::transform::PoseRecord,
    /// Direction the camera looks along, in camera coordinates.
    pub view_direction: [f64; 3],
    pub cull_fraction: f64,
    pub noise_sigma: f64,
    pub outlier_count: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn pose(&self) -> Result<Pose> {
        Pose::try_from(&self.gt_pose)
    }

    pub fn view(&self) -> Result<Vector3<f64>> {
        let v = Vector3::from(self.view_direction);
        let n = v.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::precondition(
                "view direction must be a non-zero vector",
            ));
        }
        Ok(v / n)
    }

    pub fn validate(&self) -> Result<()> {
        self.pose()?;
        self.view()?;
        if !(0.0..=0.8).contains(&self.cull_fraction) {
            return Err(Error::precondition(format!(
                "cull_fraction {} outside [0, 0.8]",
                self.cull_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::precondition(
                "noise_sigma must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Ranges for randomly drawn scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Bounding-box diagonal in meters.
    pub object_scale: [f64; 2],
    /// Distance of the object center from the camera in meters.
    pub distance: [f64; 2],
    /// Half-width of the lateral offset window in meters.
    pub lateral: f64,
    pub cull_fraction: f64,
    pub noise_sigma: f64,
    pub outlier_count: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            object_scale: [0.15, 0.35],
            distance: [0.6, 1.0],
            lateral: 0.15,
            cull_fraction: 0.5,
            noise_sigma: 0.005,
            outlier_count: 5,
        }
    }
}

/// Draws a uniformly random rotation, a placement in front of the camera and
/// a view direction through the object center.
pub fn sample_scene(
    seed: u64,
    nocs_extents: &Vector3<f64>,
    params: &SceneParams,
) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
    let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    let scale = mode_value(&mut rng, params.object_scale);
    let t = Vector3::new(
        rng.random_range(-params.lateral..=params.lateral),
        rng.random_range(-params.lateral..=params.lateral),
        mode_value(&mut rng, params.distance),
    );
    let extents = nocs_extents / nocs_extents.norm();
    let pose = Pose::new(*rot.to_rotation_matrix().matrix(), t, extents * scale)?;
    let view = t.normalize();
    let spec = SceneSpec {
        gt_pose: (&pose).into(),
        view_direction: [view.x, view.y, view.z],
        cull_fraction: params.cull_fraction,
        noise_sigma: params.noise_sigma,
        outlier_count: params.outlier_count,
        seed: rng.random(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Indices of the planted outliers in a rendered view: always the trailing rows.
pub fn outlier_ids(view_len: usize, scene: &SceneSpec) -> Vec<usize> {
    (view_len - scene.outlier_count..view_len).collect()
}

/// Poses `instance` into the camera and simulates a one-sided partial scan.
///
/// Points are ranked for removal back-facing first, then by depth along the
/// view direction; exactly `round(cull_fraction · N)` are dropped. Noise is
/// added to survivors and outliers are appended last.
pub fn render_partial(instance: &SemanticCloud, scene: &SceneSpec) -> Result<SemanticCloud> {
    instance.require_non_empty("instance")?;
    if instance.space() != Space::Nocs {
        return Err(Error::Usage(
            "render_partial expects a NOCS instance".into(),
        ));
    }
    scene.validate()?;
    let pose = scene.pose()?;
    let view = scene.view()?;
    let n = instance.len();
    let cull = (scene.cull_fraction * n as f64).round() as usize;
    if n - cull < MIN_VIEW_POINTS {
        return Err(Error::TooSparse(format!(
            "culling {cull} of {n} points leaves fewer than {MIN_VIEW_POINTS}"
        )));
    }
    let posed: Vec<Point3<f64>> = instance
        .points()
        .iter()
        .map(|p| pose.nocs_to_camera(p))
        .collect();

    let mut keep: Vec<usize> = (0..n).collect();
    if cull > 0 {
        let normals = estimate_normals(instance.points());
        let key: Vec<(bool, f64)> = (0..n)
            .map(|i| {
                let nc = pose.rotation * normals[i];
                (nc.dot(&view) > 0.0, posed[i].coords.dot(&view))
            })
            .collect();
        keep.sort_by(|&a, &b| {
            key[b]
                .0
                .cmp(&key[a].0)
                .then(key[b].1.total_cmp(&key[a].1))
                .then(a.cmp(&b))
        });
        keep.drain(..cull);
        keep.sort_unstable();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let noise =
        Normal::new(0.0, scene.noise_sigma).map_err(|e| Error::precondition(e.to_string()))?;
    let mut pts: Vec<Point3<f64>> = keep
        .iter()
        .map(|&i| {
            if scene.noise_sigma > 0.0 {
                posed[i] + Vector3::from_fn(|_, _| noise.sample(&mut rng))
            } else {
                posed[i]
            }
        })
        .collect();
    let mut feats = instance.descriptors().map(|d| d.select_rows(&keep));

    if scene.outlier_count > 0 {
        let (lo, hi) = instance.bounds().expect("non-empty");
        let center = (lo.coords + hi.coords) / 2.0;
        let half = (hi - lo) / 2.0;
        let tree = KdTree::new(instance.points());
        let clearance2 = OUTLIER_CLEARANCE * OUTLIER_CLEARANCE;
        let mut added = 0;
        let mut attempts = 0;
        let dim = feats.as_ref().map(|f| f.cols());
        let mut extra = Vec::new();
        while added < scene.outlier_count {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::DegenerateConfiguration(
                    "cannot place outliers clear of the object".into(),
                ));
            }
            let u = Vector3::from_fn(|_, _| rng.random_range(-2.0..=2.0));
            let q = Point3::from(center + half.component_mul(&u));
            if u.iter().all(|c| c.abs() <= 1.0) {
                continue;
            }
            if tree.nearest(&q).is_some_and(|(_, d2)| d2 < clearance2) {
                continue;
            }
            pts.push(pose.nocs_to_camera(&q));
            if let Some(c) = dim {
                extra.extend((0..c).map(|_| rng.random_range(-1.0..=1.0)));
            }
            added += 1;
        }
        if let Some(f) = feats.as_mut() {
            let mut data = f.as_slice().to_vec();
            data.extend(extra);
            *f = FeatureMatrix::from_row_major(pts.len(), f.cols(), data)?;
        }
    }
    SemanticCloud::new(pts, feats, Space::Camera)
}

/// Rotation about the z axis.
pub fn rot_z(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer_distance;

    #[test]
    fn frustum_area_sampling_matches_cone_profile() {
        // cone apex at z=1: density per unit height is proportional to radius
        let s = Surface::Frustum {
            z0: 0.0,
            z1: 1.0,
            r0: 1.0,
            r1: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let lower = (0..n).filter(|_| s.sample(&mut rng).z < 0.5).count() as f64 / n as f64;
        assert!((lower - 0.75).abs() < 0.02, "{lower}");
    }

    #[test]
    fn surface_areas() {
        let cyl = Surface::Frustum {
            z0: 0.0,
            z1: 2.0,
            r0: 1.0,
            r1: 1.0,
        };
        assert!((cyl.area() - 4.0 * PI).abs() < 1e-12);
        let torus = Surface::Torus {
            center: Vector3::zeros(),
            major: 2.0,
            minor: 0.5,
            phi: PI,
        };
        assert!((torus.area() - 4.0 * PI * PI * 2.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn instances_are_normalized() {
        for family in [Family::Box, Family::Cylinder, Family::Bottle, Family::Mug] {
            let mut spec = CategorySpec::new(family, 3, 11);
            spec.points_per_instance = 512;
            let ds = generate_category(&spec).unwrap();
            for inst in &ds.instances {
                let (lo, hi) = inst.cloud.bounds().unwrap();
                assert!(((hi - lo).norm() - 1.0).abs() < 1e-9);
                assert!(inst.cloud.centroid().unwrap().coords.norm() < 1e-12);
                assert_eq!(inst.cloud.descriptor_dim(), Some(16));
            }
        }
    }

    #[test]
    fn zero_width_ranges_give_identical_instances() {
        let mut spec = CategorySpec::new(Family::Box, 3, 5);
        spec.mode_ranges = vec![[0.8, 0.8], [0.5, 0.5]];
        spec.points_per_instance = 256;
        let ds = generate_category(&spec).unwrap();
        assert_eq!(
            ds.instances[0].cloud.points(),
            ds.instances[2].cloud.points()
        );
    }

    #[test]
    fn invalid_specs() {
        let mut spec = CategorySpec::new(Family::Cylinder, 1, 0);
        assert!(spec.validate().is_err());
        spec.instance_count = 2;
        spec.mode_ranges = vec![[0.5, 0.2], [1.0, 1.0]];
        assert!(spec.validate().is_err());
        spec.mode_ranges = vec![[-0.5, 0.2], [1.0, 1.0]];
        assert!(spec.validate().is_err());
        spec.mode_ranges = vec![[0.3, 0.4]];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn deterministic_generation() {
        let mut spec = CategorySpec::new(Family::Mug, 2, 9);
        spec.points_per_instance = 300;
        let a = generate_category(&spec).unwrap();
        let b = generate_category(&spec).unwrap();
        assert_eq!(a.instances[1].cloud.points(), b.instances[1].cloud.points());
        assert_eq!(
            a.instances[1].cloud.descriptors(),
            b.instances[1].cloud.descriptors()
        );
    }

    #[test]
    fn part_channels_are_distributions() {
        let mut spec = CategorySpec::new(Family::Bottle, 2, 1);
        spec.points_per_instance = 400;
        let inst = generate_instance(&spec, 0).unwrap();
        let f = inst.cloud.descriptors().unwrap();
        for i in 0..f.rows() {
            let s: f64 = f.row(i)[..PART_CHANNELS].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cylinder_is_axially_symmetric() {
        let mut spec = CategorySpec::new(Family::Cylinder, 2, 2);
        spec.points_per_instance = 1024;
        let inst = generate_instance(&spec, 0).unwrap();
        let r = rot_z(90.0);
        let rotated = inst
            .cloud
            .map_points(Space::Nocs, |p| Point3::from(r * p.coords))
            .unwrap();
        // average of the two directed means
        let cd = chamfer_distance(&inst.cloud, &rotated, false, true).unwrap() / 2.0;
        let tree = KdTree::from_cloud(&inst.cloud);
        let spacing = inst
            .cloud
            .points()
            .iter()
            .map(|p| tree.knn_with_dist2(p, 2)[1].1.sqrt())
            .sum::<f64>()
            / inst.cloud.len() as f64;
        assert!(cd < 2.0 * spacing, "{cd} vs {spacing}");
    }

    fn scene(pose: &Pose, cull: f64, sigma: f64, outliers: usize) -> SceneSpec {
        SceneSpec {
            gt_pose: pose.into(),
            view_direction: [0.0, 0.0, 1.0],
            cull_fraction: cull,
            noise_sigma: sigma,
            outlier_count: outliers,
            seed: 4,
        }
    }

    #[test]
    fn identity_view_is_the_posed_instance() {
        let spec = CategorySpec::new(Family::Box, 2, 3);
        let inst = generate_instance(&spec, 0).unwrap();
        let pose = Pose::new(
            rot_z(30.0),
            Vector3::new(0.0, 0.0, 0.8),
            Vector3::new(0.1, 0.1, 0.2),
        )
        .unwrap();
        let view = render_partial(&inst.cloud, &scene(&pose, 0.0, 0.0, 0)).unwrap();
        assert_eq!(view.len(), inst.cloud.len());
        for (a, b) in view.points().iter().zip(inst.cloud.points()) {
            assert_eq!(*a, pose.nocs_to_camera(b));
        }
        assert_eq!(view.descriptors(), inst.cloud.descriptors());
    }

    #[test]
    fn cull_budget_and_outliers() {
        let spec = CategorySpec::new(Family::Bottle, 2, 3);
        let inst = generate_instance(&spec, 0).unwrap();
        let pose = Pose::new(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 0.8),
            Vector3::new(0.1, 0.1, 0.2),
        )
        .unwrap();
        let view = render_partial(&inst.cloud, &scene(&pose, 0.5, 0.0, 5)).unwrap();
        assert_eq!(view.len(), 1024 + 5);
        let s = scene(&pose, 0.5, 0.0, 5);
        for i in outlier_ids(view.len(), &s) {
            let q = pose.camera_to_nocs(view.point(i));
            let (lo, hi) = inst.cloud.bounds().unwrap();
            assert!((0..3).any(|k| q[k] < lo[k] - 1e-9 || q[k] > hi[k] + 1e-9));
        }
        // the camera sees the near side: survivors lie on the -z half
        let kept_mean_z = view.points()[..1024].iter().map(|p| p.z).sum::<f64>() / 1024.0;
        assert!(kept_mean_z < 0.8);
    }

    #[test]
    fn over_culling_is_rejected() {
        let mut spec = CategorySpec::new(Family::Box, 2, 3);
        spec.points_per_instance = 100;
        let inst = generate_instance(&spec, 0).unwrap();
        let pose = Pose::new(Matrix3::identity(), Vector3::zeros(), Vector3::repeat(0.1)).unwrap();
        assert!(matches!(
            render_partial(&inst.cloud, &scene(&pose, 0.8, 0.0, 0)),
            Err(Error::TooSparse(_))
        ));
    }
}
