//! Pose, size and reconstruction metrics and their reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::{SemanticCloud, Space};
use crate::error::{Error, Result};
use crate::synth::Symmetry;
use crate::transform::{rotation_angle_deg, Pose};

/// The four `(degrees, centimeters)` buckets of the pose table.
pub const POSE_THRESHOLDS: [(f64, f64); 4] = [(5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0)];
pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.75];
/// Voxel grid resolution of the IoU fallback.
pub const VOXEL_RESOLUTION: usize = 128;
pub const SMOOTH_L1_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans_m: f64,
}

fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Rotation geodesic and translation distance. For `AxialZ` the rotation
/// error is minimized over spins about the object z axis, which reduces to
/// the angle between the two z axes.
pub fn pose_error(pred: &Pose, gt: &Pose, symmetry: Symmetry) -> Result<PoseError> {
    pred.validate()?;
    gt.validate()?;
    let rot_deg = match symmetry {
        Symmetry::None => rotation_angle_deg(&pred.rotation, &gt.rotation),
        Symmetry::AxialZ => angle_between_deg(
            &(pred.rotation * Vector3::z()),
            &(gt.rotation * Vector3::z()),
        ),
    };
    Ok(PoseError {
        rot_deg,
        trans_m: (pred.translation - gt.translation).norm(),
    })
}

/// Percentage of errors with rotation ≤ n degrees and translation ≤ m cm,
/// one value per threshold pair.
pub fn ndeg_mcm_map(errors: &[PoseError], thresholds: &[(f64, f64)]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::precondition("no pose errors"));
    }
    Ok(thresholds
        .iter()
        .map(|&(n, m)| {
            let hit = errors
                .iter()
                .filter(|e| e.rot_deg <= n && e.trans_m * 100.0 <= m)
                .count();
            100.0 * hit as f64 / errors.len() as f64
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Oriented box IoU

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub iou: f64,
    pub pass50: bool,
    pub pass75: bool,
}

impl IouResult {
    fn new(iou: f64) -> Self {
        let iou = iou.clamp(0.0, 1.0);
        Self {
            iou,
            pass50: iou >= IOU_THRESHOLDS[0],
            pass75: iou >= IOU_THRESHOLDS[1],
        }
    }
}

fn check_box(p: &Pose) -> Result<()> {
    p.validate()?;
    if p.size.iter().any(|s| *s <= 0.0) {
        return Err(Error::precondition("box size must be positive"));
    }
    Ok(())
}

/// Corners of the box `R·(size ⊙ u) + t`, `u ∈ {−½, ½}³`, bit `k` of the
/// index selecting the sign of axis `k`.
fn corners(p: &Pose) -> [Point3<f64>; 8] {
    std::array::from_fn(|i| {
        let u = Vector3::from_fn(|k, _| if i >> k & 1 == 1 { 0.5 } else { -0.5 });
        Point3::from(p.rotation * p.size.component_mul(&u) + p.translation)
    })
}

/// Outward-oriented faces (counter-clockwise seen from outside).
fn box_faces(p: &Pose) -> Vec<Vec<Point3<f64>>> {
    let c = corners(p);
    const FACES: [[usize; 4]; 6] = [
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
    ];
    FACES
        .iter()
        .map(|f| f.iter().map(|&i| c[i]).collect())
        .collect()
}

/// Half-spaces `n·x ≤ d` bounding the box, `n` outward.
fn box_planes(p: &Pose) -> [(Vector3<f64>, f64); 6] {
    std::array::from_fn(|i| {
        let axis = i / 2;
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        let n: Vector3<f64> = p.rotation.column(axis) * sign;
        (n, n.dot(&p.translation) + 0.5 * p.size[axis])
    })
}

fn polyhedron_volume(faces: &[Vec<Point3<f64>>]) -> f64 {
    let mut v = 0.0;
    for f in faces {
        for k in 1..f.len().saturating_sub(1) {
            v += f[0].coords.dot(&f[k].coords.cross(&f[k + 1].coords));
        }
    }
    v / 6.0
}

/// Clips a closed convex polyhedron by `n·x ≤ d`, closing the cut with a cap.
fn clip_polyhedron(
    faces: Vec<Vec<Point3<f64>>>,
    n: &Vector3<f64>,
    d: f64,
    eps: f64,
) -> Vec<Vec<Point3<f64>>> {
    let outside = faces.iter().flatten().any(|p| n.dot(&p.coords) - d > eps);
    if !outside {
        return faces;
    }
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut on_plane: Vec<Point3<f64>> = Vec::new();
    for f in &faces {
        let mut poly = Vec::with_capacity(f.len() + 2);
        for i in 0..f.len() {
            let (a, b) = (f[i], f[(i + 1) % f.len()]);
            let (da, db) = (n.dot(&a.coords) - d, n.dot(&b.coords) - d);
            if da <= eps {
                poly.push(a);
                if da.abs() <= eps {
                    on_plane.push(a);
                }
            }
            if (da < -eps && db > eps) || (da > eps && db < -eps) {
                let x = a + (b - a) * (da / (da - db));
                poly.push(x);
                on_plane.push(x);
            }
        }
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    if on_plane.len() >= 3 {
        let c = on_plane.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / on_plane.len() as f64;
        let e1 = {
            let far = on_plane
                .iter()
                .map(|p| p.coords - c)
                .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
                .expect("non-empty");
            far.normalize()
        };
        let e2 = n.cross(&e1);
        let mut cap: Vec<(f64, Point3<f64>)> = on_plane
            .iter()
            .map(|p| {
                let v = p.coords - c;
                (v.dot(&e2).atan2(v.dot(&e1)), *p)
            })
            .collect();
        cap.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ring: Vec<Point3<f64>> = Vec::with_capacity(cap.len());
        for (_, p) in cap {
            if ring
                .last()
                .is_none_or(|q: &Point3<f64>| (q - p).norm() > eps)
            {
                ring.push(p);
            }
        }
        if ring.len() >= 2 && (ring[0] - ring[ring.len() - 1]).norm() <= eps {
            ring.pop();
        }
        if ring.len() >= 3 {
            // counter-clockwise about the outward normal `n`
            out.push(ring);
        }
    }
    out
}

fn box_volume(p: &Pose) -> f64 {
    p.size.x * p.size.y * p.size.z
}

/// Exact IoU of two oriented boxes by convex clipping.
pub fn iou3d(pred: &Pose, gt: &Pose) -> Result<IouResult> {
    check_box(pred)?;
    check_box(gt)?;
    let scale = pred.size.max().max(gt.size.max());
    let eps = 1e-12
        * scale
            .max(pred.translation.amax())
            .max(gt.translation.amax())
            .max(1.0);
    let mut poly = box_faces(pred);
    for (n, d) in box_planes(gt) {
        poly = clip_polyhedron(poly, &n, d, eps);
        if poly.len() < 4 {
            return Ok(IouResult::new(0.0));
        }
    }
    let inter = polyhedron_volume(&poly).max(0.0);
    let union = box_volume(pred) + box_volume(gt) - inter;
    Ok(IouResult::new(inter / union))
}

/// IoU by counting voxel centers of a grid over the union bounding box.
pub fn iou3d_voxel(pred: &Pose, gt: &Pose, resolution: usize) -> Result<IouResult> {
    check_box(pred)?;
    check_box(gt)?;
    if resolution == 0 {
        return Err(Error::precondition("resolution must be positive"));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in corners(pred).iter().chain(corners(gt).iter()) {
        lo = lo.inf(&c.coords);
        hi = hi.sup(&c.coords);
    }
    let step = (hi - lo) / resolution as f64;
    let (pa, pb) = (box_planes(pred), box_planes(gt));
    let inside = |planes: &[(Vector3<f64>, f64); 6], x: &Vector3<f64>| {
        planes.iter().all(|(n, d)| n.dot(x) <= *d)
    };
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let x = lo
                    + Vector3::new(
                        (i as f64 + 0.5) * step.x,
                        (j as f64 + 0.5) * step.y,
                        (k as f64 + 0.5) * step.z,
                    );
                let (a, b) = (inside(&pa, &x), inside(&pb, &x));
                both += u64::from(a && b);
                either += u64::from(a || b);
            }
        }
    }
    Ok(IouResult::new(if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }))
}

// ---------------------------------------------------------------------------
// NOCS keypoint error

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NocsErrorMap {
    pub errors: Vec<f64>,
    pub rms: f64,
    pub smooth_l1: f64,
}

pub fn smooth_l1(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a < delta {
        0.5 * a * a / delta
    } else {
        a - 0.5 * delta
    }
}

/// Per-keypoint distance between predicted NOCS and the ground-truth pose's
/// back-projection of the camera keypoints.
pub fn nocs_error_map(
    pred_nocs: &SemanticCloud,
    keypoints: &SemanticCloud,
    gt: &Pose,
) -> Result<NocsErrorMap> {
    gt.validate()?;
    if pred_nocs.len() != keypoints.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} keypoints",
            pred_nocs.len(),
            keypoints.len()
        )));
    }
    if pred_nocs.space() != Space::Nocs || keypoints.space() != Space::Camera {
        return Err(Error::Usage(
            "expected NOCS predictions and CAMERA keypoints".into(),
        ));
    }
    pred_nocs.require_non_empty("prediction")?;
    let errors: Vec<f64> = pred_nocs
        .points()
        .iter()
        .zip(keypoints.points())
        .map(|(p, k)| (p - gt.camera_to_nocs(k)).norm())
        .collect();
    let n = errors.len() as f64;
    Ok(NocsErrorMap {
        rms: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        smooth_l1: errors
            .iter()
            .map(|e| smooth_l1(*e, SMOOTH_L1_DELTA))
            .sum::<f64>()
            / n,
        errors,
    })
}

/// Green (low) to red (high) colors, normalized by the largest error.
pub fn error_colors(errors: &[f64]) -> Vec<[u8; 3]> {
    let max = errors.iter().copied().fold(0.0, f64::max);
    errors
        .iter()
        .map(|e| {
            let t = if max > 0.0 { e / max } else { 0.0 };
            [
                (255.0 * t).round() as u8,
                (255.0 * (1.0 - t)).round() as u8,
                0,
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reconstruction table

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTable {
    /// Category and mean CD scaled by 10³.
    pub rows: Vec<(String, f64)>,
    /// Mean of the category means, scaled by 10³.
    pub average: f64,
}

pub fn recon_table(per_instance_cd: &BTreeMap<String, Vec<f64>>) -> Result<ReconTable> {
    if per_instance_cd.is_empty() {
        return Err(Error::precondition("no categories"));
    }
    let mut rows = Vec::with_capacity(per_instance_cd.len());
    for (cat, v) in per_instance_cd {
        if v.is_empty() {
            return Err(Error::precondition(format!(
                "category `{cat}` has no values"
            )));
        }
        rows.push((cat.clone(), 1e3 * v.iter().sum::<f64>() / v.len() as f64));
    }
    let average = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    Ok(ReconTable { rows, average })
}

impl ReconTable {
    /// One header row of categories plus `Average`, one row of values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for (c, _) in &self.rows {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",Average\nCD (x1e-3)");
        for (_, v) in &self.rows {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", self.average);
        s
    }
}

// ---------------------------------------------------------------------------
// Reports

/// Per-scene inputs to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub category: String,
    pub error: PoseError,
    pub iou: f64,
    pub recon_cd: Option<f64>,
    pub nocs_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub scenes: usize,
    pub map_5deg2cm: f64,
    pub map_5deg5cm: f64,
    pub map_10deg2cm: f64,
    pub map_10deg5cm: f64,
    pub iou50: f64,
    pub iou75: f64,
    /// Mean reconstruction CD scaled by 10³.
    pub recon_cd: Option<f64>,
    pub nocs_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_category: Vec<MetricRow>,
    /// Macro average over categories.
    pub mean: MetricRow,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn category_row(category: &str, scenes: &[&SceneMetrics]) -> Result<MetricRow> {
    let errors: Vec<PoseError> = scenes.iter().map(|s| s.error).collect();
    let m = ndeg_mcm_map(&errors, &POSE_THRESHOLDS)?;
    let pct =
        |t: f64| 100.0 * scenes.iter().filter(|s| s.iou >= t).count() as f64 / scenes.len() as f64;
    Ok(MetricRow {
        category: category.to_string(),
        scenes: scenes.len(),
        map_5deg2cm: m[0],
        map_5deg5cm: m[1],
        map_10deg2cm: m[2],
        map_10deg5cm: m[3],
        iou50: pct(IOU_THRESHOLDS[0]),
        iou75: pct(IOU_THRESHOLDS[1]),
        recon_cd: mean_opt(scenes.iter().map(|s| s.recon_cd)).map(|v| v * 1e3),
        nocs_rms: mean_opt(scenes.iter().map(|s| s.nocs_rms)),
    })
}

pub const CSV_HEADER: &str =
    "category,scenes,5°2cm,5°5cm,10°2cm,10°5cm,IoU50,IoU75,recon_cd_x1e-3,nocs_rms";

impl MetricReport {
    /// Categories are reported in lexicographic order.
    pub fn from_scenes(scenes: &[SceneMetrics]) -> Result<Self> {
        let mut by_cat: BTreeMap<&str, Vec<&SceneMetrics>> = BTreeMap::new();
        for s in scenes {
            by_cat.entry(&s.category).or_default().push(s);
        }
        if by_cat.is_empty() {
            return Err(Error::precondition("no scenes to report"));
        }
        let per_category = by_cat
            .iter()
            .map(|(c, v)| category_row(c, v))
            .collect::<Result<Vec<_>>>()?;
        let k = per_category.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| per_category.iter().map(f).sum::<f64>() / k;
        let mean = MetricRow {
            category: "mean".into(),
            scenes: scenes.len(),
            map_5deg2cm: avg(|r| r.map_5deg2cm),
            map_5deg5cm: avg(|r| r.map_5deg5cm),
            map_10deg2cm: avg(|r| r.map_10deg2cm),
            map_10deg5cm: avg(|r| r.map_10deg5cm),
            iou50: avg(|r| r.iou50),
            iou75: avg(|r| r.iou75),
            recon_cd: mean_opt(per_category.iter().map(|r| r.recon_cd)),
            nocs_rms: mean_opt(per_category.iter().map(|r| r.nocs_rms)),
        };
        Ok(Self { per_category, mean })
    }

    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.per_category.iter().chain(std::iter::once(&self.mean))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.category,
                r.scenes,
                r.map_5deg2cm,
                r.map_5deg5cm,
                r.map_10deg2cm,
                r.map_10deg5cm,
                r.iou50,
                r.iou75,
                opt(r.recon_cd),
                opt(r.nocs_rms)
            );
        }
        s
    }

    /// Bar chart of one percentage metric, one bar per category plus the mean.
    pub fn to_svg(&self, metric: Metric) -> String {
        let bars: Vec<(&str, f64)> = self
            .rows()
            .map(|r| (r.category.as_str(), metric.value(r)))
            .collect();
        let (w, h, bw) = (60.0 + 70.0 * bars.len() as f64, 280.0, 50.0);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<text x="10" y="20">{} (%)</text>"#, metric.label());
        let _ = writeln!(
            s,
            r#"<line x1="40" y1="240" x2="{}" y2="240" stroke="black"/>"#,
            w - 10.0
        );
        for (i, (label, v)) in bars.iter().enumerate() {
            let x = 50.0 + 70.0 * i as f64;
            let bh = 2.0 * v.clamp(0.0, 100.0);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{}" width="{bw}" height="{bh}" fill="#4a7ab5"/>"##,
                240.0 - bh
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#,
                x + bw / 2.0,
                234.0 - bh
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="258" text-anchor="middle">{label}</text>"#,
                x + bw / 2.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Percentage columns of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Deg5Cm2,
    Deg5Cm5,
    Deg10Cm2,
    Deg10Cm5,
    Iou50,
    Iou75,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Deg5Cm2,
        Metric::Deg5Cm5,
        Metric::Deg10Cm2,
        Metric::Deg10Cm5,
        Metric::Iou50,
        Metric::Iou75,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Deg5Cm2 => "5°2cm",
            Metric::Deg5Cm5 => "5°5cm",
            Metric::Deg10Cm2 => "10°2cm",
            Metric::Deg10Cm5 => "10°5cm",
            Metric::Iou50 => "IoU50",
            Metric::Iou75 => "IoU75",
        }
    }

    /// File-name friendly form of the label.
    pub fn slug(self) -> &'static str {
        match self {
            Metric::Deg5Cm2 => "5deg2cm",
            Metric::Deg5Cm5 => "5deg5cm",
            Metric::Deg10Cm2 => "10deg2cm",
            Metric::Deg10Cm5 => "10deg5cm",
            Metric::Iou50 => "iou50",
            Metric::Iou75 => "iou75",
        }
    }

    pub fn value(self, r: &MetricRow) -> f64 {
        match self {
            Metric::Deg5Cm2 => r.map_5deg2cm,
            Metric::Deg5Cm5 => r.map_5deg5cm,
            Metric::Deg10Cm2 => r.map_10deg2cm,
            Metric::Deg10Cm5 => r.map_10deg5cm,
            Metric::Iou50 => r.iou50,
            Metric::Iou75 => r.iou75,
        }
    }
}
