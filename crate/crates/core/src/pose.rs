//! Pose and size recovery from semantic correspondences into NOCS.
//!
//! Keypoints of the camera-space observation are matched to a reconstructed
//! semantic shape by descriptor cosine similarity, and a similarity
//! transform is solved robustly with RANSAC over minimal three-point
//! Umeyama fits.

use std::time::Instant;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{SemanticCloud, Space};
use crate::error::{Error, Result};
use crate::geometry::farthest_point_sample;
use crate::seed::derive;
use crate::semantics::transfer_semantics;
use crate::shape::{fit_partial_from, LinearShapeModel, ShapeParams, TrainConfig};
use crate::spatial::KdTree;
use crate::transform::{orthonormalize, Pose, SimilarityTransform};
use crate::umeyama::umeyama_points;

/// Neighbours used by the statistical outlier filter.
const SOR_K: usize = 8;
const SOR_STD_RATIO: f64 = 2.0;
/// Minimal samples whose NOCS triangle is smaller than this are skipped.
const MIN_TRIANGLE_AREA: f64 = 1e-6;
/// Local refits of the winning RANSAC hypothesis.
const REFIT_ROUNDS: usize = 3;

fn default_keypoints() -> usize {
    96
}
fn default_iters() -> usize {
    256
}
fn default_thresh() -> f64 {
    0.02
}
fn default_refine() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_keypoints")]
    pub keypoint_count: usize,
    #[serde(default = "default_iters")]
    pub ransac_iters: usize,
    /// Inlier residual bound, NOCS units.
    #[serde(default = "default_thresh")]
    pub inlier_thresh: f64,
    #[serde(default)]
    pub min_score: f64,
    /// Geometric re-matching rounds against the fitted reconstruction.
    #[serde(default = "default_refine")]
    pub refine_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            keypoint_count: default_keypoints(),
            ransac_iters: default_iters(),
            inlier_thresh: default_thresh(),
            min_score: 0.0,
            refine_iters: default_refine(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keypoint_count < 3 {
            return Err(Error::precondition("keypoint_count must be at least 3"));
        }
        if self.ransac_iters == 0 {
            return Err(Error::precondition("ransac_iters must be positive"));
        }
        if !(self.inlier_thresh > 0.0 && self.inlier_thresh.is_finite()) {
            return Err(Error::precondition("inlier_thresh must be positive"));
        }
        if !self.min_score.is_finite() {
            return Err(Error::precondition("min_score must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub camera: Point3<f64>,
    pub nocs: Point3<f64>,
    /// Descriptor cosine similarity in `[-1, 1]`.
    pub score: f64,
    /// Index of the matched reconstruction point.
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub source_keypoints: SemanticCloud,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Statistical outlier removal followed by farthest point sampling.
pub fn select_keypoints(partial: &SemanticCloud, cfg: &SolverConfig) -> Result<SemanticCloud> {
    cfg.validate()?;
    partial.require_non_empty("partial")?;
    if partial.space() != Space::Camera {
        return Err(Error::Usage(
            "keypoints are selected from a CAMERA cloud".into(),
        ));
    }
    let kept = statistical_inliers(partial.points());
    if kept.len() < 3 {
        return Err(Error::TooSparse(format!(
            "{} points survive outlier removal",
            kept.len()
        )));
    }
    let survivors = partial.select(&kept);
    farthest_point_sample(&survivors, cfg.keypoint_count.min(kept.len()), cfg.seed)
}

/// Indices whose mean distance to their nearest neighbours is within
/// mean + 2σ of the pool.
pub fn statistical_inliers(points: &[Point3<f64>]) -> Vec<usize> {
    let n = points.len();
    if n < 2 {
        return (0..n).collect();
    }
    let k = SOR_K.min(n - 1);
    let tree = KdTree::new(points);
    let mean_d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nb = tree.knn_with_dist2(p, k + 1);
            let mut sum = 0.0;
            let mut used = 0;
            for (j, d2) in nb {
                if j != i && used < k {
                    sum += d2.sqrt();
                    used += 1;
                }
            }
            sum / k as f64
        })
        .collect();
    let mu = mean_d.iter().sum::<f64>() / n as f64;
    let var = mean_d.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n as f64;
    let bound = mu + SOR_STD_RATIO * var.sqrt();
    (0..n).filter(|&i| mean_d[i] <= bound).collect()
}

fn normalized_rows(cloud: &SemanticCloud) -> Vec<Vec<f64>> {
    let f = cloud.descriptors().expect("checked by caller");
    (0..f.rows())
        .map(|i| {
            let r = f.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairs every keypoint with the reconstruction point of highest descriptor
/// cosine similarity; ties go to the lowest index.
pub fn match_semantic(
    keypoints: &SemanticCloud,
    global_recon: &SemanticCloud,
    cfg: &SolverConfig,
) -> Result<CorrespondenceSet> {
    let (kd, gd) = match (keypoints.descriptor_dim(), global_recon.descriptor_dim()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::precondition(
                "matching needs descriptors on both clouds",
            ))
        }
    };
    if kd != gd {
        return Err(Error::Dimension(format!(
            "keypoint C = {kd}, reconstruction C = {gd}"
        )));
    }
    if global_recon.space() != Space::Nocs {
        return Err(Error::Usage("reconstruction must be in NOCS".into()));
    }
    global_recon.require_non_empty("reconstruction")?;
    let k_rows = normalized_rows(keypoints);
    let g_rows = normalized_rows(global_recon);
    let mut pairs = Vec::with_capacity(keypoints.len());
    for (i, kr) in k_rows.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, gr) in g_rows.iter().enumerate() {
            let s = cosine(kr, gr);
            if s > best.0 {
                best = (s, j);
            }
        }
        let score = best.0.clamp(-1.0, 1.0);
        if score >= cfg.min_score {
            pairs.push(Correspondence {
                camera: *keypoints.point(i),
                nocs: *global_recon.point(best.1),
                score,
                target: best.1,
            });
        }
    }
    if pairs.len() < 3 {
        return Err(Error::TooSparse(format!(
            "{} correspondences at min_score {}",
            pairs.len(),
            cfg.min_score
        )));
    }
    Ok(CorrespondenceSet {
        pairs,
        source_keypoints: keypoints.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub inliers: usize,
    pub inlier_ratio: f64,
    /// RMS residual of the inliers after refitting, NOCS units.
    pub rms: f64,
    pub unreliable: bool,
    /// NOCS → camera similarity.
    pub transform: SimilarityTransform,
}

/// Residuals of every pair in NOCS units.
fn residuals(t: &SimilarityTransform, pairs: &[Correspondence]) -> Vec<f64> {
    pairs
        .iter()
        .map(|c| (t.apply(&c.nocs) - c.camera).norm() / t.scale)
        .collect()
}

fn fit_subset(pairs: &[Correspondence], idx: &[usize]) -> Result<SimilarityTransform> {
    let src: Vec<_> = idx.iter().map(|&i| pairs[i].nocs).collect();
    let dst: Vec<_> = idx.iter().map(|&i| pairs[i].camera).collect();
    umeyama_points(&src, &dst, true)
}

/// Robust NOCS → camera similarity from correspondences.
pub fn solve_similarity(corr: &CorrespondenceSet, cfg: &SolverConfig) -> Result<SolveDiagnostics> {
    cfg.validate()?;
    let pairs = &corr.pairs;
    let n = pairs.len();
    if n < 3 {
        return Err(Error::TooSparse(format!("{n} correspondences, need 3")));
    }
    // (inlier count, negative residual sum) ordering, earliest iteration wins ties
    let mut best: Option<(usize, f64, SimilarityTransform)> = None;
    for it in 0..cfg.ransac_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, it as u64));
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for m in [a.min(b), a.max(b)] {
            if c >= m {
                c += 1;
            }
        }
        let (pa, pb, pc) = (pairs[a].nocs, pairs[b].nocs, pairs[c].nocs);
        if 0.5 * (pb - pa).cross(&(pc - pa)).norm() <= MIN_TRIANGLE_AREA {
            continue;
        }
        let Ok(t) = fit_subset(pairs, &[a, b, c]) else {
            continue;
        };
        if !(t.scale.is_finite() && t.scale > 0.0) {
            continue;
        }
        let res = residuals(&t, pairs);
        let (count, sum) = res
            .iter()
            .filter(|r| **r <= cfg.inlier_thresh)
            .fold((0, 0.0), |(c, s), r| (c + 1, s + r));
        let better = match &best {
            None => true,
            Some((bc, bs, _)) => count > *bc || (count == *bc && sum < *bs),
        };
        if better {
            best = Some((count, sum, t));
        }
    }
    let (_, _, mut t) = best.ok_or_else(|| {
        Error::DegenerateConfiguration("every minimal sample was degenerate".into())
    })?;

    let mut inliers: Vec<usize> = Vec::new();
    for _ in 0..REFIT_ROUNDS {
        let res = residuals(&t, pairs);
        let next: Vec<usize> = (0..n).filter(|&i| res[i] <= cfg.inlier_thresh).collect();
        if next == inliers || next.len() < 3 {
            break;
        }
        match fit_subset(pairs, &next) {
            Ok(refit) => t = refit,
            Err(_) => break,
        }
        inliers = next;
    }
    t.rotation = orthonormalize(&t.rotation);
    let res = residuals(&t, pairs);
    let inl: Vec<f64> = res
        .into_iter()
        .filter(|r| *r <= cfg.inlier_thresh)
        .collect();
    let rms = if inl.is_empty() {
        f64::NAN
    } else {
        (inl.iter().map(|r| r * r).sum::<f64>() / inl.len() as f64).sqrt()
    };
    Ok(SolveDiagnostics {
        inliers: inl.len(),
        inlier_ratio: inl.len() as f64 / n as f64,
        rms,
        unreliable: inl.len() < 3,
        transform: t,
    })
}

/// Pose from correspondences; `model_extents` are the tight NOCS box extents
/// of the reconstruction the NOCS side was drawn from.
pub fn solve_pose(
    corr: &CorrespondenceSet,
    model_extents: &Vector3<f64>,
    cfg: &SolverConfig,
) -> Result<(Pose, SolveDiagnostics)> {
    let diag = solve_similarity(corr, cfg)?;
    let t = &diag.transform;
    let pose = Pose::new(t.rotation, t.translation, model_extents * t.scale)?;
    Ok((pose, diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Keypoints,
    Match,
    Solve,
    Fit,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::Keypoints => "keypoints",
            Stage::Match => "match",
            Stage::Solve => "solve",
            Stage::Fit => "fit",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} stage: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub keypoints_ms: f64,
    pub match_ms: f64,
    pub fit_ms: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: Pose,
    pub params: ShapeParams,
    /// NOCS reconstruction carrying the semantic prototype.
    pub reconstruction: SemanticCloud,
    /// Keypoints of the final correspondence set, camera frame.
    pub keypoints: SemanticCloud,
    /// Predicted NOCS coordinate of every keypoint.
    pub keypoint_nocs: Vec<Point3<f64>>,
    pub diagnostics: SolveDiagnostics,
    /// Mean squared distance from the observation (in NOCS) to the reconstruction.
    pub fit_cd: f64,
    pub timings: StageTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Full pipeline from a camera-space observation to pose, shape and semantics.
///
/// A first pose comes from matching keypoints against the semantic
/// prototype. The observation is then mapped into NOCS, the shape is fitted,
/// keypoints are matched to the fitted reconstruction, and `refine_iters`
/// geometric rounds re-pair keypoints with their nearest reconstruction point
/// before re-solving.
pub fn estimate(
    partial: &SemanticCloud,
    model: &LinearShapeModel,
    cfg_fit: &TrainConfig,
    cfg_solve: &SolverConfig,
) -> std::result::Result<Estimate, StageError> {
    cfg_solve.validate().at(Stage::Input)?;
    partial.require_non_empty("partial").at(Stage::Input)?;
    if partial.space() != Space::Camera {
        return Err(Error::Usage("estimate expects a CAMERA cloud".into())).at(Stage::Input);
    }
    match partial.descriptor_dim() {
        None => return Err(Error::precondition("partial has no descriptors")).at(Stage::Input),
        Some(c) if c != model.descriptor_dim() => {
            return Err(Error::Dimension(format!(
                "partial C = {c}, model C = {}",
                model.descriptor_dim()
            )))
            .at(Stage::Input)
        }
        _ => {}
    }
    let mut timings = StageTimings::default();
    let center = partial.centroid().expect("non-empty").coords;
    let centered = partial
        .map_points(Space::Camera, |p| p - center)
        .at(Stage::Input)?;

    let t0 = Instant::now();
    let survivors = centered.select(&statistical_inliers(centered.points()));
    let keypoints = select_keypoints(&centered, cfg_solve).at(Stage::Keypoints)?;
    timings.keypoints_ms = ms_since(t0);

    let t0 = Instant::now();
    let proto =
        transfer_semantics(model, &ShapeParams::identity(model.basis_dim())).at(Stage::Match)?;
    let corr = match_semantic(&keypoints, &proto, cfg_solve).at(Stage::Match)?;
    timings.match_ms += ms_since(t0);

    let t0 = Instant::now();
    let mut diag = solve_similarity(&corr, cfg_solve).at(Stage::Solve)?;
    timings.solve_ms += ms_since(t0);

    let mut fit = None;
    let mut paired = corr.pairs.clone();
    for round in 0..=cfg_solve.refine_iters {
        let sim = diag.transform;
        let t0 = Instant::now();
        let nocs_obs = survivors
            .map_points(Space::Nocs, |p| sim.apply_inverse(p))
            .at(Stage::Fit)?;
        // the current pose already places the observation, so no offset search
        let f =
            fit_partial_from(model, &nocs_obs, None, cfg_fit, Vector3::zeros()).at(Stage::Fit)?;
        timings.fit_ms += ms_since(t0);

        let t0 = Instant::now();
        let corr = if round == 0 {
            match_semantic(&keypoints, &f.reconstruction, cfg_solve).at(Stage::Match)?
        } else {
            let tree = KdTree::from_cloud(&f.reconstruction);
            let pairs = keypoints
                .points()
                .iter()
                .map(|p| {
                    let q = sim.apply_inverse(p) - f.offset;
                    let (j, _) = tree.nearest(&q).expect("non-empty");
                    Correspondence {
                        camera: *p,
                        nocs: *f.reconstruction.point(j),
                        score: 1.0,
                        target: j,
                    }
                })
                .collect();
            CorrespondenceSet {
                pairs,
                source_keypoints: keypoints.clone(),
            }
        };
        timings.match_ms += ms_since(t0);

        let t0 = Instant::now();
        diag = solve_similarity(&corr, cfg_solve).at(Stage::Solve)?;
        timings.solve_ms += ms_since(t0);
        paired = corr.pairs;
        fit = Some(f);
    }
    let f = fit.expect("at least one round");
    let extents = f.reconstruction.extents().expect("non-empty");
    let t = &diag.transform;
    let pose = Pose::new(t.rotation, t.translation + center, extents * t.scale).at(Stage::Solve)?;

    let recon_tree = KdTree::from_cloud(&f.reconstruction);
    let fit_cd = survivors
        .points()
        .iter()
        .map(|p| {
            recon_tree
                .nearest(&t.apply_inverse(p))
                .expect("non-empty")
                .1
        })
        .sum::<f64>()
        / survivors.len() as f64;
    let keypoints = SemanticCloud::from_points(
        paired.iter().map(|c| c.camera + center).collect(),
        Space::Camera,
    )
    .at(Stage::Input)?;
    let keypoint_nocs = paired.iter().map(|c| c.nocs).collect();
    let mut diagnostics = diag;
    diagnostics.transform.translation += center;
    Ok(Estimate {
        pose,
        params: f.params,
        reconstruction: f.reconstruction,
        keypoints,
        keypoint_nocs,
        diagnostics,
        fit_cd,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::FeatureMatrix;
    use crate::transform::{axis_angle, rotation_angle_deg};

    fn grid_cloud(n: usize) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect()
    }

    fn exact_pairs(sim: &SimilarityTransform, nocs: &[Point3<f64>]) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: nocs
                .iter()
                .enumerate()
                .map(|(i, p)| Correspondence {
                    camera: sim.apply(p),
                    nocs: *p,
                    score: 1.0,
                    target: i,
                })
                .collect(),
            source_keypoints: SemanticCloud::empty(Space::Camera),
        }
    }

    #[test]
    fn exact_correspondences_recover_pose() {
        let nocs = grid_cloud(50);
        let r = axis_angle(&Vector3::new(1.0, 2.0, -0.5), 1.1);
        let sim = SimilarityTransform::new(r, Vector3::new(0.1, -0.2, 0.9), 0.3).unwrap();
        let extents = Vector3::new(1.0, 1.0, 0.6);
        let (pose, diag) = solve_pose(
            &exact_pairs(&sim, &nocs),
            &extents,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(rotation_angle_deg(&pose.rotation, &r) < 1e-5);
        assert!((pose.translation - sim.translation).norm() < 1e-8);
        assert!((pose.size - extents * 0.3).norm() < 1e-8);
        assert_eq!(diag.inliers, 50);
        assert!(!diag.unreliable);
    }

    #[test]
    fn collinear_samples_are_degenerate() {
        let nocs: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let set = exact_pairs(&SimilarityTransform::identity(), &nocs);
        assert!(matches!(
            solve_similarity(&set, &SolverConfig::default()),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn exact_copy_matching() {
        let pts = grid_cloud(20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let global = SemanticCloud::new(
            pts.clone(),
            Some(FeatureMatrix::from_rows(&rows).unwrap()),
            Space::Nocs,
        )
        .unwrap();
        let pick = [3usize, 7, 11, 15];
        let kp = SemanticCloud::new(
            pick.iter()
                .map(|&i| pts[i] + Vector3::new(5.0, 0.0, 0.0))
                .collect(),
            Some(
                FeatureMatrix::from_rows(
                    &pick.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(),
                )
                .unwrap(),
            ),
            Space::Camera,
        )
        .unwrap();
        let set = match_semantic(&kp, &global, &SolverConfig::default()).unwrap();
        for (c, &i) in set.pairs.iter().zip(&pick) {
            assert_eq!(c.target, i);
            assert!((c.score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_descriptors_are_rejected() {
        let global = SemanticCloud::new(
            grid_cloud(4),
            Some(FeatureMatrix::from_rows(&vec![vec![1.0, 0.0, 0.0]; 4]).unwrap()),
            Space::Nocs,
        )
        .unwrap();
        let kp = SemanticCloud::new(
            grid_cloud(4),
            Some(FeatureMatrix::from_rows(&vec![vec![0.0, 1.0, 0.0]; 4]).unwrap()),
            Space::Camera,
        )
        .unwrap();
        let cfg = SolverConfig {
            min_score: 0.5,
            ..SolverConfig::default()
        };
        assert!(match_semantic(&kp, &global, &cfg).is_err());
    }

    #[test]
    fn keypoints_are_a_subset_and_skip_outliers() {
        let mut pts = grid_cloud(1024);
        for k in 0..5 {
            pts.push(Point3::new(10.0 + k as f64, -10.0, 10.0));
        }
        let cloud = SemanticCloud::from_points(pts.clone(), Space::Camera).unwrap();
        let kp = select_keypoints(&cloud, &SolverConfig::default()).unwrap();
        assert_eq!(kp.len(), 96);
        for p in kp.points() {
            assert!(p.coords.norm() < 2.0);
            assert!(pts.contains(p));
        }
    }

    #[test]
    fn too_sparse_keypoints() {
        let cloud = SemanticCloud::from_points(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)],
            Space::Camera,
        )
        .unwrap();
        assert!(matches!(
            select_keypoints(&cloud, &SolverConfig::default()),
            Err(Error::TooSparse(_))
        ));
    }
}
