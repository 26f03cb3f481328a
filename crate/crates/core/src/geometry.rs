//! Distances, filtering and sampling over [`SemanticCloud`]s.

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{dist2, SemanticCloud};
use crate::error::{Error, Result};
use crate::spatial::KdTree;
use crate::transform::Pose;

/// Default outlier threshold for [`object_aware_filter`], NOCS units.
pub const DEFAULT_TAU1: f64 = 0.1;
/// Default hinge radius for [`diversity_penalty`].
pub const DEFAULT_TAU2: f64 = 0.2;

fn check_pair(a: &SemanticCloud, b: &SemanticCloud) -> Result<()> {
    a.require_non_empty("first")?;
    b.require_non_empty("second")?;
    if a.space() != b.space() {
        return Err(Error::Usage(format!(
            "clouds are in different spaces ({:?} vs {:?})",
            a.space(),
            b.space()
        )));
    }
    Ok(())
}

/// Mean nearest-neighbour distance from every point of `from` into `tree`.
pub(crate) fn directed_mean(from: &[Point3<f64>], tree: &KdTree, squared: bool) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|p| {
            let (_, d2) = tree.nearest(p).expect("non-empty tree");
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .sum();
    sum / from.len() as f64
}

/// Chamfer distance between two clouds.
///
/// One-sided form is the mean over `a` of the distance to the nearest point
/// of `b`; `symmetric` adds the reverse direction. `squared` selects squared
/// Euclidean distances.
pub fn chamfer_distance(
    a: &SemanticCloud,
    b: &SemanticCloud,
    squared: bool,
    symmetric: bool,
) -> Result<f64> {
    check_pair(a, b)?;
    let forward = directed_mean(a.points(), &KdTree::from_cloud(b), squared);
    if !symmetric {
        return Ok(forward);
    }
    let backward = directed_mean(b.points(), &KdTree::from_cloud(a), squared);
    Ok(forward + backward)
}

/// Points that survive the ground-truth outlier test, plus their source indices.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub cloud: SemanticCloud,
    pub kept: Vec<usize>,
    pub all_outliers: bool,
}

/// Keeps camera-space points whose posed-back distance to the model is below `tau1`.
///
/// Each point is mapped into the model's NOCS frame with the inverse of
/// `gt_pose`; the threshold is applied there. Output order follows input order.
pub fn object_aware_filter(
    points: &SemanticCloud,
    model: &SemanticCloud,
    gt_pose: &Pose,
    tau1: f64,
) -> Result<FilterOutput> {
    if tau1.is_nan() || tau1 <= 0.0 {
        return Err(Error::precondition(format!(
            "tau1 must be positive, got {tau1}"
        )));
    }
    model.require_non_empty("model")?;
    gt_pose.validate()?;
    let tree = KdTree::from_cloud(model);
    let tau2 = tau1 * tau1;
    let kept: Vec<usize> = points
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let q = gt_pose.camera_to_nocs(p);
            tree.nearest(&q).is_some_and(|(_, d2)| d2 < tau2)
        })
        .map(|(i, _)| i)
        .collect();
    let cloud = points.select(&kept);
    Ok(FilterOutput {
        all_outliers: kept.is_empty(),
        cloud,
        kept,
    })
}

/// One-sided, plain-L2 Chamfer from keypoints into the filtered partial cloud.
pub fn object_aware_chamfer(kpt: &SemanticCloud, filtered_partial: &SemanticCloud) -> Result<f64> {
    kpt.require_non_empty("keypoint")?;
    if filtered_partial.is_empty() {
        return Err(Error::NoInliers);
    }
    chamfer_distance(kpt, filtered_partial, false, false)
}

/// Sum over unordered pairs of `max(0, tau2 - |x - y|)`.
pub fn diversity_penalty(kpt: &SemanticCloud, tau2: f64) -> Result<f64> {
    if tau2.is_nan() || tau2 <= 0.0 {
        return Err(Error::precondition(format!(
            "tau2 must be positive, got {tau2}"
        )));
    }
    let pts = kpt.points();
    let mut total = 0.0;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            total += (tau2 - dist2(&pts[i], &pts[j]).sqrt()).max(0.0);
        }
    }
    Ok(total)
}

/// Greedy farthest point sampling with a seeded first pick.
pub fn farthest_point_sample(
    cloud: &SemanticCloud,
    count: usize,
    seed: u64,
) -> Result<SemanticCloud> {
    cloud.require_non_empty("input")?;
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    farthest_point_sample_from(cloud, count, first)
}

/// Farthest point sampling starting from index `first`.
///
/// Returns points in selection order. Ties in the max-min distance go to the
/// lowest index.
pub fn farthest_point_sample_from(
    cloud: &SemanticCloud,
    count: usize,
    first: usize,
) -> Result<SemanticCloud> {
    Ok(cloud.select(&farthest_point_indices(cloud.points(), count, first)?))
}

pub(crate) fn farthest_point_indices(
    points: &[Point3<f64>],
    count: usize,
    first: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::precondition(format!(
            "count = {count} must be in 1..={n}"
        )));
    }
    if first >= n {
        return Err(Error::precondition(format!(
            "first index {first} out of range"
        )));
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = first;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == count {
            break;
        }
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(&c, p);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// K-Means++ seeding over the pooled points of every cloud in `corpus`.
///
/// The first seed is uniform; each further seed is drawn with probability
/// proportional to its squared distance to the nearest chosen seed. When all
/// remaining mass is zero (duplicates), the lowest unchosen index is taken.
pub fn kmeanspp_init(corpus: &[SemanticCloud], count: usize, seed: u64) -> Result<SemanticCloud> {
    let space = corpus
        .first()
        .ok_or_else(|| Error::precondition("empty corpus"))?
        .space();
    let pool: Vec<Point3<f64>> = corpus
        .iter()
        .flat_map(|c| c.points().iter().copied())
        .collect();
    if count == 0 || pool.len() < count {
        return Err(Error::precondition(format!(
            "need {count} seeds but the pooled corpus has {} points",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; pool.len()];
    let mut min_d2 = vec![f64::INFINITY; pool.len()];
    let mut chosen = Vec::with_capacity(count);
    let mut current = rng.random_range(0..pool.len());
    loop {
        chosen.push(pool[current]);
        taken[current] = true;
        if chosen.len() == count {
            break;
        }
        let c = pool[current];
        let mut total = 0.0;
        for (i, p) in pool.iter().enumerate() {
            let d = dist2(&c, p);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !taken[i] {
                total += min_d2[i];
            }
        }
        current = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d2.iter().enumerate() {
                if taken[i] || d == 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive mass implies a candidate")
        } else {
            taken
                .iter()
                .position(|t| !t)
                .expect("pool larger than count")
        };
    }
    SemanticCloud::from_points(chosen, space)
}
