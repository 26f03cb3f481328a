//! Category semantic prototypes.
//!
//! Dense descriptor clouds are pooled onto each instance's reconstruction
//! by k-nearest-neighbour averaging, the per-instance results are averaged
//! row-wise into the prototype, and every later reconstruction inherits the
//! prototype rows unchanged.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cloud::{FeatureMatrix, SemanticCloud, Space};
use crate::error::{Error, Result};
use crate::io::write_ply;
use crate::shape::{synthesize, LinearShapeModel, ShapeParams};
use crate::spatial::KdTree;

pub const DEFAULT_K_AGG: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DescriptorSource {
    Ingested,
    Procedural,
}

/// A NOCS cloud whose descriptors are mandatory.
#[derive(Debug, Clone)]
pub struct DescriptorCloud {
    cloud: SemanticCloud,
    source: DescriptorSource,
    k_agg: usize,
}

impl DescriptorCloud {
    /// `k_agg` is clamped to the point count.
    pub fn new(cloud: SemanticCloud, source: DescriptorSource, k_agg: usize) -> Result<Self> {
        cloud.require_non_empty("descriptor")?;
        if cloud.descriptors().is_none() {
            return Err(Error::precondition("descriptor cloud has no descriptors"));
        }
        if k_agg == 0 {
            return Err(Error::precondition("k_agg must be positive"));
        }
        let k_agg = k_agg.min(cloud.len());
        Ok(Self {
            cloud,
            source,
            k_agg,
        })
    }

    pub fn cloud(&self) -> &SemanticCloud {
        &self.cloud
    }

    pub fn source(&self) -> DescriptorSource {
        self.source
    }

    pub fn k_agg(&self) -> usize {
        self.k_agg
    }

    fn features(&self) -> &FeatureMatrix {
        self.cloud.descriptors().expect("checked at construction")
    }
}

/// Mean descriptor of the `k_agg` nearest dense points of every reconstruction point.
pub fn aggregate_instance_features(
    recon: &SemanticCloud,
    dense: &DescriptorCloud,
) -> Result<FeatureMatrix> {
    recon.require_non_empty("reconstruction")?;
    if recon.space() != Space::Nocs || dense.cloud.space() != Space::Nocs {
        return Err(Error::Usage(
            "feature aggregation expects NOCS clouds".into(),
        ));
    }
    let feats = dense.features();
    let tree = KdTree::from_cloud(&dense.cloud);
    let k = dense.k_agg;
    let mut out = FeatureMatrix::zeros(recon.len(), feats.cols());
    for (i, p) in recon.points().iter().enumerate() {
        let row = out.row_mut(i);
        for j in tree.knn(p, k) {
            for (o, v) in row.iter_mut().zip(feats.row(j)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= k as f64);
    }
    Ok(out)
}

/// Element-wise mean of per-instance feature matrices.
///
/// Values are summed in sorted order per entry, which makes the result
/// bit-identical under any permutation of the instances.
pub fn build_semantic_prototype(per_instance: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = per_instance
        .first()
        .ok_or_else(|| Error::precondition("no instance features"))?;
    let (rows, cols) = (first.rows(), first.cols());
    if let Some((n, m)) = per_instance
        .iter()
        .enumerate()
        .find(|(_, m)| m.rows() != rows || m.cols() != cols)
    {
        return Err(Error::Dimension(format!(
            "instance {n} features are {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    let n = per_instance.len() as f64;
    let mut buf = Vec::with_capacity(per_instance.len());
    let data = (0..rows * cols)
        .map(|e| {
            buf.clear();
            buf.extend(per_instance.iter().map(|m| m.as_slice()[e]));
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / n
        })
        .collect();
    FeatureMatrix::from_row_major(rows, cols, data)
}

/// Aggregates every instance's dense descriptors onto its stage-1
/// reconstruction and attaches their mean to `model`.
pub fn attach_semantic_prototype(
    model: &mut LinearShapeModel,
    fitted: &[ShapeParams],
    dense: &[DescriptorCloud],
) -> Result<FeatureMatrix> {
    if fitted.len() != dense.len() {
        return Err(Error::Dimension(format!(
            "{} fitted instances but {} descriptor clouds",
            fitted.len(),
            dense.len()
        )));
    }
    let per_instance = fitted
        .iter()
        .zip(dense)
        .map(|(p, d)| aggregate_instance_features(&synthesize(model, p)?, d))
        .collect::<Result<Vec<_>>>()?;
    let proto = build_semantic_prototype(&per_instance)?;
    model.set_semantic_prototype(proto.clone())?;
    Ok(proto)
}

/// Reconstruction geometry with the semantic prototype rows attached.
pub fn transfer_semantics(model: &LinearShapeModel, params: &ShapeParams) -> Result<SemanticCloud> {
    if model.semantic_prototype().is_none() {
        return Err(Error::precondition("model has no semantic prototype"));
    }
    synthesize(model, params)
}

/// Principal-component projection shared by a pool of descriptor clouds.
#[derive(Debug, Clone)]
pub struct FeaturePca {
    pub mean: Vec<f64>,
    /// Three leading unit eigenvectors; each has its largest-magnitude entry positive.
    pub components: [Vec<f64>; 3],
    pub eigenvalues: [f64; 3],
    /// Per cloud, per point projections onto the components.
    pub projections: Vec<Vec<[f64; 3]>>,
    pub colors: Vec<Vec<[u8; 3]>>,
}

/// Fits one PCA basis over every descriptor in `clouds` and projects them.
pub fn feature_pca(clouds: &[SemanticCloud]) -> Result<FeaturePca> {
    let dim = clouds
        .first()
        .ok_or_else(|| Error::precondition("no clouds"))?
        .descriptor_dim()
        .ok_or_else(|| Error::precondition("cloud has no descriptors"))?;
    if dim < 3 {
        return Err(Error::precondition(format!(
            "descriptor dimension {dim} < 3"
        )));
    }
    let mut total = 0usize;
    let mut mean = DVector::zeros(dim);
    for c in clouds {
        let d = c
            .descriptors()
            .ok_or_else(|| Error::precondition("cloud has no descriptors"))?;
        if d.cols() != dim {
            return Err(Error::Dimension(format!(
                "descriptor dimension {} != {dim}",
                d.cols()
            )));
        }
        for i in 0..d.rows() {
            mean += DVector::from_column_slice(d.row(i));
        }
        total += d.rows();
    }
    if total == 0 {
        return Err(Error::precondition("no descriptor rows"));
    }
    mean /= total as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for c in clouds {
        let d = c.descriptors().expect("checked");
        for i in 0..d.rows() {
            let x = DVector::from_column_slice(d.row(i)) - &mean;
            cov += &x * x.transpose();
        }
    }
    cov /= total as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let component = |k: usize| -> Vec<f64> {
        let v = eig.eigenvectors.column(order[k]);
        let mut lead = 0;
        for i in 1..dim {
            if v[i].abs() > v[lead].abs() {
                lead = i;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        v.iter().map(|x| sign * x).collect()
    };
    let components = [component(0), component(1), component(2)];
    let eigenvalues = [
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    ];

    let projections: Vec<Vec<[f64; 3]>> = clouds
        .iter()
        .map(|c| {
            let d = c.descriptors().expect("checked");
            (0..d.rows())
                .map(|i| {
                    let row = d.row(i);
                    let mut out = [0.0; 3];
                    for (k, comp) in components.iter().enumerate() {
                        out[k] = row
                            .iter()
                            .zip(mean.iter())
                            .zip(comp)
                            .map(|((x, m), w)| (x - m) * w)
                            .sum();
                    }
                    out
                })
                .collect()
        })
        .collect();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in projections.iter().flatten() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let colors = projections
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|p| {
                    let mut rgb = [0u8; 3];
                    for k in 0..3 {
                        let span = hi[k] - lo[k];
                        let t = if span > 0.0 {
                            (p[k] - lo[k]) / span
                        } else {
                            0.0
                        };
                        rgb[k] = (t * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                    rgb
                })
                .collect()
        })
        .collect();

    Ok(FeaturePca {
        mean: mean.iter().copied().collect(),
        components,
        eigenvalues,
        projections,
        colors,
    })
}

/// Writes one RGB-colored PLY per cloud, colored by the pooled PCA.
pub fn export_feature_pca<P: AsRef<Path>>(
    clouds: &[SemanticCloud],
    out_paths: &[P],
) -> Result<FeaturePca> {
    if clouds.len() != out_paths.len() {
        return Err(Error::Dimension(format!(
            "{} clouds but {} output paths",
            clouds.len(),
            out_paths.len()
        )));
    }
    let pca = feature_pca(clouds)?;
    for ((c, colors), path) in clouds.iter().zip(&pca.colors).zip(out_paths) {
        write_ply(path, c.points(), Some(colors))?;
    }
    Ok(pca)
}
