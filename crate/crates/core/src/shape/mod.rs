//! Per-category linear semantic shape model.
//!
//! A shape is `s ⊙ (c + Σ_d a_d v_d)` row-wise, where `c` is the prototype,
//! `v_d` the deformation basis, `a` the per-instance coefficients and `s` an
//! anisotropic scale. Every synthesized point `i` carries row `i` of the
//! semantic prototype unchanged.

mod fit;
mod train;

use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::cloud::{FeatureMatrix, SemanticCloud, Space};
use crate::error::{Error, Result};

pub use fit::{augment_rotation, fit_partial, fit_partial_from, FitResult, FitTargets};
pub use train::{
    default_curriculum, train_category_model, EpochRecord, InstanceFit, TrainConfig, TrainOutput,
};

pub const MODEL_MAGIC: &[u8; 4] = b"DLSM";
/// Upper bound of the per-axis scale.
pub const SCALE_MAX: f64 = 10.0;
/// Lower clamp used by the optimizers; the contract only requires `> 0`.
pub const SCALE_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearShapeModel {
    category_id: String,
    prototype: Vec<Point3<f64>>,
    basis: Vec<Vec<Vector3<f64>>>,
    semantic_prototype: Option<FeatureMatrix>,
}

impl LinearShapeModel {
    pub fn new(
        category_id: impl Into<String>,
        prototype: Vec<Point3<f64>>,
        basis: Vec<Vec<Vector3<f64>>>,
        semantic_prototype: Option<FeatureMatrix>,
    ) -> Result<Self> {
        let i = prototype.len();
        if i == 0 {
            return Err(Error::precondition("prototype has no points"));
        }
        if i < basis.len() {
            return Err(Error::precondition(format!(
                "prototype has {i} points but the basis has {} vectors",
                basis.len()
            )));
        }
        if !prototype
            .iter()
            .all(|p| p.coords.iter().all(|v| v.is_finite()))
        {
            return Err(Error::precondition("non-finite prototype coordinate"));
        }
        for (d, v) in basis.iter().enumerate() {
            if v.len() != i {
                return Err(Error::Dimension(format!(
                    "basis vector {d} has {} rows, expected {i}",
                    v.len()
                )));
            }
            if !v.iter().all(|r| r.iter().all(|x| x.is_finite())) {
                return Err(Error::precondition(format!(
                    "basis vector {d} is not finite"
                )));
            }
            if let Some(e) = basis[..d].iter().position(|u| u == v) {
                return Err(Error::precondition(format!(
                    "basis vectors {e} and {d} are identical"
                )));
            }
        }
        if let Some(sem) = &semantic_prototype {
            if sem.rows() != i {
                return Err(Error::Dimension(format!(
                    "semantic prototype has {} rows, expected {i}",
                    sem.rows()
                )));
            }
            if !sem.is_finite() {
                return Err(Error::precondition("non-finite semantic prototype"));
            }
        }
        Ok(Self {
            category_id: category_id.into(),
            prototype,
            basis,
            semantic_prototype,
        })
    }

    pub fn category_id(&self) -> &str {
        &self.category_id
    }

    pub fn num_points(&self) -> usize {
        self.prototype.len()
    }

    pub fn basis_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.semantic_prototype
            .as_ref()
            .map_or(0, FeatureMatrix::cols)
    }

    pub fn prototype(&self) -> &[Point3<f64>] {
        &self.prototype
    }

    pub fn basis(&self) -> &[Vec<Vector3<f64>>] {
        &self.basis
    }

    pub fn semantic_prototype(&self) -> Option<&FeatureMatrix> {
        self.semantic_prototype.as_ref()
    }

    pub fn set_semantic_prototype(&mut self, sem: FeatureMatrix) -> Result<()> {
        if sem.rows() != self.num_points() {
            return Err(Error::Dimension(format!(
                "semantic prototype has {} rows, expected {}",
                sem.rows(),
                self.num_points()
            )));
        }
        self.semantic_prototype = Some(sem);
        Ok(())
    }

    /// Rounds every stored value to `f32`, the on-disk precision.
    pub fn quantize(&mut self) {
        let q = |v: &mut f64| *v = f64::from(*v as f32);
        self.prototype
            .iter_mut()
            .for_each(|p| p.coords.iter_mut().for_each(q));
        self.basis
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(|r| r.iter_mut().for_each(q)));
        if let Some(sem) = &mut self.semantic_prototype {
            let (rows, cols) = (sem.rows(), sem.cols());
            let data = sem
                .as_slice()
                .iter()
                .map(|v| f64::from(*v as f32))
                .collect();
            *sem = FeatureMatrix::from_row_major(rows, cols, data).expect("same shape");
        }
    }

    /// Undeformed point `i` for coefficients `a`: `c_i + Σ a_d v_d,i`.
    pub(crate) fn deformed(&self, coeffs: &[f64], i: usize) -> Vector3<f64> {
        let mut u = self.prototype[i].coords;
        for (a, v) in coeffs.iter().zip(&self.basis) {
            u += *a * v[i];
        }
        u
    }
}

/// Per-instance deformation coefficients and per-axis scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub coeffs: Vec<f64>,
    pub scale: Vector3<f64>,
}

impl ShapeParams {
    pub fn identity(basis_dim: usize) -> Self {
        Self {
            coeffs: vec![0.0; basis_dim],
            scale: Vector3::new(1.0, 1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.coeffs.iter().all(|a| a.is_finite()) {
            return Err(Error::precondition("non-finite shape coefficient"));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && *s <= SCALE_MAX) {
            return Err(Error::precondition(format!(
                "scale {:?} outside (0, {SCALE_MAX}]",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Geometry `s ⊙ (c + Σ a_d v_d)` with the semantic prototype attached.
pub fn synthesize(model: &LinearShapeModel, params: &ShapeParams) -> Result<SemanticCloud> {
    if params.coeffs.len() != model.basis_dim() {
        return Err(Error::Dimension(format!(
            "{} coefficients for a {}-vector basis",
            params.coeffs.len(),
            model.basis_dim()
        )));
    }
    params.validate()?;
    let pts = (0..model.num_points())
        .map(|i| {
            Point3::from(
                params
                    .scale
                    .component_mul(&model.deformed(&params.coeffs, i)),
            )
        })
        .collect();
    SemanticCloud::new(pts, model.semantic_prototype.clone(), Space::Nocs)
}

/// Serializes a model to the `.dlsm` layout.
///
/// `DLSM`, u32 I, u32 D, u32 C, prototype `I·3` f32, basis `D·I·3` f32,
/// semantic `I·C` f32, then a trailer of u32 byte length + UTF-8 category id.
pub fn model_to_bytes(model: &LinearShapeModel) -> Vec<u8> {
    let (i, d, c) = (
        model.num_points(),
        model.basis_dim(),
        model.descriptor_dim(),
    );
    let mut out =
        Vec::with_capacity(16 + 4 * (i * 3 * (d + 1) + i * c) + 4 + model.category_id.len());
    out.extend_from_slice(MODEL_MAGIC);
    for v in [i, d, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for p in &model.prototype {
        p.coords.iter().for_each(|v| put(*v));
    }
    for b in &model.basis {
        for r in b {
            r.iter().for_each(|v| put(*v));
        }
    }
    if let Some(sem) = &model.semantic_prototype {
        sem.as_slice().iter().for_each(|v| put(*v));
    }
    out.extend_from_slice(&(model.category_id.len() as u32).to_le_bytes());
    out.extend_from_slice(model.category_id.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.at as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.at as u64, format!("{what} size overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<LinearShapeModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, expected DLSM"));
    }
    let i = r.u32("point count")?;
    let d = r.u32("basis dimension")?;
    let c = r.u32("descriptor dimension")?;
    if i == 0 || d > i {
        return Err(Error::format(4, format!("invalid dimensions I={i} D={d}")));
    }
    let to_points = |v: Vec<f64>| -> Vec<Vector3<f64>> {
        v.chunks_exact(3).map(Vector3::from_column_slice).collect()
    };
    let prototype = to_points(r.f32s(i * 3, "prototype")?)
        .into_iter()
        .map(Point3::from)
        .collect();
    let mut basis = Vec::with_capacity(d);
    for _ in 0..d {
        basis.push(to_points(r.f32s(i * 3, "basis")?));
    }
    let semantic = if c > 0 {
        Some(FeatureMatrix::from_row_major(
            i,
            c,
            r.f32s(i * c, "semantic prototype")?,
        )?)
    } else {
        None
    };
    let id_len = r.u32("category id length")?;
    let at = r.at as u64;
    let id = std::str::from_utf8(r.take(id_len, "category id")?)
        .map_err(|_| Error::format(at, "category id is not UTF-8"))?
        .to_string();
    if r.at != bytes.len() {
        return Err(Error::format(r.at as u64, "trailing bytes after model"));
    }
    LinearShapeModel::new(id, prototype, basis, semantic)
        .map_err(|e| Error::format(16, e.to_string()))
}

pub fn save_model(model: &LinearShapeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LinearShapeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
