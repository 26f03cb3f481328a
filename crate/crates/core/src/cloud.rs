//! Point clouds with optional per-point descriptors.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate frame a cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Space {
    /// Normalized object coordinates (bounding-box diagonal 1, centered).
    Nocs,
    /// Camera frame, meters.
    Camera,
}

/// Dense row-major `rows × cols` matrix of per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "feature buffer has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `N` points in R³, each optionally carrying a `C`-dimensional descriptor.
///
/// Construction checks that every coordinate is finite and that the
/// descriptor row count matches the point count. Emptiness is allowed at the
/// type level (a fully rejected filter result is an empty cloud); operations
/// that need points check for it themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCloud {
    points: Vec<Point3<f64>>,
    descriptors: Option<FeatureMatrix>,
    space: Space,
}

impl SemanticCloud {
    pub fn new(
        points: Vec<Point3<f64>>,
        descriptors: Option<FeatureMatrix>,
        space: Space,
    ) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::precondition(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(d) = &descriptors {
            if d.rows() != points.len() {
                return Err(Error::Dimension(format!(
                    "{} descriptor rows for {} points",
                    d.rows(),
                    points.len()
                )));
            }
            if !d.is_finite() {
                return Err(Error::precondition("non-finite descriptor value"));
            }
        }
        Ok(Self {
            points,
            descriptors,
            space,
        })
    }

    pub fn from_points(points: Vec<Point3<f64>>, space: Space) -> Result<Self> {
        Self::new(points, None, space)
    }

    pub fn empty(space: Space) -> Self {
        Self {
            points: Vec::new(),
            descriptors: None,
            space,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3<f64> {
        &self.points[i]
    }

    pub fn descriptors(&self) -> Option<&FeatureMatrix> {
        self.descriptors.as_ref()
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.descriptors.as_ref().map(FeatureMatrix::cols)
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn into_parts(self) -> (Vec<Point3<f64>>, Option<FeatureMatrix>, Space) {
        (self.points, self.descriptors, self.space)
    }

    pub fn with_descriptors(self, descriptors: Option<FeatureMatrix>) -> Result<Self> {
        Self::new(self.points, descriptors, self.space)
    }

    /// Rows at `indices`, in that order, descriptors carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            descriptors: self.descriptors.as_ref().map(|d| d.select_rows(indices)),
            space: self.space,
        }
    }

    /// Applies `f` to every point; the result is relabelled with `space`.
    pub fn map_points(
        &self,
        space: Space,
        f: impl Fn(&Point3<f64>) -> Point3<f64>,
    ) -> Result<Self> {
        Self::new(
            self.points.iter().map(f).collect(),
            self.descriptors.clone(),
            space,
        )
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().map(|p| p.coords).sum();
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Tight axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
        )
    }

    pub fn extents(&self) -> Option<Vector3<f64>> {
        self.bounds().map(|(lo, hi)| hi - lo)
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::precondition(format!("{what} cloud is empty")))
        } else {
            Ok(())
        }
    }
}

#[inline]
pub(crate) fn dist2(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_points() {
        let pts = vec![Point3::new(0.0, f64::NAN, 0.0)];
        assert!(SemanticCloud::from_points(pts, Space::Nocs).is_err());
    }

    #[test]
    fn rejects_descriptor_row_mismatch() {
        let pts = vec![Point3::origin(); 3];
        let d = FeatureMatrix::zeros(2, 4);
        assert!(matches!(
            SemanticCloud::new(pts, Some(d), Space::Nocs),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn select_carries_descriptors() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let d = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let c = SemanticCloud::new(pts, Some(d), Space::Nocs).unwrap();
        let s = c.select(&[2, 0]);
        assert_eq!(s.point(0).x, 2.0);
        assert_eq!(s.descriptors().unwrap().row(1), &[0.0]);
    }

    #[test]
    fn bounds_and_extents() {
        let pts = vec![Point3::new(-1.0, 2.0, 0.5), Point3::new(1.0, -2.0, 0.0)];
        let c = SemanticCloud::from_points(pts, Space::Camera).unwrap();
        assert_eq!(c.extents().unwrap(), Vector3::new(2.0, 4.0, 0.5));
    }
}
