//! Stage-2 fitting of shape parameters to a (partial) observation with a
//! frozen model.
//!
//! The objective is
//! `λ_CD · mean_j |x_{π(j)} + t − p_j|² + λ_para · (λ₁|a − ā|₁ + λ₂|s − s̄|₁)`
//! where `π(j)` pairs observed point `j` with its nearest synthesized point
//! and `t` absorbs the unknown offset of a centered observation. Without
//! targets the parameter term becomes a ridge on `a` and on `s − 1`.
//!
//! Each iteration re-pairs, then minimizes the fixed-pairing surrogate block
//! by block: coordinate descent with soft-thresholding for `a`, a per-axis
//! closed form for `s`, and the mean residual for `t`. Every block update
//! lowers the surrogate, and re-pairing lowers the true objective.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;

use super::{synthesize, LinearShapeModel, ShapeParams, TrainConfig, SCALE_MAX, SCALE_MIN};
use crate::cloud::SemanticCloud;
use crate::error::{Error, Result};
use crate::spatial::KdTree;

const COORD_SWEEPS: usize = 3;

/// Stage-1 optimum `(ā, s̄)` that supervises partial fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTargets {
    pub coeffs: Vec<f64>,
    pub scale: Vector3<f64>,
}

impl From<&ShapeParams> for FitTargets {
    fn from(p: &ShapeParams) -> Self {
        Self {
            coeffs: p.coeffs.clone(),
            scale: p.scale,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ShapeParams,
    /// Offset between the observation frame and the model frame.
    pub offset: Vector3<f64>,
    /// Completed shape in the model frame, semantics attached.
    pub reconstruction: SemanticCloud,
    pub loss: f64,
    pub iterations: usize,
    /// Set when the loss rose for `fit_patience` consecutive iterations; the
    /// best parameters seen are returned.
    pub diverged: bool,
}

fn soft(v: f64, thresh: f64) -> f64 {
    if v > thresh {
        v - thresh
    } else if v < -thresh {
        v + thresh
    } else {
        0.0
    }
}

struct State {
    coeffs: Vec<f64>,
    scale: Vector3<f64>,
    offset: Vector3<f64>,
}

/// Fits `(a, s)` and an offset to `partial` with `model` frozen.
///
/// A centered partial view leaves the offset far from zero, so a short run
/// is screened from the origin and from offsets along the axes and cube
/// diagonals at two radii; the lowest-loss start is then run to convergence.
pub fn fit_partial(
    model: &LinearShapeModel,
    partial: &SemanticCloud,
    targets: Option<&FitTargets>,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    let screen = TrainConfig {
        fit_iters: SCREEN_ITERS.min(cfg.fit_iters),
        ..cfg.clone()
    };
    let mut best = (f64::INFINITY, Vector3::zeros());
    for start in offset_starts() {
        let r = fit_partial_from(model, partial, targets, &screen, start)?;
        if r.loss < best.0 {
            best = (r.loss, start);
        }
    }
    fit_partial_from(model, partial, targets, cfg, best.1)
}

const START_RADII: [f64; 2] = [0.1, 0.2];
const SCREEN_ITERS: usize = 20;

fn offset_starts() -> Vec<Vector3<f64>> {
    let mut dirs = Vec::new();
    for k in 0..3 {
        for sign in [1.0, -1.0] {
            let mut v = Vector3::zeros();
            v[k] = sign;
            dirs.push(v);
        }
    }
    let d = 1.0 / 3f64.sqrt();
    for x in [d, -d] {
        for y in [d, -d] {
            for z in [d, -d] {
                dirs.push(Vector3::new(x, y, z));
            }
        }
    }
    let mut out = vec![Vector3::zeros()];
    for r in START_RADII {
        out.extend(dirs.iter().map(|v| v * r));
    }
    out
}

/// Best iterate of a fit: loss, coefficients, scale and offset.
type Candidate = (f64, Vec<f64>, Vector3<f64>, Vector3<f64>);

/// As [`fit_partial`], starting from offset `start`.
pub fn fit_partial_from(
    model: &LinearShapeModel,
    partial: &SemanticCloud,
    targets: Option<&FitTargets>,
    cfg: &TrainConfig,
    start: Vector3<f64>,
) -> Result<FitResult> {
    partial.require_non_empty("partial")?;
    let dim = model.basis_dim();
    if let Some(t) = targets {
        if t.coeffs.len() != dim {
            return Err(Error::Dimension(format!(
                "{} target coefficients for D = {dim}",
                t.coeffs.len()
            )));
        }
    }
    let obs = partial.points();
    let npts = model.num_points();
    let lam = cfg.lambda_cd / obs.len() as f64;
    let (mu_a, mu_s) = match targets {
        Some(_) => (cfg.lambda_para * cfg.lambda1, cfg.lambda_para * cfg.lambda2),
        None => (0.0, 0.0),
    };
    let ridge = if targets.is_none() {
        cfg.inference_ridge
    } else {
        0.0
    };

    let objective = |st: &State, sq_err: f64| -> f64 {
        let mut v = lam * sq_err;
        match targets {
            Some(t) => {
                v += mu_a
                    * st.coeffs
                        .iter()
                        .zip(&t.coeffs)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>();
                v += mu_s * (st.scale - t.scale).abs().sum();
            }
            None => {
                v += ridge * st.coeffs.iter().map(|a| a * a).sum::<f64>();
                v += ridge * (st.scale - Vector3::repeat(1.0)).norm_squared();
            }
        }
        v
    };

    let mut st = State {
        coeffs: vec![0.0; dim],
        scale: Vector3::new(1.0, 1.0, 1.0),
        offset: start,
    };
    let mut best: Option<Candidate> = None;
    let mut prev = f64::INFINITY;
    let mut rising = 0;
    let mut diverged = false;
    let mut iterations = 0;
    let mut u = vec![Vector3::zeros(); npts];
    let mut x = vec![Point3::origin(); npts];
    let mut pair = vec![0usize; obs.len()];

    for it in 0..cfg.fit_iters.max(1) {
        iterations = it + 1;
        for i in 0..npts {
            u[i] = model.deformed(&st.coeffs, i);
            x[i] = Point3::from(st.scale.component_mul(&u[i]));
        }
        let tree = KdTree::new(&x);
        let mut sq_err = 0.0;
        for (j, p) in obs.iter().enumerate() {
            let (i, d2) = tree.nearest(&(p - st.offset)).expect("non-empty");
            pair[j] = i;
            sq_err += d2;
        }
        let loss = objective(&st, sq_err);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite fit loss at iteration {it}"
            )));
        }
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, st.coeffs.clone(), st.scale, st.offset));
        }
        if loss > prev {
            rising += 1;
            if rising >= cfg.fit_patience.max(1) {
                diverged = true;
                break;
            }
        } else {
            rising = 0;
        }
        if prev.is_finite() && (prev - loss).abs() <= cfg.fit_tol * prev.abs().max(1e-300) {
            break;
        }
        prev = loss;

        // residuals r_j = x_{π(j)} + t − p_j
        let mut r: Vec<Vector3<f64>> = obs
            .iter()
            .zip(&pair)
            .map(|(p, &i)| x[i].coords + st.offset - p.coords)
            .collect();

        for _ in 0..COORD_SWEEPS {
            for d in 0..dim {
                let v = &model.basis()[d];
                let (mut ww, mut rw) = (0.0, 0.0);
                for (rj, &i) in r.iter().zip(&pair) {
                    let w = st.scale.component_mul(&v[i]);
                    ww += w.norm_squared();
                    rw += rj.dot(&w);
                }
                let a_quad = lam * ww + ridge;
                if a_quad <= 0.0 {
                    continue;
                }
                let old = st.coeffs[d];
                let z = old - (lam * rw + ridge * old) / a_quad;
                let new = match targets {
                    Some(t) => t.coeffs[d] + soft(z - t.coeffs[d], mu_a / (2.0 * a_quad)),
                    None => z,
                };
                let delta = new - old;
                if delta != 0.0 {
                    for (rj, &i) in r.iter_mut().zip(&pair) {
                        *rj += delta * st.scale.component_mul(&v[i]);
                    }
                    st.coeffs[d] = new;
                }
            }
        }
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = model.deformed(&st.coeffs, i);
        }

        for k in 0..3 {
            let (mut uu, mut up) = (0.0, 0.0);
            for (p, &i) in obs.iter().zip(&pair) {
                uu += u[i][k] * u[i][k];
                up += u[i][k] * (p[k] - st.offset[k]);
            }
            if uu <= 0.0 {
                continue;
            }
            let new = match targets {
                Some(t) => t.scale[k] + soft(up / uu - t.scale[k], mu_s / (2.0 * lam * uu)),
                None => (lam * up + ridge) / (lam * uu + ridge),
            };
            st.scale[k] = new.clamp(SCALE_MIN, SCALE_MAX);
        }

        let mut mean = Vector3::zeros();
        for (p, &i) in obs.iter().zip(&pair) {
            mean += p.coords - st.scale.component_mul(&u[i]);
        }
        st.offset = mean / obs.len() as f64;
    }

    let (loss, coeffs, scale, offset) = best.expect("at least one iteration");
    let params = ShapeParams { coeffs, scale };
    let reconstruction = synthesize(model, &params)?;
    if diverged {
        log::warn!("partial fit diverged after {iterations} iterations; returning best-so-far");
    }
    Ok(FitResult {
        params,
        offset,
        reconstruction,
        loss,
        iterations,
        diverged,
    })
}

/// Random rotation about the centroid: with probability `prob`, per-axis
/// angles uniform in `[0, max_deg]` composed as `Rz·Ry·Rx`.
pub fn augment_rotation<R: Rng + ?Sized>(
    cloud: &SemanticCloud,
    max_deg: f64,
    prob: f64,
    rng: &mut R,
) -> Result<(SemanticCloud, Matrix3<f64>)> {
    cloud.require_non_empty("augmented")?;
    if rng.random::<f64>() >= prob {
        return Ok((cloud.clone(), Matrix3::identity()));
    }
    let mut angle = || rng.random_range(0.0..=max_deg.max(0.0)).to_radians();
    let (ax, ay, az) = (angle(), angle(), angle());
    let r = nalgebra::Rotation3::from_euler_angles(ax, ay, az).into_inner();
    let c = cloud.centroid().expect("non-empty").coords;
    let out = cloud.map_points(cloud.space(), |p| Point3::from(r * (p.coords - c) + c))?;
    Ok((out, r))
}
