//! Stage-1 training: prototype, basis and per-instance parameters fitted
//! jointly against complete instances (auto-decoder regime).
//!
//! Each epoch pairs every synthesized point with its nearest ground-truth
//! point and vice versa, takes the analytic gradient of the resulting
//! quadratic symmetric Chamfer objective, and applies one Adam step. The
//! basis is unlocked one vector at a time according to the curriculum.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{synthesize, LinearShapeModel, ShapeParams, SCALE_MAX, SCALE_MIN};
use crate::cloud::SemanticCloud;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, farthest_point_sample, kmeanspp_init};
use crate::spatial::KdTree;

fn default_basis_dim() -> usize {
    5
}
fn default_prototype_points() -> usize {
    1024
}
fn default_epochs() -> usize {
    1000
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_one() -> f64 {
    1.0
}
fn default_tenth() -> f64 {
    0.1
}
fn default_rot_max() -> f64 {
    20.0
}
fn default_prob() -> f64 {
    0.5
}
fn default_fit_iters() -> usize {
    200
}
fn default_fit_tol() -> f64 {
    1e-10
}
fn default_patience() -> usize {
    5
}
fn default_ridge() -> f64 {
    1e-3
}
fn default_basis_init_std() -> f64 {
    1e-2
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

/// Hyperparameters for both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_basis_dim")]
    pub basis_dim: usize,
    #[serde(default = "default_prototype_points")]
    pub prototype_points: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "default_one")]
    pub lambda_cd: f64,
    #[serde(default = "default_tenth")]
    pub lambda_para: f64,
    #[serde(default = "default_one")]
    pub lambda1: f64,
    #[serde(default = "default_tenth")]
    pub lambda2: f64,
    /// `(epoch, active basis count)` pairs; empty means [`default_curriculum`].
    #[serde(default)]
    pub curriculum_schedule: Vec<(usize, usize)>,
    #[serde(default = "default_rot_max")]
    pub augment_rot_max_deg: f64,
    #[serde(default = "default_prob")]
    pub augment_prob: f64,
    #[serde(default = "default_basis_init_std")]
    pub basis_init_std: f64,
    /// Maximum re-pairing iterations for partial fitting.
    #[serde(default = "default_fit_iters")]
    pub fit_iters: usize,
    #[serde(default = "default_fit_tol")]
    pub fit_tol: f64,
    #[serde(default = "default_patience")]
    pub fit_patience: usize,
    /// Ridge weight on the coefficients when no stage-1 targets are given.
    #[serde(default = "default_ridge")]
    pub inference_ridge: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            basis_dim: default_basis_dim(),
            prototype_points: default_prototype_points(),
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            adam_betas: default_betas(),
            lambda_cd: 1.0,
            lambda_para: 0.1,
            lambda1: 1.0,
            lambda2: 0.1,
            curriculum_schedule: Vec::new(),
            augment_rot_max_deg: default_rot_max(),
            augment_prob: default_prob(),
            basis_init_std: default_basis_init_std(),
            fit_iters: default_fit_iters(),
            fit_tol: default_fit_tol(),
            fit_patience: default_patience(),
            inference_ridge: default_ridge(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.learning_rate,
            self.lambda_cd,
            self.lambda_para,
            self.lambda1,
            self.lambda2,
            self.inference_ridge,
            self.basis_init_std,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::precondition(
                "weights and rates must be finite and non-negative",
            ));
        }
        if self.prototype_points == 0 || self.prototype_points < self.basis_dim {
            return Err(Error::precondition(
                "prototype_points must be >= basis_dim and positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::precondition("augment_prob must be in [0, 1]"));
        }
        let sched = self.schedule();
        for w in sched.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::precondition("curriculum must be non-decreasing"));
            }
        }
        if sched.iter().any(|(_, k)| *k > self.basis_dim) {
            return Err(Error::precondition("curriculum count exceeds basis_dim"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<(usize, usize)> {
        if self.curriculum_schedule.is_empty() {
            default_curriculum(self.epochs, self.basis_dim)
        } else {
            self.curriculum_schedule.clone()
        }
    }

    /// Number of unlocked basis vectors at `epoch`.
    pub fn active_basis(&self, epoch: usize) -> usize {
        active_in(&self.schedule(), epoch)
    }
}

fn active_in(schedule: &[(usize, usize)], epoch: usize) -> usize {
    schedule
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .map_or(0, |(_, k)| *k)
}

/// Prototype alone for the first 30% of epochs, then one more basis vector
/// every further 10% until all `basis_dim` are active.
pub fn default_curriculum(epochs: usize, basis_dim: usize) -> Vec<(usize, usize)> {
    let mut s = vec![(0, 0)];
    for k in 1..=basis_dim {
        let at = (epochs * (2 + k)).div_ceil(10);
        s.push((at.min(epochs.saturating_sub(1)), k));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub active_basis: usize,
}

/// Converged stage-1 parameters of one training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFit {
    pub params: ShapeParams,
    /// Symmetric squared Chamfer between the synthesized shape and the instance.
    pub final_cd: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LinearShapeModel,
    pub fits: Vec<InstanceFit>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutput {
    /// Loss recorded at the first epoch of each curriculum stage, plus the last epoch.
    pub fn stage_checkpoints(&self) -> Vec<EpochRecord> {
        let mut out: Vec<EpochRecord> = Vec::new();
        for r in &self.log {
            if out.last().is_none_or(|l| l.active_basis != r.active_basis) {
                out.push(r.clone());
            }
        }
        if let Some(last) = self.log.last() {
            if out.last() != Some(last) {
                out.push(last.clone());
            }
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, [b1, b2]: [f64; 2]) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

fn v3(buf: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(buf[3 * i], buf[3 * i + 1], buf[3 * i + 2])
}

fn add3(buf: &mut [f64], i: usize, v: &Vector3<f64>) {
    buf[3 * i] += v.x;
    buf[3 * i + 1] += v.y;
    buf[3 * i + 2] += v.z;
}

/// Learns a category model from complete NOCS instances.
///
/// Instances with more than `prototype_points` points are downsampled by
/// farthest point sampling; fewer is an error. The returned fits are the
/// stage-1 optima used as targets for partial fitting.
pub fn train_category_model(
    category_id: &str,
    corpus: &[SemanticCloud],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::precondition(format!(
            "training needs at least 2 instances, got {}",
            corpus.len()
        )));
    }
    let npts = cfg.prototype_points;
    let ndim = cfg.basis_dim;
    let targets: Vec<SemanticCloud> = corpus
        .iter()
        .enumerate()
        .map(|(n, c)| {
            if c.len() < npts {
                Err(Error::precondition(format!(
                    "instance {n} has {} points, need at least {npts}",
                    c.len()
                )))
            } else if c.len() == npts {
                Ok(c.clone())
            } else {
                farthest_point_sample(c, npts, cfg.seed.wrapping_add(n as u64))
            }
        })
        .collect::<Result<_>>()?;
    let trees: Vec<KdTree> = targets.iter().map(KdTree::from_cloud).collect();
    let ninst = targets.len();

    let init = kmeanspp_init(&targets, npts, cfg.seed)?;
    let mut proto: Vec<f64> = init.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba515);
    let normal = Normal::new(0.0, cfg.basis_init_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::precondition(e.to_string()))?;
    let mut basis: Vec<Vec<f64>> = (0..ndim)
        .map(|_| (0..npts * 3).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    // coeffs[d][n]
    let mut coeffs = vec![vec![0.0; ninst]; ndim];
    let mut scales = vec![1.0; ninst * 3];

    let mut opt_proto = Adam::new(npts * 3);
    let mut opt_basis: Vec<Adam> = (0..ndim).map(|_| Adam::new(npts * 3)).collect();
    let mut opt_coeffs: Vec<Adam> = (0..ndim).map(|_| Adam::new(ninst)).collect();
    let mut opt_scales = Adam::new(ninst * 3);

    let schedule = cfg.schedule();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut u = vec![Vector3::zeros(); npts];
    let mut x = vec![Point3::origin(); npts];
    let mut gx = vec![Vector3::zeros(); npts];

    for epoch in 0..cfg.epochs {
        let active = active_in(&schedule, epoch);
        let mut g_proto = vec![0.0; npts * 3];
        let mut g_basis = vec![vec![0.0; npts * 3]; active];
        let mut g_coeffs = vec![vec![0.0; ninst]; active];
        let mut g_scales = vec![0.0; ninst * 3];
        let mut loss = 0.0;

        for n in 0..ninst {
            let s = v3(&scales, n);
            for i in 0..npts {
                let mut ui = v3(&proto, i);
                for d in 0..active {
                    ui += coeffs[d][n] * v3(&basis[d], i);
                }
                u[i] = ui;
                x[i] = Point3::from(s.component_mul(&ui));
                gx[i] = Vector3::zeros();
            }
            let target = targets[n].points();
            let inv_i = 1.0 / npts as f64;
            let inv_j = 1.0 / target.len() as f64;
            let mut inst_loss = 0.0;
            for i in 0..npts {
                let (j, d2) = trees[n].nearest(&x[i]).expect("non-empty");
                gx[i] += 2.0 * inv_i * (x[i] - target[j]);
                inst_loss += d2 * inv_i;
            }
            let xtree = KdTree::new(&x);
            for y in target {
                let (i, d2) = xtree.nearest(y).expect("non-empty");
                gx[i] += 2.0 * inv_j * (x[i] - y);
                inst_loss += d2 * inv_j;
            }
            if !inst_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, instance {n} (scale {s:?})"
                )));
            }
            loss += inst_loss;

            let mut gs = Vector3::zeros();
            for i in 0..npts {
                let sg = s.component_mul(&gx[i]);
                add3(&mut g_proto, i, &sg);
                for d in 0..active {
                    add3(&mut g_basis[d], i, &(coeffs[d][n] * sg));
                    g_coeffs[d][n] += sg.dot(&v3(&basis[d], i));
                }
                gs += gx[i].component_mul(&u[i]);
            }
            for k in 0..3 {
                g_scales[3 * n + k] = gs[k];
            }
        }
        log.push(EpochRecord {
            epoch,
            loss,
            active_basis: active,
        });

        let (lr, betas) = (cfg.learning_rate, cfg.adam_betas);
        opt_proto.step(&mut proto, &g_proto, lr, betas);
        for d in 0..active {
            opt_basis[d].step(&mut basis[d], &g_basis[d], lr, betas);
            opt_coeffs[d].step(&mut coeffs[d], &g_coeffs[d], lr, betas);
        }
        opt_scales.step(&mut scales, &g_scales, lr, betas);
        for s in &mut scales {
            *s = s.clamp(SCALE_MIN, SCALE_MAX);
        }
    }

    // Unit RMS per basis vector; coefficients absorb the factor.
    for d in 0..ndim {
        let rms = (basis[d].iter().map(|v| v * v).sum::<f64>() / npts as f64).sqrt();
        if rms > 0.0 && rms.is_finite() {
            basis[d].iter_mut().for_each(|v| *v /= rms);
            coeffs[d].iter_mut().for_each(|a| *a *= rms);
        }
    }

    let prototype = (0..npts).map(|i| Point3::from(v3(&proto, i))).collect();
    let basis_vecs = basis
        .iter()
        .map(|b| (0..npts).map(|i| v3(b, i)).collect())
        .collect();
    let mut model = LinearShapeModel::new(category_id, prototype, basis_vecs, None)?;
    model.quantize();

    let fits = (0..ninst)
        .map(|n| {
            let params = ShapeParams {
                coeffs: (0..ndim).map(|d| coeffs[d][n]).collect(),
                scale: v3(&scales, n),
            };
            let recon = synthesize(&model, &params)?;
            let final_cd = chamfer_distance(&recon, &targets[n], true, true)?;
            Ok(InstanceFit { params, final_cd })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrainOutput { model, fits, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = default_curriculum(1000, 5);
        assert_eq!(
            s,
            vec![(0, 0), (300, 1), (400, 2), (500, 3), (600, 4), (700, 5)]
        );
        let cfg = TrainConfig::default();
        assert_eq!(cfg.active_basis(0), 0);
        assert_eq!(cfg.active_basis(299), 0);
        assert_eq!(cfg.active_basis(300), 1);
        assert_eq!(cfg.active_basis(999), 5);
    }

    #[test]
    fn documented_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.basis_dim, c.prototype_points, c.epochs), (5, 1024, 1000));
        assert_eq!(
            (
                c.learning_rate,
                c.lambda_cd,
                c.lambda_para,
                c.lambda1,
                c.lambda2
            ),
            (1e-3, 1.0, 0.1, 1.0, 0.1)
        );
        assert_eq!((c.augment_rot_max_deg, c.augment_prob), (20.0, 0.5));
        let parsed: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn rejects_bad_schedule() {
        let mut c = TrainConfig {
            curriculum_schedule: vec![(0, 2), (10, 1)],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.curriculum_schedule = vec![(0, 6)];
        assert!(c.validate().is_err());
        c.curriculum_schedule = vec![];
        c.lambda1 = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn needs_two_instances() {
        let one = SemanticCloud::from_points(vec![Point3::origin(); 4], crate::cloud::Space::Nocs)
            .unwrap();
        let cfg = TrainConfig {
            prototype_points: 4,
            basis_dim: 1,
            ..TrainConfig::default()
        };
        assert!(train_category_model("x", &[one], &cfg).is_err());
        assert!(train_category_model("x", &[], &cfg).is_err());
    }
}
