//! Pose and mesh evaluation: MPJPE, Procrustes-aligned MPJPE, MPVPE, PCK/AUC
//! and per-joint / per-action breakdowns. Inputs are millimetres.

mod procrustes;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::PoseSample;
use crate::error::{Error, Result};
use crate::geom::{dist, Vec3};
use crate::graph::skeleton::{JOINT_NAMES, N_JOINTS};

pub use procrustes::{procrustes_align, svd3, Similarity};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEPS: usize = 31;

/// Euclidean error per point of one sample.
pub fn point_errors(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { expected: gt.len(), found: pred.len() });
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).collect())
}

fn mean_point_error(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { expected: gt.len(), found: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let e = point_errors(p, g)?;
        n += e.len();
        sum += e.iter().sum::<f64>();
    }
    Ok(sum / n as f64)
}

/// Mean joint error over samples and joints.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    mean_point_error(pred, gt)
}

/// Mean vertex error over samples and vertices.
pub fn mpvpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    mean_point_error(pred, gt)
}

/// MPJPE after aligning each prediction to its target. `with_scale` selects
/// similarity (the usual protocol) versus rigid alignment.
pub fn pa_mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], with_scale: bool) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { expected: gt.len(), found: pred.len() });
    }
    let aligned = pred.iter().zip(gt).map(|(p, g)| procrustes_align(p, g, with_scale)).collect::<Result<Vec<_>>>()?;
    mean_point_error(&aligned, gt)
}

/// Evenly spaced AUC thresholds over `[0, 150]` mm.
pub fn auc_thresholds() -> Vec<f64> {
    (0..AUC_STEPS).map(|k| PCK_THRESHOLD_MM * k as f64 / (AUC_STEPS - 1) as f64).collect()
}

/// Percent of errors under `threshold`. An exact zero error counts as
/// correct even at threshold zero.
pub fn pck(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|&&e| e < threshold || e == 0.0).count() as f64 / errors.len() as f64
}

/// `(pck %, auc %)` from flat per-joint errors.
pub fn pck_auc_from_errors(errors: &[f64]) -> (f64, f64) {
    let auc = auc_thresholds().iter().map(|&t| pck(errors, t)).sum::<f64>() / AUC_STEPS as f64;
    (pck(errors, PCK_THRESHOLD_MM), auc)
}

pub fn pck_auc(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { expected: gt.len(), found: pred.len() });
    }
    let mut errors = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        errors.extend(point_errors(p, g)?);
    }
    Ok(pck_auc_from_errors(&errors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub per_joint_mm: Vec<f64>,
    /// Sorted by action name.
    pub per_action_mm: BTreeMap<String, f64>,
}

/// Groups per-sample joint errors by joint and by action tag.
pub fn breakdown(per_sample: &[Vec<f64>], tags: &[String]) -> Result<Breakdown> {
    if per_sample.len() != tags.len() {
        return Err(Error::LengthMismatch { expected: per_sample.len(), found: tags.len() });
    }
    let n_joints = per_sample.first().map_or(0, Vec::len);
    let mut per_joint = vec![0.0; n_joints];
    let mut actions: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (errs, tag) in per_sample.iter().zip(tags) {
        if errs.len() != n_joints {
            return Err(Error::LengthMismatch { expected: n_joints, found: errs.len() });
        }
        for (acc, e) in per_joint.iter_mut().zip(errs) {
            *acc += e;
        }
        let slot = actions.entry(tag.clone()).or_default();
        slot.0 += errs.iter().sum::<f64>() / n_joints as f64;
        slot.1 += 1;
    }
    per_joint.iter_mut().for_each(|v| *v /= per_sample.len() as f64);
    Ok(Breakdown {
        per_joint_mm: per_joint,
        per_action_mm: actions.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mpvpe_mid_mm: Option<f64>,
    pub mpvpe_top_mm: Option<f64>,
    pub per_joint_mm: Vec<f64>,
    pub per_action_mm: BTreeMap<String, f64>,
    pub pck_pct: Option<f64>,
    pub auc_pct: Option<f64>,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

/// Predictions for a set of samples, millimetres.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub pose: Vec<Vec<Vec3>>,
    pub mesh_mid: Option<Vec<Vec<Vec3>>>,
    pub mesh_top: Option<Vec<Vec<Vec3>>>,
}

fn mesh_error(pred: Option<&Vec<Vec<Vec3>>>, samples: &[PoseSample], pick: fn(&PoseSample) -> Option<&Vec<Vec3>>) -> Result<Option<f64>> {
    let Some(pred) = pred else { return Ok(None) };
    let (p, g): (Vec<_>, Vec<_>) =
        pred.iter().zip(samples).filter_map(|(p, s)| pick(s).map(|g| (p.clone(), g.clone()))).unzip();
    if p.is_empty() {
        return Ok(None);
    }
    mpvpe(&p, &g).map(Some)
}

pub fn evaluate(pred: &Predictions, samples: &[PoseSample]) -> Result<EvalReport> {
    let gt: Vec<Vec<Vec3>> = samples.iter().map(|s| s.joints3d.clone()).collect();
    if pred.pose.len() != gt.len() {
        return Err(Error::LengthMismatch { expected: gt.len(), found: pred.pose.len() });
    }
    let per_sample = pred.pose.iter().zip(&gt).map(|(p, g)| point_errors(p, g)).collect::<Result<Vec<_>>>()?;
    let tags: Vec<String> = samples.iter().map(|s| s.action.clone()).collect();
    let b = breakdown(&per_sample, &tags)?;
    let (pck, auc) = pck_auc_from_errors(&per_sample.concat());
    Ok(EvalReport {
        n_samples: samples.len(),
        mpjpe_mm: mpjpe(&pred.pose, &gt)?,
        pa_mpjpe_mm: pa_mpjpe(&pred.pose, &gt, true)?,
        mpvpe_mid_mm: mesh_error(pred.mesh_mid.as_ref(), samples, |s| s.mesh_mid.as_ref())?,
        mpvpe_top_mm: mesh_error(pred.mesh_top.as_ref(), samples, |s| s.mesh_top.as_ref())?,
        per_joint_mm: b.per_joint_mm,
        per_action_mm: b.per_action_mm,
        pck_pct: Some(pck),
        auc_pct: Some(auc),
        config: BTreeMap::new(),
    })
}

impl EvalReport {
    pub fn per_joint_csv(&self) -> String {
        let mut out = String::from("joint,name,mpjpe_mm\n");
        for (j, v) in self.per_joint_mm.iter().enumerate() {
            let name = if self.per_joint_mm.len() == N_JOINTS { JOINT_NAMES[j] } else { "" };
            writeln!(out, "{j},{name},{v}").unwrap();
        }
        out
    }

    pub fn per_action_csv(&self) -> String {
        let mut out = String::from("action,mpjpe_mm\n");
        for (a, v) in &self.per_action_mm {
            writeln!(out, "{a},{v}").unwrap();
        }
        out
    }
}
