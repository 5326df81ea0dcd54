//! Objective, optimizer, augmentation and the epoch loop.
//!
//! The network works in metres: 3D targets are the dataset's millimetres
//! divided by 1000, and predictions are scaled back before evaluation.

mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::PoseSample;
use crate::error::{Error, Result};
use crate::graph::skeleton::N_JOINTS;
use crate::model::ModelOutputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use optim::{adam_step, clip_rows, max_norm_clip, AdamHyper, AdamState};
pub use run::{predict_samples, train, train_step, EpochReport, TrainOutcome};

pub const MM_PER_UNIT: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 1.0, lambda_m: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base · decay^⌊epoch / every⌋`
    #[default]
    Step,
    /// `base · decay^(epoch / every)`
    Exponential,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "exponential" => Ok(Self::Exponential),
            _ => Err(Error::Config(format!("unknown lr schedule `{s}` (step, exponential)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_schedule: LrSchedule,
    pub max_norm_threshold: f64,
    pub flip_augment: bool,
    pub loss: LossWeights,
    pub seed: u64,
    /// Fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Seed of the train/validation split, kept apart from `seed` so runs
    /// with different model seeds share one split.
    pub split_seed: u64,
    /// Also report eval-mode MPJPE on the training split each epoch.
    pub eval_train: bool,
    /// When non-empty, only parameters whose names start with one of these
    /// prefixes are updated and the frozen rest runs in eval mode.
    pub trainable_prefixes: Vec<String>,
    /// Record wall-clock time in the report; off keeps reports reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            base_lr: 1e-3,
            lr_decay: 0.9,
            lr_decay_every: 20,
            lr_schedule: LrSchedule::Step,
            max_norm_threshold: 1.0,
            flip_augment: false,
            loss: LossWeights::default(),
            seed: 0,
            val_fraction: 0.1,
            split_seed: 0,
            eval_train: false,
            trainable_prefixes: Vec::new(),
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.max_norm_threshold > 0.0) {
            return bad("max_norm_threshold must be positive");
        }
        if !(self.loss.lambda_p >= 0.0 && self.loss.lambda_m >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let periods = match cfg.lr_schedule {
        LrSchedule::Step => (epoch / cfg.lr_decay_every) as f64,
        LrSchedule::Exponential => epoch as f64 / cfg.lr_decay_every as f64,
    };
    cfg.base_lr * cfg.lr_decay.powf(periods)
}

/// Mesh target with a per-sample presence mask broadcast over vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshTarget<S: Scalar> {
    pub values: Tensor<S>,
    pub mask: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets<S: Scalar> {
    pub pose: Tensor<S>,
    pub mesh_mid: Option<MeshTarget<S>>,
    pub mesh_top: Option<MeshTarget<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S: Scalar> {
    pub x2d: Tensor<S>,
    pub targets: Targets<S>,
}

fn points<S: Scalar>(rows: &[&Vec<[f64; 3]>], n: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(rows.len() * n * 3);
    for r in rows {
        if r.len() != n {
            return Err(Error::NodeCountMismatch { expected: n, found: r.len() });
        }
        data.extend(r.iter().flatten().map(|&v| S::of(v / MM_PER_UNIT)));
    }
    Tensor::new([rows.len(), n, 3], data)
}

fn mesh_target<S: Scalar>(samples: &[&PoseSample], pick: fn(&PoseSample) -> Option<&Vec<[f64; 3]>>) -> Result<Option<MeshTarget<S>>> {
    let Some(n) = samples.iter().find_map(|s| pick(s)).map(Vec::len) else { return Ok(None) };
    let empty = vec![[0.0; 3]; n];
    let rows: Vec<&Vec<[f64; 3]>> = samples.iter().map(|s| pick(s).unwrap_or(&empty)).collect();
    let values = points(&rows, n)?;
    let mask = samples
        .iter()
        .flat_map(|s| std::iter::repeat_n(if pick(s).is_some() { S::one() } else { S::zero() }, n * 3))
        .collect();
    Ok(Some(MeshTarget { values, mask: Tensor::new([samples.len(), n, 3], mask)? }))
}

/// Inputs in normalized image units and 2D-only tensor for prediction.
pub fn input_tensor<S: Scalar>(samples: &[&PoseSample]) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(samples.len() * N_JOINTS * 2);
    for s in samples {
        if s.joints2d.len() != N_JOINTS {
            return Err(Error::NodeCountMismatch { expected: N_JOINTS, found: s.joints2d.len() });
        }
        data.extend(s.joints2d.iter().flatten().map(|&v| S::of(v)));
    }
    Tensor::new([samples.len(), N_JOINTS, 2], data)
}

impl<S: Scalar> Batch<S> {
    pub fn new(samples: &[&PoseSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let joints: Vec<&Vec<[f64; 3]>> = samples.iter().map(|s| &s.joints3d).collect();
        Ok(Self {
            x2d: input_tensor(samples)?,
            targets: Targets {
                pose: points(&joints, N_JOINTS)?,
                mesh_mid: mesh_target(samples, |s| s.mesh_mid.as_ref())?,
                mesh_top: mesh_target(samples, |s| s.mesh_top.as_ref())?,
            },
        })
    }
}

fn squared_error<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: &Tensor<S>, mask: Option<&Tensor<S>>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let mut d = tape.sub(pred, t)?;
    if let Some(m) = mask {
        let m = tape.constant(m.clone());
        d = tape.hadamard(d, m)?;
    }
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// `λ_P Σ‖p̂ − p‖² + λ_M (Σ‖m̂_mid − m_mid‖² + Σ‖m̂_top − m_top‖²)`, summed
/// over points and averaged over the batch. Mesh terms are skipped when the
/// model has no such head or the batch has no such target.
pub fn compute_loss<S: Scalar>(tape: &mut Tape<S>, out: &ModelOutputs, targets: &Targets<S>, w: &LossWeights) -> Result<Var> {
    let batch = targets.pose.shape()[0] as f64;
    let pose = squared_error(tape, out.pose, &targets.pose, None)?;
    let mut loss = tape.scale(pose, S::of(w.lambda_p / batch))?;
    if w.lambda_m > 0.0 {
        for (pred, target) in [(out.mesh_mid, &targets.mesh_mid), (out.mesh_top, &targets.mesh_top)] {
            if let (Some(p), Some(t)) = (pred, target) {
                let e = squared_error(tape, p, &t.values, Some(&t.mask))?;
                let e = tape.scale(e, S::of(w.lambda_m / batch))?;
                loss = tape.add(loss, e)?;
            }
        }
    }
    Ok(loss)
}

/// Mirrors a sample left to right: negates x of the 2D and 3D joints and
/// swaps every lateral pair. Mesh targets have no exact lateral pairing, so
/// they are dropped.
pub fn flip_augment(sample: &PoseSample, pairs: &[(usize, usize)]) -> Result<PoseSample> {
    let n = sample.joints3d.len();
    if let Some(&(l, r)) = pairs.iter().find(|&&(l, r)| l >= n || r >= n || l == r) {
        return Err(Error::InvalidArgument(format!("invalid left/right pair ({l}, {r}) for {n} joints")));
    }
    let mut out = sample.clone();
    for (l, r) in pairs {
        out.joints2d.swap(*l, *r);
        out.joints3d.swap(*l, *r);
    }
    out.joints2d.iter_mut().for_each(|p| p[0] = -p[0]);
    out.joints3d.iter_mut().for_each(|p| p[0] = -p[0]);
    out.mesh_mid = None;
    out.mesh_top = None;
    Ok(out)
}

#[cfg(test)]
mod tests;
