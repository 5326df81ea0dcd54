use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, compute_loss, flip_augment, input_tensor, lr_at, max_norm_clip, AdamHyper, AdamState, Batch, TrainConfig,
    MM_PER_UNIT,
};
use crate::autodiff::Tape;
use crate::data::{root_center, Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::graph::skeleton::{flip_permutation, LEFT_RIGHT_PAIRS};
use crate::layers::{Ctx, Mode};
use crate::metrics::{mpjpe, Predictions};
use crate::model::Hgn;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss, metres squared.
    pub train_loss: f64,
    pub train_mpjpe_mm: Option<f64>,
    pub val_mpjpe_mm: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub reports: Vec<EpochReport>,
    pub optimizer: AdamState<S>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

fn trainable_mask<S: Scalar>(model: &Hgn<S>, prefixes: &[String]) -> Vec<bool> {
    model
        .store
        .params()
        .iter()
        .map(|p| prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())))
        .collect()
}

/// Forward, loss, backward, Adam, batch-norm statistics and max-norm for a
/// single batch. Returns the batch loss.
pub fn train_step<S: Scalar>(
    model: &mut Hgn<S>,
    batch: &Batch<S>,
    opt: &mut AdamState<S>,
    lr: f64,
    cfg: &TrainConfig,
    trainable: &[bool],
) -> Result<f64> {
    let frozen = trainable.iter().any(|t| !t);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, if frozen { Mode::Eval } else { Mode::Train }, true);
    let x = ctx.constant(batch.x2d.clone());
    let out = model.forward(&mut ctx, x)?;
    let bound: Vec<_> = ctx.bound().collect();
    let stats = ctx.take_stats();
    let loss = compute_loss(ctx.tape, &out, &batch.targets, &cfg.loss)?;
    let value = tape.value(loss).item().map(|v| v.as_f64()).unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    let mut per_param: Vec<Option<Tensor<S>>> = vec![None; model.store.len()];
    for (id, var) in bound {
        if trainable[id.index()] {
            per_param[id.index()] = Some(grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape())));
        }
    }
    adam_step(opt, &mut model.store, &per_param, lr)?;
    model.store.apply_batch_stats(&stats);
    max_norm_clip(&mut model.store, cfg.max_norm_threshold, Some(trainable))?;
    Ok(value)
}

fn to_points<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<[f64; 3]>> {
    let (b, n) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    (0..b)
        .map(|i| (0..n).map(|j| std::array::from_fn(|k| d[(i * n + j) * 3 + k].as_f64() * MM_PER_UNIT)).collect())
        .collect()
}

/// Eval-mode predictions in millimetres, poses pelvis-centred. With
/// `flip_average` the pose is averaged with the unflipped prediction of the
/// mirrored input; mesh outputs come from the original input only.
pub fn predict_samples<S: Scalar>(
    model: &Hgn<S>,
    samples: &[&PoseSample],
    batch_size: usize,
    flip_average: bool,
) -> Result<Predictions> {
    let mut out = Predictions::default();
    let perm = flip_permutation();
    for chunk in samples.chunks(batch_size.max(1)) {
        let p = model.predict(&input_tensor(chunk)?)?;
        let mut pose = to_points(&p.pose);
        if flip_average {
            let flipped = chunk.iter().map(|s| flip_augment(s, &LEFT_RIGHT_PAIRS)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PoseSample> = flipped.iter().collect();
            let back = to_points(&model.predict(&input_tensor(&refs)?)?.pose);
            for (a, b) in pose.iter_mut().zip(&back) {
                for (j, pj) in a.iter_mut().enumerate() {
                    let q = b[perm[j]];
                    *pj = [(pj[0] - q[0]) / 2.0, (pj[1] + q[1]) / 2.0, (pj[2] + q[2]) / 2.0];
                }
            }
        }
        out.pose.extend(pose.iter().map(|p| root_center(p)));
        if let Some(m) = &p.mesh_mid {
            out.mesh_mid.get_or_insert_with(Vec::new).extend(to_points(m));
        }
        if let Some(m) = &p.mesh_top {
            out.mesh_top.get_or_insert_with(Vec::new).extend(to_points(m));
        }
    }
    Ok(out)
}

fn eval_mpjpe<S: Scalar>(model: &Hgn<S>, samples: &[&PoseSample], batch_size: usize) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let pred = predict_samples(model, samples, batch_size, false)?;
    let gt: Vec<Vec<[f64; 3]>> = samples.iter().map(|s| s.joints3d.clone()).collect();
    mpjpe(&pred.pose, &gt).map(Some)
}

/// Runs the epoch loop. `on_epoch` sees each report as soon as it exists.
/// `resume` continues from an optimizer state (e.g. from a checkpoint).
pub fn train<S: Scalar>(
    model: &mut Hgn<S>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    resume: Option<AdamState<S>>,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let (train_idx, val_idx) = dataset.split(cfg.val_fraction, cfg.split_seed);
    let train_set: Vec<&PoseSample> = train_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let val_set: Vec<&PoseSample> = val_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let trainable = trainable_mask(model, &cfg.trainable_prefixes);
    if !trainable.iter().any(|&t| t) {
        return Err(Error::Config("no parameter matches the trainable prefixes".into()));
    }
    let mut opt = resume.unwrap_or_else(|| AdamState::new(&model.store, AdamHyper { base_lr: cfg.base_lr, ..AdamHyper::default() }));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut flipped = Vec::new();
            let mut picked = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if cfg.flip_augment && rng.gen_bool(0.5) {
                    flipped.push((picked.len(), flip_augment(train_set[i], &LEFT_RIGHT_PAIRS)?));
                }
                picked.push(train_set[i]);
            }
            for (slot, s) in &flipped {
                picked[*slot] = s;
            }
            let batch = Batch::<S>::new(&picked)?;
            let loss = train_step(model, &batch, &mut opt, lr, cfg, &trainable)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss;
            n_batches += 1;
        }
        let report = EpochReport {
            epoch,
            lr,
            train_loss: loss_sum / n_batches.max(1) as f64,
            train_mpjpe_mm: if cfg.eval_train { eval_mpjpe(model, &train_set, cfg.batch_size.max(64))? } else { None },
            val_mpjpe_mm: eval_mpjpe(model, &val_set, cfg.batch_size.max(64))?,
            wall_ms: cfg.timing.then(|| start.elapsed().as_millis() as u64),
        };
        on_epoch(&report)?;
        reports.push(report);
    }
    Ok(TrainOutcome { reports, optimizer: opt, train_indices: train_idx, val_indices: val_idx })
}
