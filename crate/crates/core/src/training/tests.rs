use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradient_check, Coords};
use crate::data::{generate_synthetic, Dataset, SyntheticGenConfig};
use crate::graph::skeleton::LEFT_RIGHT_PAIRS;
use crate::graph::{build_hierarchy, build_synthetic_body_mesh, CoarseningHierarchy};
use crate::layers::{Ctx, Mode, ParamRole, ParamStore};
use crate::metrics::mpjpe;
use crate::model::{Hgn, HgnConfig};

fn hierarchy() -> &'static CoarseningHierarchy {
    static H: OnceLock<CoarseningHierarchy> = OnceLock::new();
    H.get_or_init(|| {
        let mesh = build_synthetic_body_mesh(6890, 0).unwrap();
        build_hierarchy(&mesh.graph, &[96, 48], 0).unwrap()
    })
}

fn dataset() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        let cfg = SyntheticGenConfig { n_samples: 64, seed: 11, ..SyntheticGenConfig::default() };
        generate_synthetic(&cfg, hierarchy()).unwrap()
    })
}

fn model(channels: usize, seed: u64) -> Hgn<f64> {
    Hgn::build(&HgnConfig { channels, seed, ..HgnConfig::default() }, hierarchy()).unwrap()
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.001);
    assert!((lr_at(19, &cfg) - 0.001).abs() < 1e-18);
    assert!((lr_at(20, &cfg) - 0.0009).abs() < 1e-15);
    assert!((lr_at(99, &cfg) - 0.0006561).abs() < 1e-15);
    let exp = TrainConfig { lr_schedule: LrSchedule::Exponential, ..cfg.clone() };
    assert!((lr_at(10, &exp) - 0.001 * 0.9f64.sqrt()).abs() < 1e-15);
    for e in 0..200 {
        assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        assert!(lr_at(e + 1, &exp) <= lr_at(e, &exp));
    }
}

fn pose_targets(data: Vec<f64>) -> Targets<f64> {
    Targets { pose: Tensor::new([1, 17, 3], data).unwrap(), mesh_mid: None, mesh_top: None }
}

#[test]
fn loss_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let gt: Vec<f64> = (0..51).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let exact = tape.constant(Tensor::new([1, 17, 3], gt.clone()).unwrap());
    let out = crate::model::ModelOutputs { pose: exact, mesh_mid: None, mesh_top: None };
    let l = compute_loss(&mut tape, &out, &pose_targets(gt.clone()), &LossWeights::default()).unwrap();
    assert_eq!(tape.value(l).item(), Some(0.0));

    let mut off = gt.clone();
    off[3 * 5] += 1.0;
    let p = tape.constant(Tensor::new([1, 17, 3], off).unwrap());
    let out = crate::model::ModelOutputs { pose: p, mesh_mid: None, mesh_top: None };
    let w = LossWeights { lambda_p: 1.0, lambda_m: 0.0 };
    let l = compute_loss(&mut tape, &out, &pose_targets(gt), &w).unwrap();
    assert!((tape.value(l).item().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn mesh_terms_respect_weights_and_masks() {
    let samples: Vec<&PoseSample> = dataset().samples.iter().take(3).collect();
    let m = model(8, 0);
    let mut b = Batch::<f64>::new(&samples).unwrap();
    let run = |b: &Batch<f64>, w: LossWeights| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &m.store, Mode::Eval, false);
        let x = ctx.constant(b.x2d.clone());
        let out = m.forward(&mut ctx, x).unwrap();
        let l = compute_loss(&mut tape, &out, &b.targets, &w).unwrap();
        tape.value(l).item().unwrap()
    };
    let pose_only = run(&b, LossWeights { lambda_p: 1.0, lambda_m: 0.0 });
    let mesh_only = run(&b, LossWeights { lambda_p: 0.0, lambda_m: 1.0 });
    let both = run(&b, LossWeights { lambda_p: 1.0, lambda_m: 0.01 });
    assert!(mesh_only > 0.0);
    assert!((both - (pose_only + 0.01 * mesh_only)).abs() < 1e-12);
    // Dropping every mesh target leaves only the pose term.
    for t in [&mut b.targets.mesh_mid, &mut b.targets.mesh_top] {
        let t = t.as_mut().unwrap();
        t.mask = Tensor::zeros(t.mask.shape());
    }
    assert!((run(&b, LossWeights::default()) - pose_only).abs() < 1e-15);
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", ParamRole::Weight, Tensor::new([1, 1], vec![0.5]).unwrap());
    let mut st = AdamState::new(&store, AdamHyper::default());
    adam_step(&mut st, &mut store, &[Some(Tensor::new([1, 1], vec![1.0]).unwrap())], 1e-3).unwrap();
    // m̂ = v̂ = 1 at the first step, so the update is lr / (1 + eps).
    assert!((store.params()[0].value.data()[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    let (m, v) = (st.m[0].data()[0], st.v[0].data()[0]);
    let before = store.params()[0].value.clone();
    adam_step(&mut st, &mut store, &[Some(Tensor::zeros([1, 1]))], 1e-3).unwrap();
    assert!((st.m[0].data()[0] - 0.9 * m).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 0.999 * v).abs() < 1e-15);
    assert_ne!(store.params()[0].value, before, "momentum keeps moving the parameter");

    let mut fresh = ParamStore::<f64>::new();
    fresh.add("b", ParamRole::Bias, Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let mut st = AdamState::new(&fresh, AdamHyper::default());
    adam_step(&mut st, &mut fresh, &[Some(Tensor::zeros([2]))], 1e-3).unwrap();
    assert_eq!(fresh.params()[0].value.data(), &[1.0, 2.0]);

    let bad = Tensor::new([2], vec![1.0, f64::NAN]).unwrap();
    match adam_step(&mut st, &mut fresh, &[Some(bad)], 1e-3) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
        other => panic!("{other:?}"),
    }
    assert_eq!(st.step, 1, "aborted step leaves the state alone");
}

#[test]
fn adam_descends_a_convex_quadratic() {
    // f(w) = Σ a_i (w_i − c_i)², curvature 2a_i ≤ 8.
    let a = [0.5, 1.0, 4.0];
    let c = [1.0, -2.0, 0.5];
    let f = |w: &[f64]| (0..3).map(|i| a[i] * (w[i] - c[i]).powi(2)).sum::<f64>();
    let mut store = ParamStore::<f64>::new();
    store.add("w", ParamRole::Bias, Tensor::new([3], vec![3.0, 3.0, 3.0]).unwrap());
    let mut st = AdamState::new(&store, AdamHyper::default());
    let mut prev = f(store.params()[0].value.data());
    for _ in 0..200 {
        let w = store.params()[0].value.data().to_vec();
        let g = Tensor::from_fn([3], |i| 2.0 * a[i] * (w[i] - c[i]));
        adam_step(&mut st, &mut store, &[Some(g)], 0.01).unwrap();
        let now = f(store.params()[0].value.data());
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut m = model(8, 3);
        let samples: Vec<&PoseSample> = dataset().samples.iter().take(4).collect();
        let b = Batch::new(&samples).unwrap();
        let mut st = AdamState::new(&m.store, AdamHyper::default());
        let all = vec![true; m.store.len()];
        for _ in 0..2 {
            train_step(&mut m, &b, &mut st, 1e-3, &TrainConfig::default(), &all).unwrap();
        }
        (m.store, st)
    };
    assert_eq!(run(), run());
}

#[test]
fn max_norm_examples() {
    let mut t = Tensor::new([2, 2], vec![3.0, 4.0, 0.3, 0.4]).unwrap();
    clip_rows(&mut t, 1.0);
    assert!((t.data()[0] - 0.6f64).abs() < 1e-15 && (t.data()[1] - 0.8f64).abs() < 1e-15);
    assert_eq!(&t.data()[2..], &[0.3, 0.4]);
    let once = t.clone();
    clip_rows(&mut t, 1.0);
    assert_eq!(t, once);

    let mut store = ParamStore::<f64>::new();
    store.add("w", ParamRole::Weight, Tensor::new([1, 2], vec![3.0, 4.0]).unwrap());
    store.add("b", ParamRole::Bias, Tensor::new([2], vec![3.0, 4.0]).unwrap());
    store.add("g", ParamRole::Gamma, Tensor::new([2], vec![3.0, 4.0]).unwrap());
    store.add("t", ParamRole::Attention, Tensor::new([2], vec![30.0, 40.0]).unwrap());
    max_norm_clip(&mut store, 1.0, None).unwrap();
    assert!((store.params()[0].value.data()[0] - 0.6).abs() < 1e-15);
    for p in &store.params()[1..] {
        assert!(p.value.data()[0] >= 3.0);
    }
    assert!(max_norm_clip(&mut store, 0.0, None).is_err());
}

fn sample_without_mesh() -> PoseSample {
    PoseSample { mesh_mid: None, mesh_top: None, ..dataset().samples[0].clone() }
}

#[test]
fn flip_examples() {
    let s = sample_without_mesh();
    let f = flip_augment(&s, &LEFT_RIGHT_PAIRS).unwrap();
    assert_eq!(flip_augment(&f, &LEFT_RIGHT_PAIRS).unwrap(), s);
    assert!(flip_augment(&dataset().samples[0], &LEFT_RIGHT_PAIRS).unwrap().mesh_top.is_none());

    let mut w = s.clone();
    w.joints3d[13] = [300.0, -100.0, 20.0];
    w.joints2d[13] = [0.3, -0.1];
    let f = flip_augment(&w, &LEFT_RIGHT_PAIRS).unwrap();
    assert_eq!(f.joints3d[16], [-300.0, -100.0, 20.0]);
    assert_eq!(f.joints2d[16], [-0.3, -0.1]);
    assert!(flip_augment(&s, &[(4, 17)]).is_err());
    assert!(flip_augment(&s, &[(4, 4)]).is_err());
}

#[test]
fn flip_of_symmetric_pose_relabels_only() {
    let rest = crate::graph::skeleton::rest_pose(&crate::graph::skeleton::DEFAULT_BONE_LENGTHS_MM);
    let s = PoseSample { joints3d: rest.to_vec(), joints2d: rest.iter().map(|p| [p[0] / 5000.0, p[1] / 5000.0]).collect(), ..sample_without_mesh() };
    let f = flip_augment(&s, &LEFT_RIGHT_PAIRS).unwrap();
    for (a, b) in f.joints3d.iter().zip(&s.joints3d) {
        assert!(crate::geom::dist(*a, *b) < 1e-12);
    }
}

#[test]
fn batch_reports_mesh_presence() {
    let flipped = flip_augment(&dataset().samples[1], &LEFT_RIGHT_PAIRS).unwrap();
    let samples = vec![&dataset().samples[0], &flipped];
    let b = Batch::<f64>::new(&samples).unwrap();
    let mask = &b.targets.mesh_top.as_ref().unwrap().mask;
    let n = mask.numel() / 2;
    assert!(mask.data()[..n].iter().all(|&v| v == 1.0));
    assert!(mask.data()[n..].iter().all(|&v| v == 0.0));
    assert!((b.targets.pose.data()[3] - dataset().samples[0].joints3d[1][0] / 1000.0).abs() < 1e-15);
}

#[test]
fn full_objective_gradient_check() {
    let mut m = model(8, 5);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for p in m.store.params_mut().iter_mut().filter(|p| !p.role.is_matrix_weight()) {
        p.value = Tensor::from_fn(p.value.shape().to_vec(), |i| p.value.data()[i] + r.gen_range(-0.2..0.2));
    }
    let samples: Vec<&PoseSample> = dataset().samples.iter().take(2).collect();
    let b = Batch::<f64>::new(&samples).unwrap();
    let w = LossWeights { lambda_p: 1.0, lambda_m: 0.01 };
    let mut point = vec![b.x2d.clone()];
    point.extend(m.store.params().iter().map(|p| p.value.clone()));
    let report = gradient_check(
        |tape, vars| {
            let mut ctx = Ctx::with_vars(tape, &m.store, &vars[1..], Mode::Train)?;
            let out = m.forward(&mut ctx, vars[0])?;
            compute_loss(ctx.tape, &out, &b.targets, &w)
        },
        &point,
        1e-5,
        Coords::Sample { per_input: 3, seed: 1 },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert!(report.checked > 300);
}

#[test]
fn every_parameter_receives_gradient() {
    let m = model(8, 6);
    let samples: Vec<&PoseSample> = dataset().samples.iter().take(4).collect();
    let b = Batch::<f64>::new(&samples).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &m.store, Mode::Train, true);
    let x = ctx.constant(b.x2d.clone());
    let out = m.forward(&mut ctx, x).unwrap();
    let bound: Vec<_> = ctx.bound().collect();
    let l = compute_loss(ctx.tape, &out, &b.targets, &LossWeights::default()).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(bound.len(), m.store.len());
    for (id, v) in bound {
        let grad = g.get(v).unwrap_or_else(|| panic!("{} has no gradient", m.store.get(id).name));
        assert!(grad.data().iter().any(|&x| x != 0.0), "{} is dead", m.store.get(id).name);
    }
}

fn overfit_cfg(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size, val_fraction: 0.0, eval_train: true, ..TrainConfig::default() }
}

#[test]
fn one_epoch_one_step() {
    let mut m = model(8, 0);
    let mut lines = 0;
    let out = train(&mut m, dataset(), &overfit_cfg(1, 64), None, |_| {
        lines += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(out.optimizer.step, 1);
    assert_eq!(lines, 1);
    assert_eq!(out.reports[0].val_mpjpe_mm, None);
    assert_eq!(out.reports[0].wall_ms, None);
}

#[test]
fn training_is_reproducible_and_descends() {
    let cfg = TrainConfig { flip_augment: true, ..overfit_cfg(6, 16) };
    let run = || {
        let mut m = model(16, 2);
        let out = train(&mut m, dataset(), &cfg, None, |_| Ok(())).unwrap();
        (m.store, out.reports)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra[5].train_loss < ra[0].train_loss, "{ra:?}");
}

#[test]
fn frozen_training_updates_only_listed_parameters() {
    let mut m = model(8, 1);
    let before = m.store.clone();
    let cfg = TrainConfig { trainable_prefixes: vec!["head1.".into(), "head2.".into()], ..overfit_cfg(1, 32) };
    train(&mut m, dataset(), &cfg, None, |_| Ok(())).unwrap();
    for (p, q) in m.store.params().iter().zip(before.params()) {
        let is_head = p.name.starts_with("head1.") || p.name.starts_with("head2.");
        assert_eq!(p.value != q.value, is_head, "{}", p.name);
    }
    assert_eq!(m.store.buffers(), before.buffers());
    let cfg = TrainConfig { trainable_prefixes: vec!["nothing".into()], ..overfit_cfg(1, 32) };
    assert!(train(&mut m, dataset(), &cfg, None, |_| Ok(())).is_err());
}

#[test]
fn non_finite_loss_reports_context() {
    let mut m = model(8, 0);
    let mut ds = dataset().clone();
    ds.samples[0].joints3d[3][0] = 1e300;
    ds.samples.truncate(8);
    let err = train(&mut m, &ds, &overfit_cfg(1, 4), None, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }), "{err}");
}

#[test]
fn flip_averaging_is_symmetric_at_zero_heads() {
    let mut m = model(8, 0);
    for p in m.store.params_mut() {
        if p.name.starts_with("head") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let samples: Vec<&PoseSample> = dataset().samples.iter().take(4).collect();
    let a = predict_samples(&m, &samples, 4, false).unwrap();
    let b = predict_samples(&m, &samples, 4, true).unwrap();
    for (p, q) in a.pose.iter().flatten().zip(b.pose.iter().flatten()) {
        assert!(crate::geom::dist(*p, *q) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clipping_shrinks_and_keeps_direction(row in prop::collection::vec(-5.0f64..5.0, 1..8), th in 0.1f64..3.0) {
        let mut t = Tensor::new([1, row.len()], row.clone()).unwrap();
        clip_rows(&mut t, th);
        let n0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n1 <= n0 + 1e-12);
        prop_assert!(n1 <= th.max(n0) + 1e-12);
        for (a, b) in row.iter().zip(t.data()) {
            prop_assert!((a * n1 - b * n0).abs() < 1e-9);
        }
    }

    #[test]
    fn flip_preserves_mpjpe(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gt = sample_without_mesh();
        let mut pred = gt.clone();
        pred.joints3d.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v += r.gen_range(-50.0..50.0)));
        let a = mpjpe(&[pred.joints3d.clone()], &[gt.joints3d.clone()]).unwrap();
        let fp = flip_augment(&pred, &LEFT_RIGHT_PAIRS).unwrap();
        let fg = flip_augment(&gt, &LEFT_RIGHT_PAIRS).unwrap();
        let b = mpjpe(&[fp.joints3d], &[fg.joints3d]).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
