use std::collections::BTreeMap;

use hgn_core::checkpoint::{Checkpoint, StoredHierarchy};
use hgn_core::data::{generate_synthetic, PoseSample, SyntheticGenConfig};
use hgn_core::graph::{build_hierarchy, build_synthetic_body_mesh};
use hgn_core::metrics::evaluate;
use hgn_core::model::{HgnConfig, Variant};
use hgn_core::training::{predict_samples, train, TrainConfig};
use hgn_core::{Hgn32, Hgn64};

#[test]
fn mesh_to_metrics() {
    let mesh = build_synthetic_body_mesh(6890, 0).unwrap();
    let h = build_hierarchy(&mesh.graph, &[96, 48], 1).unwrap();
    let ds = generate_synthetic(&SyntheticGenConfig { n_samples: 40, seed: 2, ..SyntheticGenConfig::default() }, &h).unwrap();
    assert!(ds.samples.iter().all(|s| s.mesh_mid.is_some() && s.mesh_top.is_some()));

    let mut model = Hgn64::build(&HgnConfig { channels: 8, ..HgnConfig::default() }, &h).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, val_fraction: 0.25, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let outcome = train(&mut model, &ds, &cfg, None, |r| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [0, 1, 2]);
    assert_eq!(outcome.val_indices.len(), 10);
    assert!(outcome.reports.iter().all(|r| r.val_mpjpe_mm.is_some_and(f64::is_finite)));

    let test: Vec<&PoseSample> = outcome.val_indices.iter().map(|&i| &ds.samples[i]).collect();
    let pred = predict_samples(&model, &test, 4, false).unwrap();
    let owned: Vec<PoseSample> = test.iter().map(|s| (*s).clone()).collect();
    let report = evaluate(&pred, &owned).unwrap();
    assert_eq!(report.n_samples, 10);
    assert!(report.pa_mpjpe_mm <= report.mpjpe_mm + 1e-9);
    assert!(report.mpvpe_mid_mm.is_some() && report.mpvpe_top_mm.is_some());

    let ckpt = Checkpoint {
        config: BTreeMap::new(),
        model,
        hierarchy: StoredHierarchy { source_nodes: 6890, selected: h.selected.clone() },
        optimizer: Some(outcome.optimizer),
        epochs_done: 3,
    };
    let back = Checkpoint::<f64>::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let again = predict_samples(&back.model, &test, 4, false).unwrap();
    assert_eq!(again.pose, pred.pose);
}

#[test]
fn single_precision_trains() {
    let mesh = build_synthetic_body_mesh(6890, 0).unwrap();
    let h = build_hierarchy(&mesh.graph, &[96, 48], 0).unwrap();
    let ds = generate_synthetic(&SyntheticGenConfig { n_samples: 16, seed: 3, ..SyntheticGenConfig::default() }, &h).unwrap();
    for variant in Variant::ALL {
        let mut model = Hgn32::build(&HgnConfig { channels: 8, variant, ..HgnConfig::default() }, &h).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, val_fraction: 0.0, eval_train: true, ..TrainConfig::default() };
        let outcome = train(&mut model, &ds, &cfg, None, |_| Ok(())).unwrap();
        let last = outcome.reports.last().unwrap();
        assert!(last.train_loss.is_finite() && last.train_mpjpe_mm.is_some_and(f64::is_finite), "{variant:?}");
    }
}
