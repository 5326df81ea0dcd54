use std::sync::OnceLock;

use rand::{Rng, SeedableRng};

use super::*;
use crate::graph::{build_hierarchy, build_synthetic_body_mesh};
use crate::layers::ParamRole;

fn hierarchy() -> &'static CoarseningHierarchy {
    static H: OnceLock<CoarseningHierarchy> = OnceLock::new();
    H.get_or_init(|| {
        let mesh = build_synthetic_body_mesh(6890, 0).unwrap();
        build_hierarchy(&mesh.graph, &[96, 48], 0).unwrap()
    })
}

fn count(channels: usize, kind: GConvKind, variant: Variant) -> usize {
    let cfg = HgnConfig { channels, gconv_kind: kind, variant, ..HgnConfig::default() };
    Hgn::<f64>::build(&cfg, hierarchy()).unwrap().param_count()
}

fn random_input(batch: usize, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([batch, 17, 2], |_| r.gen_range(-0.5..0.5))
}

#[test]
fn parameter_counts_fall_in_reference_bands() {
    let full128 = count(128, GConvKind::Semantic, Variant::Full);
    let full64 = count(64, GConvKind::Semantic, Variant::Full);
    let vanilla128 = count(128, GConvKind::Vanilla, Variant::Full);
    let base128 = count(128, GConvKind::Semantic, Variant::Baseline);
    assert!((884_000..=1_196_000).contains(&full128), "{full128}");
    assert!((246_500..=333_500).contains(&full64), "{full64}");
    assert!((603_500..=816_500).contains(&vanilla128), "{vanilla128}");
    assert!((365_500..=494_500).contains(&base128), "{base128}");
    assert!(base128 > full64);
    assert!(base128 < full128);
}

#[test]
fn variants_nest() {
    let full = Hgn::<f64>::build(&HgnConfig { channels: 16, ..HgnConfig::default() }, hierarchy()).unwrap();
    let cfg = HgnConfig { channels: 16, ..HgnConfig::default() };
    let no_mid = build_ablation::<f64>(&cfg, Variant::NoMidCoarsest, hierarchy()).unwrap();
    let no_top = build_ablation::<f64>(&cfg, Variant::NoTop, hierarchy()).unwrap();
    let top_names = full.subnet_param_names(Output::MeshTop);
    let top: usize = top_names.iter().map(|n| full.store.value(full.store.find(n).unwrap()).numel()).sum();
    assert!(top > 0);
    assert_eq!(full.param_count(), no_mid.param_count() + top);
    assert!(full.param_count() > no_top.param_count());

    assert_eq!(full.outputs(), vec![Output::Pose, Output::MeshMid, Output::MeshTop]);
    assert_eq!(no_top.outputs(), vec![Output::Pose, Output::MeshTop]);
    assert_eq!(no_mid.outputs(), vec![Output::Pose, Output::MeshMid]);
    let h = hierarchy();
    assert_eq!(no_top.scale_sizes(), vec![17, h.selected[0].graph.n_nodes()]);
    let p = no_top.predict(&random_input(2, 0)).unwrap();
    assert!(p.mesh_mid.is_none());
    assert_eq!(p.mesh_top.unwrap().shape(), &[2, h.selected[0].graph.n_nodes(), 3]);
}

#[test]
fn nineteen_transfers_in_full_model() {
    let cfg = HgnConfig { channels: 8, ..HgnConfig::default() };
    let m = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    let maps = m.store.params().iter().filter(|p| p.role == ParamRole::NodeMap).count();
    assert_eq!(maps, 19);
}

#[test]
fn output_shapes() {
    let cfg = HgnConfig { channels: 8, ..HgnConfig::default() };
    let m = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    let p = m.predict(&random_input(3, 1)).unwrap();
    let h = hierarchy();
    assert_eq!(p.pose.shape(), &[3, 17, 3]);
    assert_eq!(p.mesh_mid.unwrap().shape(), &[3, h.selected[1].graph.n_nodes(), 3]);
    assert_eq!(p.mesh_top.unwrap().shape(), &[3, h.selected[0].graph.n_nodes(), 3]);
    assert!(m.predict(&Tensor::zeros([3, 16, 2])).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let cfg = HgnConfig { channels: 8, seed: 42, ..HgnConfig::default() };
    let a = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    let b = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    assert_eq!(a.store, b.store);
    let c = Hgn::<f64>::build(&HgnConfig { seed: 43, ..cfg }, hierarchy()).unwrap();
    assert_ne!(a.store, c.store);
}

#[test]
fn initialization_follows_glorot_and_zero_rules() {
    let cfg = HgnConfig { channels: 16, ..HgnConfig::default() };
    let m = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    for p in m.store.params() {
        match p.role {
            ParamRole::Weight | ParamRole::NodeMap => {
                let (rows, cols) = (p.value.shape()[0], p.value.shape()[1]);
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                assert!(p.value.data().iter().all(|v| v.abs() <= bound), "{}", p.name);
            }
            ParamRole::Attention | ParamRole::Bias | ParamRole::Beta => {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name)
            }
            ParamRole::Gamma => assert!(p.value.data().iter().all(|&v| v == 1.0)),
        }
    }
}

#[test]
fn zero_heads_give_zero_pose() {
    let cfg = HgnConfig { channels: 8, ..HgnConfig::default() };
    let mut m = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    for p in m.store.params_mut() {
        if p.name.starts_with("head") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let p = m.predict(&Tensor::zeros([1, 17, 2])).unwrap();
    assert!(p.pose.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_is_pure_and_per_item() {
    let cfg = HgnConfig { channels: 8, ..HgnConfig::default() };
    let m = Hgn::<f64>::build(&cfg, hierarchy()).unwrap();
    let row = random_input(1, 5);
    let mut twice = row.data().to_vec();
    twice.extend_from_slice(row.data());
    let x = Tensor::new([2, 17, 2], twice).unwrap();
    let before = m.store.clone();
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.store, before);
    assert_eq!(a.pose.data()[..51], a.pose.data()[51..]);
}

#[test]
fn config_validation() {
    let h = hierarchy();
    let bad = |cfg: HgnConfig| Hgn::<f64>::build(&cfg, h).is_err();
    assert!(bad(HgnConfig { channels: 4, ..HgnConfig::default() }));
    assert!(bad(HgnConfig { top_scale_join_stage: 2, ..HgnConfig::default() }));
    assert!(bad(HgnConfig { blocks_per_scale: [4, 5, 2], ..HgnConfig::default() }));
    let counts = Some([17, 10, 96]);
    assert!(matches!(
        Hgn::<f64>::build(&HgnConfig { scale_node_counts: counts, ..HgnConfig::default() }, h),
        Err(Error::NodeCountMismatch { .. })
    ));
    assert_eq!("baseline".parse::<Variant>().unwrap(), Variant::Baseline);
    assert!("tiny".parse::<Variant>().is_err());
}

#[test]
fn single_precision_model_runs() {
    let cfg = HgnConfig { channels: 8, ..HgnConfig::default() };
    let m = Hgn::<f32>::build(&cfg, hierarchy()).unwrap();
    let x: Tensor<f32> = random_input(2, 3).cast();
    let p = m.predict(&x).unwrap();
    assert!(p.pose.is_finite());
}
