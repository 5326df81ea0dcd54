use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradient_check, Coords};
use crate::graph::build_skeleton_graph;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

fn two_nodes() -> ScaleGraph<f64> {
    ScaleGraph::new(&Graph::new(2, [(0, 1, 1.0)]).unwrap())
}

fn path3() -> ScaleGraph<f64> {
    ScaleGraph::new(&Graph::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap())
}

fn set(store: &mut ParamStore<f64>, id: ParamId, value: Tensor<f64>) {
    store.get_mut(id).value = value;
}

/// Runs `f` in a fresh context and returns the output value.
fn run(
    store: &ParamStore<f64>,
    mode: Mode,
    x: Tensor<f64>,
    f: impl FnOnce(&mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode, false);
    let xv = ctx.constant(x);
    let y = f(&mut ctx, xv)?;
    Ok(ctx.tape.value(y).clone())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn vanilla_single_node_identity() {
    let g = ScaleGraph::new(&Graph::new(1, []).unwrap());
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Vanilla, 2, 2, &g, true, &mut rng(0));
    set(&mut store, conv.w_self, Tensor::eye(2));
    let x = Tensor::new([1, 1, 2], vec![3.0, -4.0]).unwrap();
    let y = run(&store, Mode::Eval, x.clone(), |c, x| conv.forward(c, x, &g)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn vanilla_two_nodes_average() {
    let g = two_nodes();
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Vanilla, 1, 1, &g, true, &mut rng(0));
    set(&mut store, conv.w_self, Tensor::eye(1));
    let x = Tensor::new([1, 2, 1], vec![1.0, 0.0]).unwrap();
    let y = run(&store, Mode::Eval, x, |c, x| conv.forward(c, x, &g)).unwrap();
    assert_close(y.data(), &[0.5, 0.5], 1e-15);
}

#[test]
fn zero_weights_give_zero_output() {
    let g = path3();
    for kind in [GConvKind::Vanilla, GConvKind::Semantic] {
        let mut store = ParamStore::new();
        let conv = GConv::new(&mut store, "c", kind, 3, 4, &g, true, &mut rng(1));
        for p in store.params_mut() {
            if p.role == ParamRole::Weight {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let x = random(&[2, 3, 3], &mut rng(2));
        let y = run(&store, Mode::Eval, x, |c, x| conv.forward(c, x, &g)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn gconv_shape_errors() {
    let g = path3();
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Semantic, 3, 4, &g, true, &mut rng(1));
    let bad = random(&[2, 2, 3], &mut rng(2));
    assert!(matches!(run(&store, Mode::Eval, bad, |c, x| conv.forward(c, x, &g)), Err(Error::ShapeMismatch { .. })));
    let two = two_nodes();
    let x = random(&[2, 3, 3], &mut rng(2));
    assert!(run(&store, Mode::Eval, x, |c, x| conv.forward(c, x, &two)).is_err());
    let mut broken = conv.clone();
    broken.t = None;
    let x = random(&[2, 3, 3], &mut rng(2));
    assert!(matches!(run(&store, Mode::Eval, x, |c, x| broken.forward(c, x, &g)), Err(Error::KindMismatch { .. })));
}

#[test]
fn semantic_uniform_two_nodes() {
    let g = two_nodes();
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Semantic, 2, 2, &g, true, &mut rng(0));
    set(&mut store, conv.w_self, Tensor::eye(2));
    set(&mut store, conv.w_neigh.unwrap(), Tensor::eye(2));
    let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let y = run(&store, Mode::Eval, x, |c, x| conv.forward(c, x, &g)).unwrap();
    assert_close(y.data(), &[2.0, 4.0, 2.0, 4.0], 1e-15);
}

#[test]
fn semantic_self_loops_only_is_per_node_linear() {
    let g = ScaleGraph::new(&Graph::new(3, []).unwrap());
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Semantic, 2, 3, &g, false, &mut rng(4));
    let x = random(&[2, 3, 2], &mut rng(5));
    let y = run(&store, Mode::Eval, x.clone(), |c, x| conv.forward(c, x, &g)).unwrap();
    let w = store.value(conv.w_self);
    for r in 0..6 {
        for o in 0..3 {
            let expect: f64 = (0..2).map(|i| w.at(&[o, i]) * x.data()[r * 2 + i]).sum();
            assert!((y.data()[r * 3 + o] - expect).abs() < 1e-14);
        }
    }
}

/// Dense reference: softmax of T on the support, split into diagonal and
/// off-diagonal parts, each multiplied out by hand.
#[test]
fn semantic_matches_dense_oracle() {
    let g = path3();
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Semantic, 2, 2, &g, true, &mut rng(8));
    let mut r = rng(9);
    let t = random(&[g.support_len()], &mut r);
    set(&mut store, conv.t.unwrap(), t.clone());
    set(&mut store, conv.bias.unwrap(), Tensor::from_vec(vec![0.25, -0.5]));
    let x = random(&[1, 3, 2], &mut r);
    let y = run(&store, Mode::Eval, x.clone(), |c, x| conv.forward(c, x, &g)).unwrap();

    let support = [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)];
    let mut logits = [[f64::NEG_INFINITY; 3]; 3];
    for (k, &(i, j)) in support.iter().enumerate() {
        logits[i][j] = t.data()[k];
    }
    let ws = store.value(conv.w_self);
    let wn = store.value(conv.w_neigh.unwrap());
    for i in 0..3 {
        let z: f64 = logits[i].iter().map(|v| v.exp()).sum();
        for o in 0..2 {
            let mut acc = [0.25, -0.5][o];
            for j in 0..3 {
                let m = logits[i][j].exp() / z;
                let w = if i == j { ws } else { wn };
                acc += m * (0..2).map(|c| w.at(&[o, c]) * x.at(&[0, j, c])).sum::<f64>();
            }
            assert!((y.at(&[0, i, o]) - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn semantic_equals_vanilla_when_softmax_reproduces_adjacency() {
    // on a triangle every row of Ã is uniform and sums to one
    let graph = Graph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
    let g = ScaleGraph::new(&graph);
    let mut store = ParamStore::new();
    let van = GConv::new(&mut store, "v", GConvKind::Vanilla, 2, 2, &g, true, &mut rng(1));
    let sem = GConv::new(&mut store, "s", GConvKind::Semantic, 2, 2, &g, true, &mut rng(2));
    let w = store.value(van.w_self).clone();
    set(&mut store, sem.w_self, w.clone());
    set(&mut store, sem.w_neigh.unwrap(), w);
    let a = g.a_tilde().clone();
    let t: Vec<f64> = g.support().iter().map(|&k| a.data()[k].ln()).collect();
    set(&mut store, sem.t.unwrap(), Tensor::from_vec(t));
    let x = random(&[2, 3, 2], &mut rng(3));
    let yv = run(&store, Mode::Eval, x.clone(), |c, x| van.forward(c, x, &g)).unwrap();
    let ys = run(&store, Mode::Eval, x, |c, x| sem.forward(c, x, &g)).unwrap();
    assert_close(yv.data(), ys.data(), 1e-14);
}

#[test]
fn aggregation_rows_are_stochastic() {
    let g = ScaleGraph::new(&build_skeleton_graph());
    let mut store = ParamStore::new();
    let conv = GConv::new(&mut store, "c", GConvKind::Semantic, 1, 1, &g, false, &mut rng(0));
    set(&mut store, conv.t.unwrap(), random(&[g.support_len()], &mut rng(6)).map(|v| v * 5.0));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, false);
    let m = conv.aggregation(&mut ctx, conv.t.unwrap(), &g).unwrap();
    let m = ctx.tape.value(m).clone();
    for i in 0..17 {
        let row = &m.data()[i * 17..(i + 1) * 17];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..17 {
            if !g.mask()[i * 17 + j] {
                assert_eq!(row[j], 0.0);
            }
        }
    }
}

#[test]
fn non_local_zero_wz_is_identity() {
    let mut store = ParamStore::new();
    let nl = NonLocal::new(&mut store, "nl", 4, &mut rng(0));
    assert_eq!(nl.embed, 2);
    set(&mut store, nl.w_z, Tensor::zeros([4, 2]));
    let x = random(&[2, 5, 4], &mut rng(1));
    let y = run(&store, Mode::Eval, x.clone(), |c, x| nl.forward(c, x)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn non_local_single_node() {
    let mut store = ParamStore::new();
    let nl = NonLocal::new(&mut store, "nl", 2, &mut rng(3));
    assert_eq!(nl.embed, 1);
    let x = Tensor::new([1, 1, 2], vec![0.3, -0.7]).unwrap();
    let y = run(&store, Mode::Eval, x.clone(), |c, x| nl.forward(c, x)).unwrap();
    let (g, wz) = (store.value(nl.g), store.value(nl.w_z));
    let gx = g.at(&[0, 0]) * 0.3 + g.at(&[0, 1]) * -0.7;
    let expect = [0.3 + gx * wz.at(&[0, 0]), -0.7 + gx * wz.at(&[1, 0])];
    assert_close(y.data(), &expect, 1e-15);
}

#[test]
fn non_local_attention_rows_sum_to_one() {
    let mut store = ParamStore::new();
    let nl = NonLocal::new(&mut store, "nl", 6, &mut rng(5));
    let x = random(&[3, 7, 6], &mut rng(6));
    let a = run(&store, Mode::Eval, x, |c, x| nl.attention(c, x)).unwrap();
    for row in a.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let bad = random(&[3, 7, 5], &mut rng(6));
    assert!(run(&store, Mode::Eval, bad, |c, x| nl.forward(c, x)).is_err());
}

#[test]
fn batch_norm_train_normalizes() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    set(&mut store, bn.gamma, Tensor::from_vec(vec![2.0, 0.5, 1.0]));
    set(&mut store, bn.beta, Tensor::from_vec(vec![-1.0, 3.0, 0.0]));
    let x = random(&[4, 5, 3], &mut rng(1)).map(|v| v * 7.0 + 2.0);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let xv = ctx.constant(x.clone());
    let y = bn.forward(&mut ctx, xv).unwrap();
    let y = ctx.tape.value(y).clone();
    let stats = ctx.take_stats();
    for c in 0..3 {
        let vals: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
        assert!((mean - [-1.0, 3.0, 0.0][c]).abs() < 1e-6);
        // eps slightly shrinks the spread
        assert!((std - [2.0, 0.5, 1.0][c]).abs() < 1e-5 * [2.0, 0.5, 1.0][c] * 10.0);
    }

    // running statistics: momentum 0.1 toward the batch mean and unbiased variance
    assert_eq!(stats.len(), 1);
    store.apply_batch_stats(&stats);
    let rs = store.buffer(bn.running);
    for c in 0..3 {
        let vals: Vec<f64> = x.data().iter().skip(c).step_by(3).copied().collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0;
        assert!((rs.mean[c] - 0.1 * mean).abs() < 1e-12);
        assert!((rs.var[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_centers_with_running_stats() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    store.buffers_mut()[0].mean = vec![4.0, 4.0];
    let x = Tensor::full([2, 3, 2], 4.0);
    let y = run(&store, Mode::Eval, x, |c, x| bn.forward(c, x)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_needs_two_rows() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    let x = Tensor::full([1, 1, 2], 1.0);
    assert!(matches!(run(&store, Mode::Train, x.clone(), |c, x| bn.forward(c, x)), Err(Error::InsufficientSamples(1))));
    assert!(run(&store, Mode::Eval, x, |c, x| bn.forward(c, x)).is_ok());
}

#[test]
fn residual_block_zero_path_is_identity() {
    let g = path3();
    let mut store = ParamStore::new();
    let block = ResidualBlock::new(&mut store, "b", GConvKind::Semantic, 4, &g, &mut rng(0));
    for id in [block.conv1.w_self, block.conv1.w_neigh.unwrap(), block.conv2.w_self, block.conv2.w_neigh.unwrap()] {
        set(&mut store, id, Tensor::zeros([4, 4]));
    }
    set(&mut store, block.non_local.w_z, Tensor::zeros([4, 2]));
    let x = random(&[2, 3, 4], &mut rng(1));
    for mode in [Mode::Train, Mode::Eval] {
        let y = run(&store, mode, x.clone(), |c, x| block.forward(c, x, &g)).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn residual_block_keeps_shape() {
    let g = ScaleGraph::new(&build_skeleton_graph());
    for width in [64, 128] {
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "b", GConvKind::Semantic, width, &g, &mut rng(0));
        let x = random(&[2, 17, width], &mut rng(1));
        let y = run(&store, Mode::Train, x, |c, x| block.forward(c, x, &g)).unwrap();
        assert_eq!(y.shape(), &[2, 17, width]);
    }
}

#[test]
fn residual_block_conv1_weight_moves_output() {
    let g = path3();
    let mut store = ParamStore::new();
    let block = ResidualBlock::new(&mut store, "b", GConvKind::Vanilla, 4, &g, &mut rng(3));
    let x = random(&[2, 3, 4], &mut rng(4));
    let total = |s: &ParamStore<f64>| {
        let y = run(s, Mode::Train, x.clone(), |c, x| block.forward(c, x, &g)).unwrap();
        y.data().iter().enumerate().map(|(i, v)| v * (1.0 + (i % 5) as f64)).sum::<f64>()
    };
    let mut plus = store.clone();
    plus.get_mut(block.conv1.w_self).value.data_mut()[5] += 1e-5;
    let mut minus = store.clone();
    minus.get_mut(block.conv1.w_self).value.data_mut()[5] -= 1e-5;
    let probe = (total(&plus) - total(&minus)) / 2e-5;
    assert!(probe.abs() > 1e-6, "{probe}");
}

#[test]
fn transfer_identity_and_mean() {
    let mut store = ParamStore::new();
    let same = ScaleTransfer::new(&mut store, "id", 3, 3, Some(2), &mut rng(0));
    set(&mut store, same.node_map, Tensor::eye(3));
    set(&mut store, same.channel_map.unwrap(), Tensor::eye(2));
    let x = random(&[2, 3, 2], &mut rng(1));
    assert_eq!(run(&store, Mode::Eval, x.clone(), |c, x| same.forward(c, x)).unwrap(), x);

    let down = ScaleTransfer::new(&mut store, "down", 2, 1, Some(2), &mut rng(0));
    set(&mut store, down.node_map, Tensor::new([1, 2], vec![0.5, 0.5]).unwrap());
    set(&mut store, down.channel_map.unwrap(), Tensor::eye(2));
    let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let y = run(&store, Mode::Eval, x, |c, x| down.forward(c, x)).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0]);
    let bad = random(&[1, 3, 2], &mut rng(1));
    assert!(run(&store, Mode::Eval, bad, |c, x| down.forward(c, x)).is_err());
}

#[test]
fn transfer_round_trip_is_linear() {
    let mut store = ParamStore::new();
    let up = ScaleTransfer::new(&mut store, "up", 3, 5, None, &mut rng(0));
    let down = ScaleTransfer::new(&mut store, "down", 5, 3, None, &mut rng(1));
    let f = |x: Tensor<f64>| run(&store, Mode::Eval, x, |c, x| {
        let y = up.forward(c, x)?;
        down.forward(c, y)
    })
    .unwrap();
    let a = random(&[1, 3, 2], &mut rng(2));
    let b = random(&[1, 3, 2], &mut rng(3));
    let sum = Tensor::from_fn([1, 3, 2], |i| 2.0 * a.data()[i] - 3.0 * b.data()[i]);
    let expect: Vec<f64> = f(a).data().iter().zip(f(b).data()).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    assert_close(f(sum).data(), &expect, 1e-14);
}

fn fuse_values(store: &ParamStore<f64>, fusion: &Fusion, xs: &[(usize, Tensor<f64>)]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, false);
    let vars: Vec<(usize, Var)> = xs.iter().map(|(k, x)| (*k, ctx.constant(x.clone()))).collect();
    let out = fusion.forward(&mut ctx, &vars)?;
    Ok(out.iter().map(|&(_, v)| ctx.tape.value(v).clone()).collect())
}

#[test]
fn fuse_single_scale_is_identity() {
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "f", &[(0, 4)], None, &mut rng(0));
    assert!(fusion.transfers.is_empty());
    let x = random(&[2, 4, 3], &mut rng(1));
    assert_eq!(fuse_values(&store, &fusion, &[(0, x.clone())]).unwrap(), vec![x]);
}

#[test]
fn fuse_zero_transfers_is_identity() {
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "f", &[(0, 4), (1, 2)], None, &mut rng(0));
    for p in store.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let xs = vec![(0, random(&[2, 4, 3], &mut rng(1))), (1, random(&[2, 2, 3], &mut rng(2)))];
    let out = fuse_values(&store, &fusion, &xs).unwrap();
    assert_eq!(out[0], xs[0].1);
    assert_eq!(out[1], xs[1].1);
}

#[test]
fn fuse_three_scales_keeps_shapes() {
    let mut store = ParamStore::new();
    let scales = [(0, 5), (1, 3), (2, 7)];
    let fusion = Fusion::new(&mut store, "f", &scales, Some(4), &mut rng(0));
    assert_eq!(fusion.transfers.len(), 6);
    let xs: Vec<(usize, Tensor<f64>)> = scales.iter().map(|&(k, n)| (k, random(&[2, n, 4], &mut rng(k as u64)))).collect();
    let out = fuse_values(&store, &fusion, &xs).unwrap();
    for (o, (_, x)) in out.iter().zip(&xs) {
        assert_eq!(o.shape(), x.shape());
    }
    let mut partial = fusion.clone();
    partial.transfers.remove(&(2, 0));
    assert!(matches!(fuse_values(&store, &partial, &xs), Err(Error::MissingTransfer { from: 2, to: 0 })));
}

fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng(seed)));
    let p = tape.hadamard(v, w)?;
    tape.sum(p)
}

/// Central-difference check of a layer with respect to its input and every
/// parameter in `store`, at five seeded points.
fn check_layer(
    name: &str,
    x_shape: &[usize],
    mode: Mode,
    build: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>>,
) {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let f = build(&mut store, &mut r);
        // move every parameter away from its structured initial value
        for p in store.params_mut() {
            let noise = random(p.value.shape(), &mut r);
            p.value = Tensor::from_fn(p.value.shape().to_vec(), |i| p.value.data()[i] + 0.5 * noise.data()[i]);
        }
        let mut point = vec![random(x_shape, &mut r)];
        point.extend(store.params().iter().map(|p| p.value.clone()));
        let report = gradient_check(
            |tape, vars| {
                let mut ctx = Ctx::with_vars(tape, &store, &vars[1..], mode)?;
                let y = f(&mut ctx, vars[0])?;
                weighted_sum(ctx.tape, y, 7 + seed)
            },
            &point,
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn layers_pass_gradient_check() {
    let skel = ScaleGraph::<f64>::new(&build_skeleton_graph());
    for kind in [GConvKind::Vanilla, GConvKind::Semantic] {
        let g = skel.clone();
        check_layer(kind.as_str(), &[2, 17, 3], Mode::Train, move |s, r| {
            let conv = GConv::new(s, "c", kind, 3, 4, &g, true, r);
            let g = g.clone();
            Box::new(move |c, x| conv.forward(c, x, &g))
        });
    }
    check_layer("non_local", &[2, 6, 4], Mode::Train, |s, r| {
        let nl = NonLocal::new(s, "nl", 4, r);
        Box::new(move |c, x| nl.forward(c, x))
    });
    for mode in [Mode::Train, Mode::Eval] {
        check_layer("batch_norm", &[2, 5, 3], mode, |s, _| {
            let bn = BatchNorm::new(s, "bn", 3);
            Box::new(move |c, x| bn.forward(c, x))
        });
    }
    let g = path3();
    check_layer("residual_block", &[2, 3, 4], Mode::Train, move |s, r| {
        let block = ResidualBlock::new(s, "b", GConvKind::Semantic, 4, &g, r);
        let g = g.clone();
        Box::new(move |c, x| block.forward(c, x, &g))
    });
    check_layer("scale_transfer", &[2, 5, 3], Mode::Train, |s, r| {
        let t = ScaleTransfer::new(s, "t", 5, 3, Some(3), r);
        Box::new(move |c, x| t.forward(c, x))
    });
    check_layer("fuse", &[2, 5, 3], Mode::Train, |s, r| {
        let fusion = Fusion::new(s, "f", &[(0, 5), (1, 2)], None, r);
        Box::new(move |c, x| {
            // a two-node second scale derived from the input
            let sel = c.constant(random(&[2, 5], &mut rng(11)));
            let two = c.tape.matmul(sel, x)?;
            let ys = fusion.forward(c, &[(0, x), (1, two)])?;
            let a = weighted_sum(c.tape, ys[0].1, 3)?;
            let b = weighted_sum(c.tape, ys[1].1, 4)?;
            c.tape.add(a, b)
        })
    });
}
