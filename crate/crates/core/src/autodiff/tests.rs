use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero so ReLU kinks stay out of reach of a
/// 1e-5 step.
fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

#[test]
fn matmul_identity_returns_operand() {
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let m = t(&[3, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, -1.0, 4.0, 2.5]);
    let mv = tape.constant(m.clone());
    let out = tape.forward_primitive(Primitive::MatMul, &[i3, mv]).unwrap();
    assert_eq!(tape.value(out), &m);
}

#[test]
fn relu_and_hadamard_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let a = tape.constant(t(&[2], &[2.0, 3.0]));
    let b = tape.constant(t(&[2], &[4.0, 5.0]));
    let h = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(h).data(), &[8.0, 15.0]);
}

#[test]
fn shape_mismatch_names_operation_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = tape.constant(Tensor::zeros([3, 2]));
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
}

#[test]
fn unknown_kind_is_rejected() {
    assert!(matches!("conv3d".parse::<Primitive>(), Err(Error::UnknownOp(_))));
    assert_eq!("scale:0.5".parse::<Primitive>().unwrap(), Primitive::Scale(0.5));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[0.3, -1.0, 5.0]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn dead_relu_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[-5.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_requires_scalar_output() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.square(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput(s)) if s == vec![2]));
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constants_never_accumulate_or_record() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let x = tape.param(t(&[2], &[3.0, 4.0]));
    let cc = tape.square(c).unwrap();
    assert_eq!(tape.records(), 0);
    let p = tape.hadamard(cc, x).unwrap();
    let s = tape.sum(p).unwrap();
    assert_eq!(tape.records(), 2);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 4.0]);
}

#[test]
fn foreign_variables_are_rejected() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.param(Tensor::zeros([1]));
    assert!(matches!(b.relu(x), Err(Error::ForeignVariable { .. })));
}

#[test]
fn gradient_check_quadratic_and_linear() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let quad = gradient_check(
        |tp, v| {
            let s = tp.square(v[0])?;
            tp.sum(s)
        },
        &[x.clone()],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(quad.max_rel_error < 1e-6, "{quad:?}");
    let lin = gradient_check(|tp, v| tp.sum(v[0]), &[x], 1e-5, Coords::All).unwrap();
    assert!(lin.max_rel_error < 1e-10, "{lin:?}");
    assert!(gradient_check(|tp, v| tp.sum(v[0]), &[t(&[1], &[0.0])], 0.0, Coords::All).is_err());
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// every output coordinate contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> crate::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.hadamard(v, w)?;
    tape.sum(p)
}

fn check_primitive(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let point: Vec<Tensor> = shapes.iter().map(|s| random_off_kink(&mut rng, s)).collect();
        let report = gradient_check(
            |tp, v| {
                let y = f(tp, v)?;
                weighted_sum(tp, y, 77)
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
fn every_primitive_passes_gradient_check() {
    check_primitive("matmul plain", &[&[3, 4], &[4, 2]], |tp, v| tp.matmul(v[0], v[1]));
    check_primitive("matmul batched lhs", &[&[2, 3, 4], &[4, 2]], |tp, v| tp.matmul(v[0], v[1]));
    check_primitive("matmul shared lhs", &[&[3, 4], &[2, 4, 5]], |tp, v| tp.matmul(v[0], v[1]));
    check_primitive("matmul batched", &[&[2, 3, 4], &[2, 4, 2]], |tp, v| tp.matmul(v[0], v[1]));
    check_primitive("add", &[&[2, 3], &[2, 3]], |tp, v| tp.add(v[0], v[1]));
    check_primitive("add broadcast", &[&[2, 3, 4], &[3, 4]], |tp, v| tp.add(v[0], v[1]));
    check_primitive("sub broadcast left", &[&[3, 4], &[2, 3, 4]], |tp, v| tp.sub(v[0], v[1]));
    check_primitive("hadamard", &[&[2, 3, 4], &[3, 4]], |tp, v| tp.hadamard(v[0], v[1]));
    check_primitive("relu", &[&[4, 5]], |tp, v| tp.relu(v[0]));
    check_primitive("scale", &[&[4, 5]], |tp, v| tp.forward_primitive(Primitive::Scale(-0.7), v));
    check_primitive("square", &[&[3, 3]], |tp, v| tp.square(v[0]));
    check_primitive("sum", &[&[3, 3]], |tp, v| tp.sum(v[0]));
    check_primitive("mean", &[&[2, 3, 3]], |tp, v| tp.mean(v[0]));
    check_primitive("transpose", &[&[2, 3, 4]], |tp, v| tp.transpose(v[0]));
    check_primitive("concat", &[&[2, 3, 2], &[2, 3, 4]], |tp, v| tp.concat_channels(v));
    check_primitive("add_bias", &[&[2, 3, 4], &[4]], |tp, v| tp.add_bias(v[0], v[1]));
    check_primitive("mul_channel", &[&[2, 3, 4], &[4]], |tp, v| tp.mul_channel(v[0], v[1]));
    check_primitive("softmax_last", &[&[2, 3, 4]], |tp, v| tp.softmax_last(v[0]));
    let mask: Arc<[bool]> = vec![true, true, false, true, true, true, false, true, true].into();
    check_primitive("masked_softmax", &[&[3, 3]], |tp, v| tp.masked_softmax(v[0], mask.clone()));
    let positions: Arc<[usize]> = vec![0, 2, 4, 8].into();
    check_primitive("scatter", &[&[4]], |tp, v| tp.scatter(v[0], positions.clone(), &[3, 3]));
    check_primitive("batch_norm", &[&[3, 4, 5], &[5], &[5]], |tp, v| {
        tp.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
    });
}

#[test]
fn backward_is_linear_over_independent_subgraphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a0 = random(&mut rng, &[3, 3]);
    let b0 = random(&mut rng, &[3, 2]);
    let build_a = |tp: &mut Tape, a: Var| -> crate::Result<Var> {
        let s = tp.square(a)?;
        tp.sum(s)
    };
    let build_b = |tp: &mut Tape, b: Var| -> crate::Result<Var> {
        let r = tp.relu(b)?;
        tp.mean(r)
    };

    let mut tape = Tape::new();
    let a = tape.param(a0.clone());
    let b = tape.param(b0.clone());
    let fa = build_a(&mut tape, a).unwrap();
    let fb = build_b(&mut tape, b).unwrap();
    let total = tape.add(fa, fb).unwrap();
    let joint = tape.backward(total).unwrap();

    let mut ta = Tape::new();
    let a2 = ta.param(a0);
    let o = build_a(&mut ta, a2).unwrap();
    let ga = ta.backward(o).unwrap();
    let mut tb = Tape::new();
    let b2 = tb.param(b0);
    let o = build_b(&mut tb, b2).unwrap();
    let gb = tb.backward(o).unwrap();

    assert_eq!(joint.get(a).unwrap(), ga.get(a2).unwrap());
    assert_eq!(joint.get(b).unwrap(), gb.get(b2).unwrap());
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[4, 6, 8]));
        let w = tape.constant(random(&mut rng, &[8, 5]));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax_last(y).unwrap();
        let s = tape.sum(y).unwrap();
        (tape.value(y).clone(), tape.value(s).clone())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(sa.data()[0].to_bits(), sb.data()[0].to_bits());
}

#[test]
fn masked_softmax_rejects_empty_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 2]));
    let mask: Arc<[bool]> = vec![true, false, false, false].into();
    assert!(matches!(tape.masked_softmax(x, mask), Err(Error::EmptyRow { row: 1 })));
}

#[test]
fn f32_tape_runs_the_same_graph() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::<f32>::from_f64([2], &[1.0, 2.0]).unwrap());
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0f32, 4.0]);
}
