use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcheck::{central_gradient, max_coordinate_relative_error};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln4() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[0.0; 4])).unwrap();
    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert_abs_diff_eq!(tape.item(l), 4f64.ln(), epsilon = 1e-15);
    assert_abs_diff_eq!(tape.item(l), 1.3863, epsilon = 1e-4);
}

#[test]
fn matmul_by_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.shape(c), &[2, 2]);
}

#[test]
fn grad_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[0.3, -1.0, 2.0])).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grad_of_half_squared_norm_is_identity() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[3.0, 4.0])).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let l = tape.scale(s, 0.5).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.item(l), 12.5);
    assert_eq!(tape.grad(x).data(), &[3.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
    let y = tape.tanh(x).unwrap();
    assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
    let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    assert!(matches!(tape.add(a, b), Err(AutodiffError::Shape(_))));
    let m = tape.constant(t(&[2, 3], &[0.0; 6])).unwrap();
    assert!(matches!(tape.matmul(m, m), Err(AutodiffError::Shape(_))));
    assert!(matches!(
        Tensor::new(vec![1], vec![f64::NAN]),
        Err(AutodiffError::NonFinite(_))
    ));
    let big = tape.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(tape.mul(big, big), Err(AutodiffError::NonFinite(_))));
}

#[test]
fn tape_is_reusable_after_reset() {
    let mut tape = Tape::new();
    for _ in 0..2 {
        tape.reset();
        let x = tape.param(t(&[2], &[1.0, -2.0])).unwrap();
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, -4.0]);
        assert_eq!(tape.len(), 3);
    }
}

#[test]
fn works_in_single_precision() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::vector(vec![3.0f32, 4.0]).unwrap()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), &[6.0f32, 8.0]);
}

/// A small net touching every op: embedding, concat, affine, tanh, relu,
/// sigmoid, softmax, log-softmax and weighted NLL.
struct ToyNet {
    layout: ParamLayout,
    ids: Vec<usize>,
    x: Tensor<f64>,
    targets: Vec<usize>,
}

impl ToyNet {
    fn random(rng: &mut impl Rng, vocab: usize, d: usize, hidden: usize, classes: usize, rows: usize) -> (Self, ParamVector<f64>) {
        let shapes = vec![
            ("emb".to_string(), vec![vocab, d]),
            ("w1".to_string(), vec![hidden, d + 2]),
            ("b1".to_string(), vec![hidden]),
            ("w2".to_string(), vec![classes, hidden]),
        ];
        let layout = ParamLayout::new(shapes);
        let theta = ParamVector::new((0..layout.total_len()).map(|_| rng.gen_range(-0.8..0.8)).collect());
        let ids = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
        let x = Tensor::matrix(rows, 2, (0..rows * 2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let targets = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        (Self { layout, ids, x, targets }, theta)
    }

    fn loss(&self, theta: &ParamVector<f64>, with_grad: bool) -> Result<(f64, ParamVector<f64>), AutodiffError> {
        let mut tape = Tape::new();
        let tensors = unflatten_params(&self.layout, theta)?;
        let vars: Vec<Var> = tensors.into_iter().map(|(_, t)| tape.param(t)).collect::<Result<_, _>>()?;
        let (emb, w1, b1, w2) = (vars[0], vars[1], vars[2], vars[3]);
        let e = tape.gather(emb, &self.ids)?;
        let x = tape.constant(self.x.clone())?;
        let z = tape.concat(&[e, x], 1)?;
        let h = tape.matmul_t(z, w1)?;
        let h = tape.add_bias(h, b1)?;
        let a = tape.tanh(h)?;
        let r = tape.relu(h)?;
        let s = tape.sigmoid(r)?;
        let g = tape.mul(a, s)?;
        let logits = tape.matmul_t(g, w2)?;
        let p = tape.softmax(logits)?;
        let pm = tape.mean(p)?;
        let ce = tape.cross_entropy(logits, &self.targets)?;
        let loss = tape.add(ce, pm)?;
        if with_grad {
            tape.backward(loss)?;
        }
        let grad = ParamVector::new(vars.iter().flat_map(|&v| tape.grad(v).into_data()).collect());
        Ok((tape.item(loss), grad))
    }
}

#[test]
fn twenty_parameter_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // 3x2 embedding + 2x4 weights + 2 bias + 2x2 head = 6 + 8 + 2 + 4 = 20
    let (net, theta) = ToyNet::random(&mut rng, 3, 2, 2, 2, 5);
    assert_eq!(theta.len(), 20);
    let (_, grad) = net.loss(&theta, true).unwrap();
    let fd = central_gradient(&theta, 1e-5, |th| net.loss(th, false).map(|r| r.0)).unwrap();
    let err = max_coordinate_relative_error(&grad, &fd, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn random_small_nets_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let vocab = rng.gen_range(2..5);
        let d = rng.gen_range(1..4);
        let hidden = rng.gen_range(1..5);
        let classes = rng.gen_range(2..5);
        let rows = rng.gen_range(1..6);
        let (net, theta) = ToyNet::random(&mut rng, vocab, d, hidden, classes, rows);
        assert!(theta.len() <= 100);
        let (_, grad) = net.loss(&theta, true).unwrap();
        let fd = central_gradient(&theta, 1e-5, |th| net.loss(th, false).map(|r| r.0)).unwrap();
        let err = max_coordinate_relative_error(&grad, &fd, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (net_a, theta) = ToyNet::random(&mut rng, 4, 3, 4, 3, 4);
    let (a, b) = (0.7, -1.3);
    // L1 = net loss, L2 = sum(theta^2) through the same leaves
    let mut tape = Tape::new();
    let tensors = unflatten_params(&net_a.layout, &theta).unwrap();
    let vars: Vec<Var> = tensors.into_iter().map(|(_, t)| tape.param(t).unwrap()).collect();
    let build = |tape: &mut Tape<f64>| -> (Var, Var) {
        let e = tape.gather(vars[0], &net_a.ids).unwrap();
        let x = tape.constant(net_a.x.clone()).unwrap();
        let z = tape.concat(&[e, x], 1).unwrap();
        let h = tape.matmul_t(z, vars[1]).unwrap();
        let h = tape.add_bias(h, vars[2]).unwrap();
        let h = tape.tanh(h).unwrap();
        let logits = tape.matmul_t(h, vars[3]).unwrap();
        let l1 = tape.cross_entropy(logits, &net_a.targets).unwrap();
        let sq = tape.mul(vars[3], vars[3]).unwrap();
        let l2 = tape.sum(sq).unwrap();
        (l1, l2)
    };
    let (l1, l2) = build(&mut tape);
    let grads = |tape: &Tape<f64>| -> Vec<f64> { vars.iter().flat_map(|&v| tape.grad(v).into_data()).collect() };
    tape.backward(l1).unwrap();
    let g1 = grads(&tape);
    tape.backward(l2).unwrap();
    let g2 = grads(&tape);
    let s1 = tape.scale(l1, a).unwrap();
    let s2 = tape.scale(l2, b).unwrap();
    let combo = tape.add(s1, s2).unwrap();
    tape.backward(combo).unwrap();
    let gc = grads(&tape);
    for i in 0..gc.len() {
        assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-12);
    }
}

#[test]
fn flatten_orders_by_insertion() {
    let a = t(&[2], &[1.0, 2.0]);
    let b = t(&[2], &[3.0, 4.0]);
    let (layout, v) = flatten_params([("A", &a), ("B", &b)]);
    assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    let back = unflatten_params(&layout, &v).unwrap();
    assert_eq!(back[0], ("A".to_string(), a));
    assert_eq!(back[1], ("B".to_string(), b));
}

#[test]
fn l2_norm_of_3_4() {
    assert_eq!(ParamVector::new(vec![3.0, 4.0]).l2_norm(), 5.0);
}

#[test]
fn unflatten_rejects_wrong_length_and_order() {
    let a = t(&[2], &[1.0, 2.0]);
    let b = t(&[3], &[3.0, 4.0, 5.0]);
    let (layout, v) = flatten_params([("A", &a), ("B", &b)]);
    let short = ParamVector::new(v.as_slice()[..4].to_vec());
    assert!(matches!(unflatten_params(&layout, &short), Err(AutodiffError::Layout(_))));
    let (swapped, _) = flatten_params([("B", &b), ("A", &a)]);
    assert!(matches!(check_layout(&layout, &swapped), Err(AutodiffError::Layout(_))));
    assert!(check_layout(&layout, &layout.clone()).is_ok());
}

proptest! {
    #[test]
    fn flatten_unflatten_is_identity(
        a in proptest::collection::vec(-1e3f64..1e3, 1..8),
        b in proptest::collection::vec(-1e3f64..1e3, 1..8),
    ) {
        let ta = Tensor::vector(a).unwrap();
        let tb = Tensor::matrix(1, b.len(), b).unwrap();
        let (layout, v) = flatten_params([("a", &ta), ("b", &tb)]);
        let back = unflatten_params(&layout, &v).unwrap();
        prop_assert_eq!(&back[0].1, &ta);
        prop_assert_eq!(&back[1].1, &tb);
    }

    #[test]
    fn cauchy_schwarz(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (x, y) = (ParamVector::new(x), ParamVector::new(y));
        let lhs = x.dot(&y).abs();
        let rhs = x.l2_norm() * y.l2_norm();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-9);
        prop_assert!((x.l2_norm() - x.dot(&x).sqrt()).abs() <= 1e-12 * x.l2_norm().max(1.0));
    }
}
