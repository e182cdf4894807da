use std::cell::RefCell;
use std::rc::Rc;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;

/// Central finite differences against the analytic backward pass.
///
/// `build` must be a pure function of its leaf inputs. The loss is a fixed
/// random weighting of the output elements so that sign errors cannot cancel.
fn fd_check(
    inputs: &[TensorValue],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    h: f64,
    rel_tol: f64,
) {
    let weights = {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|v| t.leaf(v.clone(), false)).collect();
        let out = build(&mut t, &ids);
        let mut r = rng::stream(99, &[7]);
        let numel = t.value(out).numel();
        (0..numel).map(|_| r.random_range(0.25..1.0)).collect::<Vec<f64>>()
    };
    let eval = |xs: &[TensorValue]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|v| t.leaf(v.clone(), false)).collect();
        let out = build(&mut t, &ids);
        t.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(o, w)| o * w)
            .sum()
    };

    // analytic
    let mut t = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let out = build(&mut t, &ids);
    let w = t.constant(TensorValue::new(t.value(out).shape().to_vec(), weights.clone()).unwrap());
    let weighted = t.mul(out, w).unwrap();
    let loss = t.sum_all(weighted).unwrap();
    let grads = t.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .unwrap_or_else(|| panic!("no gradient for input {i}"));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = analytic.data()[j];
            let denom = ana.abs().max(num.abs()).max(1e-6);
            let rel = (ana - num).abs() / denom;
            assert!(
                rel < rel_tol,
                "input {i} elem {j}: analytic {ana} vs numeric {num} (rel {rel:.3e})"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> TensorValue {
    let mut r = rng::stream(seed, &[42]);
    let numel: usize = shape.iter().product();
    TensorValue::new(
        shape.to_vec(),
        (0..numel).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

#[test]
fn softplus_at_zero_is_ln_two() {
    let mut t = Tape::new();
    let x = t.scalar(0.0);
    let y = t.softplus(x);
    assert_relative_eq!(t.value(y).item(), 2.0f64.ln(), max_relative = 1e-15);
}

#[test]
fn add_zero_is_identity() {
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[3, 4], -2.0, 2.0, 1));
    let z = t.constant(TensorValue::zeros(&[3, 4]));
    let y = t.add(x, z).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());
}

#[test]
fn softplus_derivative_matches_sigmoid_and_fd() {
    // d/dx softplus(x) at x=2 is sigmoid(2)
    let mut t = Tape::new();
    let x = t.leaf(TensorValue::scalar(2.0), true);
    let y = t.softplus(x);
    let grads = t.backward(y).unwrap();
    let analytic = grads.get(x).unwrap().item();
    assert_relative_eq!(analytic, sigmoid(2.0), max_relative = 1e-15);

    let h = 1e-6;
    let num = (softplus(2.0 + h) - softplus(2.0 - h)) / (2.0 * h);
    let rel = (analytic - num).abs() / num.abs();
    assert!(rel < 1e-7, "rel err {rel}");
}

#[test]
fn logsumexp_of_equal_terms() {
    let mut t = Tape::new();
    let v = t.constant(TensorValue::from_vec(vec![0.0, 0.0]));
    let l = t.logsumexp(v, 0, false).unwrap();
    assert_relative_eq!(t.value(l).item(), 2.0f64.ln(), max_relative = 1e-15);
}

#[test]
fn logsumexp_shift_invariant_no_overflow() {
    let mut t = Tape::new();
    let v = t.constant(TensorValue::from_vec(vec![1000.0, 1000.0]));
    let l = t.logsumexp(v, 0, false).unwrap();
    assert_relative_eq!(t.value(l).item(), 1000.0 + 2.0f64.ln(), max_relative = 1e-15);
}

#[test]
fn logsumexp_matches_max_shift_formula_exactly() {
    let v = rand_tensor(&[7], -3.0, 3.0, 5);
    let mut t = Tape::new();
    let id = t.constant(v.clone());
    let l = t.logsumexp(id, 0, false).unwrap();
    let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.data().iter().map(|x| (x - m).exp()).sum();
    let expect = m + s.ln();
    assert_eq!(t.value(l).item(), expect, "must be computed exactly this way");
}

#[test]
fn sum_over_axis_zero() {
    let mut t = Tape::new();
    let a = t.constant(TensorValue::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = t.sum(a, &[0], false).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);
}

#[test]
fn matmul_identity() {
    let m = rand_tensor(&[3, 3], -2.0, 2.0, 2);
    let mut eye = TensorValue::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut t = Tape::new();
    let a = t.constant(eye);
    let b = t.constant(m.clone());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), m.data());
}

#[test]
fn matmul_small_example() {
    let mut t = Tape::new();
    let a = t.constant(TensorValue::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(TensorValue::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);
}

#[test]
fn matmul_gradient_matches_fd() {
    let a = rand_tensor(&[3, 4], -2.0, 2.0, 3);
    let b = rand_tensor(&[4, 2], -2.0, 2.0, 4);
    fd_check(
        &[a, b],
        |t, ids| t.matmul(ids[0], ids[1]).unwrap(),
        1e-6,
        1e-6,
    );
}

#[test]
fn matmul_inner_mismatch_errors() {
    let mut t = Tape::new();
    let a = t.constant(TensorValue::zeros(&[2, 3]));
    let b = t.constant(TensorValue::zeros(&[4, 2]));
    assert!(t.matmul(a, b).is_err());
}

#[test]
fn backward_square_at_three() {
    let mut t = Tape::new();
    let x = t.leaf(TensorValue::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    let grads = t.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn backward_fanout_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(TensorValue::scalar(1.0), true);
    let y = t.add(x, x).unwrap();
    let grads = t.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 2.0);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(TensorValue::from_vec(vec![1.0, 2.0]), true);
    assert!(t.backward(x).is_err());
}

#[test]
fn composite_softplus_matmul_matches_fd() {
    let a = rand_tensor(&[2, 3], -2.0, 2.0, 5);
    let b = rand_tensor(&[3, 2], -2.0, 2.0, 6);
    fd_check(
        &[a, b],
        |t, ids| {
            let m = t.matmul(ids[0], ids[1]).unwrap();
            t.softplus(m)
        },
        1e-6,
        1e-5,
    );
}

#[test]
fn detach_values_equal_and_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(TensorValue::scalar(3.0), true);
    let y = t.leaf(TensorValue::scalar(5.0), true);
    let xd = t.detach(x);
    assert_eq!(t.value(xd).item(), 3.0);
    let prod = t.mul(xd, y).unwrap();
    let grads = t.backward(prod).unwrap();
    assert!(grads.get(x).is_none(), "no gradient may flow through detach");
    assert_eq!(grads.get(y).unwrap().item(), 3.0);
}

#[test]
fn backward_is_deterministic() {
    let a = rand_tensor(&[4, 4], -2.0, 2.0, 7);
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(a.clone(), true);
        let s = t.softplus(x);
        let e = t.exp(x);
        let m = t.mul(s, e).unwrap();
        let loss = t.sum_all(m).unwrap();
        let grads = t.backward(loss).unwrap();
        grads.get(x).unwrap().data().to_vec()
    };
    let g1 = run();
    let g2 = run();
    assert_eq!(g1, g2, "bit-identical gradients required");
}

#[test]
fn elementwise_ops_match_fd() {
    // add/sub/mul on [-2,2]
    let a = rand_tensor(&[3, 5], -2.0, 2.0, 8);
    let b = rand_tensor(&[3, 5], -2.0, 2.0, 9);
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
        fd_check(
            &[a.clone(), b.clone()],
            move |t, ids| t.binary(kind, ids[0], ids[1]).unwrap(),
            1e-6,
            1e-4,
        );
    }
    // div with denominator bounded away from zero
    let d = rand_tensor(&[3, 5], 0.5, 2.5, 10);
    fd_check(
        &[a.clone(), d],
        |t, ids| t.div(ids[0], ids[1]).unwrap(),
        1e-6,
        1e-4,
    );
    // unaries
    for kind in [UnaryKind::Neg, UnaryKind::Exp, UnaryKind::Softplus, UnaryKind::Sigmoid] {
        fd_check(
            &[a.clone()],
            move |t, ids| t.unary_fd(kind, ids[0]),
            1e-6,
            1e-4,
        );
    }
    // log and sqrt need positive input
    let p = rand_tensor(&[3, 5], 0.5, 2.5, 11);
    fd_check(&[p.clone()], |t, ids| t.log(ids[0]).unwrap(), 1e-6, 1e-4);
    fd_check(&[p], |t, ids| t.sqrt(ids[0]).unwrap(), 1e-6, 1e-4);
}

impl Tape {
    /// Test-only dispatch helper.
    fn unary_fd(&mut self, kind: UnaryKind, a: TensorId) -> TensorId {
        match kind {
            UnaryKind::Neg => self.neg(a),
            UnaryKind::Exp => self.exp(a),
            UnaryKind::Log => self.log(a).unwrap(),
            UnaryKind::Sqrt => self.sqrt(a).unwrap(),
            UnaryKind::Softplus => self.softplus(a),
            UnaryKind::Sigmoid => self.sigmoid(a),
        }
    }
}

#[test]
fn broadcast_add_and_mul_match_fd() {
    let a = rand_tensor(&[2, 3, 4], -2.0, 2.0, 12);
    let b = rand_tensor(&[1, 3, 1], -2.0, 2.0, 13);
    fd_check(
        &[a.clone(), b.clone()],
        |t, ids| t.add(ids[0], ids[1]).unwrap(),
        1e-6,
        1e-4,
    );
    fd_check(
        &[a, b],
        |t, ids| t.mul(ids[0], ids[1]).unwrap(),
        1e-6,
        1e-4,
    );
}

#[test]
fn broadcast_rejects_incompatible() {
    let mut t = Tape::new();
    let a = t.constant(TensorValue::zeros(&[3, 2]));
    let b = t.constant(TensorValue::zeros(&[4, 2]));
    assert!(t.add(a, b).is_err());
}

#[test]
fn log_rejects_nonpositive() {
    let mut t = Tape::new();
    let a = t.constant(TensorValue::from_vec(vec![1.0, 0.0]));
    assert!(t.log(a).is_err());
}

#[test]
fn reductions_match_fd() {
    let a = rand_tensor(&[2, 3, 4], -2.0, 2.0, 14);
    fd_check(
        &[a.clone()],
        |t, ids| t.sum(ids[0], &[0, 2], false).unwrap(),
        1e-6,
        1e-4,
    );
    fd_check(
        &[a.clone()],
        |t, ids| t.mean(ids[0], &[1], true).unwrap(),
        1e-6,
        1e-4,
    );
    fd_check(
        &[a],
        |t, ids| t.logsumexp(ids[0], 1, false).unwrap(),
        1e-6,
        1e-4,
    );
}

#[test]
fn invalid_axis_errors() {
    let mut t = Tape::new();
    let a = t.constant(TensorValue::zeros(&[2, 2]));
    assert!(t.sum(a, &[2], false).is_err());
    assert!(t.logsumexp(a, 5, false).is_err());
}

#[test]
fn structure_ops_match_fd() {
    let a = rand_tensor(&[2, 3, 2, 2], -2.0, 2.0, 15);
    let b = rand_tensor(&[2, 2, 2, 2], -2.0, 2.0, 16);
    fd_check(
        &[a.clone(), b],
        |t, ids| t.concat(&[ids[0], ids[1]], 1).unwrap(),
        1e-6,
        1e-4,
    );
    fd_check(
        &[a.clone()],
        |t, ids| t.narrow(ids[0], 1, 1, 2).unwrap(),
        1e-6,
        1e-4,
    );
    fd_check(
        &[a.clone()],
        |t, ids| t.reshape(ids[0], vec![6, 4]).unwrap(),
        1e-6,
        1e-4,
    );
    fd_check(
        &[a],
        |t, ids| t.repeat_rows(ids[0], 3).unwrap(),
        1e-6,
        1e-4,
    );
}

#[test]
fn conv_identity_kernel_preserves_input() {
    // 5x5 kernel with only the center weight set reproduces the input.
    let input = rand_tensor(&[1, 1, 8, 8], -2.0, 2.0, 17);
    let mut kernel = TensorValue::zeros(&[1, 1, 5, 5]);
    kernel.data_mut()[2 * 5 + 2] = 1.0;
    let mut t = Tape::new();
    let i = t.constant(input.clone());
    let k = t.constant(kernel);
    let b = t.constant(TensorValue::zeros(&[1]));
    let o = t.conv2d(i, k, b, 1).unwrap();
    for (a, e) in t.value(o).data().iter().zip(input.data()) {
        assert_relative_eq!(a, e, max_relative = 1e-14);
    }
}

#[test]
fn conv_zero_input_gives_bias() {
    let mut t = Tape::new();
    let i = t.constant(TensorValue::zeros(&[1, 2, 4, 4]));
    let k = t.constant(rand_tensor(&[3, 2, 5, 5], -1.0, 1.0, 18));
    let b = t.constant(TensorValue::from_vec(vec![0.5, -1.5, 2.0]));
    let o = t.conv2d(i, k, b, 1).unwrap();
    let out = t.value(o);
    for c in 0..3 {
        let expect = [0.5, -1.5, 2.0][c];
        for x in 0..4 {
            for y in 0..4 {
                assert_eq!(out.data()[(c * 4 + x) * 4 + y], expect);
            }
        }
    }
}

/// Direct quadruple-loop convolution, written as naively as possible.
fn naive_conv(
    input: &TensorValue,
    kernel: &TensorValue,
    bias: &[f64],
    stride: usize,
) -> TensorValue {
    let (n, c, w, h) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (o, _, k, _) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let pad = k / 2;
    let ow = (w + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let mut out = TensorValue::zeros(&[n, o, ow, oh]);
    for ni in 0..n {
        for oi in 0..o {
            for xo in 0..ow {
                for yo in 0..oh {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let xi = (stride * xo + ki) as isize - pad as isize;
                                let yi = (stride * yo + kj) as isize - pad as isize;
                                if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((ni * c + ci) * w + xi as usize) * h + yi as usize];
                                let kv = kernel.data()[((oi * c + ci) * k + ki) * k + kj];
                                acc += iv * kv;
                            }
                        }
                    }
                    out.data_mut()[((ni * o + oi) * ow + xo) * oh + yo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loop_oracle() {
    let input = rand_tensor(&[1, 2, 8, 8], -2.0, 2.0, 19);
    let kernel = rand_tensor(&[3, 2, 5, 5], -1.0, 1.0, 20);
    let bias = rand_tensor(&[3], -1.0, 1.0, 21);
    for stride in [1usize, 2] {
        let mut t = Tape::new();
        let i = t.constant(input.clone());
        let k = t.constant(kernel.clone());
        let b = t.constant(bias.clone());
        let o = t.conv2d(i, k, b, stride).unwrap();
        let expect = naive_conv(&input, &kernel, bias.data(), stride);
        assert_eq!(t.value(o).shape(), expect.shape());
        for (a, e) in t.value(o).data().iter().zip(expect.data()) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn conv_gradients_match_fd() {
    let input = rand_tensor(&[2, 2, 4, 4], -2.0, 2.0, 22);
    let kernel = rand_tensor(&[2, 2, 5, 5], -0.5, 0.5, 23);
    let bias = rand_tensor(&[2], -0.5, 0.5, 24);
    for stride in [1usize, 2] {
        fd_check(
            &[input.clone(), kernel.clone(), bias.clone()],
            move |t, ids| t.conv2d(ids[0], ids[1], ids[2], stride).unwrap(),
            1e-6,
            1e-4,
        );
    }
}

#[test]
fn conv_transpose_shapes_and_gradients() {
    let input = rand_tensor(&[2, 3, 4, 2], -2.0, 2.0, 25);
    let kernel = rand_tensor(&[3, 2, 5, 5], -0.5, 0.5, 26);
    let bias = rand_tensor(&[2], -0.5, 0.5, 27);
    {
        let mut t = Tape::new();
        let i = t.constant(input.clone());
        let k = t.constant(kernel.clone());
        let b = t.constant(bias.clone());
        let o1 = t.conv_transpose2d(i, k, b, 1).unwrap();
        assert_eq!(t.shape(o1), &[2, 2, 4, 2]);
        let o2 = t.conv_transpose2d(i, k, b, 2).unwrap();
        assert_eq!(t.shape(o2), &[2, 2, 8, 4], "stride 2 doubles extents");
    }
    for stride in [1usize, 2] {
        fd_check(
            &[input.clone(), kernel.clone(), bias.clone()],
            move |t, ids| t.conv_transpose2d(ids[0], ids[1], ids[2], stride).unwrap(),
            1e-6,
            1e-4,
        );
    }
}

#[test]
fn conv_transpose_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> when both use the same kernel.
    let x = rand_tensor(&[1, 2, 6, 4], -1.0, 1.0, 28);
    let y = rand_tensor(&[1, 3, 3, 2], -1.0, 1.0, 29);
    let kernel = rand_tensor(&[3, 2, 5, 5], -0.5, 0.5, 30);
    // kernel for the transpose direction: [in=3, out=2] with same weights
    let mut kt = TensorValue::zeros(&[3, 2, 5, 5]);
    kt.data_mut().copy_from_slice(kernel.data());
    let zero2 = TensorValue::zeros(&[2]);
    let zero3 = TensorValue::zeros(&[3]);

    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let ki = t.constant(kernel);
    let b3 = t.constant(zero3);
    let cx = t.conv2d(xi, ki, b3, 2).unwrap();
    let lhs: f64 = t
        .value(cx)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();

    let yi = t.constant(y);
    let kti = t.constant(kt);
    let b2 = t.constant(zero2);
    let cty = t.conv_transpose2d(yi, kti, b2, 2).unwrap();
    assert_eq!(t.shape(cty), x.shape());
    let rhs: f64 = t
        .value(cty)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a * b)
        .sum();
    assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
}

#[test]
fn conv_errors() {
    let mut t = Tape::new();
    let i = t.constant(TensorValue::zeros(&[1, 3, 4, 4]));
    let k = t.constant(TensorValue::zeros(&[2, 2, 5, 5]));
    let b = t.constant(TensorValue::zeros(&[2]));
    assert!(t.conv2d(i, k, b, 1).is_err(), "channel mismatch");

    let i2 = t.constant(TensorValue::zeros(&[1, 2, 5, 4]));
    assert!(t.conv2d(i2, k, b, 2).is_err(), "odd extent for stride 2");
}

#[test]
fn grad_scale_rows_scales_backward_only() {
    let a = rand_tensor(&[3, 2], -1.0, 1.0, 31);
    let factors = Rc::new(RefCell::new(vec![0.0; 3]));
    let mut t = Tape::new();
    let x = t.leaf(a.clone(), true);
    let gated = t.grad_scale_rows(x, factors.clone()).unwrap();
    assert_eq!(t.value(gated).data(), a.data(), "forward is the identity");
    let loss = t.sum_all(gated).unwrap();
    *factors.borrow_mut() = vec![1.0, 2.0, 0.5];
    let grads = t.backward(loss).unwrap();
    assert_eq!(
        grads.get(x).unwrap().data(),
        &[1.0, 1.0, 2.0, 2.0, 0.5, 0.5]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_logsumexp_shift_invariance(
        vals in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -1000.0f64..1000.0,
    ) {
        let mut t = Tape::new();
        let a = t.constant(TensorValue::from_vec(vals.clone()));
        let l0 = t.logsumexp(a, 0, false).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let b = t.constant(TensorValue::from_vec(shifted));
        let l1 = t.logsumexp(b, 0, false).unwrap();
        let d = t.value(l1).item() - t.value(l0).item();
        prop_assert!((d - shift).abs() < 1e-9 * (1.0 + shift.abs()));
    }

    #[test]
    fn prop_sum_matches_scalar_sum(
        vals in proptest::collection::vec(-100.0f64..100.0, 1..64),
    ) {
        let mut t = Tape::new();
        let a = t.constant(TensorValue::from_vec(vals.clone()));
        let s = t.sum_all(a).unwrap();
        let direct: f64 = vals.iter().sum();
        prop_assert!((t.value(s).item() - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
    }

    #[test]
    fn prop_broadcast_mul_grad_reduces_correctly(
        rows in 1usize..4,
        cols in 1usize..4,
    ) {
        // (a[rows,cols] * b[1,cols]) summed: d/db = column sums of a
        let a = rand_tensor(&[rows, cols], -2.0, 2.0, (rows * 10 + cols) as u64);
        let mut t = Tape::new();
        let ai = t.constant(a.clone());
        let bi = t.leaf(TensorValue::full(&[1, cols], 1.0), true);
        let m = t.mul(ai, bi).unwrap();
        let loss = t.sum_all(m).unwrap();
        let grads = t.backward(loss).unwrap();
        let gb = grads.get(bi).unwrap();
        for j in 0..cols {
            let col_sum: f64 = (0..rows).map(|i| a.data()[i * cols + j]).sum();
            prop_assert!((gb.data()[j] - col_sum).abs() < 1e-12);
        }
    }
}
