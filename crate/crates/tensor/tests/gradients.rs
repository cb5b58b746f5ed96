use made_tensor::{grad_check, primitive_gradient_suite, Eager, Ops, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    for check in primitive_gradient_suite(7, 20).unwrap() {
        assert!(
            check.max_relative_error < 1e-5,
            "{}: max relative error {:e}",
            check.op,
            check.max_relative_error
        );
    }
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 5.0, 2.5]).unwrap();
    let err = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn grad_check_of_mean_sq() {
    let x = Tensor::new(vec![3], vec![0.7, -0.1, 2.2]).unwrap();
    let target = Tensor::new(vec![3], vec![1.0, 0.5, -0.3]).unwrap();
    let err = grad_check(|t, x| t.mean_sq(x, &target), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn grad_check_through_conv_relu_chain() {
    // Kernels chosen so that no relu input lands within 1e-3 of zero.
    let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| 0.2 + 0.1 * i as f64).collect()).unwrap();
    let k1 = Tensor::new(vec![3, 3, 1, 2], (0..18).map(|i| 0.05 + 0.01 * i as f64).collect()).unwrap();
    let k2 = Tensor::new(vec![3, 3, 2, 1], (0..18).map(|i| 0.1 - 0.004 * i as f64).collect()).unwrap();
    let f = |t: &mut Tape, x: &Tensor| {
        let h = t.conv2d(x, &k1)?;
        let h = t.relu(&h)?;
        let h = t.conv2d(&h, &k2)?;
        let h = t.relu(&h)?;
        t.sum(&h)
    };
    let mut eager = Eager;
    let pre = eager.conv2d(&x, &k1).unwrap();
    assert!(pre.data().iter().all(|v| v.abs() > 1e-3));
    let err = grad_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn backward_is_deterministic() {
    let x = Tensor::new(vec![4, 4, 2], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let k = Tensor::new(vec![3, 3, 2, 3], (0..54).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let xs = tape.leaf(&x, true);
        let ks = tape.leaf(&k, true);
        let y = tape.conv2d(&xs, &ks).unwrap();
        let y = tape.softmax_channel(&y).unwrap();
        let l = tape.sum(&y).unwrap();
        let l = tape.scale(&l, 0.01).unwrap();
        let l = tape.log1m(&l).unwrap();
        let g = tape.backward(&l).unwrap();
        (g.get(&xs).unwrap().clone(), g.get(&ks).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
}

proptest! {
    #[test]
    fn ops_do_not_mutate_inputs(values in prop::collection::vec(-5.0f64..5.0, 12)) {
        let x = Tensor::new(vec![4, 3], values.clone()).unwrap();
        let snapshot = x.data().to_vec();
        let mut tape = Tape::new();
        let xs = tape.leaf(&x, true);
        let y = tape.softmax_channel(&xs).unwrap();
        let y = tape.mul(&y, &xs).unwrap();
        let l = tape.sum(&y).unwrap();
        tape.backward(&l).unwrap();
        prop_assert_eq!(x.data(), &snapshot[..]);
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 15)) {
        let x = Tensor::new(vec![5, 3], values).unwrap();
        let y = Eager.softmax_channel(&x).unwrap();
        for row in y.data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn eager_and_tape_agree(values in prop::collection::vec(-2.0f64..2.0, 18)) {
        let x = Tensor::new(vec![3, 2, 3], values).unwrap();
        let k = Tensor::full(&[3, 3, 3, 2], 0.1);
        let e = Eager.conv2d(&x, &k).unwrap();
        let mut tape = Tape::new();
        let t = tape.conv2d(&x, &k).unwrap();
        prop_assert!(e.bit_eq(&t.detach()));
    }
}
