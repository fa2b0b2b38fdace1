use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn matmul_identity_and_hand_case() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]);
    assert_eq!(eye.matmul(&m).unwrap().data(), &[2.0, 0.0, 0.0, 3.0]);
    let a = t(&[1, 2], &[1.0, 2.0]);
    let b = t(&[2, 1], &[3.0, 4.0]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let err = random(&[2, 3], 1).matmul(&random(&[4, 5], 2)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let report = grad_check(
        |x| x[0].matmul(&x[1]),
        &[random(&[3, 4], 3), random(&[4, 5], 4)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batched_and_broadcast_matmul_gradients() {
    let report = grad_check(
        |x| x[0].matmul(&x[1]),
        &[random(&[2, 3, 4], 5), random(&[2, 4, 2], 6)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| x[0].matmul(&x[1]),
        &[random(&[1, 3, 4], 7), random(&[2, 4, 2], 8)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| x[0].matmul(&x[1]),
        &[random(&[2, 3, 4], 9), random(&[4, 2], 10)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batched_matmul_matches_per_item_products() {
    let a = random(&[2, 3, 4], 11);
    let b = random(&[2, 4, 5], 12);
    let c = a.matmul(&b).unwrap();
    for i in 0..2 {
        let ai = a.narrow(0, i, 1).unwrap().reshape(vec![3, 4]).unwrap();
        let bi = b.narrow(0, i, 1).unwrap().reshape(vec![4, 5]).unwrap();
        let ci = ai.matmul(&bi).unwrap();
        assert_eq!(&c.data()[i * 15..(i + 1) * 15], ci.data());
    }
}

#[test]
fn elementwise_examples() {
    let sum = t(&[2], &[1.0, 2.0]).add(&t(&[2], &[0.0, 0.0])).unwrap();
    assert_eq!(sum.data(), &[1.0, 2.0]);
    let prod = t(&[2], &[2.0, 3.0]).mul(&t(&[2], &[4.0, 5.0])).unwrap();
    assert_eq!(prod.data(), &[8.0, 15.0]);
    let diff = t(&[2], &[2.0, 3.0]).sub(&t(&[2], &[4.0, 5.0])).unwrap();
    assert_eq!(diff.data(), &[-2.0, -2.0]);
}

#[test]
fn non_broadcastable_shapes_error() {
    let err = random(&[2, 3], 1).add(&random(&[2, 2], 2)).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn broadcast_add_gradient_reduces_over_broadcast_axis() {
    let report = grad_check(
        |x| x[0].add(&x[1]),
        &[random(&[2, 3], 13), random(&[1, 3], 14)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");

    let tape = Tape::new();
    let a = tape.leaf(&random(&[2, 3], 13));
    let b = tape.leaf(&random(&[1, 3], 14));
    let grads = a.add(&b).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(grads.get_data(&b).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn broadcast_mul_and_sub_gradients_general_layouts() {
    for (sa, sb) in [
        (vec![2, 3, 4], vec![2, 3, 1]),
        (vec![2, 3, 1], vec![2, 3, 4]),
        (vec![3, 1], vec![1, 4]),
        (vec![4], vec![2, 3, 4]),
        (vec![2, 3, 4], vec![]),
    ] {
        for kind in [BinaryKind::Mul, BinaryKind::Sub, BinaryKind::Add] {
            let report = grad_check(
                |x| x[0].binary(&x[1], kind),
                &[random(&sa, 15), random(&sb, 16)],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.passed(), "{sa:?} {sb:?} {kind:?}: {report:?}");
        }
    }
}

#[test]
fn activations() {
    assert_eq!(t(&[1], &[0.0]).sigmoid().unwrap().data(), &[0.5]);
    assert_eq!(t(&[2], &[-1.0, 2.0]).relu().unwrap().data(), &[0.0, 2.0]);
    let big = t(&[2], &[800.0, -800.0]).sigmoid().unwrap();
    assert!(big.all_finite());

    let tape = Tape::new();
    let x = tape.leaf(&t(&[1], &[0.0]));
    let g = x.sigmoid().unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(g.get_data(&x).unwrap(), &[0.25]);

    let report = grad_check(|x| x[0].sigmoid(), &[random(&[4, 3], 17)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.overall_max() < 1e-6);
    let report = grad_check(|x| x[0].relu(), &[random(&[4, 3], 18)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_examples() {
    let s = t(&[2], &[0.0, 0.0]).softmax_last_dim(None).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = t(&[2], &[1.0, 0.0]).softmax_last_dim(None).unwrap();
    assert_abs_diff_eq!(s.data()[0], 0.73106, epsilon = 1e-4);
    assert_abs_diff_eq!(s.data()[1], 0.26894, epsilon = 1e-4);
    let mask = Mask::new(vec![2], vec![true, false]).unwrap();
    let s = t(&[2], &[5.0, 1e9]).softmax_last_dim(Some(&mask)).unwrap();
    assert_eq!(s.data(), &[1.0, 0.0]);
}

#[test]
fn softmax_fully_masked_row_is_invalid() {
    let mask = Mask::new(vec![2, 2], vec![true, true, false, false]).unwrap();
    let err = random(&[2, 2], 1).softmax_last_dim(Some(&mask)).unwrap_err();
    assert!(matches!(err, Error::InvalidMask { row: 1 }));
}

#[test]
fn softmax_gradients() {
    let report = grad_check(|x| x[0].softmax_last_dim(None), &[random(&[3, 5], 19)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
    let mask = Mask::causal(1, 4);
    let report = grad_check(
        move |x| x[0].softmax_last_dim(Some(&mask)),
        &[random(&[1, 4, 4], 20)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(|x| x[0].log_softmax_last_dim(), &[random(&[3, 5], 21)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn conv1d_identity_kernel() {
    let x = random(&[2, 4, 3], 22);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let y = conv1d(&x, &t(&[3, 3], &eye), &Tensor::zeros(vec![3]), Padding::Same).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv1d_same_window_sum() {
    // brute force: zero pad [0,1,2,3,0], windows of 3 summed
    let x = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
    let y = conv1d(&x, &t(&[3, 1], &[1.0, 1.0, 1.0]), &Tensor::zeros(vec![1]), Padding::Same).unwrap();
    assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    let y = conv1d(&x, &t(&[3, 1], &[1.0, 1.0, 1.0]), &Tensor::zeros(vec![1]), Padding::Causal).unwrap();
    assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
}

#[test]
fn conv1d_kernel_longer_than_sequence_zero_pads() {
    let x = t(&[1, 1, 1], &[2.0]);
    let y = conv1d(&x, &t(&[5, 1], &[1.0; 5]), &Tensor::zeros(vec![1]), Padding::Same).unwrap();
    assert_eq!(y.data(), &[2.0]);
}

#[test]
fn conv1d_rejects_bad_filter_and_even_same_kernel() {
    let x = random(&[1, 3, 2], 1);
    assert!(matches!(
        conv1d(&x, &random(&[5, 2], 2), &Tensor::zeros(vec![2]), Padding::Same),
        Err(Error::Dimension { .. })
    ));
    assert!(conv1d(&x, &random(&[4, 1], 2), &Tensor::zeros(vec![1]), Padding::Same).is_err());
}

#[test]
fn conv1d_gradients_all_modes() {
    for padding in [Padding::Same, Padding::Causal, Padding::Valid] {
        let report = grad_check(
            |x| conv1d(&x[0], &x[1], &x[2], padding),
            &[random(&[2, 5, 3], 23), random(&[9, 4], 24), random(&[4], 25)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{padding:?}: {report:?}");
    }
}

#[test]
fn causal_conv_ignores_the_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for trial in 0..20 {
        let x = random(&[2, 6, 3], 100 + trial);
        let f = random(&[9, 2], 200 + trial);
        let b = random(&[2], 300 + trial);
        let y = conv1d(&x, &f, &b, Padding::Causal).unwrap();
        let cut = rng.random_range(0..6);
        let mut perturbed = x.to_vec();
        for bi in 0..2 {
            for time in cut + 1..6 {
                for c in 0..3 {
                    perturbed[(bi * 6 + time) * 3 + c] = rng.random_range(-5.0..5.0);
                }
            }
        }
        let y2 = conv1d(&t(&[2, 6, 3], &perturbed), &f, &b, Padding::Causal).unwrap();
        for bi in 0..2 {
            for time in 0..=cut {
                let at = (bi * 6 + time) * 2;
                assert_eq!(
                    y.data()[at..at + 2].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    y2.data()[at..at + 2].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}

#[test]
fn concat_examples_and_gradient() {
    let c = t(&[1], &[1.0]).concat_last_dim(&t(&[1], &[2.0])).unwrap();
    assert_eq!(c.data(), &[1.0, 2.0]);
    let c = random(&[2, 3], 1).concat_last_dim(&random(&[2, 1], 2)).unwrap();
    assert_eq!(c.shape(), &[2, 4]);
    assert!(matches!(
        random(&[2, 3], 1).concat_last_dim(&random(&[3, 1], 2)),
        Err(Error::Dimension { .. })
    ));
    let report = grad_check(
        |x| x[0].concat_last_dim(&x[1]),
        &[random(&[2, 3], 27), random(&[2, 1], 28)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| Tensor::concat(&[&x[0], &x[1], &x[0]], 1),
        &[random(&[2, 1, 3], 29), random(&[2, 2, 3], 30)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn shape_ops_gradients() {
    let report = grad_check(|x| x[0].narrow(1, 1, 2), &[random(&[2, 4, 3], 31)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(|x| x[0].transpose_last2(), &[random(&[2, 4, 3], 32)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(|x| x[0].reshape(vec![8, 3]), &[random(&[2, 4, 3], 33)], 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| x[0].index_select0(&[1, 0, 1]),
        &[random(&[2, 4, 3], 34)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| x[0].gather_rows(&[2, 0, 2, 1], &[2, 2]),
        &[random(&[3, 4], 35)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| x[0].select_last(&[0, 3, 1, 1]),
        &[random(&[2, 2, 4], 36)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    let report = grad_check(
        |x| x[0].standardize_last_dim(1e-5),
        &[random(&[3, 6], 37)],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gather_out_of_range_is_a_vocabulary_error() {
    assert!(matches!(
        random(&[3, 2], 1).gather_rows(&[3], &[1]),
        Err(Error::Vocabulary { id: 3, size: 3 })
    ));
}

#[test]
fn backward_of_sums() {
    let tape = Tape::new();
    let x = tape.leaf(&random(&[2, 3, 2], 38));
    let g = x.sum_all().unwrap().backward().unwrap();
    assert_eq!(g.get_data(&x).unwrap(), &[1.0; 12]);

    let tape = Tape::new();
    let x = tape.leaf(&random(&[5], 39));
    let g = x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
    let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get_data(&x).unwrap(), expected.as_slice());
}

#[test]
fn backward_accumulates_over_reuse_and_consumes_tape() {
    let tape = Tape::new();
    let x = tape.leaf(&t(&[1], &[3.0]));
    let y = x.add(&x).unwrap().mul(&x).unwrap().sum_all().unwrap(); // 2x^2
    let g = y.backward().unwrap();
    assert_eq!(g.get_data(&x).unwrap(), &[12.0]);
    assert!(tape.is_consumed());
    assert!(x.add(&x).is_err());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(&random(&[3], 1));
    assert!(matches!(x.backward(), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaf_has_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&random(&[3], 1));
    let unused = tape.leaf(&random(&[3], 2));
    let g = x.sum_all().unwrap().backward().unwrap();
    assert!(g.get(&unused).is_none());
    assert!(g.get(&x).is_some());
}

#[test]
fn constants_do_not_record() {
    let a = random(&[3, 3], 1);
    let b = a.matmul(&a).unwrap().sigmoid().unwrap();
    assert!(!b.requires_grad());
}

#[test]
fn grad_check_detects_a_wrong_backward_rule() {
    // f(x) = x * stop_gradient(x): autodiff sees only one factor, so the
    // analytic gradient is x while the true gradient is 2x.
    let report = grad_check(|x| x[0].mul(&x[0].detach()), &[random(&[4], 40)], 1e-5, 1e-6).unwrap();
    assert!(!report.passed());
    assert!(report.overall_max() > 1e-6);
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in 0u64..1000,
        scale in 0.1f64..50.0,
    ) {
        let x = random(&[rows, cols], seed).scale(scale).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut allowed: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.7)).collect();
        for r in 0..rows {
            allowed[r * cols] = true;
        }
        let mask = Mask::new(vec![rows, cols], allowed.clone()).unwrap();
        let s = x.softmax_last_dim(Some(&mask)).unwrap();
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, &p) in row.iter().enumerate() {
                prop_assert!(p >= 0.0);
                if !allowed[r * cols + j] {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn broadcast_gradient_is_sum_over_broadcast_axes(seed in 0u64..1000, rows in 1usize..5) {
        let a = random(&[rows, 3], seed);
        let b = random(&[3], seed + 1);
        let tape = Tape::new();
        let (la, lb) = (tape.leaf(&a), tape.leaf(&b));
        let w = random(&[rows, 3], seed + 2);
        let loss = la.mul(&lb).unwrap().mul(&w).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let gb = g.get_data(&lb).unwrap();
        for j in 0..3 {
            let expected: f64 = (0..rows).map(|r| a.data()[r * 3 + j] * w.data()[r * 3 + j]).sum();
            prop_assert!((gb[j] - expected).abs() < 1e-12);
        }
    }
}
