use dsg_core::ops::{self, per_channel_moments};
use dsg_core::rng::{normal_tensor, seeded};
use dsg_core::Tensor;
use proptest::prelude::*;

#[test]
fn non_finite_values_are_rejected() {
    assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    assert!(Tensor::<f64>::new(vec![3], vec![1.0, 2.0]).is_err());
}

#[test]
fn identity_kernel_convolution() {
    let x = normal_tensor::<f64>(&[2, 1, 5, 5], 1.0, &mut seeded(1)).unwrap();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = Tensor::new(vec![1, 1, 3, 3], k).unwrap();
    let y = ops::conv2d(&x, &w, &Tensor::zeros(vec![1]), 1, 1).unwrap();
    assert_eq!(y, x);
}

proptest! {
    #[test]
    fn moments_of_shifted_input(
        shift in -100.0f64..100.0,
        seed in 0u64..1000,
    ) {
        let x = normal_tensor::<f64>(&[2, 3, 4, 4], 1.0, &mut seeded(seed)).unwrap();
        let y = x.map(|v| v + shift).unwrap();
        let (mx, sx) = per_channel_moments(&x, true).unwrap();
        let (my, sy) = per_channel_moments(&y, true).unwrap();
        for i in 0..mx.len() {
            prop_assert!((my.data()[i] - mx.data()[i] - shift).abs() < 1e-9);
            prop_assert!((sy.data()[i] - sx.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_is_idempotent_and_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let x = Tensor::from_slice(&v).unwrap();
        let r = ops::relu(&x);
        prop_assert!(r.data().iter().all(|&a| a >= 0.0));
        prop_assert_eq!(ops::relu(&r), r);
    }

    #[test]
    fn constant_channels_have_exact_moments(c in -50.0f64..50.0, n in 2usize..6) {
        let x = Tensor::full(vec![1, 2, n, n], c);
        let (m, s) = per_channel_moments(&x, false).unwrap();
        prop_assert!(m.data().iter().all(|&v| v == c));
        prop_assert!(s.data().iter().all(|&v| v == 0.0));
    }
}
