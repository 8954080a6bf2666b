use dsg_core::modelzoo::{build_reference_cnn, glyphs, Layer, Network};
use dsg_core::quantize::{
    calibrate_activations, eval_quantized, fake_quant, fit_ema, fit_minmax, fit_mse, fit_percentile,
    quant_sse, quantize_weights, CalibratorKind, QuantParams,
};
use dsg_core::rng::{normal_tensor, seeded};
use dsg_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Independent scalar reference: nearest integer by comparing the two
/// neighbours explicitly (ties to the larger magnitude), then clamp.
fn oracle(x: f64, scale: f64, zp: i64, bits: u8) -> f64 {
    let v = x / scale;
    let lo = v.floor();
    let hi = lo + 1.0;
    let (dlo, dhi) = (v - lo, hi - v);
    let r = if dhi < dlo || (dhi == dlo && hi.abs() > lo.abs()) {
        hi
    } else {
        lo
    };
    let qmax = ((1i64 << bits) - 1) as f64;
    let q = (r + zp as f64).max(0.0).min(qmax);
    (q - zp as f64) * scale
}

fn random_params(rng: &mut impl Rng) -> QuantParams<f64> {
    let bits = rng.random_range(2..=8u8);
    let scale = 10f64.powf(rng.random_range(-4.0..1.0));
    let zp = rng.random_range(0..(1i64 << bits));
    QuantParams::new(bits, scale, zp).unwrap()
}

#[test]
fn scalar_oracle_bit_exact() {
    let mut rng = seeded(2024);
    for case in 0..1000 {
        let p = random_params(&mut rng);
        let x = match case % 4 {
            // exact half-steps
            0 => (rng.random_range(-300i64..300) as f64 + 0.5) * p.scale(),
            // on-grid values
            1 => rng.random_range(-300i64..300) as f64 * p.scale(),
            _ => rng.random_range(-1.0..1.0) * p.scale() * 400.0,
        };
        let got = fake_quant(&Tensor::from_slice(&[x]).unwrap(), &p).data()[0];
        let want = oracle(x, p.scale(), p.zero_point(), p.bits());
        assert_eq!(got.to_bits(), want.to_bits(), "x={x} params={p:?}");
    }
}

#[test]
fn idempotent_and_bounded_on_many_tensors() {
    let mut rng = seeded(7);
    for _ in 0..100_000 {
        let p = random_params(&mut rng);
        let n = rng.random_range(1..8);
        let data: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * p.scale() * 300.0)
            .collect();
        let x = Tensor::from_slice(&data).unwrap();
        let once = fake_quant(&x, &p);
        assert_eq!(fake_quant(&once, &p), once);
        let (lo, hi) = p.bounds();
        assert!(once.data().iter().all(|&v| v >= lo && v <= hi));
    }
}

#[test]
fn symmetric_data_centres_the_zero_point() {
    let mut rng = seeded(3);
    for _ in 0..100 {
        let bits = rng.random_range(2..=8u8);
        let half: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..5.0)).collect();
        let data: Vec<f64> = half.iter().flat_map(|&v| [v, -v]).collect();
        let x = Tensor::from_slice(&data).unwrap();
        let mid = ((1i64 << bits) - 1) as f64 / 2.0;
        for p in [fit_minmax(&x, bits).unwrap(), fit_percentile(&x, bits, 0.99).unwrap()] {
            assert!((p.zero_point() as f64 - mid).abs() <= 0.5, "{p:?}");
        }
    }
}

fn integer_weight_net() -> Network<f64> {
    let net = build_reference_cnn::<f64>("toy1bn", [1, 8, 8], 3, 1).unwrap();
    let layers = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv { weight, bias, stride, pad } => Layer::Conv {
                weight: ramp(weight.shape()),
                bias: bias.clone(),
                stride: *stride,
                pad: *pad,
            },
            Layer::Dense { weight, bias } => Layer::Dense {
                weight: ramp(weight.shape()),
                bias: bias.clone(),
            },
            other => other.clone(),
        })
        .collect();
    Network::new(layers, net.input_shape(), net.classes()).unwrap()
}

/// Integers spanning exactly `[0, 255]`.
fn ramp(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (i * 255 / (n - 1)) as f64).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn weight_quantization_identity_and_idempotence() {
    let net = integer_weight_net();
    let q = quantize_weights(&net, Some(8)).unwrap();
    assert_eq!(q.network(), &net);
    assert!(q.weight_params().all(|(_, p)| p.scale() == 1.0 && p.zero_point() == 0));

    let base = build_reference_cnn::<f64>("cnn5bn", [1, 28, 28], 10, 0).unwrap();
    for bits in [2, 4, 8] {
        let once = quantize_weights(&base, Some(bits)).unwrap();
        let twice = quantize_weights(once.network(), Some(bits)).unwrap();
        assert_eq!(once.network(), twice.network());
    }
    assert_eq!(quantize_weights(&base, None).unwrap().network(), &base);
}

#[test]
fn activation_calibration_properties() {
    let net = build_reference_cnn::<f64>("res6bn", [1, 12, 12], 10, 0).unwrap();
    let data = glyphs::generate::<f64>(20, 12, 1).unwrap();
    let calib = normal_tensor::<f64>(&[10, 1, 12, 12], 1.0, &mut seeded(4)).unwrap();
    let q = quantize_weights(&net, Some(8)).unwrap();

    assert!(eval_quantized(&q, &data).is_err());
    assert!(q.site_calibration(0).is_none());
    assert!(eval_quantized(&q.clone().without_activation_quant(), &data).is_ok());

    let a = calibrate_activations(&q, &calib, CalibratorKind::MinMax, 8).unwrap();
    let b = calibrate_activations(&a, &calib, CalibratorKind::MinMax, 8).unwrap();
    assert_eq!(a, b);
    let p1 = calibrate_activations(&q, &calib, CalibratorKind::Percentile(1.0), 8).unwrap();
    for s in 0..a.sites().len() {
        assert_eq!(a.site_calibration(s).unwrap().params, p1.site_calibration(s).unwrap().params);
    }
    assert_eq!(eval_quantized(&a, &data).unwrap(), eval_quantized(&p1, &data).unwrap());
    assert_eq!(eval_quantized(&a, &data).unwrap(), eval_quantized(&a, &data).unwrap());

    // MinMax bounds every observed calibration value.
    for s in 0..a.sites().len() {
        let cal = a.site_calibration(s).unwrap();
        let (lo, hi) = cal.params.bounds();
        let scale = cal.params.scale();
        assert!(lo <= cal.range.0 + scale / 2.0 && hi >= cal.range.1 - scale / 2.0);
    }

    for kind in [CalibratorKind::Ema(0.9), CalibratorKind::Mse(20)] {
        let c = calibrate_activations(&q, &calib, kind, 4).unwrap();
        assert!(eval_quantized(&c, &data).is_ok());
    }
    assert!(calibrate_activations(&q, &Tensor::zeros(vec![2, 1, 8, 8]), CalibratorKind::MinMax, 8).is_err());
}

#[test]
fn residual_network_sites() {
    let net = build_reference_cnn::<f64>("res6bn", [1, 12, 12], 10, 0).unwrap();
    let q = quantize_weights(&net, Some(8)).unwrap();
    let kinds: Vec<&str> = q.sites().iter().map(|s| s.name.rsplit('.').next().unwrap()).collect();
    assert!(kinds.contains(&"residual_add"));
    assert!(kinds.contains(&"maxpool"));
    assert_eq!(kinds.last(), Some(&"global_avgpool"));
    assert!(q.sites().iter().all(|s| s.layer + 1 < net.layers().len()));
    let layers = net.layers();
    for s in q.sites() {
        // A site never sits right before a BN or ReLU that belongs to it.
        assert!(!matches!(layers.get(s.layer + 1), Some(Layer::BatchNorm { .. } | Layer::Relu)));
    }
}

proptest! {
    #[test]
    fn minmax_error_within_half_step(
        data in prop::collection::vec(-50.0f64..50.0, 2..64),
        bits in 2u8..=8,
    ) {
        let x = Tensor::from_slice(&data).unwrap();
        let p = fit_minmax(&x, bits).unwrap();
        let (lo, hi) = x.min_max();
        prop_assume!(hi > lo);
        let y = fake_quant(&x, &p);
        for (a, b) in data.iter().zip(y.data()) {
            prop_assert!((a - b).abs() <= p.scale() / 2.0 * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn mse_never_worse_than_minmax(
        data in prop::collection::vec(-5.0f64..5.0, 2..64),
        bits in 2u8..=8,
    ) {
        let x = Tensor::from_slice(&data).unwrap();
        let mse = fit_mse(&x, bits, 100).unwrap();
        let mm = fit_minmax(&x, bits).unwrap();
        prop_assert!(quant_sse(&data, &mse) <= quant_sse(&data, &mm));
    }

    #[test]
    fn calibrator_equivalences(
        data in prop::collection::vec(-5.0f64..5.0, 1..64),
        bits in 2u8..=8,
        repeats in 1usize..4,
    ) {
        let x = Tensor::from_slice(&data).unwrap();
        let mm = fit_minmax(&x, bits).unwrap();
        prop_assert_eq!(fit_percentile(&x, bits, 1.0).unwrap(), mm);
        prop_assert_eq!(fit_ema(&vec![x.clone(); repeats], bits, 0.9).unwrap(), mm);
    }
}
