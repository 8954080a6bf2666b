//! Reverse-mode gradients against central finite differences, for every
//! primitive and for the full generation objective.

use dsg_core::datagen::{self, Mode, SlackMargins};
use dsg_core::graph::{Graph, Var};
use dsg_core::modelzoo::{build_reference_cnn, Layer, Network};
use dsg_core::rng::{normal_tensor, seeded};
use dsg_core::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;
const REL: f64 = 1e-5;
const ABS: f64 = 1e-8;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_tensor(shape, 1.0, &mut seeded(seed)).unwrap()
}

/// Pushes values at least `gap` away from zero so kinks stay out of reach
/// of the finite-difference step.
fn away_from_zero(t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
        .unwrap()
}

fn close(a: f64, n: f64) -> bool {
    let d = (a - n).abs();
    d <= ABS || d <= REL * a.abs().max(n.abs())
}

/// Checks `d/dx sum(c * f(x))` for a random fixed `c`.
fn check<'w>(x: &Tensor<f64>, build: impl Fn(&mut Graph<'w, f64>, Var) -> Var) {
    let eval = |x: &Tensor<f64>| -> (f64, Graph<'w, f64>, Var) {
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let out = build(&mut g, xv);
        let c = randn(&[g.value(out).len()], 99);
        let prod = g.mul_const(out, c.data()).unwrap();
        let loss = g.sum(prod).unwrap();
        (g.value(loss).data()[0], g, loss)
    };
    let (_, g, loss) = eval(x);
    let analytic = g.backprop_to_input(loss).unwrap();
    for i in 0..x.len() {
        let mut xp = x.clone().into_data();
        let mut xm = xp.clone();
        xp[i] += H;
        xm[i] -= H;
        let fp = eval(&Tensor::new(x.shape().to_vec(), xp).unwrap()).0;
        let fm = eval(&Tensor::new(x.shape().to_vec(), xm).unwrap()).0;
        let numeric = (fp - fm) / (2.0 * H);
        let a = analytic.data()[i];
        assert!(close(a, numeric), "coordinate {i}: analytic {a}, numeric {numeric}");
    }
}

#[test]
fn conv2d_padded_and_strided() {
    let w = randn(&[4, 3, 3, 3], 1);
    let b = randn(&[4], 2);
    let x = randn(&[2, 3, 5, 5], 3);
    check(&x, |g, v| g.conv2d(v, &w, &b, 1, 1).unwrap());
    check(&x, |g, v| g.conv2d(v, &w, &b, 2, 1).unwrap());
    check(&x, |g, v| g.conv2d(v, &w, &b, 1, 0).unwrap());
}

#[test]
fn batchnorm_affine() {
    let mean = randn(&[3], 4);
    let std = randn(&[3], 5).map(|v| v.abs() + 0.5).unwrap();
    let gamma = randn(&[3], 6);
    let beta = randn(&[3], 7);
    check(&randn(&[2, 3, 4, 4], 8), |g, v| {
        g.batchnorm(v, &mean, &std, &gamma, &beta).unwrap()
    });
}

#[test]
fn relu_abs_square_off_kinks() {
    let x = away_from_zero(randn(&[3, 7], 9), 1e-3);
    check(&x, |g, v| g.relu(v));
    check(&x, |g, v| g.abs(v).unwrap());
    check(&x, |g, v| g.square(v).unwrap());
}

#[test]
fn maxpool_with_separated_values() {
    // A shuffled ramp: all values distinct by far more than the step.
    let n = 2 * 2 * 6 * 6;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    let perm = randn(&[n], 10);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| perm.data()[a].partial_cmp(&perm.data()[b]).unwrap());
    vals = idx.iter().map(|&i| vals[i]).collect();
    let x = Tensor::new(vec![2, 2, 6, 6], vals).unwrap();
    check(&x, |g, v| g.maxpool2d(v, 2, 2).unwrap());
    check(&x, |g, v| g.maxpool2d(v, 3, 3).unwrap());
}

#[test]
fn pooling_dense_and_add() {
    let x = randn(&[2, 3, 2, 2], 11);
    check(&x, |g, v| g.global_avgpool(v).unwrap());
    let w = randn(&[5, 12], 12);
    let b = randn(&[5], 13);
    check(&x, |g, v| g.dense(v, &w, &b).unwrap());
    check(&x, |g, v| {
        let s = g.square(v).unwrap();
        g.add(v, s).unwrap()
    });
}

#[test]
fn channel_moments() {
    let x = randn(&[3, 2, 3, 3], 14);
    for per_sample in [true, false] {
        check(&x, |g, v| g.moments(v, per_sample).unwrap().0);
        check(&x, |g, v| g.moments(v, per_sample).unwrap().1);
        check(&x, |g, v| {
            let (m, s) = g.moments(v, per_sample).unwrap();
            let m2 = g.square(m).unwrap();
            g.add(m2, s).unwrap()
        });
    }
}

#[test]
fn reductions_and_reshaping_ops() {
    let x = randn(&[4, 3], 15);
    check(&x, |g, v| g.shift(v, &[0.5, -1.0, 2.0]).unwrap());
    check(&x, |g, v| g.row_sum(v).unwrap());
    check(&x, |g, v| g.scale(v, -2.5).unwrap());
    check(&x, |g, v| g.sum(v).unwrap());
    let f: Vec<f64> = (0..12).map(|i| i as f64 - 4.0).collect();
    check(&x, |g, v| g.mul_const(v, &f).unwrap());
    check(&x, |g, v| {
        let r = g.row_sum(v).unwrap();
        let s = g.square(r).unwrap();
        g.stack_columns(&[r, s, r]).unwrap()
    });
}

/// Two-BN toy network with non-trivial stored statistics, so hinges are
/// active for some channels and slack for others.
fn toy_net(seed: u64) -> Network<f64> {
    let net = build_reference_cnn::<f64>("toy2bn", [1, 8, 8], 3, seed).unwrap();
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Layer::BatchNorm { gamma, beta, running_mean, .. } => Layer::BatchNorm {
                gamma: gamma.clone(),
                beta: beta.clone(),
                running_mean: randn(running_mean.shape(), seed + i as u64).map(|v| 0.3 * v).unwrap(),
                running_var: randn(running_mean.shape(), seed + 50 + i as u64)
                    .map(|v| 0.5 + v.abs())
                    .unwrap(),
            },
            other => other.clone(),
        })
        .collect();
    Network::new(layers, net.input_shape(), net.classes()).unwrap()
}

#[test]
fn full_objective_every_mode() {
    let net = toy_net(3);
    let bn = net.extract_bn_stats();
    let probe = net.capture_stats_chunked(&randn(&[64, 1, 8, 8], 21)).unwrap();
    let margins = datagen::compute_margins(&probe, &bn, 0.5).unwrap();
    let x = randn(&[2, 1, 8, 8], 22);
    for mode in Mode::ALL {
        let m = if mode.uses_margins() {
            margins.clone()
        } else {
            SlackMargins::zeros(&bn)
        };
        let w = if mode.uses_enhancement() {
            datagen::lse_weights(2, 2).unwrap()
        } else {
            datagen::uniform_weights(2, 2).unwrap()
        };
        let f = |x: &Tensor<f64>| {
            datagen::objective_and_gradient(&net, x, &bn, &m, &w)
                .unwrap()
                .0
                .total
        };
        let (_, grad) = datagen::objective_and_gradient(&net, &x, &bn, &m, &w).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone().into_data();
            let mut xm = xp.clone();
            xp[i] += H;
            xm[i] -= H;
            let numeric = (f(&Tensor::new(x.shape().to_vec(), xp).unwrap())
                - f(&Tensor::new(x.shape().to_vec(), xm).unwrap()))
                / (2.0 * H);
            let a = grad.data()[i];
            assert!(close(a, numeric), "{mode} coordinate {i}: {a} vs {numeric}");
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let net = toy_net(4);
    let bn = net.extract_bn_stats();
    let m = SlackMargins::zeros(&bn);
    let w = datagen::lse_weights(3, 2).unwrap();
    let x = randn(&[3, 1, 8, 8], 5);
    let a = datagen::objective_and_gradient(&net, &x, &bn, &m, &w).unwrap();
    let b = datagen::objective_and_gradient(&net, &x, &bn, &m, &w).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradient_random_shapes(
        b in 1usize..3, ci in 1usize..3, co in 1usize..4,
        h in 3usize..7, w in 3usize..7, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let geom = dsg_core::ops::WindowGeom::new(h, w, k, k, stride, pad);
        prop_assume!(geom.is_ok());
        let weight = randn(&[co, ci, k, k], seed);
        let bias = randn(&[co], seed + 1);
        check(&randn(&[b, ci, h, w], seed + 2), |g, v| g.conv2d(v, &weight, &bias, stride, pad).unwrap());
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let weight = randn(&[2, 2, 3, 3], seed);
        let zero = Tensor::zeros(vec![2]);
        let x = randn(&[1, 2, 5, 5], seed + 1);
        let y = randn(&[1, 2, 5, 5], seed + 2);
        let conv = |t: &Tensor<f64>| dsg_core::ops::conv2d(t, &weight, &zero, 1, 1).unwrap();
        let comb = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + b).collect(),
        ).unwrap();
        let lhs = conv(&comb);
        let (cx, cy) = (conv(&x), conv(&y));
        for i in 0..lhs.len() {
            let rhs = alpha * cx.data()[i] + cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
