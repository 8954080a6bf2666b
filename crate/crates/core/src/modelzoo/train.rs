//! Reference-model training: minibatch SGD with momentum on softmax
//! cross-entropy, training-mode batch normalization (batch statistics,
//! running statistics updated with momentum `bn_momentum`).
//!
//! This path has its own layer caches and parameter gradients; the
//! input-only [`crate::graph::Graph`] is not involved.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::ops::{self, ConvDims};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{evaluate_accuracy, Dataset, Layer, Network, BN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Mean cross-entropy over the last epoch (NaN-free; `None` for 0 epochs).
    pub final_loss: Option<f64>,
}

enum Cache<S> {
    Conv { input: Tensor<S>, dims: ConvDims },
    Bn { xhat: Vec<S>, inv_std: Vec<S>, c: usize, plane: usize },
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<usize>, in_len: usize },
    Gap { plane: usize },
    Dense { input: Vec<S>, fin: usize },
    Identity,
}

/// Parameter gradients of one layer, in [`Layer::params`] order.
type Grads<S> = Vec<Vec<S>>;

/// Trains a copy of `net`; returns it with final accuracies.
pub fn train_reference<S: Scalar>(
    net: &Network<S>,
    train: &Dataset<S>,
    val: Option<&Dataset<S>>,
    cfg: &TrainConfig,
) -> Result<(Network<S>, TrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    net.check_batch(train.images())?;
    train.check_labels(net.classes())?;
    if let Some(v) = val {
        net.check_batch(v.images())?;
        v.check_labels(net.classes())?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || !(0.0..1.0).contains(&cfg.momentum) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::invalid(format!(
            "need lr > 0, momentum in [0, 1), weight_decay >= 0; got {}, {}, {}",
            cfg.lr, cfg.momentum, cfg.weight_decay
        )));
    }
    let mut net = net.clone();
    let mut velocity: Vec<Grads<S>> = net
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|(_, t)| vec![S::zero(); t.len()]).collect())
        .collect();
    let labels = train.labels()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng::seeded(cfg.seed);
    let mut final_loss = None;
    let row = train.images().len() / train.len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let [c, h, w] = net.input_shape();
            let mut data = Vec::with_capacity(chunk.len() * row);
            for &i in chunk {
                data.extend_from_slice(&train.images().data()[i * row..(i + 1) * row]);
            }
            let x = Tensor::new(vec![chunk.len(), c, h, w], data)?;
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = sgd_step(&mut net, &mut velocity, &x, &y, cfg)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "training loss became non-finite in epoch {epoch}"
                )));
            }
            loss_sum += loss;
            batches += 1;
        }
        final_loss = Some(loss_sum / batches as f64);
    }
    let train_accuracy = evaluate_accuracy(&net, train)?;
    let val_accuracy = val.map(|v| evaluate_accuracy(&net, v)).transpose()?;
    Ok((
        net,
        TrainReport {
            train_accuracy,
            val_accuracy,
            final_loss,
        },
    ))
}

/// One forward/backward/update on a minibatch; returns the mean loss.
fn sgd_step<S: Scalar>(
    net: &mut Network<S>,
    velocity: &mut [Grads<S>],
    x: &Tensor<S>,
    y: &[u32],
    cfg: &TrainConfig,
) -> Result<f64> {
    let bn_m = S::of(cfg.bn_momentum);
    let eps = S::of(BN_EPS);
    let mut caches = Vec::with_capacity(net.layers().len());
    let mut stack = Vec::new();
    let mut cur = x.clone();
    for layer in net.layers_mut() {
        let (out, cache) = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let dims = ConvDims::new(&cur, weight, bias, *stride, *pad)?;
                let out = ops::conv2d(&cur, weight, bias, *stride, *pad)?;
                (out, Cache::Conv { input: cur, dims })
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (mean, std) = ops::per_channel_moments(&cur, false)?;
                let (b, c, h, w) = cur.dims4()?;
                let plane = h * w;
                let inv_std: Vec<S> = std
                    .data()
                    .iter()
                    .map(|&s| S::one() / (s * s + eps).sqrt())
                    .collect();
                let mut xhat = Vec::with_capacity(cur.len());
                let mut out = Vec::with_capacity(cur.len());
                for bi in 0..b {
                    for (ch, &is) in inv_std.iter().enumerate() {
                        let m = mean.data()[ch];
                        let (g, be) = (gamma.data()[ch], beta.data()[ch]);
                        for &v in &cur.data()[(bi * c + ch) * plane..][..plane] {
                            let xh = (v - m) * is;
                            xhat.push(xh);
                            out.push(g * xh + be);
                        }
                    }
                }
                for ch in 0..c {
                    let rm = &mut running_mean.data_mut()[ch];
                    *rm = (S::one() - bn_m) * *rm + bn_m * mean.data()[ch];
                    let rv = &mut running_var.data_mut()[ch];
                    let var = std.data()[ch] * std.data()[ch];
                    *rv = (S::one() - bn_m) * *rv + bn_m * var;
                }
                (
                    Tensor::from_op(cur.shape().to_vec(), out, "batchnorm(train)")?,
                    Cache::Bn {
                        xhat,
                        inv_std,
                        c,
                        plane,
                    },
                )
            }
            Layer::Relu => {
                let mask = cur.data().iter().map(|&v| v > S::zero()).collect();
                (ops::relu(&cur), Cache::Relu { mask })
            }
            Layer::MaxPool { size, stride } => {
                let (out, argmax) = ops::maxpool2d(&cur, *size, *stride)?;
                (
                    out,
                    Cache::Pool {
                        argmax,
                        in_len: cur.len(),
                    },
                )
            }
            Layer::GlobalAvgPool => {
                let (_, _, h, w) = cur.dims4()?;
                (ops::global_avgpool(&cur)?, Cache::Gap { plane: h * w })
            }
            Layer::Dense { weight, bias } => {
                let out = ops::dense(&cur, weight, bias)?;
                let fin = weight.shape()[1];
                (
                    out,
                    Cache::Dense {
                        input: cur.into_data(),
                        fin,
                    },
                )
            }
            Layer::ResidualBegin => {
                stack.push(cur.clone());
                (cur, Cache::Identity)
            }
            Layer::ResidualAdd => {
                let skip = stack.pop().ok_or_else(|| Error::shape("unmatched residual_add"))?;
                (ops::residual_add(&cur, &skip)?, Cache::Identity)
            }
        };
        caches.push(cache);
        cur = out;
    }

    // Softmax cross-entropy, mean over the batch.
    let b = y.len();
    let k = net.classes();
    let inv_b = S::one() / S::of_usize(b);
    let mut loss = 0.0;
    let mut g: Vec<S> = Vec::with_capacity(b * k);
    for (row, &label) in cur.data().chunks_exact(k).zip(y) {
        let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let z = exps.iter().fold(S::zero(), |a, &v| a + v);
        loss -= ((exps[label as usize] / z).ln()).to_f64_lossy();
        for (j, &e) in exps.iter().enumerate() {
            let p = e / z;
            let t = if j == label as usize { S::one() } else { S::zero() };
            g.push((p - t) * inv_b);
        }
    }
    loss /= b as f64;

    let mut grads: Vec<Grads<S>> = vec![Vec::new(); net.layers().len()];
    let mut gstack: Vec<Vec<S>> = Vec::new();
    for (i, (layer, cache)) in net.layers().iter().zip(&caches).enumerate().rev() {
        g = match (layer, cache) {
            (Layer::Conv { weight, .. }, Cache::Conv { input, dims }) => {
                let (dw, db) = ops::conv2d_backward_params(dims, input.data(), &g);
                grads[i] = vec![dw, db];
                ops::conv2d_backward_input(dims, weight.data(), &g)
            }
            (
                Layer::BatchNorm { gamma, .. },
                Cache::Bn {
                    xhat,
                    inv_std,
                    c,
                    plane,
                },
            ) => bn_train_backward(&g, xhat, inv_std, gamma.data(), *c, *plane, &mut grads[i]),
            (Layer::Relu, Cache::Relu { mask }) => g
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { v } else { S::zero() })
                .collect(),
            (Layer::MaxPool { .. }, Cache::Pool { argmax, in_len }) => {
                let mut dx = vec![S::zero(); *in_len];
                for (&v, &src) in g.iter().zip(argmax) {
                    dx[src] += v;
                }
                dx
            }
            (Layer::GlobalAvgPool, Cache::Gap { plane }) => {
                let n = S::of_usize(*plane);
                g.iter()
                    .flat_map(|&v| std::iter::repeat_n(v / n, *plane))
                    .collect()
            }
            (Layer::Dense { weight, .. }, Cache::Dense { input, fin }) => {
                let fout = weight.shape()[0];
                let mut dw = vec![S::zero(); fout * fin];
                let mut db = vec![S::zero(); fout];
                let mut dx = vec![S::zero(); input.len()];
                for ((grow, xrow), dxr) in g
                    .chunks_exact(fout)
                    .zip(input.chunks_exact(*fin))
                    .zip(dx.chunks_exact_mut(*fin))
                {
                    for (o, &gv) in grow.iter().enumerate() {
                        db[o] += gv;
                        let wrow = &weight.data()[o * fin..(o + 1) * fin];
                        let dwrow = &mut dw[o * fin..(o + 1) * fin];
                        for j in 0..*fin {
                            dwrow[j] += gv * xrow[j];
                            dxr[j] += gv * wrow[j];
                        }
                    }
                }
                grads[i] = vec![dw, db];
                dx
            }
            (Layer::ResidualAdd, Cache::Identity) => {
                gstack.push(g.clone());
                g
            }
            (Layer::ResidualBegin, Cache::Identity) => {
                let skip = gstack.pop().expect("validated residual pairing");
                g.iter().zip(skip).map(|(&a, b)| a + b).collect()
            }
            _ => unreachable!("cache kind follows layer kind"),
        };
    }

    let lr = S::of(cfg.lr);
    let mom = S::of(cfg.momentum);
    let wd = S::of(cfg.weight_decay);
    for ((layer, lg), vel) in net.layers_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let params: Vec<(&mut Tensor<S>, bool)> = match layer {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                vec![(weight, true), (bias, false)]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![(gamma, false), (beta, false)],
            _ => continue,
        };
        for (((p, decay), pg), v) in params.into_iter().zip(lg).zip(vel.iter_mut()) {
            for ((w, gr), vv) in p.data_mut().iter_mut().zip(pg).zip(v.iter_mut()) {
                let gr = if decay { gr + wd * *w } else { gr };
                *vv = mom * *vv + gr;
                *w -= lr * *vv;
            }
            p.ensure_finite("sgd update")?;
        }
    }
    Ok(loss)
}

fn bn_train_backward<S: Scalar>(
    g: &[S],
    xhat: &[S],
    inv_std: &[S],
    gamma: &[S],
    c: usize,
    plane: usize,
    grads: &mut Grads<S>,
) -> Vec<S> {
    let b = g.len() / (c * plane);
    let n = S::of_usize(b * plane);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for j in base..base + plane {
                dgamma[ch] += g[j] * xhat[j];
                dbeta[ch] += g[j];
            }
        }
    }
    let mut dx = vec![S::zero(); g.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let k = gamma[ch] * inv_std[ch] / n;
            for j in base..base + plane {
                dx[j] = k * (n * g[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
            }
        }
    }
    *grads = vec![dgamma, dbeta];
    dx
}
