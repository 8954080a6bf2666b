//! Small batch-norm CNNs: architecture registry, inference, BN statistic
//! capture, reference training, and persistence.

mod arch;
pub mod dataset;
pub mod glyphs;
pub mod io;
pub mod train;

pub use arch::{build_reference_cnn, ARCHITECTURES};
pub use dataset::Dataset;
pub use io::{load_model, save_model};
pub use train::{train_reference, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{Graph, Var};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon added to the running variance when deriving sigma.
pub const BN_EPS: f64 = 1e-5;

/// Samples per forward chunk in dataset-level passes.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Conv {
        weight: Tensor<S>,
        bias: Tensor<S>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        gamma: Tensor<S>,
        beta: Tensor<S>,
        running_mean: Tensor<S>,
        running_var: Tensor<S>,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        weight: Tensor<S>,
        bias: Tensor<S>,
    },
    ResidualBegin,
    ResidualAdd,
}

impl<S: Scalar> Layer<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "global_avgpool",
            Layer::Dense { .. } => "dense",
            Layer::ResidualBegin => "residual_begin",
            Layer::ResidualAdd => "residual_add",
        }
    }

    /// Inference-mode sigma of a batchnorm layer.
    pub fn bn_sigma(&self) -> Option<Tensor<S>> {
        match self {
            Layer::BatchNorm { running_var, .. } => Some(sigma_from_var(running_var)),
            _ => None,
        }
    }

    /// Named parameter tensors in serialization order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            _ => Vec::new(),
        }
    }
}

fn sigma_from_var<S: Scalar>(var: &Tensor<S>) -> Tensor<S> {
    let eps = S::of(BN_EPS);
    var.map(|v| (v + eps).sqrt()).expect("finite sigma")
}

/// Per-BN-layer stored statistics `(mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<S> {
    pub mu: Vec<Tensor<S>>,
    pub sigma: Vec<Tensor<S>>,
}

impl<S: Scalar> BnStats<S> {
    pub fn layers(&self) -> usize {
        self.mu.len()
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.mu[layer].len()
    }
}

/// Moments of one BN layer's input, one row per sample (or a single row for
/// batch-level moments).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments<S> {
    pub mean: Tensor<S>,
    pub std: Tensor<S>,
}

/// Per-sample (or batch-level), per-BN-layer, per-channel moments of the
/// BN-layer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats<S> {
    pub per_sample: bool,
    pub layers: Vec<LayerMoments<S>>,
}

impl<S: Scalar> FeatureStats<S> {
    /// Rows per layer: the batch size when per-sample, otherwise 1.
    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, |l| l.mean.shape()[0])
    }

    pub fn mean(&self, sample: usize, layer: usize) -> &[S] {
        let c = self.layers[layer].mean.shape()[1];
        &self.layers[layer].mean.data()[sample * c..][..c]
    }

    pub fn std(&self, sample: usize, layer: usize) -> &[S] {
        let c = self.layers[layer].std.shape()[1];
        &self.layers[layer].std.data()[sample * c..][..c]
    }

    /// Row-wise concatenation of per-sample stats of several batches.
    pub fn concat(parts: &[FeatureStats<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero FeatureStats"))?;
        let layers = (0..first.layers.len())
            .map(|i| {
                let means: Vec<_> = parts.iter().map(|p| p.layers[i].mean.clone()).collect();
                let stds: Vec<_> = parts.iter().map(|p| p.layers[i].std.clone()).collect();
                Ok(LayerMoments {
                    mean: Tensor::concat_batch(&means)?,
                    std: Tensor::concat_batch(&stds)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FeatureStats {
            per_sample: first.per_sample,
            layers,
        })
    }
}

/// Observation points of a plain forward pass.
pub trait ForwardHook<S: Scalar> {
    /// Called with the input of the `bn_index`-th batchnorm layer.
    fn bn_input(&mut self, _bn_index: usize, _x: &Tensor<S>) -> Result<()> {
        Ok(())
    }

    /// Called with the output of layer `layer_index`; the returned tensor
    /// replaces it downstream.
    fn layer_output(&mut self, _layer_index: usize, y: Tensor<S>) -> Result<Tensor<S>> {
        Ok(y)
    }
}

impl<S: Scalar> ForwardHook<S> for () {}

struct MomentCapture<S> {
    per_sample: bool,
    layers: Vec<LayerMoments<S>>,
}

impl<S: Scalar> ForwardHook<S> for MomentCapture<S> {
    fn bn_input(&mut self, _bn_index: usize, x: &Tensor<S>) -> Result<()> {
        let (mean, std) = ops::per_channel_moments(x, self.per_sample)?;
        let (mean, std) = if self.per_sample {
            (mean, std)
        } else {
            let c = mean.len();
            (mean.reshape(vec![1, c])?, std.reshape(vec![1, c])?)
        };
        self.layers.push(LayerMoments { mean, std });
        Ok(())
    }
}

/// Ordered layer graph of a small CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    layers: Vec<Layer<S>>,
    input_shape: [usize; 3],
    classes: usize,
}

impl<S: Scalar> Network<S> {
    /// Validates layer compatibility, residual pairing, BN parameters, and
    /// that the network has at least one BN layer and ends in `classes`
    /// logits.
    pub fn new(layers: Vec<Layer<S>>, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let net = Network {
            layers,
            input_shape,
            classes,
        };
        let shapes = net.infer_shapes()?;
        if shapes.last() != Some(&vec![classes]) {
            return Err(Error::shape(format!(
                "network output {:?} does not match {classes} classes",
                shapes.last()
            )));
        }
        if net.bn_count() == 0 {
            return Err(Error::invalid("network needs at least one batchnorm layer"));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of batchnorm layers.
    pub fn bn_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::BatchNorm { .. }))
            .count()
    }

    /// Per-sample output shape of every layer.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 || self.classes == 0 {
            return Err(Error::shape("input extents and class count must be positive"));
        }
        let mut cur = vec![c0, h0, w0];
        let mut stack: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |m: String| Error::shape(format!("layer {i} ({}): {m}", layer.kind()));
            cur = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = cur[..] else {
                        return Err(err(format!("needs [C,H,W] input, got {cur:?}")));
                    };
                    let probe = Tensor::<S>::zeros(vec![1, c, h, w]);
                    let d = ops::ConvDims::new(&probe, weight, bias, *stride, *pad)
                        .map_err(|e| err(e.to_string()))?;
                    vec![d.cout, d.geom.out_h, d.geom.out_w]
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let c = cur[0];
                    if cur.len() != 3 {
                        return Err(err(format!("needs [C,H,W] input, got {cur:?}")));
                    }
                    for t in [gamma, beta, running_mean, running_var] {
                        if t.shape() != [c] {
                            return Err(err(format!("parameter shape {:?} vs {c} channels", t.shape())));
                        }
                    }
                    if running_var.data().iter().any(|&v| v < S::zero()) {
                        return Err(err("negative running_var".into()));
                    }
                    cur
                }
                Layer::Relu => cur,
                Layer::MaxPool { size, stride } => {
                    let [c, h, w] = cur[..] else {
                        return Err(err(format!("needs [C,H,W] input, got {cur:?}")));
                    };
                    let g = ops::WindowGeom::new(h, w, *size, *size, *stride, 0)
                        .map_err(|e| err(e.to_string()))?;
                    vec![c, g.out_h, g.out_w]
                }
                Layer::GlobalAvgPool => {
                    if cur.len() != 3 {
                        return Err(err(format!("needs [C,H,W] input, got {cur:?}")));
                    }
                    vec![cur[0]]
                }
                Layer::Dense { weight, bias } => {
                    let fin: usize = cur.iter().product();
                    match weight.shape() {
                        &[o, i] if i == fin && bias.shape() == [o] => vec![o],
                        s => return Err(err(format!("weight {s:?} for {fin} inputs"))),
                    }
                }
                Layer::ResidualBegin => {
                    stack.push(cur.clone());
                    cur
                }
                Layer::ResidualAdd => {
                    let saved = stack
                        .pop()
                        .ok_or_else(|| err("residual_add without residual_begin".into()))?;
                    if saved != cur {
                        return Err(err(format!("skip shape {saved:?} vs {cur:?}")));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        if !stack.is_empty() {
            return Err(Error::shape("unmatched residual_begin"));
        }
        Ok(out)
    }

    /// `(mu, sigma)` of every BN layer, `sigma = sqrt(running_var + 1e-5)`.
    pub fn extract_bn_stats(&self) -> BnStats<S> {
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for layer in &self.layers {
            if let Layer::BatchNorm { running_mean, .. } = layer {
                mu.push(running_mean.clone());
                sigma.push(layer.bn_sigma().expect("batchnorm"));
            }
        }
        BnStats { mu, sigma }
    }

    pub fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(format!(
                "batch sample shape {:?} does not match network input {:?}",
                [c, h, w],
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Inference forward pass with observation hooks.
    pub fn forward_with(&self, batch: &Tensor<S>, hook: &mut dyn ForwardHook<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut cur = batch.clone();
        let mut stack = Vec::new();
        let mut bn_index = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => ops::conv2d(&cur, weight, bias, *stride, *pad)?,
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    ..
                } => {
                    hook.bn_input(bn_index, &cur)?;
                    bn_index += 1;
                    let sigma = layer.bn_sigma().expect("batchnorm");
                    ops::batchnorm_apply(&cur, running_mean, &sigma, gamma, beta)?
                }
                Layer::Relu => ops::relu(&cur),
                Layer::MaxPool { size, stride } => ops::maxpool2d(&cur, *size, *stride)?.0,
                Layer::GlobalAvgPool => ops::global_avgpool(&cur)?,
                Layer::Dense { weight, bias } => ops::dense(&cur, weight, bias)?,
                Layer::ResidualBegin => {
                    stack.push(cur.clone());
                    cur
                }
                Layer::ResidualAdd => {
                    let skip = stack.pop().ok_or_else(|| Error::shape("unmatched residual_add"))?;
                    ops::residual_add(&cur, &skip)?
                }
            };
            cur = hook.layer_output(i, y)?;
        }
        Ok(cur)
    }

    pub fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_with(batch, &mut ())
    }

    /// Logits plus the moments of every BN layer's input (pre-normalization).
    pub fn forward_capture(&self, batch: &Tensor<S>, per_sample: bool) -> Result<(Tensor<S>, FeatureStats<S>)> {
        let mut cap = MomentCapture {
            per_sample,
            layers: Vec::new(),
        };
        let logits = self.forward_with(batch, &mut cap)?;
        Ok((
            logits,
            FeatureStats {
                per_sample,
                layers: cap.layers,
            },
        ))
    }

    /// Per-sample BN-input moments of a large batch, computed in fixed-size
    /// chunks (optionally in parallel).
    pub fn capture_stats_chunked(&self, batch: &Tensor<S>) -> Result<FeatureStats<S>> {
        let b = batch.shape()[0];
        let ranges: Vec<(usize, usize)> = (0..b)
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(b)))
            .collect();
        let parts = exec::map_ordered(&ranges, |&(s, e)| {
            let chunk = batch.slice_batch(s, e)?;
            Ok(self.forward_capture(&chunk, true)?.1)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        FeatureStats::concat(&parts)
    }

    /// Differentiable forward pass recorded on `graph`. Returns the logits
    /// and, per BN layer, the `(mean, std)` variables of its input.
    pub fn forward_graph<'a>(
        &'a self,
        graph: &mut Graph<'a, S>,
        x: Var,
        per_sample: bool,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        self.check_batch(graph.value(x))?;
        let mut cur = x;
        let mut stack = Vec::new();
        let mut captured = Vec::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => graph.conv2d(cur, weight, bias, *stride, *pad)?,
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    ..
                } => {
                    captured.push(graph.moments(cur, per_sample)?);
                    let sigma = layer.bn_sigma().expect("batchnorm");
                    graph.batchnorm(cur, running_mean, &sigma, gamma, beta)?
                }
                Layer::Relu => graph.relu(cur),
                Layer::MaxPool { size, stride } => graph.maxpool2d(cur, *size, *stride)?,
                Layer::GlobalAvgPool => graph.global_avgpool(cur)?,
                Layer::Dense { weight, bias } => graph.dense(cur, weight, bias)?,
                Layer::ResidualBegin => {
                    stack.push(cur);
                    cur
                }
                Layer::ResidualAdd => {
                    let skip = stack.pop().ok_or_else(|| Error::shape("unmatched residual_add"))?;
                    graph.add(cur, skip)?
                }
            };
        }
        Ok((cur, captured))
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => Layer::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                    stride: *stride,
                    pad: *pad,
                },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => Layer::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: running_mean.cast(),
                    running_var: running_var.cast(),
                },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { size, stride } => Layer::MaxPool {
                    size: *size,
                    stride: *stride,
                },
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::ResidualBegin => Layer::ResidualBegin,
                Layer::ResidualAdd => Layer::ResidualAdd,
            })
            .collect();
        Network {
            layers,
            input_shape: self.input_shape,
            classes: self.classes,
        }
    }
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of correctly classified samples of `dataset` under `forward`,
/// evaluated in fixed chunks.
pub(crate) fn count_correct<S, F>(dataset: &Dataset<S>, forward: F) -> Result<usize>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>> + Sync + Send,
{
    let labels = dataset.labels()?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(n)))
        .collect();
    let counts = exec::map_ordered(&ranges, |&(s, e)| -> Result<usize> {
        let logits = forward(&dataset.images().slice_batch(s, e)?)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(k)
            .zip(&labels[s..e])
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count())
    });
    counts.into_iter().sum()
}

/// Top-1 accuracy of `net` on a labeled dataset.
pub fn evaluate_accuracy<S: Scalar>(net: &Network<S>, dataset: &Dataset<S>) -> Result<f64> {
    let correct = count_correct(dataset, |x| net.forward(x))?;
    Ok(correct as f64 / dataset.len() as f64)
}
