//! Registry of reference architectures.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Layer, Network};

/// Names accepted by [`build_reference_cnn`].
pub const ARCHITECTURES: &[&str] = &["cnn5bn", "res6bn", "toy1bn", "toy2bn"];

struct Builder<'r, S> {
    layers: Vec<Layer<S>>,
    rng: &'r mut Rng,
}

impl<S: Scalar> Builder<'_, S> {
    /// 3x3 same-padding conv with He-normal weights, zero bias.
    fn conv(&mut self, cin: usize, cout: usize) -> Result<&mut Self> {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        self.layers.push(Layer::Conv {
            weight: rng::normal_tensor(&[cout, cin, 3, 3], std, self.rng)?,
            bias: Tensor::zeros(vec![cout]),
            stride: 1,
            pad: 1,
        });
        Ok(self)
    }

    fn bn(&mut self, c: usize) -> &mut Self {
        self.layers.push(Layer::BatchNorm {
            gamma: Tensor::full(vec![c], S::one()),
            beta: Tensor::zeros(vec![c]),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::full(vec![c], S::one()),
        });
        self
    }

    fn conv_bn_relu(&mut self, cin: usize, cout: usize) -> Result<&mut Self> {
        self.conv(cin, cout)?.bn(cout).push(Layer::Relu);
        Ok(self)
    }

    fn push(&mut self, l: Layer<S>) -> &mut Self {
        self.layers.push(l);
        self
    }

    fn pool(&mut self) -> &mut Self {
        self.push(Layer::MaxPool { size: 2, stride: 2 })
    }

    /// `x + bn(conv(relu(bn(conv(x)))))` followed by ReLU.
    fn residual(&mut self, c: usize) -> Result<&mut Self> {
        self.push(Layer::ResidualBegin);
        self.conv_bn_relu(c, c)?.conv(c, c)?.bn(c);
        self.push(Layer::ResidualAdd).push(Layer::Relu);
        Ok(self)
    }

    fn head(&mut self, cin: usize, classes: usize) -> Result<&mut Self> {
        let std = (2.0 / cin as f64).sqrt();
        self.layers.push(Layer::GlobalAvgPool);
        self.layers.push(Layer::Dense {
            weight: rng::normal_tensor(&[classes, cin], std, self.rng)?,
            bias: Tensor::zeros(vec![classes]),
        });
        Ok(self)
    }
}

/// Builds a randomly initialized network from the registry.
///
/// * `cnn5bn`: three conv-BN-ReLU blocks (8, 16, 32 channels), max pooling
///   after the first two, global average pooling, dense head. 3 BN layers.
/// * `res6bn`: stem conv-BN-ReLU, a residual block, max pooling, a widening
///   conv-BN-ReLU and a second residual block, then the pooled head.
///   6 BN layers, 2 skip connections.
/// * `toy1bn` / `toy2bn`: one or two narrow conv-BN-ReLU blocks; used for
///   gradient checks and quick experiments.
pub fn build_reference_cnn<S: Scalar>(
    arch: &str,
    input_shape: [usize; 3],
    classes: usize,
    seed: u64,
) -> Result<Network<S>> {
    let mut rng = rng::seeded(seed);
    let mut b = Builder {
        layers: Vec::new(),
        rng: &mut rng,
    };
    let cin = input_shape[0];
    match arch {
        "cnn5bn" => {
            b.conv_bn_relu(cin, 8)?.pool();
            b.conv_bn_relu(8, 16)?.pool();
            b.conv_bn_relu(16, 32)?.head(32, classes)?;
        }
        "res6bn" => {
            b.conv_bn_relu(cin, 8)?.residual(8)?.pool();
            b.conv_bn_relu(8, 16)?.residual(16)?.head(16, classes)?;
        }
        "toy1bn" => {
            b.conv_bn_relu(cin, 4)?.head(4, classes)?;
        }
        "toy2bn" => {
            b.conv_bn_relu(cin, 3)?.pool();
            b.conv_bn_relu(3, 4)?.head(4, classes)?;
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown architecture {other:?}; known: {}",
                ARCHITECTURES.join(", ")
            )))
        }
    }
    let layers = b.layers;
    Network::new(layers, input_shape, classes)
}
