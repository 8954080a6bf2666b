//! Tape-based reverse-mode differentiation with respect to a single input
//! tensor.
//!
//! Parameters (conv/dense weights, BN statistics) are borrowed as constants;
//! only the recorded input receives a gradient. Operations are appended to a
//! tape in execution order and [`Graph::backprop_to_input`] replays it in
//! exact reverse order, summing every contribution that reaches a slot.

use crate::error::{Error, Result};
use crate::ops::{self, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value slot in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a, S> {
    Input,
    Conv2d {
        x: Var,
        weight: &'a Tensor<S>,
        dims: ConvDims,
    },
    /// `gamma / std` per channel; the shift has zero derivative.
    BatchNorm { x: Var, scale: Vec<S> },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, plane: usize },
    Dense { x: Var, weight: &'a Tensor<S> },
    Add { a: Var, b: Var },
    ChannelMean { x: Var, per_sample: bool },
    ChannelStd { x: Var, per_sample: bool, mean: Vec<S> },
    Shift { x: Var },
    Abs { x: Var },
    Square { x: Var },
    RowSum { x: Var, cols: usize },
    StackColumns { cols: Vec<Var> },
    MulConst { x: Var, factors: Vec<S> },
    Scale { x: Var, factor: S },
    Sum { x: Var },
}

/// Recorded forward computation.
pub struct Graph<'a, S> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<'a, S>>,
    input: Option<Var>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            input: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<S>, op: Op<'a, S>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Records the tensor that gradients are taken with respect to.
    pub fn input(&mut self, x: Tensor<S>) -> Result<Var> {
        if self.input.is_some() {
            return Err(Error::invalid("graph already has an input"));
        }
        let v = self.push(x, Op::Input);
        self.input = Some(v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: &'a Tensor<S>,
        bias: &'a Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xin = self.value(x);
        let dims = ConvDims::new(xin, weight, bias, stride, pad)?;
        let y = ops::conv2d(xin, weight, bias, stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, weight, dims }))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        mean: &Tensor<S>,
        std: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
    ) -> Result<Var> {
        let y = ops::batchnorm_apply(self.value(x), mean, std, gamma, beta)?;
        let scale = gamma
            .data()
            .iter()
            .zip(std.data())
            .map(|(&g, &s)| g / s)
            .collect();
        Ok(self.push(y, Op::BatchNorm { x, scale }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), size, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let y = ops::global_avgpool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x, plane: h * w }))
    }

    pub fn dense(&mut self, x: Var, weight: &'a Tensor<S>, bias: &'a Tensor<S>) -> Result<Var> {
        let y = ops::dense(self.value(x), weight, bias)?;
        Ok(self.push(y, Op::Dense { x, weight }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::residual_add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Differentiable per-channel population moments; see
    /// [`ops::per_channel_moments`] for the reduction sets.
    pub fn moments(&mut self, x: Var, per_sample: bool) -> Result<(Var, Var)> {
        let (mean, std) = ops::per_channel_moments(self.value(x), per_sample)?;
        let saved = mean.data().to_vec();
        let m = self.push(mean, Op::ChannelMean { x, per_sample });
        let s = self.push(
            std,
            Op::ChannelStd {
                x,
                per_sample,
                mean: saved,
            },
        );
        Ok((m, s))
    }

    /// `x - c`, with `c` broadcast along the leading axes (its length must
    /// equal the trailing extent of `x`).
    pub fn shift(&mut self, x: Var, c: &[S]) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("non-empty shape");
        if c.len() != last {
            return Err(Error::shape(format!(
                "shift: constant of length {} against trailing extent {last}",
                c.len()
            )));
        }
        let data = xv
            .data()
            .chunks_exact(last)
            .flat_map(|row| row.iter().zip(c).map(|(&a, &b)| a - b))
            .collect();
        let y = Tensor::from_op(xv.shape().to_vec(), data, "shift")?;
        Ok(self.push(y, Op::Shift { x }))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.abs())?;
        Ok(self.push(y, Op::Abs { x }))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * v)?;
        Ok(self.push(y, Op::Square { x }))
    }

    /// `[R, C] -> [R]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = match xv.shape() {
            &[r, c] => (r, c),
            s => return Err(Error::shape(format!("row_sum expects 2-D, got {s:?}"))),
        };
        let data = xv
            .data()
            .chunks_exact(cols)
            .map(|r| r.iter().fold(S::zero(), |a, &v| a + v))
            .collect();
        let y = Tensor::from_op(vec![rows], data, "row_sum")?;
        Ok(self.push(y, Op::RowSum { x, cols }))
    }

    /// Stacks equal-length 1-D values as the columns of an `[R, K]` matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = cols
            .first()
            .ok_or_else(|| Error::invalid("stack_columns of zero values"))?;
        let rows = self.value(*first).len();
        for c in cols {
            let v = self.value(*c);
            if v.shape() != [rows] {
                return Err(Error::shape(format!(
                    "stack_columns: expected [{rows}], got {:?}",
                    v.shape()
                )));
            }
        }
        let k = cols.len();
        let mut data = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for c in cols {
                data.push(self.value(*c).data()[r]);
            }
        }
        let y = Tensor::from_op(vec![rows, k], data, "stack_columns")?;
        Ok(self.push(y, Op::StackColumns { cols: cols.to_vec() }))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, factors: &[S]) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.len() {
            return Err(Error::shape(format!(
                "mul_const: {} factors for {} elements",
                factors.len(),
                xv.len()
            )));
        }
        let data = xv.data().iter().zip(factors).map(|(&v, &f)| v * f).collect();
        let y = Tensor::from_op(xv.shape().to_vec(), data, "mul_const")?;
        Ok(self.push(
            y,
            Op::MulConst {
                x,
                factors: factors.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor)?;
        Ok(self.push(y, Op::Scale { x, factor }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::from_op(vec![1], vec![self.value(x).sum()], "sum")?;
        Ok(self.push(y, Op::Sum { x }))
    }

    /// Gradient of the scalar at `loss` with respect to the recorded input.
    pub fn backprop_to_input(&self, loss: Var) -> Result<Tensor<S>> {
        let input = self
            .input
            .ok_or_else(|| Error::invalid("graph has no recorded input"))?;
        if self.is_empty() {
            return Err(Error::invalid("empty graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for slot in (input.0 + 1..=loss.0).rev() {
            let Some(g) = grads[slot].take() else { continue };
            self.backward_op(slot, &g, &mut grads)?;
        }
        match grads[input.0].take() {
            Some(g) => Tensor::from_op(self.value(input).shape().to_vec(), g, "backprop_to_input"),
            None => Err(Error::invalid("loss does not depend on the graph input")),
        }
    }

    fn backward_op(&self, slot: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let zeros = |v: Var| vec![S::zero(); self.values[v.0].len()];
        // Accumulates `contrib` into the gradient buffer of `v`.
        let mut acc = |v: Var, contrib: Vec<S>| match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        };
        match &self.ops[slot] {
            Op::Input => {}
            Op::Conv2d { x, weight, dims } => {
                acc(*x, ops::conv2d_backward_input(dims, weight.data(), g));
            }
            Op::BatchNorm { x, scale } => {
                let (_, c, h, w) = self.values[x.0].dims4()?;
                let plane = h * w;
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * scale[(i / plane) % c])
                    .collect();
                acc(*x, dx);
            }
            Op::Relu { x } => {
                // Subgradient 0 at exactly 0.
                let dx = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = zeros(*x);
                for (&gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool { x, plane } => {
                let n = S::of_usize(*plane);
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / n, *plane))
                    .collect();
                acc(*x, dx);
            }
            Op::Dense { x, weight } => {
                let fout = weight.shape()[0];
                let fin = weight.shape()[1];
                let wt = weight.data();
                let mut dx = zeros(*x);
                for (grow, dxr) in g.chunks_exact(fout).zip(dx.chunks_exact_mut(fin)) {
                    for (o, &gv) in grow.iter().enumerate() {
                        for (d, &wv) in dxr.iter_mut().zip(&wt[o * fin..(o + 1) * fin]) {
                            *d += gv * wv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::ChannelMean { x, per_sample } => {
                let xv = &self.values[x.0];
                let mut dx = zeros(*x);
                for_each_group(xv, *per_sample, |grp, idx, n| {
                    let share = g[grp] / S::of_usize(n);
                    dx[idx] += share;
                })?;
                acc(*x, dx);
            }
            Op::ChannelStd {
                x,
                per_sample,
                mean,
            } => {
                let std = self.values[slot].data();
                if let Some(grp) = std.iter().position(|&s| s == S::zero()) {
                    return Err(Error::numerical(format!(
                        "std backward: zero variance in channel group {grp}"
                    )));
                }
                let xv = &self.values[x.0];
                let data = xv.data();
                let mut dx = zeros(*x);
                for_each_group(xv, *per_sample, |grp, idx, n| {
                    dx[idx] += g[grp] * (data[idx] - mean[grp]) / (S::of_usize(n) * std[grp]);
                })?;
                acc(*x, dx);
            }
            Op::Shift { x } => acc(*x, g.to_vec()),
            Op::Abs { x } => {
                let dx = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&gv, &xv)| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Square { x } => {
                let two = S::of(2.0);
                let dx = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&gv, &xv)| two * xv * gv)
                    .collect();
                acc(*x, dx);
            }
            Op::RowSum { x, cols } => {
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv, *cols))
                    .collect();
                acc(*x, dx);
            }
            Op::StackColumns { cols } => {
                let k = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    acc(*c, g.iter().skip(j).step_by(k).copied().collect());
                }
            }
            Op::MulConst { x, factors } => {
                acc(*x, g.iter().zip(factors).map(|(&gv, &f)| gv * f).collect());
            }
            Op::Scale { x, factor } => acc(*x, g.iter().map(|&gv| gv * *factor).collect()),
            Op::Sum { x } => acc(*x, vec![g[0]; self.values[x.0].len()]),
        }
        Ok(())
    }
}

/// Calls `f(group, flat_index, group_size)` for every element of a 4-D
/// tensor, where groups are (sample, channel) pairs or channels.
fn for_each_group<S: Scalar>(
    x: &Tensor<S>,
    per_sample: bool,
    mut f: impl FnMut(usize, usize, usize),
) -> Result<()> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let n = if per_sample { plane } else { b * plane };
    for bi in 0..b {
        for ch in 0..c {
            let grp = if per_sample { bi * c + ch } else { ch };
            let base = (bi * c + ch) * plane;
            for idx in base..base + plane {
                f(grp, idx, n);
            }
        }
    }
    Ok(())
}
