//! Forward kernels for the layer kinds of the reference CNNs, plus the
//! input-gradient (and, for training, parameter-gradient) kernels that the
//! graph and the trainer share.
//!
//! All reductions run in a fixed left-to-right order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output geometry of a 2-D window operation (conv or pool).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeom {
    pub fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::shape(format!(
                "window {kh}x{kw} does not fit padded extent {ph}x{pw}"
            )));
        }
        if !(ph - kh).is_multiple_of(stride) || !(pw - kw).is_multiple_of(stride) {
            return Err(Error::shape(format!(
                "output extent not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        Ok(WindowGeom {
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Input coordinate for output `o` and kernel offset `k`, if inside the
    /// unpadded extent `n`.
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let p = o * self.stride + k;
        if p < self.pad || p - self.pad >= n {
            None
        } else {
            Some(p - self.pad)
        }
    }
}

/// Validated dimensions of a conv call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub geom: WindowGeom,
}

impl ConvDims {
    pub fn new<S: Scalar>(
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        let geom = WindowGeom::new(h, w, kh, kw, stride, pad)?;
        Ok(ConvDims {
            batch,
            cin,
            h,
            w,
            cout,
            geom,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.geom.out_h, self.geom.out_w]
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let d = ConvDims::new(input, weight, bias, stride, pad)?;
    let g = d.geom;
    let (x, wt, bs) = (input.data(), weight.data(), bias.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![S::zero(); d.batch * d.cout * plane];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let o = &mut out[(b * d.cout + co) * plane..][..plane];
            o.iter_mut().for_each(|v| *v = bs[co]);
            for ci in 0..d.cin {
                let xin = &x[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let wk = &wt[(co * d.cin + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        for oy in 0..g.out_h {
                            let Some(iy) = g.src(oy, ky, d.h) else { continue };
                            let orow = &mut o[oy * g.out_w..][..g.out_w];
                            let xrow = &xin[iy * d.w..][..d.w];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                if let Some(ix) = g.src(ox, kx, d.w) {
                                    *ov += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(d.out_shape(), out, "conv2d")
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_backward_input<S: Scalar>(d: &ConvDims, weight: &[S], grad_out: &[S]) -> Vec<S> {
    let g = d.geom;
    let plane = g.out_h * g.out_w;
    let mut dx = vec![S::zero(); d.batch * d.cin * d.h * d.w];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let go = &grad_out[(b * d.cout + co) * plane..][..plane];
            for ci in 0..d.cin {
                let dxp = &mut dx[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let wk = &weight[(co * d.cin + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        for oy in 0..g.out_h {
                            let Some(iy) = g.src(oy, ky, d.h) else { continue };
                            let grow = &go[oy * g.out_w..][..g.out_w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                if let Some(ix) = g.src(ox, kx, d.w) {
                                    dxp[iy * d.w + ix] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of conv2d w.r.t. weight and bias (training only).
pub fn conv2d_backward_params<S: Scalar>(
    d: &ConvDims,
    input: &[S],
    grad_out: &[S],
) -> (Vec<S>, Vec<S>) {
    let g = d.geom;
    let plane = g.out_h * g.out_w;
    let mut dw = vec![S::zero(); d.cout * d.cin * g.kh * g.kw];
    let mut db = vec![S::zero(); d.cout];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let go = &grad_out[(b * d.cout + co) * plane..][..plane];
            db[co] += go.iter().fold(S::zero(), |a, &v| a + v);
            for ci in 0..d.cin {
                let xin = &input[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let dwk = &mut dw[(co * d.cin + ci) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = S::zero();
                        for oy in 0..g.out_h {
                            let Some(iy) = g.src(oy, ky, d.h) else { continue };
                            let grow = &go[oy * g.out_w..][..g.out_w];
                            let xrow = &xin[iy * d.w..][..d.w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                if let Some(ix) = g.src(ox, kx, d.w) {
                                    acc += gv * xrow[ix];
                                }
                            }
                        }
                        dwk[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

fn check_channel_vec<S: Scalar>(name: &str, t: &Tensor<S>, c: usize) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(format!(
            "{name}: shape {:?}, expected [{c}]",
            t.shape()
        )));
    }
    Ok(())
}

/// Inference-mode batch normalization with stored statistics:
/// `gamma * (x - mean) / std + beta` per channel.
pub fn batchnorm_apply<S: Scalar>(
    input: &Tensor<S>,
    mean: &Tensor<S>,
    std: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = input.dims4()?;
    for (n, t) in [("mean", mean), ("std", std), ("gamma", gamma), ("beta", beta)] {
        check_channel_vec(n, t, c)?;
    }
    if let Some(ch) = std.data().iter().position(|&s| s <= S::zero()) {
        return Err(Error::invalid(format!(
            "batchnorm: std must be positive, channel {ch} has {}",
            std.data()[ch]
        )));
    }
    let plane = h * w;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for ch in 0..c {
            let (m, s, g, be) = (
                mean.data()[ch],
                std.data()[ch],
                gamma.data()[ch],
                beta.data()[ch],
            );
            out.extend(
                x[(bi * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| g * (v - m) / s + be),
            );
        }
    }
    Tensor::from_op(input.shape().to_vec(), out, "batchnorm")
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    Tensor::from_op(input.shape().to_vec(), data, "relu").expect("relu preserves finiteness")
}

/// Max pooling; also returns, per output element, the flat input index of
/// the first maximum in scan order.
pub fn maxpool2d<S: Scalar>(
    input: &Tensor<S>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    let g = WindowGeom::new(h, w, size, size, stride, 0)?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((
        Tensor::from_op(vec![b, c, g.out_h, g.out_w], out, "maxpool2d")?,
        arg,
    ))
}

/// Mean over spatial positions: `[B,C,H,W] -> [B,C]`.
pub fn global_avgpool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = input.dims4()?;
    let plane = h * w;
    let n = S::of_usize(plane);
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().fold(S::zero(), |a, &v| a + v) / n)
        .collect();
    Tensor::from_op(vec![b, c], out, "global_avgpool")
}

/// Fully connected layer on the flattened trailing axes:
/// `out[b] = W x[b] + bias`, with `W` of shape `[out, in]`.
pub fn dense<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let b = input.shape()[0];
    let fin = input.len() / b;
    let (fout, win) = match weight.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape(format!("dense: weight must be 2-D, got {s:?}"))),
    };
    if win != fin {
        return Err(Error::shape(format!(
            "dense: input has {fin} features, weight expects {win}"
        )));
    }
    check_channel_vec("dense bias", bias, fout)?;
    let (x, wt, bs) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(b * fout);
    for xr in x.chunks_exact(fin) {
        for (o, wr) in wt.chunks_exact(fin).enumerate() {
            let acc = xr.iter().zip(wr).fold(S::zero(), |a, (&xv, &wv)| a + xv * wv);
            out.push(acc + bs[o]);
        }
    }
    Tensor::from_op(vec![b, fout], out, "dense")
}

pub fn residual_add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "residual_add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_op(a.shape().to_vec(), data, "residual_add")
}

/// Per-channel population moments of a `[B,C,H,W]` tensor.
///
/// With `per_sample` the reduction is over `{H,W}` and both outputs have
/// shape `[B,C]`; otherwise it is over `{B,H,W}` and outputs are `[C]`.
pub fn per_channel_moments<S: Scalar>(
    input: &Tensor<S>,
    per_sample: bool,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (b, c, h, w) = input.dims4()?;
    let plane = h * w;
    let count = if per_sample { plane } else { b * plane };
    if count < 2 {
        return Err(Error::invalid(format!(
            "per_channel_moments: {count} position(s) per channel, need at least 2"
        )));
    }
    let x = input.data();
    let n = S::of_usize(count);
    let groups = if per_sample { b * c } else { c };
    let mut means = Vec::with_capacity(groups);
    let mut stds = Vec::with_capacity(groups);
    // Each group is a list of planes; iterate them in batch order.
    let planes_of = |g: usize| -> Vec<&[S]> {
        if per_sample {
            vec![&x[g * plane..][..plane]]
        } else {
            (0..b).map(|bi| &x[(bi * c + g) * plane..][..plane]).collect()
        }
    };
    for g in 0..groups {
        let planes = planes_of(g);
        // Shifted by the first element so constant inputs give exact moments.
        let pivot = planes[0][0];
        let shifted = planes
            .iter()
            .flat_map(|p| p.iter())
            .fold(S::zero(), |a, &v| a + (v - pivot));
        let mean = pivot + shifted / n;
        let var = planes
            .iter()
            .flat_map(|p| p.iter())
            .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        means.push(mean);
        stds.push(var.sqrt());
    }
    let shape = if per_sample { vec![b, c] } else { vec![c] };
    Ok((
        Tensor::from_op(shape.clone(), means, "per_channel_moments")?,
        Tensor::from_op(shape, stds, "per_channel_moments")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_1x1_scales() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[2.]), &t(&[1], &[0.]), 1, 0).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = t(&[2, 2, 3, 3], &(0..36).map(|v| v as f64).collect::<Vec<_>>());
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        let y = conv2d(&x, &w, &t(&[3], &[1.5, 1.5, 1.5]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &t(&[1], &[0.]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        let b = Tensor::zeros(vec![1]);
        // (4 - 3) / 2 is not integral
        assert!(conv2d(&x, &w, &b, 2, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 3, 3]), &b, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 1, 5, 5]), &b, 1, 0).is_err());
        assert!(conv2d(&x, &w, &b, 0, 0).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let one = |v: f64| t(&[1], &[v]);
        let x = t(&[1, 1, 1, 1], &[3.]);
        let y = batchnorm_apply(&x, &one(1.), &one(2.), &one(4.), &one(-1.)).unwrap();
        assert_eq!(y.data(), &[3.]);

        let x = t(&[2, 1, 1, 2], &[0.5, -2., 7., 1.]);
        let id = batchnorm_apply(&x, &one(0.), &one(1.), &one(1.), &one(0.)).unwrap();
        assert_eq!(id, x);

        let at_mean = batchnorm_apply(&Tensor::full(vec![1, 1, 2, 2], 0.3), &one(0.3), &one(5.), &one(9.), &one(0.25)).unwrap();
        assert!(at_mean.data().iter().all(|&v| v == 0.25));

        assert!(batchnorm_apply(&x, &one(0.), &one(0.), &one(1.), &one(0.)).is_err());
    }

    #[test]
    fn elementwise_and_pooling() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(global_avgpool(&x).unwrap().data(), &[2.5]);
        let (p, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(p.data(), &[4.]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (_, arg) = maxpool2d(&Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0), 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn dense_identity() {
        let x = t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]);
        let mut eye = vec![0.; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.;
        }
        let y = dense(&x, &t(&[3, 3], &eye), &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn residual_add_checks_shape() {
        let a = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(residual_add(&a, &Tensor::zeros(vec![2, 1])).is_err());
    }

    #[test]
    fn moments_examples() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let (m, s) = per_channel_moments(&x, true).unwrap();
        assert_eq!(m.data(), &[2.5]);
        assert!((s.data()[0] - 1.25f64.sqrt()).abs() < 1e-15);
        let (mb, sb) = per_channel_moments(&x, false).unwrap();
        assert_eq!(mb.data(), m.data());
        assert_eq!(sb.data(), s.data());

        let c = Tensor::full(vec![3, 2, 2, 2], 0.7);
        let (m, s) = per_channel_moments(&c, true).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.7));
        assert!(s.data().iter().all(|&v| v == 0.0));

        assert!(per_channel_moments(&Tensor::<f64>::zeros(vec![2, 1, 1, 1]), true).is_err());
        assert!(per_channel_moments(&Tensor::<f64>::zeros(vec![2, 1, 1, 1]), false).is_ok());
    }
}
