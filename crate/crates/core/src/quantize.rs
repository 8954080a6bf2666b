//! Uniform affine fake quantization: per-tensor weight quantization,
//! activation-range calibrators, and fake-quantized evaluation.
//!
//! Codes are unsigned, `qmin = 0`, `qmax = 2^bits - 1`; rounding is half away
//! from zero.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::datagen::percentile;
use crate::error::{Error, Result};
use crate::modelzoo::{count_correct, Dataset, ForwardHook, Layer, Network};
use crate::scalar::{sci17, Scalar};
use crate::tensor::Tensor;

/// Scale used when the fitted range is empty (constant input).
pub const DEGENERATE_SCALE: f64 = 1e-8;

/// Samples per EMA update during activation calibration.
pub const EMA_SUB_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams<S> {
    bits: u8,
    scale: S,
    zero_point: i64,
}

impl<S: Scalar> QuantParams<S> {
    pub fn new(bits: u8, scale: S, zero_point: i64) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::invalid(format!("bits {bits} outside [2, 8]")));
        }
        if !(scale > S::zero() && scale.is_finite()) {
            return Err(Error::invalid(format!("scale {scale} must be positive")));
        }
        let qmax = (1i64 << bits) - 1;
        if !(0..=qmax).contains(&zero_point) {
            return Err(Error::invalid(format!(
                "zero_point {zero_point} outside [0, {qmax}]"
            )));
        }
        Ok(QuantParams {
            bits,
            scale,
            zero_point,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> S {
        self.scale
    }

    pub fn zero_point(&self) -> i64 {
        self.zero_point
    }

    pub fn qmin(&self) -> i64 {
        0
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Smallest and largest representable values.
    pub fn bounds(&self) -> (S, S) {
        let zp = S::of(self.zero_point as f64);
        (
            (S::of(self.qmin() as f64) - zp) * self.scale,
            (S::of(self.qmax() as f64) - zp) * self.scale,
        )
    }

    /// Quantize-dequantize one value.
    #[inline]
    pub fn apply(&self, x: S) -> S {
        let zp = S::of(self.zero_point as f64);
        let q = ((x / self.scale).round() + zp)
            .max(S::of(self.qmin() as f64))
            .min(S::of(self.qmax() as f64));
        (q - zp) * self.scale
    }
}

pub fn fake_quant<S: Scalar>(x: &Tensor<S>, p: &QuantParams<S>) -> Tensor<S> {
    x.map(|v| p.apply(v)).expect("fake quantization stays finite")
}

/// Affine parameters mapping `[lo, hi]` onto the code range.
///
/// The range is first widened to contain zero; otherwise the clamped zero
/// point would shift the grid and leave part of the range unrepresentable.
/// An empty range (constant input) gets [`DEGENERATE_SCALE`] and zero point 0.
pub fn fit_range<S: Scalar>(lo: S, hi: S, bits: u8) -> Result<QuantParams<S>> {
    if !(2..=8).contains(&bits) {
        return Err(Error::invalid(format!("bits {bits} outside [2, 8]")));
    }
    let qmax = (1i64 << bits) - 1;
    if !(hi > lo) {
        return QuantParams::new(bits, S::of(DEGENERATE_SCALE), 0);
    }
    let (lo, hi) = (lo.min(S::zero()), hi.max(S::zero()));
    let scale = (hi - lo) / S::of(qmax as f64);
    let zp = (-lo / scale).round().to_f64_lossy().clamp(0.0, qmax as f64) as i64;
    QuantParams::new(bits, scale, zp)
}

pub fn fit_minmax<S: Scalar>(x: &Tensor<S>, bits: u8) -> Result<QuantParams<S>> {
    let (lo, hi) = x.min_max();
    fit_range(lo, hi, bits)
}

/// Range endpoints at the `1 - p` and `p` percentiles of the values.
pub fn percentile_range<S: Scalar>(values: &[S], p: f64) -> Result<(S, S)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("percentile p {p} outside (0, 1]")));
    }
    let a = percentile(values, p)?;
    let b = percentile(values, 1.0 - p)?;
    Ok((a.min(b), a.max(b)))
}

pub fn fit_percentile<S: Scalar>(x: &Tensor<S>, bits: u8, p: f64) -> Result<QuantParams<S>> {
    let (lo, hi) = percentile_range(x.data(), p)?;
    fit_range(lo, hi, bits)
}

/// Exponential moving average of per-batch extremes, seeded with the first
/// batch's extremes.
pub fn ema_range<S: Scalar>(batches: &[Tensor<S>], momentum: f64) -> Result<(S, S)> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::invalid(format!("EMA momentum {momentum} outside (0, 1)")));
    }
    let (first, rest) = batches
        .split_first()
        .ok_or_else(|| Error::invalid("EMA calibration needs at least one batch"))?;
    let m = S::of(momentum);
    let (mut lo, mut hi) = first.min_max();
    for b in rest {
        let (blo, bhi) = b.min_max();
        // m * lo + (1 - m) * blo, written so equal extremes stay put exactly
        lo += (S::one() - m) * (blo - lo);
        hi += (S::one() - m) * (bhi - hi);
    }
    Ok((lo, hi))
}

pub fn fit_ema<S: Scalar>(batches: &[Tensor<S>], bits: u8, momentum: f64) -> Result<QuantParams<S>> {
    let (lo, hi) = ema_range(batches, momentum)?;
    fit_range(lo, hi, bits)
}

/// Sum of squared fake-quantization errors.
pub fn quant_sse<S: Scalar>(values: &[S], p: &QuantParams<S>) -> S {
    values.iter().fold(S::zero(), |acc, &v| {
        let e = v - p.apply(v);
        acc + e * e
    })
}

/// Shrink factors `0.1 ..= 1.0`, `grid_points` uniform values.
pub fn mse_grid(grid_points: usize) -> Vec<f64> {
    match grid_points {
        0 => Vec::new(),
        1 => vec![1.0],
        g => (0..g)
            .map(|j| {
                if j == g - 1 {
                    1.0
                } else {
                    0.1 + 0.9 * j as f64 / (g - 1) as f64
                }
            })
            .collect(),
    }
}

/// Range `c * (min, max)` minimizing the squared error over the shrink grid;
/// ties go to the larger `c`.
pub fn mse_range<S: Scalar>(values: &[S], bits: u8, grid_points: usize) -> Result<(S, S)> {
    if values.is_empty() {
        return Err(Error::invalid("MSE calibration of an empty tensor"));
    }
    if grid_points == 0 {
        return Err(Error::invalid("MSE grid needs at least one point"));
    }
    let (lo, hi) = values
        .iter()
        .fold((S::infinity(), S::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
    let mut best: Option<(S, (S, S))> = None;
    for c in mse_grid(grid_points) {
        let c = S::of(c);
        let range = (c * lo, c * hi);
        let err = quant_sse(values, &fit_range(range.0, range.1, bits)?);
        if best.is_none_or(|(b, _)| err <= b) {
            best = Some((err, range));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

pub fn fit_mse<S: Scalar>(x: &Tensor<S>, bits: u8, grid_points: usize) -> Result<QuantParams<S>> {
    let (lo, hi) = mse_range(x.data(), bits, grid_points)?;
    fit_range(lo, hi, bits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibratorKind {
    MinMax,
    Percentile(f64),
    Ema(f64),
    Mse(usize),
}

impl CalibratorKind {
    pub const DEFAULT_PERCENTILE: f64 = 0.9999;
    pub const DEFAULT_EMA_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_MSE_GRID: usize = 100;

    pub fn name(&self) -> &'static str {
        match self {
            CalibratorKind::MinMax => "minmax",
            CalibratorKind::Percentile(_) => "percentile",
            CalibratorKind::Ema(_) => "ema",
            CalibratorKind::Mse(_) => "mse",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CalibratorKind::MinMax => Ok(()),
            CalibratorKind::Percentile(p) if p > 0.0 && p <= 1.0 => Ok(()),
            CalibratorKind::Ema(m) if m > 0.0 && m < 1.0 => Ok(()),
            CalibratorKind::Mse(g) if g >= 1 => Ok(()),
            k => Err(Error::invalid(format!("calibrator parameter out of range: {k:?}"))),
        }
    }

    /// Fitted `(lo, hi)` for one activation site.
    fn range<S: Scalar>(&self, values: &Tensor<S>, bits: u8) -> Result<(S, S)> {
        match *self {
            CalibratorKind::MinMax => Ok(values.min_max()),
            CalibratorKind::Percentile(p) => percentile_range(values.data(), p),
            CalibratorKind::Ema(m) => {
                let b = values.shape()[0];
                let chunks = (0..b)
                    .step_by(EMA_SUB_BATCH)
                    .map(|s| values.slice_batch(s, (s + EMA_SUB_BATCH).min(b)))
                    .collect::<Result<Vec<_>>>()?;
                ema_range(&chunks, m)
            }
            CalibratorKind::Mse(g) => mse_range(values.data(), bits, g),
        }
    }
}

impl fmt::Display for CalibratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fitted parameters plus the range they were fitted to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteCalibration<S> {
    pub params: QuantParams<S>,
    pub range: (S, S),
    pub kind: CalibratorKind,
}

/// Activation quantization point: the output of `layer`, which ends the
/// fused chain that starts at `origin`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationSite {
    pub origin: usize,
    pub layer: usize,
    pub name: String,
}

/// Outputs of conv, dense, residual_add and pooling layers, each taken after
/// any directly following batchnorm/ReLU layers. The network output (logits)
/// feeds nothing and is not a site.
pub fn activation_sites<S: Scalar>(net: &Network<S>) -> Vec<ActivationSite> {
    let layers = net.layers();
    let mut sites: Vec<ActivationSite> = Vec::new();
    for (j, l) in layers.iter().enumerate() {
        let starts = matches!(
            l,
            Layer::Conv { .. }
                | Layer::Dense { .. }
                | Layer::ResidualAdd
                | Layer::MaxPool { .. }
                | Layer::GlobalAvgPool
        );
        if !starts {
            continue;
        }
        let mut end = j;
        while matches!(layers.get(end + 1), Some(Layer::BatchNorm { .. } | Layer::Relu)) {
            end += 1;
        }
        if end + 1 == layers.len() || sites.last().is_some_and(|s| s.layer == end) {
            continue;
        }
        sites.push(ActivationSite {
            origin: j,
            layer: end,
            name: format!("act.L{j}.{}", l.kind()),
        });
    }
    sites
}

/// A network with fake-quantized weights and (once calibrated)
/// per-site activation quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork<S> {
    base: Network<S>,
    net: Network<S>,
    weight_bits: Option<u8>,
    weights: Vec<(usize, QuantParams<S>, (S, S))>,
    sites: Vec<ActivationSite>,
    act_bits: Option<u8>,
    /// Activations explicitly left in full precision.
    fp_activations: bool,
    act: Vec<Option<SiteCalibration<S>>>,
}

impl<S: Scalar> QuantizedNetwork<S> {
    pub fn base(&self) -> &Network<S> {
        &self.base
    }

    /// Network with fake-quantized weights.
    pub fn network(&self) -> &Network<S> {
        &self.net
    }

    pub fn weight_bits(&self) -> Option<u8> {
        self.weight_bits
    }

    /// `None` until calibrated, and after [`Self::without_activation_quant`].
    pub fn act_bits(&self) -> Option<u8> {
        self.act_bits
    }

    pub fn sites(&self) -> &[ActivationSite] {
        &self.sites
    }

    pub fn weight_params(&self) -> impl Iterator<Item = (usize, &QuantParams<S>)> {
        self.weights.iter().map(|(i, p, _)| (*i, p))
    }

    pub fn site_calibration(&self, site: usize) -> Option<&SiteCalibration<S>> {
        self.act.get(site).and_then(Option::as_ref)
    }

    /// Disables activation quantization (full-precision activations).
    pub fn without_activation_quant(mut self) -> Self {
        self.act_bits = None;
        self.fp_activations = true;
        self.act = vec![None; self.sites.len()];
        self
    }

    /// Writes `site,kind,bits,scale,zero_point,range_lo,range_hi`: one row
    /// per calibrated activation site, then one per quantized weight tensor.
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let f = sci17::<S>;
        writeln!(out, "site,kind,bits,scale,zero_point,range_lo,range_hi").expect("vec write");
        for (site, cal) in self.sites.iter().zip(&self.act) {
            if let Some(c) = cal {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    site.name,
                    c.kind,
                    c.params.bits(),
                    f(c.params.scale()),
                    c.params.zero_point(),
                    f(c.range.0),
                    f(c.range.1)
                )
                .expect("vec write");
            }
        }
        for (i, p, range) in &self.weights {
            writeln!(
                out,
                "weight.L{i}.{},minmax,{},{},{},{},{}",
                self.net.layers()[*i].kind(),
                p.bits(),
                f(p.scale()),
                p.zero_point(),
                f(range.0),
                f(range.1)
            )
            .expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Forward pass applying every calibrated activation quantizer.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut hook = QuantHook {
            by_layer: self.site_lookup()?,
        };
        self.net.forward_with(batch, &mut hook)
    }

    fn site_lookup(&self) -> Result<Vec<Option<QuantParams<S>>>> {
        let mut by_layer = vec![None; self.net.layers().len()];
        if self.fp_activations {
            return Ok(by_layer);
        }
        for (site, cal) in self.sites.iter().zip(&self.act) {
            let c = cal.ok_or_else(|| {
                Error::invalid(format!("activation site {} is not calibrated", site.name))
            })?;
            by_layer[site.layer] = Some(c.params);
        }
        Ok(by_layer)
    }
}

struct QuantHook<S> {
    by_layer: Vec<Option<QuantParams<S>>>,
}

impl<S: Scalar> ForwardHook<S> for QuantHook<S> {
    fn layer_output(&mut self, layer: usize, y: Tensor<S>) -> Result<Tensor<S>> {
        Ok(match &self.by_layer[layer] {
            Some(p) => fake_quant(&y, p),
            None => y,
        })
    }
}

/// Per-tensor MinMax fake quantization of every conv/dense weight; BN
/// parameters and biases stay full precision. `None` keeps weights exact.
pub fn quantize_weights<S: Scalar>(net: &Network<S>, bits: Option<u8>) -> Result<QuantizedNetwork<S>> {
    let mut qnet = net.clone();
    let mut weights = Vec::new();
    if let Some(bits) = bits {
        for (i, layer) in qnet.layers_mut().iter_mut().enumerate() {
            if let Layer::Conv { weight, .. } | Layer::Dense { weight, .. } = layer {
                let range = weight.min_max();
                let p = fit_range(range.0, range.1, bits)?;
                *weight = fake_quant(weight, &p);
                weights.push((i, p, range));
            }
        }
    }
    let sites = activation_sites(net);
    let n_sites = sites.len();
    Ok(QuantizedNetwork {
        base: net.clone(),
        net: qnet,
        weight_bits: bits,
        weights,
        sites,
        act_bits: None,
        fp_activations: false,
        act: vec![None; n_sites],
    })
}

struct SiteCollector<S> {
    by_layer: Vec<Option<usize>>,
    values: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ForwardHook<S> for SiteCollector<S> {
    fn layer_output(&mut self, layer: usize, y: Tensor<S>) -> Result<Tensor<S>> {
        if let Some(site) = self.by_layer[layer] {
            self.values[site] = Some(y.clone());
        }
        Ok(y)
    }
}

/// Fits every activation site from one full-precision-activation forward
/// pass of `calib` through the weight-quantized network.
pub fn calibrate_activations<S: Scalar>(
    qnet: &QuantizedNetwork<S>,
    calib: &Tensor<S>,
    kind: CalibratorKind,
    bits: u8,
) -> Result<QuantizedNetwork<S>> {
    kind.validate()?;
    qnet.net.check_batch(calib)?;
    let mut by_layer = vec![None; qnet.net.layers().len()];
    for (k, s) in qnet.sites.iter().enumerate() {
        by_layer[s.layer] = Some(k);
    }
    let mut collector = SiteCollector {
        by_layer,
        values: vec![None; qnet.sites.len()],
    };
    qnet.net.forward_with(calib, &mut collector)?;
    let act = collector
        .values
        .into_iter()
        .map(|v| {
            let v = v.expect("every site is visited");
            let range = kind.range(&v, bits)?;
            Ok(Some(SiteCalibration {
                params: fit_range(range.0, range.1, bits)?,
                range,
                kind,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedNetwork {
        act_bits: Some(bits),
        fp_activations: false,
        act,
        ..qnet.clone()
    })
}

/// Top-1 accuracy with fake-quantized weights and activations. Errors if
/// activations were neither calibrated nor explicitly left in full
/// precision.
pub fn eval_quantized<S: Scalar>(qnet: &QuantizedNetwork<S>, dataset: &Dataset<S>) -> Result<f64> {
    qnet.site_lookup()?;
    let correct = count_correct(dataset, |x| qnet.forward(x))?;
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(d: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(d).unwrap()
    }

    #[test]
    fn two_bit_hand_trace() {
        let p = fit_minmax(&t(&[-1.0, 0.5]), 2).unwrap();
        assert_eq!(p.scale(), 0.5);
        assert_eq!(p.zero_point(), 2);
        assert_eq!(p.apply(0.3), 0.5);
        assert_eq!(p.apply(-0.3), -0.5);
        assert_eq!(p.apply(7.0), 0.5);
        assert_eq!(p.apply(-7.0), -1.0);
    }

    #[test]
    fn minmax_examples() {
        let ints: Vec<f64> = (0..=255).map(f64::from).collect();
        let p = fit_minmax(&t(&ints), 8).unwrap();
        assert_eq!((p.scale(), p.zero_point()), (1.0, 0));
        assert_eq!(fake_quant(&t(&ints), &p).data(), &ints[..]);

        let p = fit_minmax(&t(&[-1.0, 0.2, 1.0]), 8).unwrap();
        assert_eq!(p.scale(), 2.0 / 255.0);

        let c = t(&[0.4, 0.4, 0.4]);
        let p = fit_minmax(&c, 4).unwrap();
        assert_eq!((p.scale(), p.zero_point()), (DEGENERATE_SCALE, 0));
        for &v in fake_quant(&c, &p).data() {
            assert!((v - 0.4).abs() <= 0.4);
        }
    }

    #[test]
    fn params_validation() {
        assert!(QuantParams::new(1, 1.0, 0).is_err());
        assert!(QuantParams::new(9, 1.0, 0).is_err());
        assert!(QuantParams::new(4, 0.0, 0).is_err());
        assert!(QuantParams::new(4, 1.0, 16).is_err());
        assert!(QuantParams::new(4, 1.0, 15).is_ok());
    }

    #[test]
    fn percentile_range_interpolates() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        let (lo, hi) = percentile_range(&v, 0.999).unwrap();
        assert!((hi - 999.001).abs() < 1e-9, "{hi}");
        assert!((lo - 1.999).abs() < 1e-9, "{lo}");
        let x = t(&v);
        assert_eq!(fit_percentile(&x, 8, 1.0).unwrap(), fit_minmax(&x, 8).unwrap());
    }

    #[test]
    fn ema_recurrence() {
        let a = t(&[0.0, 1.0]);
        let b = t(&[0.0, 3.0]);
        let (_, hi) = ema_range(&[a.clone(), b], 0.9).unwrap();
        assert!((hi - 1.2).abs() < 1e-15);
        assert_eq!(fit_ema(std::slice::from_ref(&a), 6, 0.9).unwrap(), fit_minmax(&a, 6).unwrap());
        assert_eq!(
            fit_ema(&[a.clone(), a.clone(), a.clone()], 6, 0.9).unwrap(),
            fit_minmax(&a, 6).unwrap()
        );
        assert!(fit_ema::<f64>(&[], 6, 0.9).is_err());
    }

    #[test]
    fn mse_grid_shape() {
        let g = mse_grid(100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[99], 1.0);
        assert_eq!(mse_grid(1), vec![1.0]);
    }

    #[test]
    fn mse_on_grid_data_keeps_full_range() {
        let v: Vec<f64> = (0..=255).map(f64::from).collect();
        let x = t(&v);
        let p = fit_mse(&x, 8, 100).unwrap();
        assert_eq!(p, fit_minmax(&x, 8).unwrap());
        assert_eq!(quant_sse(&v, &p), 0.0);
    }

    #[test]
    fn mse_shrinks_past_an_outlier() {
        let mut r = crate::rng::seeded(11);
        let mut x = crate::rng::normal_tensor::<f64>(&[1000], 1.0, &mut r).unwrap();
        x.data_mut()[17] = 40.0;
        let chosen = fit_mse(&x, 4, 100).unwrap();
        let full = fit_minmax(&x, 4).unwrap();
        assert!(chosen.scale() < full.scale());
        assert!(quant_sse(x.data(), &chosen) <= quant_sse(x.data(), &full));
    }

    #[test]
    fn calibrator_validation() {
        assert!(CalibratorKind::Percentile(0.0).validate().is_err());
        assert!(CalibratorKind::Ema(1.0).validate().is_err());
        assert!(CalibratorKind::Mse(0).validate().is_err());
        assert!(CalibratorKind::MinMax.validate().is_ok());
    }
}
