//! Diversity diagnostics for a batch of samples: how widely per-sample
//! BN-input statistics scatter, how far the batch aggregate sits from the
//! stored BN statistics, and per-channel activation dumps for histograms.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::modelzoo::{BnStats, FeatureStats, ForwardHook, Network};
use crate::scalar::{sci17, Scalar};
use crate::tensor::Tensor;

/// Floor applied to denominators in [`compare_dispersion`].
pub const RATIO_FLOOR: f64 = 1e-12;

/// Per-layer, per-channel dispersion of one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDispersion<S> {
    /// Std over samples of the per-sample means.
    pub mean_dispersion: Vec<S>,
    /// Std over samples of the per-sample stds.
    pub std_dispersion: Vec<S>,
    /// `|batch mean - mu|`.
    pub mean_offset: Vec<S>,
    /// `|batch std - sigma|`, batch variance by the law of total variance.
    pub std_offset: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionReport<S> {
    pub layers: Vec<LayerDispersion<S>>,
}

/// Population mean and variance, order-independent: values are sorted
/// before summation and centered on the smallest one, so duplicates give an
/// exact zero variance.
fn sorted_moments<S: Scalar>(values: &mut [S]) -> (S, S) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = S::of_usize(values.len());
    let pivot = values[0];
    let shift = values.iter().map(|&v| v - pivot).sum::<S>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v - pivot - shift;
            d * d
        })
        .sum::<S>()
        / n;
    (pivot + shift, var)
}

pub fn dispersion<S: Scalar>(stats: &FeatureStats<S>, bn: &BnStats<S>) -> Result<DispersionReport<S>> {
    if !stats.per_sample {
        return Err(Error::invalid("dispersion needs per-sample statistics"));
    }
    let b = stats.rows();
    if b < 2 {
        return Err(Error::invalid(format!("dispersion needs at least 2 samples, got {b}")));
    }
    if stats.layers.len() != bn.layers() {
        return Err(Error::shape(format!(
            "{} stat layers vs {} BN layers",
            stats.layers.len(),
            bn.layers()
        )));
    }
    let layers = (0..bn.layers())
        .map(|i| {
            let c = bn.channels(i);
            if stats.layers[i].mean.shape() != [b, c] {
                return Err(Error::shape(format!(
                    "layer {i}: stats shape {:?}, BN channels {c}",
                    stats.layers[i].mean.shape()
                )));
            }
            let mut out = LayerDispersion {
                mean_dispersion: Vec::with_capacity(c),
                std_dispersion: Vec::with_capacity(c),
                mean_offset: Vec::with_capacity(c),
                std_offset: Vec::with_capacity(c),
            };
            for ch in 0..c {
                let mut means: Vec<S> = (0..b).map(|k| stats.mean(k, i)[ch]).collect();
                let mut vars: Vec<S> = (0..b).map(|k| stats.std(k, i)[ch].powi(2)).collect();
                let mut stds: Vec<S> = (0..b).map(|k| stats.std(k, i)[ch]).collect();
                let (batch_mean, var_of_means) = sorted_moments(&mut means);
                let (_, var_of_stds) = sorted_moments(&mut stds);
                let (mean_of_vars, _) = sorted_moments(&mut vars);
                let batch_std = (mean_of_vars + var_of_means).sqrt();
                out.mean_dispersion.push(var_of_means.sqrt());
                out.std_dispersion.push(var_of_stds.sqrt());
                out.mean_offset.push((batch_mean - bn.mu[i].data()[ch]).abs());
                out.std_offset.push((batch_std - bn.sigma[i].data()[ch]).abs());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(DispersionReport { layers })
}

/// Per-layer median over channels of each field's ratio `a / max(b, floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionRatios<S> {
    pub mean_dispersion: Vec<S>,
    pub std_dispersion: Vec<S>,
    pub mean_offset: Vec<S>,
    pub std_offset: Vec<S>,
}

fn median<S: Scalar>(mut v: Vec<S>) -> S {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / S::of(2.0)
    }
}

fn median_ratio<S: Scalar>(a: &[S], b: &[S]) -> S {
    let floor = S::of(RATIO_FLOOR);
    median(a.iter().zip(b).map(|(&x, &y)| x / y.max(floor)).collect())
}

pub fn compare_dispersion<S: Scalar>(
    a: &DispersionReport<S>,
    b: &DispersionReport<S>,
) -> Result<DispersionRatios<S>> {
    let same = a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.mean_dispersion.len() == y.mean_dispersion.len());
    if !same || a.layers.iter().any(|l| l.mean_dispersion.is_empty()) {
        return Err(Error::shape("dispersion reports have different shapes"));
    }
    let per = |f: fn(&LayerDispersion<S>) -> &Vec<S>| {
        a.layers
            .iter()
            .zip(&b.layers)
            .map(|(x, y)| median_ratio(f(x), f(y)))
            .collect()
    };
    Ok(DispersionRatios {
        mean_dispersion: per(|l| &l.mean_dispersion),
        std_dispersion: per(|l| &l.std_dispersion),
        mean_offset: per(|l| &l.mean_offset),
        std_offset: per(|l| &l.std_offset),
    })
}

impl<S: Scalar> DispersionReport<S> {
    /// `layer,channel,mean_dispersion,std_dispersion,mean_offset,std_offset`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,channel,mean_dispersion,std_dispersion,mean_offset,std_offset\n");
        for (i, l) in self.layers.iter().enumerate() {
            for c in 0..l.mean_dispersion.len() {
                out.push_str(&format!(
                    "{i},{c},{},{},{},{}\n",
                    sci17(l.mean_dispersion[c]),
                    sci17(l.std_dispersion[c]),
                    sci17(l.mean_offset[c]),
                    sci17(l.std_offset[c])
                ));
            }
        }
        out
    }

    /// Per-layer medians over channels, same columns without `channel`.
    pub fn medians(&self) -> Vec<[S; 4]> {
        self.layers
            .iter()
            .map(|l| {
                [
                    median(l.mean_dispersion.clone()),
                    median(l.std_dispersion.clone()),
                    median(l.mean_offset.clone()),
                    median(l.std_offset.clone()),
                ]
            })
            .collect()
    }
}

impl<S: Scalar> DispersionRatios<S> {
    /// `layer,mean_dispersion,std_dispersion,mean_offset,std_offset`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_dispersion,std_dispersion,mean_offset,std_offset\n");
        for i in 0..self.mean_dispersion.len() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                sci17(self.mean_dispersion[i]),
                sci17(self.std_dispersion[i]),
                sci17(self.mean_offset[i]),
                sci17(self.std_offset[i])
            ));
        }
        out
    }
}

struct ChannelCapture<S> {
    layer: usize,
    channel: usize,
    out: Option<Tensor<S>>,
}

impl<S: Scalar> ForwardHook<S> for ChannelCapture<S> {
    fn bn_input(&mut self, bn_index: usize, x: &Tensor<S>) -> Result<()> {
        if bn_index != self.layer {
            return Ok(());
        }
        let (b, c, h, w) = x.dims4()?;
        if self.channel >= c {
            return Err(Error::invalid(format!(
                "channel {} out of range for BN layer {} with {c} channels",
                self.channel, self.layer
            )));
        }
        let hw = h * w;
        let data = (0..b)
            .flat_map(|k| x.data()[(k * c + self.channel) * hw..][..hw].iter().copied())
            .collect();
        self.out = Some(Tensor::new(vec![b, hw], data)?);
        Ok(())
    }
}

/// Input activations `[B, H*W]` of one channel of the `bn_layer`-th BN layer.
pub fn channel_activations<S: Scalar>(
    net: &Network<S>,
    batch: &Tensor<S>,
    bn_layer: usize,
    channel: usize,
) -> Result<Tensor<S>> {
    if bn_layer >= net.bn_count() {
        return Err(Error::invalid(format!(
            "BN layer {bn_layer} out of range ({} BN layers)",
            net.bn_count()
        )));
    }
    let mut cap = ChannelCapture {
        layer: bn_layer,
        channel,
        out: None,
    };
    net.forward_with(batch, &mut cap)?;
    Ok(cap.out.expect("every BN layer is visited"))
}

/// Sidecar path holding `mu,sigma` next to a histogram CSV.
pub fn histogram_sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(Default::default, |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.bn.csv"))
}

/// Writes `sample_id,value` rows for `acts` (`[B, n]`) to `path`, and the
/// channel's `mu,sigma` to [`histogram_sidecar`]. Returns the sidecar path.
pub fn export_histograms<S: Scalar>(acts: &Tensor<S>, mu: S, sigma: S, path: &Path) -> Result<PathBuf> {
    if acts.ndim() != 2 {
        return Err(Error::shape(format!("activations must be [B, n], got {:?}", acts.shape())));
    }
    let n = acts.shape()[1];
    let mut out = Vec::with_capacity(acts.len() * 28);
    writeln!(out, "sample_id,value").expect("vec write");
    for (i, v) in acts.data().iter().enumerate() {
        writeln!(out, "{},{}", i / n, sci17(*v)).expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = histogram_sidecar(path);
    let text = format!("mu,sigma\n{},{}\n", sci17(mu), sci17(sigma));
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::LayerMoments;

    fn stats(means: &[f64], stds: &[f64]) -> FeatureStats<f64> {
        let b = means.len();
        FeatureStats {
            per_sample: true,
            layers: vec![LayerMoments {
                mean: Tensor::new(vec![b, 1], means.to_vec()).unwrap(),
                std: Tensor::new(vec![b, 1], stds.to_vec()).unwrap(),
            }],
        }
    }

    fn bn(mu: f64, sigma: f64) -> BnStats<f64> {
        BnStats {
            mu: vec![Tensor::from_slice(&[mu]).unwrap()],
            sigma: vec![Tensor::from_slice(&[sigma]).unwrap()],
        }
    }

    #[test]
    fn population_std_over_samples() {
        let r = dispersion(&stats(&[1.0, 3.0], &[1.0, 1.0]), &bn(2.0, 2f64.sqrt())).unwrap();
        let l = &r.layers[0];
        assert_eq!(l.mean_dispersion[0], 1.0);
        assert_eq!(l.std_dispersion[0], 0.0);
        assert_eq!(l.mean_offset[0], 0.0);
        // total variance 1 + 1 = 2
        assert!(l.std_offset[0] < 1e-15);
    }

    #[test]
    fn duplicates_are_exactly_zero() {
        let r = dispersion(&stats(&[0.3; 5], &[0.7; 5]), &bn(0.3, 0.7)).unwrap();
        let l = &r.layers[0];
        for v in [l.mean_dispersion[0], l.std_dispersion[0], l.mean_offset[0], l.std_offset[0]] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn single_sample_is_error() {
        assert!(dispersion(&stats(&[1.0], &[1.0]), &bn(0.0, 1.0)).is_err());
    }

    #[test]
    fn ratios_and_floor() {
        let a = dispersion(&stats(&[1.0, 3.0], &[1.0, 2.0]), &bn(0.0, 1.0)).unwrap();
        let same = compare_dispersion(&a, &a).unwrap();
        assert_eq!(same.mean_dispersion, vec![1.0]);
        let z = dispersion(&stats(&[1.0, 1.0], &[1.0, 1.0]), &bn(1.0, 1.0)).unwrap();
        let r = compare_dispersion(&a, &z).unwrap();
        assert_eq!(r.mean_dispersion[0], 1.0 / RATIO_FLOOR);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(histogram_sidecar(Path::new("/x/h.csv")), PathBuf::from("/x/h.bn.csv"));
    }
}
