//! Synthetic calibration data from stored BN statistics.
//!
//! A Gaussian batch is optimized with Adam so that the per-sample moments of
//! every BN layer's input approach the layer's stored `(mu, sigma)`:
//!
//! * **Slack alignment**: a per-channel hinge lets each statistic deviate
//!   from the stored value by a margin (`delta` for means, `gamma` for
//!   stds) before it is penalized. Margins are the `epsilon`-percentile,
//!   across a Gaussian probe batch, of each channel's absolute statistic gap.
//! * **Layerwise enhancement**: sample `k` weighs BN layer `k mod N` twice
//!   (row `k` of `I + 11^T` when the batch size equals `N`).
//!
//! The four [`Mode`]s toggle the two mechanisms independently.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modelzoo::{BnStats, FeatureStats, Network};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Plain BN-statistics matching: zero margins, uniform weights.
    Vanilla,
    /// Probe-derived margins, uniform weights.
    Sda,
    /// Zero margins, enhancement weights.
    Lse,
    /// Probe-derived margins and enhancement weights.
    Dsg,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::Sda, Mode::Lse, Mode::Dsg];

    pub fn uses_margins(self) -> bool {
        matches!(self, Mode::Sda | Mode::Dsg)
    }

    pub fn uses_enhancement(self) -> bool {
        matches!(self, Mode::Lse | Mode::Dsg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Sda => "sda",
            Mode::Lse => "lse",
            Mode::Dsg => "dsg",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?} (vanilla|sda|lse|dsg)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub mode: Mode,
    /// Margin percentile in `[0, 1]`; 0 means no slack. Ignored by modes
    /// without margins.
    pub epsilon: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Defaults to the network's BN layer count.
    pub batch_size: Option<usize>,
    pub probe_count: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mode: Mode::Dsg,
            epsilon: 0.9,
            iterations: 500,
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: None,
            probe_count: 1024,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == Some(0) || self.probe_count == 0 {
            return Err(Error::invalid("batch_size and probe_count must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }

    /// Epsilon actually used: modes without margins force 0.
    pub fn effective_epsilon(&self) -> f64 {
        if self.mode.uses_margins() {
            self.epsilon
        } else {
            0.0
        }
    }
}

/// Per-BN-layer, per-channel relaxations of the mean and std constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackMargins<S> {
    pub delta: Vec<Tensor<S>>,
    pub gamma: Vec<Tensor<S>>,
}

impl<S: Scalar> SlackMargins<S> {
    pub fn zeros(bn: &BnStats<S>) -> Self {
        let z: Vec<Tensor<S>> = bn.mu.iter().map(|m| Tensor::zeros(m.shape().to_vec())).collect();
        SlackMargins {
            delta: z.clone(),
            gamma: z,
        }
    }
}

/// Per-iteration loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<S> {
    /// `[B, N]` slack-alignment terms.
    pub per_sample_layer: Tensor<S>,
    pub per_sample_total: Vec<S>,
    pub total: S,
}

/// Output of [`generate`].
#[derive(Debug, Clone)]
pub struct Generation<S> {
    pub batch: Tensor<S>,
    pub history: Vec<LossBreakdown<S>>,
    pub margins: SlackMargins<S>,
    pub weights: Tensor<S>,
}

/// `N(0, 1)` tensor from the seeded ChaCha8 stream.
pub fn init_gaussian<S: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<S>> {
    rng::normal_tensor(shape, 1.0, &mut rng::seeded(seed))
}

/// Linear-interpolation order statistic at zero-based rank `eps * (n - 1)`
/// of the ascending sort.
pub fn percentile<S: Scalar>(values: &[S], eps: f64) -> Result<S> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty vector"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("percentile rank {eps} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = eps * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = S::of(rank - lo as f64);
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Margins from the per-sample statistics of a probe batch: for each layer
/// and channel, the `eps`-percentile over probe samples of the absolute gap
/// to the stored statistic. `eps = 0` gives all-zero margins.
pub fn compute_margins<S: Scalar>(
    probe: &FeatureStats<S>,
    bn: &BnStats<S>,
    eps: f64,
) -> Result<SlackMargins<S>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("epsilon {eps} outside [0, 1]")));
    }
    if probe.layers.len() != bn.layers() {
        return Err(Error::shape(format!(
            "probe has {} BN layers, network has {}",
            probe.layers.len(),
            bn.layers()
        )));
    }
    for i in 0..bn.layers() {
        let c = probe.layers[i].mean.shape()[1];
        if c != bn.channels(i) {
            return Err(Error::shape(format!(
                "BN layer {i}: probe has {c} channels, stats have {}",
                bn.channels(i)
            )));
        }
    }
    if eps == 0.0 {
        return Ok(SlackMargins::zeros(bn));
    }
    let rows = probe.rows();
    let margin = |stat: &Tensor<S>, target: &Tensor<S>| -> Result<Tensor<S>> {
        let c = target.len();
        let m = (0..c)
            .map(|ch| {
                let gaps: Vec<S> = (0..rows)
                    .map(|k| (stat.data()[k * c + ch] - target.data()[ch]).abs())
                    .collect();
                percentile(&gaps, eps)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![c], m)
    };
    let mut delta = Vec::with_capacity(bn.layers());
    let mut gamma = Vec::with_capacity(bn.layers());
    for (i, lm) in probe.layers.iter().enumerate() {
        delta.push(margin(&lm.mean, &bn.mu[i])?);
        gamma.push(margin(&lm.std, &bn.sigma[i])?);
    }
    Ok(SlackMargins { delta, gamma })
}

/// Hinged squared gaps of one sample at one layer:
/// `sum_c max(|mu_t - mu| - delta, 0)^2 + max(|sigma_t - sigma| - gamma, 0)^2`.
pub fn sda_sample_layer_loss<S: Scalar>(
    mu_t: &[S],
    sigma_t: &[S],
    mu: &[S],
    sigma: &[S],
    delta: &[S],
    gamma: &[S],
) -> Result<S> {
    let c = mu.len();
    if [mu_t.len(), sigma_t.len(), sigma.len(), delta.len(), gamma.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(Error::shape("sda_sample_layer_loss: channel counts differ"));
    }
    let hinge_sq = |a: S, b: S, m: S| {
        let e = ((a - b).abs() - m).max(S::zero());
        e * e
    };
    let mean_part = (0..c).fold(S::zero(), |acc, j| acc + hinge_sq(mu_t[j], mu[j], delta[j]));
    let std_part = (0..c).fold(S::zero(), |acc, j| acc + hinge_sq(sigma_t[j], sigma[j], gamma[j]));
    Ok(mean_part + std_part)
}

/// Unrelaxed statistics-matching objective of one sample, summed over layers:
/// `sum_i ||mu_t_i - mu_i||^2 + ||sigma_t_i - sigma_i||^2`.
pub fn bn_matching_loss<S: Scalar>(stats: &FeatureStats<S>, sample: usize, bn: &BnStats<S>) -> S {
    (0..bn.layers()).fold(S::zero(), |acc, i| {
        let sq = |a: &[S], b: &[S]| {
            a.iter()
                .zip(b)
                .fold(S::zero(), |s, (&x, &y)| s + (x - y) * (x - y))
        };
        acc + sq(stats.mean(sample, i), bn.mu[i].data()) + sq(stats.std(sample, i), bn.sigma[i].data())
    })
}

/// `[B, N]` weights: `1 + [i == k mod N]`.
pub fn lse_weights<S: Scalar>(batch: usize, layers: usize) -> Result<Tensor<S>> {
    if batch == 0 || layers == 0 {
        return Err(Error::invalid("lse_weights needs B, N >= 1"));
    }
    let data = (0..batch)
        .flat_map(|k| (0..layers).map(move |i| if i == k % layers { S::of(2.0) } else { S::one() }))
        .collect();
    Tensor::new(vec![batch, layers], data)
}

/// `[B, N]` all-ones weights.
pub fn uniform_weights<S: Scalar>(batch: usize, layers: usize) -> Result<Tensor<S>> {
    if batch == 0 || layers == 0 {
        return Err(Error::invalid("weights need B, N >= 1"));
    }
    Ok(Tensor::full(vec![batch, layers], S::one()))
}

/// `per_sample_total[k] = sum_i w[k][i] * L[k][i]`,
/// `total = (1 / (B * N)) * sum_k per_sample_total[k]`.
pub fn dsg_loss<S: Scalar>(per_sample_layer: &Tensor<S>, weights: &Tensor<S>) -> Result<LossBreakdown<S>> {
    if per_sample_layer.shape() != weights.shape() || per_sample_layer.ndim() != 2 {
        return Err(Error::shape(format!(
            "dsg_loss: losses {:?} vs weights {:?}",
            per_sample_layer.shape(),
            weights.shape()
        )));
    }
    let (b, n) = (weights.shape()[0], weights.shape()[1]);
    let per_sample_total: Vec<S> = per_sample_layer
        .data()
        .chunks_exact(n)
        .zip(weights.data().chunks_exact(n))
        .map(|(l, w)| l.iter().zip(w).fold(S::zero(), |a, (&lv, &wv)| a + lv * wv))
        .collect();
    let factor = S::one() / S::of_usize(b * n);
    let total = per_sample_total.iter().fold(S::zero(), |a, &v| a + v) * factor;
    Ok(LossBreakdown {
        per_sample_layer: per_sample_layer.clone(),
        per_sample_total,
        total,
    })
}

/// Records the weighted slack-alignment objective of `x` on `graph`.
/// Returns `(total, [B, N] per-sample-layer matrix)`.
pub fn record_objective<'a, S: Scalar>(
    graph: &mut Graph<'a, S>,
    net: &'a Network<S>,
    x: Var,
    bn: &BnStats<S>,
    margins: &SlackMargins<S>,
    weights: &Tensor<S>,
) -> Result<(Var, Var)> {
    let (_, captured) = net.forward_graph(graph, x, true)?;
    let mut columns = Vec::with_capacity(captured.len());
    for (i, &(m, s)) in captured.iter().enumerate() {
        let hinge = |g: &mut Graph<'a, S>, v: Var, target: &[S], margin: &[S]| -> Result<Var> {
            let d = g.shift(v, target)?;
            let a = g.abs(d)?;
            let e = g.shift(a, margin)?;
            let r = g.relu(e);
            let sq = g.square(r)?;
            g.row_sum(sq)
        };
        let lm = hinge(graph, m, bn.mu[i].data(), margins.delta[i].data())?;
        let ls = hinge(graph, s, bn.sigma[i].data(), margins.gamma[i].data())?;
        columns.push(graph.add(lm, ls)?);
    }
    let matrix = graph.stack_columns(&columns)?;
    if graph.value(matrix).shape() != weights.shape() {
        return Err(Error::shape(format!(
            "weights {:?} vs loss matrix {:?}",
            weights.shape(),
            graph.value(matrix).shape()
        )));
    }
    let weighted = graph.mul_const(matrix, weights.data())?;
    let rows = graph.row_sum(weighted)?;
    let sum = graph.sum(rows)?;
    let (b, n) = (weights.shape()[0], weights.shape()[1]);
    let total = graph.scale(sum, S::one() / S::of_usize(b * n))?;
    Ok((total, matrix))
}

/// Objective value, breakdown and input gradient at `x`.
pub fn objective_and_gradient<S: Scalar>(
    net: &Network<S>,
    x: &Tensor<S>,
    bn: &BnStats<S>,
    margins: &SlackMargins<S>,
    weights: &Tensor<S>,
) -> Result<(LossBreakdown<S>, Tensor<S>)> {
    let mut graph = Graph::new();
    let xv = graph.input(x.clone())?;
    let (total, matrix) = record_objective(&mut graph, net, xv, bn, margins, weights)?;
    let breakdown = dsg_loss(graph.value(matrix), weights)?;
    debug_assert_eq!(breakdown.total, graph.value(total).data()[0]);
    let grad = graph.backprop_to_input(total)?;
    Ok((breakdown, grad))
}

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
    beta1: S,
    beta2: S,
    eps: S,
    lr: S,
}

impl<S: Scalar> Adam<S> {
    fn new(n: usize, cfg: &GenConfig) -> Self {
        Adam {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
            beta1: S::of(cfg.adam_beta1),
            beta2: S::of(cfg.adam_beta2),
            eps: S::of(cfg.adam_eps),
            lr: S::of(cfg.learning_rate),
        }
    }

    fn step(&mut self, x: &mut [S], g: &[S]) {
        self.t += 1;
        let bc1 = S::one() - self.beta1.powi(self.t);
        let bc2 = S::one() - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (S::one() - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (S::one() - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Runs the full generation loop.
///
/// The synthetic batch is drawn first from the seeded stream and the probe
/// batch second, so every mode starts from the same synthetic batch for a
/// given seed.
pub fn generate<S: Scalar>(net: &Network<S>, cfg: &GenConfig) -> Result<Generation<S>> {
    cfg.validate()?;
    let bn = net.extract_bn_stats();
    let n_layers = bn.layers();
    let batch = cfg.batch_size.unwrap_or(n_layers);
    let [c, h, w] = net.input_shape();
    let mut stream = rng::seeded(cfg.seed);
    let mut x = rng::normal_tensor::<S>(&[batch, c, h, w], 1.0, &mut stream)?;

    let eps = cfg.effective_epsilon();
    let margins = if cfg.mode.uses_margins() && eps > 0.0 {
        let probe = rng::normal_tensor::<S>(&[cfg.probe_count, c, h, w], 1.0, &mut stream)?;
        let stats = net.capture_stats_chunked(&probe)?;
        compute_margins(&stats, &bn, eps)?
    } else {
        SlackMargins::zeros(&bn)
    };
    let weights = if cfg.mode.uses_enhancement() {
        lse_weights(batch, n_layers)?
    } else {
        uniform_weights(batch, n_layers)?
    };

    let mut adam = Adam::new(x.len(), cfg);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let (breakdown, grad) = objective_and_gradient(net, &x, &bn, &margins, &weights)
            .map_err(|e| Error::numerical(format!("generation iteration {it}: {e}")))?;
        if !breakdown.total.is_finite() {
            return Err(Error::numerical(format!(
                "generation iteration {it}: non-finite loss"
            )));
        }
        adam.step(x.data_mut(), grad.data());
        x.ensure_finite("adam update")
            .map_err(|e| Error::numerical(format!("generation iteration {it}: {e}")))?;
        history.push(breakdown);
    }
    Ok(Generation {
        batch: x,
        history,
        margins,
        weights,
    })
}
