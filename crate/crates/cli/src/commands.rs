use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dsg_core::datagen::{self, GenConfig, Mode};
use dsg_core::diagnostics;
use dsg_core::modelzoo::{self, dataset, glyphs, Dataset, Network, TrainConfig};
use dsg_core::quantize::{self, CalibratorKind, QuantizedNetwork};
use dsg_core::{Error, Tensor};

use crate::manifest::Manifest;
use crate::{
    AblateArgs, CalibrateArgs, DataFormat, DiagnoseArgs, GenOptions, GenerateArgs, MakeDataArgs, ModeArg,
    PixelScale, QuantArg, QuantOptions, SweepArgs, TrainArgs,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Bit width meaning "leave in full precision".
pub const FULL_PRECISION_BITS: u8 = 32;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(Error::Numerical(_)) => EXIT_NUMERICAL,
            CliError::Core(_) | CliError::Io { .. } => EXIT_FORMAT,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn finish(m: Manifest, out: &Path) -> Result<()> {
    m.write(out).map_err(io_err(out))?;
    Ok(())
}

fn add_artifacts(m: &mut Manifest, out: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        let p = out.join(name);
        m.artifact(name, &p).map_err(io_err(&p))?;
    }
    Ok(())
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

fn load_model(path: &Path) -> Result<Network<f64>> {
    Ok(modelzoo::load_model(path)?)
}

fn load_data(path: &Path) -> Result<Dataset<f64>> {
    Ok(dataset::load_any(path)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracy"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Vanilla => Mode::Vanilla,
        ModeArg::Sda => Mode::Sda,
        ModeArg::Lse => Mode::Lse,
        ModeArg::Dsg => Mode::Dsg,
    }
}

fn gen_config(mode: Mode, epsilon: f64, gen: &GenOptions, seed: u64) -> GenConfig {
    GenConfig {
        mode,
        epsilon,
        iterations: gen.iters,
        learning_rate: gen.lr,
        batch_size: gen.batch,
        probe_count: gen.probe_count,
        seed,
        ..Default::default()
    }
}

fn bits(name: &str, b: u8) -> Result<Option<u8>> {
    match b {
        FULL_PRECISION_BITS => Ok(None),
        2..=8 => Ok(Some(b)),
        _ => Err(CliError::Usage(format!("--{name} must be in 2..=8 or 32, got {b}"))),
    }
}

fn calibrator(q: &QuantOptions) -> CalibratorKind {
    match q.quant {
        QuantArg::Vanilla => CalibratorKind::MinMax,
        QuantArg::Percentile => CalibratorKind::Percentile(q.p),
        QuantArg::Ema => CalibratorKind::Ema(q.ema_momentum),
        QuantArg::Mse => CalibratorKind::Mse(q.mse_grid),
    }
}

/// Weight quantization plus activation calibration on `calib`.
pub fn quantize_and_calibrate(
    net: &Network<f64>,
    calib: &Tensor<f64>,
    q: &QuantOptions,
) -> Result<QuantizedNetwork<f64>> {
    let wbits = bits("wbits", q.wbits)?;
    let abits = bits("abits", q.abits)?;
    let kind = calibrator(q);
    kind.validate()?;
    let qnet = quantize::quantize_weights(net, wbits)?;
    Ok(match abits {
        None => qnet.without_activation_quant(),
        Some(b) => quantize::calibrate_activations(&qnet, calib, kind, b)?,
    })
}

fn check_eval(net: &Network<f64>, eval: &Dataset<f64>) -> Result<()> {
    eval.check_labels(net.classes())?;
    Ok(())
}

pub fn make_data(a: &MakeDataArgs, threads: usize) -> Result<()> {
    let t = Instant::now();
    let mut m = Manifest::new("make-data", a, a.seed, threads);
    let pixels = match (a.format, a.pixels) {
        (DataFormat::Idx, Some(PixelScale::Standard)) => {
            return Err(CliError::Usage("IDX stores bytes; use --pixels unit".into()));
        }
        (_, Some(p)) => p,
        (DataFormat::Raw, None) => PixelScale::Standard,
        (DataFormat::Idx, None) => PixelScale::Unit,
    };
    let mut ds = glyphs::generate::<f64>(a.count, a.side, a.seed)?;
    if pixels == PixelScale::Standard {
        ds = ds.standardize(glyphs::PIXEL_MEAN, glyphs::PIXEL_STD)?;
    }
    create_dir(&a.out)?;
    let names: &[&str] = match a.format {
        DataFormat::Raw => {
            dataset::save_raw(&ds, &a.out)?;
            &["data.bin", "data.meta", "labels.bin"]
        }
        DataFormat::Idx => {
            dataset::save_idx(
                &ds,
                &a.out.join("images-idx3-ubyte"),
                Some(&a.out.join("labels-idx1-ubyte")),
            )?;
            &["images-idx3-ubyte", "labels-idx1-ubyte"]
        }
    };
    add_artifacts(&mut m, &a.out, names)?;
    m.result("count", ds.len());
    m.result("pixels", pixels);
    m.timing("generate_seconds", t);
    finish(m, &a.out)
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let mut m = Manifest::new("train", a, a.seed, threads);
    let train = load_data(&a.data)?;
    train.check_labels(a.classes)?;
    let test = a.test_data.as_deref().map(load_data).transpose()?;
    let net = modelzoo::build_reference_cnn::<f64>(&a.arch, train.sample_shape(), a.classes, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..Default::default()
    };
    let t = Instant::now();
    let (net, report) = modelzoo::train_reference(&net, &train, test.as_ref(), &cfg)?;
    m.timing("train_seconds", t);
    create_dir(&a.out)?;
    modelzoo::save_model(&net, &a.out)?;
    add_artifacts(&mut m, &a.out, &["model.json", "weights.bin"])?;
    m.result("train_accuracy", report.train_accuracy);
    m.result("test_accuracy", report.val_accuracy);
    m.result("final_loss", report.final_loss);
    m.result("bn_layers", net.bn_count());
    finish(m, &a.out)
}

pub fn generate(a: &GenerateArgs, threads: usize) -> Result<()> {
    let mut m = Manifest::new("generate", a, a.seed, threads);
    let net = load_model(&a.model)?;
    let mode = mode_of(a.mode);
    if !mode.uses_margins() && a.epsilon.is_some() {
        eprintln!("warning: --epsilon is ignored by mode {mode}");
    }
    let cfg = gen_config(mode, a.epsilon.unwrap_or(GenConfig::default().epsilon), &a.gen, a.seed);
    let t = Instant::now();
    let g = datagen::generate(&net, &cfg)?;
    m.timing("generate_seconds", t);

    create_dir(&a.out)?;
    dataset::write_raw_tensor(&g.batch, &a.out)?;
    let mut log = String::from("iter,total_loss\n");
    for (i, h) in g.history.iter().enumerate() {
        let _ = writeln!(log, "{},{}", i + 1, sci(h.total));
    }
    write_file(&a.out.join("gen.log"), &log)?;
    add_artifacts(&mut m, &a.out, &["data.bin", "data.meta", "gen.log"])?;
    m.result("mode", mode.name());
    m.result("effective_epsilon", cfg.effective_epsilon());
    m.result("batch_size", g.batch.shape()[0]);
    m.result("initial_loss", g.history.first().map(|h| h.total));
    m.result("final_loss", g.history.last().map(|h| h.total));
    finish(m, &a.out)
}

pub fn calibrate_eval(a: &CalibrateArgs, threads: usize) -> Result<()> {
    let mut m = Manifest::new("calibrate-eval", a, a.seed, threads);
    let net = load_model(&a.model)?;
    let calib = load_data(&a.calib_data)?;
    let eval = load_data(&a.eval_data)?;
    check_eval(&net, &eval)?;
    let t = Instant::now();
    let qnet = quantize_and_calibrate(&net, calib.images(), &a.quant)?;
    let acc = quantize::eval_quantized(&qnet, &eval)?;
    let fp = modelzoo::evaluate_accuracy(&net, &eval)?;
    m.timing("evaluate_seconds", t);
    create_dir(&a.out)?;
    qnet.write_report(&a.out.join("calibration.csv"))?;
    add_artifacts(&mut m, &a.out, &["calibration.csv"])?;
    m.result("accuracy", acc);
    m.result("fp_accuracy", fp);
    m.result("calibrator", calibrator(&a.quant).name());
    finish(m, &a.out)
}

pub fn diagnose(a: &DiagnoseArgs, threads: usize) -> Result<()> {
    let mut m = Manifest::new("diagnose", a, 0, threads);
    let net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let bn = net.extract_bn_stats();
    create_dir(&a.out)?;

    let report = diagnostics::dispersion(&net.capture_stats_chunked(data.images())?, &bn)?;
    write_file(&a.out.join("dispersion.csv"), &report.to_csv())?;
    let mut names = vec!["dispersion.csv"];
    let medians: Vec<f64> = report.medians().iter().map(|r| r[0]).collect();
    m.result("median_mean_dispersion", &medians);

    if let Some(r) = &a.reference {
        let reference = load_data(r)?;
        let other = diagnostics::dispersion(&net.capture_stats_chunked(reference.images())?, &bn)?;
        let ratios = diagnostics::compare_dispersion(&report, &other)?;
        write_file(&a.out.join("dispersion_ratio.csv"), &ratios.to_csv())?;
        names.push("dispersion_ratio.csv");
        m.result("median_mean_dispersion_ratio", &ratios.mean_dispersion);
    }

    if a.layer >= bn.layers() || a.channel >= bn.channels(a.layer.min(bn.layers() - 1)) {
        return Err(CliError::Usage(format!(
            "--layer {} --channel {} out of range",
            a.layer, a.channel
        )));
    }
    let acts = diagnostics::channel_activations(&net, data.images(), a.layer, a.channel)?;
    diagnostics::export_histograms(
        &acts,
        bn.mu[a.layer].data()[a.channel],
        bn.sigma[a.layer].data()[a.channel],
        &a.out.join("histogram.csv"),
    )?;
    names.extend(["histogram.csv", "histogram.bn.csv"]);
    add_artifacts(&mut m, &a.out, &names)?;
    finish(m, &a.out)
}

/// Sweep points `k / 10` for `k = 0..=10`.
pub fn epsilon_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

pub fn sweep_epsilon(a: &SweepArgs, threads: usize) -> Result<()> {
    let mode = mode_of(a.mode);
    if !mode.uses_margins() {
        return Err(CliError::Usage(format!("sweep mode must use margins (sda or dsg), got {mode}")));
    }
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let mut m = Manifest::new("sweep-epsilon", a, a.seeds[0], threads);
    let net = load_model(&a.model)?;
    let eval = load_data(&a.eval_data)?;
    check_eval(&net, &eval)?;
    create_dir(&a.out)?;
    let grid = epsilon_grid();
    let mut per_eps = vec![Vec::new(); grid.len()];
    let mut names = Vec::new();
    for &seed in &a.seeds {
        let mut csv = String::from("epsilon,accuracy\n");
        for (k, &eps) in grid.iter().enumerate() {
            let g = datagen::generate(&net, &gen_config(mode, eps, &a.gen, seed))?;
            let q = quantize_and_calibrate(&net, &g.batch, &a.quant)?;
            let acc = quantize::eval_quantized(&q, &eval)?;
            let _ = writeln!(csv, "{eps},{}", sci(acc));
            per_eps[k].push(acc);
        }
        let name = format!("sweep_seed{seed}.csv");
        write_file(&a.out.join(&name), &csv)?;
        names.push(name);
    }
    let medians: Vec<f64> = per_eps.into_iter().map(median).collect();
    let mut csv = String::from("epsilon,median_accuracy\n");
    for (eps, med) in grid.iter().zip(&medians) {
        let _ = writeln!(csv, "{eps},{}", sci(*med));
    }
    write_file(&a.out.join("sweep_median.csv"), &csv)?;
    names.push("sweep_median.csv".into());
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    add_artifacts(&mut m, &a.out, &names)?;
    m.result("median_accuracy", &medians);
    m.result("median_at_0.9_ge_median_at_0", medians[9] >= medians[0]);
    m.result("median_at_1.0", medians[10]);
    finish(m, &a.out)
}

pub fn ablate(a: &AblateArgs, threads: usize) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let mut m = Manifest::new("ablate", a, a.seeds[0], threads);
    let net = load_model(&a.model)?;
    let eval = load_data(&a.eval_data)?;
    check_eval(&net, &eval)?;
    create_dir(&a.out)?;
    let mut csv = String::from("seed,mode,accuracy\n");
    let mut by_mode = vec![Vec::new(); Mode::ALL.len()];
    for &seed in &a.seeds {
        for (i, mode) in Mode::ALL.into_iter().enumerate() {
            let g = datagen::generate(&net, &gen_config(mode, a.epsilon, &a.gen, seed))?;
            let q = quantize_and_calibrate(&net, &g.batch, &a.quant)?;
            let acc = quantize::eval_quantized(&q, &eval)?;
            let _ = writeln!(csv, "{seed},{mode},{}", sci(acc));
            by_mode[i].push(acc);
        }
    }
    write_file(&a.out.join("ablation.csv"), &csv)?;
    add_artifacts(&mut m, &a.out, &["ablation.csv"])?;
    for (mode, accs) in Mode::ALL.iter().zip(&by_mode) {
        m.result(&format!("median_{}", mode.name()), median(accs.clone()));
    }
    let (van, dsg) = (&by_mode[0], &by_mode[3]);
    m.result(
        "dsg_beats_vanilla_seeds",
        van.iter().zip(dsg).filter(|(v, d)| d > v).count(),
    );
    finish(m, &a.out)
}
