//! Command-line behaviour: exit codes, manifests, config precedence and the
//! small contracts of each subcommand.

use std::path::Path;
use std::process::{Command, Output};

use dsg_core::datagen;
use dsg_core::modelzoo::{self, build_reference_cnn, dataset};
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsg"))
        .args(args)
        .env_remove("DSG_THREADS")
        .output()
        .expect("dsg runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// A small untrained model plus 40 glyphs of matching shape.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let net = build_reference_cnn::<f64>("toy2bn", [1, 12, 12], 10, 1).unwrap();
    modelzoo::save_model(&net, &dir.path().join("model")).unwrap();
    ok(&["make-data", "--count", "40", "--side", "12", "--out", p(&dir.path().join("data"))]);
    dir
}

#[test]
fn usage_errors_exit_two_without_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    assert_eq!(run(&["train", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(run(&["make-data", "--out", p(&out), "--colour", "red"]).status.code(), Some(2));
    assert_eq!(run(&["make-data", "--format", "idx", "--pixels", "standard", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert!(!out.join("manifest.json").exists());
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn format_errors_exit_three() {
    let d = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(d.path().join("m")).unwrap();
    std::fs::write(d.path().join("m/model.json"), "{not json").unwrap();
    let out = run(&["generate", "--model", p(&d.path().join("m")), "--out", p(&d.path().join("g"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!d.path().join("g/manifest.json").exists());
}

#[test]
fn bad_bit_width_is_a_usage_error() {
    let f = fixture();
    let out = run(&[
        "calibrate-eval", "--model", p(&f.path().join("model")), "--calib-data", p(&f.path().join("data")),
        "--eval-data", p(&f.path().join("data")), "--wbits", "9", "--out", p(&f.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let f = fixture();
    let out = f.path().join("m0");
    ok(&["train", "--arch", "toy2bn", "--data", p(&f.path().join("data")), "--epochs", "0", "--seed", "5", "--out", p(&out)]);
    let saved = modelzoo::load_model::<f64>(&out).unwrap();
    assert_eq!(saved, build_reference_cnn::<f64>("toy2bn", [1, 12, 12], 10, 5).unwrap());
    let m = manifest(&out);
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["epochs"], 0);
    assert_eq!(m["config"]["lr"], 0.05);
    assert!(m["artifacts"]["weights.bin"]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn generate_defaults_and_zero_iterations() {
    let f = fixture();
    let out = f.path().join("g");
    let o = ok(&["generate", "--model", p(&f.path().join("model")), "--iters", "0", "--seed", "8", "--out", p(&out)]);
    assert!(o.stderr.is_empty());
    let batch = dataset::load_raw::<f64>(&out).unwrap();
    // Default batch size is the model's BN layer count.
    assert_eq!(batch.images(), &datagen::init_gaussian::<f64>(&[2, 1, 12, 12], 8).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("gen.log")).unwrap(), "iter,total_loss\n");
    assert_eq!(manifest(&out)["config"]["mode"], "dsg");
}

#[test]
fn epsilon_is_ignored_with_a_warning_by_vanilla() {
    let f = fixture();
    let (a, b) = (f.path().join("a"), f.path().join("b"));
    let model = f.path().join("model");
    let o = ok(&["generate", "--model", p(&model), "--mode", "vanilla", "--epsilon", "0.9", "--iters", "5", "--out", p(&a)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(manifest(&a)["results"]["effective_epsilon"], 0.0);
    ok(&["generate", "--model", p(&model), "--mode", "vanilla", "--iters", "5", "--out", p(&b)]);
    assert_eq!(std::fs::read(a.join("data.bin")).unwrap(), std::fs::read(b.join("data.bin")).unwrap());
}

#[test]
fn zero_epsilon_slack_alignment_tracks_vanilla() {
    let f = fixture();
    let (a, b) = (f.path().join("a"), f.path().join("b"));
    let model = f.path().join("model");
    ok(&["generate", "--model", p(&model), "--mode", "sda", "--epsilon", "0", "--iters", "20", "--out", p(&a)]);
    ok(&["generate", "--model", p(&model), "--mode", "vanilla", "--iters", "20", "--out", p(&b)]);
    let (x, y) = (dataset::load_raw::<f64>(&a).unwrap(), dataset::load_raw::<f64>(&b).unwrap());
    for (u, v) in x.images().data().iter().zip(y.images().data()) {
        assert!((u - v).abs() <= 1e-9, "{u} vs {v}");
    }
}

#[test]
fn flags_override_config_file_values() {
    let f = fixture();
    let cfg = f.path().join("run.cfg");
    std::fs::write(&cfg, "# generation\niters = 3\nmode=sda\nseed=2\n").unwrap();
    let out = f.path().join("g");
    ok(&["generate", "--config", p(&cfg), "--model", p(&f.path().join("model")), "--iters", "2", "--out", p(&out)]);
    let m = manifest(&out);
    assert_eq!(m["config"]["iters"], 2);
    assert_eq!(m["config"]["mode"], "sda");
    assert_eq!(m["seed"], 2);
    assert_eq!(std::fs::read_to_string(out.join("gen.log")).unwrap().lines().count(), 3);
}

#[test]
fn threads_fall_back_to_the_environment() {
    let f = fixture();
    let out = f.path().join("g");
    let o = Command::new(env!("CARGO_BIN_EXE_dsg"))
        .args(["generate", "--model", p(&f.path().join("model")), "--iters", "2", "--out", p(&out)])
        .env("DSG_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(manifest(&out)["threads"], 3);
}

#[test]
fn calibrate_eval_sentinels_and_equivalences() {
    let f = fixture();
    let (model, data) = (f.path().join("model"), f.path().join("data"));
    let acc = |extra: &[&str], name: &str| -> Value {
        let out = f.path().join(name);
        let mut args = vec!["calibrate-eval", "--model", p(&model), "--calib-data", p(&data), "--eval-data", p(&data)];
        args.extend_from_slice(extra);
        args.extend(["--out", p(&out)]);
        ok(&args);
        manifest(&out)["results"].clone()
    };
    let vanilla = acc(&["--wbits", "4", "--abits", "4"], "v");
    let pct = acc(&["--wbits", "4", "--abits", "4", "--quant", "percentile", "--p", "1.0"], "p");
    assert_eq!(vanilla["accuracy"], pct["accuracy"]);

    let fp = acc(&["--wbits", "32", "--abits", "32"], "fp");
    assert_eq!(fp["accuracy"], fp["fp_accuracy"]);
    let csv = std::fs::read_to_string(f.path().join("fp/calibration.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);

    let w8 = acc(&["--abits", "32"], "w8");
    let csv = std::fs::read_to_string(f.path().join("w8/calibration.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("weight.")));
    assert!(w8["accuracy"].as_f64().is_some());
}

#[test]
fn diagnose_writes_every_table() {
    let f = fixture();
    let out = f.path().join("d");
    ok(&[
        "diagnose", "--model", p(&f.path().join("model")), "--data", p(&f.path().join("data")), "--reference",
        p(&f.path().join("data")), "--layer", "1", "--channel", "2", "--out", p(&out),
    ]);
    for name in ["dispersion.csv", "dispersion_ratio.csv", "histogram.csv", "histogram.bn.csv"] {
        assert!(manifest(&out)["artifacts"][name]["sha256"].is_string(), "{name}");
    }
    // Identical batches give ratio 1 everywhere.
    let ratios = std::fs::read_to_string(out.join("dispersion_ratio.csv")).unwrap();
    for line in ratios.lines().skip(1) {
        for v in line.split(',').skip(1) {
            assert_eq!(v.parse::<f64>().unwrap(), 1.0, "{line}");
        }
    }
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("sample_id,value"));
    let bad = run(&[
        "diagnose", "--model", p(&f.path().join("model")), "--data", p(&f.path().join("data")), "--layer", "7",
        "--out", p(&f.path().join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sweep_writes_eleven_rows_per_seed() {
    let f = fixture();
    let out = f.path().join("s");
    ok(&[
        "sweep-epsilon", "--model", p(&f.path().join("model")), "--eval-data", p(&f.path().join("data")), "--seeds",
        "3,4", "--iters", "2", "--probe", "16", "--out", p(&out),
    ]);
    for seed in [3, 4] {
        let csv = std::fs::read_to_string(out.join(format!("sweep_seed{seed}.csv"))).unwrap();
        let eps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(eps, ["0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "1"]);
    }
    assert_eq!(manifest(&out)["results"]["median_accuracy"].as_array().unwrap().len(), 11);
    let vanilla = run(&[
        "sweep-epsilon", "--model", p(&f.path().join("model")), "--eval-data", p(&f.path().join("data")), "--mode",
        "vanilla", "--out", p(&f.path().join("sv")),
    ]);
    assert_eq!(vanilla.status.code(), Some(2));
}

#[test]
fn ablate_covers_every_mode_and_seed() {
    let f = fixture();
    let out = f.path().join("ab");
    ok(&[
        "ablate", "--model", p(&f.path().join("model")), "--eval-data", p(&f.path().join("data")), "--seeds", "0,1",
        "--iters", "2", "--probe", "16", "--out", p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(manifest(&out)["results"]["median_dsg"].is_number());
}
