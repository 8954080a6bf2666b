use dsg_core::datagen::{generate, GenConfig};
use dsg_core::modelzoo::dataset::{load_any, save_idx, save_raw};
use dsg_core::modelzoo::{
    build_reference_cnn, evaluate_accuracy, glyphs, load_model, save_model, train_reference, Network,
    TrainConfig, ARCHITECTURES,
};

#[test]
fn every_architecture_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (i, arch) in ARCHITECTURES.iter().enumerate() {
        let net = build_reference_cnn::<f64>(arch, [1, 12, 12], 10, i as u64).unwrap();
        let d = dir.path().join(arch);
        save_model(&net, &d).unwrap();
        let back: Network<f64> = load_model(&d).unwrap();
        assert_eq!(back, net);
        let x = glyphs::generate::<f64>(4, 12, 0).unwrap();
        assert_eq!(back.forward(x.images()).unwrap(), net.forward(x.images()).unwrap());
    }
}

#[test]
fn stored_statistics_follow_running_buffers() {
    let net = build_reference_cnn::<f64>("cnn5bn", [1, 12, 12], 10, 0).unwrap();
    let bn = net.extract_bn_stats();
    assert_eq!(bn.layers(), 3);
    for i in 0..3 {
        assert!(bn.mu[i].data().iter().all(|&v| v == 0.0));
        assert!(bn.sigma[i].data().iter().all(|&v| v == (1.0f64 + 1e-5).sqrt()));
    }
}

#[test]
fn dataset_formats_round_trip() {
    let ds = glyphs::generate::<f64>(12, 10, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    save_raw(&ds, &raw).unwrap();
    assert_eq!(load_any::<f64>(&raw).unwrap(), ds);

    let img = dir.path().join("set-images-idx3-ubyte");
    let lab = dir.path().join("set-labels-idx1-ubyte");
    save_idx(&ds, &img, Some(&lab)).unwrap();
    let back = load_any::<f64>(&img).unwrap();
    assert_eq!(back.labels().unwrap(), ds.labels().unwrap());
    // IDX stores bytes: within half a grey level.
    assert!(back.images().max_abs_diff(ds.images()) <= 0.5 / 255.0 + 1e-12);
}

#[test]
fn small_training_run_learns_glyphs() {
    let train = glyphs::generate::<f64>(400, 12, 1).unwrap();
    let test = glyphs::generate::<f64>(100, 12, 2).unwrap();
    let net = build_reference_cnn::<f64>("cnn5bn", [1, 12, 12], 10, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let (trained, report) = train_reference(&net, &train, Some(&test), &cfg).unwrap();
    let acc = evaluate_accuracy(&trained, &test).unwrap();
    assert_eq!(Some(acc), report.val_accuracy);
    assert!(acc > 0.5, "accuracy {acc}");
}

#[test]
fn single_precision_pipeline_runs() {
    let net64 = build_reference_cnn::<f64>("toy2bn", [1, 8, 8], 3, 0).unwrap();
    let net32: Network<f32> = net64.cast();
    let cfg = GenConfig {
        iterations: 10,
        probe_count: 32,
        ..Default::default()
    };
    let g32 = generate(&net32, &cfg).unwrap();
    let g64 = generate(&net64, &cfg).unwrap();
    assert_eq!(g32.batch.shape(), g64.batch.shape());
    let gap = g32.batch.cast::<f64>().max_abs_diff(&g64.batch);
    assert!(gap < 1e-2, "f32 vs f64 generation drift {gap}");
}
