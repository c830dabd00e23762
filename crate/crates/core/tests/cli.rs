use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srfnet::checkpoint::Checkpoint;
use srfnet::dataset::load_depth;
use srfnet::metrics::{CutoffMode, MetricAccumulator, DEFAULT_CUTOFFS};
use srfnet::train::{RunConfig, Trainer};

fn srfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srfnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn small_config(dir: &Path) -> (RunConfig, PathBuf) {
    let cfg = RunConfig {
        sequences: 4,
        frames: 3,
        resolution: [32, 32],
        sequence_length: 2,
        epochs: 2,
        batch_size: 2,
        checkpoint_every: 1000,
        ..RunConfig::desk()
    };
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    (cfg, path)
}

fn synth(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--config", s(config), "--dataset", s(out)];
    args.extend_from_slice(extra);
    let o = srfnet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn losses(csv: &Path) -> Vec<f64> {
    std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

fn sobel_energy(stdout: &[u8]) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find(|l| l.starts_with("mean frame Sobel energy")).unwrap();
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn synth_is_deterministic_and_gain_lowers_edges() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = small_config(dir.path());
    let a = synth(&config, &dir.path().join("a"), &[]);
    synth(&config, &dir.path().join("b"), &[]);
    let night = synth(&config, &dir.path().join("night"), &["--gain", "0.2"]);
    for i in 0..4 {
        let name = format!("seq_{i:03}/events.csv");
        let ea = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let eb = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(ea, eb, "{name} differs between identical runs");
    }
    assert!(sobel_energy(&night.stdout) < sobel_energy(&a.stdout));
}

#[test]
fn bypass_eval_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = small_config(dir.path());
    let data = dir.path().join("data");
    synth(&config, &data, &[]);
    let out = dir.path().join("eval");
    let o = srfnet(&["eval", "--config", s(&config), "--dataset", s(&data), "--out", s(&out), "--bypass"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let keys = [
        "avg_abs_error_10", "avg_abs_error_20", "avg_abs_error_30", "abs_rel", "sq_rel", "rmse", "rmse_log", "si_log",
        "delta_1",
    ];
    for k in keys {
        assert!(report.get(k).is_some(), "missing {k}");
    }
    for k in ["abs_rel", "sq_rel", "rmse", "rmse_log", "si_log"] {
        assert_eq!(report[k].as_f64(), Some(0.0), "{k}");
    }
    assert_eq!(report["delta_1"].as_f64(), Some(1.0));
    assert!(out.join("metrics.txt").exists());
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, config) = small_config(dir.path());
    let data = dir.path().join("data");
    synth(&config, &data, &[]);

    // zero epochs: the checkpoint holds the initial parameters
    let zero = dir.path().join("zero");
    let o = srfnet(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&zero), "--epochs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&zero.join("last.ckpt")).unwrap();
    let init = Trainer::new(cfg.clone()).unwrap();
    let fresh = Checkpoint::from_store(String::new(), &init.params, None);
    assert_eq!(ck.params, fresh.params);

    // 100 epochs of 2 batches: 200 steps
    let long = dir.path().join("long");
    let o = srfnet(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&long), "--epochs", "100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let l = losses(&long.join("loss.csv"));
    assert_eq!(l.len(), 200);
    let tail = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * l[0], "loss {} -> {tail}", l[0]);

    // eval of the trained checkpoint agrees with the metrics of its dumps
    let ev = dir.path().join("eval");
    let ckpt = long.join("last.ckpt");
    let o = srfnet(&["eval", "--config", s(&config), "--dataset", s(&data), "--out", s(&ev), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let mut acc = MetricAccumulator::new(&DEFAULT_CUTOFFS, CutoffMode::GroundTruth);
    let mut dumps: Vec<PathBuf> = std::fs::read_dir(ev.join("dumps")).unwrap().map(|e| e.unwrap().path()).collect();
    dumps.sort();
    for d in &dumps {
        for k in 0..cfg.sequence_length {
            let pred = load_depth(&d.join("pred"), k).unwrap();
            let gt = load_depth(&d.join("gt"), k).unwrap().with_floor_invalid();
            acc.push_raster(&pred, &gt).unwrap();
        }
    }
    for (key, value) in acc.finish().entries() {
        let reported = report[&key].as_f64().unwrap();
        assert!((reported - value).abs() <= 1e-5 * value.abs().max(1.0), "{key}: {reported} vs {value}");
    }
    let dump = &dumps[0];
    let pred = load_depth(&dump.join("pred"), 1).unwrap();
    let io = srfnet(&["infer", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&dir.path().join("infer"))]);
    assert!(io.status.success(), "{}", String::from_utf8_lossy(&io.stderr));
    let inferred = load_depth(&dir.path().join("infer").join(dump.file_name().unwrap()).join("pred"), 1).unwrap();
    assert_eq!(inferred.data, pred.data);

    // a run interrupted after 3 epochs and resumed matches the unbroken run
    let unbroken = dir.path().join("unbroken");
    let o = srfnet(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&unbroken), "--epochs", "6"]);
    assert!(o.status.success());
    let split = dir.path().join("split");
    let o = srfnet(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&split), "--epochs", "3"]);
    assert!(o.status.success());
    let resume = split.join("last.ckpt");
    let o = srfnet(&[
        "train", "--config", s(&config), "--dataset", s(&data), "--out", s(&split), "--epochs", "6", "--resume", s(&resume),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(unbroken.join("loss.csv")).unwrap(),
        std::fs::read_to_string(split.join("loss.csv")).unwrap()
    );
}

#[test]
fn gradcheck_exit_codes() {
    let ok = srfnet(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = srfnet(&["gradcheck", "--corrupt", "1.01"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn bad_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = small_config(dir.path());
    let data = dir.path().join("data");
    synth(&config, &data, &[]);
    let events = data.join("seq_001/events.csv");
    std::fs::write(&events, "t,x,y,p\n10,1,1,7\n").unwrap();
    let o = srfnet(&["eval", "--config", s(&config), "--dataset", s(&data), "--bypass", "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("events.csv"));
    let o = srfnet(&["train", "--resolution", "banana"]);
    assert_eq!(o.status.code(), Some(2));
}
