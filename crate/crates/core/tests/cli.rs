//! End-to-end runs of the `sphdeconv` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sphdeconv::io::{read_checkpoint, read_dataset, read_fodf, read_log, read_peaks, write_peaks, PeaksFile};
use sphdeconv::peaks::{Peak, PeakSet};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sphdeconv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SIM: &str = "workers = 1\n[simulate]\nshells = [3000.0]\ngradients_per_shell = 64\nn_voxels = 100\nsnr = 30.0\nseed = 5\n";

fn simulate(dir: &Path, cfg: &Path) -> serde_json::Value {
    let out = ok(&["simulate", "--config", s(cfg), "--out", s(dir)]);
    serde_json::from_str(out.trim()).unwrap()
}

#[test]
fn simulate_writes_three_splits_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sim.toml", SIM);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let manifest = simulate(&a, &cfg);
    simulate(&b, &cfg);
    assert_eq!(manifest["seed"], 5);
    let counts: Vec<u64> = manifest["files"].as_array().unwrap().iter().map(|f| f["voxels"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![70, 10, 20]);
    for split in ["train", "val", "test"] {
        let x = std::fs::read(a.join(format!("{split}.sdv"))).unwrap();
        let y = std::fs::read(b.join(format!("{split}.sdv"))).unwrap();
        assert_eq!(x, y, "{split} differs between runs");
    }
    let file = read_dataset(&a.join("train.sdv")).unwrap();
    assert_eq!(file.seed, 5);
    assert_eq!(file.batch.n_voxels(), 70);
    assert!(file.batch.truth().is_some());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[simulate]\nn_voxels = 100\n");
    let out = run(&["simulate", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]: "), "{err}");
    assert!(err.contains("shells"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let cfg = write(tmp.path(), "typo.toml", "[esd]\nlearning_rate = 0.1\n");
    let out = run(&["simulate", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = run(&["csd", "--dataset", "/nonexistent/x.sdv", "--response", "r.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]: "));

    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csd_peaks_and_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write(d, "sim.toml", SIM);
    simulate(d, &cfg);
    let rf = d.join("rf.json");
    let info: serde_json::Value = serde_json::from_str(
        ok(&["response", "--dataset", s(&d.join("train.sdv")), "--out", s(&rf)]).trim(),
    )
    .unwrap();
    assert_eq!(info["tissues"], serde_json::json!(["wm"]));

    let fodf = d.join("test.sdf");
    ok(&["csd", "--dataset", s(&d.join("test.sdv")), "--response", s(&rf), "--out", s(&fodf), "--config", s(&cfg)]);
    let field = read_fodf(&fodf).unwrap();
    assert_eq!(field.n_voxels(), 20);
    assert_eq!(field.wm().basis.len(), 45);

    let val_fodf = d.join("val.sdf");
    ok(&["csd", "--dataset", s(&d.join("val.sdv")), "--response", s(&rf), "--out", s(&val_fodf)]);
    let peaks = d.join("test.sdp");
    let out = ok(&[
        "peaks",
        "--fodf",
        s(&fodf),
        "--out",
        s(&peaks),
        "--select-fodf",
        s(&val_fodf),
        "--select-dataset",
        s(&d.join("val.sdv")),
    ]);
    let thr: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let file = read_peaks(&peaks).unwrap();
    assert_eq!(file.voxels.len(), 20);
    assert_eq!(file.rel_threshold, thr["rel_threshold"].as_f64().unwrap());

    let summary = d.join("summary.json");
    let plots = d.join("plots");
    let table = d.join("per_voxel.csv");
    ok(&[
        "evaluate",
        "--truth",
        s(&d.join("test.sdv")),
        "--peaks",
        s(&peaks),
        "--out",
        s(&summary),
        "--per-voxel",
        s(&table),
        "--emit-plots",
        s(&plots),
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    for key in ["success_rate", "mean_angular_error_deg", "over", "under", "kl"] {
        assert!(v.get(key).is_some(), "summary lacks {key}");
    }
    assert!(v["success_rate"].as_f64().unwrap() > 0.5);
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 21);
    let plot = std::fs::read_to_string(plots.join("success_rate.csv")).unwrap();
    assert!(plot.starts_with("gradients,success_rate\n64,"));
}

#[test]
fn evaluate_perfect_peaks_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &write(d, "sim.toml", SIM));
    let truth = read_dataset(&d.join("test.sdv")).unwrap().batch;
    let voxels = truth
        .truth()
        .unwrap()
        .iter()
        .map(|t| PeakSet {
            peaks: t
                .directions
                .iter()
                .zip(&t.fractions)
                .map(|(u, f)| Peak {
                    direction: *u,
                    amplitude: *f,
                })
                .collect(),
        })
        .collect();
    let peaks = d.join("perfect.sdp");
    write_peaks(
        &peaks,
        &PeaksFile {
            rel_threshold: 0.0,
            min_separation_deg: 15.0,
            voxels,
        },
    )
    .unwrap();
    let summary = d.join("s.json");
    ok(&["evaluate", "--truth", s(&d.join("test.sdv")), "--peaks", s(&peaks), "--out", s(&summary)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(v["success_rate"].as_f64(), Some(1.0));
    assert!(v["mean_angular_error_deg"].as_f64().unwrap() < 1e-5);
    assert_eq!(v["over"].as_f64(), Some(0.0));
    assert_eq!(v["under"].as_f64(), Some(0.0));
}

const TRAIN: &str = "workers = 1\n[esd]\nnside_in = 4\nchannels = [4, 8]\npolynomial_order = 2\nfodf_degree = 8\nmax_epochs = 2\nbatch_size = 16\nlr = 0.001\n";

#[test]
fn esd_train_and_infer_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &write(d, "sim.toml", SIM));
    let rf = d.join("rf.json");
    ok(&["response", "--dataset", s(&d.join("train.sdv")), "--out", s(&rf)]);
    let cfg = write(d, "train.toml", TRAIN);
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let ck = d.join(format!("ck{run_id}.sdc"));
        let log = d.join(format!("log{run_id}.jsonl"));
        let fodf = d.join(format!("f{run_id}.sdf"));
        ok(&[
            "esd-train",
            "--train",
            s(&d.join("train.sdv")),
            "--val",
            s(&d.join("val.sdv")),
            "--response",
            s(&rf),
            "--out",
            s(&ck),
            "--log",
            s(&log),
            "--config",
            s(&cfg),
        ]);
        ok(&["esd-infer", "--checkpoint", s(&ck), "--dataset", s(&d.join("test.sdv")), "--out", s(&fodf), "--workers", "1"]);
        outputs.push([ck, log, fodf].map(|p| std::fs::read(p).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);

    let records = read_log(&d.join("log0.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        for t in [r.train, r.val] {
            assert!((t.total - (t.reconstruction + t.sparsity + t.nonneg)).abs() <= 1e-10);
        }
    }
    let ck = read_checkpoint(&d.join("ck0.sdc")).unwrap();
    assert_eq!(ck.config.max_epochs, 2);
    assert_eq!(read_fodf(&d.join("f0.sdf")).unwrap().wm().basis.l_max(), 8);

    let other = d.join("other");
    let sim2 = SIM.replace("[3000.0]", "[1000.0]");
    simulate(&other, &write(d, "sim2.toml", &sim2));
    let out = run(&[
        "esd-infer",
        "--checkpoint",
        s(&d.join("ck0.sdc")),
        "--dataset",
        s(&other.join("test.sdv")),
        "--out",
        s(&d.join("bad.sdf")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradient_export_and_signal_import() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, &write(d, "sim.toml", SIM));
    let src = read_dataset(&d.join("val.sdv")).unwrap().batch;
    let (bvals, bvecs) = (d.join("bvals"), d.join("bvecs"));
    ok(&["export-gradients", "--dataset", s(&d.join("val.sdv")), "--bvals", s(&bvals), "--bvecs", s(&bvecs)]);
    let rows: String = (0..src.n_voxels())
        .map(|v| src.row(v).iter().map(f64::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    let signals = write(d, "signals.txt", &rows);
    let imported = d.join("imported.sdv");
    ok(&["import-signals", "--bvals", s(&bvals), "--bvecs", s(&bvecs), "--signals", s(&signals), "--out", s(&imported)]);
    let back = read_dataset(&imported).unwrap().batch;
    assert_eq!(back.table(), src.table());
    assert_eq!(back.signals(), src.signals());
    assert!(back.truth().is_none());

    let short = write(d, "short.txt", "1 2 3\n");
    let out = run(&["import-signals", "--bvals", s(&bvals), "--bvecs", s(&bvecs), "--signals", s(&short), "--out", s(&imported)]);
    assert_eq!(out.status.code(), Some(2));
}
