use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llpco::datagen::{load_dataset, CenterFilter, Dataset, PatchSamples};
use llpco::eval::evaluate;
use llpco::trainer::load_checkpoint;
use llpco_cli::commands::{self, RunMetrics};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_llpco"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn blobs_config(scenario: &str, epochs: usize) -> Value {
    json!({
        "data": {
            "blobs": {
                "class_count": 3, "dim": 8, "proportions": [0.5, 0.3, 0.2],
                "center_separation": 6.0, "sigma": 1.0, "samples": 1000, "seed": 0
            }
        },
        "scenario": { "kind": scenario },
        "model": { "hidden_dims": [32], "embed_dim": 16 },
        "train": { "epochs": epochs, "warmup_epochs": 1, "bag_size": 200, "samples_per_epoch": 800, "seed": 0 },
        "augmentation": { "kind": "vector", "noise_sigma": 0.3, "dropout": 0.1 }
    })
}

fn raster_config(scenario: &str) -> Value {
    json!({
        "data": {
            "raster": {
                "height": 40, "width": 40, "class_count": 3, "field_count": 12,
                "proportions": [0.5, 0.3, 0.2], "signature_gap": 1.0, "texture_sigma": 0.2,
                "patch_size": 5, "background_fraction": 0.1, "seed": 2
            }
        },
        "scenario": { "kind": scenario },
        "model": { "hidden_dims": [16], "embed_dim": 8 },
        "train": { "epochs": 2, "warmup_epochs": 1, "bag_size": 32, "samples_per_epoch": 128, "seed": 0 },
        "eval": { "knn_k": 5 }
    })
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn metrics(dir: &Path) -> RunMetrics {
    commands::load_metrics(dir).unwrap()
}

#[test]
fn generate_is_loadable_and_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &blobs_config("SI", 1));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg_s = cfg.to_str().unwrap();
    ok(&["generate", "--config", cfg_s, "--out", a.to_str().unwrap()]);
    ok(&["generate", "--config", cfg_s, "--out", b.to_str().unwrap()]);
    let bytes = fs::read(a.join("dataset.llpd")).unwrap();
    assert_eq!(bytes, fs::read(b.join("dataset.llpd")).unwrap());
    assert!(matches!(load_dataset(a.join("dataset.llpd")).unwrap(), Dataset::Vector(v) if v.len() == 1000));

    // A different seed changes the data; the sidecar records the effective config.
    let c = tmp.path().join("c");
    ok(&["generate", "--config", cfg_s, "--seed", "9", "--out", c.to_str().unwrap()]);
    assert_ne!(bytes, fs::read(c.join("dataset.llpd")).unwrap());
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(c.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["data"]["blobs"]["seed"], 9);
}

#[test]
fn raster_generate_reports_realised_proportions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg: llpco_cli::ExperimentConfig = serde_json::from_value(raster_config("SIII")).unwrap();
    let realised = commands::generate(&cfg, tmp.path()).unwrap();
    for (got, want) in realised.iter().zip([0.5, 0.3, 0.2]) {
        assert!((got - want).abs() <= 0.02, "{realised:?}");
    }
}

#[test]
fn si_blobs_benchmark_recovers_the_prior() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs_si.json");
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["generate", "--config", c, "--out", o]);
    ok(&["train", "--config", c, "--out", o]);
    let stdout = ok(&["eval", "--config", c, "--out", o]);
    assert!(stdout.contains("Acc_H"));

    let (header, rows) = csv_rows(&out.join("trace.csv"));
    assert_eq!(&header[..3], ["epoch", "loss", "lr"]);
    assert_eq!(rows.len(), 30);
    let last = rows.last().unwrap();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for i in 0..3 {
        let p: f64 = last[col(&format!("predicted_w_{i}"))].parse().unwrap();
        let w: f64 = last[col(&format!("prior_w_{i}"))].parse().unwrap();
        assert!((p - w).abs() <= 0.05, "class {i}: predicted {p}, prior {w}");
    }
    let trace_text = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace_text.starts_with("# llpco training trace\n# config: {"));

    let m = metrics(&out);
    assert!(m.headline.acc_h >= 0.95, "{m:?}");
    assert_eq!(m.scenario, "SI");
    let ck = load_checkpoint(out.join("checkpoint.llpc")).unwrap();
    let embedded = ck.training.unwrap().experiment.unwrap();
    assert_eq!(embedded["scenario"]["kind"], "SI");
}

#[test]
fn baseline_and_siii_traces_log_their_priors() {
    let tmp = tempfile::tempdir().unwrap();
    for (scenario, expect_uniform) in [("swav_baseline", true), ("SIII", false)] {
        let cfg = write_config(tmp.path(), &format!("{scenario}.json"), &blobs_config(scenario, 2));
        let out = tmp.path().join(scenario);
        let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
        ok(&["generate", "--config", c, "--out", o]);
        ok(&["train", "--config", c, "--out", o]);
        let (header, rows) = csv_rows(&out.join("trace.csv"));
        let prior_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("prior_w_")).collect();
        assert_eq!(prior_cols.len(), 3);
        for row in &rows {
            for &i in &prior_cols {
                if expect_uniform {
                    assert!((row[i].parse::<f64>().unwrap() - 1.0 / 3.0).abs() < 1e-12);
                } else {
                    assert!(row[i].is_empty());
                }
            }
        }
    }
    // The baseline is scored by k-means over several seeds.
    let cfg = tmp.path().join("swav_baseline.json");
    let out = tmp.path().join("swav_baseline");
    ok(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let m = metrics(&out);
    assert_eq!(m.kmeans.len(), 5);
    assert_eq!(m.headline.source, "kmeans_mean");
    assert!(out.join("confusion_kmeans.csv").exists());
}

#[test]
fn raster_eval_matches_the_library_and_writes_a_map() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_value = raster_config("SIV");
    let cfg = write_config(tmp.path(), "c.json", &cfg_value);
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["generate", "--config", c, "--out", o]);
    ok(&["train", "--config", c, "--out", o]);
    ok(&["eval", "--config", c, "--out", o]);

    let pgm = fs::read(out.join("map.pgm")).unwrap();
    let header = b"P5\n40 40\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 40 * 40);
    let palette = fs::read_to_string(out.join("map_palette.txt")).unwrap();
    assert!(palette.contains("0 class_0") && palette.contains("255 unlabelled"));

    let Dataset::Raster(raster) = load_dataset(out.join("dataset.llpd")).unwrap() else { panic!("raster") };
    let model = load_checkpoint(out.join("checkpoint.llpc")).unwrap().model;
    let test = PatchSamples::new(&raster, raster.centers(CenterFilter::Test)).unwrap();
    let train = PatchSamples::new(&raster, raster.centers(CenterFilter::Train)).unwrap();
    let direct = evaluate(&model, &test, Some(&train), 5).unwrap();
    let m = metrics(&out);
    assert_eq!((m.prototypes.acc_p, m.prototypes.acc_h, m.prototypes.nmi, m.prototypes.ari), (direct.acc_p, direct.acc_h, direct.nmi, direct.ari));
    assert_eq!(m.prototypes.knn_acc, direct.knn_acc);
    assert_eq!(m.permutation, direct.permutation);
}

#[test]
fn sii_trains_on_the_masked_region_with_census_priors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg_value = raster_config("SII");
    cfg_value["scenario"] = json!({
        "kind": "SII",
        "major_classes": [0, 1],
        "census": { "shares": [["wheat", 45.0], ["rice", 35.0]], "classes": ["wheat", "rice", "others"] },
        "class_names": ["wheat", "rice", "others"]
    });
    let cfg = write_config(tmp.path(), "c.json", &cfg_value);
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["generate", "--config", c, "--out", o]);
    ok(&["train", "--config", c, "--out", o]);
    let (header, rows) = csv_rows(&out.join("trace.csv"));
    let w: Vec<f64> = (0..3).map(|i| rows[0][header.iter().position(|h| *h == format!("prior_w_{i}")).unwrap()].parse().unwrap()).collect();
    for (got, want) in w.iter().zip([0.45, 0.35, 0.20]) {
        assert!((got - want).abs() < 1e-12, "{w:?}");
    }
    ok(&["eval", "--config", c, "--out", o]);
    assert!(fs::read_to_string(out.join("map_palette.txt")).unwrap().contains("2 others"));
}

#[test]
fn report_sorts_by_acc_h_and_flags_swaps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg: llpco_cli::ExperimentConfig = serde_json::from_value(blobs_config("SI", 1)).unwrap();
    let row = |acc_p: f64, acc_h: f64| commands::MetricRow {
        source: "prototypes".into(),
        acc_p,
        acc_h,
        nmi: 0.5,
        ari: 0.4,
        knn_acc: Some(0.9),
    };
    let mut paths = Vec::new();
    for (name, acc_p, acc_h) in [("low", 0.5, 0.6), ("high", 0.9, 0.9), ("swapped", 0.2, 0.8)] {
        let m = RunMetrics {
            run: name.into(),
            scenario: "SI".into(),
            bag_size: 64,
            headline: row(acc_p, acc_h),
            prototypes: row(acc_p, acc_h),
            kmeans: vec![],
            permutation: vec![0, 1, 2],
            class_names: vec!["a".into(), "b".into(), "c".into()],
            config: cfg.clone(),
        };
        let path = tmp.path().join(format!("{name}.json"));
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        paths.push(path);
    }
    let single = ok(&["report", paths[0].to_str().unwrap()]);
    assert_eq!(single.lines().count(), 2);

    let report_dir = tmp.path().join("report");
    let mut args = vec!["report", "--out", report_dir.to_str().unwrap()];
    args.extend(paths.iter().map(|p| p.to_str().unwrap()));
    let table = ok(&args);
    let order: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(order, ["high", "swapped", "low"]);
    let (header, rows) = csv_rows(&report_dir.join("report.csv"));
    let swap = header.iter().position(|h| h == "cluster_swap").unwrap();
    let flags: Vec<&str> = rows.iter().map(|r| r[swap].as_str()).collect();
    assert_eq!(flags, ["false", "true", "true"]);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"scenario": {"kind": "SI"}, "tarin": {}}"#).unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap(), "--out", o]).status.code(), Some(2));

    let missing = tmp.path().join("nope.json");
    assert_eq!(run(&["train", "--config", missing.to_str().unwrap(), "--out", o]).status.code(), Some(4));

    let good = write_config(tmp.path(), "good.json", &blobs_config("SI", 2));
    let g = good.to_str().unwrap();
    // No dataset generated yet.
    assert_eq!(run(&["train", "--config", g, "--out", o]).status.code(), Some(4));
    ok(&["generate", "--config", g, "--out", o]);

    let contradictory = {
        let mut v = blobs_config("SIII", 2);
        v["scenario"]["major_classes"] = json!([0]);
        write_config(tmp.path(), "siii.json", &v)
    };
    assert_eq!(run(&["train", "--config", contradictory.to_str().unwrap(), "--out", o]).status.code(), Some(2));

    let exploding = {
        let mut v = blobs_config("SI", 2);
        v["train"]["lr_init"] = json!(1e300);
        v["train"]["warmup_epochs"] = json!(0);
        write_config(tmp.path(), "boom.json", &v)
    };
    let boom = run(&["train", "--config", exploding.to_str().unwrap(), "--out", o]);
    assert_eq!(boom.status.code(), Some(3), "{}", String::from_utf8_lossy(&boom.stderr));

    let threads = bin().env("LLP_THREADS", "zero").args(["train", "--config", g, "--out", o]).output().unwrap();
    assert_eq!(threads.status.code(), Some(2));

    // Eval with a checkpoint from differently shaped data names both shapes.
    ok(&["train", "--config", g, "--out", o]);
    let wider = {
        let mut v = blobs_config("SI", 2);
        v["data"]["blobs"]["dim"] = json!(5);
        v["io"] = json!({ "checkpoint": out.join("checkpoint.llpc"), "dataset": tmp.path().join("wide/dataset.llpd") });
        write_config(tmp.path(), "wide.json", &v)
    };
    let w = wider.to_str().unwrap();
    ok(&["generate", "--config", w, "--out", tmp.path().join("wide").to_str().unwrap()]);
    let mismatch = run(&["eval", "--config", w, "--out", o]);
    assert_eq!(mismatch.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&mismatch.stderr);
    assert!(msg.contains("width 8") && msg.contains("width 5"), "{msg}");
}
