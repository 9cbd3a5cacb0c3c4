//! The four subcommands. Each writes its artifacts under `out` and embeds the
//! effective config in them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use llpco::datagen::{gen_blobs, gen_patch_world, load_dataset, save_dataset, Dataset};
use llpco::eval::{embed_source, encode_pgm, evaluate, kmeans_baseline, predict_map, MetricsReport};
use llpco::model::{init_model, ModelConfig};
use llpco::trainer::{
    load_checkpoint, save_checkpoint, train_from, Checkpoint, TrainInputs, TrainTrace, TrainingState,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scenario};
use crate::error::{config, file, io, CliError, Result};
use crate::experiment::Experiment;

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const KMEANS_CONFUSION_CSV: &str = "confusion_kmeans.csv";
pub const MAP_PGM: &str = "map.pgm";
pub const PALETTE_FILE: &str = "map_palette.txt";
pub const REPORT_CSV: &str = "report.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn config_comment(cfg: &ExperimentConfig) -> String {
    format!("# config: {}\n", cfg.to_json())
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(file(path))
}

// ------------------------------------------------------------------ generate

/// Writes the dataset file plus a JSON sidecar; returns the realised class
/// proportions.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<f64>> {
    let dataset = match (&cfg.data.blobs, &cfg.data.raster) {
        (Some(b), None) => Dataset::Vector(gen_blobs(b).map_err(|e| config(e.to_string()))?),
        (None, Some(r)) => Dataset::Raster(gen_patch_world(r).map_err(|e| config(e.to_string()))?),
        _ => return Err(config("data needs exactly one of `blobs` or `raster`")),
    };
    let realised = match &dataset {
        Dataset::Vector(v) => v.class_proportions(),
        Dataset::Raster(r) => r.class_area_proportions(),
    };
    create_dir(out)?;
    let path = cfg.io.dataset_path(out);
    save_dataset(&dataset, &path).map_err(file(&path))?;
    let sidecar = serde_json::json!({
        "kind": dataset.kind_name(),
        "realised_proportions": realised,
        "config": cfg,
    });
    write(&path.with_extension("json"), serde_json::to_string_pretty(&sidecar).expect("json"))?;
    println!("wrote {} dataset to {}", dataset.kind_name(), path.display());
    println!("realised proportions: {}", fmt_vec(&realised));
    Ok(realised)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// --------------------------------------------------------------------- train

/// CSV trace: `epoch, loss, lr, predicted_w_*, prior_w_*` (prior columns empty
/// for exact per-bag priors), then residual and collapse diagnostics.
pub fn trace_csv(cfg: &ExperimentConfig, trace: &TrainTrace, k: usize) -> String {
    let mut s = String::from("# llpco training trace\n");
    s.push_str(&config_comment(cfg));
    s.push_str("epoch,loss,lr");
    (0..k).for_each(|i| write!(s, ",predicted_w_{i}").unwrap());
    (0..k).for_each(|i| write!(s, ",prior_w_{i}").unwrap());
    s.push_str(",residual,min_entropy_ratio,collapse_suspected\n");
    for e in &trace.epochs {
        write!(s, "{},{},{}", e.epoch, e.loss, e.lr).unwrap();
        e.predicted_w.iter().for_each(|p| write!(s, ",{p}").unwrap());
        match &e.prior_w {
            Some(w) => w.iter().for_each(|p| write!(s, ",{p}").unwrap()),
            None => (0..k).for_each(|_| s.push(',')),
        }
        writeln!(s, ",{},{},{}", e.residual, e.min_entropy_ratio, e.collapse_suspected()).unwrap();
    }
    s
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainTrace> {
    let tc = cfg.train_config()?.clone();
    tc.validate().map_err(|e| config(e.to_string()))?;
    let data_path = cfg.io.dataset_path(out);
    let exp = Experiment::prepare(cfg, load_data(&data_path)?)?;
    let mask = if exp.scenario.kind.uses_variance_mask() { exp.variance_mask(tc.seed)? } else { None };
    let source = exp.train_source(mask.as_deref())?;
    if tc.epochs > 0 && tc.samples_per_epoch > source.len() {
        return Err(config(format!(
            "samples_per_epoch {} exceeds the {} training samples",
            tc.samples_per_epoch,
            source.len()
        )));
    }
    let prior = exp.prior()?;
    let policy = exp.augmentation(cfg.augmentation.as_ref())?;
    let model_config = ModelConfig {
        input_dim: exp.input_dim(),
        hidden_dims: cfg.model.hidden_dims.clone(),
        embed_dim: cfg.model.embed_dim,
        cluster_count: exp.class_count(),
        temperature: tc.temperature,
        precision: cfg.model.precision,
    };
    let model = init_model(model_config, cfg.model.init_seed).map_err(|e| config(e.to_string()))?;

    println!(
        "training {} on {} samples: {} classes, bag {}, {} epochs",
        exp.scenario.kind.name(),
        source.len(),
        exp.class_count(),
        tc.bag_size,
        tc.epochs
    );
    let inputs = TrainInputs { source: source.as_ref(), augmentation: &policy, prior: &prior };
    let (model, trace) = train_from(model, TrainTrace::default(), inputs, &tc, |_, t| {
        if let Some(e) = t.last() {
            println!("epoch {:>3} loss {:.4} lr {:.5} predicted w {}", e.epoch, e.loss, e.lr, fmt_vec(&e.predicted_w));
        }
        Ok(())
    })?;
    if trace.collapse_flagged() {
        println!("warning: code entropy stayed at its maximum; the run looks collapsed");
    }

    create_dir(out)?;
    let experiment = serde_json::to_value(cfg).expect("config serializes");
    let checkpoint = Checkpoint {
        model,
        training: Some(TrainingState { config: tc, trace: trace.clone(), experiment: Some(experiment) }),
    };
    let ck_path = cfg.io.checkpoint_path(out);
    save_checkpoint(&ck_path, &checkpoint).map_err(file(&ck_path))?;
    write(&out.join(TRACE_FILE), trace_csv(cfg, &trace, exp.class_count()))?;
    println!("wrote {} and {}", ck_path.display(), out.join(TRACE_FILE).display());
    Ok(trace)
}

// ---------------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub source: String,
    pub acc_p: f64,
    pub acc_h: f64,
    pub nmi: f64,
    pub ari: f64,
    pub knn_acc: Option<f64>,
}

impl MetricRow {
    fn from_report(source: &str, r: &MetricsReport) -> Self {
        Self { source: source.into(), acc_p: r.acc_p, acc_h: r.acc_h, nmi: r.nmi, ari: r.ari, knn_acc: r.knn_acc }
    }

    pub fn cluster_swap(&self) -> bool {
        self.acc_p < self.acc_h
    }
}

/// Everything `eval` measured; the input of `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: String,
    pub scenario: String,
    pub bag_size: usize,
    /// Prototype assignments, or the k-means mean for the baseline.
    pub headline: MetricRow,
    pub prototypes: MetricRow,
    #[serde(default)]
    pub kmeans: Vec<MetricRow>,
    pub permutation: Vec<usize>,
    pub class_names: Vec<String>,
    pub config: ExperimentConfig,
}

fn mean_row(rows: &[MetricRow], knn_acc: Option<f64>) -> MetricRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricRow {
        source: "kmeans_mean".into(),
        acc_p: avg(|r| r.acc_p),
        acc_h: avg(|r| r.acc_h),
        nmi: avg(|r| r.nmi),
        ari: avg(|r| r.ari),
        knn_acc,
    }
}

fn metrics_csv(m: &RunMetrics) -> String {
    let mut s = config_comment(&m.config);
    s.push_str("source,acc_p,acc_h,nmi,ari,knn_acc\n");
    let mut rows = vec![&m.prototypes];
    rows.extend(&m.kmeans);
    if !m.kmeans.is_empty() {
        rows.push(&m.headline);
    }
    for r in rows {
        let knn = r.knn_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{},{knn}", r.source, r.acc_p, r.acc_h, r.nmi, r.ari).unwrap();
    }
    s
}

fn palette(cfg: &ExperimentConfig, names: &[String]) -> String {
    let mut s = config_comment(cfg);
    s.push_str("# gray value -> class\n");
    names.iter().enumerate().for_each(|(i, n)| writeln!(s, "{i} {n}").unwrap());
    s.push_str("255 unlabelled\n");
    s
}

fn run_name(out: &Path) -> String {
    out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| out.display().to_string())
}

pub fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<RunMetrics> {
    let ck_path = cfg.io.checkpoint_path(out);
    let checkpoint = load_checkpoint(&ck_path).map_err(file(&ck_path))?;
    let data_path = cfg.io.dataset_path(out);
    let exp = Experiment::prepare(cfg, load_data(&data_path)?)?;
    let model = &checkpoint.model;
    let mc = &model.config;
    if mc.input_dim != exp.input_dim() || mc.cluster_count != exp.class_count() {
        return Err(config(format!(
            "checkpoint {} expects inputs of width {} and {} classes; dataset {} gives width {} and {} classes",
            ck_path.display(),
            mc.input_dim,
            mc.cluster_count,
            data_path.display(),
            exp.input_dim(),
            exp.class_count()
        )));
    }
    let test = exp.test_source()?;
    let train = exp.labelled_train()?;
    let report = evaluate(model, test.as_ref(), Some(train.as_ref()), cfg.eval.knn_k)?;
    let prototypes = MetricRow::from_report("prototypes", &report);

    let mut kmeans = Vec::new();
    let mut kmeans_confusion = None;
    if exp.scenario.kind == Scenario::SwavBaseline {
        if cfg.eval.kmeans_seeds.is_empty() {
            return Err(config("the baseline needs at least one k-means seed"));
        }
        let z = embed_source(model, test.as_ref())?;
        let labels = test.labels().expect("test samples are labelled");
        let reports = kmeans_baseline(&z, &labels, exp.class_count(), &cfg.eval.kmeans_seeds)?;
        for (seed, r) in cfg.eval.kmeans_seeds.iter().zip(&reports) {
            kmeans.push(MetricRow::from_report(&format!("kmeans_seed_{seed}"), r));
        }
        kmeans_confusion = reports.first().map(|r| r.confusion.to_csv());
    }
    let headline = if kmeans.is_empty() { prototypes.clone() } else { mean_row(&kmeans, report.knn_acc) };
    let metrics = RunMetrics {
        run: run_name(out),
        scenario: exp.scenario.kind.name().into(),
        bag_size: cfg.train.as_ref().map_or(0, |t| t.bag_size),
        headline,
        prototypes,
        kmeans,
        permutation: report.permutation.clone(),
        class_names: exp.class_names.clone(),
        config: cfg.clone(),
    };

    create_dir(out)?;
    write(&out.join(METRICS_JSON), serde_json::to_string_pretty(&metrics).expect("json"))?;
    write(&out.join(METRICS_CSV), metrics_csv(&metrics))?;
    write(&out.join(CONFUSION_CSV), format!("{}{}", config_comment(cfg), report.confusion.to_csv()))?;
    if let Some(csv) = kmeans_confusion {
        write(&out.join(KMEANS_CONFUSION_CSV), format!("{}{csv}", config_comment(cfg)))?;
    }
    if let (Some(raster), true) = (exp.raster(), cfg.eval.class_map) {
        let map = predict_map(model, raster, &report.permutation)?;
        write(&out.join(MAP_PGM), encode_pgm(&map, raster.width, raster.height)?)?;
        write(&out.join(PALETTE_FILE), palette(cfg, &exp.class_names))?;
    }
    print!("{}", render_table(std::slice::from_ref(&metrics)));
    Ok(metrics)
}

// -------------------------------------------------------------------- report

/// Accepts `metrics.json` files or run directories containing one.
pub fn load_metrics(path: &Path) -> Result<RunMetrics> {
    let file_path: PathBuf = if path.is_dir() { path.join(METRICS_JSON) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file_path).map_err(io(&file_path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::File { path: file_path.clone(), source: llpco::Error::Format(e.to_string()) })
}

/// Sorted by headline Acc_H, best first; equal scores keep input order.
pub fn sort_runs(runs: &mut [RunMetrics]) {
    runs.sort_by(|a, b| b.headline.acc_h.total_cmp(&a.headline.acc_h));
}

pub fn render_table(runs: &[RunMetrics]) -> String {
    let header = ["run", "scenario", "bag", "Acc_P", "Acc_H", "NMI", "ARI", "kNN", "swap"];
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|m| {
            let h = &m.headline;
            vec![
                m.run.clone(),
                m.scenario.clone(),
                m.bag_size.to_string(),
                format!("{:.4}", h.acc_p),
                format!("{:.4}", h.acc_h),
                format!("{:.4}", h.nmi),
                format!("{:.4}", h.ari),
                h.knn_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                if h.cluster_swap() { "yes".into() } else { "no".into() },
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("{}\n", padded.join("  ").trim_end())
    };
    let mut s = line(header.to_vec());
    for r in &rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

pub fn report_csv(runs: &[RunMetrics]) -> String {
    let mut s = String::new();
    for m in runs {
        writeln!(s, "# {}: {}", m.run, m.config.to_json()).unwrap();
    }
    s.push_str("run,scenario,bag_size,acc_p,acc_h,nmi,ari,knn_acc,cluster_swap\n");
    for m in runs {
        let h = &m.headline;
        let knn = h.knn_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{},{},{},{knn},{}", m.run, m.scenario, m.bag_size, h.acc_p, h.acc_h, h.nmi, h.ari, h.cluster_swap())
            .unwrap();
    }
    s
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<Vec<RunMetrics>> {
    if inputs.is_empty() {
        return Err(config("report needs at least one metrics file"));
    }
    let mut runs = inputs.iter().map(|p| load_metrics(p)).collect::<Result<Vec<_>>>()?;
    sort_runs(&mut runs);
    print!("{}", render_table(&runs));
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join(REPORT_CSV), report_csv(&runs))?;
    }
    Ok(runs)
}
