use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use grcn::data::{
    filter_small_classes, load_dataset, random_split, resolve_dataset, save_canonical_json, Dataset, DatasetFormat,
    SplitProtocol,
};
use grcn::models::Variant;
use grcn::training::{
    edge_retention_experiment, grid_search, label_sparsity_experiment, main_experiment, train, trial_seed,
    ExperimentConfig, ExperimentReport, GridReport, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::args::{ConvertArgs, DataArgs, Experiment, GridArgs, ModelArgs, SplitKind, SweepArgs, TrainArgs};

/// Failure kinds, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

const CITATION_DATASETS: [&str; 3] = ["cora", "citeseer", "pubmed"];

#[derive(Serialize)]
struct DatasetInfo {
    name: String,
    path: PathBuf,
    format: DatasetFormat,
    nodes: usize,
    edges: usize,
    features: usize,
    classes: usize,
}

fn locate(dataset: &str, data_dir: Option<&Path>, format: Option<DatasetFormat>) -> CmdResult<(PathBuf, DatasetFormat)> {
    let direct = Path::new(dataset);
    if direct.exists() {
        let fmt = format.unwrap_or_else(|| {
            if direct.extension().is_some_and(|x| x == "json") {
                DatasetFormat::CanonicalJson
            } else {
                DatasetFormat::CitationText
            }
        });
        return Ok((direct.to_path_buf(), fmt));
    }
    let dir = data_dir.ok_or_else(|| {
        usage(format!(
            "dataset {dataset:?} is not a path and no data directory is set (use --data-dir or GRCN_DATA_DIR)"
        ))
    })?;
    resolve_dataset(dir, dataset, format).map_err(usage)
}

fn load(args: &DataArgs) -> CmdResult<(Dataset, DatasetInfo)> {
    let (path, format) = locate(&args.dataset, args.data_dir.as_deref(), args.format)?;
    let mut d = load_dataset(&path, format).map_err(|e| match e {
        grcn::Error::DatasetNotFound(_) => usage(e),
        other => Failure::Runtime(other.into()),
    })?;
    if let Some(min) = args.min_class_size {
        d = filter_small_classes(&d, min)?;
    }
    log::info!("loaded {}: {}", path.display(), d.stats_line());
    let info = DatasetInfo {
        name: d.name.clone(),
        path,
        format,
        nodes: d.node_count(),
        edges: d.edge_count(),
        features: d.feature_dim(),
        classes: d.class_count(),
    };
    Ok((d, info))
}

fn protocol(args: &DataArgs, d: &Dataset) -> SplitProtocol {
    match args.split {
        SplitKind::Citation => SplitProtocol::CITATION,
        SplitKind::PerClass => SplitProtocol::PER_CLASS,
        SplitKind::Auto if CITATION_DATASETS.contains(&d.name.to_ascii_lowercase().as_str()) => {
            SplitProtocol::CITATION
        }
        SplitKind::Auto => SplitProtocol::PER_CLASS,
    }
}

fn train_config(m: &ModelArgs, variant: Variant, normalize: bool) -> TrainConfig {
    let mut c = TrainConfig {
        seed: m.seed,
        normalize_features: normalize,
        ..TrainConfig::default()
    };
    c.model.variant = variant;
    if let Some(v) = m.epochs {
        c.epochs = v;
    }
    if let Some(v) = m.lr_revision {
        c.lr_revision = v;
    }
    if let Some(v) = m.lr_classification {
        c.lr_classification = v;
    }
    if let Some(v) = m.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = m.topk {
        c.model.topk = v;
    }
    if let Some(v) = m.hidden_g {
        c.model.hidden_g = v;
    }
    if let Some(v) = m.hidden_c {
        c.model.hidden_c = v;
    }
    if let Some(v) = m.embed_dim {
        c.model.embed_dim = v;
    }
    if let Some(v) = m.dropout {
        c.model.dropout_c = v;
    }
    if let Some(v) = m.dropout_g {
        c.model.dropout_g = v;
    }
    if let Some(v) = m.svd_rank {
        c.model.svd_rank = v;
    }
    c
}

fn checked_config(m: &ModelArgs, variant: Variant, normalize: bool) -> CmdResult<TrainConfig> {
    let c = train_config(m, variant, normalize);
    c.validate().map_err(usage)?;
    Ok(c)
}

fn prepare_out_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    dataset: &DatasetInfo,
    config: &impl Serialize,
    seeds: serde_json::Value,
    outputs: &[&str],
    started: Instant,
) -> CmdResult {
    let manifest = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "build": {
            "package": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "profile": if cfg!(debug_assertions) { "debug" } else { "release" },
        },
        "dataset": dataset,
        "config": config,
        "seeds": seeds,
        "outputs": outputs,
        "wall_time": started.elapsed().as_secs_f64(),
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn threads(requested: Option<usize>) -> CmdResult<usize> {
    match requested {
        Some(0) => Err(usage("--parallel must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let started = Instant::now();
    let config = checked_config(&args.model, args.variant, !args.data.no_normalize)?;
    let (d, info) = load(&args.data)?;
    let split_seed = trial_seed(config.seed, 0, 0);
    let split = random_split(&d, protocol(&args.data, &d), split_seed)?;
    let out = train(&config, &d, &split)?;
    let r = &out.result;

    let dir = &args.model.out_dir;
    prepare_out_dir(dir)?;
    out.checkpoint.save(dir.join("checkpoint.bin"))?;
    let result = json!({
        "manifest": "manifest.json",
        "variant": config.model.variant,
        "best_val_accuracy": r.best_val_accuracy,
        "test_accuracy": r.test_accuracy_at_best_val,
        "train_accuracy": r.train_accuracy_at_best_val,
        "epoch_of_best": r.epoch_of_best,
        "epochs": r.epochs,
        "loss_history": r.loss_history,
        "split_sizes": { "train": split.train.len(), "val": split.val.len(), "test": split.test.len() },
        "timing": {
            "wall_time": r.wall_time,
            "mean_epoch_time_after_first": r.mean_epoch_time_after_first(),
            "epoch_times": r.epoch_times,
        },
    });
    write_json(&dir.join("result.json"), &result)?;
    write_manifest(
        dir,
        "train",
        &info,
        &config,
        json!({ "model": config.seed, "split": split_seed }),
        &["result.json", "checkpoint.bin"],
        started,
    )?;
    println!("test_acc={:.4} at epoch {}", r.test_accuracy_at_best_val, r.epoch_of_best);
    Ok(())
}

fn write_report(dir: &Path, report: &ExperimentReport) -> CmdResult {
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["axis_value", "variant", "mean_acc", "std_acc", "trials"])?;
    for c in &report.cells {
        w.write_record([
            c.axis_value.to_string(),
            c.variant.to_string(),
            format!("{:.6}", c.mean_acc),
            format!("{:.6}", c.std_acc),
            c.trials.len().to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("sweep.json"), &json!({ "manifest": "manifest.json", "report": report }))
}

pub fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let started = Instant::now();
    let variants = if !args.variant.is_empty() {
        args.variant.clone()
    } else if args.experiment == Experiment::Ablation {
        vec![Variant::Gcn, Variant::Grcn, Variant::Svd, Variant::Fo, Variant::Fg, Variant::Rwfg]
    } else {
        vec![Variant::Gcn, Variant::Grcn]
    };
    if args.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    match args.experiment {
        Experiment::Edges if args.ratios.is_empty() => return Err(usage("--ratios is empty")),
        Experiment::Labels if args.labels_per_class.is_empty() => return Err(usage("--labels-per-class is empty")),
        _ => {}
    }
    if let Some(r) = args.ratios.iter().chain([&args.retention]).find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(usage(format!("retention ratio {r} outside [0, 1]")));
    }
    if args.labels_per_class.contains(&0) {
        return Err(usage("--labels-per-class values must be at least 1"));
    }
    let base = checked_config(&args.model, variants[0], !args.data.no_normalize)?;
    let parallel = threads(args.parallel)?;
    let (d, info) = load(&args.data)?;
    let cfg = ExperimentConfig {
        base,
        variants,
        trials: args.trials,
        protocol: protocol(&args.data, &d),
        parallel,
    };
    let report = match args.experiment {
        Experiment::Edges => edge_retention_experiment(&cfg, &d, &args.ratios)?,
        Experiment::Labels => label_sparsity_experiment(&cfg, &d, &args.labels_per_class, args.retention)?,
        Experiment::Main | Experiment::Ablation => main_experiment(&cfg, &d)?,
    };
    let dir = &args.model.out_dir;
    prepare_out_dir(dir)?;
    write_report(dir, &report)?;
    write_manifest(
        dir,
        "sweep",
        &info,
        &cfg,
        json!({ "base": cfg.base.seed }),
        &["sweep.csv", "sweep.json"],
        started,
    )?;
    for c in &report.cells {
        println!(
            "{}={} {}: {:.2} ± {:.2} ({} trials)",
            report.axis,
            c.axis_value,
            c.variant,
            100.0 * c.mean_acc,
            100.0 * c.std_acc,
            c.trials.len()
        );
    }
    Ok(())
}

fn flags_line(c: &TrainConfig) -> String {
    format!(
        "--variant {} --epochs {} --lr-revision {} --lr-classification {} --weight-decay {} --topk {} \
         --hidden-g {} --hidden-c {} --embed-dim {} --dropout {} --dropout-g {} --svd-rank {} --seed {}{}",
        c.model.variant,
        c.epochs,
        c.lr_revision,
        c.lr_classification,
        c.weight_decay,
        c.model.topk,
        c.model.hidden_g,
        c.model.hidden_c,
        c.model.embed_dim,
        c.model.dropout_c,
        c.model.dropout_g,
        c.model.svd_rank,
        c.seed,
        if c.normalize_features { "" } else { " --no-normalize" }
    )
}

fn write_grid(dir: &Path, report: &GridReport) -> CmdResult {
    let path = dir.join("grid.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["weight_decay", "topk", "val_acc", "test_acc", "epoch_of_best", "best"])?;
    for (i, r) in report.rows.iter().enumerate() {
        w.write_record([
            r.weight_decay.to_string(),
            r.topk.to_string(),
            format!("{:.6}", r.val_accuracy),
            format!("{:.6}", r.test_accuracy),
            r.epoch_of_best.to_string(),
            (i == report.best).to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("best_config.flags"), flags_line(&report.best_config) + "\n")?;
    write_json(&dir.join("grid.json"), &json!({ "manifest": "manifest.json", "report": report }))
}

pub fn cmd_gridsearch(args: &GridArgs) -> CmdResult {
    let started = Instant::now();
    if args.weight_decays.is_empty() || args.topks.is_empty() {
        return Err(usage("grids must be nonempty"));
    }
    let base = checked_config(&args.model, args.variant, !args.data.no_normalize)?;
    let parallel = threads(args.parallel)?;
    let (d, info) = load(&args.data)?;
    let split_seed = trial_seed(base.seed, 0, 0);
    let split = random_split(&d, protocol(&args.data, &d), split_seed)?;
    let report = grid_search(&base, &d, &split, &args.weight_decays, &args.topks, parallel)?;
    let dir = &args.model.out_dir;
    prepare_out_dir(dir)?;
    write_grid(dir, &report)?;
    write_manifest(
        dir,
        "gridsearch",
        &info,
        &base,
        json!({ "model": base.seed, "split": split_seed }),
        &["grid.csv", "grid.json", "best_config.flags"],
        started,
    )?;
    let best = &report.rows[report.best];
    println!(
        "best weight_decay={} topk={} val_acc={:.4} test_acc={:.4}",
        best.weight_decay, best.topk, best.val_accuracy, best.test_accuracy
    );
    Ok(())
}

pub fn cmd_convert(args: &ConvertArgs) -> CmdResult {
    if args.out_format != DatasetFormat::CanonicalJson {
        return Err(usage("only canonical-json output is supported"));
    }
    let (path, format) = locate(&args.dataset, args.data_dir.as_deref(), Some(args.in_format))?;
    let d = load_dataset(&path, format).map_err(|e| match e {
        grcn::Error::DatasetNotFound(_) | grcn::Error::Io { .. } => usage(e),
        other => Failure::Runtime(other.into()),
    })?;
    let output = match &args.output {
        Some(p) => p.clone(),
        None => args.out_dir.join(format!("{}.json", d.name)),
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out_dir(parent)?;
    }
    save_canonical_json(&d, &output)?;
    println!("{}: {}", d.name, d.stats_line());
    Ok(())
}
