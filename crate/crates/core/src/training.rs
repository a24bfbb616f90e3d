//! Full-batch training, model selection, grid search and the sweep protocols.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{random_split, row_normalize_sparse, Dataset, Split, SplitProtocol};
use crate::error::{Error, Result};
use crate::graph::sample_retained_edges;
use crate::models::{GrcnModel, ModelConfig, ModelInputs, Variant};
use crate::optim::Adam;

pub const WEIGHT_DECAY_GRID: [f64; 6] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2];
pub const TOPK_GRID: [usize; 7] = [5, 10, 20, 30, 50, 100, 200];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr_revision: f64,
    pub lr_classification: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// L1-normalise feature rows before training.
    pub normalize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 300,
            lr_revision: 1e-3,
            lr_classification: 5e-3,
            weight_decay: 5e-4,
            seed: 0,
            normalize_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        for (name, v) in [
            ("lr_revision", self.lr_revision),
            ("lr_classification", self.lr_classification),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("dropout_c", self.model.dropout_c), ("dropout_g", self.model.dropout_g)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.model.topk == 0 {
            return Err(Error::invalid("top-K must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub best_val_accuracy: f64,
    pub test_accuracy_at_best_val: f64,
    pub train_accuracy_at_best_val: f64,
    /// 1-based epoch whose parameters were selected.
    pub epoch_of_best: usize,
    pub epochs: usize,
    /// Training loss of every epoch.
    pub loss_history: Vec<f64>,
    /// Seconds for the whole run.
    pub wall_time: f64,
    /// Seconds per epoch.
    pub epoch_times: Vec<f64>,
}

impl TrialResult {
    /// Mean epoch time, skipping the first epoch when there is more than one.
    pub fn mean_epoch_time_after_first(&self) -> f64 {
        let t = if self.epoch_times.len() > 1 {
            &self.epoch_times[1..]
        } else {
            &self.epoch_times[..]
        };
        t.iter().sum::<f64>() / t.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: TrialResult,
    /// Parameters of the selected epoch.
    pub checkpoint: Checkpoint,
}

/// Fraction of `mask` whose argmax logit equals the label; ties pick the
/// smallest class index.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("accuracy over an empty mask"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape("accuracy", logits.shape(), (labels.len(), 1)));
    }
    let mut correct = 0usize;
    for &i in mask {
        if i >= logits.rows() {
            return Err(Error::Index {
                op: "accuracy",
                index: i,
                limit: logits.rows(),
            });
        }
        if logits.argmax_row(i) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// Model inputs for `dataset` under `config`.
pub fn build_inputs(config: &TrainConfig, dataset: &Dataset) -> Result<ModelInputs> {
    let features = if config.normalize_features {
        row_normalize_sparse(&dataset.features)
    } else {
        dataset.features.clone()
    };
    ModelInputs::new(dataset.graph.adjacency(), features, &config.model)
}

fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(1);
    (init, dropout)
}

/// Trains for `config.epochs` epochs and keeps the parameters with the highest
/// validation accuracy (ties keep the earlier epoch).
pub fn train(config: &TrainConfig, dataset: &Dataset, split: &Split) -> Result<TrainOutcome> {
    let inputs = build_inputs(config, dataset)?;
    train_on_inputs(config, &inputs, &dataset.labels, dataset.class_count(), split)
}

pub fn train_on_inputs(
    config: &TrainConfig,
    inputs: &ModelInputs,
    labels: &[usize],
    classes: usize,
    split: &Split,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("train, validation and test sets must be nonempty"));
    }
    let start = Instant::now();
    let (mut init_rng, mut rng) = rngs(config.seed);
    let mut model = GrcnModel::new(config.model.clone(), inputs.features.cols(), classes, &mut init_rng)?;
    let mut adam = Adam::new(
        model.params(),
        config.lr_revision,
        config.lr_classification,
        config.weight_decay,
    );

    let mut best: Option<(f64, f64, f64, usize, Checkpoint)> = None;
    let mut consider = |epoch: usize, model: &GrcnModel, logits: &DenseMatrix| -> Result<()> {
        let val = accuracy(logits, labels, &split.val)?;
        if best.as_ref().is_none_or(|b| val > b.0) {
            let train = accuracy(logits, labels, &split.train)?;
            let test = accuracy(logits, labels, &split.test)?;
            let ck = Checkpoint::new(model.params().clone(), model.index_cache().cloned());
            best = Some((val, test, train, epoch, ck));
        }
        Ok(())
    };

    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut epoch_times = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        // The eval logits are those of the parameters left by the previous
        // epoch, so epoch e's selection happens at the start of e + 1.
        let (out, eval) = model.forward_train_eval(inputs, &mut tape, &mut rng)?;
        if epoch > 1 {
            consider(epoch - 1, &model, tape.dense(eval)?)?;
        }
        let loss = tape.softmax_cross_entropy(out.logits, labels, &split.train)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss: value });
        }
        loss_history.push(value);
        let grads = tape.backward(loss)?;
        let grads: Vec<DenseMatrix> = out.params.iter().map(|&p| grads.wrt(p)).collect();
        adam.step(model.params_mut(), &grads)?;
        epoch_times.push(t0.elapsed().as_secs_f64());
        log::trace!("epoch {epoch}: loss {value:.6}");
    }
    let t0 = Instant::now();
    let logits = model.predict(inputs)?;
    consider(config.epochs, &model, &logits)?;
    if let Some(last) = epoch_times.last_mut() {
        *last += t0.elapsed().as_secs_f64();
    }

    let (best_val, test, train, epoch_of_best, checkpoint) = best.expect("at least one epoch evaluated");
    Ok(TrainOutcome {
        result: TrialResult {
            best_val_accuracy: best_val,
            test_accuracy_at_best_val: test,
            train_accuracy_at_best_val: train,
            epoch_of_best,
            epochs: config.epochs,
            loss_history,
            wall_time: start.elapsed().as_secs_f64(),
            epoch_times,
        },
        checkpoint,
    })
}

/// Accuracy of a saved checkpoint on `mask`.
pub fn evaluate_checkpoint(
    config: &TrainConfig,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    mask: &[usize],
) -> Result<f64> {
    let inputs = build_inputs(config, dataset)?;
    let mut model = GrcnModel::from_parts(
        config.model.clone(),
        checkpoint.params.clone(),
        checkpoint.index_cache.clone(),
    );
    accuracy(&model.predict(&inputs)?, &dataset.labels, mask)
}

/// Runs `f` over `items` on a pool of `threads` workers, keeping item order.
pub fn run_parallel<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.into_par_iter().map(f).collect())
}

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for trial `trial` of cell `cell`; independent of scheduling.
pub fn trial_seed(base: u64, cell: usize, trial: usize) -> u64 {
    mix64(mix64(mix64(base) ^ cell as u64) ^ trial as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub weight_decay: f64,
    pub topk: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_of_best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub best_config: TrainConfig,
}

/// Trains every `(weight_decay, K)` cell on the same split and seed and picks
/// the highest validation accuracy; ties prefer smaller K, then smaller decay.
pub fn grid_search(
    base: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    weight_decays: &[f64],
    topks: &[usize],
    threads: usize,
) -> Result<GridReport> {
    if weight_decays.is_empty() || topks.is_empty() {
        return Err(Error::invalid("grid search needs nonempty grids"));
    }
    let cells: Vec<(f64, usize)> = weight_decays
        .iter()
        .flat_map(|&wd| topks.iter().map(move |&k| (wd, k)))
        .collect();
    let configs: Vec<TrainConfig> = cells
        .iter()
        .map(|&(wd, k)| {
            let mut c = base.clone();
            c.weight_decay = wd;
            c.model.topk = k;
            c
        })
        .collect();
    let rows = run_parallel(configs.clone(), threads, |c| {
        let r = train(&c, dataset, split)?.result;
        log::info!("grid wd={} K={}: val {:.4}", c.weight_decay, c.model.topk, r.best_val_accuracy);
        Ok(GridRow {
            weight_decay: c.weight_decay,
            topk: c.model.topk,
            val_accuracy: r.best_val_accuracy,
            test_accuracy: r.test_accuracy_at_best_val,
            epoch_of_best: r.epoch_of_best,
        })
    })?;
    let best = (0..rows.len())
        .min_by(|&a, &b| {
            let (ra, rb) = (&rows[a], &rows[b]);
            rb.val_accuracy
                .total_cmp(&ra.val_accuracy)
                .then(ra.topk.cmp(&rb.topk))
                .then(ra.weight_decay.total_cmp(&rb.weight_decay))
        })
        .expect("grid is nonempty");
    Ok(GridReport {
        best_config: configs[best].clone(),
        rows,
        best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_of_best: usize,
    pub wall_time: f64,
    pub mean_epoch_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub axis_value: f64,
    pub variant: Variant,
    pub mean_acc: f64,
    /// Population standard deviation over trials.
    pub std_acc: f64,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub axis: String,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, axis_value: f64, variant: Variant) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.axis_value == axis_value)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Settings shared by the sweep protocols. Each variant trains on the same
/// sampled graph, split and initial classifier within a trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub trials: usize,
    pub protocol: SplitProtocol,
    pub parallel: usize,
}

struct Cell {
    axis_value: f64,
    retention: f64,
    protocol: SplitProtocol,
}

fn run_cells(cfg: &ExperimentConfig, dataset: &Dataset, axis: &str, cells: Vec<Cell>) -> Result<ExperimentReport> {
    if cfg.variants.is_empty() {
        return Err(Error::invalid("no variants to run"));
    }
    if cfg.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    cfg.base.validate()?;
    for cell in &cells {
        if !(0.0..=1.0).contains(&cell.retention) {
            return Err(Error::invalid(format!("retention ratio {} outside [0, 1]", cell.retention)));
        }
    }
    let jobs: Vec<(usize, usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.trials).flat_map(move |t| (0..cfg.variants.len()).map(move |v| (c, t, v))))
        .collect();
    let records = run_parallel(jobs, cfg.parallel, |(c, t, v)| {
        let cell = &cells[c];
        let seed = trial_seed(cfg.base.seed, c, t);
        let graph = sample_retained_edges(&dataset.graph, cell.retention, mix64(seed ^ 1))?;
        let trial_data = dataset.with_graph(graph)?;
        let split = random_split(&trial_data, cell.protocol, mix64(seed ^ 2))?;
        let mut config = cfg.base.clone();
        config.model.variant = cfg.variants[v];
        config.seed = mix64(seed ^ 3);
        let r = train(&config, &trial_data, &split)?.result;
        log::info!(
            "{axis}={} {} trial {t}: test {:.4} (val {:.4}, epoch {})",
            cell.axis_value,
            cfg.variants[v],
            r.test_accuracy_at_best_val,
            r.best_val_accuracy,
            r.epoch_of_best
        );
        Ok(TrialRecord {
            trial: t,
            seed,
            best_val_accuracy: r.best_val_accuracy,
            test_accuracy: r.test_accuracy_at_best_val,
            epoch_of_best: r.epoch_of_best,
            wall_time: r.wall_time,
            mean_epoch_time: r.mean_epoch_time_after_first(),
        })
    })?;

    let mut out = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        for (v, &variant) in cfg.variants.iter().enumerate() {
            let trials: Vec<TrialRecord> = (0..cfg.trials)
                .map(|t| records[(c * cfg.trials + t) * cfg.variants.len() + v].clone())
                .collect();
            let accs: Vec<f64> = trials.iter().map(|r| r.test_accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            out.push(CellReport {
                axis_value: cell.axis_value,
                variant,
                mean_acc,
                std_acc,
                trials,
            });
        }
    }
    Ok(ExperimentReport {
        axis: axis.to_string(),
        cells: out,
    })
}

/// One cell per retention ratio; every trial samples a fresh graph and split.
pub fn edge_retention_experiment(cfg: &ExperimentConfig, dataset: &Dataset, ratios: &[f64]) -> Result<ExperimentReport> {
    if ratios.is_empty() {
        return Err(Error::invalid("no retention ratios given"));
    }
    let cells = ratios
        .iter()
        .map(|&r| Cell {
            axis_value: r,
            retention: r,
            protocol: cfg.protocol,
        })
        .collect();
    run_cells(cfg, dataset, "retention", cells)
}

/// One cell per labels-per-class value at a fixed retention ratio.
pub fn label_sparsity_experiment(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    labels_per_class: &[usize],
    retention: f64,
) -> Result<ExperimentReport> {
    if labels_per_class.is_empty() {
        return Err(Error::invalid("no labels-per-class values given"));
    }
    if let Some(&t) = labels_per_class.iter().find(|&&t| t == 0) {
        return Err(Error::invalid(format!("labels per class must be at least 1, got {t}")));
    }
    let cells = labels_per_class
        .iter()
        .map(|&t| Cell {
            axis_value: t as f64,
            retention,
            protocol: cfg.protocol.with_train_per_class(t),
        })
        .collect();
    run_cells(cfg, dataset, "labels_per_class", cells)
}

/// The full-graph protocol: a single cell at retention 1.0.
pub fn main_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ExperimentReport> {
    edge_retention_experiment(cfg, dataset, &[1.0])
}
