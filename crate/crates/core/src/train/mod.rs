//! Training and evaluation orchestration.
//!
//! A run is fully described by a [`TrainConfig`]: the manifest is parsed,
//! the model assembled from the task and modality flags, and every source
//! of randomness (initialization, batch order, upsampling, augmentation,
//! dropout) derives from the single configured seed, so a repeated run
//! reproduces its epoch log and checkpoint bytes exactly. Wall-clock
//! timings are reported but are naturally not reproducible.
//!
//! Seeding layout: model initialization uses the seed on stream 0 of the
//! generator; epoch `k` draws batch order, augmentation, and dropout from
//! the seed on stream `k`. Evaluation passes consume no randomness.

mod output;

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    build_sampler, fit_tabular_stats, make_batches, Augmentation, Batch, BatchSettings,
    DataError, Manifest, SamplerMode,
};
use crate::losses::{cox_npll, cross_entropy, regression_loss, total_loss, LossError, RegressionKind};
use crate::metrics::{
    accuracy_and_auc, c_index, kaplan_meier, log_rank, KmCurve, MetricError, SurvivalRecord,
};
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, AssemblySpec, CnnSpec, MlpSpec, Modality,
    ModelAssembly, ModelError,
};
use crate::task::{LabelKind, Split, Task};
use crate::tensor::optim::Optimizer;
use crate::tensor::{backward, Mode, Tape, Tensor, TensorError};

pub use output::{write_km_csv, write_likelihood_csv, write_log_csv, write_metrics_csv};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("weights file not found: {0}")]
    MissingWeights(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("writing output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Mlp,
    Cnn,
    MlpCnn,
}

impl ModelChoice {
    pub fn modality(self) -> Modality {
        match self {
            ModelChoice::Mlp => Modality::Tabular,
            ModelChoice::Cnn => Modality::Image,
            ModelChoice::MlpCnn => Modality::Both,
        }
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MLP" => Ok(ModelChoice::Mlp),
            "CNN" => Ok(ModelChoice::Cnn),
            "MLP+CNN" => Ok(ModelChoice::MlpCnn),
            other => Err(format!("unknown model `{other}` (expected MLP, CNN, or MLP+CNN)")),
        }
    }
}

impl std::fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelChoice::Mlp => "MLP",
            ModelChoice::Cnn => "CNN",
            ModelChoice::MlpCnn => "MLP+CNN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Ce,
    Mse,
    Rmse,
    Mae,
    Npll,
}

impl Criterion {
    fn regression_kind(self) -> Option<RegressionKind> {
        match self {
            Criterion::Mse => Some(RegressionKind::Mse),
            Criterion::Rmse => Some(RegressionKind::Rmse),
            Criterion::Mae => Some(RegressionKind::Mae),
            _ => None,
        }
    }

    pub fn fits_task(self, task: Task) -> bool {
        match self {
            Criterion::Ce => task == Task::Classification,
            Criterion::Mse | Criterion::Rmse | Criterion::Mae => task == Task::Regression,
            Criterion::Npll => task == Task::Deepsurv,
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CE" => Ok(Criterion::Ce),
            "MSE" => Ok(Criterion::Mse),
            "RMSE" => Ok(Criterion::Rmse),
            "MAE" => Ok(Criterion::Mae),
            "NPLL" => Ok(Criterion::Npll),
            other => Err(format!("unknown criterion `{other}` (expected CE, MSE, RMSE, MAE, or NPLL)")),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Ce => "CE",
            Criterion::Mse => "MSE",
            Criterion::Rmse => "RMSE",
            Criterion::Mae => "MAE",
            Criterion::Npll => "NPLL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SGD" => Ok(OptimizerChoice::Sgd),
            "Adam" => Ok(OptimizerChoice::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected SGD or Adam)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    /// One shuffled pass over the training split per epoch.
    Sequential,
    /// Weighted draws with replacement balancing the anchor label's classes.
    Upsample,
}

impl std::str::FromStr for SamplerChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(SamplerChoice::Sequential),
            "upsample" => Ok(SamplerChoice::Upsample),
            other => Err(format!("unknown sampler `{other}` (expected sequential or upsample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SavePolicy {
    /// Keep a checkpoint for every epoch that improves on the running best.
    Improvement,
    /// Keep a single `best.nvs`, overwritten on improvement.
    Best,
}

impl std::str::FromStr for SavePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "improvement" => Ok(SavePolicy::Improvement),
            "best" => Ok(SavePolicy::Best),
            other => Err(format!("unknown save policy `{other}` (expected improvement or best)")),
        }
    }
}

/// Full description of a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    /// Base directory for manifest image paths; the manifest's own
    /// directory when absent.
    pub image_root: Option<PathBuf>,
    pub task: Task,
    pub model: ModelChoice,
    pub criterion: Criterion,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub sampler: SamplerChoice,
    pub anchor_label: Option<String>,
    pub in_channels: usize,
    pub pretrained: Option<PathBuf>,
    pub save_policy: SavePolicy,
    pub device: String,
    pub seed: u64,
    pub out: PathBuf,
}

impl TrainConfig {
    /// A config with the documented defaults: Adam, lr 1e-3, 50 epochs,
    /// batch 32, no augmentation, sequential sampler, 1 input channel,
    /// `best` save policy, cpu, seed 0.
    pub fn new(
        manifest: impl Into<PathBuf>,
        task: Task,
        model: ModelChoice,
        criterion: Criterion,
        out: impl Into<PathBuf>,
    ) -> TrainConfig {
        TrainConfig {
            manifest: manifest.into(),
            image_root: None,
            task,
            model,
            criterion,
            optimizer: OptimizerChoice::Adam,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            augmentation: Augmentation::None,
            sampler: SamplerChoice::Sequential,
            anchor_label: None,
            in_channels: 1,
            pretrained: None,
            save_policy: SavePolicy::Best,
            device: "cpu".into(),
            seed: 0,
            out: out.into(),
        }
    }
}

/// What the `test` subcommand needs: enough flags to rebuild the model
/// spec, plus the weights to load.
#[derive(Debug, Clone)]
pub struct TestConfig {
    pub manifest: PathBuf,
    pub image_root: Option<PathBuf>,
    pub weights: PathBuf,
    pub task: Task,
    pub model: ModelChoice,
    pub in_channels: usize,
    pub batch_size: usize,
    pub out: PathBuf,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation loss per label, in declared label order. Their sum is
    /// the reported `val_loss`.
    pub per_label_val: Vec<f64>,
    pub seconds: f64,
    pub saved: bool,
}

/// Per-sample model outputs for the likelihood file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub split: Split,
    /// Raw outputs per label: all class logits for classification, the
    /// predicted value for regression, the risk score for survival.
    pub outputs: Vec<Vec<f64>>,
    pub truths: Vec<f64>,
    pub period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMetric {
    pub label: String,
    pub metric: String,
    pub value: f64,
}

/// Kaplan-Meier curves of the two median-risk groups.
#[derive(Debug, Clone, PartialEq)]
pub struct KmPair {
    pub low: KmCurve,
    pub high: KmCurve,
}

/// Everything an evaluation pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub per_label_losses: Vec<f64>,
    pub total_loss: f64,
    pub rows: Vec<PredictionRow>,
    pub metrics: Vec<LabelMetric>,
    pub km: Option<KmPair>,
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_val: f64,
    /// Checkpoint files written, in write order.
    pub checkpoints: Vec<PathBuf>,
    /// Final-weights evaluation of the validation split.
    pub report: EvalReport,
}

/// Both save policies write exactly when the validation loss strictly
/// improves on the running best.
pub fn should_save(val_loss: f64, best_so_far: f64) -> bool {
    val_loss < best_so_far
}

/// Splits subjects at the median predicted risk: the lower half (ties at
/// the cut going to the low-risk group, earlier rows first) against the
/// rest. Group sizes differ by at most one.
pub fn median_risk_split(risks: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]).then(a.cmp(&b)));
    let cut = risks.len().div_ceil(2);
    let mut low = order[..cut].to_vec();
    let mut high = order[cut..].to_vec();
    low.sort_unstable();
    high.sort_unstable();
    (low, high)
}

fn validate_common(task: Task, criterion: Criterion, device: &str) -> Result<(), TrainError> {
    if !criterion.fits_task(task) {
        return Err(TrainError::Config(format!(
            "criterion {criterion} is incompatible with task {task} \
             (CE fits classification; MSE/RMSE/MAE fit regression; NPLL fits deepsurv)"
        )));
    }
    if device != "cpu" {
        return Err(TrainError::Config(format!(
            "device `{device}` is not supported; this build runs on cpu only"
        )));
    }
    Ok(())
}

fn check_modalities(model: ModelChoice, manifest: &Manifest) -> Result<(), TrainError> {
    let modality = model.modality();
    if modality.wants_tabular() && manifest.tabular_feature_names.is_empty() {
        return Err(TrainError::Config(format!(
            "model {model} consumes tabular features but the manifest declares no input_ columns"
        )));
    }
    if modality.wants_images() && !manifest.has_images {
        return Err(TrainError::Config(format!(
            "model {model} consumes images but the manifest has no imgpath column"
        )));
    }
    Ok(())
}

fn assembly_spec(
    task: Task,
    model: ModelChoice,
    in_channels: usize,
    manifest: &Manifest,
) -> AssemblySpec {
    let modality = model.modality();
    AssemblySpec {
        task,
        label_specs: manifest.label_specs.clone(),
        modality,
        mlp: modality
            .wants_tabular()
            .then(|| MlpSpec::new(manifest.tabular_feature_names.len())),
        cnn: modality.wants_images().then(|| CnnSpec::new(in_channels)),
    }
}

fn batch_settings(
    manifest: &Manifest,
    model: ModelChoice,
    in_channels: usize,
    augmentation: Augmentation,
    image_root: Option<&Path>,
    manifest_path: &Path,
) -> Result<BatchSettings, TrainError> {
    let modality = model.modality();
    let stats = if modality.wants_tabular() {
        Some(fit_tabular_stats(manifest)?)
    } else {
        None
    };
    let root = image_root
        .map(Path::to_path_buf)
        .or_else(|| manifest_path.parent().map(Path::to_path_buf));
    Ok(BatchSettings {
        image_root: root,
        in_channels,
        augmentation,
        use_images: modality.wants_images(),
        use_tabular: modality.wants_tabular(),
        stats,
    })
}

fn batch_has_event(batch: &Batch) -> bool {
    batch.targets[0].iter().any(|&v| v == 1.0)
}

/// Per-label losses for one batch, in declared label order.
fn batch_losses(
    model: &ModelAssembly,
    batch: &Batch,
    criterion: Criterion,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    tape: Option<&Tape>,
) -> Result<Vec<Tensor>, TrainError> {
    let outputs = model.forward(batch.images.as_ref(), batch.tabular.as_ref(), mode, rng, tape)?;
    let mut losses = Vec::with_capacity(outputs.len());
    for (i, output) in outputs.iter().enumerate() {
        let loss = match criterion {
            Criterion::Ce => {
                let targets: Vec<usize> =
                    batch.targets[i].iter().map(|&v| v as usize).collect();
                cross_entropy(output, &targets, tape)?
            }
            Criterion::Mse | Criterion::Rmse | Criterion::Mae => regression_loss(
                output,
                &batch.targets[i],
                criterion.regression_kind().expect("regression criterion"),
                tape,
            )?,
            Criterion::Npll => {
                let events: Vec<bool> = batch.targets[i].iter().map(|&v| v == 1.0).collect();
                let periods = batch.periods.as_ref().expect("survival batches carry periods");
                cox_npll(output, &events, periods, tape)?
            }
        };
        losses.push(loss);
    }
    Ok(losses)
}

/// Loss-only pass over a split in eval mode: batch-size-weighted mean per
/// label, plus their sum. Survival batches without events are skipped.
fn split_losses(
    model: &ModelAssembly,
    manifest: &Manifest,
    split: Split,
    settings: &BatchSettings,
    criterion: Criterion,
    batch_size: usize,
) -> Result<(Vec<f64>, f64), TrainError> {
    let mut eval_settings = settings.clone();
    eval_settings.augmentation = Augmentation::None;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = make_batches(manifest, split, batch_size, None, &eval_settings, &mut rng)?;
    let labels = manifest.label_specs.len();
    let mut sums = vec![0f64; labels];
    let mut weight = 0f64;
    for batch in &batches {
        if criterion == Criterion::Npll && !batch_has_event(batch) {
            continue;
        }
        let losses = batch_losses(model, batch, criterion, Mode::Eval, &mut rng, None)?;
        for (sum, loss) in sums.iter_mut().zip(&losses) {
            *sum += loss.item() as f64 * batch.len() as f64;
        }
        weight += batch.len() as f64;
    }
    if weight == 0.0 {
        return Err(TrainError::Config(format!(
            "no usable batches in the {split} split (survival batches need at least one event)"
        )));
    }
    let per_label: Vec<f64> = sums.iter().map(|s| s / weight).collect();
    let total = per_label.iter().sum();
    Ok((per_label, total))
}

/// Full evaluation pass: predictions in manifest order, per-label metrics,
/// and the survival report (KM curves of the median-risk groups plus the
/// log-rank test) for deepsurv. Runs in eval mode with augmentation off;
/// parameters are never touched.
pub fn evaluate(
    model: &ModelAssembly,
    manifest: &Manifest,
    split: Split,
    settings: &BatchSettings,
    criterion: Criterion,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let (per_label_losses, total) =
        split_losses(model, manifest, split, settings, criterion, batch_size)?;
    let mut eval_settings = settings.clone();
    eval_settings.augmentation = Augmentation::None;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = make_batches(manifest, split, batch_size, None, &eval_settings, &mut rng)?;

    let labels = &manifest.label_specs;
    let mut rows: Vec<PredictionRow> = Vec::new();
    for batch in &batches {
        let outputs =
            model.forward(batch.images.as_ref(), batch.tabular.as_ref(), Mode::Eval, &mut rng, None)?;
        let per_label: Vec<Vec<f32>> = outputs.iter().map(Tensor::to_vec).collect();
        let widths: Vec<usize> = outputs.iter().map(|o| o.shape()[1]).collect();
        for (s, id) in batch.ids.iter().enumerate() {
            let outputs = labels
                .iter()
                .enumerate()
                .map(|(l, _)| {
                    per_label[l][s * widths[l]..(s + 1) * widths[l]]
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                })
                .collect();
            rows.push(PredictionRow {
                id: id.clone(),
                split,
                outputs,
                truths: labels.iter().enumerate().map(|(l, _)| batch.targets[l][s]).collect(),
                period: batch.periods.as_ref().map(|p| p[s]),
            });
        }
    }

    let mut metrics = Vec::new();
    let mut km = None;
    for (l, label) in labels.iter().enumerate() {
        match label.kind {
            LabelKind::Classification => {
                if label.class_count == 2 {
                    // Positive-class probability via the stable sigmoid of
                    // the logit difference.
                    let scores: Vec<f64> = rows
                        .iter()
                        .map(|r| {
                            let d = r.outputs[l][1] - r.outputs[l][0];
                            1.0 / (1.0 + (-d).exp())
                        })
                        .collect();
                    let truth: Vec<bool> = rows.iter().map(|r| r.truths[l] == 1.0).collect();
                    let (accuracy, auc) = accuracy_and_auc(&scores, &truth)?;
                    metrics.push(LabelMetric {
                        label: label.name.clone(),
                        metric: "accuracy".into(),
                        value: accuracy,
                    });
                    if let Some(auc) = auc {
                        metrics.push(LabelMetric {
                            label: label.name.clone(),
                            metric: "auc".into(),
                            value: auc,
                        });
                    }
                } else {
                    let hits = rows
                        .iter()
                        .filter(|r| {
                            let out = &r.outputs[l];
                            let argmax = out
                                .iter()
                                .enumerate()
                                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                                .map(|(i, _)| i)
                                .expect("non-empty outputs");
                            argmax as f64 == r.truths[l]
                        })
                        .count();
                    metrics.push(LabelMetric {
                        label: label.name.clone(),
                        metric: "accuracy".into(),
                        value: hits as f64 / rows.len() as f64,
                    });
                }
            }
            LabelKind::Regression => {
                let residuals: Vec<f64> =
                    rows.iter().map(|r| r.outputs[l][0] - r.truths[l]).collect();
                let n = residuals.len() as f64;
                let mse = residuals.iter().map(|d| d * d).sum::<f64>() / n;
                let mae = residuals.iter().map(|d| d.abs()).sum::<f64>() / n;
                for (name, value) in
                    [("mse", mse), ("rmse", (mse + 1e-12).sqrt()), ("mae", mae)]
                {
                    metrics.push(LabelMetric {
                        label: label.name.clone(),
                        metric: name.into(),
                        value,
                    });
                }
            }
            LabelKind::Survival => {
                let records: Vec<SurvivalRecord> = rows
                    .iter()
                    .map(|r| {
                        SurvivalRecord::new(
                            r.outputs[l][0],
                            r.truths[l] == 1.0,
                            r.period.expect("survival rows carry periods"),
                        )
                    })
                    .collect();
                let concordance = c_index(&records)?;
                let risks: Vec<f64> = records.iter().map(|r| r.risk).collect();
                let (low_idx, high_idx) = median_risk_split(&risks);
                let low: Vec<SurvivalRecord> = low_idx.iter().map(|&i| records[i]).collect();
                let high: Vec<SurvivalRecord> = high_idx.iter().map(|&i| records[i]).collect();
                let test = log_rank(&low, &high)?;
                for (name, value) in [
                    ("c_index", concordance),
                    ("logrank_chi2", test.statistic),
                    ("logrank_p", test.p_value),
                ] {
                    metrics.push(LabelMetric {
                        label: label.name.clone(),
                        metric: name.into(),
                        value,
                    });
                }
                km = Some(KmPair { low: kaplan_meier(&low)?, high: kaplan_meier(&high)? });
            }
        }
    }

    Ok(EvalReport { split, per_label_losses, total_loss: total, rows, metrics, km })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Trains per the config and writes `log.csv`, `likelihood.csv`,
/// `metrics.csv`, `km.csv` (survival only), and checkpoints into the
/// output directory. The final-weights evaluation and the prediction file
/// cover the validation split; run the `test` command for test-split
/// numbers. `on_epoch` observes each completed epoch.
pub fn run_train(
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    validate_common(config.task, config.criterion, &config.device)?;
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch size must be at least 1".into()));
    }
    if config.epochs == 0 {
        return Err(TrainError::Config("epoch count must be at least 1".into()));
    }
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(TrainError::Config(format!(
            "learning rate must be positive and finite, got {}",
            config.lr
        )));
    }
    if config.in_channels != 1 && config.in_channels != 3 {
        return Err(TrainError::Config(format!(
            "in-channels must be 1 or 3, got {}",
            config.in_channels
        )));
    }

    let manifest = Manifest::from_path(&config.manifest, config.task)?;
    check_modalities(config.model, &manifest)?;
    let spec = assembly_spec(config.task, config.model, config.in_channels, &manifest);
    let settings = batch_settings(
        &manifest,
        config.model,
        config.in_channels,
        config.augmentation,
        config.image_root.as_deref(),
        &config.manifest,
    )?;
    if manifest.split_indices(Split::Val).is_empty() {
        return Err(TrainError::Data(DataError::EmptySplit(Split::Val)));
    }

    let model = match &config.pretrained {
        Some(path) => {
            if !path.exists() {
                return Err(TrainError::MissingWeights(path.clone()));
            }
            load_checkpoint(path, &spec)?.0
        }
        None => build_model(&spec, &mut ChaCha8Rng::seed_from_u64(config.seed))?,
    };
    let mut optimizer = match config.optimizer {
        OptimizerChoice::Sgd => Optimizer::sgd(model.params(), config.lr as f32),
        OptimizerChoice::Adam => Optimizer::adam(model.params(), config.lr as f32),
    };
    let sampler_mode = match config.sampler {
        SamplerChoice::Sequential => SamplerMode::Shuffled,
        SamplerChoice::Upsample => SamplerMode::Upsample,
    };
    let plan = build_sampler(&manifest, sampler_mode, config.anchor_label.as_deref())?;

    std::fs::create_dir_all(&config.out)?;
    let mut best = f64::INFINITY;
    let mut logs: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        let batches =
            make_batches(&manifest, Split::Train, config.batch_size, Some(&plan), &settings, &mut rng)?;
        let mut loss_sum = 0f64;
        let mut weight = 0f64;
        for (index, batch) in batches.iter().enumerate() {
            if config.criterion == Criterion::Npll && !batch_has_event(batch) {
                continue;
            }
            let tape = Tape::new();
            let losses =
                batch_losses(&model, batch, config.criterion, Mode::Train, &mut rng, Some(&tape))?;
            let total = total_loss(&losses, Some(&tape))?;
            let value = total.item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: index + 1 });
            }
            backward(&total, &tape)?;
            optimizer.step()?;
            loss_sum += value as f64 * batch.len() as f64;
            weight += batch.len() as f64;
        }
        if weight == 0.0 {
            return Err(TrainError::Config(
                "every training batch was skipped (survival batches need at least one event)".into(),
            ));
        }
        let train_loss = loss_sum / weight;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }

        let (per_label_val, val_loss) = split_losses(
            &model,
            &manifest,
            Split::Val,
            &settings,
            config.criterion,
            config.batch_size,
        )?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }

        let saved = should_save(val_loss, best);
        if saved {
            best = val_loss;
            let path = match config.save_policy {
                SavePolicy::Improvement => config.out.join(format!("epoch{epoch}.nvs")),
                SavePolicy::Best => config.out.join("best.nvs"),
            };
            save_checkpoint(&model, &path, epoch as u64, val_loss as f32)?;
            if config.save_policy == SavePolicy::Improvement || checkpoints.is_empty() {
                checkpoints.push(path);
            }
        }

        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            per_label_val,
            seconds: started.elapsed().as_secs_f64(),
            saved,
        };
        on_epoch(&log);
        logs.push(log);
    }

    let report = evaluate(
        &model,
        &manifest,
        Split::Val,
        &settings,
        config.criterion,
        config.batch_size,
    )?;
    write_log_csv(&config.out.join("log.csv"), &logs, &manifest)?;
    write_likelihood_csv(&config.out.join("likelihood.csv"), &report, &manifest)?;
    write_metrics_csv(&config.out.join("metrics.csv"), &report.metrics)?;
    if let Some(km) = &report.km {
        write_km_csv(&config.out.join("km.csv"), km)?;
    }

    Ok(TrainOutcome { logs, best_val: best, checkpoints, report })
}

/// Loads a checkpoint and evaluates the test split, writing the prediction
/// and metric files. The weights file is checked before the manifest is
/// touched.
pub fn run_test(config: &TestConfig) -> Result<EvalReport, TrainError> {
    if !config.weights.exists() {
        return Err(TrainError::MissingWeights(config.weights.clone()));
    }
    if config.batch_size == 0 {
        return Err(TrainError::Config("batch size must be at least 1".into()));
    }
    let manifest = Manifest::from_path(&config.manifest, config.task)?;
    check_modalities(config.model, &manifest)?;
    let spec = assembly_spec(config.task, config.model, config.in_channels, &manifest);
    let settings = batch_settings(
        &manifest,
        config.model,
        config.in_channels,
        Augmentation::None,
        config.image_root.as_deref(),
        &config.manifest,
    )?;
    let (model, _) = load_checkpoint(&config.weights, &spec)?;
    let criterion = match config.task {
        Task::Classification => Criterion::Ce,
        Task::Regression => Criterion::Mse,
        Task::Deepsurv => Criterion::Npll,
    };
    let report = evaluate(
        &model,
        &manifest,
        Split::Test,
        &settings,
        criterion,
        config.batch_size,
    )?;
    std::fs::create_dir_all(&config.out)?;
    write_likelihood_csv(&config.out.join("likelihood.csv"), &report, &manifest)?;
    write_metrics_csv(&config.out.join("metrics.csv"), &report.metrics)?;
    if let Some(km) = &report.km {
        write_km_csv(&config.out.join("km.csv"), km)?;
    }
    Ok(report)
}
