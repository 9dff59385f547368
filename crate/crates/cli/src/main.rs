//! Command-line interface: `fuselearn train` fits a model described
//! entirely by flags and a CSV manifest; `fuselearn test` evaluates saved
//! weights on the manifest's test split. Every run writes CSV artifacts
//! (log, per-sample likelihoods, metrics, and survival curves where
//! applicable) into the output directory.

use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use fuselearn::data::Augmentation;
use fuselearn::task::Task;
use fuselearn::train::{
    run_test, run_train, Criterion, EpochLog, ModelChoice, OptimizerChoice, SamplerChoice,
    SavePolicy, TestConfig, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "fuselearn",
    about = "Multimodal trainer: image and tabular inputs, classification, regression, and survival heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a CSV manifest and write checkpoints plus run
    /// artifacts to the output directory.
    Train(TrainArgs),
    /// Evaluate saved weights on the manifest's test split.
    Test(TestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV: id, split, optional imgpath, input_* features,
    /// label_* targets, and period for survival data.
    #[arg(long)]
    manifest: PathBuf,
    /// Base directory for image paths; defaults to the manifest's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// classification, regression, or deepsurv.
    #[arg(long)]
    task: String,
    /// MLP (tabular), CNN (images), or MLP+CNN (both).
    #[arg(long)]
    model: String,
    /// CE, MSE, RMSE, MAE, or NPLL; must fit the task.
    #[arg(long)]
    criterion: String,
    /// SGD or Adam.
    #[arg(long, default_value = "Adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// none, flip, crop, or flip+crop (training split only).
    #[arg(long, default_value = "none")]
    augmentation: String,
    /// sequential (one shuffled pass per epoch) or upsample
    /// (class-balanced draws with replacement).
    #[arg(long, default_value = "sequential")]
    sampler: String,
    /// Classification label whose classes the upsampler balances;
    /// defaults to the first classification label.
    #[arg(long)]
    anchor_label: Option<String>,
    /// 1 (grayscale) or 3 (RGB).
    #[arg(long, default_value_t = 1)]
    in_channels: usize,
    /// Warm-start weights; a 3-channel checkpoint adapts to 1-channel use.
    #[arg(long)]
    pretrained_weights: Option<PathBuf>,
    /// improvement keeps every improving epoch as epoch<k>.nvs; best keeps
    /// a single best.nvs. Both react to the total validation loss (the sum
    /// over labels) strictly improving.
    #[arg(long, default_value = "best")]
    save_policy: String,
    /// Only cpu is supported.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Master seed for initialization, batch order, augmentation, and
    /// dropout; identical runs reproduce identical logs and checkpoints.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints and CSV artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Task the checkpoint was trained for.
    #[arg(long)]
    task: String,
    /// Model shape the checkpoint was trained with.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1)]
    in_channels: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse<T: std::str::FromStr<Err = String>>(value: &str, flag: &str) -> Result<T> {
    value.parse::<T>().map_err(|e| anyhow!("--{flag}: {e}"))
}

impl TrainArgs {
    fn into_config(self) -> Result<TrainConfig> {
        if !self.manifest.exists() {
            return Err(anyhow!("manifest not found: {}", self.manifest.display()));
        }
        Ok(TrainConfig {
            manifest: self.manifest,
            image_root: self.image_root,
            task: parse::<Task>(&self.task, "task")?,
            model: parse::<ModelChoice>(&self.model, "model")?,
            criterion: parse::<Criterion>(&self.criterion, "criterion")?,
            optimizer: parse::<OptimizerChoice>(&self.optimizer, "optimizer")?,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            augmentation: parse::<Augmentation>(&self.augmentation, "augmentation")?,
            sampler: parse::<SamplerChoice>(&self.sampler, "sampler")?,
            anchor_label: self.anchor_label,
            in_channels: self.in_channels,
            pretrained: self.pretrained_weights,
            save_policy: parse::<SavePolicy>(&self.save_policy, "save-policy")?,
            device: self.device,
            seed: self.seed,
            out: self.out,
        })
    }
}

fn print_epoch(log: &EpochLog) {
    let mark = if log.saved { " *" } else { "" };
    println!(
        "epoch {:>4}  train {:.6}  val {:.6}  ({:.2}s){mark}",
        log.epoch, log.train_loss, log.val_loss, log.seconds
    );
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let config = args.into_config()?;
            let out = config.out.clone();
            let outcome = run_train(&config, print_epoch).context("training failed")?;
            println!(
                "done: best validation loss {:.6}, {} checkpoint(s), artifacts in {}",
                outcome.best_val,
                outcome.checkpoints.len(),
                out.display()
            );
            for metric in &outcome.report.metrics {
                println!("val {} {} = {:.6}", metric.label, metric.metric, metric.value);
            }
        }
        Command::Test(args) => {
            let config = TestConfig {
                manifest: args.manifest,
                image_root: args.image_root,
                weights: args.weights,
                task: parse::<Task>(&args.task, "task")?,
                model: parse::<ModelChoice>(&args.model, "model")?,
                in_channels: args.in_channels,
                batch_size: args.batch_size,
                out: args.out.clone(),
            };
            let report = run_test(&config).context("evaluation failed")?;
            println!(
                "evaluated {} test samples, artifacts in {}",
                report.rows.len(),
                args.out.display()
            );
            for metric in &report.metrics {
                println!("test {} {} = {:.6}", metric.label, metric.metric, metric.value);
            }
        }
    }
    Ok(())
}
