mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::Common;

/// Dynamic slicing of neural networks, and the applications built on it.
///
/// Every subcommand writes its artifacts and a `<report>.csv` plus a
/// `<report>.json` mirror into --out. Exit status: 0 on success, 2 for
/// invalid input, 1 for runtime failures.
#[derive(Debug, Parser)]
#[command(name = "nnslicer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Train(TrainArgs),
    Profile(ProfileArgs),
    Slice(SliceArgs),
    #[command(subcommand)]
    Detect(DetectCommand),
    Attack(AttackArgs),
    Prune(PruneArgs),
    Protect(ProtectArgs),
    Eval(EvalArgs),
    OracleCheck(OracleArgs),
}

/// Train a model with SGD and write `model.nnsm`.
///
/// Without --model a fresh LeNet is built for [1, 28, 28] inputs.
/// Reports: `train` (metric,value) and `train_loss` (epoch,loss).
#[derive(Debug, Args, Serialize, Deserialize)]
struct TrainArgs {
    /// Training set (NNST)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Starting model (NNSM)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Class count when starting from scratch [default: 10]
    #[arg(long)]
    classes: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 0.05]
    #[arg(long)]
    lr: Option<f32>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Compute the mean activation profile and write `profile.nnsp`.
///
/// Report: `profile` (metric,value).
#[derive(Debug, Args, Serialize, Deserialize)]
struct ProfileArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Profiling set, normally the training data (NNST)
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Slice every sample in --data for the given output classes.
///
/// Writes `slices/sample_NNNNN.nnsl` per sample and `aggregate.nnsl`.
/// Reports: `slice` (metric,value) and `slice_samples`
/// (sample,label,predicted,neurons,synapses).
#[derive(Debug, Args, Serialize, Deserialize)]
struct SliceArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma list of class indices
    #[arg(long)]
    outputs: Option<String>,
    /// [default: 0]
    #[arg(long)]
    theta: Option<f32>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum DetectCommand {
    Train(DetectTrainArgs),
    Eval(DetectEvalArgs),
}

/// Fit a slice-vector detector on normal samples and write `detector.nnsd`.
///
/// Report: `detect_train` (metric,value).
#[derive(Debug, Args, Serialize, Deserialize)]
struct DetectTrainArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Normal samples (NNST)
    #[arg(long)]
    data: Option<PathBuf>,
    /// [default: 0.5]
    #[arg(long)]
    theta: Option<f32>,
    /// [default: 25]
    #[arg(long)]
    max_depth: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    min_leaf: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Score a detector on normal data and adversarial sets.
///
/// Positives are adversarial samples the model misclassifies; negatives
/// are the samples of --data. Reports: `detect_eval`
/// (attack,positives,caught,negatives,false_alarms,precision,recall,f1)
/// and `detect_verdicts` (set,sample,label,predicted,tree_label,verdict).
#[derive(Debug, Args, Serialize, Deserialize)]
struct DetectEvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Normal samples (NNST)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Adversarial set (NNST, original labels); repeatable
    #[arg(long)]
    #[serde(default)]
    adversarial: Vec<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Perturb every sample with FGSM or PGD and write `adversarial.nnst`
/// with the original labels.
///
/// Report: `attack` (metric,value).
#[derive(Debug, Args, Serialize, Deserialize)]
struct AttackArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// fgsm or pgd [default: fgsm]
    #[arg(long)]
    method: Option<String>,
    /// L-infinity budget, a number or a fraction such as 8/256
    #[arg(long)]
    eps: Option<String>,
    /// PGD step size [default: eps/4]
    #[arg(long)]
    alpha: Option<String>,
    /// PGD iterations [default: 10]
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Prune a model for a subset of classes and write `pruned.nnsm`.
///
/// The contribution table is computed over the --data samples of the
/// target classes. Reports: `prune` (metric,value) and, with --sweep,
/// `prune_sweep` (mode,ratio,accuracy).
#[derive(Debug, Args, Serialize, Deserialize)]
struct PruneArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Needed for contrib mode
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Slicing data (NNST), restricted to the target classes
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target classes, comma list
    #[arg(long)]
    outputs: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    /// [default: 0.3]
    #[arg(long)]
    theta: Option<f32>,
    /// contrib, weight or random [default: contrib]
    #[arg(long)]
    mode: Option<String>,
    /// Test set for target-class accuracy (NNST)
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Masked fine-tuning epochs on the target classes of --data [default: 0]
    #[arg(long)]
    epochs: Option<usize>,
    /// Fine-tuning learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f32>,
    /// Also sweep ratios 0.0..=0.9 for every mode (needs --eval)
    #[arg(long)]
    #[serde(default)]
    sweep: bool,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Hide synapses and simulate an attacker who retrains them.
///
/// Writes `recovered.nnsm` and `hidden` (synapse). Report: `protect`
/// (metric,value).
#[derive(Debug, Args, Serialize, Deserialize)]
struct ProtectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Needed for contrib mode
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Slicing data (NNST), restricted to the target classes
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target classes, comma list
    #[arg(long)]
    outputs: Option<String>,
    /// Share of synapses to hide
    #[arg(long)]
    fraction: Option<f64>,
    /// [default: 0.3]
    #[arg(long)]
    theta: Option<f32>,
    /// contrib, weight or random [default: contrib]
    #[arg(long)]
    mode: Option<String>,
    /// Attacker's training data (NNST)
    #[arg(long)]
    attacker_data: Option<PathBuf>,
    /// Test set (NNST)
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Attacker epochs [default: 5]
    #[arg(long)]
    epochs: Option<usize>,
    /// Attacker learning rate [default: 0.05]
    #[arg(long)]
    lr: Option<f32>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Measure accuracy, optionally over a subset of classes.
///
/// Report: `eval` (metric,value).
#[derive(Debug, Args, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Only count samples of these classes
    #[arg(long)]
    outputs: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

/// Compare the slicer with the reference implementation on random graphs.
///
/// Report: `oracle_check` (case,seed,theta,exact).
#[derive(Debug, Args, Serialize, Deserialize)]
struct OracleArgs {
    /// [default: 100]
    #[arg(long)]
    cases: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
