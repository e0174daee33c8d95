use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "somnadhere",
    version,
    about = "Detects antidepressant use from nocturnal breathing signals"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: manifest plus raw signal files.
    Synth(StageArgs),
    /// Quality-control the cohort and extract per-night features.
    Preprocess(StageArgs),
    /// Pretrain one encoder-decoder per fold by spectrogram reconstruction.
    Pretrain(StageArgs),
    /// Train the frozen-encoder classifier for every fold.
    Train(StageArgs),
    /// Score every night with the fold model that never trained on it.
    Predict(StageArgs),
    /// Compute detection metrics from predictions.
    Eval(StageArgs),
    /// Reconstructed-spectra, correlation, projection, and trajectory analyses.
    Interpret(StageArgs),
    /// Emit the evaluation report: JSON metrics, subgroup tables, SVG figures.
    Report(StageArgs),
    /// Run built-in oracle checks of the metric and gradient code.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,

    /// Output directory shared by every stage of a run.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Derive every stage seed from this one value, overriding the config.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// Worker threads; defaults to the logical core count.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,

    /// Model and training scale for stages the config leaves unset.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    /// Seed for the randomized oracle instances.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// Worker threads; defaults to the logical core count.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}
