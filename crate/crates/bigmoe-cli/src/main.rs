//! Command-line harness: dataset generation, training, evaluation, ablation
//! sweeps, and the verification suites, all driven by one TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bigmoe::ablation::{ablation_csv, ablation_table, run_ablation, AblationAxis};
use bigmoe::check::{all_passed, gradcheck_model_suite, gradcheck_ops_suite, metrics_oracle_suite,
    pkr_exactness_suite, render_outcomes};
use bigmoe::checkpoint::load_checkpoint;
use bigmoe::config::RunConfig;
use bigmoe::data::{leave_one_out_split, read_dataset, write_dataset};
use bigmoe::train::{evaluate, synthesize_data, train, train_with_samples, MetricsReport, SplitChoice};
use bigmoe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bigmoe",
    about = "Fine-grained MoE with product-key retrieval, isolated gating, and a convolutional prompt bypass on a synthetic multimodal anti-spoofing benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Complete TOML config file (start from `--print-config`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print the resolved config (with all defaults) and exit
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
            None => match self.preset.as_str() {
                "paper" => RunConfig::paper(),
                _ => RunConfig::desk(),
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Returns true when `--print-config` consumed the invocation.
    fn maybe_print(&self) -> Result<bool> {
        if self.print_config {
            print!("{}", self.resolve()?.to_toml());
            return Ok(true);
        }
        Ok(false)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset and write train/test record files
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes checkpoint and reports into --out
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Load samples from a dataset record file instead of synthesizing
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its config's train or held-out split
    Eval {
        /// Checkpoint produced by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Output directory for the regenerated report
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train one run per setting along an axis and print a comparison table
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = ["prompts", "n_experts", "top_k"])]
        axis: String,
        /// Worker threads (each run is an independent model)
        #[arg(long, default_value_t = 2)]
        threads: usize,
    },
    /// Finite-difference gradient suites (elementary ops + a small full model)
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Retrieval and metric oracle suites (PKR vs brute force, AUC/EER vs
    /// exhaustive enumeration)
    Oracle {
        /// Random (query, index) pairs per expert-pool size
        #[arg(long, default_value_t = 200)]
        trials: u64,
        /// Random score sets for the metric oracles
        #[arg(long, default_value_t = 100)]
        sets: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn write_report(out: &PathBuf, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.txt"), report.text_table())?;
    std::fs::write(
        out.join("report.csv"),
        format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { cfg } => {
            if cfg.maybe_print()? {
                return Ok(());
            }
            let rc = cfg.resolve()?;
            let samples = synthesize_data(&rc)?;
            let (train_set, test_set) = leave_one_out_split(&samples, &rc.data.held_out)?;
            std::fs::create_dir_all(&cfg.out)?;
            let train_path = cfg.out.join("train.bmds");
            let test_path = cfg.out.join("test.bmds");
            write_dataset(&train_path, &train_set)?;
            write_dataset(&test_path, &test_set)?;
            println!(
                "wrote {} train samples to {} and {} test samples to {}",
                train_set.len(),
                train_path.display(),
                test_set.len(),
                test_path.display()
            );
        }
        Command::Train { cfg, data } => {
            if cfg.maybe_print()? {
                return Ok(());
            }
            let rc = cfg.resolve()?;
            let outcome = match data {
                Some(path) => {
                    let samples = read_dataset(&path)?;
                    train_with_samples(&rc, &samples, Some(&cfg.out))?
                }
                None => train(&rc, Some(&cfg.out))?,
            };
            print!("{}", outcome.report.text_table());
            if let Some(path) = outcome.checkpoint_path {
                println!("checkpoint: {}", path.display());
            }
        }
        Command::Eval { checkpoint, split, out } => {
            let bundle = load_checkpoint(&checkpoint)?;
            let choice = if split == "train" {
                SplitChoice::Train
            } else {
                SplitChoice::Test
            };
            let report = evaluate(&bundle.model, choice)?;
            write_report(&out, &report)?;
            print!("{}", report.text_table());
        }
        Command::Ablate { cfg, axis, threads } => {
            if cfg.maybe_print()? {
                return Ok(());
            }
            let rc = cfg.resolve()?;
            let axis = AblationAxis::parse(&axis)?;
            let rows = run_ablation(&rc, axis, threads)?;
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("ablation.csv"), ablation_csv(&rows))?;
            print!("{}", ablation_table(&rows));
        }
        Command::Gradcheck { seed } => {
            let mut outcomes = gradcheck_ops_suite(seed);
            outcomes.extend(gradcheck_model_suite(seed));
            print!("{}", render_outcomes(&outcomes));
            all_passed(&outcomes)?;
        }
        Command::Oracle { trials, sets, seed } => {
            let mut outcomes = pkr_exactness_suite(trials as usize, seed);
            outcomes.extend(metrics_oracle_suite(sets as usize, seed));
            print!("{}", render_outcomes(&outcomes));
            all_passed(&outcomes)?;
        }
    }
    Ok(())
}

/// Category exit codes: 2 config/dimension, 3 input data, 4 numeric,
/// 5 usage, 6 format, 7 io.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Dim(_) => 2,
        Error::Input(_) => 3,
        Error::Numeric(_) => 4,
        Error::Usage(_) => 5,
        Error::Format(_) => 6,
        Error::Io(_) => 7,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
