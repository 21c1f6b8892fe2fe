//! `anomgan`: prepare datasets, train, score and evaluate from a TOML config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use anomgan::eval::ThresholdPolicy;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Overrides;

#[derive(Parser)]
#[command(name = "anomgan", version, about = "One-class GAN anomaly detection")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Weight of the contextual term in the anomaly score.
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// `youden` or `fixed(q)`.
    #[arg(long, global = true)]
    threshold_policy: Option<ThresholdPolicy>,
    /// Relative paths resolve under $ANOMGAN_OUTPUT_ROOT when it is set.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Pin an unset seed to 0 so the run is fully reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            eta: self.eta,
            max_epochs: self.max_epochs,
            threshold_policy: self.threshold_policy,
            out_dir: self.out_dir.clone(),
            deterministic: self.deterministic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    OneVsAll,
    NormalOnly,
    RoiMasked,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/validation/test manifests from a directory dataset.
    Prepare {
        /// Directory with `train/<class>/` and `test/<class>/` images.
        #[arg(long)]
        dataset_root: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long)]
        normal_class: String,
        /// Share of each test label held out for model selection; 0 disables.
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
        /// Keep a seeded random subset of this many training records.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Generate the procedural texture dataset, its manifests and a starter config.
    Synth {
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 200)]
        train_normal: usize,
        #[arg(long, default_value_t = 50)]
        test_normal: usize,
        #[arg(long, default_value_t = 50)]
        test_defect: usize,
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
    },
    /// Train and write checkpoints and the metrics log.
    Train {
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the test manifest and write the full report.
    Eval {
        /// Defaults to `best.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// Also write one report per eta in 0.1..=0.9.
        #[arg(long)]
        eta_sweep: bool,
    },
    /// Write per-image anomaly scores only.
    Score {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the configured test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the merged effective configuration.
    PrintConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let overrides = cli.global.overrides();
    let config = cli.global.config.as_deref();
    let result = match cli.command {
        Command::Prepare {
            dataset_root,
            protocol,
            normal_class,
            validation_fraction,
            train_limit,
        } => {
            let protocol = match protocol {
                ProtocolArg::OneVsAll => anomgan::data::Protocol::OneVsAll(normal_class),
                ProtocolArg::NormalOnly => anomgan::data::Protocol::NormalOnly(normal_class),
                ProtocolArg::RoiMasked => anomgan::data::Protocol::RoiMasked(normal_class),
            };
            commands::prepare(&dataset_root, &protocol, validation_fraction, train_limit, &overrides)
        }
        Command::Synth {
            size,
            train_normal,
            test_normal,
            test_defect,
            validation_fraction,
        } => commands::synth(
            anomgan::data::synth::SynthConfig {
                size,
                train_normal,
                test_normal,
                test_defect,
                seed: overrides.seed.unwrap_or(0),
            },
            validation_fraction,
            &overrides,
        ),
        Command::Train { resume } => commands::train(config, &overrides, resume),
        Command::Eval {
            checkpoint,
            test_manifest,
            eta_sweep,
        } => commands::eval(config, &overrides, checkpoint, test_manifest, eta_sweep),
        Command::Score { checkpoint, manifest } => commands::score(config, &overrides, checkpoint, manifest),
        Command::PrintConfig => commands::print_config(config, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
