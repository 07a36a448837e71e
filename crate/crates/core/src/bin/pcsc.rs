use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcsc::channel::ChannelKind;
use pcsc::config::{Preset, RunConfig, Sampler};
use pcsc::experiment::{self, BaselineArgs, SweepArgs, TransmitArgs};
use pcsc::octree::{Coding, Modulation};

/// Generative semantic point-cloud transmission experiments.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML config; defaults to $PCSC_CONFIG, then the toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use a preset without a config file.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    Pretrain,
    Finetune,
    /// Train, prune and retrain the adaptive codec.
    TrainJscc,
    /// Generate noise/sample pairs and retrain the backbone on them.
    Rectify,
    /// Send one cloud and write its reconstruction.
    Transmit {
        /// Dataset id or PLY path.
        #[arg(long)]
        cloud: String,
        /// Keypoint indices for PLY input.
        #[arg(long, value_delimiter = ',')]
        keypoints: Vec<usize>,
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long)]
        rate: usize,
        #[arg(long)]
        channel: Option<ChannelKind>,
        /// `ddpm` or `ddim:<steps>`.
        #[arg(long)]
        sampler: Option<Sampler>,
        /// Use the rectified backbone.
        #[arg(long)]
        rectified: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SNR x rate grid over the test split.
    Sweep {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr_list: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        rate_list: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        channel: Option<ChannelKind>,
        #[arg(long)]
        sampler: Option<Sampler>,
        #[arg(long)]
        clouds: Option<usize>,
        #[arg(long)]
        rectified: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Octree coding over a digital link.
    Baseline {
        #[arg(long)]
        depth: Option<u8>,
        #[arg(long)]
        modulation: Option<Modulation>,
        #[arg(long)]
        coding: Option<Coding>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr_list: Option<Vec<f64>>,
        #[arg(long)]
        clouds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> pcsc::Result<()> {
    let mut cfg = match cli.preset {
        Some(p) => RunConfig::preset(p),
        None => RunConfig::resolve(cli.config.as_deref())?,
    };
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    match cli.cmd {
        Cmd::GenData => println!("dataset written to {}", experiment::cmd_gen_data(&cfg)?.display()),
        Cmd::Pretrain => report("pretrain", &experiment::cmd_pretrain(&cfg)?),
        Cmd::Finetune => report("finetune", &experiment::cmd_finetune(&cfg)?),
        Cmd::TrainJscc => report("jscc", &experiment::cmd_train_jscc(&cfg)?),
        Cmd::Rectify => report("rd", &experiment::cmd_rectify(&cfg)?),
        Cmd::Transmit { cloud, keypoints, snr, rate, channel, sampler, rectified, out } => {
            let args = TransmitArgs { cloud, keypoints, snr_db: snr, rate, channel, sampler, seed, rectified, out };
            println!("{}", experiment::cmd_transmit(&cfg, &args)?);
        }
        Cmd::Sweep { snr_list, rate_list, repeats, channel, sampler, clouds, rectified, out } => {
            let args = SweepArgs { snr_list, rate_list, repeats, channel, sampler, clouds, rectified, out };
            let (path, rows) = experiment::cmd_sweep(&cfg, &args)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Cmd::Baseline { depth, modulation, coding, snr_list, clouds, out } => {
            let args = BaselineArgs { depth, modulation, coding, snr_list, clouds, out };
            let (path, rows) = experiment::cmd_baseline(&cfg, &args)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

fn report(phase: &str, log: &pcsc::training::TrainLog) {
    let losses: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("{phase}: {} steps, loss {first:.4} -> {last:.4}", losses.len());
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
