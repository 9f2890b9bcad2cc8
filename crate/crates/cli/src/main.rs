//! `satcn`: train, run and inspect cascaded masking speech enhancers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Failure, SynthArgs};

#[derive(Parser)]
#[command(name = "satcn", version, about = "Speech enhancement by cascaded spectral masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print model geometry, receptive field and parameter counts.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mix a clean and a noise WAV at a target SNR.
    Mix {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        snr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic harmonic-tones-in-noise corpus and its manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        duration: f64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0,5")]
        snrs: Vec<f64>,
    },
    /// Train a model on a manifest of noisy/clean pairs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Manifest; overrides `train_manifest` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (TSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Enhance one WAV file.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report SI-SDR, SNR and per-stage spectral error over a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-item report (TSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the magnitude spectrogram of a WAV as CSV (rows are bins).
    SpecDump {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Info { config } => {
            print!("{}", commands::info(config.as_deref())?);
            Ok(())
        }
        Command::Mix { clean, noise, snr, out } => commands::mix(&clean, &noise, snr, &out),
        Command::Synth {
            n,
            seed,
            outdir,
            duration,
            sample_rate,
            snrs,
        } => commands::synth(SynthArgs {
            count: n,
            seed,
            outdir: &outdir,
            duration_s: duration,
            sample_rate,
            snrs_db: snrs,
        }),
        Command::Train { config, data, out, log } => commands::train(&config, data.as_deref(), &out, log.as_deref()),
        Command::Enhance { ckpt, input, out } => commands::enhance_file(&ckpt, &input, &out),
        Command::Eval { ckpt, manifest, out } => {
            print!("{}", commands::eval(&ckpt, &manifest, out.as_deref())?);
            Ok(())
        }
        Command::SpecDump { input, out, config } => commands::spec_dump(&input, &out, config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
