use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use satcn::audio::{self, ManifestEntry, ToyConfig};
use satcn::blocks::receptive_field;
use satcn::dsp::{self, Waveform};
use satcn::metrics::evaluate_set;
use satcn::model::{enhance, MultiStageModel};
use satcn::train::{fit, load_checkpoint, save_checkpoint};

use crate::config::{self, RunConfig};

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input files: exit 2.
    Usage(String),
    /// Failure while doing the work: exit 3.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{context}: {e}"))
}

fn runtime(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{context}: {e}"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => config::load(p).map_err(|e| usage(p.display(), e)),
        None => Ok(RunConfig::default()),
    }
}

fn read_input(path: &Path) -> Result<Waveform, Failure> {
    audio::read_wav(path).map_err(|e| usage(path.display(), e))
}

fn write_output(path: &Path, w: &Waveform) -> Outcome {
    let clipped = audio::write_wav(path, w).map_err(|e| runtime(path.display(), e))?;
    if clipped > 0 {
        eprintln!("warning: {clipped} samples clamped to [-1, 1] in {}", path.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<MultiStageModel, Failure> {
    load_checkpoint(path)
        .map(|(m, _)| m)
        .map_err(|e| usage(path.display(), e))
}

/// `(noisy, clean)` pairs listed in a manifest.
fn load_pairs(manifest: &Path) -> Result<Vec<(Waveform, Waveform)>, Failure> {
    let entries = audio::read_manifest(manifest).map_err(|e| usage(manifest.display(), e))?;
    if entries.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: manifest lists no items",
            manifest.display()
        )));
    }
    entries
        .iter()
        .map(|e| {
            let noisy = read_input(&e.noisy)?;
            let clean = read_input(&e.clean)?;
            if noisy.len() != clean.len() || noisy.sample_rate != clean.sample_rate {
                return Err(Failure::Usage(format!(
                    "{} and {} differ in length or sample rate",
                    e.noisy.display(),
                    e.clean.display()
                )));
            }
            Ok((noisy, clean))
        })
        .collect()
}

pub fn info(config: Option<&Path>) -> Result<String, Failure> {
    let cfg = load_config(config)?.model;
    let model = MultiStageModel::build(cfg).map_err(|e| usage("config", e))?;
    let b = model.count_parameters();
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "frequency bins F: {}", cfg.features());
    let _ = writeln!(w, "frame length: {} samples, hop {} samples", cfg.fft_size, cfg.hop);
    let _ = writeln!(
        w,
        "stages: {} (stacks {}, blocks per stack {}, hidden {}, bottleneck {}, kernel {})",
        cfg.stages, cfg.stacks, cfg.blocks, cfg.hidden, cfg.bottleneck, cfg.kernel
    );
    let _ = writeln!(w, "fusion blocks: {}", b.fusions);
    let _ = writeln!(
        w,
        "receptive field per stack: {} frames",
        receptive_field(cfg.kernel, cfg.blocks)
    );
    let _ = writeln!(w, "parameters per stage:");
    let _ = writeln!(w, "  self-attention block: {}", b.per_sa);
    let _ = writeln!(
        w,
        "  TCN blocks: {} ({} blocks x {})",
        b.tcn_per_stage,
        cfg.stacks * cfg.blocks,
        b.per_tcn_block
    );
    let _ = writeln!(w, "  bottleneck and output projection: {}", b.glue_per_stage);
    let _ = writeln!(w, "  stage total: {}", b.per_stage);
    let _ = writeln!(w, "parameters per fusion block: {}", b.per_fusion);
    let _ = writeln!(w, "total parameters: {}", b.total);
    Ok(out)
}

pub fn mix(clean: &Path, noise: &Path, snr_db: f64, out: &Path) -> Outcome {
    let c = read_input(clean)?;
    let n = read_input(noise)?;
    if c.sample_rate != n.sample_rate {
        return Err(Failure::Usage(format!(
            "sample rates differ: {} Hz vs {} Hz",
            c.sample_rate, n.sample_rate
        )));
    }
    let noisy = audio::mix_at_snr(&c, &n, snr_db).map_err(|e| usage("mix", e))?;
    write_output(out, &noisy)
}

pub struct SynthArgs<'a> {
    pub count: usize,
    pub seed: u64,
    pub outdir: &'a Path,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub snrs_db: Vec<f64>,
}

/// Writes `clean_NNN.wav`, `noisy_NNN.wav` and `manifest.tsv`.
///
/// A pair whose noisy peak would clip is scaled down as a whole, which
/// leaves its SNR unchanged.
pub fn synth(args: SynthArgs<'_>) -> Outcome {
    let cfg = ToyConfig {
        sample_rate: args.sample_rate,
        duration_s: args.duration_s,
        snrs_db: args.snrs_db,
    };
    let items = audio::synth_toy_dataset(args.count, &cfg, args.seed).map_err(|e| usage("synth", e))?;
    fs::create_dir_all(args.outdir).map_err(|e| runtime(args.outdir.display(), e))?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let peak = item
            .noisy
            .samples
            .iter()
            .chain(&item.clean.samples)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > 0.99 { 0.99 / peak } else { 1.0 };
        let scaled = |w: &Waveform| Waveform {
            samples: w.samples.iter().map(|v| v * gain).collect(),
            sample_rate: w.sample_rate,
        };
        let clean = PathBuf::from(format!("clean_{i:03}.wav"));
        let noisy = PathBuf::from(format!("noisy_{i:03}.wav"));
        write_output(&args.outdir.join(&clean), &scaled(&item.clean))?;
        write_output(&args.outdir.join(&noisy), &scaled(&item.noisy))?;
        entries.push(ManifestEntry {
            clean,
            noisy,
            snr_db: item.snr_db,
        });
    }
    let manifest = args.outdir.join("manifest.tsv");
    fs::write(&manifest, audio::format_manifest(&entries)).map_err(|e| runtime(manifest.display(), e))
}

pub fn train(config: &Path, data: Option<&Path>, out: &Path, log: Option<&Path>) -> Outcome {
    let cfg = load_config(Some(config))?;
    let manifest = data
        .map(Path::to_path_buf)
        .or(cfg.train_manifest.clone())
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set train_manifest".into()))?;
    let pairs = load_pairs(&manifest)?;
    let mut model = MultiStageModel::build(cfg.model).map_err(|e| usage("config", e))?;
    let report = fit(&mut model, &pairs, &cfg.train).map_err(|e| runtime("training", e))?;
    for e in &report.log.epochs {
        let stages: Vec<String> = e.losses.per_stage.iter().map(|l| format!("{l:.6}")).collect();
        println!(
            "epoch {}: stage losses [{}] total {:.6}",
            e.epoch,
            stages.join(", "),
            e.losses.total
        );
    }
    save_checkpoint(&model, Some(&report.optimizer), out).map_err(|e| runtime(out.display(), e))?;
    if let Some(path) = log {
        fs::write(path, report.log.to_tsv()).map_err(|e| runtime(path.display(), e))?;
    }
    Ok(())
}

pub fn enhance_file(ckpt: &Path, input: &Path, out: &Path) -> Outcome {
    let model = load_model(ckpt)?;
    let x = read_input(input)?;
    let y = enhance(&model, &x).map_err(|e| runtime("enhance", e))?;
    write_output(out, &y)
}

pub fn eval(ckpt: &Path, manifest: &Path, out: Option<&Path>) -> Result<String, Failure> {
    let model = load_model(ckpt)?;
    let pairs = load_pairs(manifest)?;
    let report = evaluate_set(&model, &pairs).map_err(|e| runtime("evaluation", e))?;
    if let Some(path) = out {
        fs::write(path, report.to_tsv()).map_err(|e| runtime(path.display(), e))?;
    }
    Ok(report.to_text())
}

/// Magnitude spectrogram as CSV, one row per frequency bin.
pub fn spec_dump(input: &Path, out: &Path, config: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?.model;
    let x = read_input(input)?;
    let win = cfg.window().map_err(|e| usage("config", e))?;
    let (mag, _) = dsp::stft(&x, &win).map_err(|e| usage(input.display(), e))?;
    let mut text = String::new();
    for k in 0..mag.bins() {
        let row: Vec<String> = mag.values.row(k).iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| runtime(out.display(), e))
}
