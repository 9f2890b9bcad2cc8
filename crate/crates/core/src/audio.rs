//! PCM16 mono WAV files, noise mixing at a target SNR, and a seeded
//! synthetic corpus of harmonic tones in coloured noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

/// Decodes a RIFF/WAVE byte buffer holding 16-bit mono PCM.
pub fn decode_wav(buf: &[u8]) -> Result<Waveform> {
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if buf.len() < pos + n {
            Err(Error::format(pos as u64, format!("truncated {what}")))
        } else {
            Ok(())
        }
    };
    let u16_at = |p: usize| u16::from_le_bytes([buf[p], buf[p + 1]]);
    let u32_at = |p: usize| u32::from_le_bytes([buf[p], buf[p + 1], buf[p + 2], buf[p + 3]]);

    need(0, 12, "RIFF header")?;
    if &buf[0..4] != b"RIFF" {
        return Err(Error::format(0, "missing RIFF chunk id"));
    }
    if &buf[8..12] != b"WAVE" {
        return Err(Error::format(8, "RIFF form type is not WAVE"));
    }
    let mut pos = 12;
    let mut sample_rate = None;
    loop {
        need(pos, 8, "chunk header")?;
        let id = &buf[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format(pos as u64, "`fmt ` chunk shorter than 16 bytes"));
                }
                need(body, 16, "`fmt ` chunk")?;
                let tag = u16_at(body);
                let channels = u16_at(body + 2);
                let rate = u32_at(body + 4);
                let bits = u16_at(body + 14);
                if tag != 1 {
                    return Err(Error::format(
                        body as u64,
                        format!("`fmt ` chunk: format tag {tag} is not PCM"),
                    ));
                }
                if channels != 1 {
                    return Err(Error::format(
                        (body + 2) as u64,
                        format!("`fmt ` chunk: {channels} channels, only mono is supported"),
                    ));
                }
                if bits != 16 {
                    return Err(Error::format(
                        (body + 14) as u64,
                        format!("`fmt ` chunk: {bits} bits per sample, only 16 is supported"),
                    ));
                }
                sample_rate = Some(rate);
            }
            b"data" => {
                let rate = sample_rate.ok_or_else(|| Error::format(pos as u64, "`data` chunk before `fmt ` chunk"))?;
                need(body, size, "`data` chunk")?;
                if size % 2 != 0 {
                    return Err(Error::format(
                        pos as u64,
                        "`data` chunk size is not a whole number of samples",
                    ));
                }
                let samples = buf[body..body + size]
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
        if pos >= buf.len() {
            return Err(Error::format(buf.len() as u64, "no `data` chunk"));
        }
    }
}

/// Encodes as 16-bit mono PCM. Samples outside [-1, 1] are clamped; the
/// number of clamped samples is returned alongside the bytes.
pub fn encode_wav(w: &Waveform) -> (Vec<u8>, usize) {
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + w.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    let mut clipped = 0;
    for &s in &w.samples {
        if !(-1.0..=1.0).contains(&s) {
            clipped += 1;
        }
        let q = (s.clamp(-1.0, 1.0) * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    (out, clipped)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

/// Writes a PCM16 mono file and returns the number of clamped samples.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<usize> {
    let (bytes, clipped) = encode_wav(w);
    fs::write(path, bytes)?;
    Ok(clipped)
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// `clean + g·noise` with `g` chosen so the clean-to-noise power ratio over
/// the clean span equals `snr_db`. Noise is read from its start and tiled
/// if shorter than the clean signal.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_at_snr_with_offset(clean, noise, snr_db, 0)
}

/// Like [`mix_at_snr`], reading noise cyclically from `offset`.
pub fn mix_at_snr_with_offset(clean: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite"));
    }
    if clean.is_empty() || noise.is_empty() {
        return Err(Error::invalid("cannot mix empty signals"));
    }
    let segment: Vec<f64> = (0..clean.len())
        .map(|t| noise.samples[(offset + t) % noise.len()])
        .collect();
    let p_clean = mean_square(&clean.samples);
    let p_noise = mean_square(&segment);
    if p_clean == 0.0 {
        return Err(Error::invalid("clean signal is silent, SNR undefined"));
    }
    if p_noise == 0.0 {
        return Err(Error::invalid("noise signal is silent, SNR undefined"));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean.samples.iter().zip(&segment).map(|(c, n)| c + gain * n).collect();
    Waveform::new(samples, clean.sample_rate)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub snrs_db: Vec<f64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            sample_rate: 8000,
            duration_s: 0.5,
            snrs_db: vec![0.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyItem {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

/// Harmonic complex (2–4 partials of a random fundamental) with slow
/// amplitude envelopes.
fn harmonic_tone(rng: &mut Xoshiro256PlusPlus, len: usize, fs: f64) -> Vec<f64> {
    let partials = rng.random_range(2..=4);
    let f0 = rng.random_range(150.0..400.0);
    let mut out = vec![0.0; len];
    for h in 1..=partials {
        let freq = f0 * h as f64;
        if freq >= 0.45 * fs {
            break;
        }
        let amp = rng.random_range(0.3..1.0) / partials as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let env_rate = rng.random_range(0.5..2.0);
        let env_phase = rng.random_range(0.0..2.0 * PI);
        for (t, o) in out.iter_mut().enumerate() {
            let time = t as f64 / fs;
            let env = 0.6 + 0.4 * (2.0 * PI * env_rate * time + env_phase).sin();
            *o += amp * env * (2.0 * PI * freq * time + phase).sin();
        }
    }
    out
}

/// White Gaussian noise through a random one-pole low-pass filter.
fn coloured_noise(rng: &mut Xoshiro256PlusPlus, len: usize) -> Vec<f64> {
    let pole = rng.random_range(0.0..0.8);
    let mut y = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            y = pole * y + w;
            0.1 * y
        })
        .collect()
}

/// `n` deterministic (clean, noisy, SNR) triples.
pub fn synth_toy_dataset(n: usize, cfg: &ToyConfig, seed: u64) -> Result<Vec<ToyItem>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if cfg.snrs_db.is_empty() || cfg.snrs_db.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("SNR set must be non-empty and finite"));
    }
    let len = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::invalid("duration too short"));
    }
    let fs = cfg.sample_rate as f64;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean = Waveform::new(harmonic_tone(&mut rng, len, fs), cfg.sample_rate)?;
            let noise = Waveform::new(coloured_noise(&mut rng, len), cfg.sample_rate)?;
            let snr_db = cfg.snrs_db[rng.random_range(0..cfg.snrs_db.len())];
            let offset = rng.random_range(0..len);
            let noisy = mix_at_snr_with_offset(&clean, &noise, snr_db, offset)?;
            Ok(ToyItem { clean, noisy, snr_db })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub snr_db: f64,
}

/// `clean_path<TAB>noisy_path<TAB>snr_db`, one entry per line.
pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.clean.display(), e.noisy.display(), e.snr_db))
        .collect()
}

/// Parses a manifest. Relative paths are resolved against `base`. Blank
/// lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::invalid(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let snr_db = fields[2]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("manifest line {}: bad SNR `{}`", i + 1, fields[2])))?;
        out.push(ManifestEntry {
            clean: base.join(fields[0]),
            noisy: base.join(fields[1]),
            snr_db,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}
