//! Adam, zero-padded batching, the training loop and checkpoints.

mod adam;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub use adam::{adam_step, adam_step_with_lr, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::dsp::{self, AnalysisWindow, Waveform};
use crate::error::{Error, Result};
use crate::model::{MultiStageModel, StageLosses};
use crate::nn::{Mode, ParamStore, Segments, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    StepDecay {
        every: usize,
        factor: f64,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { every, factor } => base * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Global gradient-norm clipping threshold; off when `None`.
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 1,
            seed: 0,
            clip_norm: None,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Noisy/clean pairs zero-padded to a common length.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub noisy: Vec<Waveform>,
    pub clean: Vec<Waveform>,
    /// Original (unpadded) length of every item, in samples.
    pub lengths: Vec<usize>,
    pub padded_len: usize,
}

impl PaddedBatch {
    /// Frames of item `i` that are computed from its own samples; the rest
    /// come from padding and are excluded from losses.
    pub fn valid_frames(&self, fft_size: usize, hop: usize) -> Vec<usize> {
        self.lengths
            .iter()
            .map(|&l| dsp::num_frames(l, fft_size, hop))
            .collect()
    }

    /// Per-item frame validity over the padded frame count.
    pub fn frame_mask(&self, fft_size: usize, hop: usize) -> Vec<Vec<bool>> {
        let total = dsp::num_frames(self.padded_len, fft_size, hop);
        self.valid_frames(fft_size, hop)
            .into_iter()
            .map(|v| (0..total).map(|t| t < v).collect())
            .collect()
    }
}

/// Pads every pair to the longest item in the list.
pub fn pad_batch(utterances: &[(Waveform, Waveform)]) -> Result<PaddedBatch> {
    let longest = utterances.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    pad_batch_to(utterances, longest)
}

/// Pads every pair with trailing zeros to `target_len` samples.
pub fn pad_batch_to(utterances: &[(Waveform, Waveform)], target_len: usize) -> Result<PaddedBatch> {
    if utterances.is_empty() {
        return Err(Error::invalid("cannot pad an empty batch"));
    }
    let mut noisy = Vec::with_capacity(utterances.len());
    let mut clean = Vec::with_capacity(utterances.len());
    let mut lengths = Vec::with_capacity(utterances.len());
    for (i, (n, c)) in utterances.iter().enumerate() {
        if n.len() != c.len() {
            return Err(Error::invalid(format!(
                "item {i}: noisy has {} samples, clean has {}",
                n.len(),
                c.len()
            )));
        }
        if n.len() > target_len {
            return Err(Error::invalid(format!("item {i} is longer than the padding target")));
        }
        let pad = |w: &Waveform| {
            let mut s = w.samples.clone();
            s.resize(target_len, 0.0);
            Waveform {
                samples: s,
                sample_rate: w.sample_rate,
            }
        };
        noisy.push(pad(n));
        clean.push(pad(c));
        lengths.push(n.len());
    }
    Ok(PaddedBatch {
        noisy,
        clean,
        lengths,
        padded_len: target_len,
    })
}

/// Noisy and clean magnitudes of a batch, each item cut to its valid frames
/// and packed side by side.
#[derive(Clone, Debug)]
pub struct BatchSpectra {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub segments: Segments,
}

pub fn batch_spectra(batch: &PaddedBatch, win: &AnalysisWindow) -> Result<BatchSpectra> {
    let valid = batch.valid_frames(win.len(), win.hop());
    let mut noisy = Vec::with_capacity(valid.len());
    let mut clean = Vec::with_capacity(valid.len());
    for ((n, c), &v) in batch.noisy.iter().zip(&batch.clean).zip(&valid) {
        noisy.push(dsp::stft(n, win)?.0.values.slice_cols(0, v));
        clean.push(dsp::stft(c, win)?.0.values.slice_cols(0, v));
    }
    Ok(BatchSpectra {
        noisy: Tensor::concat_cols(&noisy)?,
        clean: Tensor::concat_cols(&clean)?,
        segments: Segments::new(valid)?,
    })
}

/// One optimization step on one batch. Returns the losses measured before
/// the update.
pub fn train_step(
    model: &mut MultiStageModel,
    state: &mut AdamState,
    batch: &BatchSpectra,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StageLosses> {
    model.store.zero_grads();
    let trace = model.forward(&batch.noisy, &batch.segments, Mode::Train)?;
    let losses = model.total_loss(&trace, &batch.clean)?;
    if !losses.total.is_finite() {
        return Err(Error::Diverged { epoch: 0, step: 0 });
    }
    model.backward(&trace, &batch.clean)?;
    adam_step_with_lr(&mut model.store, state, cfg, lr)?;
    model.commit_running_stats(trace);
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step index, starting at 1.
    pub step: usize,
    pub losses: StageLosses,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub losses: StageLosses,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// `epoch  step  L1 … LK  total`, tab separated, one line per step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.steps.first() {
            out.push_str("epoch\tstep");
            for k in 1..=first.losses.per_stage.len() {
                out.push_str(&format!("\tL{k}"));
            }
            out.push_str("\ttotal\n");
        }
        for r in &self.steps {
            out.push_str(&format!("{}\t{}", r.epoch, r.step));
            for l in &r.losses.per_stage {
                out.push_str(&format!("\t{l}"));
            }
            out.push_str(&format!("\t{}\n", r.losses.total));
        }
        out
    }
}

/// Outcome of [`fit`]: the log, the optimizer state after the last step and
/// the parameters of the epoch with the lowest mean total loss.
pub struct FitReport {
    pub log: TrainLog,
    pub optimizer: AdamState,
    pub best: ParamStore,
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Trains `model` on `(noisy, clean)` pairs.
///
/// On a non-finite loss the model is reset to the best parameters seen so
/// far (or its initial parameters) and [`Error::Diverged`] is returned.
pub fn fit(model: &mut MultiStageModel, dataset: &[(Waveform, Waveform)], cfg: &TrainConfig) -> Result<FitReport> {
    let mut state = AdamState::new(&model.store);
    fit_with_state(model, &mut state, dataset, cfg).map(|(log, best)| FitReport {
        log,
        optimizer: state,
        best,
    })
}

fn fit_with_state(
    model: &mut MultiStageModel,
    state: &mut AdamState,
    dataset: &[(Waveform, Waveform)],
    cfg: &TrainConfig,
) -> Result<(TrainLog, ParamStore)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let win = model.config.window()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut best = model.store.clone();
    let mut best_total = f64::INFINITY;
    let mut log = TrainLog {
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.rate(cfg.lr, epoch - 1);
        let order = shuffled_indices(dataset.len(), &mut rng);
        let mut sums = vec![0.0; model.stages.len()];
        let mut total_sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let items: Vec<_> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let spectra = batch_spectra(&pad_batch(&items)?, &win)?;
            let losses = match train_step(model, state, &spectra, cfg, lr) {
                Ok(l) => l,
                Err(Error::Diverged { .. }) => {
                    model.store.copy_values_from(&best)?;
                    return Err(Error::Diverged { epoch, step });
                }
                Err(e @ Error::NonFiniteGradient { .. }) => {
                    model.store.copy_values_from(&best)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            for (s, l) in sums.iter_mut().zip(&losses.per_stage) {
                *s += l;
            }
            total_sum += losses.total;
            count += 1;
            log.steps.push(StepRecord { epoch, step, losses });
        }
        let mean = StageLosses {
            per_stage: sums.iter().map(|s| s / count as f64).collect(),
            total: total_sum / count as f64,
        };
        if mean.total < best_total {
            best_total = mean.total;
            best = model.store.clone();
            log.best_epoch = Some(epoch);
        }
        log.epochs.push(EpochRecord { epoch, losses: mean });
    }
    Ok((log, best))
}
