//! The K-stage cascade: per-stage masks, cascaded estimates, the
//! accumulated loss and waveform enhancement.
//!
//! Stage 1 sees the noisy magnitude `X`, stage 2 sees `X̂⁽¹⁾`, and every
//! later stage `k` sees the fusion of `M⁽ᵏ⁻¹⁾ ⊙ X` with `X̂⁽ᵏ⁻¹⁾`. Estimates
//! cascade as `X̂⁽ᵏ⁾ = M⁽ᵏ⁾ ⊙ X̂⁽ᵏ⁻¹⁾` with `X̂⁽⁰⁾ = X`.

use crate::blocks::{Fusion, FusionCache, Pass, Stage, StageCache, StageDims, StatUpdate};
use crate::dsp::{self, AnalysisWindow, PhaseMatrix, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::nn::ops::{self, Mode};
use crate::nn::{Initializer, ParamStore, Segments, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of stages K.
    pub stages: usize,
    /// TCN internal width H.
    pub hidden: usize,
    /// Bottleneck width B.
    pub bottleneck: usize,
    /// Stacks per stage R.
    pub stacks: usize,
    /// TCN blocks per stack L.
    pub blocks: usize,
    /// Depthwise kernel size P.
    pub kernel: usize,
    /// STFT frame length N.
    pub fft_size: usize,
    pub hop: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 5,
            hidden: 256,
            bottleneck: 128,
            stacks: 3,
            blocks: 8,
            kernel: 3,
            fft_size: 512,
            hop: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("hidden", self.hidden),
            ("bottleneck", self.bottleneck),
            ("stacks", self.stacks),
            ("blocks", self.blocks),
            ("kernel", self.kernel),
            ("hop", self.hop),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "fft_size must be even and at least 2, got {}",
                self.fft_size
            )));
        }
        if self.blocks >= usize::BITS as usize - 1 {
            return Err(Error::invalid("too many blocks per stack"));
        }
        Ok(())
    }

    /// Frequency bins `F = N/2 + 1`.
    pub fn features(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fusion_count(&self) -> usize {
        self.stages.saturating_sub(2)
    }

    pub fn stage_dims(&self) -> StageDims {
        StageDims {
            features: self.features(),
            bottleneck: self.bottleneck,
            hidden: self.hidden,
            stacks: self.stacks,
            depth: self.blocks,
            kernel: self.kernel,
        }
    }

    pub fn window(&self) -> Result<AnalysisWindow> {
        dsp::hann_window(self.fft_size)?.with_hop(self.hop)
    }
}

/// Parameter counts by component. Per-stage and per-fusion figures are the
/// same for every stage/fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub per_sa: usize,
    /// All R×L TCN blocks of one stage.
    pub tcn_per_stage: usize,
    pub per_tcn_block: usize,
    /// Bottleneck and output projection of one stage.
    pub glue_per_stage: usize,
    pub per_stage: usize,
    pub per_fusion: usize,
    pub stages: usize,
    pub fusions: usize,
    pub total: usize,
}

pub struct MultiStageModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stages: Vec<Stage>,
    /// Fusion blocks for stages 3..=K, in order.
    pub fusions: Vec<Fusion>,
}

/// Everything one forward pass produced.
pub struct ForwardTrace {
    pub input: Tensor,
    pub segments: Segments,
    /// `M⁽¹⁾ … M⁽ᴷ⁾`
    pub masks: Vec<Tensor>,
    /// `X̂⁽¹⁾ … X̂⁽ᴷ⁾`
    pub estimates: Vec<Tensor>,
    /// Fused stage input, present for stages 3 and later.
    pub fused: Vec<Option<Tensor>>,
    stage_caches: Vec<StageCache>,
    fusion_caches: Vec<FusionCache>,
    stat_updates: Vec<StatUpdate>,
}

impl ForwardTrace {
    pub fn final_estimate(&self) -> &Tensor {
        self.estimates.last().expect("at least one stage")
    }

    /// `X̂⁽ᵏ⁾` with `k = 0` meaning the input.
    pub fn estimate(&self, k: usize) -> &Tensor {
        if k == 0 {
            &self.input
        } else {
            &self.estimates[k - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLosses {
    pub per_stage: Vec<f64>,
    pub total: f64,
}

impl MultiStageModel {
    /// Builds a model with deterministic, seeded initial parameters.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let dims = config.stage_dims();
        let mut stages = Vec::with_capacity(config.stages);
        let mut fusions = Vec::with_capacity(config.fusion_count());
        for k in 1..=config.stages {
            if k >= 3 {
                fusions.push(Fusion::build(
                    &mut store,
                    &mut init,
                    &format!("fusion{k}"),
                    dims.features,
                )?);
            }
            stages.push(Stage::build(&mut store, &mut init, &format!("stage{k}"), dims)?);
        }
        Ok(MultiStageModel {
            config,
            store,
            stages,
            fusions,
        })
    }

    pub fn features(&self) -> usize {
        self.config.features()
    }

    /// Forward pass over a packed batch (`F × ΣTᵢ`).
    pub fn forward(&self, x: &Tensor, segs: &Segments, mode: Mode) -> Result<ForwardTrace> {
        let f = self.features();
        if !x.is_matrix() || x.rows() != f {
            return Err(Error::invalid(format!(
                "model expects {f} frequency rows, got shape {:?}",
                x.shape()
            )));
        }
        if segs.total() != x.cols() {
            return Err(Error::invalid("segment lengths do not match the number of frames"));
        }
        let store = &self.store;
        let mut pass = Pass::new(mode);
        let k_max = self.stages.len();
        let mut masks: Vec<Tensor> = Vec::with_capacity(k_max);
        let mut estimates: Vec<Tensor> = Vec::with_capacity(k_max);
        let mut fused = Vec::with_capacity(k_max);
        let mut stage_caches = Vec::with_capacity(k_max);
        let mut fusion_caches = Vec::with_capacity(self.fusions.len());
        for (idx, stage) in self.stages.iter().enumerate() {
            let k = idx + 1;
            let prev_est = if k == 1 { x } else { &estimates[idx - 1] };
            let stage_in = if k >= 3 {
                let masked_orig = masks[idx - 1].hadamard(x);
                let (y, c) = self.fusions[k - 3].forward(store, &masked_orig, prev_est, segs)?;
                fusion_caches.push(c);
                fused.push(Some(y));
                fused.last().unwrap().as_ref().unwrap()
            } else {
                fused.push(None);
                prev_est
            };
            let cache = stage.forward(store, &mut pass, stage_in, segs)?;
            let mask = cache.mask().clone();
            let est = mask.hadamard(prev_est);
            stage_caches.push(cache);
            masks.push(mask);
            estimates.push(est);
        }
        Ok(ForwardTrace {
            input: x.clone(),
            segments: segs.clone(),
            masks,
            estimates,
            fused,
            stage_caches,
            fusion_caches,
            stat_updates: pass.stat_updates,
        })
    }

    /// Single-utterance forward pass.
    pub fn forward_single(&self, x: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        self.forward(x, &Segments::single(x.cols()), mode)
    }

    /// Per-stage losses `mean|M⁽ᵏ⁾ ⊙ X̂⁽ᵏ⁻¹⁾ − S|` and their sum. Each stage
    /// loss is averaged per utterance and then across the batch.
    pub fn total_loss(&self, trace: &ForwardTrace, clean: &Tensor) -> Result<StageLosses> {
        total_loss(trace, clean)
    }

    /// Accumulates gradients of the total loss into the parameter store.
    pub fn backward(&mut self, trace: &ForwardTrace, clean: &Tensor) -> Result<()> {
        if clean.shape() != trace.input.shape() {
            return Err(Error::invalid("clean magnitude differs in shape from the input"));
        }
        let segs = &trace.segments;
        let k_max = self.stages.len();
        // d_est[k] is the gradient w.r.t. X̂⁽ᵏ⁾ (index 0 = input, unused).
        let mut d_est: Vec<Tensor> = (0..=k_max).map(|_| Tensor::zeros(clean.shape())).collect();
        let mut d_mask: Vec<Tensor> = (0..=k_max).map(|_| Tensor::zeros(clean.shape())).collect();
        for k in (1..=k_max).rev() {
            let est = &trace.estimates[k - 1];
            d_est[k].add_assign(&ops::segment_mean_abs_loss_backward(est, clean, segs));
            let prev = trace.estimate(k - 1);
            let dm = d_est[k].hadamard(prev);
            d_mask[k].add_assign(&dm);
            if k > 1 {
                let dp = d_est[k].hadamard(&trace.masks[k - 1]);
                d_est[k - 1].add_assign(&dp);
            }
            let d_in = self.stages[k - 1].backward(&mut self.store, &trace.stage_caches[k - 1], segs, &d_mask[k]);
            match k {
                1 => {}
                2 => d_est[1].add_assign(&d_in),
                _ => {
                    let (d_masked, d_prev) =
                        self.fusions[k - 3].backward(&mut self.store, &trace.fusion_caches[k - 3], segs, &d_in);
                    d_est[k - 1].add_assign(&d_prev);
                    d_mask[k - 1].add_assign(&d_masked.hadamard(&trace.input));
                }
            }
        }
        Ok(())
    }

    /// Folds the batch-norm statistics of a train-mode pass into the running
    /// averages.
    pub fn commit_running_stats(&mut self, trace: ForwardTrace) {
        let pass = Pass {
            mode: Mode::Train,
            stat_updates: trace.stat_updates,
        };
        pass.commit(&mut self.store);
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        let s = &self.store;
        let per_sa = s.trainable_count_with_prefix("stage1.sa.");
        let tcn_per_stage = s.trainable_count_with_prefix("stage1.stack");
        let per_tcn_block = s.trainable_count_with_prefix("stage1.stack1.block1.");
        let glue_per_stage =
            s.trainable_count_with_prefix("stage1.bottleneck.") + s.trainable_count_with_prefix("stage1.out_proj.");
        let per_stage = s.trainable_count_with_prefix("stage1.");
        let per_fusion = if self.fusions.is_empty() {
            0
        } else {
            s.trainable_count_with_prefix("fusion3.")
        };
        ParamBreakdown {
            per_sa,
            tcn_per_stage,
            per_tcn_block,
            glue_per_stage,
            per_stage,
            per_fusion,
            stages: self.stages.len(),
            fusions: self.fusions.len(),
            total: s.trainable_count(),
        }
    }

    pub fn enhance(&self, x: &Waveform) -> Result<Waveform> {
        enhance(self, x)
    }
}

pub fn total_loss(trace: &ForwardTrace, clean: &Tensor) -> Result<StageLosses> {
    let per_stage = trace
        .estimates
        .iter()
        .map(|est| ops::segment_mean_abs_loss(est, clean, &trace.segments))
        .collect::<Result<Vec<_>>>()?;
    let total = per_stage.iter().sum();
    Ok(StageLosses { per_stage, total })
}

/// Anything that maps a noisy magnitude to a sequence of stage estimates,
/// the last of which is synthesized with the noisy phase.
pub trait Enhancer {
    fn window(&self) -> Result<AnalysisWindow>;

    /// Stage estimates for one utterance, in order; the last is the output.
    fn stage_estimates(&self, noisy: &Tensor) -> Result<Vec<Tensor>>;
}

impl Enhancer for MultiStageModel {
    fn window(&self) -> Result<AnalysisWindow> {
        self.config.window()
    }

    fn stage_estimates(&self, noisy: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward_single(noisy, Mode::Eval)?.estimates)
    }
}

/// Passes the noisy magnitude through unchanged, as if every mask were 1.
#[derive(Clone, Copy, Debug)]
pub struct IdentityEnhancer {
    pub fft_size: usize,
    pub hop: usize,
}

impl Enhancer for IdentityEnhancer {
    fn window(&self) -> Result<AnalysisWindow> {
        dsp::hann_window(self.fft_size)?.with_hop(self.hop)
    }

    fn stage_estimates(&self, noisy: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![noisy.clone()])
    }
}

/// Result of enhancing one waveform, with the intermediate spectra.
pub struct Enhanced {
    pub waveform: Waveform,
    pub noisy_magnitude: Spectrogram,
    pub noisy_phase: PhaseMatrix,
    pub stage_estimates: Vec<Tensor>,
}

pub fn enhance_detailed<E: Enhancer + ?Sized>(enhancer: &E, x: &Waveform) -> Result<Enhanced> {
    let win = enhancer.window()?;
    let (mag, phase) = dsp::stft(x, &win)?;
    let stage_estimates = enhancer.stage_estimates(&mag.values)?;
    let out = Spectrogram {
        values: stage_estimates
            .last()
            .cloned()
            .ok_or_else(|| Error::invalid("enhancer produced no estimate"))?,
        ..mag.clone()
    };
    let waveform = dsp::istft(&out, &phase, &win, x.len())?;
    Ok(Enhanced {
        waveform,
        noisy_magnitude: mag,
        noisy_phase: phase,
        stage_estimates,
    })
}

/// STFT → stage cascade → ISTFT with the noisy phase, cut to the input
/// length.
pub fn enhance<E: Enhancer + ?Sized>(enhancer: &E, x: &Waveform) -> Result<Waveform> {
    Ok(enhance_detailed(enhancer, x)?.waveform)
}
