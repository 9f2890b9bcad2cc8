//! Windowing, STFT analysis and ISTFT overlap-add synthesis.
//!
//! Frames are not centered: frame `τ` covers samples `τ·hop .. τ·hop + N`.
//! The signal tail is zero-padded so the last partial frame is complete.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Samples whose accumulated squared window falls below this are treated as
/// not covered by any frame.
pub const COVERAGE_EPS: f64 = 1e-8;

/// Lower clamp on the synthesis divisor, relative to the peak accumulated
/// squared window.
pub const NORM_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Linear STFT magnitude, `F × T` with `F = N/2 + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor,
    pub frame_hop: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

/// STFT phase in radians, same shape as its magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMatrix {
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisWindow {
    coefficients: Vec<f64>,
    hop: usize,
}

impl AnalysisWindow {
    pub fn new(coefficients: Vec<f64>, hop: usize) -> Result<Self> {
        if coefficients.len() < 2 {
            return Err(Error::invalid("window length must be at least 2"));
        }
        if hop == 0 {
            return Err(Error::invalid("hop must be positive"));
        }
        if coefficients.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("window coefficients must lie in [0, 1]"));
        }
        Ok(AnalysisWindow { coefficients, hop })
    }

    /// All-ones window.
    pub fn rectangular(n: usize, hop: usize) -> Result<Self> {
        Self::new(vec![1.0; n], hop)
    }

    pub fn with_hop(mut self, hop: usize) -> Result<Self> {
        if hop == 0 {
            return Err(Error::invalid("hop must be positive"));
        }
        self.hop = hop;
        Ok(self)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.len() / 2 + 1
    }
}

/// Symmetric Hann window `w(t) = sin²(πt/(N−1))` with a default hop of `N/2`.
///
pub fn hann_window(n: usize) -> Result<AnalysisWindow> {
    if n < 2 {
        return Err(Error::invalid(format!("window length must be at least 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    let coeffs = (0..n)
        .map(|t| {
            let s = (PI * t as f64 / denom).sin();
            (s * s).clamp(0.0, 1.0)
        })
        .collect();
    AnalysisWindow::new(coeffs, n / 2)
}

/// Signal length after tail padding: at least one frame, and a whole
/// number of hops past the first frame.
pub fn padded_len(len: usize, n: usize, hop: usize) -> usize {
    if len <= n {
        n
    } else {
        n + (len - n).div_ceil(hop) * hop
    }
}

/// `T = (padded_len − N)/hop + 1`.
pub fn num_frames(len: usize, n: usize, hop: usize) -> usize {
    (padded_len(len, n, hop) - n) / hop + 1
}

// The one-sided spectrum assumes F = N/2 + 1 bins.
fn check_even(n: usize) -> Result<()> {
    if n % 2 == 0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "frame length must be even for analysis, got {n}"
        )))
    }
}

/// Magnitude and phase of the STFT of `x`.
pub fn stft(x: &Waveform, win: &AnalysisWindow) -> Result<(Spectrogram, PhaseMatrix)> {
    let n = win.len();
    let hop = win.hop();
    check_even(n)?;
    if x.len() < n {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one frame ({n})",
            x.len()
        )));
    }
    let frames = num_frames(x.len(), n, hop);
    let bins = win.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut mag = Tensor::zeros(&[bins, frames]);
    let mut phase = Tensor::zeros(&[bins, frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for tau in 0..frames {
        let start = tau * hop;
        for (i, (b, &w)) in buf.iter_mut().zip(win.coefficients()).enumerate() {
            let s = x.samples.get(start + i).copied().unwrap_or(0.0);
            *b = Complex::new(w * s, 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(bins).enumerate() {
            let m = c.norm();
            mag.set(k, tau, m);
            phase.set(k, tau, if m == 0.0 { 0.0 } else { c.im.atan2(c.re) });
        }
    }
    Ok((
        Spectrogram {
            values: mag,
            frame_hop: hop,
            fft_size: n,
            sample_rate: x.sample_rate,
        },
        PhaseMatrix { values: phase },
    ))
}

/// Inverse STFT by windowed overlap-add, normalized by the per-sample sum of
/// squared window values.
///
/// The divisor is clamped at [`NORM_FLOOR`] times its peak, so the tapered
/// first and last half-frames fade in and out rather than amplifying
/// whatever a modified spectrogram leaves there. Where coverage exceeds the
/// floor the reconstruction is exact.
///
/// Samples that no frame reaches with a non-zero window weight at the outer
/// edges (e.g. sample 0 under a symmetric Hann window) come back as 0. A
/// zero-coverage gap between covered samples is reported as
/// [`Error::DegenerateCoverage`].
pub fn istft(mag: &Spectrogram, phase: &PhaseMatrix, win: &AnalysisWindow, out_len: usize) -> Result<Waveform> {
    istft_with_floor(mag, phase, win, out_len, NORM_FLOOR)
}

/// [`istft`] with an explicit divisor floor, relative to the peak coverage.
/// A floor of 0 gives plain least-squares overlap-add.
pub fn istft_with_floor(
    mag: &Spectrogram,
    phase: &PhaseMatrix,
    win: &AnalysisWindow,
    out_len: usize,
    norm_floor: f64,
) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&norm_floor) {
        return Err(Error::invalid(format!(
            "divisor floor must lie in [0, 1], got {norm_floor}"
        )));
    }
    let n = win.len();
    let hop = win.hop();
    let bins = win.bins();
    check_even(n)?;
    if mag.values.shape() != phase.values.shape() {
        return Err(Error::invalid(format!(
            "magnitude {:?} and phase {:?} differ in shape",
            mag.values.shape(),
            phase.values.shape()
        )));
    }
    if mag.bins() != bins {
        return Err(Error::invalid(format!(
            "spectrogram has {} bins, window of length {n} needs {bins}",
            mag.bins()
        )));
    }
    let frames = mag.frames();
    if frames == 0 {
        return Err(Error::invalid("spectrogram has no frames"));
    }
    let span = (frames - 1) * hop + n;
    if out_len > span {
        return Err(Error::invalid(format!(
            "requested {out_len} samples but frames only span {span}"
        )));
    }

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut acc = vec![0.0; span];
    let mut coverage = vec![0.0; span];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for tau in 0..frames {
        for k in 0..bins {
            buf[k] = Complex::from_polar(mag.values.at(k, tau), phase.values.at(k, tau));
        }
        // DC and Nyquist of a real frame are real.
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = tau * hop;
        for (i, (c, &w)) in buf.iter().zip(win.coefficients()).enumerate() {
            acc[start + i] += w * c.re / n as f64;
            coverage[start + i] += w * w;
        }
    }

    let first = coverage.iter().position(|&c| c >= COVERAGE_EPS);
    let last = coverage.iter().rposition(|&c| c >= COVERAGE_EPS);
    let floor = norm_floor * coverage.iter().fold(0.0f64, |m, &c| m.max(c));
    let mut out = vec![0.0; out_len];
    for (t, o) in out.iter_mut().enumerate() {
        let c = coverage[t];
        if c >= COVERAGE_EPS {
            *o = acc[t] / c.max(floor);
        } else if matches!((first, last), (Some(f), Some(l)) if t > f && t < l) {
            return Err(Error::DegenerateCoverage { sample: t, value: c });
        }
    }
    Waveform::new(out, mag.sample_rate)
}
