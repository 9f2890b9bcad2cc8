//! STFT/ISTFT against a DFT computed straight from its definition.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use satcn::dsp::{hann_window, istft, num_frames, stft, AnalysisWindow, PhaseMatrix, Spectrogram, Waveform};
use std::f64::consts::PI;

/// `X[k] = Σ_t x[t] e^{-2πikt/N}` by the definition, O(N²).
fn dft(frame: &[f64]) -> Vec<(f64, f64)> {
    let n = frame.len();
    (0..n)
        .map(|k| {
            frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &x)| {
                let a = -2.0 * PI * (k * t) as f64 / n as f64;
                (re + x * a.cos(), im + x * a.sin())
            })
        })
        .collect()
}

fn windowed_frame(x: &[f64], win: &AnalysisWindow, tau: usize) -> Vec<f64> {
    let start = tau * win.hop();
    win.coefficients()
        .iter()
        .enumerate()
        .map(|(i, w)| w * x.get(start + i).copied().unwrap_or(0.0))
        .collect()
}

fn random_wave(seed: u64, len: usize) -> Waveform {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| r.random_range(-1.0..1.0)).collect(), 16000).unwrap()
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Samples covered by two overlapping frames (for hop = N/2) and inside the
/// original signal.
fn interior(len: usize, n: usize, hop: usize) -> std::ops::Range<usize> {
    let frames = num_frames(len, n, hop);
    hop..len.min((frames - 1) * hop + n - hop)
}

#[test]
fn hann_window_matches_closed_form() {
    for n in [2, 3, 4, 17, 128, 512] {
        let w = hann_window(n).unwrap();
        for (t, &c) in w.coefficients().iter().enumerate() {
            let s = (PI * t as f64 / (n - 1) as f64).sin();
            assert!((c - s * s).abs() < 1e-15);
        }
    }
    assert!((hann_window(4).unwrap().coefficients()[1] - 0.75).abs() < 1e-15);
    assert!(hann_window(1).is_err());
}

#[test]
fn stft_matches_definition_dft() {
    for (seed, n) in [(1, 16), (2, 64), (3, 128)] {
        let win = hann_window(n).unwrap();
        let x = random_wave(seed, 5 * n + 7);
        let (mag, phase) = stft(&x, &win).unwrap();
        assert_eq!(mag.bins(), n / 2 + 1);
        assert_eq!(mag.frames(), num_frames(x.len(), n, n / 2));
        for tau in 0..mag.frames() {
            let oracle = dft(&windowed_frame(&x.samples, &win, tau));
            for k in 0..mag.bins() {
                let (re, im) = oracle[k];
                let m = (re * re + im * im).sqrt();
                assert!(
                    (mag.values.at(k, tau) - m).abs() < 1e-9 * (1.0 + m),
                    "n {n} k {k} tau {tau}"
                );
                if m > 1e-6 {
                    let d = (phase.values.at(k, tau) - im.atan2(re)).rem_euclid(2.0 * PI);
                    assert!(d.min(2.0 * PI - d) < 1e-9, "phase n {n} k {k} tau {tau}");
                }
            }
        }
    }
}

#[test]
fn integer_bin_cosine_peaks_at_its_bin() {
    let n = 128;
    let win = hann_window(n).unwrap();
    for k in [3, 10, 40] {
        let x = Waveform::new(
            (0..6 * n)
                .map(|t| (2.0 * PI * (k * t) as f64 / n as f64).cos())
                .collect(),
            8000,
        )
        .unwrap();
        let (mag, _) = stft(&x, &win).unwrap();
        for tau in 0..mag.frames() {
            let col: Vec<f64> = (0..mag.bins()).map(|b| mag.values.at(b, tau)).collect();
            let arg = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(arg, k, "frame {tau}");
        }
    }
}

#[test]
fn parseval_per_frame() {
    let n = 64;
    let win = hann_window(n).unwrap();
    let x = random_wave(9, 8 * n);
    let (mag, _) = stft(&x, &win).unwrap();
    for tau in 0..mag.frames() {
        let frame = windowed_frame(&x.samples, &win, tau);
        let time: f64 = frame.iter().map(|v| v * v).sum();
        // One-sided spectrum: interior bins stand for two two-sided bins.
        let freq: f64 = (0..mag.bins())
            .map(|k| {
                let m2 = mag.values.at(k, tau).powi(2);
                if k == 0 || k == n / 2 {
                    m2
                } else {
                    2.0 * m2
                }
            })
            .sum::<f64>()
            / n as f64;
        assert!((time - freq).abs() <= 1e-9 * time, "frame {tau}: {time} vs {freq}");
    }
}

#[test]
fn round_trip_on_twenty_random_waveforms() {
    let n = 512;
    let win = hann_window(n).unwrap();
    for seed in 0..20u64 {
        let len = 4 * n + (seed as usize * 37) % n;
        let x = random_wave(100 + seed, len);
        let (mag, phase) = stft(&x, &win).unwrap();
        let y = istft(&mag, &phase, &win, len).unwrap();
        assert_eq!(y.len(), len);
        let r = interior(len, n, n / 2);
        let err = l2(r.clone().map(|t| y.samples[t] - x.samples[t]));
        let norm = l2(r.map(|t| x.samples[t]));
        assert!(err / norm < 1e-6, "seed {seed}: {}", err / norm);
    }
}

#[test]
fn zero_input_gives_zero_magnitude_and_phase() {
    let win = hann_window(32).unwrap();
    let x = Waveform::new(vec![0.0; 100], 8000).unwrap();
    let (mag, phase) = stft(&x, &win).unwrap();
    assert_eq!(mag.values.max_abs(), 0.0);
    assert_eq!(phase.values.max_abs(), 0.0);
    let y = istft(&mag, &phase, &win, 100).unwrap();
    assert!(y.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn rectangular_single_frame_of_ones() {
    let n = 16;
    let win = AnalysisWindow::rectangular(n, n).unwrap();
    let x = Waveform::new(vec![1.0; n], 8000).unwrap();
    let (mag, _) = stft(&x, &win).unwrap();
    assert_eq!(mag.frames(), 1);
    assert!((mag.values.at(0, 0) - n as f64).abs() < 1e-12);
    for k in 1..mag.bins() {
        assert!(mag.values.at(k, 0) < 1e-12);
    }
}

#[test]
fn istft_is_linear_in_magnitude() {
    let n = 64;
    let win = hann_window(n).unwrap();
    let x = random_wave(5, 6 * n);
    let (mut mag, phase) = stft(&x, &win).unwrap();
    let y1 = istft(&mag, &phase, &win, x.len()).unwrap();
    mag.values = mag.values.scale(2.0);
    let y2 = istft(&mag, &phase, &win, x.len()).unwrap();
    for (a, b) in y1.samples.iter().zip(&y2.samples) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn istft_rejects_mismatched_shapes_and_overlong_requests() {
    let n = 32;
    let win = hann_window(n).unwrap();
    let x = random_wave(6, 4 * n);
    let (mag, phase) = stft(&x, &win).unwrap();
    let bad = PhaseMatrix {
        values: phase.values.slice_cols(0, phase.values.cols() - 1),
    };
    assert!(istft(&mag, &bad, &win, x.len()).is_err());
    let span = (mag.frames() - 1) * (n / 2) + n;
    assert!(istft(&mag, &phase, &win, span + 1).is_err());
}

#[test]
fn edge_samples_of_a_modified_spectrogram_stay_bounded() {
    // A constant-magnitude, zero-phase spectrogram is not the STFT of any
    // signal; the tapered edges must not blow its inconsistency up.
    let n = 128;
    let win = hann_window(n).unwrap();
    let frames = 6;
    let mag = Spectrogram {
        values: satcn::nn::Tensor::full(&[n / 2 + 1, frames], 1.0),
        frame_hop: n / 2,
        fft_size: n,
        sample_rate: 8000,
    };
    let phase = PhaseMatrix {
        values: satcn::nn::Tensor::zeros(&[n / 2 + 1, frames]),
    };
    let len = (frames - 1) * (n / 2) + n;
    let y = istft(&mag, &phase, &win, len).unwrap();
    let interior_peak = y.samples[n / 2..len - n / 2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edge_peak = y.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(
        edge_peak <= 4.0 * interior_peak.max(1.0),
        "{edge_peak} vs {interior_peak}"
    );
}

#[test]
fn short_input_is_rejected() {
    let win = hann_window(64).unwrap();
    let x = random_wave(1, 63);
    assert!(stft(&x, &win).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frame_count_formula(len in 64usize..5000, log_n in 3u32..9) {
        let n = 1usize << log_n;
        prop_assume!(len >= n);
        let hop = n / 2;
        let t = num_frames(len, n, hop);
        // Last frame starts inside the signal and the frames reach its end.
        prop_assert!((t - 1) * hop < len);
        prop_assert!((t - 1) * hop + n >= len);
    }

    #[test]
    fn round_trip_interior(seed in any::<u64>(), extra in 0usize..200) {
        let n = 64;
        let win = hann_window(n).unwrap();
        let len = 4 * n + extra;
        let x = random_wave(seed, len);
        let (mag, phase) = stft(&x, &win).unwrap();
        let y = istft(&mag, &phase, &win, len).unwrap();
        let r = interior(len, n, n / 2);
        let err = l2(r.clone().map(|t| y.samples[t] - x.samples[t]));
        let norm = l2(r.map(|t| x.samples[t]));
        prop_assert!(err / norm < 1e-6);
    }
}

#[test]
fn zero_floor_recovers_everything_but_the_zero_weight_sample() {
    let n = 64;
    let win = hann_window(n).unwrap();
    let x = random_wave(77, 5 * n + 7);
    let (mag, phase) = stft(&x, &win).unwrap();
    let y = satcn::dsp::istft_with_floor(&mag, &phase, &win, x.len(), 0.0).unwrap();
    assert_eq!(y.samples[0], 0.0);
    for t in 1..x.len() {
        assert!((y.samples[t] - x.samples[t]).abs() < 1e-6, "sample {t}");
    }
    assert!(satcn::dsp::istft_with_floor(&mag, &phase, &win, x.len(), 1.5).is_err());
}
