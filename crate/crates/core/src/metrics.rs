//! SI-SDR, SNR and test-set reports.

use std::fmt::Write as _;

use crate::dsp::{self, Waveform};
use crate::error::{Error, Result};
use crate::model::{enhance_detailed, Enhancer};
use crate::nn::ops;

/// Reports are capped to this magnitude in dB.
pub const DB_CAP: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "estimate has {} samples, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    let energy = dot(reference, reference);
    if energy == 0.0 {
        return Err(Error::invalid("reference signal is all zero"));
    }
    Ok(energy)
}

fn capped_ratio_db(signal: f64, residual: f64) -> f64 {
    if signal == 0.0 {
        return -DB_CAP;
    }
    if residual <= 1e-20 * signal {
        return DB_CAP;
    }
    (10.0 * (signal / residual).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Scale-invariant SDR: the estimate is compared with its projection onto
/// the reference, `α·ref` with `α = ⟨est, ref⟩ / ‖ref‖²`.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let energy = check_pair(est, reference)?;
    let alpha = dot(est, reference) / energy;
    let target = alpha * alpha * energy;
    let residual: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    Ok(capped_ratio_db(target, residual))
}

/// `10·log10(‖ref‖² / ‖est − ref‖²)`, capped at ±100 dB.
pub fn snr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    let energy = check_pair(est, reference)?;
    let residual: f64 = est.iter().zip(reference).map(|(e, r)| (e - r) * (e - r)).sum();
    Ok(capped_ratio_db(energy, residual))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub snr_noisy: f64,
    pub snr_enhanced: f64,
    /// Mean absolute error between each stage estimate and the clean
    /// magnitude.
    pub spectral_l1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    pub mean: ItemMetrics,
}

impl MetricReport {
    fn from_items(items: Vec<ItemMetrics>) -> Self {
        let n = items.len() as f64;
        let stages = items[0].spectral_l1.len();
        let avg = |f: &dyn Fn(&ItemMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let mean = ItemMetrics {
            si_sdr_noisy: avg(&|m| m.si_sdr_noisy),
            si_sdr_enhanced: avg(&|m| m.si_sdr_enhanced),
            snr_noisy: avg(&|m| m.snr_noisy),
            snr_enhanced: avg(&|m| m.snr_enhanced),
            spectral_l1: (0..stages).map(|k| avg(&|m| m.spectral_l1[k])).collect(),
        };
        MetricReport { items, mean }
    }

    pub fn si_sdr_improvement(&self) -> f64 {
        self.mean.si_sdr_enhanced - self.mean.si_sdr_noisy
    }

    /// One row per item, then a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("item\tsi_sdr_noisy\tsi_sdr_enhanced\tsnr_noisy\tsnr_enhanced");
        for k in 1..=self.mean.spectral_l1.len() {
            let _ = write!(out, "\tspectral_l1_stage{k}");
        }
        out.push('\n');
        let row = |out: &mut String, label: &str, m: &ItemMetrics| {
            let _ = write!(
                out,
                "{label}\t{}\t{}\t{}\t{}",
                m.si_sdr_noisy, m.si_sdr_enhanced, m.snr_noisy, m.snr_enhanced
            );
            for v in &m.spectral_l1 {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        };
        for (i, m) in self.items.iter().enumerate() {
            row(&mut out, &i.to_string(), m);
        }
        row(&mut out, "mean", &self.mean);
        out
    }

    /// `key: value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.mean;
        let mut out = String::new();
        let _ = writeln!(out, "items: {}", self.items.len());
        let _ = writeln!(out, "mean_si_sdr_noisy_db: {}", m.si_sdr_noisy);
        let _ = writeln!(out, "mean_si_sdr_enhanced_db: {}", m.si_sdr_enhanced);
        let _ = writeln!(out, "mean_si_sdr_improvement_db: {}", self.si_sdr_improvement());
        let _ = writeln!(out, "mean_snr_noisy_db: {}", m.snr_noisy);
        let _ = writeln!(out, "mean_snr_enhanced_db: {}", m.snr_enhanced);
        for (k, v) in m.spectral_l1.iter().enumerate() {
            let _ = writeln!(out, "mean_spectral_l1_stage{}: {v}", k + 1);
        }
        out
    }
}

/// Enhances every noisy item and scores it against its clean reference.
pub fn evaluate_set<E: Enhancer + ?Sized>(enhancer: &E, pairs: &[(Waveform, Waveform)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let win = enhancer.window()?;
    let mut items = Vec::with_capacity(pairs.len());
    for (noisy, clean) in pairs {
        let out = enhance_detailed(enhancer, noisy)?;
        let (clean_mag, _) = dsp::stft(clean, &win)?;
        let spectral_l1 = out
            .stage_estimates
            .iter()
            .map(|est| ops::mean_abs_loss(est, &clean_mag.values))
            .collect::<Result<Vec<_>>>()?;
        items.push(ItemMetrics {
            si_sdr_noisy: si_sdr(&noisy.samples, &clean.samples)?,
            si_sdr_enhanced: si_sdr(&out.waveform.samples, &clean.samples)?,
            snr_noisy: snr_db(&noisy.samples, &clean.samples)?,
            snr_enhanced: snr_db(&out.waveform.samples, &clean.samples)?,
            spectral_l1,
        });
    }
    Ok(MetricReport::from_items(items))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> Vec<f64> {
        (0..200)
            .map(|t| (t as f64 * 0.13).sin() + 0.2 * (t as f64 * 0.71).cos())
            .collect()
    }

    #[test]
    fn perfect_and_scaled_estimates_hit_cap() {
        let r = reference();
        assert_eq!(si_sdr(&r, &r).unwrap(), DB_CAP);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&doubled, &r).unwrap(), DB_CAP);
        assert_eq!(snr_db(&r, &r).unwrap(), DB_CAP);
    }

    #[test]
    fn zero_reference_rejected() {
        let z = vec![0.0; 10];
        assert!(matches!(si_sdr(&z, &z), Err(Error::InvalidArgument(_))));
        assert!(matches!(snr_db(&reference()[..10], &z), Err(Error::InvalidArgument(_))));
        assert!(si_sdr(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn residual_pulls_below_cap() {
        let r = reference();
        let mut e = r.clone();
        e[17] += 1e-3;
        assert!(si_sdr(&e, &r).unwrap() < DB_CAP);
    }

    #[test]
    fn snr_is_homogeneous() {
        let r = reference();
        let e: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + 0.1 * (i as f64).cos()).collect();
        let a = snr_db(&e, &r).unwrap();
        let e3: Vec<f64> = e.iter().map(|v| 3.0 * v).collect();
        let r3: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
        assert!((snr_db(&e3, &r3).unwrap() - a).abs() < 1e-12);
    }
}
