//! Triangular mel filterbank and log-domain min-max normalization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{MagnitudeSpectrogram, MelSpectrogram};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, shape [n_mels x bins].
pub fn mel_filterbank(
    n_mels: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<Array2<f64>> {
    if n_mels < 1 {
        return Err(Error::Data("n_mels must be >= 1".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Data(format!(
            "invalid band edges fmin={fmin}, fmax={fmax}, nyquist={nyquist}"
        )));
    }
    let bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_freq = |b: usize| b as f64 * sample_rate as f64 / fft_size as f64;

    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..bins {
            let f = bin_freq(b);
            let w = if f >= lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f <= hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    Ok(fb)
}

/// Project a magnitude spectrogram onto a mel filterbank.
pub fn mel_project(
    m: &MagnitudeSpectrogram,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(n_mels, m.params.fft_size, m.sample_rate, fmin, fmax)?;
    if fb.ncols() != m.bins() {
        return Err(Error::Shape(format!(
            "filterbank has {} bins, spectrogram {}",
            fb.ncols(),
            m.bins()
        )));
    }
    Ok(MelSpectrogram {
        values: m.values.dot(&fb.t()),
        n_mels,
        params: m.params,
        sample_rate: m.sample_rate,
    })
}

/// Min-max statistics of log-domain values, used to normalize mel and linear
/// spectrograms to [0,1] for the TTS targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormStats {
    pub log_floor: f64,
    pub min: f64,
    pub max: f64,
}

impl LogNormStats {
    /// Fit statistics over a set of spectrogram value matrices.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Array2<f64>>, log_floor: f64) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for m in mats {
            for &v in m.iter() {
                let lv = v.max(log_floor).ln();
                min = min.min(lv);
                max = max.max(lv);
            }
        }
        if !min.is_finite() || !max.is_finite() || max - min < 1e-12 {
            min = log_floor.ln();
            max = 0.0;
        }
        LogNormStats {
            log_floor,
            min,
            max,
        }
    }

    /// Map linear-amplitude values to [0,1] via log + min-max.
    pub fn normalize(&self, values: &Array2<f64>) -> Array2<f64> {
        values.mapv(|v| {
            ((v.max(self.log_floor).ln() - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        })
    }

    /// Inverse of `normalize` for values inside the fitted range.
    pub fn denormalize(&self, values: &Array2<f64>) -> Array2<f64> {
        values.mapv(|v| (self.min + v * (self.max - self.min)).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftParams;

    fn mag(values: Array2<f64>) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values,
            params: StftParams::default_16k(),
            sample_rate: 16_000,
        }
    }

    #[test]
    fn zero_magnitude_gives_zero_mel() {
        let m = mag(Array2::zeros((10, 513)));
        let mel = mel_project(&m, 80, 0.0, 8000.0).unwrap();
        assert_eq!(mel.values.dim(), (10, 80));
        assert!(mel.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filterbank_rows_positive_with_compact_support() {
        let fb = mel_filterbank(80, 1024, 16_000, 0.0, 8000.0).unwrap();
        for (i, row) in fb.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            assert!(sum > 0.0, "row {i} sums to {sum}");
            // Compact support: nonzero bins form one contiguous run.
            let nz: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(b, _)| b)
                .collect();
            assert!(!nz.is_empty());
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "row {i} not contiguous");
            assert!(nz.len() < 513, "row {i} covers every bin");
        }
    }

    #[test]
    fn mel_project_is_linear() {
        let m1 = mag(Array2::from_shape_fn((5, 513), |(i, j)| ((i * j) % 17) as f64 * 0.1));
        let m2 = mag(Array2::from_shape_fn((5, 513), |(i, j)| ((i + j) % 13) as f64 * 0.2));
        let (a, b) = (2.5, -0.75);
        let combo = mag(a * &m1.values + b * &m2.values);
        let lhs = mel_project(&combo, 80, 0.0, 8000.0).unwrap().values;
        let rhs = a * &mel_project(&m1, 80, 0.0, 8000.0).unwrap().values
            + b * &mel_project(&m2, 80, 0.0, 8000.0).unwrap().values;
        let max_err = (&lhs - &rhs).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(max_err < 1e-6, "linearity error {max_err}");
    }

    #[test]
    fn invalid_band_edges() {
        assert!(mel_filterbank(80, 1024, 16_000, 4000.0, 2000.0).is_err());
        assert!(mel_filterbank(80, 1024, 16_000, 0.0, 9000.0).is_err());
        assert!(mel_filterbank(0, 1024, 16_000, 0.0, 8000.0).is_err());
    }

    #[test]
    fn norm_denorm_identity() {
        let m = Array2::from_shape_fn((6, 40), |(i, j)| 1e-4 + (i as f64 + 1.0) * (j as f64 + 1.0) * 1e-3);
        let stats = LogNormStats::fit([&m], 1e-5);
        let n = stats.normalize(&m);
        assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let d = stats.denormalize(&n);
        let max_rel = m
            .iter()
            .zip(d.iter())
            .map(|(a, b)| ((a - b) / a).abs())
            .fold(0.0f64, f64::max);
        assert!(max_rel < 1e-6, "denorm∘norm relative error {max_rel}");
    }
}
