//! Deterministic signal-processing kernel.
//!
//! Everything here is a pure function on immutable inputs: STFT analysis and
//! synthesis, mel projection, SNR-calibrated mixing, mask application,
//! Griffin-Lim phase estimation, and the proxy quality metrics. All math is
//! done in f64.

mod griffin_lim;
mod mel;
mod metrics;
mod mix;
mod stft;

pub use griffin_lim::{griffin_lim, griffin_lim_with_residuals};
pub use mel::{mel_filterbank, mel_project, LogNormStats};
pub use metrics::{log_spectral_distance, si_snr, SI_SNR_CAP_DB};
pub use mix::{active_sample_mask, measure_snr, mix_at_snr};
pub use stft::{istft, istft_with_len, stft};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window function for STFT analysis/synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    /// Periodic Hann window; satisfies COLA at hop = win/k, k >= 2.
    Hann,
}

impl WindowKind {
    pub fn samples(&self, win_size: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..win_size)
                .map(|n| {
                    0.5 * (1.0
                        - (2.0 * std::f64::consts::PI * n as f64 / win_size as f64).cos())
                })
                .collect(),
        }
    }
}

/// STFT analysis parameters.
///
/// Validated at construction: `hop <= win <= fft` and the squared window must
/// overlap-add to a floor-bounded constant at the given hop (otherwise exact
/// inversion is impossible).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub win_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl StftParams {
    pub fn new(fft_size: usize, win_size: usize, hop_size: usize, window: WindowKind) -> Result<Self> {
        if hop_size == 0 || win_size == 0 || fft_size == 0 {
            return Err(Error::Data("stft params must be positive".into()));
        }
        if !(hop_size <= win_size && win_size <= fft_size) {
            return Err(Error::Data(format!(
                "need hop <= win <= fft, got hop={hop_size}, win={win_size}, fft={fft_size}"
            )));
        }
        let p = StftParams {
            fft_size,
            win_size,
            hop_size,
            window,
        };
        if !p.satisfies_cola() {
            return Err(Error::Data(format!(
                "window/hop pair does not satisfy COLA (win={win_size}, hop={hop_size})"
            )));
        }
        Ok(p)
    }

    /// The pipeline default: 64 ms window / 16 ms hop at 16 kHz.
    pub fn default_16k() -> Self {
        StftParams::new(1024, 1024, 256, WindowKind::Hann).expect("default params are COLA")
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Squared-window overlap-add must be bounded away from zero over the
    /// interior; checked numerically.
    fn satisfies_cola(&self) -> bool {
        let w = self.window.samples(self.win_size);
        // Accumulate w^2 shifted by every hop covering one window's interior.
        let span = 3 * self.win_size;
        let mut acc = vec![0.0f64; span];
        let mut start = 0usize;
        while start + self.win_size <= span {
            for (i, wv) in w.iter().enumerate() {
                acc[start + i] += wv * wv;
            }
            start += self.hop_size;
        }
        acc[self.win_size..2 * self.win_size]
            .iter()
            .all(|&v| v > 1e-3)
    }

    /// Frame count produced by `stft` under the center reflect-pad policy:
    /// `1 + floor((len + 2*(win/2) - win) / hop)`.
    pub fn num_frames(&self, len: usize) -> usize {
        let padded = len + 2 * (self.win_size / 2);
        1 + (padded - self.win_size) / self.hop_size
    }
}

/// Complex STFT: frames x (fft_size/2 + 1) bins.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Non-negative magnitude spectrogram: frames x bins.
#[derive(Debug, Clone)]
pub struct MagnitudeSpectrogram {
    pub values: Array2<f64>,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl MagnitudeSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Mel spectrogram: frames x n_mels, carrying the analysis params it came from.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub n_mels: usize,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

/// Per-bin multiplicative gain in [0, 1]; same shape as the magnitude
/// spectrogram it multiplies.
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: Array2<f64>,
}

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("mask entries must lie in [0,1]".into()));
        }
        Ok(Mask { values })
    }
}

/// Elementwise modulus of a complex spectrogram.
pub fn magnitude(s: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        values: s.values.mapv(|c| c.norm()),
        params: s.params,
        sample_rate: s.sample_rate,
    }
}

/// Elementwise argument (phase) of a complex spectrogram.
pub fn phase(s: &ComplexSpectrogram) -> Array2<f64> {
    s.values.mapv(|c| c.arg())
}

/// Recombine magnitude and phase into a complex spectrogram.
pub fn from_mag_phase(
    m: &MagnitudeSpectrogram,
    phase: &Array2<f64>,
) -> Result<ComplexSpectrogram> {
    if m.values.dim() != phase.dim() {
        return Err(Error::Shape(format!(
            "magnitude {:?} vs phase {:?}",
            m.values.dim(),
            phase.dim()
        )));
    }
    let values = ndarray::Zip::from(&m.values)
        .and(phase)
        .map_collect(|&mag, &ph| Complex64::from_polar(mag, ph));
    Ok(ComplexSpectrogram {
        values,
        params: m.params,
        sample_rate: m.sample_rate,
    })
}

/// Apply a soft mask: out[i,j] = m[i,j] * k[i,j].
pub fn apply_mask(m: &MagnitudeSpectrogram, k: &Mask) -> Result<MagnitudeSpectrogram> {
    if m.values.dim() != k.values.dim() {
        return Err(Error::Shape(format!(
            "magnitude {:?} vs mask {:?}",
            m.values.dim(),
            k.values.dim()
        )));
    }
    Ok(MagnitudeSpectrogram {
        values: &m.values * &k.values,
        params: m.params,
        sample_rate: m.sample_rate,
    })
}

/// Keep every `factor`-th frame (stride decimation). frames' = ceil(frames/factor).
pub fn downsample_mel_time(mel: &MelSpectrogram, factor: usize) -> Result<MelSpectrogram> {
    if factor < 1 {
        return Err(Error::Data("downsample factor must be >= 1".into()));
    }
    let frames = mel.frames();
    let out_frames = frames.div_ceil(factor);
    let mut values = Array2::zeros((out_frames, mel.n_mels));
    for (o, i) in (0..frames).step_by(factor).enumerate() {
        values.row_mut(o).assign(&mel.values.row(i));
    }
    Ok(MelSpectrogram {
        values,
        n_mels: mel.n_mels,
        params: mel.params,
        sample_rate: mel.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn mag(values: Array2<f64>) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values,
            params: StftParams::default_16k(),
            sample_rate: 16_000,
        }
    }

    #[test]
    fn params_paper_defaults_match_ms() {
        // 64 ms window / 16 ms hop at 16 kHz <-> (1024, 1024, 256) samples.
        let p = StftParams::default_16k();
        assert_eq!(p.win_size as f64 / 16_000.0, 0.064);
        assert_eq!(p.hop_size as f64 / 16_000.0, 0.016);
        assert_eq!(p.bins(), 513);
    }

    #[test]
    fn non_cola_rejected() {
        // hop == win with a Hann window leaves gaps.
        assert!(StftParams::new(1024, 1024, 1024, WindowKind::Hann).is_err());
    }

    #[test]
    fn magnitude_examples() {
        let s = ComplexSpectrogram {
            values: arr2(&[[
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(3.0, 4.0),
            ]]),
            params: StftParams::default_16k(),
            sample_rate: 16_000,
        };
        let m = magnitude(&s);
        assert_eq!(m.values[[0, 0]], 1.0);
        assert_eq!(m.values[[0, 1]], 0.0);
        assert_eq!(m.values[[0, 2]], 5.0);
    }

    #[test]
    fn mask_application() {
        let m = mag(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let ones = Mask::new(Array2::ones((2, 2))).unwrap();
        let zeros = Mask::new(Array2::zeros((2, 2))).unwrap();
        let half = Mask::new(Array2::from_elem((2, 2), 0.5)).unwrap();
        assert_eq!(apply_mask(&m, &ones).unwrap().values, m.values);
        assert_eq!(
            apply_mask(&m, &zeros).unwrap().values,
            Array2::<f64>::zeros((2, 2))
        );
        assert_eq!(
            apply_mask(&m, &half).unwrap().values,
            arr2(&[[0.5, 1.0], [1.5, 2.0]])
        );
        let bad = Mask::new(Array2::ones((3, 2))).unwrap();
        assert!(apply_mask(&m, &bad).is_err());
    }

    #[test]
    fn mask_range_validated() {
        assert!(Mask::new(arr2(&[[1.5]])).is_err());
        assert!(Mask::new(arr2(&[[-0.1]])).is_err());
    }

    /// Elementwise multiplication equals a scalar triple-loop oracle bit-for-bit.
    #[test]
    fn mask_matches_loop_oracle() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let m = mag(Array2::from_shape_fn((4, 7), |_| next() * 3.0));
        let k = Mask::new(Array2::from_shape_fn((4, 7), |_| next())).unwrap();
        let out = apply_mask(&m, &k).unwrap();
        for i in 0..4 {
            for j in 0..7 {
                let expect = m.values[[i, j]] * k.values[[i, j]];
                assert_eq!(out.values[[i, j]], expect, "bit-exact at [{i},{j}]");
            }
        }
    }

    #[test]
    fn downsample_shapes() {
        let mel = MelSpectrogram {
            values: Array2::from_shape_fn((100, 80), |(i, j)| (i * 80 + j) as f64),
            n_mels: 80,
            params: StftParams::default_16k(),
            sample_rate: 16_000,
        };
        let d1 = downsample_mel_time(&mel, 1).unwrap();
        assert_eq!(d1.values, mel.values);
        let d4 = downsample_mel_time(&mel, 4).unwrap();
        assert_eq!(d4.frames(), 25);
        // Decimated content equals indexed selection.
        for o in 0..25 {
            assert_eq!(d4.values.row(o), mel.values.row(o * 4));
        }
        assert!(downsample_mel_time(&mel, 0).is_err());
        // 101 frames, factor 4 -> ceil = 26.
        let mel101 = MelSpectrogram {
            values: Array2::zeros((101, 80)),
            n_mels: 80,
            params: StftParams::default_16k(),
            sample_rate: 16_000,
        };
        assert_eq!(downsample_mel_time(&mel101, 4).unwrap().frames(), 26);
    }
}
