//! STFT analysis and weighted overlap-add synthesis.
//!
//! Analysis reflect-pads the signal by win/2 on both ends ("center" frames),
//! so frame f is centered on sample f*hop. Synthesis overlap-adds
//! window-weighted frames and divides by the accumulated squared window,
//! which inverts analysis exactly wherever that denominator is nonzero.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

use super::{ComplexSpectrogram, StftParams};

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    debug_assert!(n > pad);
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i]);
    }
    out.extend_from_slice(samples);
    for i in (0..pad).rev() {
        out.push(samples[n - 2 - i]);
    }
    out
}

pub fn stft(w: &Waveform, p: &StftParams) -> Result<ComplexSpectrogram> {
    if w.len() < p.win_size {
        return Err(Error::TooShort {
            got: w.len(),
            need: p.win_size,
        });
    }
    let pad = p.win_size / 2;
    let padded = reflect_pad(&w.samples, pad);
    let frames = 1 + (padded.len() - p.win_size) / p.hop_size;
    let bins = p.bins();
    let window = p.window.samples(p.win_size);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(p.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); p.fft_size];
    let mut values = Array2::zeros((frames, bins));

    for f in 0..frames {
        let start = f * p.hop_size;
        for i in 0..p.fft_size {
            buf[i] = if i < p.win_size {
                Complex64::new(padded[start + i] * window[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for b in 0..bins {
            values[[f, b]] = buf[b];
        }
    }

    Ok(ComplexSpectrogram {
        values,
        params: *p,
        sample_rate: w.sample_rate,
    })
}

/// Inverse STFT; returns `(frames - 1) * hop` samples aligned with the
/// original signal's start.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let len = (s.frames().saturating_sub(1)) * s.params.hop_size;
    istft_with_len(s, len)
}

/// Inverse STFT returning exactly `len` samples (trimming the center pad).
pub fn istft_with_len(s: &ComplexSpectrogram, len: usize) -> Result<Waveform> {
    let p = s.params;
    let frames = s.frames();
    if s.bins() != p.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, params imply {}",
            s.bins(),
            p.bins()
        )));
    }
    let pad = p.win_size / 2;
    let full_len = (frames - 1) * p.hop_size + p.win_size;
    if len + pad > full_len {
        return Err(Error::Data(format!(
            "requested {len} samples but synthesis covers only {}",
            full_len - pad
        )));
    }
    let window = p.window.samples(p.win_size);

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(p.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); p.fft_size];

    let mut acc = vec![0.0f64; full_len];
    let mut wsum = vec![0.0f64; full_len];
    let bins = s.bins();

    for f in 0..frames {
        // Rebuild the full spectrum from the half-spectrum (real signal).
        buf[0] = s.values[[f, 0]];
        for b in 1..bins {
            buf[b] = s.values[[f, b]];
            if b < p.fft_size - b {
                buf[p.fft_size - b] = s.values[[f, b]].conj();
            }
        }
        ifft.process(&mut buf);
        let start = f * p.hop_size;
        let scale = 1.0 / p.fft_size as f64;
        for i in 0..p.win_size {
            let v = buf[i].re * scale;
            acc[start + i] += v * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }

    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let j = pad + i;
        let d = wsum[j];
        samples.push(if d > 1e-9 { acc[j] / d } else { 0.0 });
    }
    Waveform::new(samples, s.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::dsp::WindowKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| {
                    (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()
                        * 0.5
                })
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn silence_gives_zero_matrix_with_fixed_frame_count() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let p = StftParams::default_16k();
        let s = stft(&w, &p).unwrap();
        // Center-pad policy: frames = 1 + floor((len + 2*(win/2) - win)/hop).
        assert_eq!(s.frames(), p.num_frames(16_000));
        assert_eq!(s.frames(), 63);
        assert_eq!(s.bins(), 513);
        assert!(s.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn too_short_rejected() {
        let w = Waveform::new(vec![0.0; 512], SAMPLE_RATE).unwrap();
        match stft(&w, &StftParams::default_16k()) {
            Err(Error::TooShort { got: 512, need: 1024 }) => {}
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn linearity() {
        let w = tone(440.0, 0.3);
        let p = StftParams::default_16k();
        let a = 3.7;
        let scaled = Waveform::new(w.samples.iter().map(|s| a * s).collect(), SAMPLE_RATE).unwrap();
        let s1 = stft(&w, &p).unwrap();
        let s2 = stft(&scaled, &p).unwrap();
        let mut max_rel: f64 = 0.0;
        let norm = s1.values.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        for (c1, c2) in s1.values.iter().zip(s2.values.iter()) {
            let dev = (c2 - c1 * a).norm() / norm;
            max_rel = max_rel.max(dev);
        }
        assert!(max_rel < 1e-6, "linearity deviation {max_rel}");
    }

    #[test]
    fn round_trip_tone() {
        let w = tone(440.0, 1.0);
        let p = StftParams::default_16k();
        let s = stft(&w, &p).unwrap();
        let r = istft_with_len(&s, w.len()).unwrap();
        let max_err = w
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-6, "round-trip max abs error {max_err}");
    }

    #[test]
    fn round_trip_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Waveform::new(
            (0..12_000).map(|_| rng.gen_range(-0.8..0.8)).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let p = StftParams::default_16k();
        let r = istft_with_len(&stft(&w, &p).unwrap(), w.len()).unwrap();
        let num: f64 = w
            .samples
            .iter()
            .zip(&r.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = w.samples.iter().map(|a| a * a).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 1e-6, "relative L2 error {rel}");
    }

    #[test]
    fn zero_spectrogram_gives_zero_waveform() {
        let p = StftParams::default_16k();
        let s = ComplexSpectrogram {
            values: ndarray::Array2::zeros((20, p.bins())),
            params: p,
            sample_rate: SAMPLE_RATE,
        };
        let w = istft(&s).unwrap();
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    /// Round trip over many random signals and a couple of COLA param sets.
    #[test]
    fn round_trip_many_random_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = [
            StftParams::default_16k(),
            StftParams::new(512, 512, 128, WindowKind::Hann).unwrap(),
        ];
        for trial in 0..50 {
            let p = params[trial % params.len()];
            let n = rng.gen_range(p.win_size + 1..6000);
            let w = Waveform::new(
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                SAMPLE_RATE,
            )
            .unwrap();
            let r = istft_with_len(&stft(&w, &p).unwrap(), w.len()).unwrap();
            let num: f64 = w
                .samples
                .iter()
                .zip(&r.samples)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let den: f64 = w.samples.iter().map(|a| a * a).sum();
            let rel = (num / den).sqrt();
            assert!(rel < 1e-6, "trial {trial}: relative L2 error {rel}");
        }
    }
}
