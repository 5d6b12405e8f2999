//! Griffin-Lim phase estimation by alternating projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};

use super::{from_mag_phase, istft, magnitude, stft, MagnitudeSpectrogram};

/// Run Griffin-Lim and return the final waveform.
pub fn griffin_lim(m: &MagnitudeSpectrogram, iters: usize, seed: u64) -> Result<Waveform> {
    griffin_lim_with_residuals(m, iters, seed).map(|(w, _)| w)
}

/// Griffin-Lim with the per-iteration spectral-convergence residual
/// `||STFT(x)| - m|| / ||m||`.
pub fn griffin_lim_with_residuals(
    m: &MagnitudeSpectrogram,
    iters: usize,
    seed: u64,
) -> Result<(Waveform, Vec<f64>)> {
    if iters < 1 {
        return Err(Error::Data("griffin_lim needs iters >= 1".into()));
    }
    let target_norm = m.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out_len = (m.frames().saturating_sub(1)) * m.params.hop_size;
    if target_norm == 0.0 {
        // All-zero target: the zero waveform is the exact solution.
        return Ok((
            Waveform::new(vec![0.0; out_len], m.sample_rate)?,
            vec![0.0; iters],
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase = m
        .values
        .mapv(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));

    let mut wave = None;
    let mut residuals = Vec::with_capacity(iters);
    for _ in 0..iters {
        let spec = from_mag_phase(m, &phase)?;
        let x = istft(&spec)?;
        let s = stft(&x, &m.params)?;
        let est = magnitude(&s);
        let resid = (&est.values - &m.values)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            / target_norm;
        residuals.push(resid);
        phase = super::phase(&s);
        wave = Some(x);
    }
    Ok((wave.unwrap(), residuals))
}
