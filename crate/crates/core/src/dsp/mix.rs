//! SNR-calibrated mixing of speech with background music.
//!
//! Speech power is measured over the active region found by a -40 dBFS
//! energy VAD on 32 ms frames, so long pauses do not bias the gain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const VAD_FRAME_S: f64 = 0.032;
const VAD_THRESHOLD_DBFS: f64 = -40.0;

/// Per-sample activity mask from the energy VAD.
pub fn active_sample_mask(w: &Waveform) -> Vec<bool> {
    let frame = ((w.sample_rate as f64 * VAD_FRAME_S) as usize).max(1);
    let mut mask = vec![false; w.len()];
    let thresh = 10f64.powf(VAD_THRESHOLD_DBFS / 10.0);
    let mut start = 0;
    while start < w.len() {
        let end = (start + frame).min(w.len());
        let p = w.samples[start..end].iter().map(|s| s * s).sum::<f64>() / (end - start) as f64;
        if p > thresh {
            mask[start..end].fill(true);
        }
        start = end;
    }
    mask
}

fn masked_power(samples: &[f64], mask: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (s, &m) in samples.iter().zip(mask) {
        if m {
            sum += s * s;
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

/// SNR in dB between speech and (already scaled) music over the speech's
/// active region.
pub fn measure_snr(speech: &Waveform, scaled_music: &Waveform) -> Result<f64> {
    if speech.sample_rate != scaled_music.sample_rate {
        return Err(Error::SampleRate {
            expected: speech.sample_rate,
            got: scaled_music.sample_rate,
        });
    }
    if speech.len() != scaled_music.len() {
        return Err(Error::Shape(format!(
            "speech {} vs music {} samples",
            speech.len(),
            scaled_music.len()
        )));
    }
    let mask = active_sample_mask(speech);
    let (ps, n) = masked_power(&speech.samples, &mask);
    if n == 0 || ps <= 0.0 {
        return Err(Error::Silent("speech has no active region".into()));
    }
    let (pn, _) = masked_power(&scaled_music.samples, &mask);
    if pn <= 0.0 {
        return Err(Error::Silent("music power is zero over active region".into()));
    }
    Ok(10.0 * (ps / pn).log10())
}

/// Crop or loop the music (seeded) to the speech length.
fn fit_music(music: &Waveform, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = music.len();
    if m >= len {
        let start = rng.gen_range(0..=(m - len));
        music.samples[start..start + len].to_vec()
    } else {
        let offset = rng.gen_range(0..m);
        (0..len).map(|i| music.samples[(offset + i) % m]).collect()
    }
}

/// Mix music under speech at the requested SNR. Returns the mixture and the
/// scaled music component; `mixture = speech + g * music` with
/// `g = sqrt(P_s / (P_n * 10^(snr/10)))` measured over the speech's active
/// region.
pub fn mix_at_snr(
    speech: &Waveform,
    music: &Waveform,
    snr_db: f64,
    seed: u64,
) -> Result<(Waveform, Waveform)> {
    if speech.sample_rate != music.sample_rate {
        return Err(Error::SampleRate {
            expected: speech.sample_rate,
            got: music.sample_rate,
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::Data(format!("snr_db must be finite, got {snr_db}")));
    }
    if speech.is_empty() || music.is_empty() {
        return Err(Error::Silent("empty speech or music".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fitted = fit_music(music, speech.len(), &mut rng);

    let mask = active_sample_mask(speech);
    let (ps, n_active) = masked_power(&speech.samples, &mask);
    if n_active == 0 || ps <= 0.0 {
        return Err(Error::Silent("speech is silent (no active VAD frames)".into()));
    }
    let (pn, _) = masked_power(&fitted, &mask);
    if pn <= 0.0 {
        return Err(Error::Silent("music is silent over the speech's active region".into()));
    }

    let g = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = fitted.iter().map(|s| g * s).collect();
    let mixture: Vec<f64> = speech
        .samples
        .iter()
        .zip(&scaled)
        .map(|(a, b)| a + b)
        .collect();
    Ok((
        Waveform::new(mixture, speech.sample_rate)?,
        Waveform::new(scaled, speech.sample_rate)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use rand::Rng;

    fn noise_burst(len: usize, amp: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.gen_range(-amp..amp)).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn zero_db_equalizes_powers() {
        let speech = noise_burst(16_000, 0.5, 1);
        let music = noise_burst(20_000, 0.2, 2);
        let (_, scaled) = mix_at_snr(&speech, &music, 0.0, 3).unwrap();
        let snr = measure_snr(&speech, &scaled).unwrap();
        assert!(snr.abs() < 0.1, "0 dB request measured {snr} dB");
    }

    #[test]
    fn snr_grid_within_tenth_db() {
        let speech = noise_burst(16_000, 0.5, 10);
        let music = noise_burst(8_000, 0.3, 11); // shorter: exercises looping
        for &snr_db in &[0.0, 5.0, 10.0, 15.0, 20.0] {
            let (mix, scaled) = mix_at_snr(&speech, &music, snr_db, 99).unwrap();
            let measured = measure_snr(&speech, &scaled).unwrap();
            assert!(
                (measured - snr_db).abs() < 0.1,
                "requested {snr_db}, measured {measured}"
            );
            // mixture = speech + scaled music exactly
            for i in 0..mix.len() {
                assert_eq!(mix.samples[i], speech.samples[i] + scaled.samples[i]);
            }
        }
    }

    #[test]
    fn silent_inputs_rejected() {
        let silence = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let speech = noise_burst(16_000, 0.5, 1);
        assert!(matches!(
            mix_at_snr(&silence, &speech, 0.0, 0),
            Err(Error::Silent(_))
        ));
        assert!(matches!(
            mix_at_snr(&speech, &silence, 0.0, 0),
            Err(Error::Silent(_))
        ));
    }

    #[test]
    fn infinite_snr_rejected() {
        let speech = noise_burst(16_000, 0.5, 1);
        let music = noise_burst(16_000, 0.5, 2);
        assert!(mix_at_snr(&speech, &music, f64::INFINITY, 0).is_err());
        // Very large finite SNR behaves as the g -> 0 limit.
        let (_, scaled) = mix_at_snr(&speech, &music, 200.0, 0).unwrap();
        assert!(scaled.power() < 1e-20);
    }

    #[test]
    fn deterministic_per_seed() {
        let speech = noise_burst(16_000, 0.5, 1);
        let music = noise_burst(40_000, 0.3, 2);
        let (a, _) = mix_at_snr(&speech, &music, 7.5, 123).unwrap();
        let (b, _) = mix_at_snr(&speech, &music, 7.5, 123).unwrap();
        assert_eq!(a.samples, b.samples);
        let (c, _) = mix_at_snr(&speech, &music, 7.5, 124).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn vad_ignores_long_pauses() {
        // Speech with a long silent tail; the gain must be computed over the
        // active half only.
        let mut samples = noise_burst(8_000, 0.5, 5).samples;
        samples.extend(std::iter::repeat(0.0).take(8_000));
        let speech = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let music = noise_burst(16_000, 0.3, 6);
        let (_, scaled) = mix_at_snr(&speech, &music, 10.0, 7).unwrap();
        let measured = measure_snr(&speech, &scaled).unwrap();
        assert!((measured - 10.0).abs() < 0.1, "measured {measured}");
    }
}
