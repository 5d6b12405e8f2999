//! Proxy quality metrics: scale-invariant SNR and log-spectral distance.

use crate::audio::Waveform;
use crate::error::{Error, Result};

use super::MagnitudeSpectrogram;

/// SI-SNR values are capped here (identity/perfect estimates would otherwise
/// be unbounded).
pub const SI_SNR_CAP_DB: f64 = 60.0;

/// Scale-invariant SNR in dB. Both signals are zero-meaned; the estimate is
/// decomposed against the projection onto the reference.
pub fn si_snr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "reference {} vs estimate {} samples",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Silent("empty reference".into()));
    }
    let n = reference.len() as f64;
    let mr = reference.samples.iter().sum::<f64>() / n;
    let me = estimate.samples.iter().sum::<f64>() / n;
    let r: Vec<f64> = reference.samples.iter().map(|s| s - mr).collect();
    let e: Vec<f64> = estimate.samples.iter().map(|s| s - me).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr <= 0.0 {
        return Err(Error::Silent("zero reference".into()));
    }
    let re: f64 = r.iter().zip(&e).map(|(a, b)| a * b).sum();
    let alpha = re / rr;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (rv, ev) in r.iter().zip(&e) {
        let t = alpha * rv;
        target += t * t;
        let d = ev - t;
        noise += d * d;
    }
    if noise <= target * 10f64.powf(-SI_SNR_CAP_DB / 10.0) {
        return Ok(SI_SNR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).min(SI_SNR_CAP_DB))
}

/// Log-spectral distance in dB: mean over frames of the RMS difference of
/// dB magnitudes, floored at -80 dB.
pub fn log_spectral_distance(a: &MagnitudeSpectrogram, b: &MagnitudeSpectrogram) -> Result<f64> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    let floor = 1e-4; // 20*log10(1e-4) = -80 dB
    let db = |v: f64| 20.0 * v.max(floor).log10();
    let mut total = 0.0;
    for (ra, rb) in a.values.rows().into_iter().zip(b.values.rows()) {
        let mse = ra
            .iter()
            .zip(rb.iter())
            .map(|(&x, &y)| {
                let d = db(x) - db(y);
                d * d
            })
            .sum::<f64>()
            / ra.len() as f64;
        total += mse.sqrt();
    }
    Ok(total / a.values.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::dsp::StftParams;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn identity_hits_cap() {
        let w = noise(4000, 1);
        assert_eq!(si_snr(&w, &w).unwrap(), SI_SNR_CAP_DB);
    }

    #[test]
    fn scale_invariance() {
        let w = noise(4000, 2);
        let doubled = Waveform::new(w.samples.iter().map(|s| 2.0 * s).collect(), SAMPLE_RATE).unwrap();
        assert_eq!(si_snr(&w, &doubled).unwrap(), SI_SNR_CAP_DB);
        // A noisy estimate keeps the same score under positive scaling.
        let noisy = Waveform::new(
            w.samples
                .iter()
                .zip(&noise(4000, 3).samples)
                .map(|(a, b)| a + 0.2 * b)
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let scaled = Waveform::new(noisy.samples.iter().map(|s| 3.5 * s).collect(), SAMPLE_RATE).unwrap();
        let s1 = si_snr(&w, &noisy).unwrap();
        let s2 = si_snr(&w, &scaled).unwrap();
        assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
    }

    #[test]
    fn zero_reference_rejected() {
        let z = Waveform::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        let w = noise(100, 4);
        assert!(matches!(si_snr(&z, &w), Err(Error::Silent(_))));
    }

    #[test]
    fn lsd_identity_and_symmetry() {
        let p = StftParams::default_16k();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = MagnitudeSpectrogram {
            values: Array2::from_shape_fn((8, p.bins()), |_| rng.gen_range(0.0..2.0)),
            params: p,
            sample_rate: SAMPLE_RATE,
        };
        let mut b = a.clone();
        b.values *= 2.0;
        assert_eq!(log_spectral_distance(&a, &a).unwrap(), 0.0);
        // Uniform x2 amplitude = +6.02 dB everywhere... except floored bins.
        let d = log_spectral_distance(&a, &b).unwrap();
        assert!(d > 5.0 && d < 7.0, "lsd {d}");
    }
}
