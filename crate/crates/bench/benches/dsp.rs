//! Criterion benchmarks for the hot DSP and model kernels.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bgmtts_core::audio::Waveform;
use bgmtts_core::dsp::{
    griffin_lim, istft, magnitude, mel_project, stft, StftParams, WindowKind,
};
use bgmtts_core::musicfilter::{MusicFilter, MusicFilterConfig};

fn test_wave(secs: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (16_000.0 * secs) as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            0.4 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                + 0.2 * (2.0 * std::f64::consts::PI * 683.0 * t).sin()
                + 0.05 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(samples, 16_000).unwrap()
}

fn bench_dsp(c: &mut Criterion) {
    let p = StftParams::default_16k();
    let w = test_wave(2.0, 1);
    let spec = stft(&w, &p).unwrap();
    let mag = magnitude(&spec);

    c.bench_function("stft_2s", |b| b.iter(|| stft(&w, &p).unwrap()));
    c.bench_function("istft_2s", |b| b.iter(|| istft(&spec).unwrap()));
    c.bench_function("mel_project_80", |b| {
        b.iter(|| mel_project(&mag, 80, 0.0, 8000.0).unwrap())
    });
    c.bench_function("griffin_lim_10it", |b| {
        b.iter(|| griffin_lim(&mag, 10, 0).unwrap())
    });
}

fn bench_filter(c: &mut Criterion) {
    let p = StftParams::new(512, 512, 128, WindowKind::Hann).unwrap();
    let w = test_wave(1.0, 2);
    let mag = magnitude(&stft(&w, &p).unwrap());
    let filter = MusicFilter::new(MusicFilterConfig::toy(p.bins()), 0);
    c.bench_function("predict_mask_toy_1s", |b| {
        b.iter(|| filter.predict_mask(&mag).unwrap())
    });
}

criterion_group!(benches, bench_dsp, bench_filter);
criterion_main!(benches);
