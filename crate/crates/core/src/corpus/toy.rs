//! Seeded toy corpora so the whole pipeline runs with zero licensed data.
//!
//! "Speech" is a synthetic ten-symbol language: each character maps to a
//! fixed formant triple, an utterance is the concatenation of 80 ms character
//! segments, and the transcript is exactly the character string. That makes
//! text-to-audio alignment genuinely learnable at desk scale. "Music" is
//! harmonic chord beds plus drum-like noise transients.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

use super::{write_manifest, QualityLabel, Split, UtteranceRecord};

/// Symbols of the toy language (plus space, which maps to near-silence).
pub const TOY_SYMBOLS: &str = "abcdefghij";

/// Seconds of audio per character.
pub const CHAR_DURATION_S: f64 = 0.08;

#[derive(Debug, Clone)]
pub struct ToySpeechConfig {
    pub n_utterances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
    /// The last `n_test` utterances are marked as the held-out TEST split.
    pub n_test: usize,
}

impl Default for ToySpeechConfig {
    fn default() -> Self {
        ToySpeechConfig {
            n_utterances: 60,
            min_chars: 6,
            max_chars: 12,
            seed: 0,
            n_test: 0,
        }
    }
}

/// Formant frequencies for one character of the toy language.
fn char_formants(c: char) -> [f64; 3] {
    let k = (c as u8 - b'a') as f64;
    [260.0 + 55.0 * k, 1100.0 + 140.0 * k, 2900.0 + 90.0 * k]
}

/// Render one character segment with a raised-cosine amplitude envelope so
/// segment joins are smooth.
fn render_char(c: char, rng: &mut ChaCha8Rng, phase_seed: f64) -> Vec<f64> {
    let n = (CHAR_DURATION_S * SAMPLE_RATE as f64) as usize;
    if c == ' ' {
        return (0..n).map(|_| rng.gen_range(-1e-4..1e-4)).collect();
    }
    let formants = char_formants(c);
    let amps = [0.5, 0.3, 0.18];
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
            let mut s = 0.0;
            for (f, a) in formants.iter().zip(amps) {
                s += a * (2.0 * std::f64::consts::PI * f * t + phase_seed).sin();
            }
            // A little noise keeps utterances from being bit-identical.
            s += rng.gen_range(-0.01..0.01);
            0.6 * env * s
        })
        .collect()
}

/// Synthesize the waveform for a transcript of toy-language text.
pub fn render_transcript(text: &str, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for c in text.chars() {
        if c != ' ' && !TOY_SYMBOLS.contains(c) {
            return Err(Error::Data(format!("character {c:?} not in toy language")));
        }
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        samples.extend(render_char(c, &mut rng, phase));
    }
    Waveform::new(samples, SAMPLE_RATE)
}

fn random_transcript(rng: &mut ChaCha8Rng, min_chars: usize, max_chars: usize) -> String {
    let len = rng.gen_range(min_chars..=max_chars);
    let symbols: Vec<char> = TOY_SYMBOLS.chars().collect();
    let mut out = String::with_capacity(len);
    for i in 0..len {
        if i > 0 && i + 1 < len && rng.gen_bool(0.12) && !out.ends_with(' ') {
            out.push(' ');
        } else {
            out.push(symbols[rng.gen_range(0..symbols.len())]);
        }
    }
    out
}

/// Generate a clean toy speech corpus: WAVs plus a `clean.jsonl` manifest in
/// `dir`. Returns the records.
pub fn generate_speech_corpus(dir: &Path, cfg: &ToySpeechConfig) -> Result<Vec<UtteranceRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_utterances);
    for i in 0..cfg.n_utterances {
        let transcript = random_transcript(&mut rng, cfg.min_chars, cfg.max_chars);
        let wav_seed = rng.gen::<u64>();
        let w = render_transcript(&transcript, wav_seed)?;
        let file = format!("utt{i:04}.wav");
        write_wav(&dir.join(&file), &w)?;
        records.push(UtteranceRecord {
            id: format!("utt{i:04}"),
            audio_path: file,
            transcript,
            quality: QualityLabel::Clean,
            snr_db: None,
            duration_s: w.duration_s(),
            split: if i + cfg.n_test >= cfg.n_utterances {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    write_manifest(&dir.join("clean.jsonl"), &records)?;
    Ok(records)
}

/// Generate `n` music WAVs (chord beds + drum transients) in `dir`.
pub fn generate_music_corpus(dir: &Path, n: usize, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = [196.0, 220.0, 246.9, 261.6, 293.7, 329.6, 349.2];
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let secs = rng.gen_range(2.0..4.0);
        let len = (secs * SAMPLE_RATE as f64) as usize;
        let mut samples = vec![0.0f64; len];
        // Chord bed: progression of triads, each held half a second.
        let chord_len = SAMPLE_RATE as usize / 2;
        let mut start = 0;
        while start < len {
            let root = scale[rng.gen_range(0..scale.len())];
            let notes = [root, root * 1.25, root * 1.5];
            let end = (start + chord_len).min(len);
            for (j, s) in samples[start..end].iter_mut().enumerate() {
                let t = j as f64 / SAMPLE_RATE as f64;
                for &f in &notes {
                    for h in 1..=3 {
                        *s += 0.08 / h as f64
                            * (2.0 * std::f64::consts::PI * f * h as f64 * t).sin();
                    }
                }
            }
            start = end;
        }
        // Drum-like transients every quarter second: decaying noise bursts.
        let beat = SAMPLE_RATE as usize / 4;
        let mut pos = 0;
        while pos < len {
            let burst = (SAMPLE_RATE as usize / 50).min(len - pos);
            for j in 0..burst {
                let decay = (-8.0 * j as f64 / burst as f64).exp();
                samples[pos + j] += 0.4 * decay * rng.gen_range(-1.0..1.0);
            }
            pos += beat;
        }
        let mut w = Waveform::new(samples, SAMPLE_RATE)?;
        w.clamp_peak(0.9);
        let path = dir.join(format!("music{i:02}.wav"));
        write_wav(&path, &w)?;
        paths.push(path);
    }
    Ok(paths)
}
