//! Dataset construction: manifests, text normalization and encoding,
//! SNR-controlled mixing over a corpus, clean/noisy-hours splits, and
//! file-level filtering.
//!
//! A manifest is JSON Lines, one [`UtteranceRecord`] per line, with audio
//! paths relative to the manifest's directory.

pub mod toy;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::audio::{read_wav, write_wav, Waveform};
use crate::dsp;
use crate::error::{Error, Result};

/// Clean / noisy / filtered supervision label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QualityLabel {
    Clean,
    Noisy,
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Test,
}

/// One utterance in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: String,
    pub transcript: String,
    pub quality: QualityLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub duration_s: f64,
    pub split: Split,
}

impl UtteranceRecord {
    fn validate(&self) -> Result<()> {
        if self.duration_s <= 0.0 {
            return Err(Error::Data(format!("{}: non-positive duration", self.id)));
        }
        match (self.quality, self.snr_db) {
            (QualityLabel::Clean, Some(_)) => Err(Error::Data(format!(
                "{}: CLEAN records must not carry snr_db",
                self.id
            ))),
            (QualityLabel::Noisy | QualityLabel::Filtered, None) => Err(Error::Data(format!(
                "{}: {:?} records must carry snr_db",
                self.id, self.quality
            ))),
            _ => Ok(()),
        }
    }
}

/// Write a JSONL manifest. Records are emitted in order, one per line.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(&r.id) {
            return Err(Error::Data(format!("duplicate utterance id {}", r.id)));
        }
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(format!("encode: {e}")))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.validate()?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::Data(format!("duplicate utterance id {}", r.id)));
        }
        records.push(r);
    }
    Ok(records)
}

/// Resolve a record's audio path against the manifest location.
pub fn resolve_audio(manifest_path: &Path, record: &UtteranceRecord) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&record.audio_path)
}

// ---- text ----

/// Lowercase, NFC-normalize, and collapse runs of whitespace to one space.
pub fn normalize_text(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.trim().chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Character vocabulary with reserved padding (index 0) and end-of-sequence
/// (index 1) symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharVocabulary {
    symbols: Vec<char>,
}

pub const PAD_INDEX: usize = 0;
pub const EOS_INDEX: usize = 1;

impl CharVocabulary {
    /// Build from an explicit symbol list (padding/EOS are added here).
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Self {
        let mut out = vec!['\u{0}', '\u{3}']; // PAD, EOS placeholders
        let seen: BTreeSet<char> = symbols.into_iter().collect();
        out.extend(seen);
        CharVocabulary { symbols: out }
    }

    /// Scan a corpus's transcripts.
    pub fn from_records(records: &[UtteranceRecord]) -> Self {
        CharVocabulary::from_symbols(
            records
                .iter()
                .flat_map(|r| normalize_text(&r.transcript).chars().collect::<Vec<_>>()),
        )
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    /// True when only the reserved PAD/EOS symbols are present.
    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 2
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols[2..].iter().position(|&s| s == c).map(|i| i + 2)
    }

    /// Encode normalized text to indices, appending EOS.
    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        let normalized = normalize_text(s);
        let mut out = Vec::with_capacity(normalized.chars().count() + 1);
        let mut unknown = BTreeSet::new();
        for c in normalized.chars() {
            match self.index_of(c) {
                Some(i) => out.push(i),
                None => {
                    unknown.insert(c);
                }
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Data(format!(
                "unknown symbols in {s:?}: {:?}",
                unknown.into_iter().collect::<String>()
            )));
        }
        out.push(EOS_INDEX);
        Ok(out)
    }

    /// Inverse of `encode` (drops PAD/EOS).
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= 2 && i < self.symbols.len())
            .map(|&i| self.symbols[i])
            .collect()
    }
}

// ---- corpus builds ----

/// Mix every clean utterance with a randomly chosen music file at an SNR
/// drawn uniformly from `[snr_lo, snr_hi]` dB. Writes noisy WAVs next to the
/// output manifest and returns the records.
pub fn build_mixed_corpus(
    clean_manifest: &Path,
    music_dir: &Path,
    snr_lo: f64,
    snr_hi: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<UtteranceRecord>> {
    if snr_lo > snr_hi {
        return Err(Error::Usage(format!("snr range inverted: [{snr_lo}, {snr_hi}]")));
    }
    let records = read_manifest(clean_manifest)?;
    let mut music_files: Vec<PathBuf> = std::fs::read_dir(music_dir)
        .map_err(|e| Error::io(music_dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    music_files.sort();
    if music_files.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", music_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let music: Vec<Waveform> = music_files
        .iter()
        .map(|p| read_wav(p))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let clean = read_wav(&resolve_audio(clean_manifest, r))?;
        let snr_db = rng.gen_range(snr_lo..=snr_hi);
        let choice = rng.gen_range(0..music.len());
        let mix_seed = rng.gen::<u64>();
        let (mut mixture, _) = dsp::mix_at_snr(&clean, &music[choice], snr_db, mix_seed)?;
        mixture.clamp_peak(0.99);
        let file = format!("{}_noisy.wav", r.id);
        write_wav(&out_dir.join(&file), &mixture)?;
        out.push(UtteranceRecord {
            id: r.id.clone(),
            audio_path: file,
            transcript: r.transcript.clone(),
            quality: QualityLabel::Noisy,
            snr_db: Some(snr_db),
            duration_s: mixture.duration_s(),
            split: r.split,
        });
    }
    Ok(out)
}

/// Partition a clean corpus: hold out 1% as TEST, truncate the remainder to
/// `total_hours`, and mark roughly `clean_hours` of it CLEAN; the rest is
/// labelled for the noisy/filtered stream (as NOISY with a placeholder SNR
/// filled in by the mixing step).
pub fn split_by_clean_hours(
    records: &[UtteranceRecord],
    clean_hours: f64,
    total_hours: f64,
    seed: u64,
) -> Result<Vec<UtteranceRecord>> {
    if !(clean_hours > 0.0 && clean_hours < total_hours) {
        return Err(Error::Usage(format!(
            "need 0 < clean_hours < total_hours, got {clean_hours} / {total_hours}"
        )));
    }
    let mut pool: Vec<UtteranceRecord> = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let n_test = (pool.len() / 100).max(1);
    if pool.len() <= n_test {
        return Err(Error::Data("corpus too small to hold out a test set".into()));
    }
    let mut out = Vec::with_capacity(pool.len());
    let mut clean_acc = 0.0;
    let mut total_acc = 0.0;
    let clean_target = clean_hours * 3600.0;
    let total_target = total_hours * 3600.0;
    for (i, mut r) in pool.into_iter().enumerate() {
        if i < n_test {
            r.split = Split::Test;
            r.quality = QualityLabel::Clean;
            r.snr_db = None;
            out.push(r);
            continue;
        }
        if total_acc >= total_target {
            break;
        }
        total_acc += r.duration_s;
        r.split = Split::Train;
        if clean_acc < clean_target {
            clean_acc += r.duration_s;
            r.quality = QualityLabel::Clean;
            r.snr_db = None;
        } else {
            r.quality = QualityLabel::Noisy;
            r.snr_db = Some(0.0); // placeholder until mixed
        }
        out.push(r);
    }
    let max_dur = out.iter().map(|r| r.duration_s).fold(0.0, f64::max);
    if clean_acc + max_dur < clean_target || total_acc + max_dur < total_target {
        return Err(Error::Data(format!(
            "insufficient data: got {clean_acc:.1}s clean / {total_acc:.1}s total, requested {clean_target:.1}s / {total_target:.1}s"
        )));
    }
    Ok(out)
}

/// Run a waveform-level filter over every record, writing FILTERED audio and
/// records to `out_dir`.
pub fn filter_corpus(
    noisy_manifest: &Path,
    out_dir: &Path,
    filter: &dyn Fn(&Waveform) -> Result<Waveform>,
) -> Result<Vec<UtteranceRecord>> {
    let records = read_manifest(noisy_manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let noisy = read_wav(&resolve_audio(noisy_manifest, r))?;
        let mut filtered = filter(&noisy)?;
        filtered.clamp_peak(0.99);
        let file = format!("{}_filtered.wav", r.id);
        write_wav(&out_dir.join(&file), &filtered)?;
        out.push(UtteranceRecord {
            id: r.id.clone(),
            audio_path: file,
            transcript: r.transcript.clone(),
            quality: QualityLabel::Filtered,
            snr_db: r.snr_db,
            duration_s: filtered.duration_s(),
            split: r.split,
        });
    }
    Ok(out)
}
