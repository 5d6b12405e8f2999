//! Mono PCM waveforms and RIFF WAV I/O.
//!
//! The whole pipeline runs at 16 kHz mono; files with a different rate or
//! channel count are rejected rather than resampled.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// The fixed sample rate of the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("waveform contains NaN/Inf".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power over all samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    /// Peak-normalize in place to the given absolute amplitude if the
    /// current peak exceeds it.
    pub fn clamp_peak(&mut self, peak: f64) {
        let max = self
            .samples
            .iter()
            .fold(0.0_f64, |acc, s| acc.max(s.abs()));
        if max > peak {
            let g = peak / max;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }
}

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a RIFF WAV file. Only 16-bit signed PCM, mono, 16 kHz is accepted.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hdr = [0u8; 12];
    read_exact_or(path, &mut f, &mut hdr)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Data(format!("{}: not a RIFF/WAVE file", path.display())));
    }

    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut channels = 0u16;
    let mut format = 0u16;
    let mut data: Option<Vec<u8>> = None;

    loop {
        let mut chdr = [0u8; 8];
        match f.read_exact(&mut chdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        }
        let id = &chdr[0..4];
        let size = u32::from_le_bytes(chdr[4..8].try_into().unwrap()) as usize;
        let mut body = vec![0u8; size + (size & 1)];
        read_exact_or(path, &mut f, &mut body)?;
        body.truncate(size);
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Data(format!("{}: truncated fmt chunk", path.display())));
                }
                format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
            }
            b"data" => data = Some(body),
            _ => {}
        }
    }

    if format != 1 || bits != 16 {
        return Err(Error::Data(format!(
            "{}: only 16-bit PCM supported (format {format}, {bits} bits)",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(Error::Data(format!(
            "{}: only mono supported, got {channels} channels",
            path.display()
        )));
    }
    if sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE,
            got: sample_rate,
        });
    }
    let data = data.ok_or_else(|| Error::Data(format!("{}: no data chunk", path.display())))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Write a 16-bit PCM mono WAV file. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}
