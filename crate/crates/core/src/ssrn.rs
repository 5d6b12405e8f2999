//! Spectrogram super-resolution: maps a coarse (time-downsampled) mel
//! spectrogram to the full linear-frequency magnitude spectrogram that the
//! phase-reconstruction stage consumes.
//!
//! Both input and output live in normalized [0,1] log-amplitude space; the
//! model stores the normalization statistics it was trained with so callers
//! can denormalize its predictions.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::corpus::{read_manifest, resolve_audio, Split};
use crate::dsp::{
    downsample_mel_time, magnitude, mel_project, stft, LogNormStats, StftParams,
};
use crate::error::{Error, Result};
use crate::gsttts::{tts_loss_graph, MEL_FMAX, MEL_FMIN};
use crate::nn::{Adam, AdamConfig, Binding, Checkpoint, Conv1d, Graph, ParamSet, Tensor};

/// Network shape for the super-resolution model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsrnConfig {
    pub n_mels: usize,
    /// Output frequency bins (fft_size/2 + 1).
    pub bins: usize,
    pub channels: usize,
    /// Convolution layers before the temporal upsampling.
    pub pre_layers: usize,
    /// Convolution layers after the upsampling.
    pub post_layers: usize,
    pub kernel: usize,
    pub max_dilation: usize,
    /// Temporal upsampling factor; matches the text-to-mel downsampling.
    pub factor: usize,
    /// Waveform resampling ratios used as stand-ins for distinct speakers
    /// when training on a single-voice corpus; 1.0 is the unmodified voice.
    pub speaker_variants: Vec<f64>,
}

impl Default for SsrnConfig {
    fn default() -> Self {
        SsrnConfig {
            n_mels: 80,
            bins: 513,
            channels: 64,
            pre_layers: 3,
            post_layers: 3,
            kernel: 3,
            max_dilation: 4,
            factor: 4,
            speaker_variants: vec![1.0, 0.9, 1.1],
        }
    }
}

impl SsrnConfig {
    /// Small shape for toy runs and gradient checks.
    pub fn toy(n_mels: usize, bins: usize) -> Self {
        SsrnConfig {
            n_mels,
            bins,
            channels: 24,
            pre_layers: 2,
            post_layers: 2,
            ..Default::default()
        }
    }

    fn dilations(&self, layers: usize) -> Vec<usize> {
        (0..layers).map(|l| (1usize << l).min(self.max_dilation)).collect()
    }
}

struct Net {
    input: Conv1d,
    pre: Vec<Conv1d>,
    post: Vec<Conv1d>,
    head: Conv1d,
}

/// Super-resolution model with its parameters and normalization statistics.
pub struct Ssrn {
    pub config: SsrnConfig,
    pub params: ParamSet,
    /// Normalization of the coarse mel inputs.
    pub mel_stats: LogNormStats,
    /// Normalization of the linear magnitude targets.
    pub lin_stats: LogNormStats,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct SsrnExtra {
    mel_stats: LogNormStats,
    lin_stats: LogNormStats,
}

impl Ssrn {
    pub fn new(
        config: SsrnConfig,
        mel_stats: LogNormStats,
        lin_stats: LogNormStats,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = config.channels;
        let input = Conv1d::new(&mut params, "in", config.n_mels, c, 1, 1, false, &mut rng);
        let pre = config
            .dilations(config.pre_layers)
            .into_iter()
            .enumerate()
            .map(|(l, d)| Conv1d::new(&mut params, &format!("pre{l}"), c, c, config.kernel, d, false, &mut rng))
            .collect();
        let post = config
            .dilations(config.post_layers)
            .into_iter()
            .enumerate()
            .map(|(l, d)| Conv1d::new(&mut params, &format!("post{l}"), c, c, config.kernel, d, false, &mut rng))
            .collect();
        let head = Conv1d::new(&mut params, "head", c, config.bins, 1, 1, false, &mut rng);
        Ssrn {
            config,
            params,
            mel_stats,
            lin_stats,
            net: Net {
                input,
                pre,
                post,
                head,
            },
        }
    }

    /// Build the prediction logits into the graph. `mel` is `[frames x
    /// n_mels]` normalized; the result is `[bins, frames * factor]`.
    fn logits_graph(&self, g: &mut Graph, bind: &Binding, mel: &Array2<f64>) -> Result<Tensor> {
        if mel.ncols() != self.config.n_mels {
            return Err(Error::Shape(format!(
                "input has {} mel bands, config expects {}",
                mel.ncols(),
                self.config.n_mels
            )));
        }
        if mel.nrows() == 0 {
            return Err(Error::Data("input mel has zero frames".into()));
        }
        let x = g.leaf(mel.t().to_owned().into_dyn()); // [n_mels, T]
        let mut h = self.net.input.forward(g, bind, x);
        h = g.relu(h);
        for conv in &self.net.pre {
            let mut y = conv.forward(g, bind, h);
            y = g.relu(y);
            h = g.add(h, y);
        }
        h = g.repeat_cols(h, self.config.factor); // [c, T*factor]
        for conv in &self.net.post {
            let mut y = conv.forward(g, bind, h);
            y = g.relu(y);
            h = g.add(h, y);
        }
        Ok(self.net.head.forward(g, bind, h)) // [bins, T*factor]
    }

    /// Predict the normalized linear magnitude `[frames * factor x bins]`,
    /// values in (0,1).
    pub fn forward(&self, mel: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let logits = self.logits_graph(&mut g, &bind, mel)?;
        let out = g.sigmoid(logits);
        Ok(g
            .value(out)
            .t()
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("output is 2-d"))
    }

    /// Training loss: reconstruction terms against a normalized linear
    /// magnitude target `[frames x bins]`. The prediction is truncated to
    /// the target's frame count (upsampling rounds up).
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        mel: &Array2<f64>,
        target: &Array2<f64>,
    ) -> Result<(Tensor, Tensor)> {
        let logits = self.logits_graph(g, bind, mel)?;
        let full = g.value(logits).shape()[1];
        if target.nrows() > full {
            return Err(Error::Shape(format!(
                "target has {} frames but the model produces only {}",
                target.nrows(),
                full
            )));
        }
        let trimmed = g.slice_axis(logits, 1, 0, target.nrows());
        tts_loss_graph(g, trimmed, &target.t().to_owned())
    }

    // ---- persistence ----

    pub fn to_checkpoint(&self, step: u64, adam: Option<&Adam>) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(
            "ssrn",
            serde_json::to_value(&self.config).expect("config serializes"),
            step,
            &self.params,
            adam,
        );
        ckpt.extra = serde_json::to_value(SsrnExtra {
            mel_stats: self.mel_stats,
            lin_stats: self.lin_stats,
        })
        .expect("extra serializes");
        ckpt
    }

    pub fn save(&self, path: &Path, step: u64, adam: Option<&Adam>) -> Result<()> {
        self.to_checkpoint(step, adam).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        let config: SsrnConfig = ckpt.config_as("ssrn")?;
        let extra: SsrnExtra = serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad ssrn extra: {e}")))?;
        let mut model = Ssrn::new(config, extra.mel_stats, extra.lin_stats, 0);
        model.params.load_values(&ckpt.params)?;
        Ok((model, ckpt))
    }
}

/// Resample a waveform by ratio `r` via linear interpolation (keeps the
/// nominal sample rate, shifting pitch and tempo together) — the stand-in
/// for additional speakers when only one voice is available.
pub fn speaker_variant(w: &Waveform, r: f64) -> Result<Waveform> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Data(format!("resampling ratio must be > 0, got {r}")));
    }
    let n = (w.len() as f64 / r).floor() as usize;
    let samples = (0..n)
        .map(|i| {
            let x = i as f64 * r;
            let j = x.floor() as usize;
            let frac = x - j as f64;
            let a = w.samples[j.min(w.len() - 1)];
            let b = w.samples[(j + 1).min(w.len() - 1)];
            a + frac * (b - a)
        })
        .collect();
    Waveform::new(samples, w.sample_rate)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsrnLogEntry {
    pub step: u64,
    pub l1: f64,
    pub d_bd: f64,
    pub l_total: f64,
}

/// Options for [`train_ssrn`].
pub struct SsrnTrainOptions {
    pub steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub stft: StftParams,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for SsrnTrainOptions {
    fn default() -> Self {
        SsrnTrainOptions {
            steps: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            stft: StftParams::default_16k(),
            checkpoint_every: 500,
            checkpoint_path: None,
        }
    }
}

/// A (coarse mel, linear magnitude) training pair in normalized space.
pub struct SsrnPair {
    pub id: String,
    pub mel: Array2<f64>,
    pub lin: Array2<f64>,
}

/// Derive raw (mel, linear) feature pairs from a manifest's audio, one per
/// speaker variant.
fn raw_pairs(
    manifests: &[PathBuf],
    config: &SsrnConfig,
    stft_params: &StftParams,
    split: Option<Split>,
) -> Result<Vec<(String, Array2<f64>, Array2<f64>)>> {
    let mut out = Vec::new();
    for manifest in manifests {
        for r in read_manifest(manifest)? {
            if let Some(s) = split {
                if r.split != s {
                    continue;
                }
            }
            let w = read_wav(&resolve_audio(manifest, &r))?;
            for (vi, &ratio) in config.speaker_variants.iter().enumerate() {
                let v = speaker_variant(&w, ratio)?;
                if v.len() < stft_params.win_size {
                    continue;
                }
                let mag = magnitude(&stft(&v, stft_params)?);
                let mel = mel_project(&mag, config.n_mels, MEL_FMIN, MEL_FMAX)?;
                let coarse = downsample_mel_time(&mel, config.factor)?;
                out.push((format!("{}#{vi}", r.id), coarse.values, mag.values));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no super-resolution training pairs".into()));
    }
    Ok(out)
}

/// Load normalized pairs with existing statistics (evaluation path).
pub fn load_ssrn_pairs(
    manifests: &[PathBuf],
    config: &SsrnConfig,
    stft_params: &StftParams,
    split: Option<Split>,
    mel_stats: &LogNormStats,
    lin_stats: &LogNormStats,
) -> Result<Vec<SsrnPair>> {
    Ok(raw_pairs(manifests, config, stft_params, split)?
        .into_iter()
        .map(|(id, mel, lin)| SsrnPair {
            id,
            mel: mel_stats.normalize(&mel),
            lin: lin_stats.normalize(&lin),
        })
        .collect())
}

/// Train the super-resolution model on clean audio manifests.
pub fn train_ssrn(
    manifests: &[PathBuf],
    config: SsrnConfig,
    opts: &SsrnTrainOptions,
) -> Result<(Ssrn, Vec<SsrnLogEntry>)> {
    if config.bins != opts.stft.bins() {
        return Err(Error::Shape(format!(
            "config has {} bins but the analysis produces {}",
            config.bins,
            opts.stft.bins()
        )));
    }
    let raw = raw_pairs(manifests, &config, &opts.stft, Some(Split::Train))?;
    let mel_stats = LogNormStats::fit(raw.iter().map(|(_, m, _)| m), 1e-5);
    let lin_stats = LogNormStats::fit(raw.iter().map(|(_, _, l)| l), 1e-5);
    let pairs: Vec<SsrnPair> = raw
        .into_iter()
        .map(|(id, mel, lin)| SsrnPair {
            id,
            mel: mel_stats.normalize(&mel),
            lin: lin_stats.normalize(&lin),
        })
        .collect();

    let mut model = Ssrn::new(config, mel_stats, lin_stats, opts.seed);
    let mut adam = Adam::new(opts.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(opts.steps as usize);

    for step in 1..=opts.steps {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g);
        let (l1, d_bd) = model.loss_graph(&mut g, &bind, &pair.mel, &pair.lin)?;
        let total = g.add(l1, d_bd);
        let total_v = g.scalar_value(total);
        if !total_v.is_finite() {
            return Err(Error::Numerical(format!(
                "super-resolution training diverged at step {step}: loss {total_v}"
            )));
        }
        let grads = g.backward(total);
        adam.apply(&mut model.params, &bind.grads(&g, &grads))?;
        log.push(SsrnLogEntry {
            step,
            l1: g.scalar_value(l1),
            d_bd: g.scalar_value(d_bd),
            l_total: total_v,
        });
        if let Some(path) = &opts.checkpoint_path {
            if step % opts.checkpoint_every == 0 || step == opts.steps {
                model.save(path, step, Some(&adam))?;
            }
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{generate_speech_corpus, ToySpeechConfig};
    use crate::dsp::WindowKind;

    fn stats() -> LogNormStats {
        LogNormStats {
            log_floor: 1e-5,
            min: 1e-5f64.ln(),
            max: 0.0,
        }
    }

    #[test]
    fn upsample_shape_contract_holds_for_all_lengths() {
        let model = Ssrn::new(SsrnConfig::toy(8, 17), stats(), stats(), 1);
        for frames in [1, 2, 3, 7, 25] {
            let mel = Array2::from_shape_fn((frames, 8), |(i, j)| {
                ((i * 8 + j) as f64 * 0.13).sin() * 0.4 + 0.5
            });
            let out = model.forward(&mel).unwrap();
            assert_eq!(out.dim(), (frames * 4, 17));
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = Ssrn::new(SsrnConfig::toy(8, 17), stats(), stats(), 1);
        assert!(model.forward(&Array2::zeros((4, 9))).is_err());
        assert!(model.forward(&Array2::zeros((0, 8))).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = Ssrn::new(
            SsrnConfig {
                n_mels: 5,
                bins: 7,
                channels: 4,
                pre_layers: 1,
                post_layers: 1,
                kernel: 3,
                max_dilation: 2,
                factor: 2,
                speaker_variants: vec![1.0],
            },
            stats(),
            stats(),
            2,
        );
        let mel = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.29).sin() * 0.4 + 0.5);
        let target = Array2::from_shape_fn((6, 7), |(i, j)| {
            (((i * 7 + j) as f64 * 0.17).cos() * 0.45 + 0.5).clamp(0.0, 1.0)
        });
        let mut params = std::mem::take(&mut model.params);
        // Jitter biases off the rectifier kinks (see the text-to-mel note).
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in params.values_mut() {
            v.mapv_inplace(|x| x + rng.gen_range(-0.05..0.05));
        }
        let err = crate::nn::max_rel_grad_error(&mut params, 1e-3, |_, g, bind| {
            let (l1, d_bd) = model.loss_graph(g, bind, &mel, &target).unwrap();
            g.add(l1, d_bd)
        });
        assert!(err < 1e-4, "gradient rel error {err}");
    }

    #[test]
    fn speaker_variant_changes_length_and_rejects_bad_ratio() {
        let w = crate::corpus::toy::render_transcript("abc", 1).unwrap();
        let fast = speaker_variant(&w, 1.1).unwrap();
        let slow = speaker_variant(&w, 0.9).unwrap();
        assert!(fast.len() < w.len());
        assert!(slow.len() > w.len());
        let same = speaker_variant(&w, 1.0).unwrap();
        assert_eq!(same.len(), w.len());
        assert!(speaker_variant(&w, 0.0).is_err());
        assert!(speaker_variant(&w, f64::NAN).is_err());
    }

    #[test]
    fn short_training_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToySpeechConfig {
            n_utterances: 3,
            min_chars: 3,
            max_chars: 5,
            seed: 5,
            n_test: 0,
        };
        generate_speech_corpus(dir.path(), &cfg).unwrap();
        let stft = StftParams::new(256, 256, 64, WindowKind::Hann).unwrap();
        let config = SsrnConfig {
            bins: stft.bins(),
            ..SsrnConfig::toy(16, stft.bins())
        };
        let opts = SsrnTrainOptions {
            steps: 40,
            seed: 1,
            stft,
            ..Default::default()
        };
        let (_, log) = train_ssrn(&[dir.path().join("clean.jsonl")], config, &opts).unwrap();
        assert_eq!(log.len(), 40);
        let head: f64 = log[..5].iter().map(|e| e.l_total).sum::<f64>() / 5.0;
        let tail: f64 = log[35..].iter().map(|e| e.l_total).sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
        for e in &log {
            assert!(e.l_total.is_finite());
            assert_eq!(e.l_total, e.l1 + e.d_bd);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let model = Ssrn::new(SsrnConfig::toy(8, 17), stats(), stats(), 3);
        model.save(&path, 9, None).unwrap();
        let (loaded, ckpt) = Ssrn::load(&path).unwrap();
        assert_eq!(ckpt.step, 9);
        assert_eq!(loaded.mel_stats, model.mel_stats);
        let mel = Array2::from_shape_fn((5, 8), |(i, j)| ((i + j) as f64 * 0.21).sin() * 0.4 + 0.5);
        assert_eq!(model.forward(&mel).unwrap(), loaded.forward(&mel).unwrap());
    }
}
