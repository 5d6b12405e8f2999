//! Training loop, evaluation, and autoregressive synthesis for the
//! text-to-mel model.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::corpus::{read_manifest, resolve_audio, CharVocabulary, QualityLabel, Split};
use crate::dsp::{
    downsample_mel_time, magnitude, mel_project, stft, LogNormStats, StftParams,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Binding, Graph, Tensor};

use super::model::{Text2Mel, Text2MelConfig};
use super::{
    guided_attention_loss_graph, total_loss, tts_loss_graph, LossBundle, MEL_FMAX, MEL_FMIN,
};

/// One training/evaluation item: encoded text plus its normalized coarse mel
/// and quality label.
#[derive(Debug, Clone)]
pub struct TtsExample {
    pub id: String,
    pub text: String,
    pub ids: Vec<usize>,
    /// Normalized coarse mel, `[frames x n_mels]`, values in [0,1].
    pub mel: Array2<f64>,
    pub label: QualityLabel,
}

impl TtsExample {
    /// Class index for the quality classifier: clean = 0, degraded
    /// (filtered, or raw noisy in the no-filter ablation) = 1.
    pub fn class(&self) -> usize {
        match self.label {
            QualityLabel::Clean => 0,
            QualityLabel::Filtered | QualityLabel::Noisy => 1,
        }
    }
}

/// Raw (pre-normalization) coarse mel of one utterance.
fn coarse_mel_raw(
    manifest: &Path,
    record: &crate::corpus::UtteranceRecord,
    stft_params: &StftParams,
    n_mels: usize,
    factor: usize,
) -> Result<Array2<f64>> {
    let w = read_wav(&resolve_audio(manifest, record))?;
    let mag = magnitude(&stft(&w, stft_params)?);
    let mel = mel_project(&mag, n_mels, MEL_FMIN, MEL_FMAX)?;
    Ok(downsample_mel_time(&mel, factor)?.values)
}

/// Load examples from manifests using an existing vocabulary and
/// normalization (e.g. a trained model's). Labels must be CLEAN or FILTERED
/// unless `allow_noisy` is set (the no-filter ablation, where raw NOISY
/// audio stands in as the degraded class).
#[allow(clippy::too_many_arguments)]
pub fn load_tts_examples(
    manifests: &[PathBuf],
    split: Option<Split>,
    vocab: &CharVocabulary,
    stats: &LogNormStats,
    stft_params: &StftParams,
    n_mels: usize,
    factor: usize,
    allow_noisy: bool,
) -> Result<Vec<TtsExample>> {
    let mut out = Vec::new();
    for manifest in manifests {
        for r in read_manifest(manifest)? {
            if let Some(s) = split {
                if r.split != s {
                    continue;
                }
            }
            if r.quality == QualityLabel::Noisy && !allow_noisy {
                return Err(Error::Data(format!(
                    "{}: unfiltered NOISY audio cannot train the text-to-mel model",
                    r.id
                )));
            }
            let raw = coarse_mel_raw(manifest, &r, stft_params, n_mels, factor)?;
            out.push(TtsExample {
                ids: vocab.encode(&r.transcript)?,
                text: r.transcript.clone(),
                mel: stats.normalize(&raw),
                label: r.quality,
                id: r.id,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no usable text-to-mel examples".into()));
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtsLogEntry {
    pub step: u64,
    pub l1: f64,
    pub d_bd: f64,
    pub l_aux: f64,
    pub l_total: f64,
    /// Running classifier accuracy over the trailing window of steps.
    pub aqc_accuracy: f64,
}

/// Options for [`train_tts`].
pub struct TtsTrainOptions {
    pub steps: u64,
    pub seed: u64,
    /// Weight of the classifier term in the total loss.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub stft: StftParams,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Accept raw NOISY audio as the degraded class (no-filter ablation).
    pub allow_noisy: bool,
}

impl Default for TtsTrainOptions {
    fn default() -> Self {
        TtsTrainOptions {
            steps: 2000,
            seed: 0,
            lambda: 0.01,
            adam: AdamConfig::default(),
            stft: StftParams::default_16k(),
            checkpoint_every: 500,
            checkpoint_path: None,
            allow_noisy: false,
        }
    }
}

/// Shift a `[n_mels, T]` mel one frame to the right, inserting a zero frame:
/// the decoder input at time t is the target at time t-1.
pub(crate) fn shift_right(mel_t: &Array2<f64>) -> Array2<f64> {
    let (m, t) = mel_t.dim();
    let mut out = Array2::zeros((m, t));
    for j in 1..t {
        out.column_mut(j).assign(&mel_t.column(j - 1));
    }
    out
}

/// Build one example's training objective into `g`. Returns
/// `(l1, d_bd, l_aux, l_total, objective, aqc_probs)` tensors; `objective`
/// is `l_total` plus the guided-attention term when enabled. Public so test
/// suites can gradient-check the combined loss through the whole model.
pub fn example_objective(
    model: &Text2Mel,
    g: &mut Graph,
    bind: &Binding,
    ex: &TtsExample,
    lambda: f64,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let target = ex.mel.t().to_owned(); // [n_mels, T]
    let input = shift_right(&target);
    let fwd = model.forward(g, bind, &ex.ids, &input, &ex.mel, None)?;
    let (l1, d_bd) = tts_loss_graph(g, fwd.logits, &target)?;
    // Cross-entropy of the true class under the classifier output.
    let p_true = g.slice_axis(fwd.aqc_probs, 0, ex.class(), 1);
    let ln_p = g.ln(p_true);
    let neg = g.neg(ln_p);
    let l_aux = g.mean_all(neg);
    // Fixed combination order: (l1 + d_bd) + lambda * l_aux.
    let l_tts = g.add(l1, d_bd);
    let aux_scaled = g.scale(l_aux, lambda);
    let l_total = g.add(l_tts, aux_scaled);
    let objective = if model.config.guided_attention {
        let ga = guided_attention_loss_graph(g, fwd.attention, model.config.ga_sigma);
        let ga_w = g.scale(ga, model.config.ga_weight);
        g.add(l_total, ga_w)
    } else {
        l_total
    };
    Ok((l1, d_bd, l_aux, l_total, objective, fwd.aqc_probs))
}

/// Train the text-to-mel model on manifests of CLEAN and FILTERED speech.
/// Each example serves as its own reference utterance. Returns the model and
/// the per-step log; aborts with a numerical error on a non-finite loss.
pub fn train_tts(
    manifests: &[PathBuf],
    mut config: Text2MelConfig,
    opts: &TtsTrainOptions,
) -> Result<(Text2Mel, Vec<TtsLogEntry>)> {
    if !(opts.lambda >= 0.0) {
        return Err(Error::Data(format!("lambda must be >= 0, got {}", opts.lambda)));
    }
    // First pass: records, vocabulary, raw mels for the normalization fit.
    let mut records = Vec::new();
    for manifest in manifests {
        for r in read_manifest(manifest)? {
            if r.split != Split::Train {
                continue;
            }
            if r.quality == QualityLabel::Noisy && !opts.allow_noisy {
                return Err(Error::Data(format!(
                    "{}: unfiltered NOISY audio cannot train the text-to-mel model",
                    r.id
                )));
            }
            records.push((manifest.clone(), r));
        }
    }
    if records.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let vocab = CharVocabulary::from_records(
        &records.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(),
    );
    let raw_mels = records
        .iter()
        .map(|(m, r)| coarse_mel_raw(m, r, &opts.stft, config.n_mels, config.downsample))
        .collect::<Result<Vec<_>>>()?;
    let stats = LogNormStats::fit(raw_mels.iter(), 1e-5);
    let examples: Vec<TtsExample> = records
        .iter()
        .zip(&raw_mels)
        .map(|((_, r), raw)| {
            Ok(TtsExample {
                id: r.id.clone(),
                text: r.transcript.clone(),
                ids: vocab.encode(&r.transcript)?,
                mel: stats.normalize(raw),
                label: r.quality,
            })
        })
        .collect::<Result<_>>()?;

    config.vocab_size = vocab.len();
    let mut model = Text2Mel::new(config, vocab, stats, opts.seed)?;
    let mut adam = Adam::new(opts.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(opts.steps as usize);
    let mut recent_correct: std::collections::VecDeque<bool> = std::collections::VecDeque::new();

    for step in 1..=opts.steps {
        let ex = &examples[rng.gen_range(0..examples.len())];
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g);
        let (l1, d_bd, l_aux, _l_total, objective, probs) =
            example_objective(&model, &mut g, &bind, ex, opts.lambda)?;
        let obj_v = g.scalar_value(objective);
        if !obj_v.is_finite() {
            return Err(Error::Numerical(format!(
                "text-to-mel training diverged at step {step}: loss {obj_v}"
            )));
        }
        let bundle: LossBundle = total_loss(
            g.scalar_value(l1),
            g.scalar_value(d_bd),
            g.scalar_value(l_aux),
            opts.lambda,
        )?;
        let p = g.value(probs);
        let predicted = if p[[0, 0]] >= p[[1, 0]] { 0 } else { 1 };
        recent_correct.push_back(predicted == ex.class());
        if recent_correct.len() > 50 {
            recent_correct.pop_front();
        }
        let accuracy = recent_correct.iter().filter(|&&c| c).count() as f64
            / recent_correct.len() as f64;

        let grads = g.backward(objective);
        adam.apply(&mut model.params, &bind.grads(&g, &grads))?;
        log.push(TtsLogEntry {
            step,
            l1: bundle.l1,
            d_bd: bundle.d_bd,
            l_aux: bundle.l_aux,
            l_total: bundle.l_total,
            aqc_accuracy: accuracy,
        });
        if let Some(path) = &opts.checkpoint_path {
            if step % opts.checkpoint_every == 0 || step == opts.steps {
                model.save(path, step, Some(&adam))?;
            }
        }
    }
    Ok((model, log))
}

/// Fraction of examples whose quality class the model predicts correctly.
pub fn aqc_accuracy(model: &Text2Mel, examples: &[TtsExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        let p = model.classify_quality(&ex.mel)?;
        let predicted = if p[0] >= p[1] { 0 } else { 1 };
        if predicted == ex.class() {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Output of [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Predicted normalized coarse mel, `[frames x n_mels]` in (0,1).
    pub mel: Array2<f64>,
    /// Final text-audio alignment, `[text_len x frames]`.
    pub attention: Array2<f64>,
    /// True when the alignment reached the end of the text before
    /// `max_frames`; false means a best-effort, possibly truncated result.
    pub completed: bool,
}

/// Attention window at synthesis: a frame may attend one position behind or
/// up to this many positions ahead of the previous frame's position. Keeps
/// the alignment moving forward without a trained stop predictor.
const ATTENTION_WINDOW_AHEAD: usize = 3;
/// Maximum consecutive frames the alignment may dwell on one text position
/// before the window is pushed past it. Coarse frames cover ~32 ms each, so
/// this caps a position at ~160 ms of audio.
const ATTENTION_MAX_DWELL: usize = 5;
/// Additive score penalty for text positions outside the window; large
/// enough to zero them out after the softmax.
const ATTENTION_MASK: f64 = -1e9;

/// Autoregressive synthesis: feed predicted frames back until the attention
/// reaches the final text position or `max_frames` is hit. `ref_mel` is the
/// normalized coarse mel of the reference utterance. Attention is forced to
/// advance monotonically: each frame's alignment is restricted to a small
/// window around the previous frame's position.
pub fn synthesize(
    model: &Text2Mel,
    text: &str,
    ref_mel: &Array2<f64>,
    max_frames: usize,
) -> Result<Synthesis> {
    if max_frames == 0 {
        return Err(Error::Data("max_frames must be positive".into()));
    }
    let ids = model.vocab.encode(text)?;
    let n_mels = model.config.n_mels;
    let mut frames: Vec<Array1<f64>> = Vec::new();
    let mut attention = Array2::zeros((ids.len(), 0));
    // Alignment position chosen for each produced frame, and the window
    // `(lo, hi)` it was chosen from.
    let mut positions: Vec<usize> = Vec::new();
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut completed = false;
    let last = ids.len() - 1;

    while frames.len() < max_frames {
        let t = frames.len();
        // Decoder input: zero frame followed by the predictions so far.
        let mut input = Array2::zeros((n_mels, t + 1));
        for (j, f) in frames.iter().enumerate() {
            input.column_mut(j + 1).assign(f);
        }
        // Window for the new frame: around the previous frame's position,
        // pushed forward once the alignment has dwelt there too long.
        let prev = positions.last().copied().unwrap_or(0);
        let dwell = positions.iter().rev().take_while(|&&p| p == prev).count();
        // Monotone: never step back behind the previous position, and push
        // past it once it has been held for the dwell limit.
        let lo = if dwell >= ATTENTION_MAX_DWELL {
            (prev + 1).min(last)
        } else {
            prev
        };
        let hi = (prev + ATTENTION_WINDOW_AHEAD).min(last).max(lo);
        // Past columns keep the windows they were produced under so the
        // decoder context for earlier frames is unchanged.
        let mut bias = Array2::from_elem((ids.len(), t + 1), ATTENTION_MASK);
        for (col, &(wlo, whi)) in windows.iter().enumerate() {
            for n in wlo..=whi {
                bias[[n, col]] = 0.0;
            }
        }
        for n in lo..=hi {
            bias[[n, t]] = 0.0;
        }
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g);
        let fwd = model.forward(&mut g, &bind, &ids, &input, ref_mel, Some(&bias))?;
        let mel_t = g.sigmoid(fwd.logits);
        let mel_v = g.value(mel_t);
        frames.push(Array1::from_iter((0..n_mels).map(|m| mel_v[[m, t]])));
        let att = g
            .value(fwd.attention)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("attention is 2-d");
        // Completion heuristic: the newest frame attends to the final text
        // position (the end-of-sequence symbol).
        let col = att.column(t);
        let argmax = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite attention"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        positions.push(argmax);
        windows.push((lo, hi));
        attention = att;
        if argmax + 1 >= ids.len() {
            completed = true;
            break;
        }
    }

    let mut mel = Array2::zeros((frames.len(), n_mels));
    for (i, f) in frames.iter().enumerate() {
        mel.row_mut(i).assign(f);
    }
    Ok(Synthesis {
        mel,
        attention,
        completed,
    })
}
