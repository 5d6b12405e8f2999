//! The text-to-mel network: encoders, attention, style-token layer, quality
//! classifier, decoder, and checkpointing.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CharVocabulary;
use crate::dsp::LogNormStats;
use crate::error::{Error, Result};
use crate::nn::{
    Adam, Binding, Checkpoint, Conv1d, Conv2d, Graph, Gru, Linear, ParamId, ParamSet, Tensor,
};

/// Shape of the text-to-mel network. `aqc_hidden` stays at 256 regardless of
/// scale; everything else shrinks for toy runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Text2MelConfig {
    pub vocab_size: usize,
    pub n_mels: usize,
    /// Embedding / working channel width of the encoders and decoder.
    pub channels: usize,
    pub text_layers: usize,
    pub audio_layers: usize,
    pub decoder_layers: usize,
    pub kernel: usize,
    pub max_dilation: usize,
    /// Style-token bank size.
    pub n_tokens: usize,
    /// Attention heads over the token bank.
    pub heads: usize,
    /// Dimension of each token vector (also the per-head output width).
    pub token_dim: usize,
    /// Channel width of the reference encoder's strided 2-d convolutions.
    pub ref_channels: usize,
    /// Width of the reference encoder's recurrent layer (= reference
    /// embedding size).
    pub ref_rnn: usize,
    /// Hidden width of the quality classifier.
    pub aqc_hidden: usize,
    /// Time-downsampling factor between full-rate and coarse mel frames.
    pub downsample: usize,
    /// Condition the decoder on the style/quality embedding. Disabled for
    /// the plain text-to-mel ablation; the style modules still exist but see
    /// no gradient, and the decoder receives a zero vector in their place.
    #[serde(default = "default_true")]
    pub use_style: bool,
    /// Apply the guided-attention regularizer during training.
    pub guided_attention: bool,
    pub ga_weight: f64,
    pub ga_sigma: f64,
}

impl Default for Text2MelConfig {
    fn default() -> Self {
        Text2MelConfig {
            vocab_size: 0, // set from the vocabulary
            n_mels: 80,
            channels: 64,
            text_layers: 4,
            audio_layers: 4,
            decoder_layers: 4,
            kernel: 3,
            max_dilation: 8,
            n_tokens: 10,
            heads: 4,
            token_dim: 32,
            ref_channels: 16,
            ref_rnn: 64,
            aqc_hidden: 256,
            downsample: 4,
            use_style: true,
            guided_attention: true,
            ga_weight: 10.0,
            ga_sigma: 0.2,
        }
    }
}

impl Text2MelConfig {
    /// Small shape for fast toy-corpus training; classifier width is kept.
    pub fn toy(vocab_size: usize) -> Self {
        Text2MelConfig {
            vocab_size,
            channels: 24,
            text_layers: 2,
            audio_layers: 2,
            decoder_layers: 2,
            max_dilation: 4,
            token_dim: 8,
            ref_channels: 8,
            ref_rnn: 32,
            ..Default::default()
        }
    }

    /// Quality-embedding width: the heads' outputs concatenated.
    pub fn quality_dim(&self) -> usize {
        self.heads * self.token_dim
    }

    fn dilations(&self, layers: usize) -> Vec<usize> {
        (0..layers).map(|l| (1usize << l).min(self.max_dilation)).collect()
    }

    /// Height of the reference-encoder feature map after its four stride-2
    /// convolutions.
    fn ref_height(&self) -> usize {
        let mut h = self.n_mels;
        for _ in 0..REF_CONV_LAYERS {
            h = h.div_ceil(2);
        }
        h
    }
}

const REF_CONV_LAYERS: usize = 4;

fn default_true() -> bool {
    true
}

struct Net {
    embed: ParamId,
    text_convs: Vec<Conv1d>,
    text_out: Conv1d,
    audio_in: Conv1d,
    audio_convs: Vec<Conv1d>,
    dec_in: Conv1d,
    dec_convs: Vec<Conv1d>,
    dec_out: Conv1d,
    ref_convs: Vec<Conv2d>,
    ref_rnn: Gru,
    tokens: ParamId,
    head_q: Vec<Linear>,
    head_k: Vec<Linear>,
    head_v: Vec<Linear>,
    aqc1: Linear,
    aqc2: Linear,
}

/// A reference utterance's style summary: the embedding vector plus the
/// per-head attention weights over the token bank.
#[derive(Debug, Clone)]
pub struct QualityEmbedding {
    /// Concatenated per-head convex combinations, length `heads * token_dim`.
    pub vector: Array1<f64>,
    /// Softmax weights, `[heads x n_tokens]`; each row sums to 1.
    pub weights: Array2<f64>,
}

/// All tensors of one full forward pass.
pub(crate) struct Forward {
    /// Pre-sigmoid mel prediction, `[n_mels, T]`.
    pub logits: Tensor,
    /// Text-audio alignment, `[text_len, T]`; columns sum to 1.
    pub attention: Tensor,
    /// Quality embedding, `[quality_dim, 1]`.
    #[allow(dead_code)]
    pub quality: Tensor,
    /// Per-head token weights, `[heads, n_tokens]`.
    #[allow(dead_code)]
    pub token_weights: Tensor,
    /// Classifier output `[2, 1]`: (clean, filtered) probabilities.
    pub aqc_probs: Tensor,
}

/// Text-to-mel model: network shape, parameters, and the data-dependent
/// vocabulary and mel normalization it was trained with.
pub struct Text2Mel {
    pub config: Text2MelConfig,
    pub params: ParamSet,
    pub vocab: CharVocabulary,
    pub mel_stats: LogNormStats,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Text2MelExtra {
    vocab: CharVocabulary,
    mel_stats: LogNormStats,
}

impl Text2Mel {
    pub fn new(
        config: Text2MelConfig,
        vocab: CharVocabulary,
        mel_stats: LogNormStats,
        seed: u64,
    ) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Data(format!(
                "config vocab_size {} != vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        if config.heads == 0 || config.n_tokens == 0 || config.channels == 0 {
            return Err(Error::Data("degenerate text-to-mel config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.channels;

        let embed = params.add_xavier("embed", config.vocab_size, d, config.vocab_size, d, &mut rng);
        let text_convs = config
            .dilations(config.text_layers)
            .into_iter()
            .enumerate()
            .map(|(l, dil)| {
                Conv1d::new(&mut params, &format!("tenc{l}"), d, d, config.kernel, dil, false, &mut rng)
            })
            .collect();
        let text_out = Conv1d::new(&mut params, "tenc_out", d, 2 * d, 1, 1, false, &mut rng);

        let audio_in = Conv1d::new(&mut params, "aenc_in", config.n_mels, d, 1, 1, true, &mut rng);
        let audio_convs = config
            .dilations(config.audio_layers)
            .into_iter()
            .enumerate()
            .map(|(l, dil)| {
                Conv1d::new(&mut params, &format!("aenc{l}"), d, d, config.kernel, dil, true, &mut rng)
            })
            .collect();

        let dec_in = Conv1d::new(
            &mut params,
            "dec_in",
            2 * d + config.quality_dim(),
            d,
            1,
            1,
            true,
            &mut rng,
        );
        let dec_convs = config
            .dilations(config.decoder_layers)
            .into_iter()
            .enumerate()
            .map(|(l, dil)| {
                Conv1d::new(&mut params, &format!("dec{l}"), d, d, config.kernel, dil, true, &mut rng)
            })
            .collect();
        let dec_out = Conv1d::new(&mut params, "dec_out", d, config.n_mels, 1, 1, true, &mut rng);

        let mut ref_convs = Vec::with_capacity(REF_CONV_LAYERS);
        for l in 0..REF_CONV_LAYERS {
            let cin = if l == 0 { 1 } else { config.ref_channels };
            ref_convs.push(Conv2d::new(
                &mut params,
                &format!("renc{l}"),
                cin,
                config.ref_channels,
                3,
                3,
                2,
                2,
                &mut rng,
            ));
        }
        let ref_rnn = Gru::new(
            &mut params,
            "renc_rnn",
            config.ref_channels * config.ref_height(),
            config.ref_rnn,
            &mut rng,
        );

        let tokens = {
            let bound = (1.0 / config.token_dim as f64).sqrt();
            let v = ArrayD::from_shape_fn(IxDyn(&[config.n_tokens, config.token_dim]), |_| {
                rand::Rng::gen_range(&mut rng, -bound..bound)
            });
            params.add("tokens", v)
        };
        let mut head_q = Vec::with_capacity(config.heads);
        let mut head_k = Vec::with_capacity(config.heads);
        let mut head_v = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            head_q.push(Linear::new(&mut params, &format!("gst_q{h}"), config.ref_rnn, config.token_dim, &mut rng));
            head_k.push(Linear::new(&mut params, &format!("gst_k{h}"), config.token_dim, config.token_dim, &mut rng));
            head_v.push(Linear::new(&mut params, &format!("gst_v{h}"), config.token_dim, config.token_dim, &mut rng));
        }
        let aqc1 = Linear::new(&mut params, "aqc1", config.quality_dim(), config.aqc_hidden, &mut rng);
        let aqc2 = Linear::new(&mut params, "aqc2", config.aqc_hidden, 2, &mut rng);

        Ok(Text2Mel {
            config,
            params,
            vocab,
            mel_stats,
            net: Net {
                embed,
                text_convs,
                text_out,
                audio_in,
                audio_convs,
                dec_in,
                dec_convs,
                dec_out,
                ref_convs,
                ref_rnn,
                tokens,
                head_q,
                head_k,
                head_v,
                aqc1,
                aqc2,
            },
        })
    }

    // ---- encoders ----

    /// Encode character ids into attention keys and values, each
    /// `[channels, text_len]`.
    pub(crate) fn encode_text(
        &self,
        g: &mut Graph,
        bind: &Binding,
        ids: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        if ids.is_empty() {
            return Err(Error::Data("empty character sequence".into()));
        }
        if ids.iter().any(|&i| i >= self.config.vocab_size) {
            return Err(Error::Data("character id outside vocabulary".into()));
        }
        let emb = g.gather_rows(bind.t(self.net.embed), ids); // [N, d]
        let mut h = g.transpose2(emb); // [d, N]
        for conv in &self.net.text_convs {
            let mut y = conv.forward(g, bind, h);
            y = g.relu(y);
            h = g.add(h, y);
        }
        let kv = self.net.text_out.forward(g, bind, h); // [2d, N]
        let d = self.config.channels;
        let k = g.slice_axis(kv, 0, 0, d);
        let v = g.slice_axis(kv, 0, d, d);
        Ok((k, v))
    }

    /// Encode the (shifted) coarse mel history into attention queries
    /// `[channels, T]`. Strictly causal along time.
    pub(crate) fn encode_audio(&self, g: &mut Graph, bind: &Binding, mel_in: &Array2<f64>) -> Result<Tensor> {
        if mel_in.nrows() != self.config.n_mels {
            return Err(Error::Shape(format!(
                "audio encoder input has {} mel rows, config expects {}",
                mel_in.nrows(),
                self.config.n_mels
            )));
        }
        let x = g.leaf(mel_in.clone().into_dyn());
        let mut h = self.net.audio_in.forward(g, bind, x);
        h = g.relu(h);
        for conv in &self.net.audio_convs {
            let mut y = conv.forward(g, bind, h);
            y = g.relu(y);
            h = g.add(h, y);
        }
        Ok(h)
    }

    /// Summarize a reference mel `[frames x n_mels]` into a fixed-size
    /// embedding `[ref_rnn, 1]`.
    pub(crate) fn encode_reference(
        &self,
        g: &mut Graph,
        bind: &Binding,
        ref_mel: &Array2<f64>,
    ) -> Result<Tensor> {
        if ref_mel.nrows() == 0 {
            return Err(Error::Data("reference mel has zero frames".into()));
        }
        if ref_mel.ncols() != self.config.n_mels {
            return Err(Error::Shape(format!(
                "reference mel has {} bands, config expects {}",
                ref_mel.ncols(),
                self.config.n_mels
            )));
        }
        // Treat the mel as a 1-channel image [1, n_mels, frames].
        let img = ref_mel
            .t()
            .to_owned()
            .into_shape((1, self.config.n_mels, ref_mel.nrows()))
            .expect("reshape to image");
        // Smooth activation: keeps the summary bounded and avoids dead units
        // on the small late feature maps.
        let mut h = g.leaf(img.into_dyn());
        for conv in &self.net.ref_convs {
            h = conv.forward(g, bind, h);
            h = g.tanh(h);
        }
        let shape = g.value(h).shape().to_vec(); // [C, H', W']
        let flat = g.reshape(h, &[shape[0] * shape[1], shape[2]]);
        let (_, last) = self.net.ref_rnn.forward_seq(g, bind, flat, false);
        Ok(last)
    }

    // ---- style tokens ----

    /// Per-head projected token values `[n_tokens, token_dim]`.
    fn head_token_values(&self, g: &mut Graph, bind: &Binding, h: usize) -> Tensor {
        let tokens = bind.t(self.net.tokens); // [n_tokens, token_dim]
        let tanh = g.tanh(tokens);
        let tokens_t = g.transpose2(tanh); // [token_dim, n_tokens]
        let v = self.net.head_v[h].forward(g, bind, tokens_t); // [token_dim, n_tokens]
        g.transpose2(v)
    }

    /// Softmax attention weights of head `h` over the token bank,
    /// `[n_tokens, 1]`.
    fn head_weights(&self, g: &mut Graph, bind: &Binding, h: usize, ref_e: Tensor) -> Tensor {
        let q = self.net.head_q[h].forward(g, bind, ref_e); // [dk, 1]
        let tokens = bind.t(self.net.tokens);
        let tokens_t = g.transpose2(tokens); // [token_dim, n_tokens]
        let k = self.net.head_k[h].forward(g, bind, tokens_t); // [dk, n_tokens]
        let kt = g.transpose2(k); // [n_tokens, dk]
        let scores = g.matmul(kt, q); // [n_tokens, 1]
        let scaled = g.scale(scores, 1.0 / (self.config.token_dim as f64).sqrt());
        g.softmax(scaled, 0)
    }

    /// Attend over the token bank: returns the quality embedding
    /// `[quality_dim, 1]` and the per-head weights `[heads, n_tokens]`.
    pub(crate) fn quality_embed_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        ref_e: Tensor,
    ) -> (Tensor, Tensor) {
        let mut parts = Vec::with_capacity(self.config.heads);
        let mut weight_rows = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let w = self.head_weights(g, bind, h, ref_e); // [n_tokens, 1]
            let values = self.head_token_values(g, bind, h); // [n_tokens, dv]
            let vt = g.transpose2(values); // [dv, n_tokens]
            let out = g.matmul(vt, w); // [dv, 1]
            parts.push(out);
            weight_rows.push(g.transpose2(w)); // [1, n_tokens]
        }
        let quality = g.concat(0, &parts);
        let weights = g.concat(0, &weight_rows);
        (quality, weights)
    }

    /// Two-way classifier on the quality embedding; returns `[2, 1]`
    /// probabilities (clean, filtered).
    pub(crate) fn classify_graph(&self, g: &mut Graph, bind: &Binding, quality: Tensor) -> Tensor {
        let h = self.net.aqc1.forward(g, bind, quality);
        let h = g.relu(h);
        let logits = self.net.aqc2.forward(g, bind, h);
        g.softmax(logits, 0)
    }

    // ---- full pass ----

    /// Run the whole network. `mel_input` is the shifted coarse mel history
    /// `[n_mels, T]`; `ref_mel` is a reference `[frames x n_mels]` in [0,1].
    /// `attention_bias` (same shape as the attention matrix, `[text_len, T]`)
    /// is added to the attention scores before the softmax; synthesis uses it
    /// to force a monotone alignment window.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        ids: &[usize],
        mel_input: &Array2<f64>,
        ref_mel: &Array2<f64>,
        attention_bias: Option<&Array2<f64>>,
    ) -> Result<Forward> {
        let (k, v) = self.encode_text(g, bind, ids)?;
        let q = self.encode_audio(g, bind, mel_input)?;
        let t_frames = mel_input.ncols();

        let kt = g.transpose2(k); // [N, d]
        let scores = g.matmul(kt, q); // [N, T]
        let mut scaled = g.scale(scores, 1.0 / (self.config.channels as f64).sqrt());
        if let Some(bias) = attention_bias {
            if bias.dim() != (ids.len(), t_frames) {
                return Err(Error::Shape(format!(
                    "attention bias {:?} vs attention ({}, {})",
                    bias.dim(),
                    ids.len(),
                    t_frames
                )));
            }
            let b = g.leaf(bias.clone().into_dyn());
            scaled = g.add(scaled, b);
        }
        let attention = g.softmax(scaled, 0); // columns sum to 1
        let context = g.matmul(v, attention); // [d, T]

        let ref_e = self.encode_reference(g, bind, ref_mel)?;
        let (quality, token_weights) = self.quality_embed_graph(g, bind, ref_e);
        let aqc_probs = self.classify_graph(g, bind, quality);

        let quality_t = if self.config.use_style {
            g.repeat_cols(quality, t_frames) // [qdim, T]
        } else {
            g.leaf(ArrayD::zeros(IxDyn(&[self.config.quality_dim(), t_frames])))
        };
        let dec_input = g.concat(0, &[context, q, quality_t]);
        let mut h = self.net.dec_in.forward(g, bind, dec_input);
        h = g.relu(h);
        for conv in &self.net.dec_convs {
            let mut y = conv.forward(g, bind, h);
            y = g.relu(y);
            h = g.add(h, y);
        }
        let logits = self.net.dec_out.forward(g, bind, h); // [n_mels, T]
        Ok(Forward {
            logits,
            attention,
            quality,
            token_weights,
            aqc_probs,
        })
    }

    // ---- inference helpers ----

    /// Quality embedding of a reference mel `[frames x n_mels]` in [0,1].
    pub fn quality_embedding(&self, ref_mel: &Array2<f64>) -> Result<QualityEmbedding> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let ref_e = self.encode_reference(&mut g, &bind, ref_mel)?;
        let (quality, weights) = self.quality_embed_graph(&mut g, &bind, ref_e);
        let vector = g
            .value(quality)
            .to_owned()
            .into_shape(self.config.quality_dim())
            .expect("quality is a column")
            .into_dimensionality()
            .expect("1-d");
        let weights = g
            .value(weights)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("weights are 2-d");
        Ok(QualityEmbedding { vector, weights })
    }

    /// Classifier probabilities (clean, filtered) for a reference mel.
    pub fn classify_quality(&self, ref_mel: &Array2<f64>) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g);
        let ref_e = self.encode_reference(&mut g, &bind, ref_mel)?;
        let (quality, _) = self.quality_embed_graph(&mut g, &bind, ref_e);
        let probs = self.classify_graph(&mut g, &bind, quality);
        let p = g.value(probs);
        Ok([p[[0, 0]], p[[1, 0]]])
    }

    // ---- persistence ----

    pub fn to_checkpoint(&self, step: u64, adam: Option<&Adam>) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(
            "text2mel",
            serde_json::to_value(&self.config).expect("config serializes"),
            step,
            &self.params,
            adam,
        );
        ckpt.extra = serde_json::to_value(Text2MelExtra {
            vocab: self.vocab.clone(),
            mel_stats: self.mel_stats,
        })
        .expect("extra serializes");
        ckpt
    }

    pub fn save(&self, path: &Path, step: u64, adam: Option<&Adam>) -> Result<()> {
        self.to_checkpoint(step, adam).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        let config: Text2MelConfig = ckpt.config_as("text2mel")?;
        let extra: Text2MelExtra = serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad text2mel extra: {e}")))?;
        let mut model = Text2Mel::new(config, extra.vocab, extra.mel_stats, 0)?;
        model.params.load_values(&ckpt.params)?;
        Ok((model, ckpt))
    }
}
