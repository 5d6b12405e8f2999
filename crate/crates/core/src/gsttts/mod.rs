//! Text-to-mel model with a style-token layer and an auxiliary quality
//! classifier.
//!
//! A convolutional text encoder and a causal convolutional audio encoder
//! produce key/value and query embeddings; scaled-dot attention aligns them;
//! a causal decoder predicts the next coarse mel frame. A reference encoder
//! summarizes a reference utterance into a fixed vector which attends over a
//! bank of learned style tokens; the resulting "quality embedding" is
//! concatenated into the decoder input and fed to a small classifier that
//! predicts whether the reference was clean or filtered speech. Training
//! minimizes `l1 + d_bd + lambda * l_aux` (plus an optional guided-attention
//! regularizer), so with `lambda > 0` the embedding is pushed to encode
//! speech quality.

mod model;
mod train;

pub use model::{QualityEmbedding, Text2Mel, Text2MelConfig};
pub use train::{
    aqc_accuracy, example_objective, load_tts_examples, synthesize, train_tts, Synthesis,
    TtsExample, TtsLogEntry, TtsTrainOptions,
};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor};

/// Mel band edges used throughout the text-to-mel path (Hz).
pub const MEL_FMIN: f64 = 0.0;
/// Upper mel band edge; Nyquist for 16 kHz audio.
pub const MEL_FMAX: f64 = 8000.0;

/// Probability floor for the value-level binary divergence, guarding the
/// `ln` terms against exactly-saturated predictions.
pub const PROB_FLOOR: f64 = 1e-12;

/// The named scalars of one loss evaluation. The combination order is fixed:
/// `l_tts = l1 + d_bd` and `l_total = l_tts + lambda * l_aux`, evaluated
/// exactly in that order so the algebra holds bitwise.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l1: f64,
    pub d_bd: f64,
    pub l_tts: f64,
    pub l_aux: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// Combine loss components into a [`LossBundle`]; rejects negative `lambda`.
pub fn total_loss(l1: f64, d_bd: f64, l_aux: f64, lambda: f64) -> Result<LossBundle> {
    if !(lambda >= 0.0) {
        return Err(Error::Data(format!("lambda must be >= 0, got {lambda}")));
    }
    let l_tts = l1 + d_bd;
    let l_total = l_tts + lambda * l_aux;
    Ok(LossBundle {
        l1,
        d_bd,
        l_tts,
        l_aux,
        lambda,
        l_total,
    })
}

/// Build `mean |sigmoid(logits) - target|` into the graph.
pub fn l1_loss_graph(g: &mut Graph, logits: Tensor, target: Tensor) -> Tensor {
    let pred = g.sigmoid(logits);
    let diff = g.sub(pred, target);
    let abs = g.abs(diff);
    g.mean_all(abs)
}

/// Build the binary divergence `mean(-t ln p - (1-t) ln(1-p))` with
/// `p = sigmoid(logits)` into the graph. Evaluated in logit space via the
/// identity `softplus(x) - t*x`, which stays finite at any saturation and
/// grows linearly with wrong-signed logits, so runaway training shows up as
/// a runaway loss instead of a silent plateau.
pub fn binary_divergence_graph(g: &mut Graph, logits: Tensor, target: Tensor) -> Tensor {
    // softplus(x) = relu(x) + ln(1 + exp(-|x|)): the exponent never exceeds 0.
    let r = g.relu(logits);
    let a = g.abs(logits);
    let na = g.neg(a);
    let e = g.exp(na);
    let e1 = g.add_scalar(e, 1.0);
    let lg = g.ln(e1);
    let softplus = g.add(r, lg);
    let tx = g.mul(target, logits);
    let d = g.sub(softplus, tx);
    g.mean_all(d)
}

/// Both reconstruction terms from prediction logits and a `[0,1]` target.
/// Returns `(l1, d_bd)` graph tensors.
pub fn tts_loss_graph(
    g: &mut Graph,
    logits: Tensor,
    target: &Array2<f64>,
) -> Result<(Tensor, Tensor)> {
    if target.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Data("tts loss target must lie in [0,1]".into()));
    }
    if g.value(logits).shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            g.value(logits).shape(),
            target.shape()
        )));
    }
    let t = g.leaf(target.clone().into_dyn());
    Ok((l1_loss_graph(g, logits, t), binary_divergence_graph(g, logits, t)))
}

/// Value-level reconstruction loss on a predicted mel in `(0,1)`.
/// Returns `(l1, d_bd)`.
pub fn tts_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, f64)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if target.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Data("tts loss target must lie in [0,1]".into()));
    }
    if pred.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Data("tts loss prediction must lie in [0,1]".into()));
    }
    let n = pred.len() as f64;
    let l1 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    // Floor both log arguments so exactly-saturated predictions stay finite.
    let d_bd = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            -t * p.max(PROB_FLOOR).ln() - (1.0 - t) * (1.0 - p).max(PROB_FLOOR).ln()
        })
        .sum::<f64>()
        / n;
    Ok((l1, d_bd))
}

/// Penalty weights for off-diagonal attention: entry `[n, t]` is
/// `1 - exp(-(n/N - t/T)^2 / (2 sigma^2))`.
pub fn guided_attention_weights(text_len: usize, frames: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((text_len, frames), |(n, t)| {
        let dn = n as f64 / text_len as f64 - t as f64 / frames as f64;
        1.0 - (-dn * dn / (2.0 * sigma * sigma)).exp()
    })
}

/// Mean of the attention matrix weighted by the off-diagonal penalty; pushes
/// the alignment toward the monotone diagonal early in training.
pub fn guided_attention_loss_graph(g: &mut Graph, attention: Tensor, sigma: f64) -> Tensor {
    let shape = g.value(attention).shape().to_vec();
    let w = guided_attention_weights(shape[0], shape[1], sigma);
    let wt = g.leaf(w.into_dyn());
    let prod = g.mul(attention, wt);
    g.mean_all(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn loss_bundle_algebra_is_exact() {
        let cases = [
            (0.3, 0.7, 0.2, 0.01),
            (1.0e-3, 2.0e-3, 5.0, 0.001),
            (0.123456, 0.654321, 0.999, 0.0),
        ];
        for (l1, d_bd, l_aux, lambda) in cases {
            let b = total_loss(l1, d_bd, l_aux, lambda).unwrap();
            assert_eq!(b.l_tts, l1 + d_bd);
            assert_eq!(b.l_total, b.l_tts + lambda * b.l_aux);
            if lambda == 0.0 {
                assert_eq!(b.l_total, b.l_tts);
            }
        }
        assert!(total_loss(0.1, 0.1, 0.1, -0.5).is_err());
    }

    #[test]
    fn half_grid_gives_ln2_divergence_and_zero_l1() {
        let pred = Array2::from_elem((4, 6), 0.5);
        let (l1, d_bd) = tts_loss(&pred, &pred).unwrap();
        assert_eq!(l1, 0.0);
        assert!((d_bd - std::f64::consts::LN_2).abs() < 1e-12, "d_bd {d_bd}");
    }

    #[test]
    fn saturated_matching_predictions_vanish() {
        for v in [0.0, 1.0] {
            let m = Array2::from_elem((3, 3), v);
            let (l1, d_bd) = tts_loss(&m, &m).unwrap();
            assert_eq!(l1, 0.0);
            assert!(d_bd < 1e-5, "d_bd {d_bd} at {v}");
        }
    }

    #[test]
    fn target_outside_unit_interval_rejected() {
        let pred = Array2::from_elem((2, 2), 0.5);
        let bad = Array2::from_elem((2, 2), 1.5);
        assert!(tts_loss(&pred, &bad).is_err());
        let mut g = Graph::new();
        let l = g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 2])));
        assert!(tts_loss_graph(&mut g, l, &bad).is_err());
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let logits = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - j as f64) * 0.4);
        let target = Array2::from_shape_fn((3, 5), |(i, j)| ((i + j) as f64 * 0.09).min(1.0));
        let pred = logits.mapv(|l| 1.0 / (1.0 + (-l).exp()));
        let (l1_v, dbd_v) = tts_loss(&pred, &target).unwrap();
        let mut g = Graph::new();
        let lt = g.leaf(logits.into_dyn());
        let (l1_t, dbd_t) = tts_loss_graph(&mut g, lt, &target).unwrap();
        assert!((g.scalar_value(l1_t) - l1_v).abs() < 1e-12);
        assert!((g.scalar_value(dbd_t) - dbd_v).abs() < 1e-12);
    }

    #[test]
    fn guided_attention_prefers_diagonal() {
        let w = guided_attention_weights(10, 10, 0.2);
        // Diagonal entries are zero-penalty; far corners approach 1.
        for i in 0..10 {
            assert!(w[[i, i]] < 1e-12);
        }
        assert!(w[[0, 9]] > 0.9);
        assert!(w[[9, 0]] > 0.9);
        // A diagonal attention matrix scores lower than an anti-diagonal one.
        let mut diag = Array2::zeros((10, 10));
        let mut anti = Array2::zeros((10, 10));
        for i in 0..10 {
            diag[[i, i]] = 1.0;
            anti[[9 - i, i]] = 1.0;
        }
        let score = |a: &Array2<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(a.clone().into_dyn());
            let l = guided_attention_loss_graph(&mut g, t, 0.2);
            g.scalar_value(l)
        };
        assert!(score(&diag) < score(&anti));
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        use crate::nn::{max_rel_grad_error, ParamSet};
        use ndarray::IxDyn;
        let target = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.07).fract());
        let mut params = ParamSet::new();
        let id = params.add(
            "logits",
            // Offset keeps every logit away from the relu/abs kink at zero.
            ndarray::ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| {
                ((ix[0] * 4 + ix[1]) as f64 * 0.31).sin() + 0.05
            }),
        );
        let e1 = max_rel_grad_error(&mut params, 1e-3, |_, g, bind| {
            let t = g.leaf(target.clone().into_dyn());
            l1_loss_graph(g, bind.t(id), t)
        });
        assert!(e1 < 1e-4, "l1 grad rel error {e1}");
        let e2 = max_rel_grad_error(&mut params, 1e-3, |_, g, bind| {
            let t = g.leaf(target.clone().into_dyn());
            binary_divergence_graph(g, bind.t(id), t)
        });
        assert!(e2 < 1e-4, "d_bd grad rel error {e2}");
    }
}
