//! Layer building blocks: each struct owns parameter handles and builds its
//! forward computation into a caller-provided graph.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Tensor};
use super::params::{Binding, ParamId, ParamSet};

/// Fully connected layer on column-major activations: x [in, T] -> [out, T].
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = params.add_xavier(format!("{name}.w"), output, input, input, output, rng);
        let b = params.add_zeros(format!("{name}.b"), &[output, 1]);
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Tensor {
        let y = g.matmul(bind.t(self.w), x);
        g.add(y, bind.t(self.b))
    }
}

/// 1-d convolution along time with optional dilation and causal padding.
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
    pub causal: bool,
}

impl Conv1d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel;
        let w = params.add_xavier(format!("{name}.w"), cout, fan_in, fan_in, cout, rng);
        let b = params.add_zeros(format!("{name}.b"), &[cout, 1]);
        Conv1d {
            w,
            b,
            kernel,
            dilation,
            causal,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Tensor {
        let y = g.conv1d(x, bind.t(self.w), self.kernel, self.dilation, self.causal);
        g.add(y, bind.t(self.b))
    }
}

/// 2-d strided convolution for the reference encoder: x [Cin, H, W].
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kh * kw;
        let w = params.add_xavier(format!("{name}.w"), cout, fan_in, fan_in, cout, rng);
        let b = params.add_zeros(format!("{name}.b"), &[cout, 1, 1]);
        Conv2d {
            w,
            b,
            kh,
            kw,
            sh,
            sw,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Tensor {
        let y = g.conv2d(x, bind.t(self.w), self.kh, self.kw, self.sh, self.sw);
        g.add(y, bind.t(self.b))
    }
}

/// Per-channel normalization over the time axis of [C, T] activations with a
/// learned affine, the batch-of-one analogue of batch norm for this pipeline.
pub struct TimeNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

const NORM_EPS: f64 = 1e-5;

impl TimeNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            ndarray::ArrayD::ones(ndarray::IxDyn(&[channels, 1])),
        );
        let beta = params.add_zeros(format!("{name}.beta"), &[channels, 1]);
        TimeNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Tensor {
        let mean = g.mean_axis_keep(x, 1);
        let centered = g.sub(x, mean);
        let sq = g.mul(centered, centered);
        let var = g.mean_axis_keep(sq, 1);
        let var_eps = g.add_scalar(var, NORM_EPS);
        let inv_std = g.powf(var_eps, -0.5);
        let normed = g.mul(centered, inv_std);
        let scaled = g.mul(normed, bind.t(self.gamma));
        g.add(scaled, bind.t(self.beta))
    }
}

/// Gated recurrent unit over a [in, T] sequence, unrolled step by step.
pub struct Gru {
    pub wz: Linear,
    pub wr: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Gru {
            wz: Linear::new(params, &format!("{name}.z"), input + hidden, hidden, rng),
            wr: Linear::new(params, &format!("{name}.r"), input + hidden, hidden, rng),
            wh: Linear::new(params, &format!("{name}.h"), input + hidden, hidden, rng),
            hidden,
        }
    }

    /// Run over the sequence; returns (all hidden states [hidden, T], final
    /// state [hidden, 1]). `reverse` scans right-to-left but still returns
    /// states in input order.
    pub fn forward_seq(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: Tensor,
        reverse: bool,
    ) -> (Tensor, Tensor) {
        let t_len = g.value(x).shape()[1];
        let mut h = g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.hidden, 1])));
        let mut states: Vec<Tensor> = Vec::with_capacity(t_len);
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for &t in &order {
            let xt = g.slice_axis(x, 1, t, 1);
            let cat = g.concat(0, &[xt, h]);
            let z_pre = self.wz.forward(g, bind, cat);
            let z = g.sigmoid(z_pre);
            let r_pre = self.wr.forward(g, bind, cat);
            let r = g.sigmoid(r_pre);
            let rh = g.mul(r, h);
            let cat2 = g.concat(0, &[xt, rh]);
            let cand_pre = self.wh.forward(g, bind, cat2);
            let cand = g.tanh(cand_pre);
            // h' = (1 - z) * h + z * cand
            let zh = g.mul(z, cand);
            let z_neg = g.scale(z, -1.0);
            let one_minus_z = g.add_scalar(z_neg, 1.0);
            let keep = g.mul(one_minus_z, h);
            h = g.add(keep, zh);
            states.push(h);
        }
        if reverse {
            states.reverse();
        }
        let seq = g.concat(1, &states);
        (seq, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let lin = Linear::new(&mut params, "l", 4, 3, &mut rng);
        let mut g = Graph::new();
        let bind = params.bind(&mut g);
        let x = g.leaf(ArrayD::ones(IxDyn(&[4, 7])));
        let y = lin.forward(&mut g, &bind, x);
        assert_eq!(g.value(y).shape(), &[3, 7]);
    }

    #[test]
    fn conv1d_causal_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let conv = Conv1d::new(&mut params, "c", 2, 2, 3, 2, true, &mut rng);
        let t_len = 10;
        let base = ArrayD::from_shape_fn(IxDyn(&[2, t_len]), |ix| (ix[0] + ix[1]) as f64 * 0.1);
        let run = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let bind = params.bind(&mut g);
            let xt = g.leaf(x.clone());
            let y = conv.forward(&mut g, &bind, xt);
            g.value(y).to_owned()
        };
        let y0 = run(&base);
        // Perturb a future sample; outputs at earlier times must not move.
        let mut pert = base.clone();
        pert[[0, 6]] += 5.0;
        let y1 = run(&pert);
        for t in 0..6 {
            for c in 0..2 {
                assert_eq!(y0[[c, t]], y1[[c, t]], "causality broken at t={t}");
            }
        }
        assert_ne!(y0[[0, 6]], y1[[0, 6]]);
    }

    #[test]
    fn conv2d_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, "c", 1, 4, 3, 3, 2, 2, &mut rng);
        let mut g = Graph::new();
        let bind = params.bind(&mut g);
        let x = g.leaf(ArrayD::ones(IxDyn(&[1, 80, 40])));
        let y = conv.forward(&mut g, &bind, x);
        assert_eq!(g.value(y).shape(), &[4, 40, 20]);
    }

    #[test]
    fn gru_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let gru = Gru::new(&mut params, "g", 3, 5, &mut rng);
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 6]), |ix| (ix[0] * 6 + ix[1]) as f64 * 0.05);
        let run = || {
            let mut g = Graph::new();
            let bind = params.bind(&mut g);
            let xt = g.leaf(x.clone());
            let (seq, last) = gru.forward_seq(&mut g, &bind, xt, false);
            (g.value(seq).to_owned(), g.value(last).to_owned())
        };
        let (seq, last) = run();
        assert_eq!(seq.shape(), &[5, 6]);
        assert_eq!(last.shape(), &[5, 1]);
        let (seq2, _) = run();
        assert_eq!(seq, seq2);
    }

    #[test]
    fn time_norm_zero_mean_unit_var() {
        let mut params = ParamSet::new();
        let norm = TimeNorm::new(&mut params, "n", 2);
        let mut g = Graph::new();
        let bind = params.bind(&mut g);
        let x = g.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 50]), |ix| {
            (ix[1] as f64).sin() * 3.0 + ix[0] as f64 * 10.0
        }));
        let y = norm.forward(&mut g, &bind, x);
        let yv = g.value(y);
        for c in 0..2 {
            let row: Vec<f64> = (0..50).map(|t| yv[[c, t]]).collect();
            let mean = row.iter().sum::<f64>() / 50.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}
