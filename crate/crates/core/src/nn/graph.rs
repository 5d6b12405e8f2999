//! Reverse-mode autodiff on a define-by-run tape.
//!
//! A [`Graph`] is rebuilt for every forward pass; [`Tensor`] handles are
//! indices into it. All values are `f64` n-d arrays. `backward` walks the
//! tape in reverse and accumulates gradients, which keeps the central
//! finite-difference checks in the test suite meaningful.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<ArrayD<f64>>>;

pub struct BackwardCtx<'a> {
    /// Value of the node itself.
    pub out: &'a ArrayD<f64>,
    /// Incoming gradient w.r.t. the node's value.
    pub grad: &'a ArrayD<f64>,
    /// Values of the parent nodes, in order.
    pub parents: Vec<ArrayViewD<'a, f64>>,
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by tensor.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `t`, or zeros if the loss does not depend on it.
    pub fn get(&self, g: &Graph, t: Tensor) -> ArrayD<f64> {
        match &self.grads[t.0] {
            Some(a) => a.clone(),
            None => ArrayD::zeros(g.nodes[t.0].value.raw_dim()),
        }
    }
}

/// Sum `grad` down to `shape`, undoing broadcasting (left-padded axes and
/// size-1 axes).
fn reduce_to_shape(mut grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while grad.ndim() > shape.len() {
        grad = grad.sum_axis(Axis(0));
    }
    let gshape = grad.shape().to_vec();
    for (ax, (&gs, &ps)) in gshape.iter().zip(shape).enumerate() {
        if gs != ps {
            debug_assert_eq!(ps, 1, "incompatible reduce {gshape:?} -> {shape:?}");
            grad = grad
                .sum_axis(Axis(ax))
                .insert_axis(Axis(ax));
        }
    }
    grad
}

fn broadcast_binop(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        out
    } else if let Some(bb) = b.broadcast(a.raw_dim()) {
        let mut out = a.clone();
        out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
        out
    } else if let Some(ab) = a.broadcast(b.raw_dim()) {
        let mut out = ab.to_owned();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        out
    } else {
        panic!("incompatible shapes {:?} and {:?}", a.shape(), b.shape());
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Tensor {
        // Non-finite values are allowed to propagate: divergence is detected
        // at the loss by the training loops, not by crashing mid-graph.
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(value, vec![], None)
    }

    pub fn value(&self, t: Tensor) -> ArrayViewD<'_, f64> {
        self.nodes[t.0].value.view()
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        let v = &self.nodes[t.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_binop(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                vec![
                    reduce_to_shape(ctx.grad.clone(), &sa),
                    reduce_to_shape(ctx.grad.clone(), &sb),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let value = broadcast_binop(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                let av = &ctx.parents[0];
                let bv = &ctx.parents[1];
                let ga = broadcast_binop(&ctx.grad.clone(), &bv.to_owned(), |g, y| g * y);
                let gb = broadcast_binop(&ctx.grad.clone(), &av.to_owned(), |g, x| g * x);
                vec![reduce_to_shape(ga, &sa), reduce_to_shape(gb, &sb)]
            })),
        )
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| -v);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| vec![ctx.grad.mapv(|g| -g)])),
        )
    }

    pub fn scale(&mut self, a: Tensor, k: f64) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| k * v);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| vec![ctx.grad.mapv(|g| k * g)])),
        )
    }

    pub fn add_scalar(&mut self, a: Tensor, k: f64) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v + k);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| vec![ctx.grad.clone()])),
        )
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= y * (1.0 - y));
                vec![g]
            })),
        )
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= 1.0 - y * y);
                vec![g]
            })),
        )
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(&ctx.parents[0], |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                vec![g]
            })),
        )
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= y);
                vec![g]
            })),
        )
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(&ctx.parents[0], |gv, &x| *gv /= x);
                vec![g]
            })),
        )
    }

    pub fn powf(&mut self, a: Tensor, p: f64) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v.powf(p));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(&ctx.parents[0], |gv, &x| *gv *= p * x.powf(p - 1.0));
                vec![g]
            })),
        )
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(&ctx.parents[0], |gv, &x| *gv *= x.signum() * (x != 0.0) as u8 as f64);
                vec![g]
            })),
        )
    }

    /// Clamp with zero gradient outside [lo, hi].
    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let value = self.nodes[a.0].value.mapv(|v| v.clamp(lo, hi));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(&ctx.parents[0], |gv, &x| {
                    if x < lo || x > hi {
                        *gv = 0.0
                    }
                });
                vec![g]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].value.sum();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a.0],
            Some(Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), g)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis_keep(&mut self, a: Tensor, axis: usize) -> Tensor {
        let value = self.nodes[a.0].value.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis grad broadcast")
                    .to_owned();
                vec![g]
            })),
        )
    }

    pub fn mean_axis_keep(&mut self, a: Tensor, axis: usize) -> Tensor {
        let n = self.nodes[a.0].value.shape()[axis] as f64;
        let s = self.sum_axis_keep(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Tensor, axis: usize) -> Tensor {
        let x = &self.nodes[a.0].value;
        let maxes = x.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let maxes = maxes.insert_axis(Axis(axis));
        let mut e = x.clone();
        e.zip_mut_with(&maxes.broadcast(x.raw_dim()).unwrap(), |v, &m| {
            *v = (*v - m).exp()
        });
        let sums = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let mut y = e;
        y.zip_mut_with(&sums.broadcast(y.raw_dim()).unwrap().to_owned(), |v, &s| *v /= s);
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |ctx| {
                // dx = y * (g - sum(g*y, axis))
                let gy = ctx.grad * ctx.out;
                let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let mut dx = ctx.grad.clone();
                dx.zip_mut_with(&s.broadcast(ctx.grad.raw_dim()).unwrap().to_owned(), |v, &sv| {
                    *v -= sv
                });
                dx.zip_mut_with(ctx.out, |v, &yv| *v *= yv);
                vec![dx]
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let orig = self.nodes[a.0].value.shape().to_vec();
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                vec![ctx.grad.clone().into_shape(IxDyn(&orig)).unwrap()]
            })),
        )
    }

    pub fn transpose2(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| vec![ctx.grad.t().to_owned()])),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts
            .iter()
            .map(|t| self.nodes[t.0].value.shape()[axis])
            .collect();
        self.push(
            value,
            parts.iter().map(|t| t.0).collect(),
            Some(Box::new(move |ctx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &sz in &sizes {
                    let g = ctx
                        .grad
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + sz as isize), 1))
                        .to_owned();
                    out.push(g);
                    start += sz as isize;
                }
                out
            })),
        )
    }

    pub fn slice_axis(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let value = self.nodes[a.0]
            .value
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let mut g = ArrayD::zeros(IxDyn(&shape));
                g.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(ctx.grad);
                vec![g]
            })),
        )
    }

    /// Repeat each column `factor` times: [C, T] -> [C, T*factor].
    pub fn repeat_cols(&mut self, a: Tensor, factor: usize) -> Tensor {
        let x = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("repeat_cols needs 2-d input");
        let (c, t) = x.dim();
        let mut y = ndarray::Array2::<f64>::zeros((c, t * factor));
        for j in 0..t * factor {
            y.column_mut(j).assign(&x.column(j / factor));
        }
        self.push(
            y.into_dyn(),
            vec![a.0],
            Some(Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let mut out = ndarray::Array2::<f64>::zeros((c, t));
                for j in 0..t * factor {
                    let col = g.column(j);
                    let mut oc = out.column_mut(j / factor);
                    oc += &col;
                }
                vec![out.into_dyn()]
            })),
        )
    }

    // ---- linear algebra ----

    /// Matrix product of 2-d tensors: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-d");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|ctx| {
                let g = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let av = ctx.parents[0]
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let bv = ctx.parents[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                vec![g.dot(&bv.t()).into_dyn(), av.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// Row gather from an embedding table: [V,d] indexed by `ids` -> [N,d].
    pub fn gather_rows(&mut self, table: Tensor, ids: &[usize]) -> Tensor {
        let tv = self.nodes[table.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("gather_rows table must be 2-d");
        let (v, d) = tv.dim();
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "id {id} out of vocabulary {v}");
            out.row_mut(i).assign(&tv.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            out.into_dyn(),
            vec![table.0],
            Some(Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let mut gt = ndarray::Array2::<f64>::zeros((v, d));
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &g.row(i);
                }
                vec![gt.into_dyn()]
            })),
        )
    }

    // ---- convolutions ----

    /// 1-d convolution along time via im2col: x [Cin, T], w [Cout, Cin*K]
    /// (flattened kernel), dilation `d`. `causal` pads left only; otherwise
    /// "same" padding keeps T.
    pub fn conv1d(&mut self, x: Tensor, w: Tensor, k: usize, dilation: usize, causal: bool) -> Tensor {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("conv1d input must be 2-d");
        let (cin, t) = xv.dim();
        let span = (k - 1) * dilation;
        let pad_left = if causal { span } else { span / 2 };
        let cols = im2col_1d(&xv, k, dilation, pad_left);
        let cols_t = self.leaf(cols.into_dyn());
        // Record the im2col node with a col2im backward.
        let col_node = Tensor(cols_t.0);
        self.nodes[col_node.0].parents = vec![x.0];
        self.nodes[col_node.0].backward = Some(Box::new(move |ctx| {
            let g = ctx
                .grad
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            vec![col2im_1d(&g, cin, t, k, dilation, pad_left).into_dyn()]
        }));
        self.matmul(w, col_node)
    }

    /// 2-d convolution: x [Cin, H, W], w [Cout, Cin*Kh*Kw], stride (sh, sw),
    /// zero "same"-style padding of (Kh-1)/2, (Kw-1)/2.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    ) -> Tensor {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv2d input must be 3-d");
        let (cin, h, wd) = xv.dim();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw + 1;
        let cols = im2col_2d(&xv, kh, kw, sh, sw, ph, pw, oh, ow);
        let col_node = self.leaf(cols.into_dyn());
        self.nodes[col_node.0].parents = vec![x.0];
        self.nodes[col_node.0].backward = Some(Box::new(move |ctx| {
            let g = ctx
                .grad
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            vec![col2im_2d(&g, cin, h, wd, kh, kw, sh, sw, ph, pw, oh, ow).into_dyn()]
        }));
        let y = self.matmul(w, col_node); // [Cout, oh*ow]
        let cout = self.nodes[y.0].value.shape()[0];
        self.reshape(y, &[cout, oh, ow])
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss; returns gradients for every node
    /// the loss depends on.
    pub fn backward(&self, loss: Tensor) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].backward {
                let ctx = BackwardCtx {
                    out: &self.nodes[i].value,
                    grad: &g,
                    parents: self.nodes[i]
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].value.view())
                        .collect(),
                };
                let parent_grads = back(&ctx);
                debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
                for (&p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn im2col_1d(
    x: &ndarray::ArrayView2<f64>,
    k: usize,
    dilation: usize,
    pad_left: usize,
) -> ndarray::Array2<f64> {
    let (cin, t) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((cin * k, t));
    for c in 0..cin {
        for ki in 0..k {
            let row = c * k + ki;
            for out_t in 0..t {
                let src = out_t as isize + (ki * dilation) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    cols[[row, out_t]] = x[[c, src as usize]];
                }
            }
        }
    }
    cols
}

fn col2im_1d(
    g: &ndarray::ArrayView2<f64>,
    cin: usize,
    t: usize,
    k: usize,
    dilation: usize,
    pad_left: usize,
) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::<f64>::zeros((cin, t));
    for c in 0..cin {
        for ki in 0..k {
            let row = c * k + ki;
            for out_t in 0..t {
                let src = out_t as isize + (ki * dilation) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    out[[c, src as usize]] += g[[row, out_t]];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col_2d(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..oh {
                    let sy = (oy * sh + i) as isize - ph as isize;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let sx = (ox * sw + j) as isize - pw as isize;
                        if sx >= 0 && (sx as usize) < w {
                            cols[[row, oy * ow + ox]] = x[[c, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d(
    g: &ndarray::ArrayView2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut out = ndarray::Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..oh {
                    let sy = (oy * sh + i) as isize - ph as isize;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let sx = (ox * sw + j) as isize - pw as isize;
                        if sx >= 0 && (sx as usize) < w {
                            out[[c, sy as usize, sx as usize]] += g[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(arr2(&[[0.5, 0.5], [0.5, 0.5]]).into_dyn());
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, a), arr2(&[[0.5, 0.5], [0.5, 0.5]]).into_dyn());
        assert_eq!(grads.get(&g, b), arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
    }

    #[test]
    fn broadcast_bias_grad_reduces() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::ones(IxDyn(&[3, 4])));
        let b = g.leaf(ArrayD::ones(IxDyn(&[3, 1])));
        let y = g.add(x, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, b).shape(), &[3, 1]);
        assert!(grads.get(&g, b).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn softmax_sums_to_one_and_grad_is_orthogonal_to_ones() {
        let mut g = Graph::new();
        let x = g.leaf(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 5.0]]).into_dyn());
        let y = g.softmax(x, 1);
        for row in g.value(y).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        // d(sum softmax)/dx = 0 because each row always sums to 1.
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(&g, x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matmul_grad_matches_finite_difference() {
        let mut base = arr2(&[[0.3, -0.2], [0.1, 0.7], [0.4, 0.5]]).into_dyn();
        let w = arr2(&[[0.2, 0.8, -0.4], [0.6, -0.1, 0.9]]).into_dyn();

        let eval = |a: &ArrayD<f64>| {
            let mut g = Graph::new();
            let ta = g.leaf(a.clone());
            let tw = g.leaf(w.clone());
            let y = g.matmul(ta, tw);
            let sq = g.mul(y, y);
            let l = g.sum_all(sq);
            (g, ta, l)
        };

        let (g, ta, l) = eval(&base);
        let grads = g.backward(l);
        let analytic = grads.get(&g, ta);

        let h = 1e-5;
        for i in 0..3 {
            for j in 0..2 {
                let orig = base[[i, j]];
                base[[i, j]] = orig + h;
                let (gp, _, lp) = eval(&base);
                let fp = gp.scalar_value(lp);
                base[[i, j]] = orig - h;
                let (gm, _, lm) = eval(&base);
                let fm = gm.scalar_value(lm);
                base[[i, j]] = orig;
                let num = (fp - fm) / (2.0 * h);
                assert_abs_diff_eq!(analytic[[i, j]], num, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn slice_concat_round_trip_grads() {
        let mut g = Graph::new();
        let x = g.leaf(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        let a = g.slice_axis(x, 1, 0, 2);
        let b = g.slice_axis(x, 1, 2, 1);
        let y = g.concat(1, &[a, b]);
        assert_eq!(g.value(y), g.value(x));
        let doubled = g.scale(y, 2.0);
        let s = g.sum_all(doubled);
        let grads = g.backward(s);
        assert!(grads.get(&g, x).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn repeat_cols_shapes_and_grads() {
        let mut g = Graph::new();
        let x = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let y = g.repeat_cols(x, 3);
        assert_eq!(g.value(y).shape(), &[2, 6]);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(&g, x).iter().all(|&v| v == 3.0));
    }
}
