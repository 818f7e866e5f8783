//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape is rebuilt on every forward pass (define-by-run): each operation
//! appends a node holding its output value and enough context to replay the
//! adjoint. `backward` sweeps the nodes in reverse creation order, which is
//! already a reverse topological order, accumulating gradients into every
//! node that (transitively) requires them.
//!
//! Shape violations and misuse are contract bugs and panic with a message;
//! numeric runtime conditions are reported by the callers that own them.

use crate::tensor::Tensor;

/// Handle to a tensor registered on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction applied by `softmax_cross_entropy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    /// x * s with s a single-element tensor participating in the graph.
    ScaleByScalar { x: Var, s: Var },
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, istd: Vec<f64> },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, reduction: Reduction, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass; owns all intermediate values and gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Dot product with eight independent accumulators: a fixed summation order
/// that the compiler can vectorize without reassociating floats.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let j = 8 * i;
        for l in 0..8 {
            acc[l] += a[j + l] * b[j + l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for j in 8 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Output spatial extent of a same-padded strided convolution.
fn conv_out_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a tensor that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            ta.same_shape(tb),
            "elementwise shape mismatch: {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiply by a compile-time-known scalar constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| c * v).collect();
        let shape = t.shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, Op::Scale(x, c), rg)
    }

    /// Multiply by a single-element tensor that participates in the graph
    /// (gradient flows into `s` as well as `x`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.numel(), 1, "scale_by expects a single-element scalar, got {:?}", sv.shape);
        let c = sv.data[0];
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| c * v).collect();
        let shape = t.shape.clone();
        let rg = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        self.push(Tensor { shape, data }, Op::ScaleByScalar { x, s }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let total: f64 = t.data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = t.shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, Op::Sigmoid(x), rg)
    }

    /// Affine map: `x[batch,in] · w[in,out] + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        assert_eq!(tx.shape.len(), 2, "dense input must be [batch,in], got {:?}", tx.shape);
        assert_eq!(tw.shape.len(), 2, "dense weight must be [in,out], got {:?}", tw.shape);
        let (batch, d_in) = (tx.shape[0], tx.shape[1]);
        let (w_in, d_out) = (tw.shape[0], tw.shape[1]);
        assert_eq!(d_in, w_in, "dense inner dimensions disagree: {d_in} vs {w_in}");
        assert_eq!(tb.shape, vec![d_out], "dense bias must be [{d_out}], got {:?}", tb.shape);

        let mut data = vec![0.0; batch * d_out];
        for bi in 0..batch {
            let y_row = &mut data[bi * d_out..(bi + 1) * d_out];
            y_row.copy_from_slice(&tb.data);
            let x_row = &tx.data[bi * d_in..(bi + 1) * d_in];
            for (k, &xv) in x_row.iter().enumerate() {
                let w_row = &tw.data[k * d_out..(k + 1) * d_out];
                for (yv, &wv) in y_row.iter_mut().zip(w_row) {
                    *yv += xv * wv;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(Tensor::new(vec![batch, d_out], data), Op::Dense { x, w, b }, rg)
    }

    /// Same-padded strided cross-correlation:
    /// `x[batch,c_in,h,w] * k[c_out,c_in,kh,kw] + b[c_out]`,
    /// output spatial extents `ceil(h/stride) × ceil(w/stride)`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Var {
        let (tx, tk, tb) = (&self.nodes[x.0].value, &self.nodes[k.0].value, &self.nodes[b.0].value);
        assert!(stride >= 1, "conv2d stride must be ≥ 1");
        assert_eq!(tx.shape.len(), 4, "conv2d input must be [batch,c,h,w], got {:?}", tx.shape);
        assert_eq!(tk.shape.len(), 4, "conv2d kernel must be [co,ci,kh,kw], got {:?}", tk.shape);
        let (batch, c_in, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (c_out, kc_in, kh, kw) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        assert_eq!(c_in, kc_in, "conv2d channel mismatch: input {c_in}, kernel {kc_in}");
        assert!(kh % 2 == 1 && kw % 2 == 1, "same padding needs odd kernel extents, got {kh}×{kw}");
        assert_eq!(tb.shape, vec![c_out], "conv2d bias must be [{c_out}], got {:?}", tb.shape);
        let (oh, ow) = (conv_out_extent(h, stride), conv_out_extent(w, stride));

        let cols = c_in * kh * kw;
        let pixels = oh * ow;
        // tap-major patches: the kernel matrix multiplies them as stored and
        // the product lands directly in channel-major output layout; the
        // per-image patch matrix is small enough to stay cached
        let mut pt = vec![0.0; cols * pixels];
        let mut data = vec![0.0; batch * c_out * pixels];
        for bi in 0..batch {
            let x_img = &tx.data[bi * c_in * h * w..][..c_in * h * w];
            im2col_image(x_img, c_in, h, w, kh, kw, stride, oh, ow, &mut pt);
            let out_img = &mut data[bi * c_out * pixels..][..c_out * pixels];
            gemm_set(out_img, &tk.data, &pt, c_out, cols, pixels);
            for (co, chan) in out_img.chunks_exact_mut(pixels).enumerate() {
                let bias = tb.data[co];
                for v in chan {
                    *v += bias;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[k.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(
            Tensor::new(vec![batch, c_out, oh, ow], data),
            Op::Conv2d { x, w: k, b, stride },
            rg,
        )
    }

    /// Per-(sample, group) standardization followed by per-channel affine.
    /// Accepts `[batch, c]` or `[batch, c, h, w]`; statistics pool channels
    /// within a group together with all trailing spatial positions.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        assert!(eps > 0.0, "group_norm eps must be positive");
        assert!(tx.shape.len() >= 2, "group_norm input must be [batch,c,..], got {:?}", tx.shape);
        let (batch, c) = (tx.shape[0], tx.shape[1]);
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(tg.shape, vec![c], "gamma must be [{c}], got {:?}", tg.shape);
        assert_eq!(tb.shape, vec![c], "beta must be [{c}], got {:?}", tb.shape);
        let spatial: usize = tx.shape[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;

        let mut data = vec![0.0; tx.numel()];
        let mut means = vec![0.0; batch * groups];
        let mut istds = vec![0.0; batch * groups];
        for bi in 0..batch {
            for gi in 0..groups {
                let base = (bi * c + gi * cpg) * spatial;
                let xs = &tx.data[base..base + m];
                let mean = xs.iter().sum::<f64>() / m as f64;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let istd = 1.0 / (var + eps).sqrt();
                means[bi * groups + gi] = mean;
                istds[bi * groups + gi] = istd;
                for local_c in 0..cpg {
                    let ch = gi * cpg + local_c;
                    let a = tg.data[ch] * istd;
                    let shift = tb.data[ch] - a * mean;
                    let off = base + local_c * spatial;
                    for (y, &xv) in data[off..off + spatial].iter_mut().zip(&tx.data[off..off + spatial]) {
                        *y = a * xv + shift;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let shape = tx.shape.clone();
        self.push(
            Tensor { shape, data },
            Op::GroupNorm { x, gamma, beta, groups, mean: means, istd: istds },
            rg,
        )
    }

    /// `[batch, c, h, w] → [batch, c]`, mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        assert_eq!(tx.shape.len(), 4, "global_avg_pool input must be [batch,c,h,w], got {:?}", tx.shape);
        let (batch, c) = (tx.shape[0], tx.shape[1]);
        let spatial = tx.shape[2] * tx.shape[3];
        let mut data = vec![0.0; batch * c];
        for bc in 0..batch * c {
            data[bc] = tx.data[bc * spatial..(bc + 1) * spatial].iter().sum::<f64>() / spatial as f64;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(vec![batch, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// Numerically stabilized softmax cross-entropy over `[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Var {
        let tl = &self.nodes[logits.0].value;
        assert_eq!(tl.shape.len(), 2, "logits must be [batch,classes], got {:?}", tl.shape);
        let (batch, classes) = (tl.shape[0], tl.shape[1]);
        assert_eq!(labels.len(), batch, "got {} labels for batch {batch}", labels.len());
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for bi in 0..batch {
            let label = labels[bi];
            assert!(label < classes, "label {label} out of range for {classes} classes");
            let row = &tl.data[bi * classes..(bi + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[bi * classes + j] = e;
                denom += e;
            }
            for p in &mut probs[bi * classes..(bi + 1) * classes] {
                *p /= denom;
            }
            total += denom.ln() - (row[label] - max);
        }
        if reduction == Reduction::Mean {
            total /= batch as f64;
        }
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), reduction, probs },
            rg,
        )
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(contribution) {
                    *gv += c;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    fn accumulate_copy(&mut self, v: Var, contribution: &[f64]) {
        if self.nodes[v.0].requires_grad {
            self.accumulate(v, contribution.to_vec());
        }
    }

    fn grad_buffer(&mut self, v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]))
    }

    /// Populate gradients of `loss` with respect to every participating
    /// tensor that requires them. `loss` must be a single-element tensor.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape
        );
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gy = self.grads[idx].take().unwrap();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        self.accumulate_copy(a, &gy);
                    }
                    if self.nodes[b.0].requires_grad {
                        self.accumulate_copy(b, &gy);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        self.accumulate_copy(a, &gy);
                    }
                    if self.nodes[b.0].requires_grad {
                        let neg: Vec<f64> = gy.iter().map(|&g| -g).collect();
                        self.accumulate(b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let ga: Vec<f64> =
                            gy.iter().zip(&self.nodes[b.0].value.data).map(|(&g, &bv)| g * bv).collect();
                        self.accumulate(a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb: Vec<f64> =
                            gy.iter().zip(&self.nodes[a.0].value.data).map(|(&g, &av)| g * av).collect();
                        self.accumulate(b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let ga: Vec<f64> =
                            gy.iter().zip(&self.nodes[b.0].value.data).map(|(&g, &bv)| g / bv).collect();
                        self.accumulate(a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let y = &self.nodes[idx].value.data;
                        let gb: Vec<f64> = gy
                            .iter()
                            .zip(y)
                            .zip(&self.nodes[b.0].value.data)
                            .map(|((&g, &yv), &bv)| -g * yv / bv)
                            .collect();
                        self.accumulate(b, gb);
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    if self.nodes[x.0].requires_grad {
                        let gx: Vec<f64> = gy.iter().map(|&g| c * g).collect();
                        self.accumulate(x, gx);
                    }
                }
                Op::ScaleByScalar { x, s } => {
                    let (x, s) = (*x, *s);
                    let c = self.nodes[s.0].value.data[0];
                    if self.nodes[x.0].requires_grad {
                        let gx: Vec<f64> = gy.iter().map(|&g| c * g).collect();
                        self.accumulate(x, gx);
                    }
                    if self.nodes[s.0].requires_grad {
                        let gs = dot(&gy, &self.nodes[x.0].value.data);
                        self.accumulate(s, vec![gs]);
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if self.nodes[x.0].requires_grad {
                        let gx = vec![gy[0]; self.nodes[x.0].value.numel()];
                        self.accumulate(x, gx);
                    }
                }
                Op::Relu(x) if self.nodes[x.0].requires_grad => {
                    let x = *x;
                    let gx: Vec<f64> = gy
                        .iter()
                        .zip(&self.nodes[x.0].value.data)
                        .map(|(&g, &xv)| if xv > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(x, gx);
                }
                Op::Sigmoid(x) if self.nodes[x.0].requires_grad => {
                    let x = *x;
                    let y = &self.nodes[idx].value.data;
                    let gx: Vec<f64> = gy.iter().zip(y).map(|(&g, &yv)| g * yv * (1.0 - yv)).collect();
                    self.accumulate(x, gx);
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    self.backward_dense(idx, x, w, b, &gy);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (x, w, b, stride) = (*x, *w, *b, *stride);
                    self.backward_conv2d(x, w, b, stride, &gy);
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, istd } => {
                    let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                    let (mean, istd) = (mean.clone(), istd.clone());
                    self.backward_group_norm(x, gamma, beta, groups, &mean, &istd, &gy);
                }
                Op::GlobalAvgPool(x) if self.nodes[x.0].requires_grad => {
                    let x = *x;
                    let tx_shape = &self.nodes[x.0].value.shape;
                    let spatial = tx_shape[2] * tx_shape[3];
                    let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (bc, &g) in gy.iter().enumerate() {
                        let share = g / spatial as f64;
                        for v in &mut gx[bc * spatial..(bc + 1) * spatial] {
                            *v = share;
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, reduction, probs }
                    if self.nodes[logits.0].requires_grad =>
                {
                    let logits = *logits;
                    let scale = match reduction {
                        Reduction::Mean => gy[0] / labels.len() as f64,
                        Reduction::Sum => gy[0],
                    };
                    let classes = self.nodes[logits.0].value.shape[1];
                    let mut gl = probs.clone();
                    for (bi, &label) in labels.iter().enumerate() {
                        gl[bi * classes + label] -= 1.0;
                    }
                    for g in &mut gl {
                        *g *= scale;
                    }
                    self.accumulate(logits, gl);
                }
                // ops whose only upstream input does not require a gradient
                Op::Relu(_)
                | Op::Sigmoid(_)
                | Op::GlobalAvgPool(_)
                | Op::SoftmaxCrossEntropy { .. } => {}
            }
            self.grads[idx] = Some(gy);
        }
    }

    fn backward_dense(&mut self, _y: usize, x: Var, w: Var, b: Var, gy: &[f64]) {
        let (tx_ptr, tw_ptr) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (batch, d_in) = (tx_ptr.shape[0], tx_ptr.shape[1]);
        let d_out = tw_ptr.shape[1];

        if self.nodes[x.0].requires_grad {
            let mut gx = self.grad_buffer(x).unwrap();
            let tw = &self.nodes[w.0].value.data;
            for bi in 0..batch {
                let gy_row = &gy[bi * d_out..(bi + 1) * d_out];
                for k in 0..d_in {
                    gx[bi * d_in + k] += dot(gy_row, &tw[k * d_out..(k + 1) * d_out]);
                }
            }
            self.grads[x.0] = Some(gx);
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = self.grad_buffer(w).unwrap();
            for bi in 0..batch {
                let gy_row = &gy[bi * d_out..(bi + 1) * d_out];
                let x_row = &self.nodes[x.0].value.data[bi * d_in..(bi + 1) * d_in];
                for (k, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (gwv, &g) in gw[k * d_out..(k + 1) * d_out].iter_mut().zip(gy_row) {
                        *gwv += xv * g;
                    }
                }
            }
            self.grads[w.0] = Some(gw);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = self.grad_buffer(b).unwrap();
            for bi in 0..batch {
                for (gbv, &g) in gb.iter_mut().zip(&gy[bi * d_out..(bi + 1) * d_out]) {
                    *gbv += g;
                }
            }
            self.grads[b.0] = Some(gb);
        }
    }

    fn backward_conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, gy: &[f64]) {
        let tx_shape = self.nodes[x.0].value.shape.clone();
        let tk_shape = self.nodes[w.0].value.shape.clone();
        let (batch, c_in, h, wd) = (tx_shape[0], tx_shape[1], tx_shape[2], tx_shape[3]);
        let (c_out, _, kh, kw) = (tk_shape[0], tk_shape[1], tk_shape[2], tk_shape[3]);
        let (oh, ow) = (conv_out_extent(h, stride), conv_out_extent(wd, stride));
        let cols = c_in * kh * kw;
        let pixels = oh * ow;

        let mut gx_buf =
            if self.nodes[x.0].requires_grad { Some(self.grad_buffer(x).unwrap()) } else { None };
        let mut gw_buf =
            if self.nodes[w.0].requires_grad { Some(self.grad_buffer(w).unwrap()) } else { None };
        let mut gb_buf =
            if self.nodes[b.0].requires_grad { Some(self.grad_buffer(b).unwrap()) } else { None };

        let tx = &self.nodes[x.0].value.data;
        let tk = &self.nodes[w.0].value.data;
        // per-image scratch: the patch matrices stay cache-resident; the
        // input-gradient product wants the kernel tap-major, the kernel
        // gradient accumulates tap-major and is folded back at the end
        let mut wt = vec![0.0; if gx_buf.is_some() { cols * c_out } else { 0 }];
        if gx_buf.is_some() {
            transpose(tk, c_out, cols, &mut wt);
        }
        let mut gpt = vec![0.0; if gx_buf.is_some() { cols * pixels } else { 0 }];
        let gw_scratch = gw_buf.is_some();
        let mut pt = vec![0.0; if gw_scratch { cols * pixels } else { 0 }];
        let mut gy_rt = vec![0.0; if gw_scratch { pixels * c_out } else { 0 }];
        let mut gw_t = vec![0.0; if gw_scratch { cols * c_out } else { 0 }];
        for bi in 0..batch {
            let gy_img = &gy[bi * c_out * pixels..][..c_out * pixels];
            if let Some(gx) = gx_buf.as_mut() {
                gemm_set(&mut gpt, &wt, gy_img, cols, c_out, pixels);
                let gx_img = &mut gx[bi * c_in * h * wd..][..c_in * h * wd];
                col2im_image_add(&gpt, gx_img, c_in, h, wd, kh, kw, stride, oh, ow);
            }
            if gw_scratch {
                transpose(gy_img, c_out, pixels, &mut gy_rt);
                let x_img = &tx[bi * c_in * h * wd..][..c_in * h * wd];
                im2col_image(x_img, c_in, h, wd, kh, kw, stride, oh, ow, &mut pt);
                gemm_acc(&mut gw_t, &pt, &gy_rt, cols, pixels, c_out);
            }
            if let Some(gb) = gb_buf.as_mut() {
                for co in 0..c_out {
                    gb[co] += gy_img[co * pixels..(co + 1) * pixels].iter().sum::<f64>();
                }
            }
        }
        if let Some(gw) = gw_buf.as_mut() {
            for co in 0..c_out {
                for (cl, gwt_row) in gw_t.chunks_exact(c_out).enumerate() {
                    gw[co * cols + cl] += gwt_row[co];
                }
            }
        }

        if let Some(gx) = gx_buf {
            self.grads[x.0] = Some(gx);
        }
        if let Some(gw) = gw_buf {
            self.grads[w.0] = Some(gw);
        }
        if let Some(gb) = gb_buf {
            self.grads[b.0] = Some(gb);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[f64],
        istd: &[f64],
        gy: &[f64],
    ) {
        let shape = self.nodes[x.0].value.shape.clone();
        let (batch, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;

        let mut gx = if self.nodes[x.0].requires_grad { self.grad_buffer(x) } else { None };
        let mut ggamma = if self.nodes[gamma.0].requires_grad { self.grad_buffer(gamma) } else { None };
        let mut gbeta = if self.nodes[beta.0].requires_grad { self.grad_buffer(beta) } else { None };

        for bi in 0..batch {
            for gi in 0..groups {
                let base = (bi * c + gi * cpg) * spatial;
                let mu = mean[bi * groups + gi];
                let is = istd[bi * groups + gi];
                let xs = &self.nodes[x.0].value.data[base..base + m];
                let gys = &gy[base..base + m];

                if gx.is_some() {
                    // dxhat_i = gy_i·γ; gx_i = istd·(dxhat_i − (Σdxhat + xhat_i·Σdxhat·xhat)/m)
                    let mut sum1 = 0.0;
                    let mut sum2 = 0.0;
                    for local_c in 0..cpg {
                        let g = self.nodes[gamma.0].value.data[gi * cpg + local_c];
                        for si in 0..spatial {
                            let i = local_c * spatial + si;
                            let dxhat = gys[i] * g;
                            let xhat = (xs[i] - mu) * is;
                            sum1 += dxhat;
                            sum2 += dxhat * xhat;
                        }
                    }
                    let gx_buf = gx.as_mut().unwrap();
                    let inv_m = 1.0 / m as f64;
                    for local_c in 0..cpg {
                        let g = self.nodes[gamma.0].value.data[gi * cpg + local_c];
                        for si in 0..spatial {
                            let i = local_c * spatial + si;
                            let dxhat = gys[i] * g;
                            let xhat = (xs[i] - mu) * is;
                            gx_buf[base + i] += is * (dxhat - (sum1 + xhat * sum2) * inv_m);
                        }
                    }
                }
                if let Some(gg) = ggamma.as_mut() {
                    for local_c in 0..cpg {
                        let mut acc = 0.0;
                        for si in 0..spatial {
                            let i = local_c * spatial + si;
                            acc += gys[i] * (xs[i] - mu) * is;
                        }
                        gg[gi * cpg + local_c] += acc;
                    }
                }
                if let Some(gb) = gbeta.as_mut() {
                    for local_c in 0..cpg {
                        gb[gi * cpg + local_c] +=
                            gys[local_c * spatial..(local_c + 1) * spatial].iter().sum::<f64>();
                    }
                }
            }
        }
        if let Some(g) = gx {
            self.grads[x.0] = Some(g);
        }
        if let Some(g) = ggamma {
            self.grads[gamma.0] = Some(g);
        }
        if let Some(g) = gbeta {
            self.grads[beta.0] = Some(g);
        }
    }
}

/// Dense row-major product-accumulate `C += A·B` with `A: [m×k]`,
/// `B: [k×n]`, `C: [m×n]`. Every convolution pass (forward, input
/// gradient, kernel gradient) funnels through this one kernel: a register
/// tile of C accumulates across the whole shared dimension, so C traffic
/// happens once per tile.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm_impl::<false>(c, a, b, m, k, n);
}

/// Like `gemm_acc` but overwrites: `C = A·B`. Saves zeroing C first.
pub(crate) fn gemm_set(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm_impl::<true>(c, a, b, m, k, n);
}

fn gemm_impl<const SET: bool>(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let n16 = n - n % 16;
    let n8 = n - n % 8;
    let n4 = n - n % 4;
    let mut jt = 0;
    while jt < n16 {
        gemm_panel::<16, SET>(c, a, b, m, k, n, jt);
        jt += 16;
    }
    while jt < n8 {
        gemm_panel::<8, SET>(c, a, b, m, k, n, jt);
        jt += 8;
    }
    while jt < n4 {
        gemm_panel::<4, SET>(c, a, b, m, k, n, jt);
        jt += 4;
    }
    for j in n4..n {
        for i in 0..m {
            let mut s = 0.0;
            for kk in 0..k {
                s = a[i * k + kk].mul_add(b[kk * n + j], s);
            }
            if SET {
                c[i * n + j] = s;
            } else {
                c[i * n + j] += s;
            }
        }
    }
}

/// One NR-wide column panel of the product, 4 rows of C per register tile.
fn gemm_panel<const NR: usize, const SET: bool>(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    jt: usize,
) {
    const MR: usize = 4;
    let m_main = m - m % MR;
    let mut it = 0;
    while it < m_main {
        let mut acc = [[0.0f64; NR]; MR];
        for kk in 0..k {
            let brow: &[f64; NR] = b[kk * n + jt..kk * n + jt + NR].try_into().expect("panel");
            for (r, accr) in acc.iter_mut().enumerate() {
                let av = a[(it + r) * k + kk];
                for (av_acc, &bv) in accr.iter_mut().zip(brow) {
                    *av_acc = av.mul_add(bv, *av_acc);
                }
            }
        }
        for (r, accr) in acc.iter().enumerate() {
            let crow = &mut c[(it + r) * n + jt..(it + r) * n + jt + NR];
            for (cv, &av) in crow.iter_mut().zip(accr) {
                if SET {
                    *cv = av;
                } else {
                    *cv += av;
                }
            }
        }
        it += MR;
    }
    while it < m {
        let mut acc = [0.0f64; NR];
        for kk in 0..k {
            let av = a[it * k + kk];
            let brow: &[f64; NR] = b[kk * n + jt..kk * n + jt + NR].try_into().expect("panel");
            for (av_acc, &bv) in acc.iter_mut().zip(brow) {
                *av_acc = av.mul_add(bv, *av_acc);
            }
        }
        for (cv, &av) in c[it * n + jt..it * n + jt + NR].iter_mut().zip(&acc) {
            if SET {
                *cv = av;
            } else {
                *cv += av;
            }
        }
        it += 1;
    }
}

/// `dst[j][i] = src[i][j]` for a row-major `rows×cols` matrix.
fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const BLK: usize = 16;
    for i0 in (0..rows).step_by(BLK) {
        for j0 in (0..cols).step_by(BLK) {
            for i in i0..(i0 + BLK).min(rows) {
                for j in j0..(j0 + BLK).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// Lay one image's patches out tap-major: row = (channel, kernel tap),
/// column = output pixel; out-of-bounds taps stay zero. Each row is filled
/// by shifted copies of image rows, so a unit-stride convolution moves whole
/// contiguous runs instead of single elements.
#[allow(clippy::too_many_arguments)]
fn im2col_image(
    x_img: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pt: &mut [f64],
) {
    let pixels = oh * ow;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    debug_assert_eq!(pt.len(), c_in * kh * kw * pixels);
    for ci in 0..c_in {
        let x_chan = &x_img[ci * h * w..][..h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let tap = (ci * kh + ki) * kw + kj;
                let dst_tap = &mut pt[tap * pixels..][..pixels];
                for oi in 0..oh {
                    let dst = &mut dst_tap[oi * ow..][..ow];
                    let ii = (oi * stride + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let x_row = &x_chan[ii as usize * w..][..w];
                    if stride == 1 {
                        let shift = kj as isize - pw as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(
                            &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                        );
                        dst[hi..].fill(0.0);
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pw as isize;
                            *d = if jj >= 0 && jj < w as isize { x_row[jj as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_image`: add one image's tap-major patch gradients back
/// onto that image, accumulating where taps overlap. Unit-stride taps reduce
/// to shifted row additions over contiguous runs.
#[allow(clippy::too_many_arguments)]
fn col2im_image_add(
    gpt: &[f64],
    gx_img: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let pixels = oh * ow;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    debug_assert_eq!(gpt.len(), c_in * kh * kw * pixels);
    for ci in 0..c_in {
        let gx_chan = &mut gx_img[ci * h * w..][..h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let tap = (ci * kh + ki) * kw + kj;
                let src_tap = &gpt[tap * pixels..][..pixels];
                for oi in 0..oh {
                    let src = &src_tap[oi * ow..][..ow];
                    let ii = (oi * stride + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let gx_row = &mut gx_chan[ii as usize * w..][..w];
                    if stride == 1 {
                        let shift = kj as isize - pw as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        let base = (lo as isize + shift) as usize;
                        for (g, &s) in gx_row[base..base + (hi - lo)].iter_mut().zip(&src[lo..hi])
                        {
                            *g += s;
                        }
                    } else {
                        for (oj, &s) in src.iter().enumerate() {
                            let jj = (oj * stride + kj) as isize - pw as isize;
                            if jj >= 0 && jj < w as isize {
                                gx_row[jj as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient oracle:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite differences need h > 0");
    let mut grad = Tensor::zeros(x.shape.clone());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between an autodiff gradient and its finite-difference
/// oracle, with the denominator floored at 1e-8.
pub fn max_relative_error(autodiff: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(autodiff.len(), oracle.len());
    autodiff
        .iter()
        .zip(oracle)
        .map(|(&a, &o)| (a - o).abs() / (o.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut SeededRng) -> Tensor {
        Tensor::gaussian(shape, 1.0, rng)
    }

    // ── Forward oracles ──────────────────────────────────────────────────

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let sum = t.add(a, b);
        assert_eq!(t.value(sum).data, vec![4.0, 6.0]);
        let scaled = t.scale(a, 0.5);
        assert_eq!(t.value(scaled).data, vec![0.5, 1.0]);
        let two = t.constant(Tensor::new(vec![1], vec![2.0]));
        let zero = t.constant(Tensor::new(vec![1], vec![0.0]));
        let prod = t.mul(two, zero);
        assert_eq!(t.value(prod).data, vec![0.0]);
    }

    #[test]
    #[should_panic(expected = "elementwise shape mismatch")]
    fn elementwise_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2]));
        let b = t.constant(Tensor::zeros(vec![3]));
        t.add(a, b);
    }

    #[test]
    fn dense_trivial_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]));
        let w = t.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]));
        let b = t.constant(Tensor::zeros(vec![2]));
        let y = t.dense(x, w, b);
        assert_eq!(t.value(y).data, vec![2.0, 0.0]);

        let x2 = t.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let ones = t.constant(Tensor::new(vec![2], vec![1.0, 1.0]));
        let y2 = t.dense(x2, eye, ones);
        assert_eq!(t.value(y2).data, vec![2.0, 2.0]);
    }

    #[test]
    fn dense_matches_triple_loop_oracle_exactly() {
        let mut rng = SeededRng::new(100);
        let x = rand_tensor(vec![3, 4], &mut rng);
        let w = rand_tensor(vec![4, 2], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);

        let mut oracle = vec![0.0; 3 * 2];
        for bi in 0..3 {
            for o in 0..2 {
                let mut s = b.data[o];
                for k in 0..4 {
                    s += x.data[bi * 4 + k] * w.data[k * 2 + o];
                }
                oracle[bi * 2 + o] = s;
            }
        }

        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.dense(xv, wv, bv);
        assert_eq!(t.value(y).data, oracle);
    }

    /// Literal six-nested-loop convolution, written independently of the
    /// production loop ordering.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (batch, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (c_out, _, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut y = Tensor::zeros(vec![batch, c_out, oh, ow]);
        for bi in 0..batch {
            for co in 0..c_out {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut s = b.data[co];
                        for ci in 0..c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * stride + ki) as isize - ph as isize;
                                    let jj = (oj * stride + kj) as isize - pw as isize;
                                    if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                                        s += x.data[((bi * c_in + ci) * h + ii as usize) * w + jj as usize]
                                            * k.data[((co * c_in + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        y.data[((bi * c_out + co) * oh + oi) * ow + oj] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut rng = SeededRng::new(101);
        let x = rand_tensor(vec![1, 1, 4, 4], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let k = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let b = t.constant(Tensor::zeros(vec![1]));
        let y = t.conv2d(xv, k, b, 1);
        assert_eq!(t.value(y).data, x.data);
    }

    #[test]
    fn conv2d_ones_kernel_on_constant_image_gives_9c_interior() {
        let c = 1.5;
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(vec![1, 1, 5, 5], c));
        let k = t.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(vec![1]));
        let y = t.conv2d(x, k, b, 1);
        // interior pixel away from padding
        assert!((t.value(y).data[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
        // corner only overlaps 4 pixels
        assert!((t.value(y).data[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = SeededRng::new(102);
        for stride in [1usize, 2] {
            let x = rand_tensor(vec![2, 2, 5, 5], &mut rng);
            let k = rand_tensor(vec![3, 2, 3, 3], &mut rng);
            let b = rand_tensor(vec![3], &mut rng);
            let oracle = conv_oracle(&x, &k, &b, stride);
            let mut t = Tape::new();
            let (xv, kv, bv) = (t.constant(x), t.constant(k), t.constant(b));
            let y = t.conv2d(xv, kv, bv, stride);
            assert_eq!(t.value(y).shape, oracle.shape);
            let err = t.value(y).linf_distance(&oracle);
            assert!(err < 1e-12, "stride {stride}: max deviation {err}");
        }
    }

    #[test]
    fn conv2d_stride_2_output_shape() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 8, 8]));
        let k = t.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = t.constant(Tensor::zeros(vec![1]));
        let y = t.conv2d(x, k, b, 2);
        assert_eq!(t.value(y).shape, vec![1, 1, 4, 4]);
        // odd extent rounds up
        let x5 = t.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        let y5 = t.conv2d(x5, k, b, 2);
        assert_eq!(t.value(y5).shape, vec![1, 1, 3, 3]);
    }

    #[test]
    fn group_norm_standardizes_then_shifts() {
        // single group, γ=1, β=0: mean 5 var 4 input becomes mean 0 var ≈ 1
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 1, 4], vec![3.0, 3.0, 7.0, 7.0]));
        let gamma = t.constant(Tensor::filled(vec![1], 1.0));
        let beta = t.constant(Tensor::zeros(vec![1]));
        let y = t.group_norm(x, gamma, beta, 1, 1e-5);
        let out = &t.value(y).data;
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn group_norm_zero_variance_returns_beta() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(vec![2, 2, 2, 2], 3.25));
        let gamma = t.constant(Tensor::filled(vec![2], 1.0));
        let beta = t.constant(Tensor::filled(vec![2], 7.0));
        let y = t.group_norm(x, gamma, beta, 2, 1e-5);
        for &v in &t.value(y).data {
            assert!((v - 7.0).abs() < 1e-9, "eps must guard the division: {v}");
        }
    }

    #[test]
    fn group_norm_per_group_statistics_oracle() {
        let mut rng = SeededRng::new(103);
        let (batch, c, h, w, groups) = (2, 6, 3, 3, 3);
        let x = rand_tensor(vec![batch, c, h, w], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let gamma = t.constant(Tensor::filled(vec![c], 1.0));
        let beta = t.constant(Tensor::zeros(vec![c]));
        let y = t.group_norm(xv, gamma, beta, groups, 1e-6);
        let out = &t.value(y).data;
        let (cpg, spatial) = (c / groups, h * w);
        for bi in 0..batch {
            for gi in 0..groups {
                let base = (bi * c + gi * cpg) * spatial;
                let xs = &out[base..base + cpg * spatial];
                let m = (cpg * spatial) as f64;
                let mean = xs.iter().sum::<f64>() / m;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                assert!(mean.abs() < 1e-6, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "group var {var}");
            }
        }
    }

    #[test]
    fn relu_and_sigmoid_pointwise_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![-3.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data, vec![0.0, 0.0, 2.0]);
        let s0 = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(s0);
        assert_eq!(t.value(s).data, vec![0.5]);
        // monotone approach to 1
        let mut prev = 0.5;
        for v in [1.0, 5.0, 20.0, 80.0] {
            let xv = t.constant(Tensor::scalar(v));
            let sv = t.sigmoid(xv);
            let out = t.value(sv).data[0];
            assert!(out > prev && out <= 1.0);
            prev = out;
        }
        assert!((prev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits_is_ln_c() {
        let mut t = Tape::new();
        for classes in [2usize, 3, 10] {
            let logits = t.constant(Tensor::filled(vec![1, classes], 0.7));
            let loss = t.softmax_cross_entropy(logits, &[0], Reduction::Mean);
            assert!((t.value(loss).data[0] - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_one_hot_logit_drives_loss_to_zero() {
        let mut t = Tape::new();
        let mut prev = f64::INFINITY;
        for mag in [2.0, 8.0, 32.0] {
            let logits = t.constant(Tensor::new(vec![1, 3], vec![mag, 0.0, 0.0]));
            let loss = t.softmax_cross_entropy(logits, &[0], Reduction::Mean);
            let l = t.value(loss).data[0];
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn softmax_cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = SeededRng::new(104);
        let logits = rand_tensor(vec![4, 3], &mut rng);
        let labels = [2usize, 0, 1, 1];
        let mut oracle = 0.0;
        for bi in 0..4 {
            let row = &logits.data[bi * 3..(bi + 1) * 3];
            let lse = row.iter().map(|&v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[labels[bi]];
        }
        oracle /= 4.0;
        let mut t = Tape::new();
        let lv = t.constant(logits);
        let loss = t.softmax_cross_entropy(lv, &labels, Reduction::Mean);
        assert!((t.value(loss).data[0] - oracle).abs() < 1e-10);
    }

    #[test]
    #[should_panic(expected = "label 3 out of range")]
    fn softmax_cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![1, 3]));
        t.softmax_cross_entropy(logits, &[3], Reduction::Mean);
    }

    // ── Backward ─────────────────────────────────────────────────────────

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![5.0, -1.0, 2.0]), true);
        let loss = t.sum(x);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let sq = t.mul(x, x);
        let loss = t.sum(sq);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "backward needs a scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![3]), true);
        t.backward(x);
    }

    /// Autodiff vs finite differences for a closure that rebuilds the same
    /// computation from perturbed leaf values.
    fn check_op_gradient(
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: &Tensor,
        tolerance: f64,
    ) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), true);
        let y = build(&mut t, x);
        let loss = t.sum(y);
        t.backward(loss);
        let autodiff = t.grad(x).unwrap().to_vec();

        let fd = finite_difference_gradient(
            |probe| {
                let mut t2 = Tape::new();
                let xv = t2.leaf(probe.clone(), false);
                let y2 = build(&mut t2, xv);
                let l2 = t2.sum(y2);
                t2.value(l2).data[0]
            },
            x0,
            1e-4,
        );
        let err = max_relative_error(&autodiff, &fd.data);
        assert!(err < tolerance, "max relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        let mut rng = SeededRng::new(105);

        let x_img = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let k = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        let kb = rand_tensor(vec![3], &mut rng);
        check_op_gradient(
            |t, x| {
                let kv = t.constant(k.clone());
                let bv = t.constant(kb.clone());
                let c = t.conv2d(x, kv, bv, 1);
                t.sigmoid(c)
            },
            &x_img,
            1e-4,
        );

        let gamma = rand_tensor(vec![4], &mut rng);
        let beta = rand_tensor(vec![4], &mut rng);
        check_op_gradient(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let n = t.group_norm(x, g, b, 2, 1e-5);
                let p = t.global_avg_pool(n);
                t.mul(p, p)
            },
            &rand_tensor(vec![2, 4, 3, 3], &mut rng),
            1e-4,
        );

        let w = rand_tensor(vec![5, 3], &mut rng);
        let b = rand_tensor(vec![3], &mut rng);
        check_op_gradient(
            |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let d = t.dense(x, wv, bv);
                t.relu(d)
            },
            &rand_tensor(vec![4, 5], &mut rng),
            1e-4,
        );
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // gradient w.r.t. conv kernel, group-norm affine, dense weight, and a
        // graph-participating scalar, through a softmax cross-entropy loss
        let mut rng = SeededRng::new(106);
        let x0 = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let k0 = rand_tensor(vec![2, 2, 3, 3], &mut rng);
        let kb0 = rand_tensor(vec![2], &mut rng);
        let g0 = rand_tensor(vec![2], &mut rng);
        let b0 = rand_tensor(vec![2], &mut rng);
        let w0 = rand_tensor(vec![2, 3], &mut rng);
        let wb0 = rand_tensor(vec![3], &mut rng);
        let s0 = Tensor::scalar(0.8);
        let labels = [1usize, 2];

        let run = |k: &Tensor, g: &Tensor, b: &Tensor, w: &Tensor, wb: &Tensor, s: &Tensor, kb: &Tensor, want_grads: bool| {
            let mut t = Tape::new();
            let xv = t.leaf(x0.clone(), false);
            let kv = t.leaf(k.clone(), want_grads);
            let kbv = t.leaf(kb.clone(), want_grads);
            let gv = t.leaf(g.clone(), want_grads);
            let bv = t.leaf(b.clone(), want_grads);
            let wv = t.leaf(w.clone(), want_grads);
            let wbv = t.leaf(wb.clone(), want_grads);
            let sv = t.leaf(s.clone(), want_grads);
            let c = t.conv2d(xv, kv, kbv, 1);
            let n = t.group_norm(c, gv, bv, 2, 1e-5);
            let r = t.relu(n);
            let scaled = t.scale_by(r, sv);
            let p = t.global_avg_pool(scaled);
            let logits = t.dense(p, wv, wbv);
            let loss = t.softmax_cross_entropy(logits, &labels, Reduction::Mean);
            (t, loss, [kv, gv, bv, wv, wbv, sv, kbv])
        };

        let (mut t, loss, vars) = run(&k0, &g0, &b0, &w0, &wb0, &s0, &kb0, true);
        t.backward(loss);
        let names = ["kernel", "gamma", "beta", "w", "wb", "s", "kb"];
        let tensors = [&k0, &g0, &b0, &w0, &wb0, &s0, &kb0];
        for ((&var, &name), &tensor) in vars.iter().zip(&names).zip(&tensors) {
            let autodiff = t.grad(var).unwrap().to_vec();
            let fd = finite_difference_gradient(
                |probe| {
                    let mut swapped: Vec<Tensor> = tensors.iter().map(|&t| t.clone()).collect();
                    let idx = names.iter().position(|&n| n == name).unwrap();
                    swapped[idx] = probe.clone();
                    let (t2, l2, _) = run(
                        &swapped[0], &swapped[1], &swapped[2], &swapped[3], &swapped[4], &swapped[5],
                        &swapped[6], false,
                    );
                    t2.value(l2).data[0]
                },
                tensor,
                1e-4,
            );
            let err = max_relative_error(&autodiff, &fd.data);
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of a·f + b·g == a·grad f + b·grad g elementwise
        let mut rng = SeededRng::new(107);
        let x0 = rand_tensor(vec![6], &mut rng);
        let (a, b) = (2.5, -1.25);

        let grad_of = |coef_f: f64, coef_g: f64| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let sq = t.mul(x, x);
            let f = t.sum(sq);
            let sig = t.sigmoid(x);
            let g = t.sum(sig);
            let fs = t.scale(f, coef_f);
            let gs = t.scale(g, coef_g);
            let loss = t.add(fs, gs);
            t.backward(loss);
            t.grad(x).unwrap().to_vec()
        };

        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let build = |seed: u64| -> (Vec<f64>, Vec<f64>) {
            let mut rng = SeededRng::new(seed);
            let x0 = rand_tensor(vec![2, 2, 5, 5], &mut rng);
            let k0 = rand_tensor(vec![2, 2, 3, 3], &mut rng);
            let mut t = Tape::new();
            let x = t.leaf(x0, true);
            let k = t.constant(k0);
            let b = t.constant(Tensor::zeros(vec![2]));
            let c = t.conv2d(x, k, b, 1);
            let s = t.sigmoid(c);
            let loss = t.sum(s);
            t.backward(loss);
            (t.value(loss).data.clone(), t.grad(x).unwrap().to_vec())
        };
        let (l1, g1) = build(42);
        let (l2, g2) = build(42);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn finite_difference_oracle_on_known_functions() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let g = finite_difference_gradient(|t| t.data.iter().sum(), &x, 1e-5);
        for &v in &g.data {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let x1 = Tensor::scalar(3.0);
        let g1 = finite_difference_gradient(|t| t.data[0] * t.data[0], &x1, 1e-5);
        assert!((g1.data[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn scale_by_routes_gradient_to_the_scalar() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let s = t.leaf(Tensor::scalar(2.0), true);
        let y = t.scale_by(x, s);
        let loss = t.sum(y);
        t.backward(loss);
        // d(Σ s·x)/ds = Σx = 6
        assert_eq!(t.grad(s).unwrap(), &[6.0]);
    }

    #[test]
    fn div_gradients_match_quotient_rule() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 4.0]), true);
        let b = t.leaf(Tensor::new(vec![2], vec![2.0, 8.0]), true);
        let y = t.div(a, b);
        let loss = t.sum(y);
        t.backward(loss);
        assert_eq!(t.grad(a).unwrap(), &[0.5, 0.125]);
        // d(a/b)/db = -a/b²
        assert_eq!(t.grad(b).unwrap(), &[-0.25, -0.0625]);
    }
}
