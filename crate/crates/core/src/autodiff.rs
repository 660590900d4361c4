//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so backward is a single reverse sweep over the tape.
//! Graphs are cheap and short-lived: training builds a fresh one per step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here. Used by the loss functions.
pub trait CustomOp<T: Element>: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. `None` means the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MeanScalars(Vec<Var>),
    Relu(Var),
    Softplus(Var),
    Conv2d(Box<ConvCache<T>>),
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, k: usize },
    ConcatChannels(Var, Var),
    Dropout { input: Var, mask: Vec<T> },
    Softmax(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct ConvCache<T> {
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    /// im2col matrices for every batch item, `[N, Cin·kh·kw, Ho·Wo]`.
    cols: Vec<T>,
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    stored: usize,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SOFTPLUS_LINEAR_ABOVE: f64 = 20.0;

pub fn softplus_scalar<T: Element>(x: T) -> T {
    if x > T::lit(SOFTPLUS_LINEAR_ABOVE) {
        x
    } else {
        // log1p(exp(x)) written as max(x,0) + log1p(exp(-|x|)) to stay exact for x << 0.
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Receives `(var, update)`; `update` adds into that var's gradient buffer.
type GradSink<'a, T> = dyn FnMut(Var, &mut dyn FnMut(&mut [T])) + 'a;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), stored: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values and saved activations.
    pub fn stored_bytes(&self) -> usize {
        self.stored
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, needs_grad: bool) -> Var {
        self.stored += value.numel() * std::mem::size_of::<T>();
        if let Op::Conv2d(cache) = &op {
            self.stored += cache.cols.len() * std::mem::size_of::<T>();
        }
        self.nodes.push(Node { value, op, requires_grad, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, false, needs)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Trainable input; backward accumulates into its gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        self.push_op(Tensor::scalar(T::lit(s)), Op::Sum(a), &[a])
    }

    /// Mean of scalar nodes, accumulated in f64 in argument order.
    pub fn mean_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Empty("mean_scalars"));
        }
        let mut acc = 0.0f64;
        for &t in terms {
            let v = self.value(t);
            if !v.is_scalar() {
                return Err(Error::shape("mean_scalars", format!("term has shape {:?}", v.shape())));
            }
            acc += v.data()[0].f64();
        }
        let mean = acc / terms.len() as f64;
        Ok(self.push_op(Tensor::scalar(T::lit(mean)), Op::MeanScalars(terms.to_vec()), terms))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(out, Op::Relu(a), &[a])
    }

    /// `log(1 + exp(x))`, linear above 20.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_scalar);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input channels {cin} but weight expects {wcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(OP, format!("kernel {kh}x{kw} must have odd height and width")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match output channels {cout}", self.value(bias).shape()),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(OP, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w, kh, kw, stride, padding, ho, wo };
        let krows = cin * kh * kw;
        let plane = ho * wo;

        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut cols = vec![T::zero(); n * krows * plane];
        let mut out = vec![T::zero(); n * cout * plane];
        for i in 0..n {
            let col = &mut cols[i * krows * plane..(i + 1) * krows * plane];
            im2col(&x[i * cin * h * w..(i + 1) * cin * h * w], &geom, col);
            let y = &mut out[i * cout * plane..(i + 1) * cout * plane];
            for (c, row) in y.chunks_mut(plane).enumerate() {
                row.fill(b[c]);
            }
            T::gemm(
                cout,
                krows,
                plane,
                T::one(),
                wt,
                krows as isize,
                1,
                col,
                plane as isize,
                1,
                T::one(),
                y,
                plane as isize,
                1,
            );
        }
        let out = Tensor::new(vec![n, cout, ho, wo], out)?;
        let cache = ConvCache { input, weight, bias, stride, padding, cols };
        Ok(self.push_op(out, Op::Conv2d(Box::new(cache)), &[input, weight, bias]))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(OP, format!("spatial dims {h}x{w} not divisible by pool size {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push_op(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn upsample_nearest(&mut self, input: Var, k: usize) -> Result<Var> {
        const OP: &str = "upsample_nearest";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        if k == 0 {
            return Err(Error::invalid(OP, "scale factor must be at least 1"));
        }
        let (ho, wo) = (h * k, w * k);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                let row = &src[(oy / k) * w..(oy / k + 1) * w];
                for (ox, d) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                    *d = row[ox / k];
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push_op(out, Op::Upsample { input, k }, &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(OP, format!("[{n},_,{h},{w}] vs [{nb},_,{hb},{wb}]")));
        }
        let plane = h * w;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&x[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&y[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push_op(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Dropout { input, mask }, &[input]))
    }

    /// Softmax over the channel axis of an `[N, C, H, W]` tensor.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let out = softmax_channels(self.value(logits))?;
        Ok(self.push_op(out, Op::Softmax(logits), &[logits]))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push_op(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Accumulates `d loss / d leaf` into every trainable leaf. Calling twice
    /// without [`Graph::zero_grad`] doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for ((s, &d), &q) in s.iter_mut().zip(g).zip(y) {
                        *s += d * q;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &d), &p) in s.iter_mut().zip(g).zip(x) {
                        *s += d * p;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d * *f)),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanScalars(terms) => {
                let share = g[0] / T::lit(terms.len() as f64);
                for &t in terms {
                    acc(t, &mut |s| s[0] += share);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for ((s, &d), &v) in s.iter_mut().zip(g).zip(x) {
                        if v > T::zero() {
                            *s += d;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for ((s, &d), &v) in s.iter_mut().zip(g).zip(x) {
                        let slope = if v > T::lit(SOFTPLUS_LINEAR_ABOVE) { T::one() } else { sigmoid(v) };
                        *s += d * slope;
                    }
                });
            }
            Op::Conv2d(cache) => self.conv2d_backward(cache, g, &mut acc),
            Op::MaxPool { input, argmax } => acc(*input, &mut |s| {
                for (&idx, &d) in argmax.iter().zip(g) {
                    s[idx] += d;
                }
            }),
            Op::Upsample { input, k } => {
                let k = *k;
                let [n, c, h, w] = self.value(*input).dims4("upsample_nearest").expect("checked in forward");
                let wo = w * k;
                acc(*input, &mut |s| {
                    for plane in 0..n * c {
                        let src = &g[plane * h * k * wo..(plane + 1) * h * k * wo];
                        let dst = &mut s[plane * h * w..(plane + 1) * h * w];
                        for (oy, row) in src.chunks(wo).enumerate() {
                            let drow = &mut dst[(oy / k) * w..(oy / k + 1) * w];
                            for (ox, &d) in row.iter().enumerate() {
                                drow[ox / k] += d;
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels").expect("checked in forward");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let stride = (ca + cb) * plane;
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * stride..i * stride + ca * plane];
                        s[i * ca * plane..(i + 1) * ca * plane].iter_mut().zip(src).for_each(|(s, &d)| *s += d);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * stride + ca * plane..(i + 1) * stride];
                        s[i * cb * plane..(i + 1) * cb * plane].iter_mut().zip(src).for_each(|(s, &d)| *s += d);
                    }
                });
            }
            Op::Dropout { input, mask } => acc(*input, &mut |s| {
                for ((s, &d), &m) in s.iter_mut().zip(g).zip(mask) {
                    *s += d * m;
                }
            }),
            Op::Softmax(a) => {
                let p = node.value.data();
                let [n, c, h, w] = node.value.dims4("softmax_channels").expect("checked in forward");
                let plane = h * w;
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let base = i * c * plane;
                        for u in 0..plane {
                            let mut dot = 0.0f64;
                            for ch in 0..c {
                                let idx = base + ch * plane + u;
                                dot += (g[idx] * p[idx]).f64();
                            }
                            let dot = T::lit(dot);
                            for ch in 0..c {
                                let idx = base + ch * plane + u;
                                s[idx] += p[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let results = op.backward(&values, &node.value, g);
                for (&v, r) in inputs.iter().zip(results) {
                    if let Some(r) = r {
                        acc(v, &mut |s| s.iter_mut().zip(&r).for_each(|(s, &d)| *s += d));
                    }
                }
            }
        }
    }

    fn conv2d_backward(&self, c: &ConvCache<T>, g: &[T], acc: &mut GradSink<'_, T>) {
        let [n, cin, h, w] = self.value(c.input).dims4("conv2d").expect("checked in forward");
        let [cout, _, kh, kw] = self.value(c.weight).dims4("conv2d").expect("checked in forward");
        let ho = (h + 2 * c.padding - kh) / c.stride + 1;
        let wo = (w + 2 * c.padding - kw) / c.stride + 1;
        let geom = ConvGeom { cin, h, w, kh, kw, stride: c.stride, padding: c.padding, ho, wo };
        let krows = cin * kh * kw;
        let plane = ho * wo;

        acc(c.bias, &mut |s| {
            for i in 0..n {
                for (co, row) in g[i * cout * plane..(i + 1) * cout * plane].chunks(plane).enumerate() {
                    s[co] += row.iter().copied().sum();
                }
            }
        });
        acc(c.weight, &mut |s| {
            for i in 0..n {
                let gy = &g[i * cout * plane..(i + 1) * cout * plane];
                let col = &c.cols[i * krows * plane..(i + 1) * krows * plane];
                // dW[cout, krows] += dY[cout, plane] · colsᵀ[plane, krows]
                T::gemm(
                    cout,
                    plane,
                    krows,
                    T::one(),
                    gy,
                    plane as isize,
                    1,
                    col,
                    1,
                    plane as isize,
                    T::one(),
                    s,
                    krows as isize,
                    1,
                );
            }
        });
        let wt = self.value(c.weight).data();
        acc(c.input, &mut |s| {
            let mut dcol = vec![T::zero(); krows * plane];
            for i in 0..n {
                let gy = &g[i * cout * plane..(i + 1) * cout * plane];
                // dcols[krows, plane] = Wᵀ[krows, cout] · dY[cout, plane]
                T::gemm(
                    krows,
                    cout,
                    plane,
                    T::one(),
                    wt,
                    1,
                    krows as isize,
                    gy,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                col2im_add(&dcol, &geom, &mut s[i * cin * h * w..(i + 1) * cin * h * w]);
            }
        });
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Input coordinate for output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose tap `k` lands inside a row of width `w`.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride).min(self.wo);
        // ox * stride + k - padding <= w - 1
        let hi = if self.w + self.padding < k + 1 {
            0
        } else {
            ((self.w + self.padding - k - 1) / self.stride + 1).min(self.wo)
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let img = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                let dst = &mut cols[row..row + plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.source(oy, ki, g.h) else {
                        out.fill(T::zero());
                        continue;
                    };
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &img[iy * g.w..(iy + 1) * g.w];
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, d) in out[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let img = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                let src = &cols[row..row + plane];
                let (lo, hi) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    let dst = &mut img[iy * g.w..(iy + 1) * g.w];
                    let vals = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        dst[first..first + vals.len()].iter_mut().zip(vals).for_each(|(d, &v)| *d += v);
                    } else {
                        for (j, &v) in vals.iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-pixel softmax over the channel axis, with max subtraction.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = logits.dims4("softmax_channels")?;
    if c < 2 {
        return Err(Error::shape("softmax_channels", format!("need at least 2 classes, got {c}")));
    }
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        let base = i * c * plane;
        for u in 0..plane {
            let mut m = x[base + u];
            for ch in 1..c {
                m = m.max(x[base + ch * plane + u]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * plane + u] - m).exp();
                out[base + ch * plane + u] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * plane + u] = out[base + ch * plane + u] / z;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}
