//! Tape-based reverse-mode differentiation.

use super::conv::{conv2d_backward, conv2d_forward};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Affine { x: Var, scale: T },
    Upsample2x(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Clamp { x: Var, lo: T, hi: T },
    Log(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations and their values for one forward pass.
///
/// Parameters are copied in when first bound; later changes to the store do
/// not affect an existing binding.
#[derive(Debug, Clone)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<T: Real> Graph<T> {
    /// A graph in which parameters listed in `trainable` receive gradients.
    pub fn new(trainable: &[ParamId]) -> Self {
        let len = trainable.iter().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut mask = vec![false; len];
        for p in trainable {
            mask[p.0] = true;
        }
        Self { nodes: Vec::new(), bound: Vec::new(), trainable: mask }
    }

    /// A graph that tracks no parameter gradients (inference).
    pub fn inference() -> Self {
        Self::new(&[])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let trainable = self.trainable.get(id.0).copied().unwrap_or(false);
        let var = self.push(store.get(id).clone(), Op::Param(id), trainable);
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(var);
        var
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let eps = T::of(NORM_EPS);
        let inv_hw = T::one() / T::of(hw as f64);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.chunks_exact_mut(hw) {
            let mean = plane.iter().copied().sum::<T>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let needs = self.needs(x);
        self.push(Tensor::new([n, c, h, w], out), Op::InstanceNorm { x, inv_std }, needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::of(scale), T::of(shift));
        self.unary(x, move |v| v * s + b, Op::Affine { x, scale: s })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(x, move |v| v.max(l).min(h), Op::Clamp { x, lo: l, hi: h })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Nearest-neighbor upsampling by 2 in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (plane, dst) in xv.data().chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
            for r in 0..h {
                for col in 0..w {
                    let v = plane[r * w + col];
                    let o = 2 * r * 2 * w + 2 * col;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + 2 * w] = v;
                    dst[o + 2 * w + 1] = v;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new([n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), needs)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(av.item(i));
            out.extend_from_slice(bv.item(i));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new([n, ca + cb, h, w], out), Op::Concat(a, b), needs)
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(start + len <= c, "channel slice {start}..{} of {c}", start + len);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            out.extend_from_slice(&xv.item(i)[start * hw..(start + len) * hw]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new([n, len, h, w], out), Op::Slice { x, start }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// `mean |a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff shape mismatch");
        let s = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum::<T>() / T::of(av.len() as f64);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::MeanAbsDiff(a, b), needs)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::of(w))).collect();
        let mut total = T::zero();
        for &(v, w) in &terms {
            total += w * self.value(v).value();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms), needs)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut send = |v: Var, g: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => params.push((*id, dy)),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let g = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        self.needs(*x),
                        self.needs(*w),
                        b.is_some_and(|b| self.needs(b)),
                    );
                    if let Some(dx) = g.dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = g.dw {
                        send(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, g.db) {
                        send(*b, db);
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let [_, _, h, w] = y.shape();
                    let hw = h * w;
                    let inv_hw = T::one() / T::of(hw as f64);
                    let mut dx = dy.data().to_vec();
                    for ((dplane, yplane), &is) in dx.chunks_exact_mut(hw).zip(y.data().chunks_exact(hw)).zip(inv_std) {
                        let mean_dy = dplane.iter().copied().sum::<T>() * inv_hw;
                        let mean_dyy = dplane.iter().zip(yplane).map(|(&d, &yv)| d * yv).sum::<T>() * inv_hw;
                        for (d, &yv) in dplane.iter_mut().zip(yplane) {
                            *d = is * (*d - mean_dy - yv * mean_dyy);
                        }
                    }
                    send(*x, Tensor::new(y.shape(), dx));
                }
                Op::Relu(x) => send(*x, dy.zip_map(y, |d, yv| if yv > T::zero() { d } else { T::zero() })),
                Op::LeakyRelu(x, s) => {
                    let s = *s;
                    send(*x, dy.zip_map(y, move |d, yv| if yv > T::zero() { d } else { d * s }))
                }
                Op::Tanh(x) => send(*x, dy.zip_map(y, |d, yv| d * (T::one() - yv * yv))),
                Op::Sigmoid(x) => send(*x, dy.zip_map(y, |d, yv| d * yv * (T::one() - yv))),
                Op::Log(x) => send(*x, dy.zip_map(self.value(*x), |d, xv| d / xv)),
                Op::Affine { x, scale } => {
                    let s = *scale;
                    send(*x, dy.map(move |d| d * s))
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    send(*x, dy.zip_map(self.value(*x), move |d, xv| if xv >= lo && xv <= hi { d } else { T::zero() }))
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        send(*b, dy.clone());
                    }
                    send(*a, dy);
                }
                Op::Upsample2x(x) => {
                    let [n, c, h2, w2] = y.shape();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for (src, dst) in dy.data().chunks_exact(h2 * w2).zip(dx.chunks_exact_mut(h * w)) {
                        for r in 0..h {
                            for col in 0..w {
                                let o = 2 * r * w2 + 2 * col;
                                dst[r * w + col] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
                            }
                        }
                    }
                    send(*x, Tensor::new([n, c, h, w], dx));
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).channels();
                    let [n, c, h, w] = y.shape();
                    let hw = h * w;
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut db = Vec::with_capacity(n * (c - ca) * hw);
                    for i in 0..n {
                        let item = dy.item(i);
                        da.extend_from_slice(&item[..ca * hw]);
                        db.extend_from_slice(&item[ca * hw..]);
                    }
                    send(*a, Tensor::new([n, ca, h, w], da));
                    send(*b, Tensor::new([n, c - ca, h, w], db));
                }
                Op::Slice { x, start } => {
                    let xs = self.value(*x).shape();
                    let [n, c, h, w] = xs;
                    let hw = h * w;
                    let len = y.channels();
                    let mut dx = vec![T::zero(); n * c * hw];
                    for i in 0..n {
                        let dst = &mut dx[i * c * hw + start * hw..i * c * hw + (start + len) * hw];
                        dst.copy_from_slice(dy.item(i));
                    }
                    send(*x, Tensor::new(xs, dx));
                }
                Op::Mean(x) => {
                    let xs = self.value(*x);
                    let g = dy.value() / T::of(xs.len() as f64);
                    send(*x, Tensor::full(xs.shape(), g));
                }
                Op::MeanAbsDiff(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let g = dy.value() / T::of(av.len() as f64);
                    let sign = av.zip_map(bv, move |p, q| {
                        if p > q {
                            g
                        } else if p < q {
                            -g
                        } else {
                            T::zero()
                        }
                    });
                    if self.needs(*b) {
                        send(*b, sign.map(|v| -v));
                    }
                    send(*a, sign);
                }
                Op::WeightedSum(terms) => {
                    let d = dy.value();
                    for &(v, w) in terms {
                        send(v, Tensor::scalar(d * w));
                    }
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { params }
    }
}

/// Parameter gradients produced by [`Graph::backward`], sorted by id.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.binary_search_by_key(&id, |(p, _)| *p).ok().map(|i| &self.params[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, g)| g.all_finite())
    }
}
