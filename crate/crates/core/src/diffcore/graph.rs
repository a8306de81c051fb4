use super::kernels::{self, ConvGeom, SampleGeometry, Taps};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
}

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.1;

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<T>,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    LeakyRelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Clamp(NodeId, T, T),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Max(NodeId, usize),
    MinLastAxis(NodeId, Vec<usize>),
    LogSoftmaxLast(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    AffineSample {
        input: NodeId,
        taps: Vec<Option<Taps>>,
    },
    AlphaComposite {
        image: NodeId,
        patch: NodeId,
        mask: Vec<T>,
        alpha: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation. Node ids are issued in creation order, which is a valid
/// topological order, so backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are kept only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        });
        self.leaf_grads.push(None);
        id
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        self.leaf_grads.push(None);
        id
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                what,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let v = self.value(x).map(f);
        self.push(v, op, &[x])
    }

    /// 2-D cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("input rank", format!("expected [N,C,H,W], got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(Error::dim("kernel rank", format!("expected [F,C,kh,kw], got {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if ks[1] != xs[1] {
            return Err(Error::dim(
                "channels",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        if ks[2] > xs[2] + 2 * padding {
            return Err(Error::dim(
                "height",
                format!("kernel height {} exceeds padded input {}", ks[2], xs[2] + 2 * padding),
            ));
        }
        if ks[3] > xs[3] + 2 * padding {
            return Err(Error::dim(
                "width",
                format!("kernel width {} exceeds padded input {}", ks[3], xs[3] + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            ho: (xs[2] + 2 * padding - ks[2]) / stride + 1,
            wo: (xs[3] + 2 * padding - ks[3]) / stride + 1,
        };
        let batch = xs[0];
        let col_len = geom.patch_len() * geom.out_len();
        let mut cols = vec![T::zero(); batch * col_len];
        let mut out = vec![T::zero(); batch * geom.f * geom.out_len()];
        let in_len = geom.c * geom.h * geom.w;
        let out_len = geom.f * geom.out_len();
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for b in 0..batch {
                let c = &mut cols[b * col_len..(b + 1) * col_len];
                kernels::im2col(&x[b * in_len..(b + 1) * in_len], &geom, c);
                kernels::conv_forward(k, c, &geom, &mut out[b * out_len..(b + 1) * out_len]);
            }
        }
        let value = Tensor::new(vec![batch, geom.f, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols,
            },
            &[input, kernel],
        ))
    }

    /// Adds a per-channel bias `[F]` to `[N,F,H,W]`.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::dim(
                "channels",
                format!("bias {bs:?} does not match input {xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(input).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = *x + b[(i / plane) % xs[1]];
        }
        Ok(self.push(v, Op::BiasAdd { input, bias }, &[input, bias]))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::LeakyRelu => self.leaky_relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum_all());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let n = T::from_usize(t.len().max(1)).unwrap();
        let v = Tensor::scalar(t.sum_all() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Global maximum. Ties resolve to the lowest flat index.
    pub fn max(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("max", "reduction over an empty tensor"));
        }
        let (arg, best) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, t.data()[0]), |(ai, av), (i, &v)| if v > av { (i, v) } else { (ai, av) });
        let v = Tensor::scalar(best);
        Ok(self.push(v, Op::Max(x, arg), &[x]))
    }

    /// Minimum over the last axis; output drops that axis.
    pub fn min_last_axis(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let Some((&last, rest)) = shape.split_last() else {
            return Err(Error::dim("rank", "min_last_axis needs rank >= 1"));
        };
        if last == 0 {
            return Err(Error::dim("last axis", "reduction over an empty axis"));
        }
        let rows = t.len() / last;
        let mut out = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * last..(r + 1) * last];
            let (ai, av) = row
                .iter()
                .enumerate()
                .fold((0, row[0]), |(ai, av), (i, &v)| if v < av { (i, v) } else { (ai, av) });
            out.push(av);
            arg.push(r * last + ai);
        }
        let v = Tensor::new(rest.to_vec(), out)?;
        Ok(self.push(v, Op::MinLastAxis(x, arg), &[x]))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let last = *t
            .shape()
            .last()
            .ok_or_else(|| Error::dim("rank", "log_softmax needs rank >= 1"))?;
        let mut out = t.clone();
        if last > 0 {
            for row in out.data_mut().chunks_mut(last) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                row.iter_mut().for_each(|v| *v = *v - lse);
            }
        }
        Ok(self.push(out, Op::LogSoftmaxLast(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "axes",
                format!("{axes:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.value(x).data(), &shape, axes);
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("trailing shape {:?} differs from {tail:?}", s),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(xs.to_vec()), xs))
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::dim(
                "gather",
                format!("index {bad} out of range for {} elements", t.len()),
            ));
        }
        let data: Vec<T> = indices.iter().map(|&i| t.data()[i]).collect();
        let v = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(v, Op::Gather(x, indices), &[x]))
    }

    /// Rotates and scales a `[C,h,w]` source into a `[C,H,W]` canvas centered
    /// on `geo.center`, bilinear with zero fill. Returns the sampled node and
    /// the `[1,H,W]` coverage mask (1 where the source was sampled).
    pub fn affine_sample_at(
        &mut self,
        src: NodeId,
        geo: SampleGeometry,
    ) -> Result<(NodeId, Tensor<T>)> {
        let s = self.shape(src).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("source rank", format!("expected [C,h,w], got {s:?}")));
        }
        if !(geo.scale > 0.0) || !geo.scale.is_finite() {
            return Err(Error::Parameter(format!(
                "affine_sample scale must be positive, got {}",
                geo.scale
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let taps = kernels::sample_taps(&geo, h, w);
        let (out, mask) = kernels::sample_forward(self.value(src).data(), c, h, w, &taps);
        let (oh, ow) = geo.out_size;
        let v = Tensor::new(vec![c, oh, ow], out)?;
        let mask = Tensor::new(vec![1, oh, ow], mask)?;
        let id = self.push(v, Op::AffineSample { input: src, taps }, &[src]);
        Ok((id, mask))
    }

    /// Centered variant: the source center maps to the output center.
    pub fn affine_sample(
        &mut self,
        src: NodeId,
        rotation: f64,
        scale: f64,
        out_size: (usize, usize),
    ) -> Result<(NodeId, Tensor<T>)> {
        let center = (
            (out_size.1 as f64 - 1.0) / 2.0,
            (out_size.0 as f64 - 1.0) / 2.0,
        );
        self.affine_sample_at(
            src,
            SampleGeometry {
                rotation,
                scale,
                center,
                out_size,
            },
        )
    }

    /// `mask·(alpha·patch + (1−alpha)·image) + (1−mask)·image`.
    pub fn alpha_composite(
        &mut self,
        image: NodeId,
        patch: NodeId,
        mask: &Tensor<T>,
        alpha: f64,
    ) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0,1], got {alpha}")));
        }
        self.same_shape(image, patch, "composite")?;
        let s = self.shape(image).to_vec();
        if s.len() != 3 || mask.shape() != [1, s[1], s[2]] {
            return Err(Error::dim(
                "mask",
                format!("mask {:?} does not cover image {s:?}", mask.shape()),
            ));
        }
        let a = T::from_f64_lossy(alpha);
        let out = kernels::composite_forward(
            self.value(image).data(),
            self.value(patch).data(),
            mask.data(),
            alpha,
        );
        let v = Tensor::new(s, out)?;
        Ok(self.push(
            v,
            Op::AlphaComposite {
                image,
                patch,
                mask: mask.data().to_vec(),
                alpha: a,
            },
            &[image, patch],
        ))
    }

    /// Propagates d(loss)/d(node) to every `requires_grad` leaf, adding into
    /// any gradient already accumulated there.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.requires_grad {
                let slot = &mut self.leaf_grads[id];
                match slot {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a = *a + *b),
                    None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(id, &g) {
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut res = Vec::new();
        let mut elementwise = |x: NodeId, f: &dyn Fn(usize, T) -> T| {
            if self.wants(x) {
                res.push((x, g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols,
            } => {
                let col_len = geom.patch_len() * geom.out_len();
                let out_len = geom.f * geom.out_len();
                let in_len = geom.c * geom.h * geom.w;
                if self.wants(*kernel) {
                    let mut dk = vec![T::zero(); self.value(*kernel).len()];
                    for b in 0..*batch {
                        kernels::conv_backward_kernel(
                            &g[b * out_len..(b + 1) * out_len],
                            &cols[b * col_len..(b + 1) * col_len],
                            geom,
                            &mut dk,
                        );
                    }
                    res.push((*kernel, dk));
                }
                if self.wants(*input) {
                    let k = self.value(*kernel).data();
                    let mut dx = vec![T::zero(); batch * in_len];
                    let mut dcols = vec![T::zero(); col_len];
                    for b in 0..*batch {
                        kernels::conv_backward_cols(
                            k,
                            &g[b * out_len..(b + 1) * out_len],
                            geom,
                            &mut dcols,
                        );
                        kernels::col2im(&dcols, geom, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                    res.push((*input, dx));
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.wants(*bias) {
                    let s = self.shape(*input);
                    let plane = s[2] * s[3];
                    let mut db = vec![T::zero(); s[1]];
                    for (i, &gi) in g.iter().enumerate() {
                        db[(i / plane) % s[1]] = db[(i / plane) % s[1]] + gi;
                    }
                    res.push((*bias, db));
                }
                if self.wants(*input) {
                    res.push((*input, g.to_vec()));
                }
            }
            Op::LeakyRelu(x) => {
                let xv = self.value(*x).data();
                let slope = T::from_f64_lossy(LEAKY_SLOPE);
                elementwise(*x, &|i, gi| if xv[i] > T::zero() { gi } else { gi * slope });
            }
            Op::Sigmoid(x) => {
                elementwise(*x, &|i, gi| gi * out[i] * (T::one() - out[i]));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                elementwise(*x, &|i, gi| gi * sigmoid(xv[i]));
            }
            Op::Exp(x) => elementwise(*x, &|i, gi| gi * out[i]),
            Op::Sqrt(x) => {
                let two = T::one() + T::one();
                elementwise(*x, &|i, gi| gi / (two * out[i]));
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::one() + T::one();
                elementwise(*x, &|i, gi| gi * two * xv[i]);
            }
            Op::Scale(x, f) => elementwise(*x, &|_, gi| gi * *f),
            Op::AddScalar(x) | Op::Reshape(x) => elementwise(*x, &|_, gi| gi),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                elementwise(*x, &|i, gi| {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gi
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Add(a, b) => {
                elementwise(*a, &|_, gi| gi);
                elementwise(*b, &|_, gi| gi);
            }
            Op::Sub(a, b) => {
                elementwise(*a, &|_, gi| gi);
                elementwise(*b, &|_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                elementwise(*a, &|i, gi| gi * bv[i]);
                elementwise(*b, &|i, gi| gi * av[i]);
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    res.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let d = g[0] / T::from_usize(n.max(1)).unwrap();
                    res.push((*x, vec![d; n]));
                }
            }
            Op::Max(x, arg) => {
                if self.wants(*x) {
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    d[*arg] = g[0];
                    res.push((*x, d));
                }
            }
            Op::MinLastAxis(x, args) => {
                if self.wants(*x) {
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    for (&a, &gi) in args.iter().zip(g) {
                        d[a] = gi;
                    }
                    res.push((*x, d));
                }
            }
            Op::LogSoftmaxLast(x) => {
                if self.wants(*x) {
                    let last = *node.value.shape().last().unwrap();
                    let mut d = vec![T::zero(); g.len()];
                    if last > 0 {
                        for ((dr, gr), or) in d
                            .chunks_mut(last)
                            .zip(g.chunks(last))
                            .zip(out.chunks(last))
                        {
                            let gs: T = gr.iter().copied().sum();
                            for j in 0..last {
                                dr[j] = gr[j] - or[j].exp() * gs;
                            }
                        }
                    }
                    res.push((*x, d));
                }
            }
            Op::Permute(x, axes) => {
                if self.wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    res.push((*x, permute_data(g, node.value.shape(), &inverse)));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.wants(x) {
                        res.push((x, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Gather(x, idx) => {
                if self.wants(*x) {
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    for (&i, &gi) in idx.iter().zip(g) {
                        d[i] = d[i] + gi;
                    }
                    res.push((*x, d));
                }
            }
            Op::AffineSample { input, taps } => {
                if self.wants(*input) {
                    let s = self.shape(*input);
                    let mut d = vec![T::zero(); self.value(*input).len()];
                    kernels::sample_backward(g, s[0], s[1] * s[2], taps, &mut d);
                    res.push((*input, d));
                }
            }
            Op::AlphaComposite {
                image,
                patch,
                mask,
                alpha,
            } => {
                let plane = mask.len();
                let keep = T::one() - *alpha;
                elementwise(*patch, &|i, gi| gi * mask[i % plane] * *alpha);
                elementwise(*image, &|i, gi| {
                    let m = mask[i % plane];
                    if m == T::zero() {
                        gi
                    } else {
                        gi * (m * keep + (T::one() - m))
                    }
                });
            }
        }
        res
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
