//! The recorded computation graph and its reverse sweep.

use super::kernels;
pub use super::kernels::{PadMode, PadSpec, Padding};
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`]. Ids are dense and increase in execution
/// order, so they double as a topological order for the backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

enum Op<E: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `a (h,w,c) * b (h,w,1)`, broadcasting b across channels.
    MulBcast,
    Recip,
    ClampMin(f64),
    Clamp01,
    Scale(f64),
    Offset,
    Sin,
    Sigmoid,
    LeakyRelu(f64),
    RoundTiesEven,
    Sum,
    Reshape,
    MatMul,
    Conv2d {
        stride: usize,
        pad: Padding,
    },
    SpaceToDepth(usize),
    DepthToSpace(usize),
    MaxPool2 {
        arg: Vec<u32>,
    },
    GlobalAvgPool,
    Softmax,
    SoftmaxXent {
        labels: Vec<usize>,
        probs: Tensor<E>,
    },
    Pad2d(PadSpec),
    Crop {
        y0: usize,
        x0: usize,
    },
    ConcatChannels,
    SelectChannel(usize),
    Downsample(usize),
    Upsample2,
    ReduceMaxChannels {
        arg: Vec<u32>,
    },
    Dct8 {
        forward: bool,
    },
    /// Elementwise product with a 64-entry table tiled over (n, 8, 8) blocks.
    MulBlocks {
        table: Vec<E>,
    },
}

struct Node<E: Real> {
    value: Tensor<E>,
    inputs: Vec<NodeId>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients keyed by node id, produced by [`Graph::backward`]. Every
/// gradient has the same shape as its node's value; leaves that require a
/// gradient but did not participate in the loss hold zeros.
pub struct GradMap<E: Real> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> GradMap<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.i()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.grads.get_mut(id.i()).and_then(|g| g.take())
    }
}

/// A define-by-run tape: builder methods validate shapes, execute the
/// operation eagerly and record it. [`Graph::backward`] then walks the tape
/// in reverse. A graph is confined to the thread that builds it; tensors can
/// be moved across threads freely.
pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.i()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.i()].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, inputs: Vec<NodeId>, op: Op<E>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|&i| self.nodes[i.i()].requires_grad),
        };
        assert!(self.nodes.len() < u32::MAX as usize, "graph too large");
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    /// Insert an input tensor. Whether gradients are tracked through it is
    /// taken from the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<E>) -> NodeId {
        self.push(t, vec![], Op::Leaf)
    }

    /// Insert a non-trainable input (weights of fixed filters, masks, ...).
    pub fn constant(&mut self, t: Tensor<E>) -> NodeId {
        self.push(t.with_requires_grad(false), vec![], Op::Leaf)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: mismatched shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_elementwise(&mut self, a: NodeId, b: NodeId, op: Op<E>, f: impl Fn(E, E) -> E) -> NodeId {
        let data = self.nodes[a.i()]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.i()].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data).unwrap();
        self.push(value, vec![a, b], op)
    }

    fn map_elementwise(&mut self, x: NodeId, op: Op<E>, f: impl Fn(E) -> E) -> NodeId {
        let value = self.nodes[x.i()].value.map(f);
        self.push(value, vec![x], op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_elementwise(a, b, Op::Add, |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_elementwise(a, b, Op::Sub, |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_elementwise(a, b, Op::Mul, |x, y| x * y))
    }

    /// `a (h,w,c) * b (h,w,1)` with b broadcast over the channel axis.
    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sb[2] != 1 || sa[..2] != sb[..2] {
            return Err(Error::Shape(format!(
                "mul_bcast: need (h,w,c) and (h,w,1), got {sa:?} and {sb:?}"
            )));
        }
        let c = sa[2];
        let bd = self.nodes[b.i()].value.data();
        let data = self.nodes[a.i()]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i / c])
            .collect();
        let value = Tensor::new(&sa, data).unwrap();
        Ok(self.push(value, vec![a, b], Op::MulBcast))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.map_elementwise(x, Op::Recip, |v| E::one() / v)
    }

    /// `max(x, t)`; the subgradient is 1 where `x >= t`.
    pub fn clamp_min(&mut self, x: NodeId, t: f64) -> NodeId {
        let tv = E::from_f64(t);
        self.map_elementwise(x, Op::ClampMin(t), |v| v.max(tv))
    }

    /// Clamp to `[0, 1]` with pass-through (unit) subgradient strictly inside
    /// and at the boundary values themselves, zero outside.
    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        self.map_elementwise(x, Op::Clamp01, |v| v.max(E::zero()).min(E::one()))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let kv = E::from_f64(k);
        self.map_elementwise(x, Op::Scale(k), |v| v * kv)
    }

    pub fn offset(&mut self, x: NodeId, k: f64) -> NodeId {
        let kv = E::from_f64(k);
        self.map_elementwise(x, Op::Offset, |v| v + kv)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.map_elementwise(x, Op::Sin, |v| v.sin())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map_elementwise(x, Op::Sigmoid, |v| {
            E::one() / (E::one() + (-v).exp())
        })
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let a = E::from_f64(alpha);
        self.map_elementwise(x, Op::LeakyRelu(alpha), |v| {
            if v >= E::zero() {
                v
            } else {
                a * v
            }
        })
    }

    /// Exact round-to-nearest, ties to even. Forward only: routing a gradient
    /// through this node is a contract violation, so training graphs must use
    /// one of the smooth rounding surrogates instead.
    pub fn round_ties_even(&mut self, x: NodeId) -> NodeId {
        self.map_elementwise(x, Op::RoundTiesEven, |v| v.round_ties_even_())
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = E::zero();
        for &v in self.nodes[x.i()].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), vec![x], Op::Sum)
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.i()].value.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.i()].value.clone().reshaped(shape)?;
        Ok(self.push(value, vec![x], Op::Reshape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let value = kernels::matmul_fwd(&self.nodes[a.i()].value, &self.nodes[b.i()].value);
        Ok(self.push(value, vec![a, b], Op::MatMul))
    }

    /// 2-D convolution of `x (h,w,cin)` with `k (kh,kw,cin,cout)` and an
    /// optional bias `(cout)`. Kernel extents must be odd.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: Padding,
    ) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: need (h,w,cin) and (kh,kw,cin,cout), got {sx:?} and {sk:?}"
            )));
        }
        if sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel extents must be odd, got {}x{}",
                sk[0], sk[1]
            )));
        }
        if sk[2] != sx[2] {
            return Err(Error::Shape(format!(
                "conv2d: kernel expects {} input channels, image has {}",
                sk[2], sx[2]
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        if pad == Padding::Valid && (sx[0] < sk[0] || sx[1] < sk[1]) {
            return Err(Error::Shape(format!(
                "conv2d: valid padding needs image >= kernel, got {sx:?} vs {sk:?}"
            )));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sk[3]] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {sb:?} does not match {} output channels",
                    sk[3]
                )));
            }
        }
        let value = kernels::conv2d_fwd(
            &self.nodes[x.i()].value,
            &self.nodes[k.i()].value,
            bias.map(|b| &self.nodes[b.i()].value),
            stride,
            pad,
        );
        let mut inputs = vec![x, k];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(value, inputs, Op::Conv2d { stride, pad }))
    }

    pub fn space_to_depth(&mut self, x: NodeId, b: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || b == 0 || s[0] % b != 0 || s[1] % b != 0 {
            return Err(Error::Shape(format!(
                "space_to_depth: extents {s:?} not divisible by block {b}"
            )));
        }
        let value = kernels::space_to_depth(&self.nodes[x.i()].value, b);
        Ok(self.push(value, vec![x], Op::SpaceToDepth(b)))
    }

    pub fn depth_to_space(&mut self, x: NodeId, b: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || b == 0 || s[2] % (b * b) != 0 {
            return Err(Error::Shape(format!(
                "depth_to_space: channels {s:?} not divisible by block^2 {}",
                b * b
            )));
        }
        let value = kernels::depth_to_space(&self.nodes[x.i()].value, b);
        Ok(self.push(value, vec![x], Op::DepthToSpace(b)))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2: need even spatial extents, got {s:?}"
            )));
        }
        let (value, arg) = kernels::maxpool2_fwd(&self.nodes[x.i()].value);
        Ok(self.push(value, vec![x], Op::MaxPool2 { arg }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 3 {
            return Err(Error::Shape("global_avg_pool: need rank-3 input".into()));
        }
        let value = kernels::global_avg_pool_fwd(&self.nodes[x.i()].value);
        Ok(self.push(value, vec![x], Op::GlobalAvgPool))
    }

    /// Row-wise softmax of a `(m, n)` tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax: need (m,n), got {s:?}")));
        }
        let value = softmax_rows(&self.nodes[x.i()].value);
        Ok(self.push(value, vec![x], Op::Softmax))
    }

    /// Fused softmax + cross-entropy: mean over rows of `-log p[label]`,
    /// returned as a `[1]` scalar. Numerically stable for extreme logits.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || labels.len() != s[0] {
            return Err(Error::Shape(format!(
                "softmax_xent: logits {s:?} need one label per row, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Contract(format!(
                "softmax_xent: label {bad} out of range for {} classes",
                s[1]
            )));
        }
        let probs = softmax_rows(&self.nodes[logits.i()].value);
        let mut loss = E::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= probs.data()[i * s[1] + l].max(E::from_f64(f64::MIN_POSITIVE)).ln();
        }
        loss /= E::from_f64(s[0] as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Op::SoftmaxXent {
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn pad2d(&mut self, x: NodeId, spec: PadSpec) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Shape("pad2d: need rank-3 input".into()));
        }
        if spec.mode == PadMode::Reflect101 {
            let max_v = s[0] - 1;
            let max_h = s[1] - 1;
            if spec.top > max_v || spec.bottom > max_v || spec.left > max_h || spec.right > max_h {
                return Err(Error::Shape(format!(
                    "pad2d: reflect-101 padding {spec:?} exceeds image extents {s:?}"
                )));
            }
        }
        let value = kernels::pad2d_fwd(&self.nodes[x.i()].value, spec);
        Ok(self.push(value, vec![x], Op::Pad2d(spec)))
    }

    pub fn crop(&mut self, x: NodeId, y0: usize, x0: usize, oh: usize, ow: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || y0 + oh > s[0] || x0 + ow > s[1] || oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "crop: window {oh}x{ow} at ({y0},{x0}) outside image {s:?}"
            )));
        }
        let c = s[2];
        let src = self.nodes[x.i()].value.data();
        let mut out = Tensor::zeros(&[oh, ow, c]).unwrap();
        for y in 0..oh {
            let sbase = ((y0 + y) * s[1] + x0) * c;
            out.data_mut()[y * ow * c..(y + 1) * ow * c]
                .copy_from_slice(&src[sbase..sbase + ow * c]);
        }
        Ok(self.push(out, vec![x], Op::Crop { y0, x0 }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
            return Err(Error::Shape(format!(
                "concat_channels: spatial extents differ, {sa:?} vs {sb:?}"
            )));
        }
        let (ca, cb) = (sa[2], sb[2]);
        let (ad, bd) = (self.nodes[a.i()].value.data(), self.nodes[b.i()].value.data());
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for p in 0..sa[0] * sa[1] {
            data.extend_from_slice(&ad[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&bd[p * cb..(p + 1) * cb]);
        }
        let value = Tensor::new(&[sa[0], sa[1], ca + cb], data).unwrap();
        Ok(self.push(value, vec![a, b], Op::ConcatChannels))
    }

    /// Extract channel `c` as an `(h, w, 1)` tensor.
    pub fn select_channel(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || c >= s[2] {
            return Err(Error::Shape(format!(
                "select_channel: channel {c} out of range for {s:?}"
            )));
        }
        let src = self.nodes[x.i()].value.data();
        let data = (0..s[0] * s[1]).map(|p| src[p * s[2] + c]).collect();
        let value = Tensor::new(&[s[0], s[1], 1], data).unwrap();
        Ok(self.push(value, vec![x], Op::SelectChannel(c)))
    }

    /// Area downsampling by an integer factor.
    pub fn downsample(&mut self, x: NodeId, f: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || f == 0 || s[0] % f != 0 || s[1] % f != 0 {
            return Err(Error::Shape(format!(
                "downsample: extents {s:?} not divisible by factor {f}"
            )));
        }
        let value = kernels::downsample_fwd(&self.nodes[x.i()].value, f);
        Ok(self.push(value, vec![x], Op::Downsample(f)))
    }

    /// Half-pixel-centred bilinear 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 3 {
            return Err(Error::Shape("upsample2: need rank-3 input".into()));
        }
        let value = kernels::upsample2_fwd(&self.nodes[x.i()].value);
        Ok(self.push(value, vec![x], Op::Upsample2))
    }

    /// Per-pixel maximum over channels, `(h,w,c) -> (h,w,1)`.
    pub fn reduce_max_channels(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 3 {
            return Err(Error::Shape("reduce_max_channels: need rank-3 input".into()));
        }
        let (value, arg) = kernels::reduce_max_channels_fwd(&self.nodes[x.i()].value);
        Ok(self.push(value, vec![x], Op::ReduceMaxChannels { arg }))
    }

    /// Batched orthonormal 8x8 DCT-II over `(n, 8, 8)` blocks (or its inverse).
    pub fn dct8(&mut self, x: NodeId, forward: bool) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] != 8 || s[2] != 8 {
            return Err(Error::Shape(format!("dct8: need (n,8,8), got {s:?}")));
        }
        let value = kernels::dct8(&self.nodes[x.i()].value, forward);
        Ok(self.push(value, vec![x], Op::Dct8 { forward }))
    }

    /// Multiply each 8x8 block elementwise by a fixed 64-entry table.
    pub fn mul_blocks(&mut self, x: NodeId, table: &[E]) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] != 8 || s[2] != 8 || table.len() != 64 {
            return Err(Error::Shape(format!(
                "mul_blocks: need (n,8,8) and a 64-entry table, got {s:?} and {}",
                table.len()
            )));
        }
        let data = self.nodes[x.i()]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * table[i % 64])
            .collect();
        let value = Tensor::new(s, data).unwrap();
        Ok(self.push(
            value,
            vec![x],
            Op::MulBlocks {
                table: table.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns one gradient per
    /// participating node; leaves flagged `requires_grad` that do not reach
    /// the loss receive explicit zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<E>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.i()] = Some(Tensor::scalar(E::one()));

        for id in (0..=loss.i()).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || grads[id].is_none() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads)?;
            // Interior gradients are not retained; callers read leaf grads.
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()).unwrap());
            }
        }
        Ok(GradMap { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.i()].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
        debug_assert_eq!(delta.shape(), self.nodes[id.i()].value.shape());
        match &mut grads[id.i()] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let in_val = |k: usize| &self.nodes[ins[k].i()].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], g.clone());
                }
                if self.needs(ins[1]) {
                    self.accumulate(grads, ins[1], g.clone());
                }
            }
            Op::Sub => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], g.clone());
                }
                if self.needs(ins[1]) {
                    self.accumulate(grads, ins[1], g.map(|v| -v));
                }
            }
            Op::Mul => {
                if self.needs(ins[0]) {
                    let b = in_val(1);
                    let d = Tensor::from_fn(g.shape(), |i| g.data()[i] * b.data()[i]).unwrap();
                    self.accumulate(grads, ins[0], d);
                }
                if self.needs(ins[1]) {
                    let a = in_val(0);
                    let d = Tensor::from_fn(g.shape(), |i| g.data()[i] * a.data()[i]).unwrap();
                    self.accumulate(grads, ins[1], d);
                }
            }
            Op::MulBcast => {
                let c = self.nodes[id].value.shape()[2];
                if self.needs(ins[0]) {
                    let b = in_val(1);
                    let d =
                        Tensor::from_fn(g.shape(), |i| g.data()[i] * b.data()[i / c]).unwrap();
                    self.accumulate(grads, ins[0], d);
                }
                if self.needs(ins[1]) {
                    let a = in_val(0);
                    let mut d = Tensor::zeros(in_val(1).shape()).unwrap();
                    for (i, &gv) in g.data().iter().enumerate() {
                        d.data_mut()[i / c] += gv * a.data()[i];
                    }
                    self.accumulate(grads, ins[1], d);
                }
            }
            Op::Recip => {
                if self.needs(ins[0]) {
                    let y = &node.value;
                    let d = Tensor::from_fn(g.shape(), |i| {
                        -g.data()[i] * y.data()[i] * y.data()[i]
                    })
                    .unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::ClampMin(t) => {
                if self.needs(ins[0]) {
                    let x = in_val(0);
                    let tv = E::from_f64(*t);
                    let d = Tensor::from_fn(g.shape(), |i| {
                        if x.data()[i] >= tv {
                            g.data()[i]
                        } else {
                            E::zero()
                        }
                    })
                    .unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::Clamp01 => {
                if self.needs(ins[0]) {
                    let x = in_val(0);
                    let d = Tensor::from_fn(g.shape(), |i| {
                        let v = x.data()[i];
                        if v >= E::zero() && v <= E::one() {
                            g.data()[i]
                        } else {
                            E::zero()
                        }
                    })
                    .unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::Scale(k) => {
                if self.needs(ins[0]) {
                    let kv = E::from_f64(*k);
                    self.accumulate(grads, ins[0], g.map(|v| v * kv));
                }
            }
            Op::Offset => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], g.clone());
                }
            }
            Op::Sin => {
                if self.needs(ins[0]) {
                    let x = in_val(0);
                    let d =
                        Tensor::from_fn(g.shape(), |i| g.data()[i] * x.data()[i].cos()).unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::Sigmoid => {
                if self.needs(ins[0]) {
                    let y = &node.value;
                    let d = Tensor::from_fn(g.shape(), |i| {
                        let yv = y.data()[i];
                        g.data()[i] * yv * (E::one() - yv)
                    })
                    .unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::LeakyRelu(a) => {
                if self.needs(ins[0]) {
                    let x = in_val(0);
                    let av = E::from_f64(*a);
                    let d = Tensor::from_fn(g.shape(), |i| {
                        if x.data()[i] >= E::zero() {
                            g.data()[i]
                        } else {
                            av * g.data()[i]
                        }
                    })
                    .unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::RoundTiesEven => {
                if self.needs(ins[0]) {
                    return Err(Error::Contract(
                        "backward through exact rounding: use a smooth rounding surrogate in training graphs".into(),
                    ));
                }
            }
            Op::Sum => {
                if self.needs(ins[0]) {
                    let gv = g.data()[0];
                    self.accumulate(
                        grads,
                        ins[0],
                        Tensor::full(in_val(0).shape(), gv).unwrap(),
                    );
                }
            }
            Op::Reshape => {
                if self.needs(ins[0]) {
                    let d = g.clone().reshaped(in_val(0).shape()).unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::MatMul => {
                let (da, db) = kernels::matmul_bwd(
                    in_val(0),
                    in_val(1),
                    g,
                    self.needs(ins[0]),
                    self.needs(ins[1]),
                );
                if let Some(d) = da {
                    self.accumulate(grads, ins[0], d);
                }
                if let Some(d) = db {
                    self.accumulate(grads, ins[1], d);
                }
            }
            Op::Conv2d { stride, pad } => {
                let need_bias = ins.len() == 3 && self.needs(ins[2]);
                let (di, dk, db) = kernels::conv2d_bwd(
                    in_val(0),
                    in_val(1),
                    g,
                    *stride,
                    *pad,
                    self.needs(ins[0]),
                    self.needs(ins[1]),
                    need_bias,
                );
                if let Some(d) = di {
                    self.accumulate(grads, ins[0], d);
                }
                if let Some(d) = dk {
                    self.accumulate(grads, ins[1], d);
                }
                if let Some(d) = db {
                    self.accumulate(grads, ins[2], d);
                }
            }
            Op::SpaceToDepth(b) => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::depth_to_space(g, *b));
                }
            }
            Op::DepthToSpace(b) => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::space_to_depth(g, *b));
                }
            }
            Op::MaxPool2 { arg } => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::maxpool2_bwd(in_val(0).shape(), g, arg));
                }
            }
            Op::GlobalAvgPool => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::global_avg_pool_bwd(in_val(0).shape(), g));
                }
            }
            Op::Softmax => {
                if self.needs(ins[0]) {
                    let y = &node.value;
                    let n = y.shape()[1];
                    let mut d = Tensor::zeros(y.shape()).unwrap();
                    for r in 0..y.shape()[0] {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut dot = E::zero();
                        for (yv, gv) in yr.iter().zip(gr) {
                            dot += *yv * *gv;
                        }
                        for (j, dv) in d.data_mut()[r * n..(r + 1) * n].iter_mut().enumerate() {
                            *dv = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::SoftmaxXent { labels, probs } => {
                if self.needs(ins[0]) {
                    let n = probs.shape()[1];
                    let m = labels.len();
                    let gs = g.data()[0] / E::from_f64(m as f64);
                    let d = Tensor::from_fn(probs.shape(), |i| {
                        let (r, j) = (i / n, i % n);
                        let ind = if labels[r] == j { E::one() } else { E::zero() };
                        gs * (probs.data()[i] - ind)
                    })
                    .unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::Pad2d(spec) => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::pad2d_bwd(in_val(0).shape(), g, *spec));
                }
            }
            Op::Crop { y0, x0 } => {
                if self.needs(ins[0]) {
                    let s = in_val(0).shape();
                    let (ih, iw, c) = (s[0], s[1], s[2]);
                    let (oh, ow) = (g.shape()[0], g.shape()[1]);
                    let mut d = Tensor::zeros(&[ih, iw, c]).unwrap();
                    for y in 0..oh {
                        let dbase = ((y0 + y) * iw + x0) * c;
                        for (dst, src) in d.data_mut()[dbase..dbase + ow * c]
                            .iter_mut()
                            .zip(&g.data()[y * ow * c..(y + 1) * ow * c])
                        {
                            *dst += *src;
                        }
                    }
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::ConcatChannels => {
                let (ca, cb) = (in_val(0).shape()[2], in_val(1).shape()[2]);
                let c = ca + cb;
                let px = g.len() / c;
                if self.needs(ins[0]) {
                    let mut d = Tensor::zeros(in_val(0).shape()).unwrap();
                    for p in 0..px {
                        d.data_mut()[p * ca..(p + 1) * ca]
                            .copy_from_slice(&g.data()[p * c..p * c + ca]);
                    }
                    self.accumulate(grads, ins[0], d);
                }
                if self.needs(ins[1]) {
                    let mut d = Tensor::zeros(in_val(1).shape()).unwrap();
                    for p in 0..px {
                        d.data_mut()[p * cb..(p + 1) * cb]
                            .copy_from_slice(&g.data()[p * c + ca..(p + 1) * c]);
                    }
                    self.accumulate(grads, ins[1], d);
                }
            }
            Op::SelectChannel(c) => {
                if self.needs(ins[0]) {
                    let s = in_val(0).shape();
                    let cc = s[2];
                    let mut d = Tensor::zeros(s).unwrap();
                    for (p, &gv) in g.data().iter().enumerate() {
                        d.data_mut()[p * cc + c] = gv;
                    }
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::Downsample(f) => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::downsample_bwd(in_val(0).shape(), g, *f));
                }
            }
            Op::Upsample2 => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::upsample2_bwd(in_val(0).shape(), g));
                }
            }
            Op::ReduceMaxChannels { arg } => {
                if self.needs(ins[0]) {
                    let s = in_val(0).shape();
                    let c = s[2];
                    let mut d = Tensor::zeros(s).unwrap();
                    for (p, &gv) in g.data().iter().enumerate() {
                        d.data_mut()[p * c + arg[p] as usize] += gv;
                    }
                    self.accumulate(grads, ins[0], d);
                }
            }
            Op::Dct8 { forward } => {
                if self.needs(ins[0]) {
                    self.accumulate(grads, ins[0], kernels::dct8(g, !forward));
                }
            }
            Op::MulBlocks { table } => {
                if self.needs(ins[0]) {
                    let d =
                        Tensor::from_fn(g.shape(), |i| g.data()[i] * table[i % 64]).unwrap();
                    self.accumulate(grads, ins[0], d);
                }
            }
        }
        Ok(())
    }
}

fn softmax_rows<E: Real>(x: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(x.shape()).unwrap();
    for r in 0..m {
        let row = &x.data()[r * n..(r + 1) * n];
        let mx = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
        let orow = &mut out.data_mut()[r * n..(r + 1) * n];
        let mut sum = E::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn quadratic_gradients_are_analytic() {
        // f = sum(x*x + y): df/dx = 2x, df/dy = 1.
        let mut g = Graph::<f64>::new();
        let x = leaf_grad(&mut g, &[3], vec![1.0, -2.0, 0.5]);
        let y = leaf_grad(&mut g, &[3], vec![4.0, 5.0, 6.0]);
        let xx = g.mul(x, x).unwrap();
        let s = g.add(xx, y).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // Gradient of (l1 + l2) equals gradient of l1 plus gradient of l2.
        let build = |mode: u8| -> (Graph<f64>, NodeId, NodeId) {
            let mut g = Graph::<f64>::new();
            let x = leaf_grad(&mut g, &[4], vec![0.3, -0.7, 1.2, 0.05]);
            let sx = g.sin(x);
            let l1 = g.sum(sx);
            let xx = g.mul(x, x).unwrap();
            let l2 = g.sum(xx);
            let loss = match mode {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            (g, x, loss)
        };
        let grad = |mode: u8| {
            let (g, x, loss) = build(mode);
            g.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (g1, g2, gsum) = (grad(0), grad(1), grad(2));
        for i in 0..4 {
            let want = g1.data()[i] + g2.data()[i];
            assert!((gsum.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(
                Tensor::from_fn(&[6, 6, 3], |i| ((i * 31 + 7) % 17) as f32 / 17.0)
                    .unwrap()
                    .with_requires_grad(true),
            );
            let k = g.leaf(
                Tensor::from_fn(&[3, 3, 3, 2], |i| ((i * 13 + 3) % 23) as f32 / 23.0 - 0.4)
                    .unwrap()
                    .with_requires_grad(true),
            );
            let c = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
            let s = g.sigmoid(c);
            let loss = g.mean(s);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).data().to_vec(),
                grads.get(k).unwrap().data().to_vec(),
            )
        };
        let (l1, k1) = run();
        let (l2, k2) = run();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(k1.iter().zip(&k2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn non_participating_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = leaf_grad(&mut g, &[2], vec![1.0, 2.0]);
        let unused = leaf_grad(&mut g, &[3], vec![1.0, 2.0, 3.0]);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_exact_rounding() {
        let mut g = Graph::<f64>::new();
        let x = leaf_grad(&mut g, &[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));

        let mut g = Graph::<f64>::new();
        let x = leaf_grad(&mut g, &[2], vec![1.2, 2.7]);
        let r = g.round_ties_even(x);
        let loss = g.sum(r);
        assert!(matches!(g.backward(loss), Err(crate::Error::Contract(_))));

        // With gradients disabled, the same graph evaluates fine.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2], vec![1.2, 2.7]).unwrap());
        let r = g.round_ties_even(x);
        assert_eq!(g.value(r).data(), &[1.0, 3.0]);
    }

    #[test]
    fn frozen_inputs_do_not_receive_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let w = leaf_grad(&mut g, &[2], vec![3.0, 4.0]);
        let p = g.mul(x, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_xent_matches_manual_computation() {
        let mut g = Graph::<f64>::new();
        let logits = leaf_grad(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let loss = g.softmax_xent(logits, &[2, 0]).unwrap();
        // Row 0: -log(e^3 / (e+e^2+e^3)); row 1: -log(1/3).
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        let want = 0.5 * ((-((3f64).exp() / z).ln()) + (3f64).ln());
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);

        let grads = g.backward(loss).unwrap();
        let d = grads.get(logits).unwrap();
        // d = (softmax - onehot) / m.
        let p0: Vec<f64> = (1..=3).map(|i| (i as f64).exp() / z).collect();
        assert!((d.data()[0] - p0[0] / 2.0).abs() < 1e-12);
        assert!((d.data()[2] - (p0[2] - 1.0) / 2.0).abs() < 1e-12);
        assert!((d.data()[3] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn concat_and_select_route_gradients_to_the_right_channels() {
        let mut g = Graph::<f64>::new();
        let a = leaf_grad(&mut g, &[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf_grad(&mut g, &[1, 2, 1], vec![5.0, 6.0]);
        let cat = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let ch1 = g.select_channel(cat, 1).unwrap();
        assert_eq!(g.value(ch1).data(), &[2.0, 4.0]);
        let loss = g.sum(ch1);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
    }
}
