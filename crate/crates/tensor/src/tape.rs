//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Ops execute eagerly and append one node each. Leaves either own their
//! value or borrow it from the caller (model parameters are borrowed, so a
//! training step copies nothing). `backward` replays the records in reverse,
//! accumulating vector-Jacobian products; gradients of parameter leaves are
//! read back with [`Tape::grad`].

use crate::conv;
use crate::error::TensorError;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Payload<'a, S> {
    Owned(Tensor<S>),
    Borrowed(&'a Tensor<S>),
}

impl<S: Scalar> Payload<'_, S> {
    fn tensor(&self) -> &Tensor<S> {
        match self {
            Payload::Owned(t) => t,
            Payload::Borrowed(t) => t,
        }
    }
}

enum Record<S> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        k: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Affine {
        input: Var,
        mul: S,
    },
    ChannelMul {
        vec: Var,
        map: Var,
    },
    ChannelAdd {
        vec: Var,
        map: Var,
    },
    ConcatChannels {
        lhs: Var,
        rhs: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    ChannelCosine {
        lhs: Var,
        rhs: Var,
        // per channel: (dot, |a|^2, |b|^2)
        stats: Vec<(S, S, S)>,
    },
    BilinearPool {
        lhs: Var,
        rhs: Var,
        raw: Vec<S>,
        norm: S,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    NearestResize {
        input: Var,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<S>,
    },
}

struct Node<'a, S: Scalar> {
    payload: Payload<'a, S>,
    record: Record<S>,
    needs_grad: bool,
    grad: Option<Vec<S>>,
}

pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<'a, S: Scalar> Default for Tape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every record and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Borrow a non-trainable input (an image, a constant).
    pub fn leaf(&mut self, t: &'a Tensor<S>) -> Var {
        self.push_leaf(Payload::Borrowed(t), false)
    }

    /// Borrow a trainable parameter; its gradient is accumulated on the tape.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.push_leaf(Payload::Borrowed(t), true)
    }

    /// Move a tensor onto the tape.
    pub fn owned(&mut self, t: Tensor<S>, needs_grad: bool) -> Var {
        self.push_leaf(Payload::Owned(t), needs_grad)
    }

    fn push_leaf(&mut self, payload: Payload<'a, S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            payload,
            record: Record::Leaf,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.nodes[v.0].payload.tensor()
    }

    /// Gradient of a node after `backward`; `None` when the node was not
    /// reached or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_op(&mut self, value: Tensor<S>, record: Record<S>, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        debug_assert!(
            value.is_all_finite(),
            "primitive produced a non-finite scalar"
        );
        self.nodes.push(Node {
            payload: Payload::Owned(value),
            record,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation, stride 1. Kernel size 1 or 3.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 3,
                dims: x.dims().to_vec(),
            });
        }
        if w.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 4,
                dims: w.dims().to_vec(),
            });
        }
        let k = w.dims()[2];
        if k != w.dims()[3] || (k != 1 && k != 3) {
            return Err(TensorError::KernelSize { k });
        }
        if w.dims()[1] != x.dims()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d: input channels vs weight",
                lhs: x.dims().to_vec(),
                rhs: w.dims().to_vec(),
            });
        }
        if b.dims() != [w.dims()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d: bias vs weight",
                lhs: b.dims().to_vec(),
                rhs: w.dims().to_vec(),
            });
        }
        let (c_in, h, wid) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let c_out = w.dims()[0];
        if h + 2 * padding < k || wid + 2 * padding < k {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{wid} too small for kernel {k} with padding {padding}"),
            });
        }
        let h_out = h + 2 * padding - k + 1;
        let w_out = wid + 2 * padding - k + 1;
        let mut out = vec![S::ZERO; c_out * h_out * w_out];
        conv::conv2d_forward(
            x.data(),
            c_in,
            h,
            wid,
            w.data(),
            c_out,
            k,
            padding,
            b.data(),
            &mut out,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push_op(
            Tensor::new(vec![c_out, h_out, w_out], out)?,
            Record::Conv2d {
                input,
                weight,
                bias,
                k,
                padding,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<S> = x
            .data()
            .iter()
            .map(|&v| if v > S::ZERO { v } else { S::ZERO })
            .collect();
        let t = Tensor::new(x.dims().to_vec(), out).expect("shape preserved");
        let needs = self.needs(input);
        self.push_op(t, Record::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<S> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(x.dims().to_vec(), out).expect("shape preserved");
        let needs = self.needs(input);
        self.push_op(t, Record::Sigmoid { input }, needs)
    }

    fn binary_same_dims(
        &mut self,
        op: &'static str,
        lhs: Var,
        rhs: Var,
    ) -> Result<(), TensorError> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.dims() != b.dims() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.dims().to_vec(),
                rhs: b.dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        self.binary_same_dims("add", lhs, rhs)?;
        let a = self.value(lhs);
        let b = self.value(rhs);
        let out: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(a.dims().to_vec(), out)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push_op(t, Record::Add { lhs, rhs }, needs))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        self.binary_same_dims("mul", lhs, rhs)?;
        let a = self.value(lhs);
        let b = self.value(rhs);
        let out: Vec<S> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(a.dims().to_vec(), out)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push_op(t, Record::Mul { lhs, rhs }, needs))
    }

    /// Pointwise `mul * x + add`.
    pub fn affine(&mut self, input: Var, mul: S, add: S) -> Var {
        let x = self.value(input);
        let out: Vec<S> = x.data().iter().map(|&v| v * mul + add).collect();
        let t = Tensor::new(x.dims().to_vec(), out).expect("shape preserved");
        let needs = self.needs(input);
        self.push_op(t, Record::Affine { input, mul }, needs)
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        self.affine(input, factor, S::ZERO)
    }

    fn channel_broadcast_check(
        &self,
        op: &'static str,
        vec: Var,
        map: Var,
    ) -> Result<(), TensorError> {
        let v = self.value(vec);
        let m = self.value(map);
        if v.rank() != 1 || m.rank() != 3 || v.dims()[0] != m.dims()[0] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: v.dims().to_vec(),
                rhs: m.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Broadcast a per-channel vector over a CHW map: out[c,y,x] = v[c] * m[c,y,x].
    pub fn channel_mul(&mut self, vec: Var, map: Var) -> Result<Var, TensorError> {
        self.channel_broadcast_check("channel_mul", vec, map)?;
        let v = self.value(vec);
        let m = self.value(map);
        let (c, h, w) = (m.dims()[0], m.dims()[1], m.dims()[2]);
        let mut out = vec![S::ZERO; c * h * w];
        for ch in 0..c {
            let s = v.data()[ch];
            for (o, &x) in out[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(m.data()[ch * h * w..(ch + 1) * h * w].iter())
            {
                *o = s * x;
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let needs = self.needs(vec) || self.needs(map);
        Ok(self.push_op(t, Record::ChannelMul { vec, map }, needs))
    }

    /// Broadcast add of a per-channel vector over a CHW map.
    pub fn channel_add(&mut self, vec: Var, map: Var) -> Result<Var, TensorError> {
        self.channel_broadcast_check("channel_add", vec, map)?;
        let v = self.value(vec);
        let m = self.value(map);
        let (c, h, w) = (m.dims()[0], m.dims()[1], m.dims()[2]);
        let mut out = vec![S::ZERO; c * h * w];
        for ch in 0..c {
            let s = v.data()[ch];
            for (o, &x) in out[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(m.data()[ch * h * w..(ch + 1) * h * w].iter())
            {
                *o = s + x;
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let needs = self.needs(vec) || self.needs(map);
        Ok(self.push_op(t, Record::ChannelAdd { vec, map }, needs))
    }

    /// Stack two CHW maps along the channel axis; lhs channels come first.
    pub fn concat_channels(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.rank() != 3 || b.rank() != 3 || a.dims()[1..] != b.dims()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: a.dims().to_vec(),
                rhs: b.dims().to_vec(),
            });
        }
        let (c1, c2, h, w) = (a.dims()[0], b.dims()[0], a.dims()[1], a.dims()[2]);
        let mut out = Vec::with_capacity((c1 + c2) * h * w);
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
        let t = Tensor::new(vec![c1 + c2, h, w], out)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push_op(t, Record::ConcatChannels { lhs, rhs }, needs))
    }

    /// Take channels [start, start+count) of a CHW map.
    pub fn slice_channels(
        &mut self,
        input: Var,
        start: usize,
        count: usize,
    ) -> Result<Var, TensorError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "slice_channels",
                expected: 3,
                dims: x.dims().to_vec(),
            });
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        if start + count > c || count == 0 {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                msg: format!("range {start}..{} out of {c} channels", start + count),
            });
        }
        let out = x.data()[start * h * w..(start + count) * h * w].to_vec();
        let t = Tensor::new(vec![count, h, w], out)?;
        let needs = self.needs(input);
        Ok(self.push_op(t, Record::SliceChannels { input, start }, needs))
    }

    /// Mean over the spatial extent of each channel: CHW -> C.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "global_avg_pool",
                expected: 3,
                dims: x.dims().to_vec(),
            });
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let inv = S::from_f64(1.0 / (h * w) as f64);
        let out: Vec<S> = (0..c)
            .map(|ch| crate::reduce::sum(&x.data()[ch * h * w..(ch + 1) * h * w]) * inv)
            .collect();
        let t = Tensor::new(vec![c], out)?;
        let needs = self.needs(input);
        Ok(self.push_op(t, Record::GlobalAvgPool { input }, needs))
    }

    /// Cosine similarity between same-index channels of two CHW maps,
    /// each channel flattened to a vector. A zero-norm channel on either
    /// side yields 0. Output is clamped to [-1, 1]; exactly collinear
    /// channels produce exactly +/-1.
    pub fn channel_cosine(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        self.binary_same_dims("channel_cosine", lhs, rhs)?;
        let a = self.value(lhs);
        if a.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "channel_cosine",
                expected: 3,
                dims: a.dims().to_vec(),
            });
        }
        let b = self.value(rhs);
        let (c, h, w) = (a.dims()[0], a.dims()[1], a.dims()[2]);
        let plane = h * w;
        let mut stats = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let av = &a.data()[ch * plane..(ch + 1) * plane];
            let bv = &b.data()[ch * plane..(ch + 1) * plane];
            let dot = crate::reduce::dot(av, bv);
            let na2 = crate::reduce::dot(av, av);
            let nb2 = crate::reduce::dot(bv, bv);
            stats.push((dot, na2, nb2));
            let s = if na2 == S::ZERO || nb2 == S::ZERO {
                S::ZERO
            } else if na2 == nb2 && dot == na2 {
                S::ONE
            } else if na2 == nb2 && dot == -na2 {
                -S::ONE
            } else {
                let raw = dot / (na2.sqrt() * nb2.sqrt());
                raw.maximum(-S::ONE).minimum(S::ONE)
            };
            out.push(s);
        }
        let t = Tensor::new(vec![c], out)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push_op(t, Record::ChannelCosine { lhs, rhs, stats }, needs))
    }

    /// Spatially summed outer product of two CHW maps, flattened row-major
    /// (lhs channels index the rows), then signed square root and l2
    /// normalization. A zero pooled vector normalizes to zero.
    pub fn bilinear_pool(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.rank() != 3 || b.rank() != 3 || a.dims()[1..] != b.dims()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_pool",
                lhs: a.dims().to_vec(),
                rhs: b.dims().to_vec(),
            });
        }
        let (c1, c2, plane) = (a.dims()[0], b.dims()[0], a.dims()[1] * a.dims()[2]);
        let mut raw = vec![S::ZERO; c1 * c2];
        for i in 0..c1 {
            let av = &a.data()[i * plane..(i + 1) * plane];
            for j in 0..c2 {
                raw[i * c2 + j] =
                    crate::reduce::dot(av, &b.data()[j * plane..(j + 1) * plane]);
            }
        }
        let signed_sqrt: Vec<S> = raw
            .iter()
            .map(|&v| {
                if v >= S::ZERO {
                    v.sqrt()
                } else {
                    -((-v).sqrt())
                }
            })
            .collect();
        let norm = crate::reduce::dot(&signed_sqrt, &signed_sqrt).sqrt();
        let out: Vec<S> = if norm == S::ZERO {
            vec![S::ZERO; c1 * c2]
        } else {
            signed_sqrt.iter().map(|&z| z / norm).collect()
        };
        let t = Tensor::new(vec![c1 * c2], out)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push_op(t, Record::BilinearPool { lhs, rhs, raw, norm }, needs))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "max_pool2",
                expected: 3,
                dims: x.dims().to_vec(),
            });
        }
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2",
                msg: format!("spatial extent {h}x{w} too small to pool"),
            });
        }
        let mut out = vec![S::ZERO; c * ho * wo];
        let mut argmax = vec![0u32; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let base = ch * h * w + 2 * y * w + 2 * xo;
                    let cands = [base, base + 1, base + w, base + w + 1];
                    let mut best = cands[0];
                    let mut bv = x.data()[best];
                    for &i in &cands[1..] {
                        if x.data()[i] > bv {
                            bv = x.data()[i];
                            best = i;
                        }
                    }
                    out[ch * ho * wo + y * wo + xo] = bv;
                    argmax[ch * ho * wo + y * wo + xo] = best as u32;
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        let needs = self.needs(input);
        Ok(self.push_op(t, Record::MaxPool2 { input, argmax }, needs))
    }

    /// Fully connected layer: out[o] = b[o] + sum_i w[o,i] * x[i].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.rank() != 1 || w.rank() != 2 || w.dims()[1] != x.dims()[0] || b.dims() != [w.dims()[0]]
        {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: x.dims().to_vec(),
                rhs: w.dims().to_vec(),
            });
        }
        let (o, i) = (w.dims()[0], w.dims()[1]);
        let out: Vec<S> = (0..o)
            .map(|r| b.data()[r] + crate::reduce::dot(&w.data()[r * i..(r + 1) * i], x.data()))
            .collect();
        let t = Tensor::new(vec![o], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push_op(t, Record::Linear { input, weight, bias }, needs))
    }

    /// Nearest-neighbor spatial resize of a CHW map. Source index is
    /// floor(target * src_extent / dst_extent).
    pub fn resize_nearest(&mut self, input: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "resize_nearest",
                expected: 3,
                dims: x.dims().to_vec(),
            });
        }
        if h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "resize_nearest",
                msg: "target extent must be positive".into(),
            });
        }
        let (c, hi, wi) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let mut out = vec![S::ZERO; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = y * hi / h;
                for xo in 0..w {
                    let sx = xo * wi / w;
                    out[ch * h * w + y * w + xo] = x.data()[ch * hi * wi + sy * wi + sx];
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let needs = self.needs(input);
        Ok(self.push_op(t, Record::NearestResize { input }, needs))
    }

    /// Sum of every scalar -> a single-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let acc = crate::reduce::sum(self.value(input).data());
        let needs = self.needs(input);
        self.push_op(Tensor::scalar(acc), Record::Sum { input }, needs)
    }

    /// Cross-entropy of softmax(logits) against a hard label, as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(TensorError::RankMismatch {
                op: "softmax_cross_entropy",
                expected: 1,
                dims: x.dims().to_vec(),
            });
        }
        let k = x.dims()[0];
        if label >= k {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("label {label} out of {k} classes"),
            });
        }
        let mut maxv = x.data()[0];
        for &v in x.data() {
            maxv = maxv.maximum(v);
        }
        let mut denom = S::ZERO;
        let exps: Vec<S> = x
            .data()
            .iter()
            .map(|&v| {
                let e = (v - maxv).exp();
                denom += e;
                e
            })
            .collect();
        let probs: Vec<S> = exps.iter().map(|&e| e / denom).collect();
        let loss = -(probs[label].ln());
        let needs = self.needs(logits);
        Ok(self.push_op(
            Tensor::scalar(loss),
            Record::SoftmaxCrossEntropy { logits, label, probs },
            needs,
        ))
    }

    /// Squared difference between a single-element prediction and a constant.
    pub fn squared_error(&mut self, pred: Var, target: S) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "squared_error",
                msg: format!("prediction must hold one scalar, got dims {:?}", p.dims()),
            });
        }
        let diff = self.affine(pred, S::ONE, -target);
        let sq = self.mul(diff, diff)?;
        Ok(self.sum(sq))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar root. Gradients accumulate on every node
    /// that (transitively) requires them.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let root_t = self.value(root);
        if root_t.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                dims: root_t.dims().to_vec(),
            });
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![S::ONE]);
        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].payload.tensor().numel();
            self.nodes[v.0].grad = Some(vec![S::ZERO; n]);
        }
    }

    /// Move the upstream gradient of `idx` out, returning it; the node keeps
    /// an empty marker so repeated reads are impossible.
    fn take_grad_buf(&mut self, idx: usize) -> Vec<S> {
        self.nodes[idx].grad.take().unwrap_or_default()
    }

    /// Accumulate into the gradient of `target` while reading values of other
    /// nodes. The buffer is moved out for the duration of `f`, so immutable
    /// lookups on the tape stay legal; this also handles ops whose two inputs
    /// are the same node.
    fn with_grad_buf(&mut self, target: Var, f: impl FnOnce(&Self, &mut Vec<S>)) {
        self.ensure_grad(target);
        let mut gbuf = self.nodes[target.0].grad.take().unwrap();
        f(self, &mut gbuf);
        self.nodes[target.0].grad = Some(gbuf);
    }

    fn propagate(&mut self, idx: usize) {
        // Leaves keep their accumulated gradient for extraction.
        if matches!(self.nodes[idx].record, Record::Leaf) {
            return;
        }
        let g = self.take_grad_buf(idx);
        // Records are moved out and back to appease the borrow checker.
        let record = std::mem::replace(&mut self.nodes[idx].record, Record::Leaf);
        match &record {
            Record::Leaf => unreachable!(),
            Record::Conv2d {
                input,
                weight,
                bias,
                k,
                padding,
            } => {
                let (input, weight, bias, k, padding) = (*input, *weight, *bias, *k, *padding);
                let (c_in, h, w) = {
                    let d = self.value(input).dims();
                    (d[0], d[1], d[2])
                };
                let (c_out, h_out, w_out) = {
                    let d = self.nodes[idx].payload.tensor().dims();
                    (d[0], d[1], d[2])
                };
                if self.needs(input) {
                    self.with_grad_buf(input, |tape, gbuf| {
                        conv::conv2d_backward_input(
                            &g,
                            c_out,
                            h_out,
                            w_out,
                            tape.value(weight).data(),
                            c_in,
                            k,
                            padding,
                            h,
                            w,
                            gbuf,
                        );
                    });
                }
                if self.needs(weight) || self.needs(bias) {
                    self.ensure_grad(weight);
                    self.ensure_grad(bias);
                    let mut gw = self.nodes[weight.0].grad.take().unwrap();
                    let mut gb = self.nodes[bias.0].grad.take().unwrap();
                    conv::conv2d_backward_params(
                        &g,
                        c_out,
                        h_out,
                        w_out,
                        self.value(input).data(),
                        c_in,
                        h,
                        w,
                        k,
                        padding,
                        &mut gw,
                        &mut gb,
                    );
                    self.nodes[weight.0].grad = Some(gw);
                    self.nodes[bias.0].grad = Some(gb);
                }
            }
            Record::Relu { input } => {
                let input = *input;
                if self.needs(input) {
                    self.with_grad_buf(input, |tape, gbuf| {
                        let xdata = tape.value(input).data();
                        for ((o, &x), &gi) in gbuf.iter_mut().zip(xdata.iter()).zip(g.iter()) {
                            if x > S::ZERO {
                                *o += gi;
                            }
                        }
                    });
                }
            }
            Record::Sigmoid { input } => {
                let input = *input;
                if self.needs(input) {
                    self.with_grad_buf(input, |tape, gbuf| {
                        let ydata = tape.nodes[idx].payload.tensor().data();
                        for ((o, &y), &gi) in gbuf.iter_mut().zip(ydata.iter()).zip(g.iter()) {
                            *o += gi * y * (S::ONE - y);
                        }
                    });
                }
            }
            Record::Add { lhs, rhs } => {
                for &v in &[*lhs, *rhs] {
                    if self.needs(v) {
                        self.with_grad_buf(v, |_, gbuf| {
                            for (o, &gi) in gbuf.iter_mut().zip(g.iter()) {
                                *o += gi;
                            }
                        });
                    }
                }
            }
            Record::Mul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.needs(lhs) {
                    self.with_grad_buf(lhs, |tape, gbuf| {
                        let other = tape.value(rhs).data();
                        for ((o, &b), &gi) in gbuf.iter_mut().zip(other.iter()).zip(g.iter()) {
                            *o += gi * b;
                        }
                    });
                }
                if self.needs(rhs) {
                    self.with_grad_buf(rhs, |tape, gbuf| {
                        let other = tape.value(lhs).data();
                        for ((o, &a), &gi) in gbuf.iter_mut().zip(other.iter()).zip(g.iter()) {
                            *o += gi * a;
                        }
                    });
                }
            }
            Record::Affine { input, mul } => {
                let (input, mul) = (*input, *mul);
                if self.needs(input) {
                    self.with_grad_buf(input, |_, gbuf| {
                        for (o, &gi) in gbuf.iter_mut().zip(g.iter()) {
                            *o += gi * mul;
                        }
                    });
                }
            }
            Record::ChannelMul { vec, map } => {
                let (vec, map) = (*vec, *map);
                let (c, plane) = {
                    let d = self.value(map).dims();
                    (d[0], d[1] * d[2])
                };
                if self.needs(vec) {
                    self.with_grad_buf(vec, |tape, gbuf| {
                        let mdata = tape.value(map).data();
                        for ch in 0..c {
                            gbuf[ch] += crate::reduce::dot(
                                &mdata[ch * plane..(ch + 1) * plane],
                                &g[ch * plane..(ch + 1) * plane],
                            );
                        }
                    });
                }
                if self.needs(map) {
                    self.with_grad_buf(map, |tape, gbuf| {
                        let vdata = tape.value(vec).data();
                        for ch in 0..c {
                            let s = vdata[ch];
                            crate::reduce::axpy(
                                s,
                                &g[ch * plane..(ch + 1) * plane],
                                &mut gbuf[ch * plane..(ch + 1) * plane],
                            );
                        }
                    });
                }
            }
            Record::ChannelAdd { vec, map } => {
                let (vec, map) = (*vec, *map);
                let (c, plane) = {
                    let d = self.value(map).dims();
                    (d[0], d[1] * d[2])
                };
                if self.needs(vec) {
                    self.with_grad_buf(vec, |_, gbuf| {
                        for ch in 0..c {
                            gbuf[ch] += crate::reduce::sum(&g[ch * plane..(ch + 1) * plane]);
                        }
                    });
                }
                if self.needs(map) {
                    self.with_grad_buf(map, |_, gbuf| {
                        for (o, &gi) in gbuf.iter_mut().zip(g.iter()) {
                            *o += gi;
                        }
                    });
                }
            }
            Record::ConcatChannels { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let n1 = self.value(lhs).numel();
                if self.needs(lhs) {
                    self.with_grad_buf(lhs, |_, gbuf| {
                        for (o, &gi) in gbuf.iter_mut().zip(g[..n1].iter()) {
                            *o += gi;
                        }
                    });
                }
                if self.needs(rhs) {
                    self.with_grad_buf(rhs, |_, gbuf| {
                        for (o, &gi) in gbuf.iter_mut().zip(g[n1..].iter()) {
                            *o += gi;
                        }
                    });
                }
            }
            Record::SliceChannels { input, start } => {
                let (input, start) = (*input, *start);
                if self.needs(input) {
                    let plane = {
                        let d = self.value(input).dims();
                        d[1] * d[2]
                    };
                    self.with_grad_buf(input, |_, gbuf| {
                        for (o, &gi) in gbuf[start * plane..start * plane + g.len()]
                            .iter_mut()
                            .zip(g.iter())
                        {
                            *o += gi;
                        }
                    });
                }
            }
            Record::GlobalAvgPool { input } => {
                let input = *input;
                if self.needs(input) {
                    let (c, plane) = {
                        let d = self.value(input).dims();
                        (d[0], d[1] * d[2])
                    };
                    let inv = S::from_f64(1.0 / plane as f64);
                    self.with_grad_buf(input, |_, gbuf| {
                        for ch in 0..c {
                            let gi = g[ch] * inv;
                            for o in &mut gbuf[ch * plane..(ch + 1) * plane] {
                                *o += gi;
                            }
                        }
                    });
                }
            }
            Record::ChannelCosine { lhs, rhs, stats } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let (c, plane) = {
                    let d = self.value(lhs).dims();
                    (d[0], d[1] * d[2])
                };
                // d s / d a_k = (b_k - (dot/|a|^2) a_k) / (|a| |b|), symmetric in b.
                if self.needs(lhs) {
                    self.with_grad_buf(lhs, |tape, gbuf| {
                        let adata = tape.value(lhs).data();
                        let bdata = tape.value(rhs).data();
                        for ch in 0..c {
                            let (dot, na2, nb2) = stats[ch];
                            if na2 == S::ZERO || nb2 == S::ZERO {
                                continue;
                            }
                            let inv = S::ONE / (na2.sqrt() * nb2.sqrt());
                            let coef_b = g[ch] * inv;
                            let coef_a = coef_b * (dot / na2);
                            for k in ch * plane..(ch + 1) * plane {
                                gbuf[k] += coef_b * bdata[k] - coef_a * adata[k];
                            }
                        }
                    });
                }
                if self.needs(rhs) {
                    self.with_grad_buf(rhs, |tape, gbuf| {
                        let adata = tape.value(lhs).data();
                        let bdata = tape.value(rhs).data();
                        for ch in 0..c {
                            let (dot, na2, nb2) = stats[ch];
                            if na2 == S::ZERO || nb2 == S::ZERO {
                                continue;
                            }
                            let inv = S::ONE / (na2.sqrt() * nb2.sqrt());
                            let coef_a = g[ch] * inv;
                            let coef_b = coef_a * (dot / nb2);
                            for k in ch * plane..(ch + 1) * plane {
                                gbuf[k] += coef_a * adata[k] - coef_b * bdata[k];
                            }
                        }
                    });
                }
            }
            Record::BilinearPool { lhs, rhs, raw, norm } => {
                let (lhs, rhs, norm) = (*lhs, *rhs, *norm);
                let out = self.nodes[idx].payload.tensor().data();
                // Through the l2 normalization: g_z = (g - (g . out) out) / norm.
                // Through the signed sqrt: g_raw = g_z / (2 sqrt(|raw|)).
                let mut g_raw = vec![S::ZERO; raw.len()];
                if norm != S::ZERO {
                    let gdot = crate::reduce::dot(&g, out);
                    let inv_norm = S::ONE / norm;
                    let two = S::from_f64(2.0);
                    for i in 0..raw.len() {
                        let gz = (g[i] - gdot * out[i]) * inv_norm;
                        let r = raw[i].abs();
                        if r != S::ZERO {
                            g_raw[i] = gz / (two * r.sqrt());
                        }
                    }
                }
                let (c1, plane) = {
                    let d = self.value(lhs).dims();
                    (d[0], d[1] * d[2])
                };
                let c2 = self.value(rhs).dims()[0];
                if self.needs(lhs) {
                    self.with_grad_buf(lhs, |tape, gbuf| {
                        let bdata = tape.value(rhs).data();
                        for i in 0..c1 {
                            for j in 0..c2 {
                                let gr = g_raw[i * c2 + j];
                                if gr == S::ZERO {
                                    continue;
                                }
                                crate::reduce::axpy(
                                    gr,
                                    &bdata[j * plane..(j + 1) * plane],
                                    &mut gbuf[i * plane..(i + 1) * plane],
                                );
                            }
                        }
                    });
                }
                if self.needs(rhs) {
                    self.with_grad_buf(rhs, |tape, gbuf| {
                        let adata = tape.value(lhs).data();
                        for i in 0..c1 {
                            for j in 0..c2 {
                                let gr = g_raw[i * c2 + j];
                                if gr == S::ZERO {
                                    continue;
                                }
                                crate::reduce::axpy(
                                    gr,
                                    &adata[i * plane..(i + 1) * plane],
                                    &mut gbuf[j * plane..(j + 1) * plane],
                                );
                            }
                        }
                    });
                }
            }
            Record::MaxPool2 { input, argmax } => {
                let input = *input;
                if self.needs(input) {
                    self.with_grad_buf(input, |_, gbuf| {
                        for (&src, &gi) in argmax.iter().zip(g.iter()) {
                            gbuf[src as usize] += gi;
                        }
                    });
                }
            }
            Record::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (o, i) = {
                    let d = self.value(weight).dims();
                    (d[0], d[1])
                };
                if self.needs(input) {
                    self.with_grad_buf(input, |tape, gbuf| {
                        let wdata = tape.value(weight).data();
                        for r in 0..o {
                            let gi = g[r];
                            if gi == S::ZERO {
                                continue;
                            }
                            crate::reduce::axpy(gi, &wdata[r * i..(r + 1) * i], gbuf);
                        }
                    });
                }
                if self.needs(weight) {
                    self.with_grad_buf(weight, |tape, gbuf| {
                        let xdata = tape.value(input).data();
                        for r in 0..o {
                            let gi = g[r];
                            if gi == S::ZERO {
                                continue;
                            }
                            crate::reduce::axpy(gi, xdata, &mut gbuf[r * i..(r + 1) * i]);
                        }
                    });
                }
                if self.needs(bias) {
                    self.with_grad_buf(bias, |_, gbuf| {
                        for (gb, &gi) in gbuf.iter_mut().zip(g.iter()) {
                            *gb += gi;
                        }
                    });
                }
            }
            Record::NearestResize { input } => {
                let input = *input;
                if self.needs(input) {
                    let (c, hi, wi) = {
                        let d = self.value(input).dims();
                        (d[0], d[1], d[2])
                    };
                    let (h, w) = {
                        let d = self.nodes[idx].payload.tensor().dims();
                        (d[1], d[2])
                    };
                    self.with_grad_buf(input, |_, gbuf| {
                        for ch in 0..c {
                            for y in 0..h {
                                let sy = y * hi / h;
                                for xo in 0..w {
                                    let sx = xo * wi / w;
                                    gbuf[ch * hi * wi + sy * wi + sx] +=
                                        g[ch * h * w + y * w + xo];
                                }
                            }
                        }
                    });
                }
            }
            Record::Sum { input } => {
                let input = *input;
                if self.needs(input) {
                    let gi = g[0];
                    self.with_grad_buf(input, |_, gbuf| {
                        for o in gbuf.iter_mut() {
                            *o += gi;
                        }
                    });
                }
            }
            Record::SoftmaxCrossEntropy { logits, label, probs } => {
                let (logits, label) = (*logits, *label);
                if self.needs(logits) {
                    let gi = g[0];
                    self.with_grad_buf(logits, |_, gbuf| {
                        for (j, (o, &p)) in gbuf.iter_mut().zip(probs.iter()).enumerate() {
                            let delta = if j == label { S::ONE } else { S::ZERO };
                            *o += gi * (p - delta);
                        }
                    });
                }
            }
        }
        self.nodes[idx].record = record;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chw(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let x = chw(1, 3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], wdata).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let out = tape.conv2d(xv, wv, bv, 1).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn constant_field_all_ones_kernel() {
        let x = Tensor::filled(vec![1, 4, 4], 2.5f64);
        let w = Tensor::filled(vec![1, 1, 3, 3], 1.0f64);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let out = tape.conv2d(xv, wv, bv, 0).unwrap();
        assert_eq!(tape.value(out).dims(), &[1, 2, 2]);
        for &v in tape.value(out).data() {
            assert_eq!(v, 9.0 * 2.5);
        }
    }

    #[test]
    fn window_summation_example() {
        // input [[1,2],[3,4]], all-ones 3x3 kernel, padding 1 -> all tens
        let x = chw(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::filled(vec![1, 1, 3, 3], 1.0f64);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let out = tape.conv2d(xv, wv, bv, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(vec![2, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(vec![1]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        assert!(matches!(
            tape.conv2d(xv, wv, bv, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let r = tape.relu(xv);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let zero = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let zv = tape.leaf(&zero);
        let s = tape.sigmoid(zv);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn channel_scale_broadcast() {
        let m = chw(2, 1, 1, vec![3.0, 5.0]);
        let v = Tensor::new(vec![2], vec![0.5f64, 2.0]).unwrap();
        let mut tape = Tape::new();
        let mv = tape.leaf(&m);
        let vv = tape.leaf(&v);
        let out = tape.channel_mul(vv, mv).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 10.0]);
    }

    #[test]
    fn broadcast_requires_channel_vector() {
        let m = chw(2, 2, 2, vec![0.0; 8]);
        let v = Tensor::new(vec![3], vec![0.0f64; 3]).unwrap();
        let mut tape = Tape::new();
        let mv = tape.leaf(&m);
        let vv = tape.leaf(&v);
        assert!(tape.channel_mul(vv, mv).is_err());
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let a = chw(1, 2, 2, vec![0.0; 4]);
        let b = chw(1, 2, 2, vec![1.0; 4]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let c = tape.concat_channels(av, bv).unwrap();
        assert_eq!(tape.value(c).dims(), &[2, 2, 2]);
        assert_eq!(&tape.value(c).data()[..4], &[0.0; 4]);
        assert_eq!(&tape.value(c).data()[4..], &[1.0; 4]);
        let sl = tape.slice_channels(c, 0, 1).unwrap();
        assert_eq!(tape.value(sl), &a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = chw(1, 2, 2, vec![0.0; 4]);
        let b = chw(1, 3, 2, vec![1.0; 6]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        assert!(tape.concat_channels(av, bv).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = chw(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let p = tape.global_avg_pool(xv).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);

        let c = chw(1, 3, 3, vec![2.5; 9]);
        let cv = tape.leaf(&c);
        let pc = tape.global_avg_pool(cv).unwrap();
        assert!((tape.value(pc).data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_identities() {
        let a = chw(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let neg = chw(1, 2, 2, vec![-1.0, 2.0, -3.0, -0.5]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let s_same = tape.channel_cosine(av, av).unwrap();
        assert_eq!(tape.value(s_same).data()[0], 1.0);
        let nv = tape.leaf(&neg);
        let s_neg = tape.channel_cosine(av, nv).unwrap();
        assert_eq!(tape.value(s_neg).data()[0], -1.0);
    }

    #[test]
    fn cosine_orthogonal_and_zero_norm() {
        let a = chw(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let b = chw(1, 2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let z = chw(1, 2, 2, vec![0.0; 4]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let s = tape.channel_cosine(av, bv).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.0);
        let zv = tape.leaf(&z);
        let s0 = tape.channel_cosine(av, zv).unwrap();
        assert_eq!(tape.value(s0).data()[0], 0.0);
    }

    #[test]
    fn bilinear_single_element() {
        let x = chw(1, 1, 1, vec![2.0]);
        let y = chw(1, 1, 1, vec![3.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let yv = tape.leaf(&y);
        let b = tape.bilinear_pool(xv, yv).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0]);
    }

    #[test]
    fn bilinear_zero_input_stays_zero() {
        let x = chw(2, 2, 2, vec![0.0; 8]);
        let y = chw(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let yv = tape.leaf(&y);
        let b = tape.bilinear_pool(xv, yv).unwrap();
        assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_hand_computed() {
        // x = [1; -1] two channels 1x1, y = [2]: raw [2,-2],
        // signed sqrt [sqrt2, -sqrt2], normalized [1/sqrt2, -1/sqrt2]
        let x = chw(2, 1, 1, vec![1.0, -1.0]);
        let y = chw(1, 1, 1, vec![2.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let yv = tape.leaf(&y);
        let b = tape.bilinear_pool(xv, yv).unwrap();
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        let got = tape.value(b).data();
        assert!((got[0] - inv_sqrt2).abs() < 1e-12);
        assert!((got[1] + inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn bilinear_output_norm_is_one() {
        let x = chw(3, 2, 2, (0..12).map(|i| 0.3 + i as f64 * 0.17).collect());
        let y = chw(2, 2, 2, (0..8).map(|i| 0.5 + i as f64 * 0.21).collect());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let yv = tape.leaf(&y);
        let b = tape.bilinear_pool(xv, yv).unwrap();
        let n: f64 = tape.value(b).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_and_backward_routing() {
        let x = chw(1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let xg = x.clone();
        let mut tape = Tape::new();
        let xv = tape.param(&xg);
        let p = tape.max_pool2(xv).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_backward_splits_ones() {
        let a = chw(1, 2, 2, vec![0.5; 4]);
        let b = chw(2, 2, 2, vec![0.25; 8]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let c = tape.concat_channels(av, bv).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(av).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(bv).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn gap_backward_distributes_uniformly() {
        let x = chw(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let p = tape.global_avg_pool(xv).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![26]);
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        let loss = tape.softmax_cross_entropy(lv, 3).unwrap();
        assert!((tape.value(loss).item() - (26.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::<f64>::zeros(vec![4]);
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        assert!(tape.softmax_cross_entropy(lv, 4).is_err());
    }

    #[test]
    fn cleared_tape_is_empty() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 2]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let _ = tape.relu(xv);
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }
}
