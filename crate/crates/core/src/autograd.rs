//! Reverse-mode differentiation on an append-only graph.
//!
//! The defining feature is `Value::detach`: a detached value carries the same
//! data but no provenance, so anything computed from it contributes zero
//! gradient upstream. Training builds two graphs per step — one for the
//! aggregator, one for the backbone — and moves tensors between them only
//! through detach.
//!
//! Graphs are single-writer; `Value`s are immutable and cheap to clone.

use crate::error::{Error, Result};
use crate::tensor::{
    batch_matmul, matmul_nn, matmul_nt, matmul_tn, par_map, par_zip_map, strides, Scalar, Tensor,
};
use rayon::prelude::*;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

pub type NodeId = usize;

/// Handle to a tensor, either attached to a graph node or detached.
#[derive(Clone, Debug)]
pub struct Value<T> {
    data: Arc<Tensor<T>>,
    /// (graph id, node id) for attached values; None for detached/constant ones.
    origin: Option<(u64, NodeId)>,
    requires_grad: bool,
}

impl<T: Scalar> Value<T> {
    /// A detached constant. Usable on any graph; never receives gradient.
    pub fn constant(t: Tensor<T>) -> Self {
        Value {
            data: Arc::new(t),
            origin: None,
            requires_grad: false,
        }
    }

    /// Same data, no provenance, never accumulates gradient. Idempotent.
    pub fn detach(&self) -> Self {
        Value {
            data: Arc::clone(&self.data),
            origin: None,
            requires_grad: false,
        }
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_detached(&self) -> bool {
        self.origin.is_none()
    }
}

/// Operation kinds recorded on the graph. Saved inputs live on the nodes.
#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul,
    /// Leading dim is the batch; rhs is [b,n,k] when `transpose_rhs`.
    BatchMatmul {
        transpose_rhs: bool,
    },
    Add {
        broadcast: bool,
    },
    Sub {
        broadcast: bool,
    },
    Mul {
        broadcast: bool,
    },
    Div {
        broadcast: bool,
    },
    Scale(T),
    AddScalar(T),
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Gelu,
    Clamp(T, T),
    Softmax {
        axis: usize,
    },
    /// Inputs: x, gamma, beta. Normalizes over the last axis.
    LayerNorm {
        eps: T,
    },
    SumAll,
    SumAxis {
        axis: usize,
    },
    MeanAxis {
        axis: usize,
    },
    MinAll,
    MaxAll,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape,
    Permute {
        axes: Vec<usize>,
    },
    RepeatAxis {
        axis: usize,
        times: usize,
    },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    data: Arc<Tensor<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    flops: u64,
}

/// Append-only record of one forward computation. Backward replays it in
/// exact reverse append order.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// Strict graphs reject non-finite inputs on every op.
    pub fn strict() -> Self {
        let mut g = Self::new();
        g.strict = true;
        g
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total scalar-operation count of the recorded forward pass.
    pub fn flop_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    /// Register a leaf tensor and return its handle.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Value<T> {
        let data = Arc::new(t);
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            data: Arc::clone(&data),
            requires_grad,
            grad: None,
            flops: 0,
        });
        Value {
            data,
            origin: Some((self.id, id)),
            requires_grad,
        }
    }

    fn push(&mut self, node: Node<T>) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Resolve a value to a node on this graph. Detached values are interned
    /// as constant leaves; values attached to another graph are rejected.
    fn intern(&mut self, v: &Value<T>) -> Result<NodeId> {
        match v.origin {
            Some((gid, nid)) if gid == self.id => Ok(nid),
            Some(_) => Err(Error::ForeignGraph),
            None => Ok(self.push(Node {
                op: Op::Leaf,
                inputs: vec![],
                data: Arc::clone(&v.data),
                requires_grad: false,
                grad: None,
                flops: 0,
            })),
        }
    }

    fn check_finite(&self, op: &'static str, vs: &[&Value<T>]) -> Result<()> {
        if self.strict {
            for v in vs {
                if !v.data.all_finite() {
                    return Err(Error::NonFinite(op));
                }
            }
        }
        Ok(())
    }

    fn record(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        out: Tensor<T>,
        flops: u64,
    ) -> Value<T> {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let data = Arc::new(out);
        let id = self.push(Node {
            op,
            inputs,
            data: Arc::clone(&data),
            requires_grad,
            grad: None,
            flops,
        });
        Value {
            data,
            origin: Some((self.id, id)),
            requires_grad,
        }
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one was populated.
    pub fn grad(&self, v: &Value<T>) -> Option<&Tensor<T>> {
        match v.origin {
            Some((gid, nid)) if gid == self.id => self.nodes[nid].grad.as_ref(),
            _ => None,
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.check_finite("matmul", &[a, b])?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn(a.data.data(), b.data.data(), out.data_mut(), m, k, n);
        let (ia, ib) = (self.intern(a)?, self.intern(b)?);
        Ok(self.record(Op::Matmul, vec![ia, ib], out, (2 * m * k * n) as u64))
    }

    /// a [bt,m,k] @ b [bt,k,n] -> [bt,m,n].
    pub fn batch_matmul(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.batch_matmul_impl(a, b, false)
    }

    /// a [bt,m,k] @ transpose(b [bt,n,k]) -> [bt,m,n].
    pub fn batch_matmul_nt(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.batch_matmul_impl(a, b, true)
    }

    fn batch_matmul_impl(
        &mut self,
        a: &Value<T>,
        b: &Value<T>,
        transpose_rhs: bool,
    ) -> Result<Value<T>> {
        self.check_finite("batch_matmul", &[a, b])?;
        let (sa, sb) = (a.shape(), b.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_rhs {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros(vec![bt, m, n]);
        batch_matmul(
            a.data.data(),
            b.data.data(),
            out.data_mut(),
            bt,
            m,
            k,
            n,
            transpose_rhs,
        );
        let (ia, ib) = (self.intern(a)?, self.intern(b)?);
        Ok(self.record(
            Op::BatchMatmul { transpose_rhs },
            vec![ia, ib],
            out,
            (2 * bt * m * k * n) as u64,
        ))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: &Value<T>,
        b: &Value<T>,
        f: impl Fn(T, T) -> T,
        make_op: impl Fn(bool) -> Op<T>,
    ) -> Result<Value<T>> {
        self.check_finite(name, &[a, b])?;
        let (sa, sb) = (a.shape(), b.shape());
        let broadcast = sa != sb;
        if broadcast && !suffix_broadcastable(sa, sb) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bn = b.data.numel();
        let mut out = Tensor::zeros(sa.to_vec());
        let (ad, bd, od) = (a.data.data(), b.data.data(), out.data_mut());
        if broadcast {
            for (ochunk, achunk) in od.chunks_mut(bn).zip(ad.chunks(bn)) {
                for ((o, &x), &y) in ochunk.iter_mut().zip(achunk).zip(bd) {
                    *o = f(x, y);
                }
            }
        } else {
            for ((o, &x), &y) in od.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        }
        let flops = a.data.numel() as u64;
        let (ia, ib) = (self.intern(a)?, self.intern(b)?);
        Ok(self.record(make_op(broadcast), vec![ia, ib], out, flops))
    }

    pub fn add(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |broadcast| Op::Add { broadcast })
    }

    pub fn sub(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |broadcast| Op::Sub { broadcast })
    }

    pub fn mul(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |broadcast| Op::Mul { broadcast })
    }

    pub fn div(&mut self, a: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
        self.binary_elementwise("div", a, b, |x, y| x / y, |broadcast| Op::Div { broadcast })
    }

    fn unary(
        &mut self,
        name: &'static str,
        v: &Value<T>,
        f: impl Fn(T) -> T + Sync,
        op: Op<T>,
    ) -> Result<Value<T>> {
        self.check_finite(name, &[v])?;
        let mut out = Tensor::zeros(v.shape().to_vec());
        par_map(v.data.data(), out.data_mut(), f);
        let flops = v.data.numel() as u64;
        let iv = self.intern(v)?;
        Ok(self.record(op, vec![iv], out, flops))
    }

    pub fn scale(&mut self, v: &Value<T>, alpha: T) -> Result<Value<T>> {
        self.unary("scale", v, |x| x * alpha, Op::Scale(alpha))
    }

    pub fn add_scalar(&mut self, v: &Value<T>, c: T) -> Result<Value<T>> {
        self.unary("add_scalar", v, |x| x + c, Op::AddScalar(c))
    }

    pub fn exp(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.unary("exp", v, |x| x.exp(), Op::Exp)
    }

    pub fn ln(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.unary("ln", v, |x| x.ln(), Op::Ln)
    }

    pub fn sqrt(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.unary("sqrt", v, |x| x.sqrt(), Op::Sqrt)
    }

    pub fn sigmoid(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.unary("sigmoid", v, sigmoid_fn, Op::Sigmoid)
    }

    pub fn gelu(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.unary("gelu", v, gelu_fn, Op::Gelu)
    }

    pub fn clamp(&mut self, v: &Value<T>, lo: T, hi: T) -> Result<Value<T>> {
        self.unary("clamp", v, |x| x.maxv(lo).minv(hi), Op::Clamp(lo, hi))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, v: &Value<T>, axis: usize) -> Result<Value<T>> {
        self.check_finite("softmax", &[v])?;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out = v.data.as_ref().clone();
        if axis == shape.len() - 1 {
            // contiguous lanes: max-subtracted softmax in place
            let lane_len = shape[axis];
            let softmax_lane = |lane: &mut [T]| {
                let mx = lane.iter().copied().fold(lane[0], |m, x| m.maxv(x));
                let mut sum = T::ZERO;
                for x in lane.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                let inv = T::ONE / sum;
                for x in lane.iter_mut() {
                    *x *= inv;
                }
            };
            if out.numel() >= 1 << 14 {
                out.data_mut()
                    .par_chunks_mut(lane_len)
                    .for_each(softmax_lane);
            } else {
                out.data_mut().chunks_mut(lane_len).for_each(softmax_lane);
            }
        } else {
            let src = v.data.clone();
            for_each_lane(&shape, axis, |lane| {
                let vals: Vec<T> = lane.iter().map(|&i| src.data()[i]).collect();
                let mx = vals.iter().copied().fold(vals[0], |m, x| m.maxv(x));
                let exps: Vec<T> = vals.iter().map(|&x| (x - mx).exp()).collect();
                let mut sum = T::ZERO;
                for &e in &exps {
                    sum += e;
                }
                for (&i, e) in lane.iter().zip(exps) {
                    out.data_mut()[i] = e / sum;
                }
            });
        }
        let flops = (v.data.numel() * 4) as u64;
        let iv = self.intern(v)?;
        Ok(self.record(Op::Softmax { axis }, vec![iv], out, flops))
    }

    /// Layer norm over the last axis with learnable affine (gamma, beta).
    pub fn layer_norm(
        &mut self,
        x: &Value<T>,
        gamma: &Value<T>,
        beta: &Value<T>,
        eps: T,
    ) -> Result<Value<T>> {
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let shape = x.shape().to_vec();
        let d = *shape.last().ok_or(Error::BadShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(shape.clone());
        let (xd, gd, bd) = (x.data.data(), gamma.data.data(), beta.data.data());
        let inv_d = T::ONE / T::from_f64(d as f64);
        for (o_lane, x_lane) in out.data_mut().chunks_mut(d).zip(xd.chunks(d)) {
            let mut mean = T::ZERO;
            for &v in x_lane {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in x_lane {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_std = T::ONE / (var + eps).sqrt();
            for ((o, &v), (&g, &b)) in o_lane.iter_mut().zip(x_lane).zip(gd.iter().zip(bd)) {
                *o = (v - mean) * inv_std * g + b;
            }
        }
        let flops = (x.data.numel() * 8) as u64;
        let (ix, ig, ib) = (self.intern(x)?, self.intern(gamma)?, self.intern(beta)?);
        Ok(self.record(Op::LayerNorm { eps }, vec![ix, ig, ib], out, flops))
    }

    /// Full reduction to a scalar (shape [1]).
    pub fn sum_all(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.check_finite("sum_all", &[v])?;
        let mut s = T::ZERO;
        for &x in v.data.data() {
            s += x;
        }
        let flops = v.data.numel() as u64;
        let iv = self.intern(v)?;
        Ok(self.record(Op::SumAll, vec![iv], Tensor::scalar(s), flops))
    }

    pub fn sum_axis(&mut self, v: &Value<T>, axis: usize) -> Result<Value<T>> {
        self.reduce_axis("sum_axis", v, axis, false)
    }

    pub fn mean_axis(&mut self, v: &Value<T>, axis: usize) -> Result<Value<T>> {
        self.reduce_axis("mean_axis", v, axis, true)
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        v: &Value<T>,
        axis: usize,
        mean: bool,
    ) -> Result<Value<T>> {
        self.check_finite(name, &[v])?;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: name,
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = Tensor::zeros(out_shape);
        let scale = if mean {
            T::ONE / T::from_f64(shape[axis] as f64)
        } else {
            T::ONE
        };
        let mut oi = 0usize;
        for_each_lane(&shape, axis, |lane| {
            let mut s = T::ZERO;
            for &i in lane {
                s += v.data.data()[i];
            }
            out.data_mut()[oi] = s * scale;
            oi += 1;
        });
        let flops = v.data.numel() as u64;
        let iv = self.intern(v)?;
        let op = if mean {
            Op::MeanAxis { axis }
        } else {
            Op::SumAxis { axis }
        };
        Ok(self.record(op, vec![iv], out, flops))
    }

    pub fn min_all(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.extremum("min_all", v, true)
    }

    pub fn max_all(&mut self, v: &Value<T>) -> Result<Value<T>> {
        self.extremum("max_all", v, false)
    }

    fn extremum(&mut self, name: &'static str, v: &Value<T>, is_min: bool) -> Result<Value<T>> {
        self.check_finite(name, &[v])?;
        if v.data.numel() == 0 {
            return Err(Error::BadShape {
                op: name,
                shape: v.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let mut best = v.data.data()[0];
        for &x in &v.data.data()[1..] {
            let better = if is_min { x < best } else { x > best };
            if better {
                best = x;
            }
        }
        let flops = v.data.numel() as u64;
        let iv = self.intern(v)?;
        let op = if is_min { Op::MinAll } else { Op::MaxAll };
        Ok(self.record(op, vec![iv], Tensor::scalar(best), flops))
    }

    pub fn concat(&mut self, parts: &[&Value<T>], axis: usize) -> Result<Value<T>> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        self.check_finite("concat", parts)?;
        let base = parts[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::BadShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Tensor::zeros(out_shape);
        let row = axis_total * inner;
        let mut offset = 0usize;
        for p in parts {
            let pa = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst = &mut out.data_mut()[o * row + offset..o * row + offset + pa * inner];
                dst.copy_from_slice(src);
            }
            offset += pa * inner;
        }
        let ids: Vec<NodeId> = parts
            .iter()
            .map(|p| self.intern(p))
            .collect::<Result<_>>()?;
        Ok(self.record(Op::Concat { axis }, ids, out, 0))
    }

    pub fn slice(
        &mut self,
        v: &Value<T>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Value<T>> {
        self.check_finite("slice", &[v])?;
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::BadShape {
                op: "slice",
                shape,
                reason: format!("axis {axis}, start {start}, len {len}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(out_shape);
        for o in 0..outer {
            let src_base = o * shape[axis] * inner + start * inner;
            let src = &v.data.data()[src_base..src_base + len * inner];
            out.data_mut()[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let iv = self.intern(v)?;
        Ok(self.record(Op::Slice { axis, start, len }, vec![iv], out, 0))
    }

    pub fn reshape(&mut self, v: &Value<T>, shape: Vec<usize>) -> Result<Value<T>> {
        let out = v.data.reshape(shape)?;
        let iv = self.intern(v)?;
        Ok(self.record(Op::Reshape, vec![iv], out, 0))
    }

    pub fn permute(&mut self, v: &Value<T>, axes: &[usize]) -> Result<Value<T>> {
        self.check_finite("permute", &[v])?;
        let shape = v.shape().to_vec();
        if !is_permutation(axes, shape.len()) {
            return Err(Error::BadShape {
                op: "permute",
                shape,
                reason: format!("axes {axes:?} is not a permutation"),
            });
        }
        let out = permute_data(&v.data, axes);
        let iv = self.intern(v)?;
        Ok(self.record(
            Op::Permute {
                axes: axes.to_vec(),
            },
            vec![iv],
            out,
            0,
        ))
    }

    /// Tile `v` along `axis`, repeating its (length-1) extent `times` times.
    pub fn repeat_axis(&mut self, v: &Value<T>, axis: usize, times: usize) -> Result<Value<T>> {
        self.check_finite("repeat_axis", &[v])?;
        let shape = v.shape().to_vec();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::BadShape {
                op: "repeat_axis",
                shape,
                reason: format!("axis {axis} must exist with extent 1"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = times;
        let mut out = Tensor::zeros(out_shape);
        for o in 0..outer {
            let src = &v.data.data()[o * inner..(o + 1) * inner];
            for t in 0..times {
                let dst_base = o * times * inner + t * inner;
                out.data_mut()[dst_base..dst_base + inner].copy_from_slice(src);
            }
        }
        let iv = self.intern(v)?;
        Ok(self.record(Op::RepeatAxis { axis, times }, vec![iv], out, 0))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients for every requires-grad node reachable from `root`.
    /// `seed` defaults to ones and must match the root's shape; a scalar root
    /// may omit it. Resets any gradients from a previous pass.
    pub fn backward(&mut self, root: &Value<T>, seed: Option<Tensor<T>>) -> Result<()> {
        let root_id = match root.origin {
            Some((gid, nid)) if gid == self.id => nid,
            _ => return Err(Error::WrongGraph),
        };
        let seed = match seed {
            Some(s) => {
                if s.shape() != root.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "backward seed",
                        lhs: root.shape().to_vec(),
                        rhs: s.shape().to_vec(),
                    });
                }
                s
            }
            None => {
                if !root.data.is_scalar() {
                    return Err(Error::BadShape {
                        op: "backward",
                        shape: root.shape().to_vec(),
                        reason: "root is not scalar; pass an explicit seed".into(),
                    });
                }
                Tensor::scalar(T::ONE)
            }
        };

        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root_id].requires_grad {
            return Ok(()); // nothing upstream wants a gradient
        }
        self.nodes[root_id].grad = Some(seed);

        for nid in (0..=root_id).rev() {
            if self.nodes[nid].grad.is_none() || matches!(self.nodes[nid].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[nid].grad.take().unwrap();
            self.backward_node(nid, &grad)?;
            self.nodes[nid].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, nid: NodeId, delta: Tensor<T>) {
        if !self.nodes[nid].requires_grad {
            return;
        }
        match &mut self.nodes[nid].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => self.nodes[nid].grad = Some(delta),
        }
    }

    fn input_data(&self, nid: NodeId, idx: usize) -> &Tensor<T> {
        &self.nodes[self.nodes[nid].inputs[idx]].data
    }

    fn backward_node(&mut self, nid: NodeId, grad: &Tensor<T>) -> Result<()> {
        let op = self.nodes[nid].op.clone();
        let inputs = self.nodes[nid].inputs.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul => {
                let a = self.input_data(nid, 0);
                let b = self.input_data(nid, 1);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = Tensor::zeros(vec![m, k]);
                matmul_nt(grad.data(), b.data(), da.data_mut(), m, n, k);
                let mut db = Tensor::zeros(vec![k, n]);
                matmul_tn(a.data(), grad.data(), db.data_mut(), m, k, n);
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::BatchMatmul { transpose_rhs } => {
                let a = self.input_data(nid, 0).clone();
                let b = self.input_data(nid, 1).clone();
                let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = if transpose_rhs {
                    b.shape()[1]
                } else {
                    b.shape()[2]
                };
                let mut da = Tensor::zeros(vec![bt, m, k]);
                let mut db = Tensor::zeros(b.shape().to_vec());
                for bi in 0..bt {
                    let g = &grad.data()[bi * m * n..(bi + 1) * m * n];
                    let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
                    let da_b = &mut da.data_mut()[bi * m * k..(bi + 1) * m * k];
                    if transpose_rhs {
                        // out = A @ B^T, B: [n,k]
                        let bb = &b.data()[bi * n * k..(bi + 1) * n * k];
                        matmul_nn(g, bb, da_b, m, n, k);
                        let db_b = &mut db.data_mut()[bi * n * k..(bi + 1) * n * k];
                        matmul_tn(g, ab, db_b, m, n, k);
                    } else {
                        let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
                        matmul_nt(g, bb, da_b, m, n, k);
                        let db_b = &mut db.data_mut()[bi * k * n..(bi + 1) * k * n];
                        matmul_tn(ab, g, db_b, m, k, n);
                    }
                }
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::Add { broadcast } => {
                self.accumulate(inputs[0], grad.clone());
                let db = self.reduce_to_rhs(grad, inputs[1], broadcast, |g, _, _| g);
                self.accumulate(inputs[1], db);
            }
            Op::Sub { broadcast } => {
                self.accumulate(inputs[0], grad.clone());
                let db = self.reduce_to_rhs(grad, inputs[1], broadcast, |g, _, _| -g);
                self.accumulate(inputs[1], db);
            }
            Op::Mul { broadcast } => {
                let a = self.input_data(nid, 0).clone();
                let b = self.input_data(nid, 1).clone();
                let bn = b.numel();
                let mut da = Tensor::zeros(a.shape().to_vec());
                for (dchunk, gchunk) in da.data_mut().chunks_mut(bn).zip(grad.data().chunks(bn)) {
                    for ((dv, &g), &bv) in dchunk.iter_mut().zip(gchunk).zip(b.data()) {
                        *dv = g * bv;
                    }
                }
                self.accumulate(inputs[0], da);
                let db = self.reduce_to_rhs(grad, inputs[1], broadcast, |g, i, _| {
                    g * a.data()[i]
                });
                self.accumulate(inputs[1], db);
            }
            Op::Div { broadcast } => {
                let a = self.input_data(nid, 0).clone();
                let b = self.input_data(nid, 1).clone();
                let bn = b.numel();
                let mut da = Tensor::zeros(a.shape().to_vec());
                for (dchunk, gchunk) in da.data_mut().chunks_mut(bn).zip(grad.data().chunks(bn)) {
                    for ((dv, &g), &bv) in dchunk.iter_mut().zip(gchunk).zip(b.data()) {
                        *dv = g / bv;
                    }
                }
                self.accumulate(inputs[0], da);
                let db = self.reduce_to_rhs(grad, inputs[1], broadcast, |g, i, j| {
                    -g * a.data()[i] / (b.data()[j] * b.data()[j])
                });
                self.accumulate(inputs[1], db);
            }
            Op::Scale(alpha) => {
                self.accumulate(inputs[0], grad.map(|g| g * alpha));
            }
            Op::AddScalar(_) => {
                self.accumulate(inputs[0], grad.clone());
            }
            Op::Exp => {
                let y = self.nodes[nid].data.clone();
                let mut d = Tensor::zeros(y.shape().to_vec());
                par_zip_map(grad.data(), y.data(), d.data_mut(), |g, yv| g * yv);
                self.accumulate(inputs[0], d);
            }
            Op::Ln => {
                let x = self.input_data(nid, 0).clone();
                let mut d = grad.clone();
                for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *g = *g / xv;
                }
                self.accumulate(inputs[0], d);
            }
            Op::Sqrt => {
                let y = self.nodes[nid].data.clone();
                let half = T::from_f64(0.5);
                let mut d = grad.clone();
                for (g, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *g = *g * half / yv;
                }
                self.accumulate(inputs[0], d);
            }
            Op::Sigmoid => {
                let y = self.nodes[nid].data.clone();
                let mut d = Tensor::zeros(y.shape().to_vec());
                par_zip_map(grad.data(), y.data(), d.data_mut(), |g, yv| {
                    g * yv * (T::ONE - yv)
                });
                self.accumulate(inputs[0], d);
            }
            Op::Gelu => {
                let x = self.input_data(nid, 0).clone();
                let mut d = Tensor::zeros(x.shape().to_vec());
                par_zip_map(grad.data(), x.data(), d.data_mut(), |g, xv| {
                    g * gelu_grad(xv)
                });
                self.accumulate(inputs[0], d);
            }
            Op::Clamp(lo, hi) => {
                let x = self.input_data(nid, 0).clone();
                let mut d = grad.clone();
                for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv < lo || xv > hi {
                        *g = T::ZERO;
                    }
                }
                self.accumulate(inputs[0], d);
            }
            Op::Softmax { axis } => {
                let y = self.nodes[nid].data.clone();
                let mut d = Tensor::zeros(y.shape().to_vec());
                if axis == y.rank() - 1 {
                    let lane_len = *y.shape().last().unwrap();
                    let body = |(d_lane, (y_lane, g_lane)): (&mut [T], (&[T], &[T]))| {
                        let mut dot = T::ZERO;
                        for (&yv, &gv) in y_lane.iter().zip(g_lane) {
                            dot += yv * gv;
                        }
                        for ((dv, &yv), &gv) in d_lane.iter_mut().zip(y_lane).zip(g_lane) {
                            *dv = yv * (gv - dot);
                        }
                    };
                    if d.numel() >= 1 << 14 {
                        d.data_mut()
                            .par_chunks_mut(lane_len)
                            .zip(y.data().par_chunks(lane_len).zip(grad.data().par_chunks(lane_len)))
                            .for_each(body);
                    } else {
                        d.data_mut()
                            .chunks_mut(lane_len)
                            .zip(y.data().chunks(lane_len).zip(grad.data().chunks(lane_len)))
                            .for_each(body);
                    }
                } else {
                    for_each_lane(y.shape(), axis, |lane| {
                        let mut dot = T::ZERO;
                        for &i in lane {
                            dot += grad.data()[i] * y.data()[i];
                        }
                        for &i in lane {
                            d.data_mut()[i] = y.data()[i] * (grad.data()[i] - dot);
                        }
                    });
                }
                self.accumulate(inputs[0], d);
            }
            Op::LayerNorm { eps } => {
                let x = self.input_data(nid, 0).clone();
                let gamma = self.input_data(nid, 1).clone();
                let d = *x.shape().last().unwrap();
                let inv_d = T::ONE / T::from_f64(d as f64);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dgamma = Tensor::zeros(vec![d]);
                let mut dbeta = Tensor::zeros(vec![d]);
                for (lane_idx, x_lane) in x.data().chunks(d).enumerate() {
                    let g_lane = &grad.data()[lane_idx * d..(lane_idx + 1) * d];
                    let mut mean = T::ZERO;
                    for &v in x_lane {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = T::ZERO;
                    for &v in x_lane {
                        let c = v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    let inv_std = T::ONE / (var + eps).sqrt();
                    // xhat and the two lane means of dxhat, dxhat*xhat
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..d {
                        let xh = (x_lane[j] - mean) * inv_std;
                        let dxh = g_lane[j] * gamma.data()[j];
                        m1 += dxh;
                        m2 += dxh * xh;
                        dgamma.data_mut()[j] += g_lane[j] * xh;
                        dbeta.data_mut()[j] += g_lane[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    let dx_lane = &mut dx.data_mut()[lane_idx * d..(lane_idx + 1) * d];
                    for j in 0..d {
                        let xh = (x_lane[j] - mean) * inv_std;
                        let dxh = g_lane[j] * gamma.data()[j];
                        dx_lane[j] = (dxh - m1 - xh * m2) * inv_std;
                    }
                }
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], dgamma);
                self.accumulate(inputs[2], dbeta);
            }
            Op::SumAll => {
                let x_shape = self.input_data(nid, 0).shape().to_vec();
                let g = grad.item();
                self.accumulate(inputs[0], Tensor::full(x_shape, g));
            }
            Op::SumAxis { axis } | Op::MeanAxis { axis } => {
                let x_shape = self.input_data(nid, 0).shape().to_vec();
                let scale = match op {
                    Op::MeanAxis { .. } => T::ONE / T::from_f64(x_shape[axis] as f64),
                    _ => T::ONE,
                };
                let mut d = Tensor::zeros(x_shape.clone());
                let mut oi = 0usize;
                for_each_lane(&x_shape, axis, |lane| {
                    let g = grad.data()[oi] * scale;
                    for &i in lane {
                        d.data_mut()[i] = g;
                    }
                    oi += 1;
                });
                self.accumulate(inputs[0], d);
            }
            Op::MinAll | Op::MaxAll => {
                // Subgradient to the first attaining index.
                let x = self.input_data(nid, 0).clone();
                let best = self.nodes[nid].data.item();
                let pos = x.data().iter().position(|&v| v == best).unwrap_or(0);
                let mut d = Tensor::zeros(x.shape().to_vec());
                d.data_mut()[pos] = grad.item();
                self.accumulate(inputs[0], d);
            }
            Op::Concat { axis } => {
                let out_shape = self.nodes[nid].data.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut offset = 0usize;
                for &inp in &inputs {
                    let pa = self.nodes[inp].data.shape()[axis];
                    let mut d = Tensor::zeros(self.nodes[inp].data.shape().to_vec());
                    for o in 0..outer {
                        let src = &grad.data()[o * row + offset..o * row + offset + pa * inner];
                        d.data_mut()[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(src);
                    }
                    offset += pa * inner;
                    self.accumulate(inp, d);
                }
            }
            Op::Slice { axis, start, len } => {
                let x_shape = self.input_data(nid, 0).shape().to_vec();
                let outer: usize = x_shape[..axis].iter().product();
                let inner: usize = x_shape[axis + 1..].iter().product();
                let mut d = Tensor::zeros(x_shape.clone());
                for o in 0..outer {
                    let dst_base = o * x_shape[axis] * inner + start * inner;
                    let src = &grad.data()[o * len * inner..(o + 1) * len * inner];
                    d.data_mut()[dst_base..dst_base + len * inner].copy_from_slice(src);
                }
                self.accumulate(inputs[0], d);
            }
            Op::Reshape => {
                let x_shape = self.input_data(nid, 0).shape().to_vec();
                self.accumulate(inputs[0], grad.reshape(x_shape)?);
            }
            Op::Permute { axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(inputs[0], permute_data(grad, &inverse));
            }
            Op::RepeatAxis { axis, times } => {
                let x_shape = self.input_data(nid, 0).shape().to_vec();
                let outer: usize = x_shape[..axis].iter().product();
                let inner: usize = x_shape[axis + 1..].iter().product();
                let mut d = Tensor::zeros(x_shape.clone());
                for o in 0..outer {
                    for t in 0..times {
                        let src_base = o * times * inner + t * inner;
                        let dst = &mut d.data_mut()[o * inner..(o + 1) * inner];
                        for (dv, &gv) in dst.iter_mut().zip(&grad.data()[src_base..src_base + inner])
                        {
                            *dv += gv;
                        }
                    }
                }
                self.accumulate(inputs[0], d);
            }
        }
        Ok(())
    }

    /// Build the rhs gradient of a broadcast binary op by summing `g(i)` over
    /// all lhs positions i that map to each rhs position.
    fn reduce_to_rhs(
        &self,
        grad: &Tensor<T>,
        rhs: NodeId,
        broadcast: bool,
        f: impl Fn(T, usize, usize) -> T,
    ) -> Tensor<T> {
        let rhs_shape = self.nodes[rhs].data.shape().to_vec();
        let bn: usize = rhs_shape.iter().product();
        let mut d = Tensor::zeros(rhs_shape);
        if broadcast {
            for (c, gchunk) in grad.data().chunks(bn).enumerate() {
                for (j, &g) in gchunk.iter().enumerate() {
                    d.data_mut()[j] += f(g, c * bn + j, j);
                }
            }
        } else {
            for (i, (dv, &g)) in d.data_mut().iter_mut().zip(grad.data()).enumerate() {
                *dv = f(g, i, i);
            }
        }
        d
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Helpers ─────────────────────────────────────────────────────────────

#[inline]
fn sigmoid_fn<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
#[inline]
fn gelu_fn<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

fn suffix_broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    if rhs.iter().product::<usize>() == 1 {
        return true;
    }
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn permute_data<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let numel = t.numel();
    let mut src = 0usize;
    for o in 0..numel {
        out.data_mut()[o] = t.data()[src];
        // odometer increment over out_shape, tracking src via out_strides
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Visit index lanes along `axis`: calls `f` once per lane with the flat
/// indices of that lane's elements, in a fixed deterministic order.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, l) in lane.iter_mut().enumerate() {
                *l = o * axis_len * inner + j * inner + i;
            }
            f(&lane);
        }
    }
}

/// Central-difference gradient of `f` at `x`: (f(x+h·e_i) − f(x−h·e_i))/(2h)
/// per coordinate, in f64. The verification oracle used throughout the tests.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Numerical("finite_diff_gradient: h must be > 0".into()));
    }
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs)?;
        xs[i] = orig - h;
        let fm = f(&xs)?;
        xs[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_gradient"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Backward vs central finite differences for a unary construction.
    fn check_grad(
        shape: &[usize],
        lo: f64,
        hi: f64,
        seed: u64,
        build: impl Fn(&mut Graph<f64>, &Value<f64>) -> Value<f64>,
    ) {
        let x0 = rand_tensor(shape, lo, hi, seed);
        let eval = |flat: &[f64]| -> crate::error::Result<f64> {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(shape.to_vec(), flat.to_vec())?, true);
            let y = build(&mut g, &x);
            // deterministic weighting so every output influences the scalar
            let w = Tensor::new(
                y.shape().to_vec(),
                (0..y.data().numel())
                    .map(|i| 0.3 + 0.05 * (i as f64 % 7.0))
                    .collect(),
            )?;
            let yw = g.mul(&y, &Value::constant(w))?;
            Ok(g.sum_all(&yw)?.data().item())
        };
        let fd = finite_diff_gradient(eval, x0.data(), 1e-5).unwrap();

        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = build(&mut g, &x);
        let w = Tensor::new(
            y.shape().to_vec(),
            (0..y.data().numel())
                .map(|i| 0.3 + 0.05 * (i as f64 % 7.0))
                .collect(),
        )
        .unwrap();
        let yw = g.mul(&y, &Value::constant(w)).unwrap();
        let s = g.sum_all(&yw).unwrap();
        g.backward(&s, None).unwrap();
        let grad = g.grad(&x).expect("leaf grad populated");
        let max_err = grad
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| rel_err(*a, *b))
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-4, "max rel err {max_err}");
    }

    /// Backward vs finite differences for a two-input construction; checks
    /// the gradient of both inputs.
    fn check_grad2(
        sa: &[usize],
        sb: &[usize],
        lo: f64,
        hi: f64,
        seed: u64,
        build: impl Fn(&mut Graph<f64>, &Value<f64>, &Value<f64>) -> Value<f64>,
    ) {
        let a0 = rand_tensor(sa, lo, hi, seed);
        let b0 = rand_tensor(sb, lo, hi, seed ^ 0xabcd);
        let na = a0.numel();
        let all: Vec<f64> = a0.data().iter().chain(b0.data()).copied().collect();
        let eval = |flat: &[f64]| -> crate::error::Result<f64> {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(sa.to_vec(), flat[..na].to_vec())?, true);
            let b = g.leaf(Tensor::new(sb.to_vec(), flat[na..].to_vec())?, true);
            let y = build(&mut g, &a, &b);
            Ok(g.sum_all(&y)?.data().item())
        };
        let fd = finite_diff_gradient(eval, &all, 1e-5).unwrap();

        let mut g = Graph::new();
        let a = g.leaf(a0, true);
        let b = g.leaf(b0, true);
        let y = build(&mut g, &a, &b);
        let s = g.sum_all(&y).unwrap();
        g.backward(&s, None).unwrap();
        let mut got: Vec<f64> = g.grad(&a).unwrap().data().to_vec();
        got.extend_from_slice(g.grad(&b).unwrap().data());
        let max_err = got
            .iter()
            .zip(&fd)
            .map(|(x, y)| rel_err(*x, *y))
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-4, "max rel err {max_err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0), false);
        let y = g.sigmoid(&x).unwrap();
        assert_eq!(y.data().item(), 0.5);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0, 0.0]), false);
        let y = g.softmax(&x, 0).unwrap();
        assert_eq!(y.data().data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_example() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let b = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(), false);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.data().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(4.0), true);
        let p = g.mul(&x, &y).unwrap();
        g.backward(&p, None).unwrap();
        assert_eq!(g.grad(&x).unwrap().item(), 4.0);
        assert_eq!(g.grad(&y).unwrap().item(), 3.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        // root = sum(detach(x) * x) with x=[2] → grad(x) = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![2.0]), true);
        let xd = x.detach();
        assert!(xd.is_detached() && !xd.requires_grad());
        let p = g.mul(&xd, &x).unwrap();
        let s = g.sum_all(&p).unwrap();
        g.backward(&s, None).unwrap();
        assert_eq!(g.grad(&x).unwrap().item(), 2.0);
    }

    #[test]
    fn detach_data_identical_and_idempotent() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.5, 3.25]), true);
        let d1 = x.detach();
        let d2 = d1.detach();
        assert_eq!(x.data().data(), d1.data().data());
        assert_eq!(d1.data().data(), d2.data().data());
        assert!(d2.is_detached());
    }

    #[test]
    fn backward_through_detached_input_leaves_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let d = x.detach();
        let y = g.exp(&d).unwrap();
        let s = g.sum_all(&y).unwrap();
        // nothing upstream requires grad: backward is a no-op
        g.backward(&s, None).unwrap();
        assert!(g.grad(&x).is_none());
    }

    #[test]
    fn sigmoid_chain_grad_quarter() {
        // σ(w·x) at w=0, x=1: dσ/dw = σ(0)(1−σ(0))·x = 0.25
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(0.0), true);
        let x = g.leaf(Tensor::scalar(1.0), false);
        let wx = g.mul(&w, &x).unwrap();
        let y = g.sigmoid(&wx).unwrap();
        g.backward(&y, None).unwrap();
        let got = g.grad(&w).unwrap().item();
        let fd = finite_diff_gradient(
            |v| {
                let mut g = Graph::<f64>::new();
                let w = g.leaf(Tensor::scalar(v[0]), true);
                let x = g.leaf(Tensor::scalar(1.0), false);
                let wx = g.mul(&w, &x)?;
                Ok(g.sigmoid(&wx)?.data().item())
            },
            &[0.0],
            1e-5,
        )
        .unwrap();
        assert!((got - 0.25).abs() < 1e-12);
        assert!(rel_err(got, fd[0]) < 1e-4);
    }

    #[test]
    fn accumulation_equals_sum_of_single_paths() {
        // x feeds two paths: y = 2x + x² ; grad = 2 + 2x
        let x0 = 1.7;
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(x0), true);
        let p1 = g.scale(&x, 2.0).unwrap();
        let p2 = g.mul(&x, &x).unwrap();
        let y = g.add(&p1, &p2).unwrap();
        g.backward(&y, None).unwrap();
        let joint = g.grad(&x).unwrap().item();

        // graph surgery: each path alone
        let mut g1 = Graph::<f64>::new();
        let x1 = g1.leaf(Tensor::scalar(x0), true);
        let a = g1.scale(&x1, 2.0).unwrap();
        g1.backward(&a, None).unwrap();
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(Tensor::scalar(x0), true);
        let b = g2.mul(&x2, &x2).unwrap();
        g2.backward(&b, None).unwrap();
        let sum = g1.grad(&x1).unwrap().item() + g2.grad(&x2).unwrap().item();
        assert!((joint - sum).abs() < 1e-12);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(rand_tensor(&[4, 6], -2.0, 2.0, 99).cast::<f32>(), true);
            let w = g.leaf(rand_tensor(&[6, 3], -2.0, 2.0, 7).cast::<f32>(), true);
            let h = g.matmul(&x, &w).unwrap();
            let s1 = g.softmax(&h, 1).unwrap();
            let y = g.sum_all(&s1).unwrap();
            g.backward(&y, None).unwrap();
            (
                s1.data().data().to_vec(),
                g.grad(&x).unwrap().data().to_vec(),
                g.grad(&w).unwrap().data().to_vec(),
            )
        };
        let (a1, b1, c1) = run();
        let (a2, b2, c2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn backward_rejects_foreign_root() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.leaf(Tensor::scalar(1.0), true);
        let y = g1.exp(&x).unwrap();
        assert!(matches!(g2.backward(&y, None), Err(Error::WrongGraph)));
    }

    #[test]
    fn foreign_attached_value_rejected_as_op_input() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.leaf(Tensor::scalar(1.0), true);
        let y = g1.exp(&x).unwrap();
        assert!(matches!(g2.exp(&y), Err(Error::ForeignGraph)));
        // detaching first makes it usable
        assert!(g2.exp(&y.detach()).is_ok());
    }

    #[test]
    fn strict_mode_rejects_nonfinite() {
        let mut g = Graph::<f64>::strict();
        let x = g.leaf(Tensor::from_vec(vec![1.0, f64::NAN]), false);
        assert!(matches!(g.exp(&x), Err(Error::NonFinite(_))));
    }

    // ── finite-difference checks, one per primitive op ──────────────────

    #[test]
    fn fd_matmul() {
        check_grad2(&[3, 4], &[4, 2], -2.0, 2.0, 1, |g, a, b| {
            g.matmul(a, b).unwrap()
        });
    }

    #[test]
    fn fd_batch_matmul() {
        check_grad2(&[2, 3, 4], &[2, 4, 2], -2.0, 2.0, 2, |g, a, b| {
            g.batch_matmul(a, b).unwrap()
        });
    }

    #[test]
    fn fd_batch_matmul_nt() {
        check_grad2(&[2, 3, 4], &[2, 5, 4], -2.0, 2.0, 3, |g, a, b| {
            g.batch_matmul_nt(a, b).unwrap()
        });
    }

    #[test]
    fn fd_add_sub_mul_div_same_shape() {
        check_grad2(&[3, 4], &[3, 4], 0.5, 2.0, 4, |g, a, b| g.add(a, b).unwrap());
        check_grad2(&[3, 4], &[3, 4], 0.5, 2.0, 5, |g, a, b| g.sub(a, b).unwrap());
        check_grad2(&[3, 4], &[3, 4], 0.5, 2.0, 6, |g, a, b| g.mul(a, b).unwrap());
        check_grad2(&[3, 4], &[3, 4], 0.5, 2.0, 7, |g, a, b| g.div(a, b).unwrap());
    }

    #[test]
    fn fd_broadcast_binary() {
        check_grad2(&[3, 4], &[4], 0.5, 2.0, 8, |g, a, b| g.add(a, b).unwrap());
        check_grad2(&[2, 3, 4], &[3, 4], 0.5, 2.0, 9, |g, a, b| g.mul(a, b).unwrap());
        check_grad2(&[3, 4], &[1], 0.5, 2.0, 10, |g, a, b| g.div(a, b).unwrap());
        check_grad2(&[3, 4], &[1], 0.5, 2.0, 11, |g, a, b| g.sub(a, b).unwrap());
    }

    #[test]
    fn fd_unary_elementwise() {
        check_grad(&[3, 4], -2.0, 2.0, 12, |g, x| g.scale(x, -1.3).unwrap());
        check_grad(&[3, 4], -2.0, 2.0, 13, |g, x| g.add_scalar(x, 0.7).unwrap());
        check_grad(&[3, 4], -2.0, 2.0, 14, |g, x| g.exp(x).unwrap());
        check_grad(&[3, 4], 0.2, 2.0, 15, |g, x| g.ln(x).unwrap());
        check_grad(&[3, 4], 0.2, 2.0, 16, |g, x| g.sqrt(x).unwrap());
        check_grad(&[3, 4], -2.0, 2.0, 17, |g, x| g.sigmoid(x).unwrap());
        check_grad(&[3, 4], -2.0, 2.0, 18, |g, x| g.gelu(x).unwrap());
        // clamp: keep inputs away from the boundaries where the subgradient jumps
        check_grad(&[3, 4], -0.8, 0.8, 19, |g, x| g.clamp(x, -0.9, 0.9).unwrap());
    }

    #[test]
    fn fd_softmax_axes() {
        check_grad(&[5], -2.0, 2.0, 20, |g, x| g.softmax(x, 0).unwrap());
        check_grad(&[3, 4], -2.0, 2.0, 21, |g, x| g.softmax(x, 1).unwrap());
        check_grad(&[2, 3, 4], -2.0, 2.0, 22, |g, x| g.softmax(x, 1).unwrap());
    }

    #[test]
    fn fd_layer_norm() {
        let gamma = rand_tensor(&[6], 0.5, 1.5, 23);
        let beta = rand_tensor(&[6], -0.5, 0.5, 24);
        check_grad(&[4, 6], -2.0, 2.0, 25, move |g, x| {
            let ga = g.leaf(gamma.clone(), false);
            let be = g.leaf(beta.clone(), false);
            g.layer_norm(x, &ga, &be, 1e-5).unwrap()
        });
        // and through gamma/beta as the differentiated inputs
        let x = rand_tensor(&[4, 6], -2.0, 2.0, 26);
        check_grad2(&[6], &[6], 0.5, 1.5, 27, move |g, ga, be| {
            let xv = g.leaf(x.clone(), false);
            g.layer_norm(&xv, ga, be, 1e-5).unwrap()
        });
    }

    #[test]
    fn fd_reductions() {
        check_grad(&[3, 4], -2.0, 2.0, 28, |g, x| g.sum_axis(x, 0).unwrap());
        check_grad(&[3, 4], -2.0, 2.0, 29, |g, x| g.mean_axis(x, 1).unwrap());
        check_grad(&[2, 3, 4], -2.0, 2.0, 30, |g, x| g.mean_axis(x, 2).unwrap());
        check_grad(&[7], -2.0, 2.0, 31, |g, x| g.min_all(x).unwrap());
        check_grad(&[7], -2.0, 2.0, 32, |g, x| g.max_all(x).unwrap());
    }

    #[test]
    fn fd_structural() {
        check_grad(&[3, 4], -2.0, 2.0, 33, |g, x| {
            g.reshape(x, vec![4, 3]).unwrap()
        });
        check_grad(&[2, 3, 4], -2.0, 2.0, 34, |g, x| {
            g.permute(x, &[2, 0, 1]).unwrap()
        });
        check_grad(&[3, 5, 2], -2.0, 2.0, 35, |g, x| g.slice(x, 1, 1, 3).unwrap());
        check_grad(&[3, 1, 2], -2.0, 2.0, 36, |g, x| {
            g.repeat_axis(x, 1, 4).unwrap()
        });
        check_grad2(&[2, 3], &[2, 5], -2.0, 2.0, 37, |g, a, b| {
            g.concat(&[a, b], 1).unwrap()
        });
    }

    #[test]
    fn min_max_tie_goes_to_first_index() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0, 1.0, 1.0, 2.0]), true);
        let y = g.min_all(&x).unwrap();
        g.backward(&y, None).unwrap();
        assert_eq!(g.grad(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn flop_count_scales_exactly_with_rows() {
        let build = |rows: usize| {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::zeros(vec![rows, 8]), false);
            let w = g.leaf(Tensor::zeros(vec![8, 8]), false);
            let h = g.matmul(&x, &w).unwrap();
            let _ = g.softmax(&h, 1).unwrap();
            g.flop_count()
        };
        assert_eq!(build(6), 2 * build(3));
    }

    #[test]
    fn finite_diff_examples() {
        // f(x) = x² at 3 → 6 within 1e-8
        let g = finite_diff_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        // f = sum → all ones
        let g = finite_diff_gradient(|x| Ok(x.iter().sum()), &[0.3, -1.2, 7.0], 1e-5).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
        // invalid h and non-finite f are rejected
        assert!(finite_diff_gradient(|x| Ok(x[0]), &[1.0], 0.0).is_err());
        assert!(finite_diff_gradient(|_| Ok(f64::NAN), &[1.0], 1e-5).is_err());
    }

    #[test]
    fn backward_seed_shape_checked() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.exp(&x).unwrap();
        assert!(g.backward(&y, None).is_err()); // non-scalar root needs a seed
        assert!(g
            .backward(&y, Some(Tensor::from_vec(vec![1.0, 1.0, 1.0])))
            .is_err());
        assert!(g.backward(&y, Some(Tensor::from_vec(vec![1.0, 1.0]))).is_ok());
    }
}
