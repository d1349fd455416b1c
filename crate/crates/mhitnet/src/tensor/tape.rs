//! The recording tape for reverse-mode differentiation.
//!
//! A tape lives for one forward+backward pass. Operations append nodes in
//! topological order; [`Tape::backward`] walks them in reverse, handing each
//! node's upstream gradient to its recorded backward rule. A node feeding
//! several consumers accumulates (sums) every contribution before it is
//! visited.

use std::mem;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Axes a lane-wise operation (softmax) can normalize over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channels,
    Height,
    Width,
}

/// Backward rule: receives the upstream gradient for the node's output and
/// accumulates into the parents through the [`GradStore`].
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &mut GradStore)>;

struct Node {
    shape: Shape,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct GradStore {
    bufs: Vec<Option<Vec<f32>>>,
    numels: Vec<usize>,
    requires: Vec<bool>,
}

impl GradStore {
    /// Accumulate into `v`'s gradient buffer. No-op when `v` does not
    /// require a gradient.
    pub fn add_to(&mut self, v: Value, f: impl FnOnce(&mut [f32])) {
        if !self.requires[v.0] {
            return;
        }
        let buf = self.bufs[v.0].get_or_insert_with(|| vec![0.0; self.numels[v.0]]);
        f(buf);
    }

    pub fn add_slice(&mut self, v: Value, g: &[f32]) {
        self.add_to(v, |buf| {
            for (o, &x) in buf.iter_mut().zip(g) {
                *o += x;
            }
        });
    }

    pub fn get(&self, v: Value) -> Option<&[f32]> {
        self.bufs[v.0].as_deref()
    }

    fn take(&mut self, v: usize) -> Option<Vec<f32>> {
        self.bufs[v].take()
    }
}

/// Records a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backs: Vec<Option<BackwardFn>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backs: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records data flow only; backward rules are dropped.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            backs: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// Clone the node's value out of the tape (shares the buffer).
    pub fn tensor(&self, v: Value) -> Tensor {
        Tensor::from_arc(self.nodes[v.0].shape, Arc::clone(&self.nodes[v.0].data))
    }

    pub(crate) fn data_arc(&self, v: Value) -> Arc<Vec<f32>> {
        Arc::clone(&self.nodes[v.0].data)
    }

    /// True when a node built from these parents would need a backward rule.
    pub fn wants_grad(&self, parents: &[Value]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Value {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape(),
            data: t.arc(),
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.backs.push(None);
        Value(id)
    }

    pub fn constant(&mut self, t: &Tensor) -> Value {
        self.leaf(t, false)
    }

    /// Append an op node. The backward rule is kept only when some parent
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        shape: Shape,
        data: Vec<f32>,
        parents: &[Value],
        backward: Option<BackwardFn>,
    ) -> Value {
        debug_assert_eq!(shape.numel(), data.len());
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let requires = self.wants_grad(parents);
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            requires_grad: requires,
        });
        self.backs.push(if requires { backward } else { None });
        Value(id)
    }

    /// Run reverse-mode differentiation from a scalar loss. Consumes the
    /// recorded backward rules; the tape is spent afterwards.
    pub fn backward(&mut self, loss: Value) -> Result<GradStore> {
        let shape = self.nodes[loss.0].shape;
        if !shape.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {shape}"
            )));
        }
        let n = self.nodes.len();
        let mut store = GradStore {
            bufs: (0..n).map(|_| None).collect(),
            numels: self.nodes.iter().map(|nd| nd.shape.numel()).collect(),
            requires: self.nodes.iter().map(|nd| nd.requires_grad).collect(),
        };
        store.add_to(loss, |buf| buf[0] = 1.0);
        let backs = mem::take(&mut self.backs);
        for i in (0..n).rev() {
            if let Some(back) = &backs[i] {
                if let Some(g) = store.take(i) {
                    back(&g, &mut store);
                }
            }
        }
        Ok(store)
    }

    // ── elementwise ─────────────────────────────────────────────────

    /// Elementwise sum; `b` may broadcast over `a` (dims of size 1 expand).
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::dim("elementwise_add", sa, sb))?;
        let da = self.data_arc(a);
        let db = self.data_arc(b);
        let mut out = vec![0.0f32; out_shape.numel()];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(da.iter()).zip(db.iter()) {
                *o = x + y;
            }
        } else {
            for_each_coord(out_shape, |i, bb, cc, yy, xx| {
                out[i] = da[bcast_index(sa, bb, cc, yy, xx)] + db[bcast_index(sb, bb, cc, yy, xx)];
            });
        }
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| reduce_broadcast(g, out_shape, sa, buf));
            store.add_to(b, |buf| reduce_broadcast(g, out_shape, sb, buf));
        });
        Ok(self.push(out_shape, out, &[a, b], Some(back)))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::dim("elementwise_mul", sa, sb))?;
        let da = self.data_arc(a);
        let db = self.data_arc(b);
        let mut out = vec![0.0f32; out_shape.numel()];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(da.iter()).zip(db.iter()) {
                *o = x * y;
            }
        } else {
            for_each_coord(out_shape, |i, bb, cc, yy, xx| {
                out[i] = da[bcast_index(sa, bb, cc, yy, xx)] * db[bcast_index(sb, bb, cc, yy, xx)];
            });
        }
        let (ca, cb) = (Arc::clone(&da), Arc::clone(&db));
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| {
                for_each_coord(out_shape, |i, bb, cc, yy, xx| {
                    buf[bcast_index(sa, bb, cc, yy, xx)] +=
                        g[i] * cb[bcast_index(sb, bb, cc, yy, xx)];
                });
            });
            store.add_to(b, |buf| {
                for_each_coord(out_shape, |i, bb, cc, yy, xx| {
                    buf[bcast_index(sb, bb, cc, yy, xx)] +=
                        g[i] * ca[bcast_index(sa, bb, cc, yy, xx)];
                });
            });
        });
        Ok(self.push(out_shape, out, &[a, b], Some(back)))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Value, k: f32) -> Value {
        let shape = self.shape(a);
        let out: Vec<f32> = self.data(a).iter().map(|&x| x * k).collect();
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| {
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o += x * k;
                }
            });
        });
        self.push(shape, out, &[a], Some(back))
    }

    // ── activations ─────────────────────────────────────────────────

    /// max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Value) -> Value {
        let shape = self.shape(a);
        let da = self.data_arc(a);
        let out: Vec<f32> = da.iter().map(|&x| x.max(0.0)).collect();
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| {
                for ((o, &x), &gv) in buf.iter_mut().zip(da.iter()).zip(g) {
                    if x > 0.0 {
                        *o += gv;
                    }
                }
            });
        });
        self.push(shape, out, &[a], Some(back))
    }

    /// 1 / (1 + e^-x).
    pub fn sigmoid(&mut self, a: Value) -> Value {
        let shape = self.shape(a);
        let out: Vec<f32> = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let saved = Arc::new(out.clone());
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| {
                for ((o, &y), &gv) in buf.iter_mut().zip(saved.iter()).zip(g) {
                    *o += gv * y * (1.0 - y);
                }
            });
        });
        self.push(shape, out, &[a], Some(back))
    }

    /// Max-subtracted softmax along `axis`; every lane sums to one.
    pub fn softmax(&mut self, a: Value, axis: Axis) -> Result<Value> {
        let shape = self.shape(a);
        let da = self.data_arc(a);
        if da.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "softmax input contains a non-finite value".into(),
            ));
        }
        let (pre, len, post) = axis_decomp(shape, axis);
        let mut out = vec![0.0f32; shape.numel()];
        for p in 0..pre {
            for q in 0..post {
                let base = p * len * post + q;
                softmax_lane(&da, &mut out, base, len, post);
            }
        }
        let saved = Arc::new(out.clone());
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| {
                for p in 0..pre {
                    for q in 0..post {
                        let base = p * len * post + q;
                        let mut dot = 0.0f64;
                        for i in 0..len {
                            let idx = base + i * post;
                            dot += g[idx] as f64 * saved[idx] as f64;
                        }
                        for i in 0..len {
                            let idx = base + i * post;
                            buf[idx] += saved[idx] * (g[idx] - dot as f32);
                        }
                    }
                }
            });
        });
        Ok(self.push(shape, out, &[a], Some(back)))
    }

    // ── matrices ────────────────────────────────────────────────────

    /// Matrix product of two (1, 1, m, k) x (1, 1, k, n) tensors.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.batch != 1 || sa.channels != 1 || sb.batch != 1 || sb.channels != 1 {
            return Err(Error::dim("matmul (expects matrices)", sa, sb));
        }
        if sa.width != sb.height {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa.height, sa.width, sb.width);
        let da = self.data_arc(a);
        let db = self.data_arc(b);
        let mut out = vec![0.0f32; m * n];
        super::kernels::matmul(&da, &db, m, k, n, &mut out);
        let back: BackwardFn = Box::new(move |g, store| {
            // dA = g * B^T, dB = A^T * g
            store.add_to(a, |buf| {
                let mut tmp = vec![0.0f32; m * k];
                super::kernels::matmul_nt(g, &db, m, n, k, &mut tmp);
                for (o, &x) in buf.iter_mut().zip(&tmp) {
                    *o += x;
                }
            });
            store.add_to(b, |buf| {
                super::kernels::matmul_tn_acc(&da, g, m, k, n, buf);
            });
        });
        Ok(self.push(Shape::matrix(m, n), out, &[a, b], Some(back)))
    }

    /// Transpose of a (1, 1, m, n) matrix.
    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let sa = self.shape(a);
        if sa.batch != 1 || sa.channels != 1 {
            return Err(Error::dim("transpose (expects a matrix)", sa, sa));
        }
        let (m, n) = (sa.height, sa.width);
        let da = self.data(a);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let back: BackwardFn = Box::new(move |g, store| {
            store.add_to(a, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            });
        });
        Ok(self.push(Shape::matrix(n, m), out, &[a], Some(back)))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Value) -> Value {
        let total: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let back: BackwardFn = Box::new(move |g, store| {
            let g0 = g[0];
            store.add_to(a, |buf| {
                for o in buf.iter_mut() {
                    *o += g0;
                }
            });
        });
        self.push(Shape::scalar(), vec![total as f32], &[a], Some(back))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: Value) -> Value {
        let n = self.shape(a).numel();
        let total: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let back: BackwardFn = Box::new(move |g, store| {
            let g0 = g[0] / n as f32;
            store.add_to(a, |buf| {
                for o in buf.iter_mut() {
                    *o += g0;
                }
            });
        });
        self.push(
            Shape::scalar(),
            vec![(total / n as f64) as f32],
            &[a],
            Some(back),
        )
    }

    // ── shape ───────────────────────────────────────────────────────

    /// Concatenate along the channel axis; all parts share (batch, h, w).
    pub fn concat_channels(&mut self, parts: &[Value]) -> Result<Value> {
        assert!(!parts.is_empty(), "concat_channels needs at least one input");
        let first = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.batch != first.batch || s.height != first.height || s.width != first.width {
                return Err(Error::dim("concat_channels", first, s));
            }
            channels += s.channels;
        }
        let out_shape = Shape::new(first.batch, channels, first.height, first.width);
        let hw = first.hw();
        let mut out = vec![0.0f32; out_shape.numel()];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &p in parts {
            let s = self.shape(p);
            let d = self.data(p);
            for b in 0..first.batch {
                let src = &d[b * s.channels * hw..(b + 1) * s.channels * hw];
                let dst_start = (b * channels + off) * hw;
                out[dst_start..dst_start + s.channels * hw].copy_from_slice(src);
            }
            offsets.push((p, off, s.channels));
            off += s.channels;
        }
        let batch = first.batch;
        let back: BackwardFn = Box::new(move |g, store| {
            for &(p, off, pc) in &offsets {
                store.add_to(p, |buf| {
                    for b in 0..batch {
                        let src_start = (b * channels + off) * hw;
                        let dst = &mut buf[b * pc * hw..(b + 1) * pc * hw];
                        for (o, &x) in dst.iter_mut().zip(&g[src_start..src_start + pc * hw]) {
                            *o += x;
                        }
                    }
                });
            }
        });
        Ok(self.push(out_shape, out, parts, Some(back)))
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_lane(input: &[f32], out: &mut [f32], base: usize, len: usize, stride: usize) {
    let mut max = f32::NEG_INFINITY;
    for i in 0..len {
        max = max.max(input[base + i * stride]);
    }
    let mut total = 0.0f64;
    for i in 0..len {
        let e = (input[base + i * stride] - max).exp();
        out[base + i * stride] = e;
        total += e as f64;
    }
    let inv = (1.0 / total) as f32;
    for i in 0..len {
        out[base + i * stride] *= inv;
    }
}

fn axis_decomp(shape: Shape, axis: Axis) -> (usize, usize, usize) {
    match axis {
        Axis::Channels => (shape.batch, shape.channels, shape.hw()),
        Axis::Height => (shape.batch * shape.channels, shape.height, shape.width),
        Axis::Width => (
            shape.batch * shape.channels * shape.height,
            shape.width,
            1,
        ),
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    Some(Shape::new(
        dim(a.batch, b.batch)?,
        dim(a.channels, b.channels)?,
        dim(a.height, b.height)?,
        dim(a.width, b.width)?,
    ))
}

#[inline]
fn bcast_index(s: Shape, b: usize, c: usize, y: usize, x: usize) -> usize {
    let b = if s.batch == 1 { 0 } else { b };
    let c = if s.channels == 1 { 0 } else { c };
    let y = if s.height == 1 { 0 } else { y };
    let x = if s.width == 1 { 0 } else { x };
    s.index(b, c, y, x)
}

fn for_each_coord(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let mut i = 0;
    for b in 0..shape.batch {
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    f(i, b, c, y, x);
                    i += 1;
                }
            }
        }
    }
}

/// Sum `g` (shaped `from`) into `out` (shaped `to`), collapsing broadcast axes.
fn reduce_broadcast(g: &[f32], from: Shape, to: Shape, out: &mut [f32]) {
    if from == to {
        for (o, &x) in out.iter_mut().zip(g) {
            *o += x;
        }
        return;
    }
    for_each_coord(from, |i, b, c, y, x| {
        out[bcast_index(to, b, c, y, x)] += g[i];
    });
}
