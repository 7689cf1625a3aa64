use super::element::{gemm, Element};
use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        batch: usize,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: TensorId,
        slope: f64,
    },
    Bilinear {
        x: TensorId,
        lead: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: TensorId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    ReduceMean {
        x: TensorId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
    },
    AddScalar {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Log {
        x: TensorId,
    },
    Power {
        x: TensorId,
        p: f64,
    },
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
    Concat {
        parts: Vec<TensorId>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Reshape {
        x: TensorId,
    },
    Repeat {
        x: TensorId,
        outer: usize,
        block: usize,
        times: usize,
    },
    Transpose2d {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Linear record of executed operations.
///
/// Results are appended after their operands, so a reverse sweep over the
/// node list visits every result before the tensors it was computed from.
/// Gradients are stored on leaf tensors marked `requires_grad`; repeated
/// [`Tape::backward`] calls accumulate until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

fn elementwise_check<T>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients are collected for it.
    pub fn var(&mut self, t: Tensor<T>) -> TensorId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, mut t: Tensor<T>) -> TensorId {
        t.set_requires_grad(false);
        self.var(t)
    }

    /// Records a differentiation target.
    pub fn param(&mut self, t: Tensor<T>) -> TensorId {
        self.var(t.requiring_grad())
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op, operands: &[TensorId]) -> TensorId {
        let requires_grad = operands.iter().any(|o| self.nodes[o.0].value.requires_grad);
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn map_unary(&mut self, x: TensorId, op: Op, f: impl Fn(T) -> T) -> TensorId {
        let v = &self.nodes[x.0].value;
        let data = v.data.iter().map(|&a| f(a)).collect();
        let shape = v.shape.clone();
        self.push(shape, data, op, &[x])
    }

    /// Same-padded, stride-1 convolution. `x` is `(Cin,H,W)` or a batch
    /// `(N,Cin,H,W)`; `weight` is `(Cout,Cin,kh,kw)` with odd kernel sides.
    pub fn conv2d(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        let (batch, cin, h, w) = match xs.as_slice() {
            &[c, h, w] => (1, c, h, w),
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let &[cout, wcin, kh, kw] = ws.as_slice() else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if bs != [cout] {
            return Err(Error::shape(format!("conv2d bias {bs:?} vs {cout} outputs")));
        }
        let geom = ConvGeom {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
        };
        let out = kernels::conv2d_forward(
            &self.value(x).data,
            &self.value(weight).data,
            &self.value(bias).data,
            batch,
            geom,
        );
        let shape = if xs.len() == 3 {
            vec![cout, h, w]
        } else {
            vec![batch, cout, h, w]
        };
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                batch,
                geom,
            },
            &[x, weight, bias],
        ))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        let s = T::of(slope);
        self.map_unary(x, Op::LeakyRelu { x, slope }, |a| if a > T::zero() { a } else { a * s })
    }

    /// Bilinear resampling of the two trailing axes (align-corners=false).
    pub fn bilinear_resize(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize target must be at least 1x1"));
        }
        let xs = self.shape(x).to_vec();
        let (lead, h, w) = kernels::split_spatial(&xs)?;
        let out = kernels::bilinear_forward(&self.value(x).data, lead, h, w, out_h, out_w);
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.push(
            shape,
            out,
            Op::Bilinear {
                x,
                lead,
                h,
                w,
                oh: out_h,
                ow: out_w,
            },
            &[x],
        ))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: TensorId, ta: bool, b: TensorId, tb: bool) -> Result<TensorId> {
        let (&[ra, ca], &[rb, cb]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(&self.value(a).data, ta, &self.value(b).data, tb, &mut out, m, k, n, false);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (outer, n, inner) = kernels::axis_layout(self.shape(x), axis)?;
        let out = kernels::softmax_forward(&self.value(x).data, outer, n, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::axis_layout(&xs, axis)?;
        let src = &self.value(x).data;
        // Double accumulation makes the result insensitive to the order of
        // the reduced entries at single precision.
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            let dst = &mut acc[o * inner..(o + 1) * inner];
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v.as_f64());
            }
        }
        let out = acc.iter().map(|&v| T::of(v / n as f64)).collect();
        let mut shape = xs;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::ReduceMean { x, outer, n, inner }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Vec::new(), vec![s], Op::Sum { x }, &[x])
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        elementwise_check(self.value(a), self.value(b), "add")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        elementwise_check(self.value(a), self.value(b), "sub")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        elementwise_check(self.value(a), self.value(b), "mul")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let f = T::of(factor);
        self.map_unary(x, Op::Scale { x, factor }, |a| a * f)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let c = T::of(c);
        self.map_unary(x, Op::AddScalar { x }, |a| a + c)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.map_unary(x, Op::Sigmoid { x }, |a| {
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        })
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if self.value(x).data.iter().any(|&a| a <= T::zero() || a.is_nan()) {
            return Err(Error::Contract("log of a non-positive value".into()));
        }
        Ok(self.map_unary(x, Op::Log { x }, |a| a.ln()))
    }

    pub fn power(&mut self, x: TensorId, p: f64) -> TensorId {
        let pt = T::of(p);
        self.map_unary(x, Op::Power { x, p }, |a| a.powf(pt))
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let (l, h) = (T::of(lo), T::of(hi));
        self.map_unary(x, Op::Clamp { x, lo, hi }, |a| a.max(l).min(h))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let fs = self.shape(*first).to_vec();
        if axis >= fs.len() {
            return Err(Error::shape(format!("concat axis {axis} for shape {fs:?}")));
        }
        let outer: usize = fs[..axis].iter().product();
        let inner: usize = fs[axis + 1..].iter().product();
        let mut chunks = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != fs.len() || s[..axis] != fs[..axis] || s[axis + 1..] != fs[axis + 1..] {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} incompatible with {fs:?}"
                )));
            }
            total_axis += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data[o * c..(o + 1) * c]);
            }
        }
        let mut shape = fs;
        shape[axis] = total_axis;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data.clone();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// Tiles the tensor `times` times along `axis` (block repetition).
    pub fn repeat(&mut self, x: TensorId, axis: usize, times: usize) -> Result<TensorId> {
        if times == 0 {
            return Err(Error::shape("repeat count must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::axis_layout(&xs, axis)?;
        let block = n * inner;
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(src.len() * times);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&src[o * block..(o + 1) * block]);
            }
        }
        let mut shape = xs;
        shape[axis] *= times;
        Ok(self.push(
            shape,
            out,
            Op::Repeat {
                x,
                outer,
                block,
                times,
            },
            &[x],
        ))
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let &[rows, cols] = self.shape(x) else {
            return Err(Error::shape(format!("transpose2d of {:?}", self.shape(x))));
        };
        let src = &self.value(x).data;
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose2d { x, rows, cols }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if matches!(node.op, Op::Leaf) {
                node.value.accumulate_grad(&g);
                continue;
            }
            propagate(head, node, &g, &mut adj);
        }
        Ok(())
    }
}

/// Buffer for the adjoint of `id`, allocated on first use, or `None` when
/// the operand does not need a gradient.
fn slot<'a, T: Element>(
    nodes: &[Node<T>],
    adj: &'a mut [Option<Vec<T>>],
    id: TensorId,
) -> Option<&'a mut [T]> {
    let v = &nodes[id.0].value;
    if !v.requires_grad {
        return None;
    }
    let n = v.numel();
    Some(adj[id.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

/// Like [`slot`], but moves the buffer out so several operands can be
/// borrowed mutably at once. Callers put it back.
fn take_slot<T: Element>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    id: TensorId,
) -> Option<Vec<T>> {
    slot(nodes, adj, id)?;
    adj[id.0].take()
}

fn propagate<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let val = |id: TensorId| &nodes[id.0].value.data;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            batch,
            geom,
        } => {
            let mut dx = take_slot(nodes, adj, *x);
            let mut dw = take_slot(nodes, adj, *w);
            let mut db = take_slot(nodes, adj, *b);
            kernels::conv2d_backward(
                val(*x),
                val(*w),
                g,
                *batch,
                *geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, buf) in [(*x, dx), (*w, dw), (*b, db)] {
                if let Some(buf) = buf {
                    adj[id.0] = Some(buf);
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            let s = T::of(*slope);
            let xv = val(*x);
            if let Some(d) = slot(nodes, adj, *x) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                    *d = *d + if xi > T::zero() { gi } else { gi * s };
                }
            }
        }
        Op::Bilinear {
            x,
            lead,
            h,
            w,
            oh,
            ow,
        } => {
            if let Some(d) = slot(nodes, adj, *x) {
                kernels::bilinear_backward(g, *lead, *h, *w, *oh, *ow, d);
            }
        }
        Op::Matmul { a, b, ta, tb, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(d) = slot(nodes, adj, *a) {
                if *ta {
                    gemm(val(*b), *tb, g, true, d, k, n, m, true);
                } else {
                    gemm(g, false, val(*b), !*tb, d, m, n, k, true);
                }
            }
            if let Some(d) = slot(nodes, adj, *b) {
                if *tb {
                    gemm(g, true, val(*a), *ta, d, n, m, k, true);
                } else {
                    gemm(val(*a), !*ta, g, false, d, k, m, n, true);
                }
            }
        }
        Op::Softmax { x, outer, n, inner } => {
            if let Some(d) = slot(nodes, adj, *x) {
                kernels::softmax_backward(&node.value.data, g, *outer, *n, *inner, d);
            }
        }
        Op::ReduceMean { x, outer, n, inner } => {
            let inv = T::of(1.0 / *n as f64);
            if let Some(d) = slot(nodes, adj, *x) {
                for o in 0..*outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for j in 0..*n {
                        let row = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        row.iter_mut().zip(go).for_each(|(r, &gv)| *r = *r + gv * inv);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(d) = slot(nodes, adj, *x) {
                d.iter_mut().for_each(|v| *v = *v + g[0]);
            }
        }
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if let Some(d) = slot(nodes, adj, id) {
                    add_into(d, g);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(d) = slot(nodes, adj, *a) {
                add_into(d, g);
            }
            if let Some(d) = slot(nodes, adj, *b) {
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d - gi);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, adj, *a) {
                for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(bv) {
                    *d = *d + gi * bi;
                }
            }
            if let Some(d) = slot(nodes, adj, *b) {
                for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + gi * ai;
                }
            }
        }
        Op::Scale { x, factor } => {
            let f = T::of(*factor);
            if let Some(d) = slot(nodes, adj, *x) {
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * f);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(d) = slot(nodes, adj, *x) {
                add_into(d, g);
            }
        }
        Op::Sigmoid { x } => {
            let y = &node.value.data;
            if let Some(d) = slot(nodes, adj, *x) {
                for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + gi * yi * (T::one() - yi);
                }
            }
        }
        Op::Log { x } => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, adj, *x) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                    *d = *d + gi / xi;
                }
            }
        }
        Op::Power { x, p } => {
            let xv = val(*x);
            let pt = T::of(*p);
            let pm1 = T::of(*p - 1.0);
            if let Some(d) = slot(nodes, adj, *x) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                    *d = *d + gi * pt * xi.powf(pm1);
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let (l, h) = (T::of(*lo), T::of(*hi));
            let xv = val(*x);
            if let Some(d) = slot(nodes, adj, *x) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                    if xi >= l && xi <= h {
                        *d = *d + gi;
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            chunks,
        } => {
            let row: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(chunks) {
                if let Some(d) = slot(nodes, adj, p) {
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + c];
                        add_into(&mut d[o * c..(o + 1) * c], src);
                    }
                }
                offset += c;
            }
        }
        Op::Repeat {
            x,
            outer,
            block,
            times,
        } => {
            if let Some(d) = slot(nodes, adj, *x) {
                for o in 0..*outer {
                    let dst = &mut d[o * block..(o + 1) * block];
                    for t in 0..*times {
                        let start = (o * times + t) * block;
                        add_into(dst, &g[start..start + block]);
                    }
                }
            }
        }
        Op::Transpose2d { x, rows, cols } => {
            if let Some(d) = slot(nodes, adj, *x) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] = d[r * cols + c] + g[c * rows + r];
                    }
                }
            }
        }
    }
}
