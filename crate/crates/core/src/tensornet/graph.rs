//! Tape of tensor operations with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and the reverse sweep is a single backwards pass over
//! the node list. Backward rules are written in the generic scalar type;
//! with [`Dual`](super::Dual) scalars the sweep also carries tangents.

use std::hash::{Hash, Hasher};

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.re()).collect()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

const STD_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        cols: Vec<S>,
        in_shape: [usize; 3],
    },
    Relu(Var),
    ChannelStd {
        x: Var,
        inv_std: Vec<S>,
    },
    GlobalAvgPool(Var),
    AdaptiveAvgPool {
        x: Var,
        grid: usize,
    },
    Concat(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sum(Var),
    Norm2(Var),
    Slice {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        softmax: Vec<S>,
    },
    Argmax,
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::ChannelStd { .. } => "channel_std",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::Concat(..) => "concat",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Norm2(_) => "norm2",
            Op::Slice { .. } => "slice",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Argmax => "argmax",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one reverse sweep, indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<S>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn pool_bin(i: usize, n: usize, grid: usize) -> std::ops::Range<usize> {
    (i * n / grid)..((i + 1) * n).div_ceil(grid)
}

fn conv_out(n: usize, spec: ConvSpec, k: usize) -> usize {
    (n + 2 * spec.pad - k) / spec.stride + 1
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(S::from_f64(v)))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// 3×3-style convolution of a `[C, H, W]` input with `[O, C, K, K]`
    /// weights and `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::ShapeMismatch("conv2d bias".into()));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * spec.pad < k || wd + 2 * spec.pad < k || spec.stride == 0 {
            return Err(Error::ShapeMismatch("conv2d input smaller than kernel".into()));
        }
        let (ho, wo) = (conv_out(h, spec, k), conv_out(wd, spec, k));
        let hw = ho * wo;
        let rows = c * k * k;

        let mut cols = vec![S::zero(); rows * hw];
        {
            let xd = &self.nodes[x.0].value.data;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut cols[row * hw..(row + 1) * hw];
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &xd[(ci * h + iy as usize) * wd..(ci * h + iy as usize + 1) * wd];
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    dst[oy * wo + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![S::zero(); o * hw];
        {
            let bd = &self.nodes[b.0].value.data;
            for oc in 0..o {
                out[oc * hw..(oc + 1) * hw].fill(bd[oc]);
            }
            let wdata = &self.nodes[w.0].value.data;
            S::gemm_acc(
                o,
                rows,
                hw,
                wdata,
                (rows as isize, 1),
                &cols,
                (hw as isize, 1),
                &mut out,
                (hw as isize, 1),
            );
        }
        let keep_cols = self.nodes[w.0].needs_grad || self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![o, ho, wo],
                data: out,
            },
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols: if keep_cols { cols } else { Vec::new() },
                in_shape: [c, h, wd],
            },
            &[x, w, b],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t
            .data
            .iter()
            .map(|&v| if v.re() > 0.0 { v } else { S::zero() })
            .collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(x), &[x])
    }

    /// Per-channel standardization over the spatial extent of a `[C, H, W]`
    /// tensor (one sample, no running statistics).
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 3 {
            return Err(Error::ShapeMismatch("channel_std expects [C,H,W]".into()));
        }
        let c = t.shape[0];
        let n = t.shape[1] * t.shape[2];
        let inv_n = S::from_f64(1.0 / n as f64);
        let mut out = vec![S::zero(); t.data.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let xs = &t.data[ch * n..(ch + 1) * n];
            let mut mean = S::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_n;
            let mut var = S::zero();
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv = S::one() / (var + S::from_f64(STD_EPS)).sqrt();
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor { shape, data: out }, Op::ChannelStd { x, inv_std }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 3 {
            return Err(Error::ShapeMismatch("global_avg_pool expects [C,H,W]".into()));
        }
        let c = t.shape[0];
        let n = t.shape[1] * t.shape[2];
        let inv_n = S::from_f64(1.0 / n as f64);
        let data = (0..c)
            .map(|ch| {
                let mut s = S::zero();
                for &v in &t.data[ch * n..(ch + 1) * n] {
                    s += v;
                }
                s * inv_n
            })
            .collect();
        Ok(self.push(Tensor { shape: vec![c], data }, Op::GlobalAvgPool(x), &[x]))
    }

    /// Average over a `grid × grid` partition of each channel, flattened to
    /// `[C·grid·grid]` in channel, row, column order. Cell `i` of an axis of
    /// length `n` spans `⌊i·n/grid⌋ .. ⌈(i+1)·n/grid⌉`, so cells overlap
    /// when `grid` does not divide `n`.
    pub fn adaptive_avg_pool(&mut self, x: Var, grid: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 3 || grid == 0 || grid > t.shape[1] || grid > t.shape[2] {
            return Err(Error::ShapeMismatch(format!("adaptive_avg_pool {grid} of {:?}", t.shape)));
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut data = Vec::with_capacity(c * grid * grid);
        for ch in 0..c {
            let plane = &t.data[ch * h * w..(ch + 1) * h * w];
            for i in 0..grid {
                let rows = pool_bin(i, h, grid);
                for j in 0..grid {
                    let cols = pool_bin(j, w, grid);
                    let mut s = S::zero();
                    for y in rows.clone() {
                        for &v in &plane[y * w + cols.start..y * w + cols.end] {
                            s += v;
                        }
                    }
                    data.push(s * S::from_f64(1.0 / (rows.len() * cols.len()) as f64));
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c * grid * grid],
                data,
            },
            Op::AdaptiveAvgPool { x, grid },
            &[x],
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != tb.shape.len() || ta.shape[1..] != tb.shape[1..] {
            return Err(Error::ShapeMismatch(format!(
                "concat {:?} with {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut shape = ta.shape.clone();
        shape[0] += tb.shape[0];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a, b), &[a, b]))
    }

    /// `W·x + b` for `x: [in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if tx.shape.len() != 1
            || tw.shape.len() != 2
            || tw.shape[1] != tx.shape[0]
            || tb.shape != [tw.shape[0]]
        {
            return Err(Error::ShapeMismatch(format!(
                "linear x {:?} w {:?} b {:?}",
                tx.shape, tw.shape, tb.shape
            )));
        }
        let (o, i) = (tw.shape[0], tw.shape[1]);
        let data = (0..o)
            .map(|r| {
                let mut s = tb.data[r];
                for (wv, xv) in tw.data[r * i..(r + 1) * i].iter().zip(&tx.data) {
                    s += *wv * *xv;
                }
                s
            })
            .collect();
        Ok(self.push(Tensor { shape: vec![o], data }, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta, tb, what)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let ks = S::from_f64(k);
        let data = t.data.iter().map(|&v| v * ks).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(x, k), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| v.exp()).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Exp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = S::zero();
        for &v in &self.nodes[x.0].value.data {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Euclidean norm; the subgradient at zero is taken as zero.
    pub fn norm2(&mut self, x: Var) -> Var {
        let mut s = S::zero();
        for &v in &self.nodes[x.0].value.data {
            s += v * v;
        }
        let n = if s.re() > 0.0 { s.sqrt() } else { S::zero() };
        self.push(Tensor::scalar(n), Op::Norm2(x), &[x])
    }

    /// Contiguous slice `[start, start + len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 1 || start + len > t.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}+{len} of {:?}",
                t.shape
            )));
        }
        let data = t.data[start..start + len].to_vec();
        Ok(self.push(Tensor { shape: vec![len], data }, Op::Slice { x, start }, &[x]))
    }

    /// `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape.len() != 1 || target >= t.shape[0] {
            return Err(Error::ShapeMismatch("cross_entropy target out of range".into()));
        }
        let m = t
            .data
            .iter()
            .map(|v| v.re())
            .fold(f64::NEG_INFINITY, f64::max);
        let ms = S::from_f64(m);
        let exps: Vec<S> = t.data.iter().map(|&v| (v - ms).exp()).collect();
        let mut z = S::zero();
        for &e in &exps {
            z += e;
        }
        let loss = z.ln() + ms - t.data[target];
        let softmax = exps.into_iter().map(|e| e / z).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                softmax,
            },
            &[logits],
        ))
    }

    /// Index of the largest entry, as a value. Not differentiable.
    pub fn argmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let mut best = 0;
        for (i, v) in t.data.iter().enumerate() {
            if v.re() > t.data[best].re() {
                best = i;
            }
        }
        self.push(Tensor::scalar(S::from_f64(best as f64)), Op::Argmax, &[x])
    }

    /// Hash of every activation pattern that makes the graph piecewise
    /// (rectifier masks, zero norms). Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in &self.nodes[x.0].value.data {
                        (v.re() > 0.0).hash(&mut h);
                    }
                }
                Op::Norm2(_) => (node.value.data[0].re() > 0.0).hash(&mut h),
                Op::Argmax => node.value.data[0].re().to_bits().hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Grads<S>> {
        let n = self.nodes.len();
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Tensor {
            shape: self.nodes[out.0].value.shape.clone(),
            data: vec![S::one()],
        });

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, gy.data.as_slice(), &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> &'g mut [S] {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape.clone()));
        }
        slot.as_mut().unwrap().data.as_mut_slice()
    }

    fn backprop_node(&self, node: &Node<S>, gy: &[S], grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
                in_shape,
            } => {
                let [c, h, wd] = *in_shape;
                let wshape = &self.nodes[w.0].value.shape;
                let (o, k) = (wshape[0], wshape[2]);
                let (ho, wo) = (node.value.shape[1], node.value.shape[2]);
                let hw = ho * wo;
                let rows = c * k * k;
                if self.needs(*b) {
                    let gb = self.acc(grads, *b);
                    for oc in 0..o {
                        let mut s = S::zero();
                        for &g in &gy[oc * hw..(oc + 1) * hw] {
                            s += g;
                        }
                        gb[oc] += s;
                    }
                }
                if self.needs(*w) {
                    // dW[o, r] += Σ_p gy[o, p] · cols[r, p]
                    let gw = self.acc(grads, *w);
                    S::gemm_acc(
                        o,
                        hw,
                        rows,
                        gy,
                        (hw as isize, 1),
                        cols,
                        (1, hw as isize),
                        gw,
                        (rows as isize, 1),
                    );
                }
                if self.needs(*x) {
                    let wdata = &self.nodes[w.0].value.data;
                    let mut dcols = vec![S::zero(); rows * hw];
                    // dcols[r, p] = Σ_o W[o, r] · gy[o, p]
                    S::gemm_acc(
                        rows,
                        o,
                        hw,
                        wdata,
                        (1, rows as isize),
                        gy,
                        (hw as isize, 1),
                        &mut dcols,
                        (hw as isize, 1),
                    );
                    let gx = self.acc(grads, *x);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let row = (ci * k + ky) * k + kx;
                                let src = &dcols[row * hw..(row + 1) * hw];
                                for oy in 0..ho {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let base = (ci * h + iy as usize) * wd;
                                    for ox in 0..wo {
                                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                        if ix >= 0 && ix < wd as isize {
                                            gx[base + ix as usize] += src[oy * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let gx = self.acc(grads, *x);
                    for ((g, &d), v) in gx.iter_mut().zip(gy).zip(xv) {
                        if v.re() > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::ChannelStd { x, inv_std } => {
                if self.needs(*x) {
                    let y = &node.value.data;
                    let c = node.value.shape[0];
                    let n = node.value.shape[1] * node.value.shape[2];
                    let nf = S::from_f64(n as f64);
                    let inv_n = S::from_f64(1.0 / n as f64);
                    let gx = self.acc(grads, *x);
                    for ch in 0..c {
                        let r = ch * n..(ch + 1) * n;
                        let (mut sg, mut sgy) = (S::zero(), S::zero());
                        for (&g, &yv) in gy[r.clone()].iter().zip(&y[r.clone()]) {
                            sg += g;
                            sgy += g * yv;
                        }
                        let k = inv_std[ch] * inv_n;
                        for ((o, &g), &yv) in gx[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&y[r]) {
                            *o += k * (nf * g - sg - yv * sgy);
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.needs(*x) {
                    let s = &self.nodes[x.0].value.shape;
                    let n = s[1] * s[2];
                    let inv_n = S::from_f64(1.0 / n as f64);
                    let gx = self.acc(grads, *x);
                    for (ch, &g) in gy.iter().enumerate() {
                        let d = g * inv_n;
                        for o in &mut gx[ch * n..(ch + 1) * n] {
                            *o += d;
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool { x, grid } => {
                if self.needs(*x) {
                    let s = &self.nodes[x.0].value.shape;
                    let (h, w, grid) = (s[1], s[2], *grid);
                    let gx = self.acc(grads, *x);
                    let mut k = 0;
                    for ch in 0..gy.len() / (grid * grid) {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for i in 0..grid {
                            let rows = pool_bin(i, h, grid);
                            for j in 0..grid {
                                let cols = pool_bin(j, w, grid);
                                let d = gy[k] * S::from_f64(1.0 / (rows.len() * cols.len()) as f64);
                                k += 1;
                                for y in rows.clone() {
                                    for o in &mut plane[y * w + cols.start..y * w + cols.end] {
                                        *o += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].value.len();
                if self.needs(*a) {
                    for (o, &g) in self.acc(grads, *a).iter_mut().zip(&gy[..na]) {
                        *o += g;
                    }
                }
                if self.needs(*b) {
                    for (o, &g) in self.acc(grads, *b).iter_mut().zip(&gy[na..]) {
                        *o += g;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let tw = &self.nodes[w.0].value;
                let tx = &self.nodes[x.0].value;
                let (o, i) = (tw.shape[0], tw.shape[1]);
                if self.needs(*b) {
                    for (acc, &g) in self.acc(grads, *b).iter_mut().zip(gy) {
                        *acc += g;
                    }
                }
                if self.needs(*w) {
                    let gw = self.acc(grads, *w);
                    for r in 0..o {
                        let g = gy[r];
                        for (acc, &xv) in gw[r * i..(r + 1) * i].iter_mut().zip(&tx.data) {
                            *acc += g * xv;
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = self.acc(grads, *x);
                    for r in 0..o {
                        let g = gy[r];
                        for (acc, &wv) in gx.iter_mut().zip(&tw.data[r * i..(r + 1) * i]) {
                            *acc += g * wv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        for (o, &g) in self.acc(grads, *v).iter_mut().zip(gy) {
                            *o += g;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    for (o, &g) in self.acc(grads, *a).iter_mut().zip(gy) {
                        *o += g;
                    }
                }
                if self.needs(*b) {
                    for (o, &g) in self.acc(grads, *b).iter_mut().zip(gy) {
                        *o -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = &self.nodes[b.0].value.data;
                    let ga = self.acc(grads, *a);
                    for ((o, &g), &y) in ga.iter_mut().zip(gy).zip(bv) {
                        *o += g * y;
                    }
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0].value.data;
                    let gb = self.acc(grads, *b);
                    for ((o, &g), &y) in gb.iter_mut().zip(gy).zip(av) {
                        *o += g * y;
                    }
                }
            }
            Op::Scale(x, k) => {
                if self.needs(*x) {
                    let ks = S::from_f64(*k);
                    for (o, &g) in self.acc(grads, *x).iter_mut().zip(gy) {
                        *o += g * ks;
                    }
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let y = &node.value.data;
                    for ((o, &g), &yv) in self.acc(grads, *x).iter_mut().zip(gy).zip(y) {
                        *o += g * yv;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let g = gy[0];
                    for o in self.acc(grads, *x).iter_mut() {
                        *o += g;
                    }
                }
            }
            Op::Norm2(x) => {
                let nrm = node.value.data[0];
                if self.needs(*x) && nrm.re() > 0.0 {
                    let xv = &self.nodes[x.0].value.data;
                    let k = gy[0] / nrm;
                    for (o, &v) in self.acc(grads, *x).iter_mut().zip(xv) {
                        *o += k * v;
                    }
                }
            }
            Op::Slice { x, start } => {
                if self.needs(*x) {
                    let gx = self.acc(grads, *x);
                    for (o, &g) in gx[*start..*start + gy.len()].iter_mut().zip(gy) {
                        *o += g;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                softmax,
            } => {
                if self.needs(*logits) {
                    let g = gy[0];
                    let gl = self.acc(grads, *logits);
                    for (j, (o, &p)) in gl.iter_mut().zip(softmax).enumerate() {
                        let d = if j == *target { p - S::one() } else { p };
                        *o += g * d;
                    }
                }
            }
            op @ Op::Argmax => return Err(Error::UnsupportedOp(op.name())),
        }
        Ok(())
    }
}
