//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op computes its value
//! eagerly and records enough to replay the chain rule; [`Graph::backward`]
//! walks the nodes in reverse creation order. Named leaves registered through
//! [`Graph::param`] are the trainable parameters that receive gradients.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::shape;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    BiasRows(Var, Var),
    BiasChannels(Var, Var),
    MulRows(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    TransposeLast2(Var),
    Permute01(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Tanh(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var, factor: usize },
    NormalizeChannels { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    /// Accumulates `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    shape::same(acc.shape(), g.shape())?;
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, shape: &[usize], data: Vec<f64>, op: Op) -> Var {
        let needs = self.ng(x);
        self.push(Tensor::from_vec(shape, data), op, needs)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing variable.
    pub fn leaf(&mut self, name: &str, t: Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.with_grad(true), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        self.param_names.push((v, name.to_string()));
        v
    }

    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        Ok(self.leaf(name, t.clone()))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.param_names.iter().map(|(_, n)| n.as_str())
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let t = self.value(a).zip_map(self.value(b), f)?;
        Ok((t, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, n) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, n) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, n) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| v * k);
        let n = self.ng(x);
        self.push(t, Op::Scale(x, k), n)
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| v + k);
        let n = self.ng(x);
        self.push(t, Op::Offset(x), n)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let n = self.ng(x);
        self.push(t, Op::Tanh(x), n)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let n = self.ng(x);
        self.push(t, Op::Silu(x), n)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let n = self.ng(x);
        self.push(t, Op::Square(x), n)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let n = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), n)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let n = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), n)
    }

    // ---- broadcasting ---------------------------------------------------

    /// `x: N×d` plus a length-`d` vector on every row.
    pub fn bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = shape::row_broadcast(self.shape(x), self.shape(b))?;
        let d = s[1];
        let bv = self.data(b);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        let n = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&s, out), Op::BiasRows(x, b), n))
    }

    /// `x: N×d` multiplied by a length-`d` vector on every row.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let s = shape::row_broadcast(self.shape(x), self.shape(g))?;
        let d = s[1];
        let gv = self.data(g);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[i % d])
            .collect();
        let n = self.ng(x) || self.ng(g);
        Ok(self.push(Tensor::from_vec(&s, out), Op::MulRows(x, g), n))
    }

    /// `x: C×H×W` plus a length-`C` vector at every pixel.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = shape::channel_broadcast(self.shape(x), self.shape(b))?;
        let plane = s[1] * s[2];
        let bv = self.data(b);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / plane])
            .collect();
        let n = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&s, out), Op::BiasChannels(x, b), n))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = shape::matmul(self.shape(a), self.shape(b))?;
        let k = self.shape(a)[1];
        let out = matmul_kernel(self.data(a), self.data(b), s[0], k, s[1]);
        let n = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&s, out), Op::MatMul(a, b), n))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = shape::bmm(self.shape(a), self.shape(b))?;
        let (bs, n, m) = (s[0], s[1], s[2]);
        let k = self.shape(a)[2];
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(bs * n * m);
        for i in 0..bs {
            out.extend(matmul_kernel(
                &ad[i * n * k..(i + 1) * n * k],
                &bd[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
            ));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&s, out), Op::Bmm(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = shape::transpose(self.shape(x))?;
        let out = transpose_kernel(self.data(x), s[1], s[0]);
        Ok(self.unary(x, &s, out, Op::Transpose(x)))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = shape::transpose_last2(self.shape(x))?;
        let (b, n, m) = (s[0], s[2], s[1]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len());
        for i in 0..b {
            out.extend(transpose_kernel(&xd[i * n * m..(i + 1) * n * m], n, m));
        }
        Ok(self.unary(x, &s, out, Op::TransposeLast2(x)))
    }

    /// Swaps the first two axes of a rank-3 tensor.
    pub fn permute01(&mut self, x: Var) -> Result<Var> {
        let s = shape::permute01(self.shape(x))?;
        let out = permute01_kernel(self.data(x), s[1], s[0], s[2]);
        Ok(self.unary(x, &s, out, Op::Permute01(x)))
    }

    pub fn reshape(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let s = shape::reshape(self.shape(x), target)?;
        let out = self.data(x).to_vec();
        Ok(self.unary(x, &s, out, Op::Reshape(x)))
    }

    /// C×H×W → (H·W)×C token matrix.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        shape::tokens(&s)?;
        let flat = self.reshape(x, &[s[0], s[1] * s[2]])?;
        self.transpose(flat)
    }

    /// (H·W)×C token matrix → C×H×W.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.transpose(x)?;
        let c = self.shape(t)[0];
        self.reshape(t, &[c, h, w])
    }

    // ---- convolution ----------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let s = shape::conv2d(self.shape(input), self.shape(kernel), stride, padding)?;
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), &s, stride, padding);
        let out = geom.forward(self.data(input), self.data(kernel));
        let n = self.ng(input) || self.ng(kernel);
        Ok(self.push(
            Tensor::from_vec(&s, out),
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            n,
        ))
    }

    // ---- normalization --------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = shape::layer_norm(self.shape(x), self.shape(gain), self.shape(bias))?;
        let (rows, d) = (s[0], s[1]);
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let n = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::from_vec(&s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            n,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.unary(x, &s, out, Op::Softmax(x))
    }

    /// Scales every pixel's channel vector of a C×H×W map to unit length.
    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [c, h, w] = s[..] else {
            return Err(Error::Dimension(format!(
                "normalize_channels needs C×H×W, got {s:?}"
            )));
        };
        let plane = h * w;
        let xd = self.data(x);
        let mut norms = vec![0.0; plane];
        for (p, n) in norms.iter_mut().enumerate() {
            let ss: f64 = (0..c).map(|ch| xd[ch * plane + p].powi(2)).sum();
            *n = (ss + eps).sqrt();
        }
        let out = xd
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i % plane])
            .collect();
        Ok(self.unary(x, &s, out, Op::NormalizeChannels { x, norms }))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let s = shape::concat_rows(&shapes)?;
        let mut out = Vec::with_capacity(numel(&s));
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let n = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(&s, out), Op::ConcatRows(parts.to_vec()), n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let s = shape::concat_cols(&shapes)?;
        let (rows, cols) = (s[0], s[1]);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[r * pc..(r + 1) * pc]);
            }
        }
        let n = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(&s, out), Op::ConcatCols(parts.to_vec()), n))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = shape::slice_rows(self.shape(x), start, len)?;
        let inner = numel(&s[1..]);
        let out = self.data(x)[start * inner..(start + len) * inner].to_vec();
        Ok(self.unary(x, &s, out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = shape::slice_cols(self.shape(x), start, len)?;
        let m = self.shape(x)[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&xd[r * m + start..r * m + start + len]);
        }
        Ok(self.unary(x, &s, out, Op::SliceCols { x, start }))
    }

    /// Nearest-neighbour upsampling of a C×H×W map.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = shape::upsample(self.shape(x), factor)?;
        let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(numel(&s));
        for c in 0..s[0] {
            for y in 0..s[1] {
                let row = &xd[(c * h + y / factor) * w..(c * h + y / factor + 1) * w];
                out.extend((0..s[2]).map(|xx| row[xx / factor]));
            }
        }
        Ok(self.unary(x, &s, out, Op::Upsample { x, factor }))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = shape::avg_pool(self.shape(x), factor)?;
        let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
        let xd = self.data(x);
        let area = (factor * factor) as f64;
        let mut out = vec![0.0; numel(&s)];
        for c in 0..s[0] {
            for y in 0..h {
                for xx in 0..w {
                    out[(c * s[1] + y / factor) * s[2] + xx / factor] += xd[(c * h + y) * w + xx];
                }
            }
        }
        for v in &mut out {
            *v /= area;
        }
        Ok(self.unary(x, &s, out, Op::AvgPool { x, factor }))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every named leaf.
    ///
    /// Leaves without a path to the loss get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop(i, &dy, &mut grads);
        }
        let mut out = GradientMap::default();
        for (v, name) in &self.param_names {
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => Tensor::from_vec(self.shape(*v), g),
                None => Tensor::zeros(self.shape(*v)),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, dy.iter().zip(bd).map(|(g, b)| g * b).collect());
                acc(*b, dy.iter().zip(ad).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, k) => acc(*x, dy.iter().map(|g| g * k).collect()),
            Op::Offset(x) => acc(*x, dy.to_vec()),
            Op::Tanh(x) => acc(*x, dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::Silu(x) => {
                let xd = self.data(*x);
                acc(
                    *x,
                    dy.iter()
                        .zip(xd)
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect(),
                )
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                acc(*x, dy.iter().zip(xd).map(|(g, v)| 2.0 * g * v).collect())
            }
            Op::Sum(x) => acc(*x, vec![dy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![dy[0] / n as f64; n])
            }
            Op::BiasRows(x, b) => {
                let d = self.shape(*b)[0];
                let mut gb = vec![0.0; d];
                for (k, g) in dy.iter().enumerate() {
                    gb[k % d] += g;
                }
                acc(*x, dy.to_vec());
                acc(*b, gb);
            }
            Op::MulRows(x, gv) => {
                let d = self.shape(*gv)[0];
                let (xd, gd) = (self.data(*x), self.data(*gv));
                let mut gg = vec![0.0; d];
                let mut gx = vec![0.0; dy.len()];
                for (k, g) in dy.iter().enumerate() {
                    gg[k % d] += g * xd[k];
                    gx[k] = g * gd[k % d];
                }
                acc(*x, gx);
                acc(*gv, gg);
            }
            Op::BiasChannels(x, b) => {
                let c = self.shape(*b)[0];
                let plane = dy.len() / c;
                let gb = (0..c).map(|ch| dy[ch * plane..(ch + 1) * plane].iter().sum()).collect();
                acc(*x, dy.to_vec());
                acc(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.ng(*a) {
                    acc(*a, matmul_nt(dy, self.data(*b), n, m, k));
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(self.data(*a), dy, n, k, m));
                }
            }
            Op::Bmm(a, b) => {
                let [bs, n, k] = self.shape(*a)[..] else { unreachable!() };
                let m = self.shape(*b)[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut ga = Vec::with_capacity(bs * n * k);
                let mut gb = Vec::with_capacity(bs * k * m);
                for i in 0..bs {
                    let dyi = &dy[i * n * m..(i + 1) * n * m];
                    ga.extend(matmul_nt(dyi, &bd[i * k * m..(i + 1) * k * m], n, m, k));
                    gb.extend(matmul_tn(&ad[i * n * k..(i + 1) * n * k], dyi, n, k, m));
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                acc(*x, transpose_kernel(dy, s[0], s[1]));
            }
            Op::TransposeLast2(x) => {
                let [b, n, m] = node.value.shape()[..] else { unreachable!() };
                let mut g = Vec::with_capacity(dy.len());
                for i in 0..b {
                    g.extend(transpose_kernel(&dy[i * n * m..(i + 1) * n * m], n, m));
                }
                acc(*x, g);
            }
            Op::Permute01(x) => {
                let s = node.value.shape();
                acc(*x, permute01_kernel(dy, s[0], s[1], s[2]));
            }
            Op::Reshape(x) => acc(*x, dy.to_vec()),
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let geom = ConvGeom::new(
                    self.shape(*input),
                    self.shape(*kernel),
                    node.value.shape(),
                    *stride,
                    *padding,
                );
                let (gi, gk) = geom.backward(
                    self.data(*input),
                    self.data(*kernel),
                    dy,
                    self.ng(*input),
                    self.ng(*kernel),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gk) = gk {
                    acc(*kernel, gk);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let rows = dy.len() / d;
                let gd = self.data(*gain);
                let mut gx = vec![0.0; dy.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        gg[j] += dy[k] * xhat[k];
                        gb[j] += dy[k];
                        let dxh = dy[k] * gd[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[k];
                    }
                    for j in 0..d {
                        let k = r * d + j;
                        let dxh = dy[k] * gd[j];
                        gx[k] = inv_std[r] / d as f64
                            * (d as f64 * dxh - sum_dxh - xhat[k] * sum_dxh_xh);
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut g = vec![0.0; dy.len()];
                for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                acc(*x, g);
            }
            Op::NormalizeChannels { x, norms } => {
                let s = node.value.shape();
                let (c, plane) = (s[0], s[1] * s[2]);
                let mut g = vec![0.0; dy.len()];
                for p in 0..plane {
                    let dot: f64 = (0..c).map(|ch| dy[ch * plane + p] * y[ch * plane + p]).sum();
                    for ch in 0..c {
                        let k = ch * plane + p;
                        g[k] = (dy[k] - y[k] * dot) / norms[p];
                    }
                }
                acc(*x, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, dy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    let mut g = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        g.extend_from_slice(&dy[r * cols + off..r * cols + off + pc]);
                    }
                    acc(*p, g);
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let inner = numel(&node.value.shape()[1..]);
                let mut g = vec![0.0; self.value(*x).len()];
                g[start * inner..start * inner + dy.len()].copy_from_slice(dy);
                acc(*x, g);
            }
            Op::SliceCols { x, start } => {
                let m = self.shape(*x)[1];
                let len = node.value.shape()[1];
                let mut g = vec![0.0; self.value(*x).len()];
                for (r, dr) in dy.chunks(len).enumerate() {
                    g[r * m + start..r * m + start + len].copy_from_slice(dr);
                }
                acc(*x, g);
            }
            Op::Upsample { x, factor } => {
                let s = node.value.shape();
                let (h, w) = (self.shape(*x)[1], self.shape(*x)[2]);
                let mut g = vec![0.0; self.value(*x).len()];
                for c in 0..s[0] {
                    for yy in 0..s[1] {
                        for xx in 0..s[2] {
                            g[(c * h + yy / factor) * w + xx / factor] += dy[(c * s[1] + yy) * s[2] + xx];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::AvgPool { x, factor } => {
                let s = node.value.shape();
                let (h, w) = (self.shape(*x)[1], self.shape(*x)[2]);
                let area = (factor * factor) as f64;
                let mut g = vec![0.0; self.value(*x).len()];
                for c in 0..s[0] {
                    for yy in 0..h {
                        for xx in 0..w {
                            g[(c * h + yy) * w + xx] = dy[(c * s[1] + yy / factor) * s[2] + xx / factor] / area;
                        }
                    }
                }
                acc(*x, g);
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `a: n×k` times `b: k×m`.
fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `dy: n×m` times `bᵀ` where `b: k×m`, giving `n×k`.
fn matmul_nt(dy: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let drow = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ` times `dy` where `a: n×k`, `dy: n×m`, giving `k×m`.
fn matmul_tn(a: &[f64], dy: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let drow = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, d) in out[p * m..(p + 1) * m].iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
    out
}

/// Transposes an `n×m` matrix.
fn transpose_kernel(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
    out
}

/// `x: a×b×c` → `b×a×c`.
fn permute01_kernel(x: &[f64], a: usize, b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a * b * c];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(&x[(i * b + j) * c..(i * b + j + 1) * c]);
        }
    }
    out
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], out: &[usize], stride: usize, padding: usize) -> Self {
        Self {
            c: input[0],
            h: input[1],
            w: input[2],
            o: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            oh: out[1],
            ow: out[2],
            stride,
            padding,
        }
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every contributing tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oc in 0..self.o {
            for ic in 0..self.c {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let ki = ((oc * self.c + ic) * self.kh + ky) * self.kw + kx;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let in_row = (ic * self.h + iy as usize) * self.w;
                            let out_row = (oc * self.oh + oy) * self.ow;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(out_row + ox, in_row + ix as usize, ki);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.o * self.oh * self.ow];
        self.for_each_tap(|o, i, ki| out[o] += k[ki] * x[i]);
        out
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        dy: &[f64],
        want_input: bool,
        want_kernel: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut gi = want_input.then(|| vec![0.0; x.len()]);
        let mut gk = want_kernel.then(|| vec![0.0; k.len()]);
        self.for_each_tap(|o, i, ki| {
            if let Some(gi) = gi.as_mut() {
                gi[i] += k[ki] * dy[o];
            }
            if let Some(gk) = gk.as_mut() {
                gk[ki] += x[i] * dy[o];
            }
        });
        (gi, gk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let mut g = Graph::new();
        let xs = vec![1.0, -2.0, 3.5];
        let x = g.leaf("x", Tensor::from_vec(&[3], xs.clone()));
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get("x").unwrap().data(), &expect[..]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::ones(&[2]));
        let _unused = g.leaf("unused", Tensor::ones(&[3]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::from_vec(&[1], vec![3.0]));
        let again = g.leaf("x", Tensor::from_vec(&[1], vec![100.0]));
        assert_eq!(x, again);
        let p = g.mul(x, x).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_conv_leaves_input_unchanged() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let x = g.constant(Tensor::from_vec(&[1, 4, 5], data.clone()));
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 4, 4]));
        let k = g.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_layer_norm_row_maps_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.25));
        let gain = g.constant(Tensor::ones(&[5]));
        let bias = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::from_vec(&[2, 3, 4], data.clone()));
        let t = g.to_tokens(x).unwrap();
        assert_eq!(g.shape(t), &[12, 2]);
        // token (y=1, x=2) channel 1
        assert_eq!(g.value(t).data()[6 * 2 + 1], data[12 + 6]);
        let back = g.from_tokens(t, 3, 4).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }
}
