//! Parameter initialisation and the graph-level building blocks shared by
//! every network.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uniavatar_core::{AttentionWeights, Graph, ParamSet, Tensor, Var, LAYER_NORM_EPS};

use crate::error::{Error, Result};

enum Fill {
    Normal(f64),
    Zeros,
    Ones,
}

/// Fills a [`ParamSet`] with freshly initialised tensors, or only records
/// the `(name, shape)` layout when built with [`Init::layout_only`].
pub struct Init<'a> {
    params: Option<&'a mut ParamSet>,
    rng: ChaCha8Rng,
    pub layout: Vec<(String, Vec<usize>)>,
}

impl<'a> Init<'a> {
    pub fn new(params: &'a mut ParamSet, rng: ChaCha8Rng) -> Self {
        Self {
            params: Some(params),
            rng,
            layout: Vec::new(),
        }
    }

    pub fn layout_only(rng: ChaCha8Rng) -> Self {
        Self {
            params: None,
            rng,
            layout: Vec::new(),
        }
    }

    fn put(&mut self, name: String, shape: Vec<usize>, fill: Fill) {
        if let Some(params) = self.params.as_deref_mut() {
            let n: usize = shape.iter().product();
            let t = match fill {
                Fill::Normal(std) => {
                    let data = (0..n)
                        .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Tensor::from_vec(&shape, data)
                }
                Fill::Zeros => Tensor::zeros(&shape),
                Fill::Ones => Tensor::ones(&shape),
            };
            params.insert(name.clone(), t);
        }
        self.layout.push((name, shape));
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.conv_gain(name, cin, cout, k, 1.0);
    }

    /// Conv whose weight std is `gain / sqrt(fan_in)`.
    pub fn conv_gain(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let std = gain * (1.0 / (cin * k * k) as f64).sqrt();
        self.put(format!("{name}.w"), vec![cout, cin, k, k], Fill::Normal(std));
        self.put(format!("{name}.b"), vec![cout], Fill::Zeros);
    }

    pub fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.put(format!("{name}.w"), vec![cout, cin, k, k], Fill::Zeros);
        self.put(format!("{name}.b"), vec![cout], Fill::Zeros);
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let std = (1.0 / din as f64).sqrt();
        self.put(format!("{name}.w"), vec![din, dout], Fill::Normal(std));
        self.put(format!("{name}.b"), vec![dout], Fill::Zeros);
    }

    pub fn zero_linear(&mut self, name: &str, din: usize, dout: usize) {
        self.put(format!("{name}.w"), vec![din, dout], Fill::Zeros);
        self.put(format!("{name}.b"), vec![dout], Fill::Zeros);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.put(format!("{name}.g"), vec![d], Fill::Ones);
        self.put(format!("{name}.b"), vec![d], Fill::Zeros);
    }

    pub fn attention(&mut self, name: &str, d: usize, d_ctx: usize, zero_out: bool) {
        let s = (1.0 / d as f64).sqrt();
        let sc = (1.0 / d_ctx as f64).sqrt();
        self.put(format!("{name}.wq"), vec![d, d], Fill::Normal(s));
        self.put(format!("{name}.wk"), vec![d_ctx, d], Fill::Normal(sc));
        self.put(format!("{name}.wv"), vec![d_ctx, d], Fill::Normal(sc));
        let out = if zero_out { Fill::Zeros } else { Fill::Normal(s) };
        self.put(format!("{name}.wo"), vec![d, d], out);
    }

    /// Residual block `cin → cout`, optionally with a timestep projection.
    pub fn resblock(&mut self, name: &str, cin: usize, cout: usize, time_dim: Option<usize>) {
        self.conv(&format!("{name}.c1"), cin, cout, 3);
        if let Some(d) = time_dim {
            self.linear(&format!("{name}.t"), d, cout);
        }
        self.conv(&format!("{name}.c2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }
}

const PIXEL_NORM_EPS: f64 = 1e-8;

/// A forward pass under construction. Parameters for which `frozen`
/// returns true enter the graph as constants and get no gradient.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamSet,
    frozen: Option<&'a dyn Fn(&str) -> bool>,
    consts: HashMap<String, Var>,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamSet) -> Self {
        Self {
            g,
            params,
            frozen: None,
            consts: HashMap::new(),
        }
    }

    pub fn with_frozen(g: &'a mut Graph, params: &'a ParamSet, frozen: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::new(g, params)
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if self.frozen.is_some_and(|f| f(name)) {
            if let Some(&v) = self.consts.get(name) {
                return Ok(v);
            }
            let t = self.params.require(name)?.clone();
            let v = self.g.constant(t);
            self.consts.insert(name.to_string(), v);
            return Ok(v);
        }
        Ok(self.g.param(self.params, name)?)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Same-padded convolution plus per-channel bias.
    pub fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let k = self.g.shape(w)[2];
        let y = self.g.conv2d(x, w, stride, k / 2)?;
        Ok(self.g.bias_channels(y, b)?)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.bias_rows(y, b)?)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gain = self.p(&format!("{name}.g"))?;
        let bias = self.p(&format!("{name}.b"))?;
        Ok(self.g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }

    pub fn attention_weights(&mut self, name: &str, heads: usize) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: self.p(&format!("{name}.wq"))?,
            wk: self.p(&format!("{name}.wk"))?,
            wv: self.p(&format!("{name}.wv"))?,
            wo: self.p(&format!("{name}.wo"))?,
            heads,
        })
    }

    /// `x + conv2(silu(conv1(silu(norm(x))) + proj(temb)))` with a 1×1 skip
    /// when the width changes. `norm` is [`Fwd::pixel_norm`]. `temb` is already activated.
    pub fn resblock(&mut self, name: &str, x: Var, temb: Option<Var>) -> Result<Var> {
        let n = self.pixel_norm(x)?;
        let a = self.g.silu(n);
        let mut h = self.conv(&format!("{name}.c1"), a, 1)?;
        if let Some(t) = temb {
            let proj = self.linear(&format!("{name}.t"), t)?;
            let c = self.g.shape(proj)[1];
            let proj = self.g.reshape(proj, &[c])?;
            h = self.g.bias_channels(h, proj)?;
        }
        let a = self.g.silu(h);
        let h = self.conv(&format!("{name}.c2"), a, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.has(&format!("{skip_name}.w")) {
            self.conv(&skip_name, x, 1)?
        } else {
            x
        };
        Ok(self.g.add(skip, h)?)
    }

    /// Rescales every pixel's channel vector of a C×H×W map to length √C.
    pub fn pixel_norm(&mut self, x: Var) -> Result<Var> {
        let c = self.g.shape(x)[0];
        let n = self.g.normalize_channels(x, PIXEL_NORM_EPS)?;
        Ok(self.g.scale(n, (c as f64).sqrt()))
    }

    /// Pre-norm residual self-attention over the pixels of a C×H×W map.
    pub fn spatial_self_attention(&mut self, name: &str, x: Var, heads: usize) -> Result<Var> {
        let (h, w) = hw(self.g, x)?;
        let tok = self.g.to_tokens(x)?;
        let n = self.layer_norm(&format!("{name}.ln"), tok)?;
        let wts = self.attention_weights(name, heads)?;
        let s = uniavatar_core::self_attention(self.g, n, &wts)?;
        let out = self.g.add(tok, s)?;
        Ok(self.g.from_tokens(out, h, w)?)
    }
}

pub(crate) fn hw(g: &Graph, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::Dimension(format!("expected a C×H×W map, got {s:?}"))),
    }
}

/// `s ⊙ tanh(p)`.
pub fn gate_fuse(g: &mut Graph, s: Var, p: Var) -> Result<Var> {
    if g.shape(s) != g.shape(p) {
        return Err(Error::Dimension(format!(
            "gate input {:?} and motion tap {:?} differ",
            g.shape(s),
            g.shape(p)
        )));
    }
    let t = g.tanh(p);
    Ok(g.mul(s, t)?)
}

/// `(1 + γ) ⊙ LayerNorm(h) + b` over the rows of `h: N×C`, with `γ, b: [C]`.
/// The layer norm itself has no learned affine.
pub fn adaln_modulate(g: &mut Graph, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let c = match g.shape(h) {
        [_, c] => *c,
        s => return Err(Error::Dimension(format!("AdaLN input must be N×C, got {s:?}"))),
    };
    let ones = g.constant(Tensor::ones(&[c]));
    let zeros = g.constant(Tensor::zeros(&[c]));
    let n = g.layer_norm(h, ones, zeros, LAYER_NORM_EPS)?;
    let scale = g.offset(gamma, 1.0);
    let y = g.mul_rows(n, scale)?;
    Ok(g.bias_rows(y, beta)?)
}

/// Sinusoidal embedding of a timestep, `1×dim`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t * f).sin();
        out[half + k] = (t * f).cos();
    }
    Tensor::from_vec(&[1, dim], out)
}
