//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters are candle [`Var`]s so `backward()` yields their gradients.
//! Frozen parameters are handed to the graph as detached tensors, so no
//! gradient is ever computed for them.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail_config, Result};
use crate::lora::AdaptableLinear;

/// A named-tensor leaf of the model.
#[derive(Clone, Debug)]
pub struct Param {
    var: Var,
    frozen: bool,
}

impl Param {
    pub fn new(var: Var) -> Self {
        Self { var, frozen: false }
    }

    /// Tensor to use in a forward pass.
    pub fn t(&self) -> Tensor {
        if self.frozen {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    /// Overwrites the value, keeping shape and dtype.
    pub fn set_f64(&self, values: &[f64]) -> Result<()> {
        let t = Tensor::from_slice(values, self.var.shape(), self.var.device())?
            .to_dtype(self.var.dtype())?;
        self.var.set(&t)?;
        Ok(())
    }

    pub fn set_f32(&self, values: &[f32]) -> Result<()> {
        let t = Tensor::from_slice(values, self.var.shape(), self.var.device())?
            .to_dtype(self.var.dtype())?;
        self.var.set(&t)?;
        Ok(())
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1()?)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.var.dims().to_vec()
    }
}

/// Walks every parameter under a dotted-name hierarchy.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic parameter initializer.
pub struct ParamFactory {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamFactory {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn from_values(&self, values: Vec<f64>, dims: &[usize]) -> Result<Param> {
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        Ok(Param::new(Var::from_tensor(&t)?))
    }

    pub fn normal(&mut self, dims: &[usize], std: f64) -> Result<Param> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_values(values, dims)
    }

    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Result<Param> {
        let n: usize = dims.iter().product();
        let values = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.from_values(values, dims)
    }

    pub fn constant(&self, dims: &[usize], value: f64) -> Result<Param> {
        let n: usize = dims.iter().product();
        self.from_values(vec![value; n], dims)
    }

    pub fn zeros(&self, dims: &[usize]) -> Result<Param> {
        self.constant(dims, 0.0)
    }

    pub fn ones(&self, dims: &[usize]) -> Result<Param> {
        self.constant(dims, 1.0)
    }
}

/// Forward-pass mode. Training mode carries the dropout RNG.
pub struct Ctx {
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: RefCell::new(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng.into_inner()
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Xavier-uniform weight `[out, in]`, zero bias.
    pub fn new(f: &mut ParamFactory, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Ok(Self {
            weight: f.uniform(&[d_out, d_in], bound)?,
            bias: if bias { Some(f.zeros(&[d_out])?) } else { None },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.t(), self.bias.as_ref().map(|b| b.t()).as_ref())
    }
}

/// `x @ wᵀ + b` over the last dimension of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().expect("non-scalar input");
    let rows = x.elem_count() / d_in;
    let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out)?)
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(f: &mut ParamFactory, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: f.ones(&[d])?,
            beta: f.zeros(&[d])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.t())?
            .broadcast_add(&self.beta.t())?)
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Softmax over the last dimension. The max shift is detached; softmax is
/// shift invariant so this changes no gradient.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(f: &mut ParamFactory, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(f, d, hidden, true)?,
            fc2: Linear::new(f, hidden, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Exact GELU, `x·Φ(x)`, built from `erf` so that its gradient is exact
/// too (the fused kernel's backward pass uses rounded constants).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let phi = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)? * 0.5;
    Ok((x * phi?)?)
}

impl Parameters for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Large negative logit used for masked attention entries.
pub const MASKED: f64 = -1e9;

/// Multi-head attention with (optionally LoRA-adapted) q/k/v/o projections.
pub struct Attention {
    pub q: AdaptableLinear,
    pub k: AdaptableLinear,
    pub v: AdaptableLinear,
    pub o: AdaptableLinear,
    heads: usize,
}

impl Attention {
    pub fn new(f: &mut ParamFactory, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            bail_config!("embedding dim {d} is not divisible by {heads} heads");
        }
        let mut proj = || -> Result<AdaptableLinear> { Ok(AdaptableLinear::new(Linear::new(f, d, d, true)?)) };
        Ok(Self {
            q: proj()?,
            k: proj()?,
            v: proj()?,
            o: proj()?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [(&'static str, &AdaptableLinear); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut AdaptableLinear); 4] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ]
    }

    /// `query: [B, Tq, d]`, `kv: [B, Tk, d]`; `mask` is an additive bias
    /// broadcastable to `[B, heads, Tq, Tk]`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let mixed = self.mix(query, kv, mask, ctx)?;
        self.o.forward(&mixed, ctx)
    }

    /// Attention-weighted values before the output projection, `[B, Tq, d]`.
    pub fn mix(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = kv.dim(1)?;
        let hd = d / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query, ctx)?, tq)?;
        let k = split(self.k.forward(kv, ctx)?, tk)?;
        let v = split(self.v.forward(kv, ctx)?, tk)?;
        let scores = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let weights = softmax_last(&scores)?;
        let out = weights.matmul(&v)?;
        Ok(out.transpose(1, 2)?.reshape((b, tq, d))?)
    }
}

impl Parameters for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (name, p) in self.projections() {
            p.base.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, p) in self.projections_mut() {
            p.base.visit_mut(&join(prefix, name), f);
        }
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    /// Dropout on each residual branch while training.
    pub dropout: f64,
}

impl Block {
    pub fn new(f: &mut ParamFactory, d: usize, heads: usize, mlp_hidden: usize, cross: bool) -> Result<Self> {
        let ln_self = LayerNorm::new(f, d)?;
        let self_attn = Attention::new(f, d, heads)?;
        let cross = if cross {
            Some((LayerNorm::new(f, d)?, Attention::new(f, d, heads)?))
        } else {
            None
        };
        Ok(Self {
            ln_self,
            self_attn,
            cross,
            ln_mlp: LayerNorm::new(f, d)?,
            mlp: Mlp::new(f, d, mlp_hidden)?,
            dropout: 0.0,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_mask: Option<&Tensor>,
        memory: Option<(&Tensor, Option<&Tensor>)>,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let p = self.dropout;
        let mut x = (x + ctx.dropout(&self.self_attn.forward(&h, &h, self_mask, ctx)?, p)?)?;
        if let (Some((ln, attn)), Some((mem, mem_mask))) = (&self.cross, memory) {
            let h = ln.forward(&x)?;
            x = (x + ctx.dropout(&attn.forward(&h, mem, mem_mask, ctx)?, p)?)?;
        }
        let h = self.ln_mlp.forward(&x)?;
        Ok((x + ctx.dropout(&self.mlp.forward(&h)?, p)?)?)
    }
}

impl Parameters for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.ln_self.visit(&join(prefix, "ln_self"), f);
        self.self_attn.visit(&join(prefix, "attn"), f);
        if let Some((ln, attn)) = &self.cross {
            ln.visit(&join(prefix, "ln_cross"), f);
            attn.visit(&join(prefix, "cross"), f);
        }
        self.ln_mlp.visit(&join(prefix, "ln_mlp"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
        self.self_attn.visit_mut(&join(prefix, "attn"), f);
        if let Some((ln, attn)) = &mut self.cross {
            ln.visit_mut(&join(prefix, "ln_cross"), f);
            attn.visit_mut(&join(prefix, "cross"), f);
        }
        self.ln_mlp.visit_mut(&join(prefix, "ln_mlp"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Additive attention bias `[B, 1, T, T]`: causal, plus masking of padded keys.
pub fn causal_pad_mask(lengths: &[usize], t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let b = lengths.len();
    let mut data = vec![0f32; b * t * t];
    for (bi, &len) in lengths.iter().enumerate() {
        for i in 0..t {
            for j in 0..t {
                if j > i || j >= len {
                    data[bi * t * t + i * t + j] = MASKED as f32;
                }
            }
        }
    }
    // An empty row would leave padded queries with no visible key.
    for (bi, _) in lengths.iter().enumerate().filter(|(_, &len)| len == 0) {
        for i in 0..t {
            data[bi * t * t + i * t] = 0.0;
        }
    }
    Ok(Tensor::from_vec(data, (b, 1, t, t), device)?.to_dtype(dtype)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
