//! Low-rank adapters for frozen linear projections.
//!
//! An adapted projection computes `W·x + b + (alpha/r)·B·(A·dropout(x))`.
//! `B` starts at zero, so attaching an adapter leaves every output unchanged
//! until training moves it.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{join, linear, Ctx, Linear, ParamFactory, Param, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub enabled: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            dropout: 0.1,
            enabled: true,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub struct LoraAdapter {
    /// `[r, d_in]`
    pub a: Param,
    /// `[d_out, r]`
    pub b: Param,
    pub alpha: f64,
    pub rank: usize,
    pub dropout: f64,
}

impl LoraAdapter {
    /// `A ~ U(-1/sqrt(d_in), 1/sqrt(d_in))`, `B = 0`.
    pub fn new(f: &mut ParamFactory, d_in: usize, d_out: usize, cfg: &LoraConfig) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Lora("rank must be at least 1".into()));
        }
        Ok(Self {
            a: f.uniform(&[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt())?,
            b: f.zeros(&[d_out, cfg.rank])?,
            alpha: cfg.alpha,
            rank: cfg.rank,
            dropout: cfg.dropout,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The low-rank branch alone: `scale·B·(A·dropout(x))`.
    pub fn delta(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = ctx.dropout(x, self.dropout)?;
        let h = linear(&x, &self.a.t(), None)?;
        Ok(linear(&h, &self.b.t(), None)?.affine(self.scale(), 0.0)?)
    }

    /// Dense update `scale·B·A`, `[d_out, d_in]`.
    pub fn dense_delta(&self) -> Result<Tensor> {
        Ok(self
            .b
            .var()
            .as_tensor()
            .matmul(self.a.var().as_tensor())?
            .affine(self.scale(), 0.0)?)
    }
}

impl Parameters for LoraAdapter {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "A"), &self.a);
        f(join(prefix, "B"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "A"), &mut self.a);
        f(join(prefix, "B"), &mut self.b);
    }
}

/// A linear projection that may carry a LoRA adapter.
pub struct AdaptableLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
    merged: bool,
}

impl AdaptableLinear {
    pub fn new(base: Linear) -> Self {
        Self {
            base,
            adapter: None,
            merged: false,
        }
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            Some(adapter) if !self.merged => Ok((y + adapter.delta(x, ctx)?)?),
            _ => Ok(y),
        }
    }

    /// Adds an adapter and freezes the base weight and bias.
    pub fn attach(&mut self, f: &mut ParamFactory, cfg: &LoraConfig) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Lora("adapter already attached".into()));
        }
        let (d_out, d_in) = self.base.weight.var().dims2()?;
        self.adapter = Some(LoraAdapter::new(f, d_in, d_out, cfg)?);
        self.base.weight.freeze();
        if let Some(b) = &mut self.base.bias {
            b.freeze();
        }
        Ok(())
    }

    /// Folds the adapter into the base weight: `W' = W + scale·B·A`.
    pub fn merge(&mut self) -> Result<()> {
        let adapter = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::Lora("no adapter to merge".into()))?;
        if self.merged {
            return Err(Error::Lora("adapter already merged".into()));
        }
        let merged = merge_weight(self.base.weight.var().as_tensor(), adapter)?;
        self.base.weight.var().set(&merged)?;
        self.merged = true;
        Ok(())
    }

    /// Inverse of [`merge`](Self::merge).
    pub fn unmerge(&mut self) -> Result<()> {
        let adapter = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::Lora("no adapter to unmerge".into()))?;
        if !self.merged {
            return Err(Error::Lora("adapter is not merged".into()));
        }
        let w = (self.base.weight.var().as_tensor() - adapter.dense_delta()?)?;
        self.base.weight.var().set(&w)?;
        self.merged = false;
        Ok(())
    }
}

/// `W + scale·B·A`, computed out of place.
pub fn merge_weight(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    Ok((w + adapter.dense_delta()?)?)
}
