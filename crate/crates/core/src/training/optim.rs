//! Adafactor (factored second moments, update clipping, first-moment EMA,
//! decoupled weight decay, externally scheduled learning rate) and AdamW.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::serialization::{NamedTensorMap, TensorBlob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adafactor,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub weight_decay: f64,
    /// Adafactor second-moment decay exponent: `ĉ_t = 1 − t^decay_rate`.
    pub decay_rate: f64,
    pub eps1: f64,
    pub clip_threshold: f64,
    /// AdamW only.
    pub beta2: f64,
    /// AdamW only.
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adafactor,
            beta1: 0.9,
            weight_decay: 0.01,
            decay_rate: -0.8,
            eps1: 1e-30,
            clip_threshold: 1.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config("optimizer.beta1 must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer.weight_decay must be non-negative".into()));
        }
        if !(self.decay_rate < 0.0) {
            return Err(Error::Config("optimizer.decay_rate must be negative".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config("optimizer.clip_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer.beta2 must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Moments {
    /// Row and column accumulators of a `[rows, cols]` matrix.
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct SlotState {
    second: Moments,
    /// First moment; Adafactor keeps an EMA of the update, AdamW of the gradient.
    first: Vec<f64>,
}

/// Stateful optimizer over named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    state: BTreeMap<String, SlotState>,
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// Gradients are checked first; a non-finite one rejects the whole step
    /// and leaves parameters and state untouched.
    pub fn step(&mut self, params: &[(String, Param)], grads: &GradStore, lr: f64) -> Result<()> {
        let mut collected = Vec::with_capacity(params.len());
        for (name, p) in params {
            if p.is_frozen() {
                continue;
            }
            let Some(g) = grads.get(p.var().as_tensor()) else {
                continue;
            };
            let g: Vec<f64> = g.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {bad} in {name}; step rejected")));
            }
            collected.push((name, p, g));
        }
        self.step += 1;
        for (name, p, g) in collected {
            let mut w = p.to_f64_vec()?;
            let dims = p.dims();
            let slot = self.state.entry(name.clone()).or_insert_with(|| new_slot(&self.config, &dims));
            match self.config.kind {
                OptimizerKind::Adafactor => adafactor_update(&self.config, slot, &dims, &mut w, &g, lr, self.step),
                OptimizerKind::Adamw => adamw_update(&self.config, slot, &mut w, &g, lr, self.step),
            }
            p.set_f64(&w)?;
        }
        Ok(())
    }

    /// State as tensors named `{param}.first`, `{param}.row`, `{param}.col`
    /// or `{param}.second`; the step count goes in the meta string. Values
    /// are `f64` bit patterns stored as `i64` so a resumed run continues
    /// exactly.
    pub fn to_tensor_map(&self) -> Result<NamedTensorMap> {
        let mut map = NamedTensorMap::with_meta(serde_json::json!({ "step": self.step }).to_string());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits() as i64).collect::<Vec<i64>>();
        for (name, s) in &self.state {
            map.insert(format!("{name}.first"), TensorBlob::from_i64(vec![s.first.len()], &bits(&s.first))?)?;
            match &s.second {
                Moments::Factored { row, col } => {
                    map.insert(format!("{name}.row"), TensorBlob::from_i64(vec![row.len()], &bits(row))?)?;
                    map.insert(format!("{name}.col"), TensorBlob::from_i64(vec![col.len()], &bits(col))?)?;
                }
                Moments::Full(v) => {
                    map.insert(format!("{name}.second"), TensorBlob::from_i64(vec![v.len()], &bits(v))?)?;
                }
            }
        }
        Ok(map)
    }

    pub fn load_tensor_map(config: OptimizerConfig, map: &NamedTensorMap) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(map.meta())?;
        let step = meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Config("optimizer state lacks a step count".into()))?;
        let mut opt = Self::new(config)?;
        opt.step = step;
        let f64s = |name: &str| -> Result<Vec<f64>> { Ok(map.require(name)?.to_i64()?.into_iter().map(|b| f64::from_bits(b as u64)).collect()) };
        for (key, _) in map.iter() {
            let Some(name) = key.strip_suffix(".first") else { continue };
            let second = if map.get(&format!("{name}.row")).is_some() {
                Moments::Factored {
                    row: f64s(&format!("{name}.row"))?,
                    col: f64s(&format!("{name}.col"))?,
                }
            } else {
                Moments::Full(f64s(&format!("{name}.second"))?)
            };
            opt.state.insert(name.to_string(), SlotState { second, first: f64s(key)? });
        }
        Ok(opt)
    }
}

fn new_slot(cfg: &OptimizerConfig, dims: &[usize]) -> SlotState {
    let n: usize = dims.iter().product();
    let second = match (cfg.kind, dims) {
        (OptimizerKind::Adafactor, [rows, cols]) => Moments::Factored {
            row: vec![0.0; *rows],
            col: vec![0.0; *cols],
        },
        _ => Moments::Full(vec![0.0; n]),
    };
    SlotState { second, first: vec![0.0; n] }
}

fn adafactor_update(cfg: &OptimizerConfig, s: &mut SlotState, dims: &[usize], w: &mut [f64], g: &[f64], lr: f64, t: u64) {
    let beta2t = 1.0 - (t as f64).powf(cfg.decay_rate);
    let mut update: Vec<f64> = match &mut s.second {
        Moments::Factored { row, col } => {
            let (rows, cols) = (dims[0], dims[1]);
            for r in 0..rows {
                let mean = g[r * cols..(r + 1) * cols].iter().map(|x| x * x + cfg.eps1).sum::<f64>() / cols as f64;
                row[r] = beta2t * row[r] + (1.0 - beta2t) * mean;
            }
            for c in 0..cols {
                let mean = (0..rows).map(|r| g[r * cols + c].powi(2) + cfg.eps1).sum::<f64>() / rows as f64;
                col[c] = beta2t * col[c] + (1.0 - beta2t) * mean;
            }
            let row_mean = row.iter().sum::<f64>() / rows as f64;
            let r_factor: Vec<f64> = row.iter().map(|&r| (r / row_mean).sqrt().recip()).collect();
            let c_factor: Vec<f64> = col.iter().map(|&c| c.sqrt().recip()).collect();
            (0..rows * cols).map(|i| g[i] * r_factor[i / cols] * c_factor[i % cols]).collect()
        }
        Moments::Full(v) => {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2t * *vi + (1.0 - beta2t) * (gi * gi + cfg.eps1);
            }
            g.iter().zip(v.iter()).map(|(gi, vi)| gi / vi.sqrt()).collect()
        }
    };
    let denom = (rms(&update) / cfg.clip_threshold).max(1.0);
    for u in &mut update {
        *u *= lr / denom;
    }
    if cfg.beta1 > 0.0 {
        for (m, u) in s.first.iter_mut().zip(update.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *u;
            *u = *m;
        }
    }
    for (wi, u) in w.iter_mut().zip(&update) {
        *wi -= cfg.weight_decay * lr * *wi;
        *wi -= u;
    }
}

fn adamw_update(cfg: &OptimizerConfig, s: &mut SlotState, w: &mut [f64], g: &[f64], lr: f64, t: u64) {
    let Moments::Full(v) = &mut s.second else {
        unreachable!("AdamW state is never factored")
    };
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..w.len() {
        s.first[i] = cfg.beta1 * s.first[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = s.first[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * cfg.weight_decay * w[i];
        w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
