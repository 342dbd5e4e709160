//! Causal text decoders: a unimodal one that yields a text embedding for
//! the contrastive objective, and a multimodal one that cross-attends to the
//! fused visual context and predicts the next token.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{TokenId, CLS_TXT, MAX_TOKENS, PAD};
use crate::error::{bail_config, bail_data, Result};
use crate::nn::{causal_pad_mask, join, Block, Ctx, LayerNorm, Linear, Param, ParamFactory, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Set from the vocabulary at model construction.
    pub vocab_size: usize,
    pub max_len: usize,
    /// Embedding and residual dropout while training.
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            vocab_size: 0,
            max_len: MAX_TOKENS,
            dropout: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            bail_config!("decoder.d ({}) must be divisible by decoder.heads ({})", self.d, self.heads);
        }
        if self.max_len == 0 || self.max_len > MAX_TOKENS {
            bail_config!("decoder.max_len must be in 1..={MAX_TOKENS}");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail_config!("decoder.dropout must be in [0, 1), got {}", self.dropout);
        }
        if self.vocab_size < super::MIN_VOCAB {
            bail_config!("decoder.vocab_size {} below {}", self.vocab_size, super::MIN_VOCAB);
        }
        Ok(())
    }
}

/// Right-padded id matrix.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<TokenId>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl TokenBatch {
    pub fn new(rows: &[&[TokenId]]) -> Self {
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        Self::with_width(rows, width)
    }

    pub fn with_width(rows: &[&[TokenId]], width: usize) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * width);
        let mut lengths = Vec::with_capacity(rows.len());
        for r in rows {
            assert!(r.len() <= width);
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(PAD).take(width - r.len()));
            lengths.push(r.len());
        }
        Self { ids, lengths, width }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    fn tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.ids, (self.rows(), self.width), device)?)
    }
}

fn embed(tok: &Param, pos: &Param, batch: &TokenBatch) -> Result<Tensor> {
    let tok_t = tok.t();
    let d = tok_t.dim(1)?;
    let ids = batch.tensor(tok_t.device())?.flatten_all()?;
    let x = tok_t
        .index_select(&ids, 0)?
        .reshape((batch.rows(), batch.width, d))?;
    let p = pos.t().narrow(0, 0, batch.width)?;
    Ok(x.broadcast_add(&p)?)
}

pub struct UnimodalDecoder {
    pub config: DecoderConfig,
    pub tok_embed: Param,
    /// One extra slot for the trailing text-CLS token.
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl UnimodalDecoder {
    pub fn new(f: &mut ParamFactory, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        Ok(Self {
            config: config.clone(),
            tok_embed: f.normal(&[config.vocab_size, d], 0.02)?,
            pos_embed: f.normal(&[config.max_len + 1, d], 0.02)?,
            blocks: (0..config.layers)
                .map(|_| {
                    let mut b = Block::new(f, d, config.heads, config.mlp_hidden, false)?;
                    b.dropout = config.dropout;
                    Ok(b)
                })
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(f, d)?,
        })
    }

    /// Runs `seqs` with a CLS token appended after each sequence's last
    /// token. Returns hidden states `[B, T+1, d]` and the text embedding
    /// taken at the CLS position, `[B, d]`.
    pub fn forward(&self, seqs: &[&[TokenId]], ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        if let Some(s) = seqs.iter().find(|s| s.len() > self.config.max_len) {
            bail_data!("sequence of length {} exceeds decoder max_len {}", s.len(), self.config.max_len);
        }
        let with_cls: Vec<Vec<TokenId>> = seqs
            .iter()
            .map(|s| s.iter().copied().chain(std::iter::once(CLS_TXT)).collect())
            .collect();
        let rows: Vec<&[TokenId]> = with_cls.iter().map(Vec::as_slice).collect();
        let batch = TokenBatch::new(&rows);
        let mut x = ctx.dropout(&embed(&self.tok_embed, &self.pos_embed, &batch)?, self.config.dropout)?;
        let mask = causal_pad_mask(&batch.lengths, batch.width, x.dtype(), x.device())?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask), None, ctx)?;
        }
        let hidden = self.ln_f.forward(&x)?;
        let d = self.config.d;
        let cls_index: Vec<u32> = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| (b * batch.width + len - 1) as u32)
            .collect();
        let cls_index = Tensor::from_vec(cls_index, batch.rows(), hidden.device())?;
        let text_cls = hidden
            .reshape((batch.rows() * batch.width, d))?
            .index_select(&cls_index, 0)?;
        Ok((hidden, text_cls))
    }
}

impl Parameters for UnimodalDecoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "tok_embed"), &self.tok_embed);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("L{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "tok_embed"), &mut self.tok_embed);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("L{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
    }
}

pub struct MultimodalDecoder {
    pub config: DecoderConfig,
    pub tok_embed: Param,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl MultimodalDecoder {
    pub fn new(f: &mut ParamFactory, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        Ok(Self {
            config: config.clone(),
            tok_embed: f.normal(&[config.vocab_size, d], 0.02)?,
            pos_embed: f.normal(&[config.max_len, d], 0.02)?,
            blocks: (0..config.layers)
                .map(|_| {
                    let mut b = Block::new(f, d, config.heads, config.mlp_hidden, true)?;
                    b.dropout = config.dropout;
                    Ok(b)
                })
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(f, d)?,
            head: Linear::new(f, d, config.vocab_size, true)?,
        })
    }

    /// Next-token logits `[B, T, V]` for a padded batch, cross-attending to
    /// `memory: [B, T_ctx, d]`.
    pub fn forward(&self, batch: &TokenBatch, memory: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        if batch.width > self.config.max_len {
            bail_data!("sequence of length {} exceeds decoder max_len {}", batch.width, self.config.max_len);
        }
        let (mb, _, md) = memory.dims3()?;
        if md != self.config.d {
            bail_config!("context dim {md} does not match decoder dim {}", self.config.d);
        }
        if mb != batch.rows() {
            bail_config!("context batch {mb} does not match token batch {}", batch.rows());
        }
        let mut x = ctx.dropout(&embed(&self.tok_embed, &self.pos_embed, batch)?, self.config.dropout)?;
        let mask = causal_pad_mask(&batch.lengths, batch.width, x.dtype(), x.device())?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask), Some((memory, None)), ctx)?;
        }
        self.head.forward(&self.ln_f.forward(&x)?)
    }

    pub fn forward_seqs(&self, seqs: &[&[TokenId]], memory: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.forward(&TokenBatch::new(seqs), memory, ctx)
    }
}

impl Parameters for MultimodalDecoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "tok_embed"), &self.tok_embed);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("L{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "tok_embed"), &mut self.tok_embed);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("L{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Zero-filled memory tensor, e.g. for context-free comparisons.
pub fn zero_memory(rows: usize, t: usize, d: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((rows, t, d), dtype, &Device::Cpu)?)
}
