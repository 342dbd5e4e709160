//! Per-frame vision transformer plus the two signals added to its output:
//! a separately learned segmentation-mask patch embedding and a learned
//! frame position embedding indexed by slot relative to the boundary.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{Frame, SegMask, Side, MAX_SIDE_FRAMES};
use crate::error::{bail_config, bail_data, Result};
use crate::lora::LoraConfig;
use crate::nn::{join, Block, Ctx, LayerNorm, Linear, Param, ParamFactory, Parameters};

/// Frame slots: ten before, the boundary, ten after.
pub const FRAME_SLOTS: usize = 2 * MAX_SIDE_FRAMES + 1;
/// Slot of the boundary frame.
pub const BOUNDARY_SLOT: usize = MAX_SIDE_FRAMES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub seg_classes: usize,
    pub resolution: usize,
    pub slots: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            patch: 4,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            seg_classes: 8,
            resolution: 32,
            slots: FRAME_SLOTS,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            bail_config!("encoder.d ({}) must be divisible by encoder.heads ({})", self.d, self.heads);
        }
        if self.patch == 0 || self.resolution % self.patch != 0 {
            bail_config!("encoder.resolution ({}) must be divisible by encoder.patch ({})", self.resolution, self.patch);
        }
        if self.slots != FRAME_SLOTS {
            bail_config!("encoder.slots must be {FRAME_SLOTS}");
        }
        if self.seg_classes == 0 || self.seg_classes > 256 {
            bail_config!("encoder.seg_classes must be in 1..=256");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch
    }

    /// Patches per frame.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn pixel_patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn seg_patch_len(&self) -> usize {
        self.seg_classes * self.patch * self.patch
    }
}

/// Patch tokens `[N_f, P, d]` and per-frame CLS `[N_f, d]`.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub patch_tokens: Tensor,
    pub cls: Tensor,
}

/// Frame pixels as `[P, 3·p·p]` rows scaled to `[-1, 1]`, patches in raster order,
/// each row laid out channel-major.
pub fn patchify(frame: &Frame, cfg: &EncoderConfig) -> Result<Vec<f32>> {
    if frame.resolution != cfg.resolution {
        bail_data!("frame resolution {} does not match encoder resolution {}", frame.resolution, cfg.resolution);
    }
    let (res, p, g) = (cfg.resolution, cfg.patch, cfg.grid());
    let mut out = Vec::with_capacity(cfg.patches() * cfg.pixel_patch_len());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let (y, x) = (gy * p + py, gx * p + px);
                        out.push(frame.pixels[c * res * res + y * res + x] as f32 / 127.5 - 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One-hot class map cut into `[P, C·p·p]` rows, class-major within a row.
pub fn seg_one_hot(mask: &SegMask, cfg: &EncoderConfig) -> Result<Vec<f32>> {
    if mask.resolution != cfg.resolution {
        bail_data!("mask resolution {} does not match encoder resolution {}", mask.resolution, cfg.resolution);
    }
    if let Some(&bad) = mask.class_ids.iter().find(|&&c| c as usize >= cfg.seg_classes) {
        bail_data!("segmentation class id {bad} is out of range for {} classes", cfg.seg_classes);
    }
    let (res, p, g) = (cfg.resolution, cfg.patch, cfg.grid());
    let pp = p * p;
    let row_len = cfg.seg_patch_len();
    let mut out = vec![0f32; cfg.patches() * row_len];
    for gy in 0..g {
        for gx in 0..g {
            let row = &mut out[(gy * g + gx) * row_len..][..row_len];
            for py in 0..p {
                for px in 0..p {
                    let class = mask.class_ids[(gy * p + py) * res + gx * p + px] as usize;
                    row[class * pp + py * p + px] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Slot of each frame: before-frames right-aligned against the boundary
/// (the one adjacent to it is slot 9), boundary at 10, after-frames from 11.
pub fn frame_slots(sides: &[Side]) -> Result<Vec<usize>> {
    let nb = sides.iter().filter(|&&s| s == Side::Before).count();
    let na = sides.iter().filter(|&&s| s == Side::After).count();
    let nbd = sides.iter().filter(|&&s| s == Side::Boundary).count();
    if nbd != 1 {
        bail_data!("expected exactly one boundary frame, found {nbd}");
    }
    if nb > MAX_SIDE_FRAMES || na > MAX_SIDE_FRAMES {
        bail_data!("too many frames: {nb} before, {na} after (max {MAX_SIDE_FRAMES} per side)");
    }
    if !sides.windows(2).all(|w| w[0] <= w[1]) {
        bail_data!("frames are not in before / boundary / after order");
    }
    let mut slots = Vec::with_capacity(sides.len());
    slots.extend((0..nb).map(|i| BOUNDARY_SLOT - nb + i));
    slots.push(BOUNDARY_SLOT);
    slots.extend((0..na).map(|j| BOUNDARY_SLOT + 1 + j));
    Ok(slots)
}

/// Model-ready tensors of one record's sampled frames.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub n_frames: usize,
    /// `[N_f, P, 3·p·p]`
    pub pixels: Vec<f32>,
    /// `[N_f, P, C·p·p]`
    pub seg: Vec<f32>,
    pub slots: Vec<usize>,
    pub sides: Vec<Side>,
}

impl FrameInputs {
    pub fn new(frames: &[&Frame], masks: &[&SegMask], sides: &[Side], cfg: &EncoderConfig) -> Result<Self> {
        if frames.len() != masks.len() || frames.len() != sides.len() {
            bail_data!("{} frames, {} masks and {} side labels are misaligned", frames.len(), masks.len(), sides.len());
        }
        let slots = frame_slots(sides)?;
        let mut pixels = Vec::new();
        let mut seg = Vec::new();
        for (f, m) in frames.iter().zip(masks) {
            pixels.extend(patchify(f, cfg)?);
            seg.extend(seg_one_hot(m, cfg)?);
        }
        Ok(Self {
            n_frames: frames.len(),
            pixels,
            seg,
            slots,
            sides: sides.to_vec(),
        })
    }
}

pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Patch embedding for one-hot segmentation maps, independent of
    /// `patch_embed`.
    pub seg_embed: Linear,
    /// Frame position embedding `[slots, d]`.
    pub frame_pos: Param,
}

impl VisionEncoder {
    pub fn new(f: &mut ParamFactory, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        Ok(Self {
            config: config.clone(),
            patch_embed: Linear::new(f, config.pixel_patch_len(), d, true)?,
            cls_token: f.normal(&[d], 0.02)?,
            pos_embed: f.normal(&[config.patches() + 1, d], 0.02)?,
            blocks: (0..config.layers)
                .map(|_| Block::new(f, d, config.heads, config.mlp_hidden, false))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(f, d)?,
            seg_embed: Linear::new(f, config.seg_patch_len(), d, true)?,
            frame_pos: f.normal(&[config.slots, d], 0.02)?,
        })
    }

    fn device(&self) -> Device {
        self.cls_token.var().device().clone()
    }

    fn input_tensor(&self, data: &[f32], frames: usize, width: usize) -> Result<Tensor> {
        let dtype = self.cls_token.var().dtype();
        Ok(Tensor::from_slice(data, (frames, self.config.patches(), width), &self.device())?.to_dtype(dtype)?)
    }

    /// Transformer over `[F, P, 3·p·p]` pixel patches. Returns patch tokens
    /// `[F, P, d]` and CLS `[F, d]`.
    pub fn encode_patches(&self, pixels: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let (frames, p, _) = pixels.dims3()?;
        let d = self.config.d;
        let tokens = self.patch_embed.forward(pixels)?;
        let cls = self.cls_token.t().reshape((1, 1, d))?.broadcast_as((frames, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embed.t())?;
        for block in &self.blocks {
            x = block.forward(&x, None, None, ctx)?;
        }
        let x = self.ln_f.forward(&x)?;
        let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
        let patches = x.narrow(1, 1, p)?;
        Ok((patches, cls))
    }

    /// A single frame: patch tokens `[P, d]` and CLS `[d]`.
    pub fn encode_frame(&self, frame: &Frame, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let pixels = self.input_tensor(&patchify(frame, &self.config)?, 1, self.config.pixel_patch_len())?;
        let (p, c) = self.encode_patches(&pixels, ctx)?;
        Ok((p.squeeze(0)?, c.squeeze(0)?))
    }

    /// Segmentation tokens `[P, d]` for one mask.
    pub fn embed_segmentation(&self, mask: &SegMask) -> Result<Tensor> {
        let seg = self.input_tensor(&seg_one_hot(mask, &self.config)?, 1, self.config.seg_patch_len())?;
        Ok(self.seg_embed.forward(&seg)?.squeeze(0)?)
    }

    /// Encodes the frames of several records in one transformer pass.
    pub fn encode_batch(&self, inputs: &[&FrameInputs], ctx: &Ctx) -> Result<Vec<FrameFeatures>> {
        let total: usize = inputs.iter().map(|i| i.n_frames).sum();
        if total == 0 {
            return Ok(Vec::new());
        }
        let mut pixels = Vec::new();
        let mut seg = Vec::new();
        let mut slots = Vec::new();
        for i in inputs {
            pixels.extend_from_slice(&i.pixels);
            seg.extend_from_slice(&i.seg);
            slots.extend(i.slots.iter().map(|&s| s as u32));
        }
        let pixels = self.input_tensor(&pixels, total, self.config.pixel_patch_len())?;
        let seg = self.input_tensor(&seg, total, self.config.seg_patch_len())?;
        let (patches, cls) = self.encode_patches(&pixels, ctx)?;
        let seg_tokens = self.seg_embed.forward(&seg)?;
        let slots = Tensor::from_vec(slots, total, &self.device())?;
        let pos = self.frame_pos.t().index_select(&slots, 0)?;
        let patches = (patches + seg_tokens)?.broadcast_add(&pos.unsqueeze(1)?)?;
        let cls = (cls + pos)?;
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for i in inputs {
            out.push(FrameFeatures {
                patch_tokens: patches.narrow(0, start, i.n_frames)?,
                cls: cls.narrow(0, start, i.n_frames)?,
            });
            start += i.n_frames;
        }
        Ok(out)
    }

    /// `encode_frame(f_i) + embed_segmentation(m_i) + E_p[slot(i)]` per frame.
    pub fn encode_record(&self, inputs: &FrameInputs, ctx: &Ctx) -> Result<FrameFeatures> {
        Ok(self.encode_batch(&[inputs], ctx)?.remove(0))
    }

    /// Attaches LoRA adapters to every attention projection.
    pub fn attach_lora(&mut self, f: &mut ParamFactory, cfg: &LoraConfig) -> Result<usize> {
        let mut n = 0;
        for block in &mut self.blocks {
            for (_, proj) in block.self_attn.projections_mut() {
                proj.attach(f, cfg)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn visit_adapters<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, proj) in block.self_attn.projections() {
                if let Some(a) = &proj.adapter {
                    a.visit(&join(prefix, &format!("L{i}.{name}")), f);
                }
            }
        }
    }

    pub fn visit_adapters_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, proj) in block.self_attn.projections_mut() {
                if let Some(a) = &mut proj.adapter {
                    a.visit_mut(&join(prefix, &format!("L{i}.{name}")), f);
                }
            }
        }
    }
}

impl Parameters for VisionEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &self.cls_token);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("L{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.seg_embed.visit(&join(prefix, "seg_embed"), f);
        f(join(prefix, "frame_pos"), &self.frame_pos);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &mut self.cls_token);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("L{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.seg_embed.visit_mut(&join(prefix, "seg_embed"), f);
        f(join(prefix, "frame_pos"), &mut self.frame_pos);
    }
}
