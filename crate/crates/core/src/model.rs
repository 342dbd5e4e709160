//! The full captioner: vision encoder with LoRA, temporal fusion, and the
//! unimodal / multimodal decoder pair.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_frames, BoundaryRecord, MAX_SIDE_FRAMES};
use crate::error::{bail_config, Result};
use crate::fusion::{FuseInput, FusedContext, FusionConfig, TemporalFusion};
use crate::lora::LoraConfig;
use crate::nn::{join, Ctx, Param, ParamFactory, Parameters};
use crate::serialization::{NamedTensorMap, TensorBlob};
use crate::text::{DecoderConfig, MultimodalDecoder, TokenBatch, TokenId, UnimodalDecoder};
use crate::vision::{EncoderConfig, FrameInputs, VisionEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub max_side_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            max_side_frames: MAX_SIDE_FRAMES,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions for gradient checks and fast tests.
    pub fn tiny() -> Self {
        let d = 16;
        Self {
            encoder: EncoderConfig {
                d,
                patch: 4,
                layers: 1,
                heads: 2,
                mlp_hidden: 32,
                seg_classes: 8,
                resolution: 8,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig {
                d,
                queries: 4,
                heads: 2,
                ..FusionConfig::default()
            },
            decoder: DecoderConfig {
                d,
                layers: 1,
                heads: 2,
                mlp_hidden: 32,
                ..DecoderConfig::default()
            },
            ..Self::default()
        }
    }

    /// Checks cross-module consistency; `vocab_size` is filled in by
    /// [`Model::new`].
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        let d = self.encoder.d;
        if self.fusion.d != d || self.decoder.d != d {
            bail_config!(
                "embedding dims differ: encoder {d}, fusion {}, decoder {}",
                self.fusion.d,
                self.decoder.d
            );
        }
        if !(1..=MAX_SIDE_FRAMES).contains(&self.max_side_frames) {
            bail_config!("max_side_frames must be in 1..={MAX_SIDE_FRAMES}");
        }
        if self.lora.enabled && self.lora.rank == 0 {
            bail_config!("lora.rank must be at least 1");
        }
        Ok(())
    }
}

/// Per-record tensors the model consumes, prepared once.
#[derive(Debug, Clone)]
pub struct RecordInputs {
    pub frames: FrameInputs,
    pub tsn_before: Vec<f32>,
    pub tsn_after: Vec<f32>,
}

/// Outputs of one teacher-forced batch.
pub struct BatchOutput {
    /// `[B, T, V]`
    pub logits: Tensor,
    /// `[B, d]`, image side of the contrastive pair.
    pub image_cls: Tensor,
    /// `[B, d]`
    pub text_cls: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    pub vision: VisionEncoder,
    pub fusion: TemporalFusion,
    pub uni: UnimodalDecoder,
    pub multi: MultimodalDecoder,
    pub temperature: Param,
}

/// Contrastive temperature at construction.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Floor applied after every optimizer step.
pub const TEMPERATURE_MIN: f64 = 1e-3;

impl Model {
    pub fn new(seed: u64, config: &ModelConfig, vocab_size: usize, dtype: DType) -> Result<Self> {
        let mut config = config.clone();
        config.decoder.vocab_size = vocab_size;
        config.validate()?;
        config.decoder.validate()?;
        let mut f = ParamFactory::new(seed, dtype);
        let mut vision = VisionEncoder::new(&mut f, &config.encoder)?;
        let fusion = TemporalFusion::new(&mut f, &config.fusion)?;
        let uni = UnimodalDecoder::new(&mut f, &config.decoder)?;
        let multi = MultimodalDecoder::new(&mut f, &config.decoder)?;
        let temperature = f.constant(&[], DEFAULT_TEMPERATURE)?;
        if config.lora.enabled {
            vision.attach_lora(&mut f, &config.lora)?;
        }
        Ok(Self {
            config,
            vision,
            fusion,
            uni,
            multi,
            temperature,
        })
    }

    pub fn dtype(&self) -> DType {
        self.temperature.var().dtype()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.decoder.vocab_size
    }

    pub fn prepare(&self, record: &BoundaryRecord) -> Result<RecordInputs> {
        let s = sample_frames(record, self.config.max_side_frames);
        Ok(RecordInputs {
            frames: FrameInputs::new(&s.frames, &s.masks, &s.sides, &self.config.encoder)?,
            tsn_before: record.tsn_before.clone(),
            tsn_after: record.tsn_after.clone(),
        })
    }

    /// Encodes and fuses a batch of records.
    pub fn context(&self, inputs: &[&RecordInputs], ctx: &Ctx) -> Result<FusedContext> {
        let frames: Vec<&FrameInputs> = inputs.iter().map(|i| &i.frames).collect();
        let features = self.vision.encode_batch(&frames, ctx)?;
        let fuse: Vec<FuseInput<'_>> = inputs
            .iter()
            .zip(&features)
            .map(|(i, f)| FuseInput {
                features: f,
                sides: &i.frames.sides,
                tsn_before: &i.tsn_before,
                tsn_after: &i.tsn_after,
            })
            .collect();
        self.fusion.fuse_batch(&fuse, ctx)
    }

    /// Teacher-forced forward: the multimodal decoder reads each target
    /// without its last token; the unimodal decoder reads the whole target.
    pub fn forward(&self, inputs: &[&RecordInputs], targets: &[&[TokenId]], ctx: &Ctx) -> Result<BatchOutput> {
        if inputs.len() != targets.len() {
            bail_config!("{} records for {} targets", inputs.len(), targets.len());
        }
        if let Some(t) = targets.iter().find(|t| t.len() < 2) {
            bail_config!("target of length {} has nothing to predict", t.len());
        }
        let fused = self.context(inputs, ctx)?;
        let prefixes: Vec<&[TokenId]> = targets.iter().map(|t| &t[..t.len() - 1]).collect();
        let logits = self.multi.forward(&TokenBatch::new(&prefixes), &fused.tokens, ctx)?;
        let (_, text_cls) = self.uni.forward(targets, ctx)?;
        Ok(BatchOutput {
            logits,
            image_cls: fused.pooled_cls,
            text_cls,
        })
    }

    /// Next-token log-probabilities at the last position of each prefix,
    /// all prefixes sharing one context row. Returns `[N, V]`.
    pub fn next_logprobs(&self, context: &FusedContext, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f32>>> {
        let n = prefixes.len();
        let (_, t, d) = context.tokens.dims3()?;
        let memory = context.tokens.broadcast_as((n, t, d))?.contiguous()?;
        let batch = TokenBatch::new(prefixes);
        let logits = self.multi.forward(&batch, &memory, &Ctx::eval())?;
        let v = self.vocab_size();
        let index: Vec<u32> = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| (b * batch.width + len - 1) as u32)
            .collect();
        let index = Tensor::from_vec(index, n, logits.device())?;
        let last = logits.reshape((n * batch.width, v))?.index_select(&index, 0)?;
        let logp = crate::nn::log_softmax_last(&last)?;
        Ok(logp.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    /// Every parameter, frozen ones and adapters included, in a stable order.
    pub fn all_params(&self) -> Vec<(String, Param)> {
        self.named_params("")
    }

    pub fn trainable_params(&self) -> Vec<(String, Param)> {
        self.all_params().into_iter().filter(|(_, p)| !p.is_frozen()).collect()
    }

    pub fn temperature_value(&self) -> Result<f64> {
        Ok(self.temperature.to_f64_vec()?[0])
    }

    pub fn set_temperature(&self, value: f64) -> Result<()> {
        if !(value > 0.0) {
            bail_config!("temperature must be positive, got {value}");
        }
        self.temperature.set_f64(&[value])
    }

    pub fn clamp_temperature(&self) -> Result<()> {
        if self.temperature_value()? < TEMPERATURE_MIN {
            self.temperature.set_f64(&[TEMPERATURE_MIN])?;
        }
        Ok(())
    }

    /// Parameters as an `f32` tensor map.
    pub fn to_tensor_map(&self) -> Result<NamedTensorMap> {
        let mut map = NamedTensorMap::new();
        for (name, p) in self.all_params() {
            map.insert(&name, TensorBlob::from_f32(p.dims(), &p.to_f32_vec()?)?)?;
        }
        Ok(map)
    }

    /// Overwrites every parameter from `map`; names and shapes must match.
    pub fn load_tensor_map(&self, map: &NamedTensorMap) -> Result<()> {
        for (name, p) in self.all_params() {
            let blob = map.require(&name)?;
            if blob.dims() != p.dims().as_slice() {
                bail_config!("checkpoint tensor {name} has shape {:?}, model expects {:?}", blob.dims(), p.dims());
            }
            p.set_f32(&blob.to_f32()?)?;
        }
        Ok(())
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.vision.visit(&join(prefix, "vision"), f);
        self.vision.visit_adapters(&join(prefix, "lora.vision"), f);
        self.fusion.visit(prefix, f);
        self.uni.visit(&join(prefix, "uni"), f);
        self.multi.visit(&join(prefix, "multi"), f);
        f(join(prefix, "temperature"), &self.temperature);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.vision.visit_mut(&join(prefix, "vision"), f);
        self.vision.visit_adapters_mut(&join(prefix, "lora.vision"), f);
        self.fusion.visit_mut(prefix, f);
        self.uni.visit_mut(&join(prefix, "uni"), f);
        self.multi.visit_mut(&join(prefix, "multi"), f);
        f(join(prefix, "temperature"), &mut self.temperature);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::record;
    use crate::text::{BOS, EOS, SUBJ};

    fn tiny_record(nb: usize, na: usize) -> BoundaryRecord {
        let mut r = record(nb, na, 8);
        r.tsn_before = vec![0.1; 2048];
        r.tsn_after = vec![-0.1; 2048];
        r
    }

    #[test]
    fn parameter_names_use_documented_prefixes() {
        let m = Model::new(0, &ModelConfig::tiny(), 16, DType::F32).unwrap();
        let names: Vec<String> = m.all_params().into_iter().map(|(n, _)| n).collect();
        for prefix in ["vision.", "lora.vision.L0.q.A", "pool_frames.", "pool_tpd.", "tsn_proj.", "uni.", "multi.", "temperature"] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "missing {prefix}");
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(1, &ModelConfig::tiny(), 16, DType::F32).unwrap();
        let (r1, r2) = (tiny_record(1, 2), tiny_record(3, 1));
        let (i1, i2) = (m.prepare(&r1).unwrap(), m.prepare(&r2).unwrap());
        let t1 = [SUBJ, BOS, 9, 10, EOS];
        let t2 = [SUBJ, BOS, 11, EOS];
        let out = m.forward(&[&i1, &i2], &[&t1, &t2], &Ctx::eval()).unwrap();
        assert_eq!(out.logits.dims(), &[2, 4, 16]);
        assert_eq!(out.image_cls.dims(), &[2, 16]);
        assert_eq!(out.text_cls.dims(), &[2, 16]);
        let ctx = m.context(&[&i1], &Ctx::eval()).unwrap();
        assert_eq!(ctx.tokens.dims(), &[1, 10, 16]);
        let lp = m.next_logprobs(&ctx, &[&[SUBJ, BOS], &[SUBJ, BOS, 9]]).unwrap();
        assert_eq!(lp.len(), 2);
        let total: f32 = lp[0].iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn tensor_map_round_trip() {
        let a = Model::new(2, &ModelConfig::tiny(), 16, DType::F32).unwrap();
        let b = Model::new(3, &ModelConfig::tiny(), 16, DType::F32).unwrap();
        b.load_tensor_map(&a.to_tensor_map().unwrap()).unwrap();
        for ((na, pa), (nb, pb)) in a.all_params().iter().zip(b.all_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.to_f32_vec().unwrap(), pb.to_f32_vec().unwrap());
        }
    }

    #[test]
    fn lora_freezes_only_encoder_projections() {
        let m = Model::new(4, &ModelConfig::tiny(), 16, DType::F32).unwrap();
        for (name, p) in m.all_params() {
            let is_proj = name.starts_with("vision.L") && name.contains(".attn.");
            assert_eq!(p.is_frozen(), is_proj, "{name}");
        }
        let mut cfg = ModelConfig::tiny();
        cfg.lora.enabled = false;
        let m = Model::new(4, &cfg, 16, DType::F32).unwrap();
        assert!(m.all_params().iter().all(|(_, p)| !p.is_frozen()));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.fusion.d = 32;
        assert!(Model::new(0, &cfg, 16, DType::F32).is_err());
    }
}
