//! Central finite-difference gradient checks in 64-bit.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{BoundaryRecord, CaptionTriplet, Frame, SegMask, TSN_DIM};
use crate::error::{bail_config, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{scalar_f64, Ctx, Param};
use crate::text::{TokenId, TokenSeq, BOS, EOS, SUBJ};
use crate::training::{batch_labels, caption_loss, contrastive_loss, LossWeights};

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub eps: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    /// Entries probed per parameter, spread evenly over its elements.
    pub max_entries: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-5,
            max_entries: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst: Option<EntryError>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel)
    }
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * (n - 1) / (max - 1)).collect()
    }
}

/// Compares the backward-pass gradient of the scalar `loss` against
/// central differences for sampled entries of every parameter.
pub fn check(params: &[(String, Param)], loss: &dyn Fn() -> Result<Tensor>, cfg: &CheckConfig) -> Result<GradReport> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.var().dtype() != DType::F64) {
        bail_config!("gradient check needs f64 parameters, {name} is not");
    }
    let grads = loss()?.backward()?;
    let mut report = GradReport::default();
    for (name, p) in params {
        if p.is_frozen() {
            bail_config!("{name} is frozen and has no gradient");
        }
        let analytic: Vec<f64> = match grads.get(p.var().as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; p.elem_count()],
        };
        let base = p.to_f64_vec()?;
        for i in probe_indices(base.len(), cfg.max_entries) {
            let central = |h: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] = base[i] + h;
                p.set_f64(&v)?;
                let up = scalar_f64(&loss()?)?;
                v[i] = base[i] - h;
                p.set_f64(&v)?;
                let down = scalar_f64(&loss()?)?;
                Ok((up - down) / (2.0 * h))
            };
            // One Richardson step cancels the h^2 term of the central difference.
            let (coarse, fine) = (central(cfg.eps)?, central(cfg.eps / 2.0)?);
            p.set_f64(&base)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if report.worst.as_ref().map_or(true, |w| rel > w.rel) {
                report.worst = Some(EntryError {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel,
                });
            }
        }
    }
    Ok(report)
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `<x, R>` for a fixed random `R` of the same shape.
struct Contraction(Tensor);

impl Contraction {
    fn new(rng: &mut ChaCha8Rng, like: &Tensor) -> Result<Self> {
        let r = Tensor::from_vec(normal(rng, like.elem_count(), 1.0), like.shape(), like.device())?;
        Ok(Self(r))
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x * &self.0)?.sum_all()?)
    }
}

fn input_param(t: &Tensor) -> Result<Param> {
    Ok(Param::new(Var::from_tensor(&t.detach())?))
}

/// A random record with `nb` / `na` side frames at the tiny resolution.
pub fn random_record(rng: &mut ChaCha8Rng, nb: usize, na: usize, res: usize, classes: u8) -> BoundaryRecord {
    let frame = |rng: &mut ChaCha8Rng| Frame::new(res, (0..3 * res * res).map(|_| rng.gen()).collect());
    let frames_before = (0..nb).map(|_| frame(rng)).collect();
    let boundary_frame = frame(rng);
    let frames_after = (0..na).map(|_| frame(rng)).collect();
    let seg_masks = (0..nb + 1 + na)
        .map(|_| SegMask::new(res, (0..res * res).map(|_| rng.gen_range(0..classes)).collect()))
        .collect();
    let tsn = |rng: &mut ChaCha8Rng| (0..TSN_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    BoundaryRecord {
        video_id: "grad".into(),
        boundary_id: "b0".into(),
        frames_before,
        boundary_frame,
        frames_after,
        seg_masks,
        tsn_before: tsn(rng),
        tsn_after: tsn(rng),
        captions: CaptionTriplet {
            subject: "a".into(),
            status_before: "b".into(),
            status_after: "c".into(),
        },
    }
}

const VOCAB: usize = 20;

fn tiny_model(seed: u64, lora: bool) -> Result<Model> {
    let mut cfg = ModelConfig::tiny();
    cfg.lora.enabled = lora;
    let model = Model::new(seed, &cfg, VOCAB, DType::F64)?;
    if lora {
        // Non-zero B so that gradients reach A as well.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
        for (name, p) in model.all_params() {
            if name.ends_with(".B") {
                p.set_f64(&normal(&mut rng, p.elem_count(), 0.1))?;
            }
        }
    }
    Ok(model)
}

fn named(model: &Model, keep: impl Fn(&str) -> bool) -> Vec<(String, Param)> {
    model.trainable_params().into_iter().filter(|(n, _)| keep(n)).collect()
}

pub fn encode_record(seed: u64, cfg: &CheckConfig) -> Result<GradReport> {
    let model = tiny_model(seed, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = random_record(&mut rng, 2, 3, model.config.encoder.resolution, 8);
    let inputs = model.prepare(&rec)?;
    let ctx = Ctx::eval();
    let first = model.vision.encode_record(&inputs.frames, &ctx)?;
    let rp = Contraction::new(&mut rng, &first.patch_tokens)?;
    let rc = Contraction::new(&mut rng, &first.cls)?;
    let loss = || -> Result<Tensor> {
        let f = model.vision.encode_record(&inputs.frames, &ctx)?;
        Ok((rp.apply(&f.patch_tokens)? + rc.apply(&f.cls)?)?)
    };
    check(&named(&model, |n| n.starts_with("vision.")), &loss, cfg)
}

/// Fusion parameters plus the frame features themselves, so the TPD
/// differences are exercised through the CLS input.
pub fn fuse(seed: u64, cfg: &CheckConfig) -> Result<GradReport> {
    let model = tiny_model(seed, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = random_record(&mut rng, 3, 2, model.config.encoder.resolution, 8);
    let inputs = model.prepare(&rec)?;
    let ctx = Ctx::eval();
    let feats = model.vision.encode_record(&inputs.frames, &ctx)?;
    let patches = input_param(&feats.patch_tokens)?;
    let cls = input_param(&feats.cls)?;
    let run = || -> Result<crate::fusion::FusedContext> {
        let f = crate::vision::FrameFeatures {
            patch_tokens: patches.t(),
            cls: cls.t(),
        };
        model.fusion.fuse(&f, &inputs.frames.sides, &inputs.tsn_before, &inputs.tsn_after, &ctx)
    };
    let first = run()?;
    let rt = Contraction::new(&mut rng, &first.tokens)?;
    let rp = Contraction::new(&mut rng, &first.pooled_cls)?;
    let loss = || -> Result<Tensor> {
        let out = run()?;
        Ok((rt.apply(&out.tokens)? + rp.apply(&out.pooled_cls)?)?)
    };
    let mut params = named(&model, |n| {
        n.starts_with("pool_frames.") || n.starts_with("pool_tpd.") || n.starts_with("tsn_proj.")
    });
    params.push(("input.patch_tokens".into(), patches.clone()));
    params.push(("input.cls".into(), cls.clone()));
    check(&params, &loss, cfg)
}

/// Cross-attention weights of the multimodal decoder and the visual memory
/// it attends to.
pub fn cross_attention(seed: u64, cfg: &CheckConfig) -> Result<GradReport> {
    let model = tiny_model(seed, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.decoder.d;
    let memory = Param::new(Var::from_vec(normal(&mut rng, 2 * 7 * d, 1.0), (2, 7, d), &Device::Cpu)?);
    let seqs: [&[TokenId]; 2] = [&[SUBJ, BOS, 9, 12, 10], &[SUBJ, BOS, 11]];
    let ctx = Ctx::eval();
    let first = model.multi.forward_seqs(&seqs, &memory.t(), &ctx)?;
    let r = Contraction::new(&mut rng, &first)?;
    let loss = || -> Result<Tensor> { r.apply(&model.multi.forward_seqs(&seqs, &memory.t(), &ctx)?) };
    let mut params = named(&model, |n| n.starts_with("multi.") && n.contains("cross"));
    if params.is_empty() {
        bail_config!("multimodal decoder exposes no cross-attention parameters");
    }
    params.push(("input.memory".into(), memory.clone()));
    check(&params, &loss, cfg)
}

pub fn lora_adapters(seed: u64, cfg: &CheckConfig) -> Result<GradReport> {
    let model = tiny_model(seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = random_record(&mut rng, 2, 2, model.config.encoder.resolution, 8);
    let inputs = model.prepare(&rec)?;
    let ctx = Ctx::eval();
    let first = model.vision.encode_record(&inputs.frames, &ctx)?;
    let rp = Contraction::new(&mut rng, &first.patch_tokens)?;
    let rc = Contraction::new(&mut rng, &first.cls)?;
    let loss = || -> Result<Tensor> {
        let f = model.vision.encode_record(&inputs.frames, &ctx)?;
        Ok((rp.apply(&f.patch_tokens)? + rc.apply(&f.cls)?)?)
    };
    check(&named(&model, |n| n.starts_with("lora.")), &loss, cfg)
}

/// The weighted contrastive + captioning objective over every trainable
/// parameter of a LoRA-adapted model.
pub fn total_loss(seed: u64, cfg: &CheckConfig) -> Result<GradReport> {
    let model = tiny_model(seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = model.config.encoder.resolution;
    let recs = [random_record(&mut rng, 1, 2, res, 8), random_record(&mut rng, 2, 1, res, 8)];
    let inputs = recs.iter().map(|r| model.prepare(r)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = inputs.iter().collect();
    let seqs = [
        TokenSeq::new(vec![SUBJ, BOS, 9, 10, EOS])?,
        TokenSeq::new(vec![SUBJ, BOS, 11, EOS])?,
    ];
    let ids: Vec<&[TokenId]> = seqs.iter().map(|s| s.ids()).collect();
    let labels = batch_labels(&seqs.iter().collect::<Vec<_>>());
    let w = LossWeights::default();
    let ctx = Ctx::eval();
    let loss = || -> Result<Tensor> {
        let out = model.forward(&refs, &ids, &ctx)?;
        let cap = caption_loss(&out.logits, &labels)?.loss;
        let con = contrastive_loss(&out.image_cls, &out.text_cls, &model.temperature.t())?;
        Ok(((cap * w.lambda_cap)? + (con * w.lambda_con)?)?)
    };
    let params = named(&model, |_| true);
    check(&params, &loss, &CheckConfig { max_entries: 2, ..*cfg })
}

/// Every scenario of the suite, by name.
pub fn suite(seed: u64, cfg: &CheckConfig) -> Result<Vec<(&'static str, GradReport)>> {
    Ok(vec![
        ("encode_record", encode_record(seed, cfg)?),
        ("fuse", fuse(seed, cfg)?),
        ("cross_attention", cross_attention(seed, cfg)?),
        ("lora_adapters", lora_adapters(seed, cfg)?),
        ("total_loss", total_loss(seed, cfg)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Param::new(Var::from_vec(vec![1.0f64, -2.0, 0.5], 3, &Device::Cpu).unwrap());
        let loss = || -> Result<Tensor> { Ok((p.t().sqr()?.sum_all()? * 1.5)?) };
        let r = check(&[("x".into(), p.clone())], &loss, &CheckConfig::default()).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel() < 1e-8);
        assert_eq!(p.to_f64_vec().unwrap(), [1.0, -2.0, 0.5]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The detached factor hides half of the true derivative.
        let p = Param::new(Var::from_vec(vec![2.0f64], 1, &Device::Cpu).unwrap());
        let loss = || -> Result<Tensor> { Ok((p.t() * p.t().detach())?.sum_all()?) };
        let r = check(&[("x".into(), p.clone())], &loss, &CheckConfig::default()).unwrap();
        assert!(r.max_rel() > 0.4);
    }

    #[test]
    fn rejects_f32() {
        let p = Param::new(Var::from_vec(vec![1.0f32], 1, &Device::Cpu).unwrap());
        let loss = || -> Result<Tensor> { Ok(p.t().sum_all()?) };
        assert!(check(&[("x".into(), p.clone())], &loss, &CheckConfig::default()).is_err());
    }

    #[test]
    fn probe_spread() {
        assert_eq!(probe_indices(3, 6), [0, 1, 2]);
        assert_eq!(probe_indices(11, 3), [0, 5, 10]);
    }
}
