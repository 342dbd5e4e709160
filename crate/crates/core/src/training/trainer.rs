use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{caption_loss, contrastive_loss};
use super::optim::Optimizer;
use super::{lr_schedule, LossBreakdown, TrainConfig};
use crate::corpus::{BoundaryRecord, CaptionType};
use crate::error::{bail_config, bail_data, Error, Result};
use crate::model::{Model, ModelConfig, RecordInputs};
use crate::nn::{scalar_f64, Ctx, Param};
use crate::serialization::{self, NamedTensorMap};
use crate::text::{build_target, TokenId, TokenSeq, Vocab, PAD};

pub const BEST_CHECKPOINT: &str = "best.rvtc";
pub const LAST_CHECKPOINT: &str = "last.rvtc";
pub const LAST_OPTIMIZER: &str = "last.optim.rvtc";
pub const METRICS_FILE: &str = "metrics.csv";
const METRICS_HEADER: &str = "step,l_con,l_cap,l_total,val_acc,lr";
const EVAL_CHUNK: usize = 24;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic 90/10 split: record `i` is held out when
/// `splitmix64(i) % 10 == 0`.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| splitmix64(i as u64) % 10 != 0)
}

/// Decoder input (target without its last token) and the labels it is
/// scored against. The first label, which would be BOS, is masked: BOS
/// always follows the control token and is given at generation time.
pub fn teacher_forcing(target: &TokenSeq) -> (&[TokenId], Vec<TokenId>) {
    let ids = target.ids();
    let mut labels = ids[1..].to_vec();
    labels[0] = PAD;
    (&ids[..ids.len() - 1], labels)
}

/// Batch labels right-padded to the longest input, flattened row-major.
pub fn batch_labels(targets: &[&TokenSeq]) -> Vec<TokenId> {
    let width = targets.iter().map(|t| t.len() - 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(width * targets.len());
    for t in targets {
        let (_, labels) = teacher_forcing(t);
        out.extend(labels.iter().copied().chain(std::iter::repeat(PAD)).take(width));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_con: f64,
    pub l_cap: f64,
    pub l_total: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Batches and dropout masks are pure functions of `(seed, step)`, so the
    /// next step index is the whole generator state.
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config: RunSettings,
    pub best_acc: f64,
    pub best_step: u64,
    pub rng_state: RngState,
    pub vocab: BTreeMap<String, TokenId>,
}

pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let mut map = model.to_tensor_map()?;
    map.set_meta(serde_json::to_string(meta)?);
    write_atomic(path, &map)
}

fn write_atomic(path: &Path, map: &NamedTensorMap) -> Result<()> {
    let tmp = path.with_extension("rvtc.tmp");
    serialization::save(map, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let map = serialization::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(map.meta())
        .map_err(|e| Error::Config(format!("checkpoint {} has invalid metadata: {e}", path.display())))?;
    let vocab = Vocab::from_json(&serde_json::to_string(&meta.vocab)?)?;
    let mut model_cfg = meta.config.model.clone();
    // Adapters are recreated empty and then overwritten from the map.
    model_cfg.decoder.vocab_size = vocab.len();
    let model = Model::new(meta.config.train.seed, &model_cfg, vocab.len(), DType::F32)?;
    model.load_tensor_map(&map)?;
    Ok(Checkpoint { model, vocab, meta })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_acc: f64,
    pub best_step: u64,
    pub final_step: u64,
    pub history: Vec<StepLog>,
}

pub struct Trainer {
    model: Model,
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    optimizer: Optimizer,
    trainable: Vec<(String, Param)>,
    inputs: Vec<RecordInputs>,
    targets: Vec<[TokenSeq; 3]>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    step: u64,
    best_acc: f64,
    best_step: u64,
    history: Vec<StepLog>,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh run; the vocabulary is built from every record's captions.
    pub fn new(records: &[BoundaryRecord], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::from_captions(records.iter().map(|r| &r.captions));
        let model = Model::new(cfg.seed, model_cfg, vocab.len(), DType::F32)?;
        model.set_temperature(cfg.temperature_init)?;
        Self::assemble(records, model, vocab, cfg.clone(), Optimizer::new(cfg.optimizer.clone())?)
    }

    /// Continues the run whose `last` checkpoint and optimizer state live in
    /// `dir`, on the same records.
    pub fn resume(records: &[BoundaryRecord], dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(&dir.join(LAST_CHECKPOINT))?;
        let cfg = ckpt.meta.config.train.clone();
        let optimizer = Optimizer::load_tensor_map(cfg.optimizer.clone(), &serialization::load(dir.join(LAST_OPTIMIZER))?)?;
        let mut trainer = Self::assemble(records, ckpt.model, ckpt.vocab, cfg, optimizer)?;
        trainer.step = ckpt.meta.step;
        trainer.best_acc = ckpt.meta.best_acc;
        trainer.best_step = ckpt.meta.best_step;
        trainer.history = read_metrics(&dir.join(METRICS_FILE))?
            .into_iter()
            .filter(|l| l.step <= trainer.step)
            .collect();
        Ok(trainer)
    }

    fn assemble(records: &[BoundaryRecord], model: Model, vocab: Vocab, cfg: TrainConfig, optimizer: Optimizer) -> Result<Self> {
        let (train_idx, val_idx) = split_indices(records.len());
        if train_idx.is_empty() || val_idx.is_empty() {
            bail_data!(
                "{} records give {} training and {} validation records; both splits must be non-empty",
                records.len(),
                train_idx.len(),
                val_idx.len()
            );
        }
        if train_idx.len() < cfg.batch_size {
            bail_config!("batch size {} exceeds the {} training records", cfg.batch_size, train_idx.len());
        }
        let inputs = records.iter().map(|r| model.prepare(r)).collect::<Result<Vec<_>>>()?;
        let targets = records
            .iter()
            .map(|r| -> Result<[TokenSeq; 3]> {
                Ok([
                    build_target(&r.captions, CaptionType::Subject, &vocab)?,
                    build_target(&r.captions, CaptionType::StatusBefore, &vocab)?,
                    build_target(&r.captions, CaptionType::StatusAfter, &vocab)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model_cfg: model.config.clone(),
            trainable: model.trainable_params(),
            model,
            vocab,
            cfg,
            optimizer,
            inputs,
            targets,
            train_idx,
            val_idx,
            step: 0,
            best_acc: 0.0,
            best_step: 0,
            history: Vec::new(),
            epoch_cache: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn split(&self) -> (&[usize], &[usize]) {
        (&self.train_idx, &self.val_idx)
    }

    fn rng(&self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ purpose);
        rng.set_stream(index);
        rng
    }

    /// Training records of the 1-based `step`: consecutive slices of
    /// per-epoch shuffles of the training split.
    fn batch_for(&mut self, step: u64) -> Vec<usize> {
        let n = self.train_idx.len() as u64;
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|k| {
                let pos = (step - 1) * b + k;
                let epoch = pos / n;
                if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut order = self.train_idx.clone();
                    order.shuffle(&mut self.rng(0xBA7C_0000, epoch));
                    self.epoch_cache = Some((epoch, order));
                }
                self.epoch_cache.as_ref().expect("filled above").1[(pos % n) as usize]
            })
            .collect()
    }

    /// Loss breakdown of a teacher-forced batch; the returned tensor is the
    /// differentiable total.
    fn batch_loss(&self, records: &[usize], kinds: &[usize], ctx: &Ctx) -> Result<(candle_core::Tensor, LossBreakdown)> {
        let inputs: Vec<&RecordInputs> = records.iter().map(|&i| &self.inputs[i]).collect();
        let seqs: Vec<&TokenSeq> = records.iter().zip(kinds).map(|(&i, &k)| &self.targets[i][k]).collect();
        let ids: Vec<&[TokenId]> = seqs.iter().map(|s| s.ids()).collect();
        let out = self.model.forward(&inputs, &ids, ctx)?;
        let cap = caption_loss(&out.logits, &batch_labels(&seqs))?;
        let w = self.cfg.loss;
        let (total, l_con) = if w.lambda_con > 0.0 && records.len() >= 2 {
            let con = contrastive_loss(&out.image_cls, &out.text_cls, &self.model.temperature.t())?;
            let l_con = scalar_f64(&con)?;
            (((&cap.loss * w.lambda_cap)? + (con * w.lambda_con)?)?, l_con)
        } else {
            ((&cap.loss * w.lambda_cap)?, 0.0)
        };
        let l_cap = scalar_f64(&cap.loss)?;
        let l_total = scalar_f64(&total)?;
        Ok((
            total,
            LossBreakdown {
                l_con,
                l_cap,
                l_total,
                token_top1_acc: cap.accuracy(),
            },
        ))
    }

    /// One optimizer step. Every record of the batch gets the same caption
    /// type, cycling subject → before → after across steps.
    pub fn step_once(&mut self) -> Result<(StepLog, LossBreakdown)> {
        let step = self.step + 1;
        let batch = self.batch_for(step);
        let kind = ((step - 1) % 3) as usize;
        let ctx = Ctx::train(self.rng(0xD20F_0000, step));
        let (loss, parts) = self.batch_loss(&batch, &vec![kind; batch.len()], &ctx)?;
        if !parts.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: l_con={} l_cap={} l_total={}",
                parts.l_con, parts.l_cap, parts.l_total
            )));
        }
        let grads = loss.backward()?;
        let lr = lr_schedule(step, self.cfg.steps, self.cfg.warmup_steps, self.cfg.lr);
        self.optimizer
            .step(&self.trainable, &grads, lr)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        self.model.clamp_temperature()?;
        self.step = step;
        let log = StepLog {
            step,
            l_con: parts.l_con,
            l_cap: parts.l_cap,
            l_total: parts.l_total,
            val_acc: None,
            lr,
        };
        self.history.push(log);
        Ok((log, parts))
    }

    /// Teacher-forced top-1 token accuracy pooled over every validation
    /// record and all three caption types.
    pub fn evaluate(&self) -> Result<f64> {
        let pairs: Vec<(usize, usize)> = self.val_idx.iter().flat_map(|&i| (0..3).map(move |k| (i, k))).collect();
        evaluate_pairs(&self.model, &self.inputs, &self.targets, &pairs)
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            step: self.step,
            config: RunSettings {
                model: self.model_cfg.clone(),
                train: self.cfg.clone(),
            },
            best_acc: self.best_acc,
            best_step: self.best_step,
            rng_state: RngState {
                seed: self.cfg.seed,
                next_step: self.step + 1,
            },
            vocab: serde_json::from_str(&self.vocab.to_json()).expect("vocabulary JSON is a string map"),
        }
    }

    fn save_last(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&dir.join(LAST_CHECKPOINT), &self.model, &self.meta())?;
        write_atomic(&dir.join(LAST_OPTIMIZER), &self.optimizer.to_tensor_map()?)?;
        write_metrics(&dir.join(METRICS_FILE), &self.history)
    }

    /// Trains up to `stop_at` (default: the configured step count),
    /// evaluating every `eval_interval` steps and at the end. With `dir`,
    /// the best checkpoint, the last checkpoint with optimizer state, and
    /// the metrics CSV are written there.
    pub fn run(&mut self, dir: Option<&Path>, stop_at: Option<u64>, on_step: &mut dyn FnMut(&StepLog)) -> Result<TrainOutcome> {
        let end = stop_at.unwrap_or(self.cfg.steps).min(self.cfg.steps);
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        while self.step < end {
            let (mut log, _) = self.step_once()?;
            let at_eval = log.step % self.cfg.eval_interval == 0 || log.step == end;
            if at_eval {
                let acc = self.evaluate()?;
                log.val_acc = Some(acc);
                *self.history.last_mut().expect("just pushed") = log;
                if acc > self.best_acc || self.best_step == 0 {
                    self.best_acc = acc;
                    self.best_step = log.step;
                    if let Some(d) = dir {
                        save_checkpoint(&d.join(BEST_CHECKPOINT), &self.model, &self.meta())?;
                    }
                }
                if let Some(d) = dir {
                    self.save_last(d)?;
                }
            }
            on_step(&log);
        }
        Ok(TrainOutcome {
            best_acc: self.best_acc,
            best_step: self.best_step,
            final_step: self.step,
            history: self.history.clone(),
        })
    }
}

fn evaluate_pairs(model: &Model, inputs: &[RecordInputs], targets: &[[TokenSeq; 3]], pairs: &[(usize, usize)]) -> Result<f64> {
    let ctx = Ctx::eval();
    let (mut correct, mut counted) = (0, 0);
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let recs: Vec<&RecordInputs> = chunk.iter().map(|&(i, _)| &inputs[i]).collect();
        let seqs: Vec<&TokenSeq> = chunk.iter().map(|&(i, k)| &targets[i][k]).collect();
        let ids: Vec<&[TokenId]> = seqs.iter().map(|s| s.ids()).collect();
        let fused = model.context(&recs, &ctx)?;
        let prefixes: Vec<&[TokenId]> = ids.iter().map(|t| &t[..t.len() - 1]).collect();
        let logits = model
            .multi
            .forward(&crate::text::TokenBatch::new(&prefixes), &fused.tokens, &ctx)?;
        let cap = caption_loss(&logits, &batch_labels(&seqs))?;
        correct += cap.correct;
        counted += cap.counted;
    }
    Ok(correct as f64 / counted.max(1) as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_metrics(path: &Path, history: &[StepLog]) -> Result<()> {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for l in history {
        writeln!(out, "{},{},{},{},{},{}", l.step, l.l_con, l.l_cap, l.l_total, fmt_opt(l.val_acc), l.lr).expect("String write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail_data!("{} does not start with the metrics header", path.display());
    }
    let bad = |n: usize| Error::Data(format!("{}: malformed metrics row {n}", path.display()));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(n + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 2));
            Ok(StepLog {
                step: f[0].parse().map_err(|_| bad(n + 2))?,
                l_con: num(f[1])?,
                l_cap: num(f[2])?,
                l_total: num(f[3])?,
                val_acc: if f[4].is_empty() { None } else { Some(num(f[4])?) },
                lr: num(f[5])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::text::{BOS, EOS, SUBJ};

    #[test]
    fn split_is_deterministic_and_roughly_tenth() {
        let (train, val) = split_indices(1000);
        assert_eq!(train.len() + val.len(), 1000);
        assert!((70..=130).contains(&val.len()), "{}", val.len());
        assert_eq!(split_indices(1000).1, val);
        let (_, val64) = split_indices(64);
        assert!(!val64.is_empty());
    }

    #[test]
    fn teacher_forcing_masks_bos_label() {
        let seq = TokenSeq::new(vec![SUBJ, BOS, 9, 10, EOS]).unwrap();
        let (input, labels) = teacher_forcing(&seq);
        assert_eq!(input, &[SUBJ, BOS, 9, 10]);
        assert_eq!(labels, vec![PAD, 9, 10, EOS]);
    }

    fn tiny_setup(n: usize) -> (Vec<BoundaryRecord>, ModelConfig, TrainConfig) {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            resolution: 8,
            ..SynthConfig::default()
        };
        synth_corpus(7, n, &synth, dir.path()).unwrap();
        let records = crate::corpus::load_manifest(dir.path()).unwrap();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 4,
            warmup_steps: 2,
            lr: 1e-3,
            eval_interval: 3,
            ..TrainConfig::default()
        };
        (records, ModelConfig::tiny(), cfg)
    }

    #[test]
    fn total_is_weighted_sum_and_runs_are_deterministic() {
        let (records, mcfg, cfg) = tiny_setup(24);
        let mut a = Trainer::new(&records, &mcfg, &cfg).unwrap();
        let mut b = Trainer::new(&records, &mcfg, &cfg).unwrap();
        for _ in 0..4 {
            let (la, pa) = a.step_once().unwrap();
            let (lb, _) = b.step_once().unwrap();
            assert_eq!(la, lb);
            assert!((pa.l_total - (0.1 * pa.l_con + pa.l_cap)).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&pa.token_top1_acc));
        }
    }

    #[test]
    fn frozen_base_weights_unchanged_and_adapters_move() {
        let (records, mcfg, cfg) = tiny_setup(24);
        let mut t = Trainer::new(&records, &mcfg, &cfg).unwrap();
        let frozen: Vec<(String, Vec<f32>)> = t
            .model()
            .all_params()
            .into_iter()
            .filter(|(_, p)| p.is_frozen())
            .map(|(n, p)| (n, p.to_f32_vec().unwrap()))
            .collect();
        assert!(!frozen.is_empty());
        let b_before: Vec<f32> = t.model().all_params().into_iter().find(|(n, _)| n == "lora.vision.L0.q.B").unwrap().1.to_f32_vec().unwrap();
        for _ in 0..3 {
            t.step_once().unwrap();
        }
        let now: BTreeMap<String, Vec<f32>> = t.model().all_params().into_iter().map(|(n, p)| (n, p.to_f32_vec().unwrap())).collect();
        for (name, v) in &frozen {
            assert_eq!(&now[name], v, "{name} changed");
        }
        assert_ne!(now["lora.vision.L0.q.B"], b_before);
    }

    #[test]
    fn resume_continues_identically() {
        let (records, mcfg, cfg) = tiny_setup(24);
        let full = Trainer::new(&records, &mcfg, &cfg).unwrap().run(None, None, &mut |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Trainer::new(&records, &mcfg, &cfg).unwrap().run(Some(dir.path()), Some(3), &mut |_| {}).unwrap();
        let mut resumed = Trainer::resume(&records, dir.path()).unwrap();
        assert_eq!(resumed.step_index(), 3);
        let out = resumed.run(Some(dir.path()), None, &mut |_| {}).unwrap();
        assert_eq!(out.history.len(), 6);
        for (a, b) in out.history.iter().zip(&full.history) {
            assert_eq!(a.step, b.step);
            assert!((a.l_total - b.l_total).abs() < 1e-12, "step {}: {} vs {}", a.step, a.l_total, b.l_total);
        }
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 6);
        let best = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(best.meta.best_acc, out.best_acc);
        assert_eq!(best.meta.step, out.best_step);
    }

    #[test]
    fn tiny_corpus_split_error() {
        let (records, mcfg, cfg) = tiny_setup(24);
        assert!(matches!(Trainer::new(&records[1..3], &mcfg, &cfg), Err(Error::Data(_)) | Err(Error::Config(_))));
    }
}
