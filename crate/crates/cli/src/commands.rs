use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gebc_core::config::{EvalSplit, RunConfig};
use gebc_core::corpus::{load_manifest, read_manifest_entries, synth_corpus, CaptionType, MANIFEST_FILE};
use gebc_core::generation::{decode, ContextScorer, GenConfig};
use gebc_core::metrics::{evaluate as score, read_predictions, Prediction};
use gebc_core::nn::Ctx;
use gebc_core::text::detokenize;
use gebc_core::training::{load_checkpoint, read_metrics, smoothed_loss, split_indices, Trainer, METRICS_FILE};
use gebc_core::{Error, Result};
use serde_json::json;

use super::{Common, EvaluateArgs, GenerateArgs, ReportArgs, SynthArgs, TrainArgs};

const SMOOTHING: u64 = 100;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} is not a directory", path.display())))
    }
}

fn parse_split(s: &str) -> Result<EvalSplit> {
    match s {
        "all" => Ok(EvalSplit::All),
        "validation" => Ok(EvalSplit::Validation),
        _ => Err(Error::Config(format!("unknown split {s:?}, expected all or validation"))),
    }
}

fn split_name(split: EvalSplit) -> &'static str {
    match split {
        EvalSplit::All => "all",
        EvalSplit::Validation => "validation",
    }
}

fn selected(n: usize, split: EvalSplit) -> Vec<usize> {
    match split {
        EvalSplit::All => (0..n).collect(),
        EvalSplit::Validation => split_indices(n).1,
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.n {
        cfg.corpus.records = n;
    }
    cfg.validate()?;
    let entries = synth_corpus(cfg.seed, cfg.corpus.records, &cfg.corpus.synth, &a.out)?;
    println!("wrote {} records to {}", entries.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.train.warmup_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    require_dir(&a.data, "data directory")?;
    let records = load_manifest(&a.data)?;
    let mut trainer = if a.resume {
        Trainer::resume(&records, &out)?
    } else {
        cfg.validate()?;
        fs::create_dir_all(&out)?;
        fs::write(out.join("config.json"), cfg.to_json())?;
        Trainer::new(&records, &cfg.model(), &cfg.training())?
    };
    let start = trainer.step_index();
    let outcome = trainer.run(Some(&out), a.stop_at, &mut |log| {
        if let Some(acc) = log.val_acc {
            eprintln!("step {:>6}  l_total {:.4}  lr {:.2e}  val_acc {:.4}", log.step, log.l_total, log.lr, acc);
        }
    })?;
    println!(
        "trained steps {}..{}; best val_acc {:.4} at step {}; run directory {}",
        start + 1,
        outcome.final_step,
        outcome.best_acc,
        outcome.best_step,
        out.display()
    );
    Ok(())
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(p) = &a.gen_config {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read decoding config {}: {e}", p.display())))?;
        cfg.gen = serde_json::from_str::<GenConfig>(&text).map_err(|e| Error::Config(format!("decoding config: {e}")))?;
    }
    if let Some(v) = a.beam_size {
        cfg.gen.beam_size = v;
    }
    if let Some(v) = a.beam_groups {
        cfg.gen.beam_groups = v;
    }
    if let Some(v) = a.diversity_penalty {
        cfg.gen.diversity_penalty = v;
    }
    if let Some(v) = a.max_len {
        cfg.gen.max_len = v;
    }
    if let Some(s) = &a.split {
        cfg.eval.split = parse_split(s)?;
    }
    cfg.gen.validate()?;
    require_dir(&a.data, "data directory")?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let records = load_manifest(&a.data)?;
    let chosen = selected(records.len(), cfg.eval.split);
    let mut lines = String::new();
    let mut count = 0usize;
    for &i in &chosen {
        let rec = &records[i];
        let inputs = ckpt.model.prepare(rec)?;
        let context = ckpt.model.context(&[&inputs], &Ctx::eval())?;
        let scorer = ContextScorer {
            model: &ckpt.model,
            context,
        };
        for kind in CaptionType::ALL {
            for (rank, h) in decode(&scorer, kind, &cfg.gen)?.iter().enumerate() {
                let p = Prediction {
                    video_id: rec.video_id.clone(),
                    boundary_id: rec.boundary_id.clone(),
                    kind,
                    rank,
                    caption: detokenize(h.generated(), &ckpt.vocab),
                    score: h.score,
                };
                lines.push_str(&serde_json::to_string(&p)?);
                lines.push('\n');
                count += 1;
            }
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, lines)?;
    let meta = json!({
        "checkpoint": a.ckpt.display().to_string(),
        "checkpoint_step": ckpt.meta.step,
        "gen": cfg.gen,
        "split": split_name(cfg.eval.split),
        "records": chosen.len(),
        "predictions": count,
    });
    fs::write(meta_path(&a.out), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!("wrote {count} predictions for {} records to {}", chosen.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = &a.split {
        cfg.eval.split = parse_split(s)?;
    }
    require_dir(&a.data, "data directory")?;
    let entries = read_manifest_entries(&a.data.join(MANIFEST_FILE))?;
    let chosen: Vec<_> = selected(entries.len(), cfg.eval.split).into_iter().map(|i| entries[i].clone()).collect();
    let preds = read_predictions(&a.pred)?;
    let report = score(&preds, &chosen)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.json"), report.to_json())?;
    let table = report.to_table();
    fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn report(a: ReportArgs) -> Result<()> {
    let path = if a.metrics.is_dir() { a.metrics.join(METRICS_FILE) } else { a.metrics.clone() };
    let history = read_metrics(&path)?;
    let Some(last) = history.last() else {
        return Err(Error::Data(format!("{} has no rows", path.display())));
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>7} {:>10} {:>8} {:>8} {:>8} {:>12} {:>8}",
        "step", "lr", "l_con", "l_cap", "l_total", "l_total_avg", "val_acc"
    );
    for l in history.iter().filter(|l| l.val_acc.is_some() || l.step == last.step) {
        let _ = writeln!(
            out,
            "{:>7} {:>10.3e} {:>8.4} {:>8.4} {:>8.4} {:>12} {:>8}",
            l.step,
            l.lr,
            l.l_con,
            l.l_cap,
            l.l_total,
            fmt_opt(smoothed_loss(&history, l.step, SMOOTHING)),
            fmt_opt(l.val_acc)
        );
    }
    let best = history
        .iter()
        .filter_map(|l| l.val_acc.map(|a| (a, l.step)))
        .fold(None, |acc: Option<(f64, u64)>, (a, s)| match acc {
            Some((b, _)) if b >= a => acc,
            _ => Some((a, s)),
        });
    if let Some((acc, step)) = best {
        let _ = writeln!(out, "best val_acc {acc:.4} at step {step}");
    }
    let early = smoothed_loss(&history, SMOOTHING, SMOOTHING);
    let late = smoothed_loss(&history, last.step, SMOOTHING);
    if let (Some(e), Some(l)) = (early, late) {
        let _ = writeln!(
            out,
            "{SMOOTHING}-step mean l_total: {e:.4} at step {SMOOTHING}, {l:.4} at step {} (ratio {:.4})",
            last.step,
            l / e
        );
    }
    match &a.out {
        Some(p) => fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}
