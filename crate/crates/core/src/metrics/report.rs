use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cider, rouge_l, words, EvalKey, EvalPair};
use crate::corpus::{CaptionType, ManifestEntry};
use crate::error::{bail_data, Error, Result};

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub video_id: String,
    pub boundary_id: String,
    #[serde(rename = "type")]
    pub kind: CaptionType,
    pub rank: usize,
    pub caption: String,
    pub score: f64,
}

impl Prediction {
    pub fn key(&self) -> EvalKey {
        EvalKey {
            video_id: self.video_id.clone(),
            boundary_id: self.boundary_id.clone(),
            kind: self.kind,
        }
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read predictions {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("predictions line {}: {e}", i + 1)))
        })
        .collect()
}

/// Scores on the unit scale: CIDEr in [0, 10], ROUGE-L in [0, 1].
/// `cider` is `None` when the subset has fewer than two keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub pairs: usize,
    pub cider: Option<f64>,
    pub rouge_l: f64,
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<String>,
    pub omitted: Vec<String>,
    pub pooled: TypeScores,
    pub per_type: BTreeMap<String, TypeScores>,
}

fn score(pairs: &[EvalPair]) -> Result<TypeScores> {
    let mut rouge = 0.0;
    for p in pairs {
        let refs: Vec<Vec<String>> = p.references.iter().map(|r| words(r)).collect();
        let cand = words(&p.candidate);
        if cand.is_empty() {
            // An empty caption scores zero rather than aborting the report.
            continue;
        }
        rouge += rouge_l(&cand, &refs)?;
    }
    let rouge_l = rouge / pairs.len() as f64;
    let cider = if pairs.len() >= 2 { Some(cider(pairs)?.mean) } else { None };
    Ok(TypeScores {
        pairs: pairs.len(),
        cider,
        rouge_l,
        average: cider.map(|c| (c + rouge_l) / 2.0),
    })
}

/// Joins rank-0 predictions to manifest captions and scores them pooled and
/// per caption type.
pub fn evaluate(predictions: &[Prediction], manifest: &[ManifestEntry]) -> Result<MetricReport> {
    if manifest.is_empty() {
        bail_data!("cannot evaluate against an empty manifest");
    }
    let mut wanted: BTreeMap<EvalKey, Vec<String>> = BTreeMap::new();
    let mut order = Vec::new();
    for e in manifest {
        for kind in CaptionType::ALL {
            let key = EvalKey {
                video_id: e.video_id.clone(),
                boundary_id: e.boundary_id.clone(),
                kind,
            };
            let caption = match kind {
                CaptionType::Subject => &e.captions.subject,
                CaptionType::StatusBefore => &e.captions.status_before,
                CaptionType::StatusAfter => &e.captions.status_after,
            };
            if wanted.insert(key.clone(), vec![caption.clone()]).is_some() {
                bail_data!("manifest lists {key} twice");
            }
            order.push(key);
        }
    }
    let mut seen = BTreeSet::new();
    let mut top: BTreeMap<EvalKey, &str> = BTreeMap::new();
    for p in predictions {
        let key = p.key();
        if !wanted.contains_key(&key) {
            bail_data!("prediction for unknown key {key}");
        }
        if !seen.insert((key.clone(), p.rank)) {
            bail_data!("duplicate prediction for {key} at rank {}", p.rank);
        }
        if p.rank == 0 {
            top.insert(key, &p.caption);
        }
    }
    let missing: Vec<String> = order.iter().filter(|k| !top.contains_key(k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        bail_data!("missing rank-0 predictions for {} key(s): {}", missing.len(), missing.join(", "));
    }
    let pairs: Vec<EvalPair> = order
        .iter()
        .map(|k| EvalPair {
            key: k.clone(),
            candidate: top[k].to_string(),
            references: wanted[k].clone(),
        })
        .collect();
    let mut per_type = BTreeMap::new();
    for kind in CaptionType::ALL {
        let subset: Vec<EvalPair> = pairs.iter().filter(|p| p.key.kind == kind).cloned().collect();
        per_type.insert(kind.as_str().to_string(), score(&subset)?);
    }
    Ok(MetricReport {
        metrics: vec!["cider_d".into(), "rouge_l".into()],
        omitted: vec!["spice".into()],
        pooled: score(&pairs)?,
        per_type,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned table in the usual column order, scores ×100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("# SPICE is not computed; Avg. is the mean of CIDEr and ROUGE-L only.\n");
        let _ = writeln!(out, "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8}", "split", "pairs", "Avg.", "CIDEr", "SPICE", "ROUGE-L");
        let mut row = |name: &str, s: &TypeScores| {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8}",
                name,
                s.pairs,
                pct(s.average),
                pct(s.cider),
                "n/a",
                pct(Some(s.rouge_l))
            );
        };
        row("pooled", &self.pooled);
        for kind in CaptionType::ALL {
            if let Some(s) = self.per_type.get(kind.as_str()) {
                row(kind.as_str(), s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CaptionsEntry;

    fn entry(id: &str, subject: &str, before: &str, after: &str) -> ManifestEntry {
        ManifestEntry {
            video_id: id.into(),
            boundary_id: "b0".into(),
            frames_before: vec![],
            boundary_frame: String::new(),
            frames_after: vec![],
            seg_masks: vec![],
            tsn_before: String::new(),
            tsn_after: String::new(),
            captions: CaptionsEntry {
                subject: subject.into(),
                status_before: before.into(),
                status_after: after.into(),
            },
        }
    }

    fn truth(manifest: &[ManifestEntry]) -> Vec<Prediction> {
        manifest
            .iter()
            .flat_map(|e| {
                CaptionType::ALL.into_iter().map(move |kind| Prediction {
                    video_id: e.video_id.clone(),
                    boundary_id: e.boundary_id.clone(),
                    kind,
                    rank: 0,
                    caption: match kind {
                        CaptionType::Subject => e.captions.subject.clone(),
                        CaptionType::StatusBefore => e.captions.status_before.clone(),
                        CaptionType::StatusAfter => e.captions.status_after.clone(),
                    },
                    score: 0.0,
                })
            })
            .collect()
    }

    fn corpus() -> Vec<ManifestEntry> {
        vec![
            entry("v0", "a red circle", "the red circle is on the left", "the red circle moves to the right"),
            entry("v1", "a blue square", "the square is blue", "the square turns green"),
        ]
    }

    #[test]
    fn ground_truth_scores_perfect_rouge() {
        let m = corpus();
        let r = evaluate(&truth(&m), &m).unwrap();
        assert_eq!(r.pooled.rouge_l, 1.0);
        assert_eq!(r.pooled.pairs, 6);
        for s in r.per_type.values() {
            assert_eq!(s.rouge_l, 1.0);
            assert_eq!(s.average, Some((s.cider.unwrap() + 1.0) / 2.0));
        }
    }

    #[test]
    fn missing_and_duplicate_predictions() {
        let m = corpus();
        let mut p = truth(&m);
        p.remove(4);
        let err = evaluate(&p, &m).unwrap_err().to_string();
        assert!(err.contains("v1/b0/status_before"), "{err}");
        let mut p = truth(&m);
        p.push(p[0].clone());
        assert!(evaluate(&p, &m).is_err());
    }

    #[test]
    fn single_record_leaves_type_cider_undefined() {
        let m = corpus()[..1].to_vec();
        let r = evaluate(&truth(&m), &m).unwrap();
        assert!(r.per_type["subject"].cider.is_none());
        assert!(r.pooled.cider.is_some());
        assert!(r.to_table().contains("n/a"));
    }

    #[test]
    fn lower_ranks_ignored() {
        let m = corpus();
        let mut p = truth(&m);
        let base = evaluate(&p, &m).unwrap();
        let mut extra = p[0].clone();
        extra.rank = 1;
        extra.caption = "nothing alike".into();
        p.push(extra);
        assert_eq!(evaluate(&p, &m).unwrap(), base);
    }

    #[test]
    fn json_round_trip() {
        let m = corpus();
        let r = evaluate(&truth(&m), &m).unwrap();
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
    }
}
