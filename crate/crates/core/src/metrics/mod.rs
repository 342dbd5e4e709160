//! Caption scoring: ROUGE-L and CIDEr-D, plus the per-type report.

mod report;

pub use report::{evaluate, read_predictions, MetricReport, Prediction, TypeScores};

use std::collections::{BTreeMap, BTreeSet};

use rust_stemmers::{Algorithm, Stemmer};

use crate::corpus::CaptionType;
use crate::error::{bail_data, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

/// Lowercased alphanumeric runs; everything else separates words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// [`words`] passed through the English Snowball stemmer.
pub fn stemmed_words(text: &str) -> Vec<String> {
    let stemmer = Stemmer::create(Algorithm::English);
    words(text).iter().map(|w| stemmer.stem(w).into_owned()).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure with recall weighted by `ROUGE_BETA`, maximised over
/// references.
pub fn rouge_l<T: PartialEq>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if candidate.is_empty() {
        bail_data!("ROUGE-L of an empty candidate");
    }
    if references.is_empty() {
        bail_data!("ROUGE-L needs at least one reference");
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let best = references
        .iter()
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let rec = lcs / r.len() as f64;
            let prec = lcs / candidate.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// Scoring key of one caption.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EvalKey {
    pub video_id: String,
    pub boundary_id: String,
    pub kind: CaptionType,
}

impl std::fmt::Display for EvalKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.video_id, self.boundary_id, self.kind.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub key: EvalKey,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

type Gram = Vec<String>;

struct Counts {
    by_n: Vec<BTreeMap<Gram, f64>>,
    len: usize,
}

fn counts(text: &str) -> Counts {
    let toks = stemmed_words(text);
    let by_n = (1..=CIDER_MAX_N)
        .map(|n| {
            let mut m = BTreeMap::new();
            for w in toks.windows(n) {
                *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
            m
        })
        .collect();
    Counts { by_n, len: toks.len() }
}

struct Weighted {
    by_n: Vec<BTreeMap<Gram, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn weigh(c: &Counts, df: &BTreeMap<Gram, f64>, log_docs: f64) -> Weighted {
    let by_n: Vec<BTreeMap<Gram, f64>> = c
        .by_n
        .iter()
        .map(|m| {
            m.iter()
                .map(|(g, &tf)| {
                    let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
                    (g.clone(), tf * (log_docs - d.ln()))
                })
                .collect()
        })
        .collect();
    let norms = by_n.iter().map(|m| m.values().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Weighted { by_n, norms, len: c.len }
}

fn similarity(cand: &Weighted, reference: &Weighted) -> f64 {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let (h, r) = (&cand.by_n[n], &reference.by_n[n]);
        let mut dot = 0.0;
        for (g, &hv) in h {
            if let Some(&rv) = r.get(g) {
                dot += hv.min(rv) * rv;
            }
        }
        let denom = cand.norms[n] * reference.norms[n];
        if denom != 0.0 {
            total += dot / denom * penalty;
        }
    }
    total / CIDER_MAX_N as f64
}

/// CIDEr-D over a corpus whose document frequencies come from the
/// references of every pair.
pub fn cider(pairs: &[EvalPair]) -> Result<CiderScores> {
    let keys: BTreeSet<&EvalKey> = pairs.iter().map(|p| &p.key).collect();
    if keys.len() != pairs.len() {
        bail_data!("CIDEr corpus has duplicate keys");
    }
    if keys.len() < 2 {
        bail_data!("CIDEr is undefined for a corpus of {} key(s)", keys.len());
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        bail_data!("{} has no references", p.key);
    }
    let refs: Vec<Vec<Counts>> = pairs.iter().map(|p| p.references.iter().map(|r| counts(r)).collect()).collect();
    let mut df: BTreeMap<Gram, f64> = BTreeMap::new();
    for set in &refs {
        let seen: BTreeSet<&Gram> = set.iter().flat_map(|c| c.by_n.iter().flat_map(|m| m.keys())).collect();
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (pairs.len() as f64).ln();
    let per_pair: Vec<f64> = pairs
        .iter()
        .zip(&refs)
        .map(|(p, set)| {
            let cand = weigh(&counts(&p.candidate), &df, log_docs);
            let sum: f64 = set.iter().map(|r| similarity(&cand, &weigh(r, &df, log_docs))).sum();
            sum / set.len() as f64 * CIDER_SCALE
        })
        .collect();
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(CiderScores { per_pair, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        words(s)
    }

    fn rl(c: &str, refs: &[&str]) -> f64 {
        rouge_l(&toks(c), &refs.iter().map(|r| toks(r)).collect::<Vec<_>>()).unwrap()
    }

    fn pair(id: &str, cand: &str, refs: &[&str]) -> EvalPair {
        EvalPair {
            key: EvalKey {
                video_id: id.into(),
                boundary_id: "b0".into(),
                kind: CaptionType::Subject,
            },
            candidate: cand.into(),
            references: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn rouge_hand_cases() {
        assert_eq!(rl("the red circle", &["the red circle"]), 1.0);
        // LCS 2, R = 1, P = 2/3.
        let f = 2.44 * (2.0 / 3.0) / (1.0 + 1.44 * 2.0 / 3.0);
        assert!((rl("the cat sat", &["the cat"]) - f).abs() < 1e-12);
        assert!((f - 0.829_931_972_789).abs() < 1e-9);
        assert_eq!(rl("a b c", &["x y"]), 0.0);
        // LCS "a c" of length 2 out of 4 and 3.
        let (r, p) = (2.0 / 3.0, 2.0 / 4.0);
        assert!((rl("a b c d", &["a x c"]) - 2.44 * r * p / (r + 1.44 * p)).abs() < 1e-12);
        assert_eq!(rl("a b", &["x", "a b"]), 1.0);
        assert!(rouge_l::<String>(&[], &[toks("a")]).is_err());
    }

    #[test]
    fn lcs_small() {
        assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
        assert_eq!(lcs_len(b"", b"abc"), 0);
    }

    #[test]
    fn stemming_and_case() {
        assert_eq!(stemmed_words("The circle MOVES, growing"), ["the", "circl", "move", "grow"]);
    }

    #[test]
    fn cider_identical_two_keys_is_ten() {
        let pairs = [
            pair("v0", "the red circle moves left", &["the red circle moves left"]),
            pair("v1", "a blue square grows big", &["a blue square grows big"]),
        ];
        let s = cider(&pairs).unwrap();
        for v in &s.per_pair {
            assert!((v - 10.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let pairs = [
            pair("v0", "zebra yak", &["the red circle"]),
            pair("v1", "a blue square", &["a blue square"]),
        ];
        assert_eq!(cider(&pairs).unwrap().per_pair[0], 0.0);
    }

    #[test]
    fn cider_degenerate_and_duplicate() {
        assert!(cider(&[pair("v0", "a", &["a"])]).is_err());
        assert!(cider(&[pair("v0", "a", &["a"]), pair("v0", "b", &["b"])]).is_err());
    }

    /// One-reference CIDEr-D written out directly from the definition.
    fn oracle(pairs: &[(&str, &str)]) -> Vec<f64> {
        let docs = pairs.len() as f64;
        let grams = |s: &str, n: usize| -> Vec<Vec<String>> { stemmed_words(s).windows(n).map(|w| w.to_vec()).collect() };
        pairs
            .iter()
            .map(|(c, r)| {
                let mut acc = 0.0;
                for n in 1..=4 {
                    let cg = grams(c, n);
                    let rg = grams(r, n);
                    let vocab: BTreeSet<Vec<String>> = cg.iter().chain(&rg).cloned().collect();
                    let idf = |g: &Vec<String>| {
                        let df = pairs.iter().filter(|(_, rr)| grams(rr, n).contains(g)).count().max(1);
                        docs.ln() - (df as f64).ln()
                    };
                    let tf = |v: &[Vec<String>], g: &Vec<String>| v.iter().filter(|x| *x == g).count() as f64;
                    let (mut dot, mut nc, mut nr) = (0.0, 0.0, 0.0);
                    for g in &vocab {
                        let (a, b) = (tf(&cg, g) * idf(g), tf(&rg, g) * idf(g));
                        dot += a.min(b) * b;
                        nc += a * a;
                        nr += b * b;
                    }
                    if nc > 0.0 && nr > 0.0 {
                        let d = stemmed_words(c).len() as f64 - stemmed_words(r).len() as f64;
                        acc += dot / (nc.sqrt() * nr.sqrt()) * (-d * d / 72.0).exp();
                    }
                }
                acc / 4.0 * 10.0
            })
            .collect()
    }

    const CORPUS: [(&str, &str); 4] = [
        ("the red circle moves to the left", "the red circle moves to the right"),
        ("the circle is red", "the circle is red"),
        ("a small blue square", "a blue square"),
        ("the green triangle grows large large", "the green triangle grows large"),
    ];

    #[test]
    fn cider_matches_direct_oracle() {
        let pairs: Vec<EvalPair> = CORPUS.iter().enumerate().map(|(i, (c, r))| pair(&format!("v{i}"), c, &[r])).collect();
        let got = cider(&pairs).unwrap();
        for (a, b) in got.per_pair.iter().zip(oracle(&CORPUS)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn adding_a_key_moves_scores_only_through_idf() {
        let mut extended = CORPUS.to_vec();
        extended.push(("purple hexagon", "purple hexagon"));
        let pairs: Vec<EvalPair> = extended.iter().enumerate().map(|(i, (c, r))| pair(&format!("v{i}"), c, &[r])).collect();
        let got = cider(&pairs).unwrap();
        let want = oracle(&extended);
        for (a, b) in got.per_pair.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let before = oracle(&CORPUS);
        assert!(got.per_pair[..4].iter().zip(&before).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn cider_order_invariant() {
        let pairs: Vec<EvalPair> = CORPUS.iter().enumerate().map(|(i, (c, r))| pair(&format!("v{i}"), c, &[r])).collect();
        let fwd = cider(&pairs).unwrap();
        let rev: Vec<EvalPair> = pairs.iter().rev().cloned().collect();
        let back = cider(&rev).unwrap();
        for (i, v) in fwd.per_pair.iter().enumerate() {
            assert!((v - back.per_pair[3 - i]).abs() < 1e-12);
        }
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn rouge_bounded_and_exact(c in sentence(), r in sentence()) {
            let v = rl(&c, &[&r]);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 1.0, c == r);
        }

        #[test]
        fn cider_bounded(corpus in prop::collection::vec((sentence(), sentence()), 2..6)) {
            let pairs: Vec<EvalPair> = corpus.iter().enumerate().map(|(i, (c, r))| pair(&format!("v{i}"), c, &[r])).collect();
            for v in cider(&pairs).unwrap().per_pair {
                prop_assert!((0.0..=10.0 + 1e-9).contains(&v));
            }
        }
    }
}
