//! Greedy, beam and diverse (grouped, Hamming-penalized) beam decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::CaptionType;
use crate::error::{bail_config, Result};
use crate::fusion::FusedContext;
use crate::model::Model;
use crate::text::{control_token, TokenId, TokenSeq, AFT, BEF, BOS, CLS_TXT, EOS, MAX_TOKENS, PAD, SUBJ};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub max_len: usize,
    pub beam_size: usize,
    pub beam_groups: usize,
    pub diversity_penalty: f64,
    pub length_penalty_exponent: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_len: MAX_TOKENS,
            beam_size: 10,
            beam_groups: 5,
            diversity_penalty: 0.5,
            length_penalty_exponent: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            bail_config!("generate.beam_size must be at least 1");
        }
        if self.beam_groups == 0 || self.beam_size % self.beam_groups != 0 {
            bail_config!(
                "generate.beam_size ({}) must be divisible by generate.beam_groups ({})",
                self.beam_size,
                self.beam_groups
            );
        }
        if !(3..=MAX_TOKENS).contains(&self.max_len) {
            bail_config!("generate.max_len must be in 3..={MAX_TOKENS}");
        }
        if self.diversity_penalty < 0.0 {
            bail_config!("generate.diversity_penalty must be non-negative");
        }
        Ok(())
    }
}

/// Next-token scoring over a batch of equal-length prefixes.
pub trait StepModel {
    /// Log-probabilities `[N, V]` for the token following each prefix.
    fn next_logprobs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;

    /// Whether `token` may be generated.
    fn allowed(&self, _token: TokenId) -> bool {
        true
    }
}

/// A trained model bound to one record's fused context.
pub struct ContextScorer<'a> {
    pub model: &'a Model,
    pub context: FusedContext,
}

impl StepModel for ContextScorer<'_> {
    fn next_logprobs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .model
            .next_logprobs(&self.context, prefixes)?
            .into_iter()
            .map(|row| row.into_iter().map(f64::from).collect())
            .collect())
    }

    /// Structural tokens never appear inside a caption.
    fn allowed(&self, token: TokenId) -> bool {
        !matches!(token, PAD | BOS | CLS_TXT | SUBJ | BEF | AFT)
    }
}

/// A finished (or length-capped) candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub seq: TokenSeq,
    /// Sum of generated-token log-probabilities, without diversity penalty.
    pub logprob: f64,
    /// `logprob / generated_len^exponent`.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens after `[type, BOS]`, EOS included when present.
    pub fn generated(&self) -> &[TokenId] {
        &self.seq.ids()[2..]
    }
}

pub fn length_normalized(logprob: f64, generated_len: usize, exponent: f64) -> f64 {
    logprob / (generated_len.max(1) as f64).powf(exponent)
}

/// Descending score, then ascending token ids.
fn rank_order(a_score: f64, a: &[TokenId], b_score: f64, b: &[TokenId]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

fn start(kind: CaptionType) -> Vec<TokenId> {
    vec![control_token(kind), BOS]
}

/// Argmax decoding, ties to the lowest id; scored like a beam hypothesis.
pub fn greedy_decode(model: &dyn StepModel, kind: CaptionType, cfg: &GenConfig) -> Result<Hypothesis> {
    let mut tokens = start(kind);
    let mut logprob = 0.0;
    while tokens.len() < cfg.max_len {
        let lp = model.next_logprobs(&[&tokens])?.remove(0);
        let mut best: Option<(TokenId, f64)> = None;
        for (v, &x) in lp.iter().enumerate() {
            let v = v as TokenId;
            if model.allowed(v) && x.is_finite() && best.map_or(true, |(_, b)| x > b) {
                best = Some((v, x));
            }
        }
        let Some((v, x)) = best else { break };
        tokens.push(v);
        logprob += x;
        if v == EOS {
            break;
        }
    }
    let n = tokens.len() - 2;
    Ok(Hypothesis {
        seq: TokenSeq::new(tokens)?,
        logprob,
        score: length_normalized(logprob, n, cfg.length_penalty_exponent),
    })
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    logprob: f64,
}

struct Group {
    size: usize,
    beams: Vec<Beam>,
    finished: Vec<Hypothesis>,
    done: bool,
}

impl Group {
    fn add_finished(&mut self, tokens: Vec<TokenId>, logprob: f64, exponent: f64) -> Result<()> {
        let n = tokens.len() - 2;
        self.finished.push(Hypothesis {
            seq: TokenSeq::new(tokens)?,
            logprob,
            score: length_normalized(logprob, n, exponent),
        });
        self.finished
            .sort_by(|a, b| rank_order(a.score, a.seq.ids(), b.score, b.seq.ids()));
        self.finished.truncate(self.size);
        Ok(())
    }
}

/// Standard length-normalized beam search (one group, no penalty).
pub fn beam_decode(model: &dyn StepModel, kind: CaptionType, cfg: &GenConfig) -> Result<Vec<Hypothesis>> {
    let cfg = GenConfig {
        beam_groups: 1,
        ..cfg.clone()
    };
    diverse_beam_decode(model, kind, &cfg)
}

/// Grouped beam search. Groups advance in order at every step; group `g`'s
/// candidate log-probabilities are lowered by `diversity_penalty` times the
/// number of times each token was just chosen by groups before it. Stored
/// and final scores exclude the penalty. Returns up to `beam_size`
/// hypotheses, best first.
pub fn diverse_beam_decode(model: &dyn StepModel, kind: CaptionType, cfg: &GenConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let per_group = cfg.beam_size / cfg.beam_groups;
    let exponent = cfg.length_penalty_exponent;
    let mut groups: Vec<Group> = (0..cfg.beam_groups)
        .map(|_| Group {
            size: per_group,
            beams: vec![Beam {
                tokens: start(kind),
                logprob: 0.0,
            }],
            finished: Vec::new(),
            done: false,
        })
        .collect();
    let mut len = 2;
    while len < cfg.max_len && groups.iter().any(|g| !g.done) {
        let prefixes: Vec<&[TokenId]> = groups
            .iter()
            .filter(|g| !g.done)
            .flat_map(|g| g.beams.iter().map(|b| b.tokens.as_slice()))
            .collect();
        let scores = model.next_logprobs(&prefixes)?;
        let mut offset = 0;
        let mut chosen: Vec<TokenId> = Vec::new();
        let last_step = len + 1 == cfg.max_len;
        for g in groups.iter_mut().filter(|g| !g.done) {
            let rows = &scores[offset..offset + g.beams.len()];
            offset += g.beams.len();
            let vocab = rows.first().map_or(0, Vec::len);
            let mut counts = vec![0usize; vocab];
            for &t in &chosen {
                if let Some(c) = counts.get_mut(t as usize) {
                    *c += 1;
                }
            }
            // (selection score, unpenalized sum, beam, token)
            let mut cands: Vec<(f64, f64, usize, TokenId)> = Vec::with_capacity(g.beams.len() * vocab);
            for (bi, (beam, row)) in g.beams.iter().zip(rows).enumerate() {
                for (v, &lp) in row.iter().enumerate() {
                    let tok = v as TokenId;
                    if !model.allowed(tok) || !lp.is_finite() {
                        continue;
                    }
                    let sum = beam.logprob + lp;
                    cands.push((sum - cfg.diversity_penalty * counts[v] as f64, sum, bi, tok));
                }
            }
            let key = |c: &(f64, f64, usize, TokenId)| -> Vec<TokenId> {
                let mut t = g.beams[c.2].tokens.clone();
                t.push(c.3);
                t
            };
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| key(a).cmp(&key(b)))
            });
            cands.truncate(2 * per_group);
            let mut next = Vec::with_capacity(per_group);
            for (rank, &(_, sum, bi, tok)) in cands.iter().enumerate() {
                let mut tokens = g.beams[bi].tokens.clone();
                tokens.push(tok);
                if last_step {
                    // Everything reaching the length cap is final.
                    if rank < per_group {
                        g.add_finished(tokens, sum, exponent)?;
                    }
                } else if tok == EOS {
                    if rank < per_group {
                        g.add_finished(tokens, sum, exponent)?;
                    }
                } else if next.len() < per_group {
                    next.push(Beam { tokens, logprob: sum });
                }
            }
            chosen.extend(next.iter().map(|b| *b.tokens.last().expect("non-empty")));
            g.beams = next;
            // Early stopping: a group is done once it holds `size` hypotheses.
            g.done = last_step || g.beams.is_empty() || g.finished.len() >= g.size;
        }
        len += 1;
    }
    let mut all: Vec<Hypothesis> = groups.into_iter().flat_map(|g| g.finished).collect();
    all.sort_by(|a, b| rank_order(a.score, a.seq.ids(), b.score, b.seq.ids()));
    all.truncate(cfg.beam_size);
    Ok(all)
}

/// Dispatches on `beam_groups`.
pub fn decode(model: &dyn StepModel, kind: CaptionType, cfg: &GenConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_groups == 1 {
        beam_decode(model, kind, cfg)
    } else {
        diverse_beam_decode(model, kind, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::model::{Model, ModelConfig};
    use crate::nn::Ctx;

    /// Log-softmax of pseudo-random logits keyed by the generated suffix.
    struct Table {
        vocab: usize,
        seed: u64,
        cache: std::cell::RefCell<HashMap<Vec<TokenId>, Vec<f64>>>,
    }

    impl Table {
        fn new(vocab: usize, seed: u64) -> Self {
            Self {
                vocab,
                seed,
                cache: Default::default(),
            }
        }

        fn row(&self, prefix: &[TokenId]) -> Vec<f64> {
            self.cache
                .borrow_mut()
                .entry(prefix.to_vec())
                .or_insert_with(|| {
                    let mut h = self.seed;
                    for &t in prefix {
                        h = h.wrapping_mul(0x100_0000_01B3).wrapping_add(t as u64 + 1);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(h);
                    let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    logits.iter().map(|x| x - lse).collect()
                })
                .clone()
        }
    }

    impl StepModel for Table {
        fn next_logprobs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| self.row(p)).collect())
        }
    }

    /// Every completion up to `max_len` tokens, scored.
    fn exhaustive(m: &Table, max_len: usize, exponent: f64) -> Vec<(f64, Vec<TokenId>)> {
        let mut out = Vec::new();
        let mut stack = vec![(start(CaptionType::Subject), 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            let row = m.row(&seq);
            for v in 0..m.vocab as TokenId {
                let mut s = seq.clone();
                s.push(v);
                let l = lp + row[v as usize];
                if v == EOS || s.len() == max_len {
                    out.push((length_normalized(l, s.len() - 2, exponent), s));
                } else {
                    stack.push((s, l));
                }
            }
        }
        out.sort_by(|a, b| rank_order(a.0, &a.1, b.0, &b.1));
        out
    }

    fn gen(beam: usize, groups: usize, max_len: usize) -> GenConfig {
        GenConfig {
            max_len,
            beam_size: beam,
            beam_groups: groups,
            diversity_penalty: 0.5,
            length_penalty_exponent: 1.0,
        }
    }

    /// Always prefers EOS.
    struct EosLover;

    impl StepModel for EosLover {
        fn next_logprobs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|_| (0..10).map(|v| if v == EOS as usize { -0.1 } else { -5.0 }).collect())
                .collect())
        }
    }

    #[test]
    fn greedy_stops_at_eos() {
        let h = greedy_decode(&EosLover, CaptionType::StatusAfter, &GenConfig::default()).unwrap();
        assert_eq!(h.seq.ids(), &[AFT, BOS, EOS]);
    }

    #[test]
    fn beam_one_equals_greedy_on_tables() {
        for seed in 0..20 {
            let m = Table::new(4, seed);
            let g = greedy_decode(&m, CaptionType::Subject, &gen(1, 1, 6)).unwrap();
            let b = beam_decode(&m, CaptionType::Subject, &gen(1, 1, 6)).unwrap();
            assert_eq!(b[0].seq, g.seq, "seed {seed}");
            assert!((b[0].score - g.score).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        for exponent in [0.0, 1.0] {
            for seed in 0..30 {
                for vocab in [3, 4] {
                    let m = Table::new(vocab, seed);
                    let cfg = GenConfig {
                        length_penalty_exponent: exponent,
                        ..gen(100, 1, 5)
                    };
                    let b = beam_decode(&m, CaptionType::Subject, &cfg).unwrap();
                    let want = exhaustive(&m, 5, exponent);
                    assert_eq!(b[0].seq.ids(), want[0].1.as_slice(), "seed {seed} vocab {vocab}");
                    assert!((b[0].score - want[0].0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn three_token_table_top_beam_matches_enumeration() {
        for seed in 0..30 {
            let m = Table::new(3, 100 + seed);
            let b = beam_decode(&m, CaptionType::Subject, &gen(40, 1, 6)).unwrap();
            let want = exhaustive(&m, 6, 1.0);
            assert_eq!(b[0].seq.ids(), want[0].1.as_slice());
        }
    }

    #[test]
    fn zero_exponent_ranks_by_logprob() {
        let m = Table::new(4, 9);
        let cfg = GenConfig {
            length_penalty_exponent: 0.0,
            ..gen(6, 1, 6)
        };
        let out = beam_decode(&m, CaptionType::Subject, &cfg).unwrap();
        for w in out.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
            assert_eq!(w[0].score, w[0].logprob);
        }
    }

    #[test]
    fn single_group_diverse_equals_beam() {
        let m = Table::new(4, 3);
        let a = diverse_beam_decode(&m, CaptionType::Subject, &gen(4, 1, 6)).unwrap();
        let b = beam_decode(&m, CaptionType::Subject, &gen(4, 1, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_penalty_groups_replay_the_smaller_beam() {
        for seed in 0..10 {
            let m = Table::new(4, seed);
            let cfg = GenConfig {
                diversity_penalty: 0.0,
                ..gen(4, 2, 6)
            };
            let div = diverse_beam_decode(&m, CaptionType::Subject, &cfg).unwrap();
            let single = beam_decode(&m, CaptionType::Subject, &gen(2, 1, 6)).unwrap();
            let mut got: Vec<f64> = div.iter().map(|h| h.score).collect();
            let mut want: Vec<f64> = single.iter().flat_map(|h| [h.score, h.score]).collect();
            got.sort_by(|a, b| b.partial_cmp(a).unwrap());
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert_eq!(got, want);
        }
    }

    fn random_scorer(seed: u64) -> (Model, FusedContext) {
        let model = Model::new(seed, &ModelConfig::tiny(), 24, DType::F32).unwrap();
        let mut r = crate::corpus::test_support::record(2, 2, 8);
        r.tsn_before = (0..2048).map(|i| ((i * 7 % 13) as f32 - 6.0) / 6.0).collect();
        r.tsn_after = vec![0.5; 2048];
        let inp = model.prepare(&r).unwrap();
        let ctx = model.context(&[&inp], &Ctx::eval()).unwrap();
        (model, ctx)
    }

    #[test]
    fn random_model_properties() {
        for seed in 0..3 {
            let (model, context) = random_scorer(seed);
            let s = ContextScorer { model: &model, context };
            let greedy = greedy_decode(&s, CaptionType::Subject, &gen(1, 1, 12)).unwrap();
            let beam1 = beam_decode(&s, CaptionType::Subject, &gen(1, 1, 12)).unwrap();
            assert_eq!(beam1[0].seq, greedy.seq);
            for kind in CaptionType::ALL {
                let out = decode(&s, kind, &gen(10, 5, 12)).unwrap();
                assert!(!out.is_empty() && out.len() <= 10);
                for h in &out {
                    let ids = h.seq.ids();
                    assert_eq!(&ids[..2], &[control_token(kind), BOS]);
                    assert!(ids.len() <= 12);
                    let eos = ids.iter().filter(|&&t| t == EOS).count();
                    assert!(eos <= 1);
                    if eos == 1 {
                        assert_eq!(*ids.last().unwrap(), EOS);
                    }
                }
            }
            let zero = |k| GenConfig {
                length_penalty_exponent: 0.0,
                ..gen(k, 1, 8)
            };
            let wide = beam_decode(&s, CaptionType::Subject, &zero(8)).unwrap();
            let narrow = beam_decode(&s, CaptionType::Subject, &zero(1)).unwrap();
            assert!(wide[0].score >= narrow[0].score - 1e-9);
        }
    }

    #[test]
    fn heavy_penalty_diversifies_group_leaders() {
        let (model, context) = random_scorer(11);
        let s = ContextScorer { model: &model, context };
        let cfg = GenConfig {
            diversity_penalty: 10.0,
            ..gen(10, 5, 10)
        };
        let out = diverse_beam_decode(&s, CaptionType::StatusBefore, &cfg).unwrap();
        let firsts: std::collections::BTreeSet<TokenId> = out.iter().map(|h| h.seq.ids()[2]).collect();
        assert!(firsts.len() > 1, "{firsts:?}");
    }

    #[test]
    fn config_checks() {
        assert!(gen(10, 3, 20).validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
        assert!(gen(2, 1, 200).validate().is_err());
    }
}
