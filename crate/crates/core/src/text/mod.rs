//! Vocabulary, whitespace tokenizer and caption target construction.

mod decoder;

pub use decoder::{zero_memory, DecoderConfig, MultimodalDecoder, TokenBatch, UnimodalDecoder};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::corpus::{CaptionTriplet, CaptionType};
use crate::error::{bail_config, bail_data, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const CLS_TXT: TokenId = 3;
pub const SUBJ: TokenId = 4;
pub const BEF: TokenId = 5;
pub const AFT: TokenId = 6;
pub const UNK: TokenId = 7;

/// Longest token sequence, control token and EOS included.
pub const MAX_TOKENS: usize = 128;
pub const MIN_VOCAB: usize = 16;

const SPECIALS: [&str; 8] = ["<pad>", "<bos>", "<eos>", "<cls>", "<subj>", "<bef>", "<aft>", "<unk>"];

pub fn control_token(kind: CaptionType) -> TokenId {
    match kind {
        CaptionType::Subject => SUBJ,
        CaptionType::StatusBefore => BEF,
        CaptionType::StatusAfter => AFT,
    }
}

pub fn caption_type_of(token: TokenId) -> Option<CaptionType> {
    match token {
        SUBJ => Some(CaptionType::Subject),
        BEF => Some(CaptionType::StatusBefore),
        AFT => Some(CaptionType::StatusAfter),
        _ => None,
    }
}

pub fn is_special(token: TokenId) -> bool {
    (token as usize) < SPECIALS.len() && token != UNK
}

/// Dense token ↔ id map with fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Specials, then the given words in sorted order. Padded with reserved
    /// entries up to [`MIN_VOCAB`].
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let unique: BTreeSet<String> = words
            .into_iter()
            .map(str::to_lowercase)
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(unique);
        let mut k = 0;
        while tokens.len() < MIN_VOCAB {
            tokens.push(format!("<reserved{k}>"));
            k += 1;
        }
        Self::from_tokens(tokens).expect("constructed vocabulary is valid")
    }

    /// Vocabulary over every word of the given caption triplets.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a CaptionTriplet>) -> Self {
        let mut words = Vec::new();
        for c in captions {
            for kind in CaptionType::ALL {
                words.extend(c.get(kind).split_whitespace().map(str::to_string));
            }
        }
        Self::from_words(words.iter().map(String::as_str))
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < MIN_VOCAB {
            bail_config!("vocabulary has {} entries, need at least {MIN_VOCAB}", tokens.len());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                bail_config!("vocabulary id {i} must be {s}, found {}", tokens[i]);
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                bail_config!("duplicate vocabulary entry {t:?}");
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// JSON object `{token: id}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, TokenId> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as TokenId)).collect();
        serde_json::to_string(&map).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, TokenId> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| crate::Error::Config(format!("vocabulary ids are not dense: {id}")))?;
            *slot = tok;
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Lowercases, splits on whitespace and maps through `vocab` (unknown words
/// become [`UNK`]). Adds no control tokens.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let ids: Vec<TokenId> = text
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect();
    if ids.is_empty() {
        bail_data!("cannot tokenize empty text");
    }
    Ok(ids)
}

/// Inverse of [`tokenize`] for in-vocabulary words; control tokens, BOS,
/// EOS and padding are dropped.
pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| !is_special(id))
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A token sequence headed by exactly one caption-type control token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.len() > MAX_TOKENS {
            bail_data!("token sequence of length {} exceeds {MAX_TOKENS}", ids.len());
        }
        match ids.first() {
            Some(&t) if caption_type_of(t).is_some() => {}
            _ => bail_data!("token sequence must start with a caption-type control token"),
        }
        if ids[1..].iter().any(|&t| caption_type_of(t).is_some()) {
            bail_data!("token sequence has more than one control token");
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn caption_type(&self) -> CaptionType {
        caption_type_of(self.0[0]).expect("validated on construction")
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

/// `[control, BOS, caption tokens..., EOS]`, truncated to [`MAX_TOKENS`]
/// with EOS kept last.
pub fn build_target(captions: &CaptionTriplet, kind: CaptionType, vocab: &Vocab) -> Result<TokenSeq> {
    let body = tokenize(captions.get(kind), vocab)?;
    let mut ids = Vec::with_capacity(body.len() + 3);
    ids.push(control_token(kind));
    ids.push(BOS);
    ids.extend(body.into_iter().take(MAX_TOKENS - 3));
    ids.push(EOS);
    TokenSeq::new(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_words("the cat a dog sat red".split(' '))
    }

    #[test]
    fn specials_are_fixed() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<aft>"), Some(AFT));
        assert!(v.len() >= MIN_VOCAB);
    }

    #[test]
    fn tokenize_known_and_unknown() {
        let v = vocab();
        let ids = tokenize("The cat", &v).unwrap();
        assert_eq!(ids, vec![v.id("the").unwrap(), v.id("cat").unwrap()]);
        assert_eq!(tokenize("zebra", &v).unwrap(), vec![UNK]);
        assert!(tokenize("   ", &v).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn subject_target_layout() {
        let v = vocab();
        let c = CaptionTriplet {
            subject: "a dog".into(),
            status_before: "a dog".into(),
            status_after: "a dog".into(),
        };
        let s = build_target(&c, CaptionType::Subject, &v).unwrap();
        assert_eq!(s.ids(), &[SUBJ, BOS, v.id("a").unwrap(), v.id("dog").unwrap(), EOS]);
        let b = build_target(&c, CaptionType::StatusBefore, &v).unwrap();
        let a = build_target(&c, CaptionType::StatusAfter, &v).unwrap();
        assert_eq!(s.ids()[1..], b.ids()[1..]);
        assert_eq!(s.ids()[1..], a.ids()[1..]);
        assert_ne!(s.ids()[0], b.ids()[0]);
        assert_ne!(b.ids()[0], a.ids()[0]);
    }

    #[test]
    fn long_caption_truncates_keeping_eos() {
        let v = vocab();
        let long = vec!["cat"; 200].join(" ");
        let c = CaptionTriplet {
            subject: long.clone(),
            status_before: long.clone(),
            status_after: long,
        };
        let s = build_target(&c, CaptionType::StatusAfter, &v).unwrap();
        assert_eq!(s.len(), MAX_TOKENS);
        assert_eq!(*s.ids().last().unwrap(), EOS);
    }

    #[test]
    fn token_seq_rejects_bad_control() {
        assert!(TokenSeq::new(vec![BOS, EOS]).is_err());
        assert!(TokenSeq::new(vec![SUBJ, BEF]).is_err());
        assert!(TokenSeq::new(vec![SUBJ; 1].into_iter().chain(vec![BOS; 128]).collect()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in proptest::collection::vec(0usize..6, 1..20)) {
            let pool = ["the", "cat", "a", "dog", "sat", "red"];
            let v = vocab();
            let text = words.iter().map(|&i| pool[i]).collect::<Vec<_>>().join(" ");
            proptest::prop_assert_eq!(detokenize(&tokenize(&text, &v).unwrap(), &v), text);
        }
    }
}
