//! Persian orthographic normalization, the whitespace vocabulary, and verse tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Verse};
use crate::error::{Error, Result};
use crate::sha256_hex;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const RESERVED: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 64;

const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]"];

const ARABIC_YEH: char = '\u{064A}';
const ALEF_MAKSURA: char = '\u{0649}';
const PERSIAN_YEH: char = '\u{06CC}';
const ARABIC_KAF: char = '\u{0643}';
const KEHEH: char = '\u{06A9}';
const TATWEEL: char = '\u{0640}';
pub const ZWNJ: char = '\u{200C}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub map_arabic_yeh: bool,
    pub map_arabic_kaf: bool,
    pub strip_diacritics: bool,
    pub retain_zwnj: bool,
    pub strip_tatweel: bool,
    pub collapse_whitespace: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            map_arabic_yeh: true,
            map_arabic_kaf: true,
            strip_diacritics: true,
            retain_zwnj: true,
            strip_tatweel: true,
            collapse_whitespace: true,
        }
    }
}

/// Harakat, tanwin, shadda and sukun.
pub fn is_arabic_diacritic(c: char) -> bool {
    ('\u{064B}'..='\u{0652}').contains(&c)
}

fn map_char(c: char, cfg: &NormalizationConfig) -> Option<char> {
    match c {
        ARABIC_YEH | ALEF_MAKSURA if cfg.map_arabic_yeh => Some(PERSIAN_YEH),
        ARABIC_KAF if cfg.map_arabic_kaf => Some(KEHEH),
        TATWEEL if cfg.strip_tatweel => None,
        ZWNJ if !cfg.retain_zwnj => None,
        c if cfg.strip_diacritics && is_arabic_diacritic(c) => None,
        c => Some(c),
    }
}

/// Replaces every closed `<...>` span with a space. An unclosed `<` is kept.
fn strip_markup(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(open) = rest.find('<') {
        match rest[open..].find('>') {
            Some(close) => {
                out.push_str(&rest[..open]);
                out.push(' ');
                rest = &rest[open + close + 1..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Character mapping, diacritic/tatweel removal, markup removal and whitespace
/// collapse, in that order.
pub fn normalize_text(s: &str, cfg: &NormalizationConfig) -> String {
    let mapped: String = s.chars().filter_map(|c| map_char(c, cfg)).collect();
    let stripped = strip_markup(&mapped);
    if cfg.collapse_whitespace {
        collapse(&stripped)
    } else {
        stripped
    }
}

/// Whitespace tokens of a normalized string.
pub fn words(s: &str, cfg: &NormalizationConfig) -> Vec<String> {
    normalize_text(s, cfg)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Tokens of both hemistichs; errors when the verse has no content.
pub fn verse_words(v: &Verse, cfg: &NormalizationConfig) -> Result<(Vec<String>, Vec<String>)> {
    let h1 = words(&v.hemistich_1, cfg);
    let h2 = words(&v.hemistich_2, cfg);
    if h1.is_empty() && h2.is_empty() {
        return Err(Error::EmptyVerse);
    }
    Ok((h1, h2))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    config: NormalizationConfig,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(config: NormalizationConfig, tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { config, tokens, ids })
    }

    pub fn config(&self) -> &NormalizationConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    /// Content id of `token`; reserved names in text are treated as unknown words.
    pub fn id(&self, token: &str) -> u32 {
        match self.ids.get(token) {
            Some(&id) if id as usize >= RESERVED => id,
            _ => UNK_ID,
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Header line with the normalization config, then `token<TAB>id` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let cfg = serde_json::to_string(&self.config).expect("config serialize");
        let _ = writeln!(out, "#normalization\t{cfg}");
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let cfg_json = header
            .strip_prefix("#normalization\t")
            .ok_or_else(|| Error::Format("missing vocabulary header".into()))?;
        let config: NormalizationConfig = serde_json::from_str(cfg_json)?;
        let mut tokens = Vec::new();
        for (n, line) in lines.enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: no tab", n + 2)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {}: bad id", n + 2)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!("vocabulary line {}: ids not dense", n + 2)));
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() < RESERVED || tokens[..RESERVED] != RESERVED_TOKENS {
            return Err(Error::Format("reserved tokens missing".into()));
        }
        Self::from_tokens(config, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// Vocabulary over whitespace tokens with frequency ≥ `min_freq`, ordered by
/// descending frequency then lexicographically, after the reserved ids.
pub fn build_vocab(corpus: &Corpus, cfg: &NormalizationConfig, min_freq: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in corpus.records() {
        for v in &r.verses {
            for h in [&v.hemistich_1, &v.hemistich_2] {
                for w in words(h, cfg) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, n)| *n >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(*cfg, tokens)
}

/// `[CLS]` followed by content token ids; never contains PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>, max_len: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > max_len {
            return Err(Error::Invalid(format!(
                "token sequence length {} outside 1..={max_len}",
                ids.len()
            )));
        }
        if ids.contains(&PAD_ID) {
            return Err(Error::Invalid("PAD inside a token sequence".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize_verse(v: &Verse, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let (h1, h2) = verse_words(v, vocab.config())?;
    let ids: Vec<u32> = std::iter::once(CLS_ID)
        .chain(h1.iter().chain(&h2).map(|w| vocab.id(w)))
        .take(max_len)
        .collect();
    TokenSequence::new(ids, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttributionStatus, PoemRecord};
    use proptest::prelude::*;

    fn cfg() -> NormalizationConfig {
        NormalizationConfig::default()
    }

    fn corpus_of(lines: &[(&str, &str)]) -> Corpus {
        Corpus::new(vec![PoemRecord {
            poem_id: "p".into(),
            poet: "A".into(),
            title: None,
            form: "ghazal".into(),
            meter: "m".into(),
            attribution_status: AttributionStatus::Confirmed,
            verses: lines.iter().map(|(a, b)| Verse::new(*a, *b)).collect(),
        }])
        .unwrap()
    }

    #[test]
    fn arabic_kaf_becomes_keheh_in_place() {
        let out = normalize_text("\u{0627}\u{0643}\u{0628}", &cfg());
        assert_eq!(out.chars().nth(1), Some('\u{06A9}'));
    }

    #[test]
    fn yeh_forms_map_to_persian_yeh() {
        assert_eq!(normalize_text("\u{064A}\u{0649}", &cfg()), "\u{06CC}\u{06CC}");
    }

    #[test]
    fn diacritics_and_tatweel_removed() {
        let s = "\u{0628}\u{064E}\u{0640}\u{0631}\u{0651}";
        assert_eq!(normalize_text(s, &cfg()), "\u{0628}\u{0631}");
        let keep = NormalizationConfig {
            strip_diacritics: false,
            strip_tatweel: false,
            ..cfg()
        };
        assert_eq!(normalize_text(s, &keep), s);
    }

    #[test]
    fn zwnj_policy() {
        // می‌روم
        let s = "\u{0645}\u{06CC}\u{200C}\u{0631}\u{0648}\u{0645}";
        assert_eq!(normalize_text(s, &cfg()), s);
        let drop = NormalizationConfig {
            retain_zwnj: false,
            ..cfg()
        };
        assert_eq!(normalize_text(s, &drop), "\u{0645}\u{06CC}\u{0631}\u{0648}\u{0645}");
    }

    #[test]
    fn markup_and_whitespace() {
        assert_eq!(
            normalize_text("  <span class=\"m\">دل</span>\t  من ", &cfg()),
            "دل من"
        );
        assert_eq!(normalize_text("a<b", &cfg()), "a<b");
    }

    #[test]
    fn vocab_from_single_verse() {
        let c = corpus_of(&[("a b a", "")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        assert_eq!(v.tokens(), ["[PAD]", "[UNK]", "[CLS]", "a", "b"]);
        let v2 = build_vocab(&c, &cfg(), 2).unwrap();
        assert_eq!(v2.tokens(), ["[PAD]", "[UNK]", "[CLS]", "a"]);
        assert!(matches!(build_vocab(&c, &cfg(), 3), Err(Error::EmptyVocabulary)));
    }

    #[test]
    fn vocab_order_matches_independent_sort() {
        // Frequencies: z×4, y×3, x×3, w×1
        let c = corpus_of(&[("z y x z", "w z x"), ("y z", "x y")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        let mut freq: Vec<(&str, i32)> = vec![("w", 1), ("x", 3), ("y", 3), ("z", 4)];
        freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let expect: Vec<&str> = freq.iter().map(|p| p.0).collect();
        assert_eq!(&v.tokens()[RESERVED..], expect.as_slice());
    }

    #[test]
    fn vocab_text_round_trip() {
        let c = corpus_of(&[("دل من", "می\u{200C}روم")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
    }

    #[test]
    fn tokenize_prepends_cls() {
        let c = corpus_of(&[("a b c", "d e")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        let t = tokenize_verse(&Verse::new("a b c", "d e"), &v, 64).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.ids()[0], CLS_ID);
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let line = long.join(" ");
        let c = corpus_of(&[(line.as_str(), "")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        let t = tokenize_verse(&Verse::new(line.as_str(), ""), &v, 64).unwrap();
        assert_eq!(t.len(), 64);
    }

    #[test]
    fn unseen_word_maps_to_unk() {
        let c = corpus_of(&[("a b", "")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        let t = tokenize_verse(&Verse::new("a zzz", ""), &v, 64).unwrap();
        assert_eq!(t.ids(), &[CLS_ID, v.id("a"), UNK_ID]);
    }

    #[test]
    fn empty_verse_rejected() {
        let c = corpus_of(&[("a", "")]);
        let v = build_vocab(&c, &cfg(), 1).unwrap();
        assert!(matches!(
            tokenize_verse(&Verse::new("\u{064E} <br>", ""), &v, 64),
            Err(Error::EmptyVerse)
        ));
    }

    fn arabic_ish() -> impl Strategy<Value = String> {
        let alphabet: Vec<char> = "ابپتثجچحخدذرزسشصضطظعغفقکگلمنوهیيىكـ\u{064B}\u{064E}\u{0651}\u{0652}\u{200C} \t<>/ab"
            .chars()
            .collect();
        proptest::collection::vec(proptest::sample::select(alphabet), 0..40)
            .prop_map(|cs| cs.into_iter().collect())
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in arabic_ish(), zwnj in any::<bool>()) {
            let c = NormalizationConfig { retain_zwnj: zwnj, ..cfg() };
            let once = normalize_text(&s, &c);
            prop_assert_eq!(normalize_text(&once, &c), once.clone());
            prop_assert!(!once.chars().any(|ch| is_arabic_diacritic(ch) || ch == TATWEEL));
        }

        #[test]
        fn cls_exactly_once_and_no_pad(s in arabic_ish()) {
            let c = corpus_of(&[("ب پ ت", "")]);
            let v = build_vocab(&c, &cfg(), 1).unwrap();
            if let Ok(t) = tokenize_verse(&Verse::new(s, "ب"), &v, 16) {
                prop_assert_eq!(t.ids()[0], CLS_ID);
                prop_assert_eq!(t.ids().iter().filter(|&&i| i == CLS_ID).count(), 1);
                prop_assert!(!t.ids().contains(&PAD_ID));
            }
        }
    }
}
