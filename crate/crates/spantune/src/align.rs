//! Tokenization with character offsets and conversion of character-level
//! spans into token-level hallucination masks.
//!
//! All offsets in this module are Unicode code-point indices, not byte
//! offsets, so spans survive serialization across platforms.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("span ({start}, {end}) out of range for text of {len} characters")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("tokenizer file error: {0}")]
    TokenizerFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A tokenized text: one id and one half-open character range per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub token_ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
    pub vocab_tag: String,
    /// Length of the source text in characters, kept for span validation.
    pub char_len: usize,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// The set of token positions marked hallucinated, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenMask {
    indices: BTreeSet<usize>,
}

impl TokenMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        Self {
            indices: indices.into_iter().collect(),
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Iterates indices in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().next_back().copied()
    }

    pub fn union(&self, other: &TokenMask) -> TokenMask {
        TokenMask {
            indices: self.indices.union(&other.indices).copied().collect(),
        }
    }
}

/// Reserved token ids shared by every tokenizer implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub sep: u32,
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> TokenizedText;
    fn decode(&self, token_ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    fn vocab_tag(&self) -> &str;
    fn specials(&self) -> SpecialTokens;
}

/// Splits `text` into token ranges: maximal alphanumeric runs, plus one
/// token per other non-whitespace character. Whitespace produces no token.
pub fn segment(text: &str) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut idx = 0usize;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(idx);
            }
        } else {
            if let Some(start) = run_start.take() {
                ranges.push((start, idx));
            }
            if !ch.is_whitespace() {
                ranges.push((idx, idx + 1));
            }
        }
        idx += 1;
    }
    if let Some(start) = run_start {
        ranges.push((start, idx));
    }
    ranges
}

/// A token index lands in the mask iff its character range overlaps any
/// hallucinated span by at least one character. A token straddling a span
/// boundary is therefore included.
pub fn spans_to_token_mask(
    tok: &TokenizedText,
    char_spans: &[(usize, usize)],
) -> Result<TokenMask, AlignError> {
    for &(start, end) in char_spans {
        if start >= end || end > tok.char_len {
            return Err(AlignError::SpanOutOfRange {
                start,
                end,
                len: tok.char_len,
            });
        }
    }
    let mut indices = BTreeSet::new();
    for (i, &(ts, te)) in tok.offsets.iter().enumerate() {
        if char_spans.iter().any(|&(ss, se)| ts < se && ss < te) {
            indices.insert(i);
        }
    }
    Ok(TokenMask { indices })
}

const SPECIAL_STRS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Whitespace/punctuation tokenizer over a learned closed vocabulary.
///
/// Ids 0..5 are the special tokens; the remaining ids map to vocabulary
/// words in sorted order, so the id assignment is a pure function of the
/// vocabulary set.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
    tag: String,
    specials: SpecialTokens,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    schema_version: u32,
    kind: String,
    vocab_tag: String,
    words: Vec<String>,
}

impl WordTokenizer {
    /// Builds a tokenizer from an explicit word list (deduplicated, sorted).
    pub fn from_vocabulary<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        for s in SPECIAL_STRS {
            set.remove(s);
        }
        let mut vocab: Vec<String> = SPECIAL_STRS.iter().map(|s| s.to_string()).collect();
        vocab.extend(set);
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let tag = vocab_tag_for(&vocab);
        Self {
            vocab,
            index,
            tag,
            specials: SpecialTokens {
                pad: 0,
                bos: 1,
                eos: 2,
                unk: 3,
                sep: 4,
            },
        }
    }

    /// Collects the vocabulary from raw texts using the reference
    /// segmentation rule.
    pub fn train_from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for (s, e) in segment(text) {
                words.insert(substring(text, s, e));
            }
        }
        Self::from_vocabulary(words)
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.vocab[SPECIAL_STRS.len()..].iter().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<(), AlignError> {
        let file = TokenizerFile {
            schema_version: 1,
            kind: "word-v1".to_string(),
            vocab_tag: self.tag.clone(),
            words: self.vocab[SPECIAL_STRS.len()..].to_vec(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| AlignError::TokenizerFile(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AlignError> {
        let raw = std::fs::read_to_string(path)?;
        let file: TokenizerFile =
            serde_json::from_str(&raw).map_err(|e| AlignError::TokenizerFile(e.to_string()))?;
        if file.schema_version != 1 {
            return Err(AlignError::TokenizerFile(format!(
                "unsupported tokenizer schema version {}",
                file.schema_version
            )));
        }
        if file.kind != "word-v1" {
            return Err(AlignError::TokenizerFile(format!(
                "unsupported tokenizer kind {:?}",
                file.kind
            )));
        }
        let tok = Self::from_vocabulary(file.words);
        if tok.tag != file.vocab_tag {
            return Err(AlignError::TokenizerFile(format!(
                "vocab tag mismatch: file says {:?}, rebuilt vocabulary hashes to {:?}",
                file.vocab_tag, tok.tag
            )));
        }
        Ok(tok)
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> TokenizedText {
        let offsets = segment(text);
        let token_ids = offsets
            .iter()
            .map(|&(s, e)| {
                self.index
                    .get(substring(text, s, e).as_str())
                    .copied()
                    .unwrap_or(self.specials.unk)
            })
            .collect();
        TokenizedText {
            token_ids,
            offsets,
            vocab_tag: self.tag.clone(),
            char_len: text.chars().count(),
        }
    }

    /// Joins tokens with single spaces, except that nothing precedes a
    /// punctuation token and nothing follows an apostrophe token. Special
    /// tokens render as nothing. Round-trips template text exactly and any
    /// text up to normalized whitespace.
    fn decode(&self, token_ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_apostrophe = false;
        for &id in token_ids {
            if id < SPECIAL_STRS.len() as u32 {
                continue;
            }
            let tok = match self.token_str(id) {
                Some(t) => t,
                None => continue,
            };
            let is_punct = tok.chars().all(|c| !c.is_alphanumeric());
            if !out.is_empty() && !is_punct && !prev_apostrophe {
                out.push(' ');
            }
            out.push_str(tok);
            prev_apostrophe = tok == "'";
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn vocab_tag(&self) -> &str {
        &self.tag
    }

    fn specials(&self) -> SpecialTokens {
        self.specials
    }
}

fn substring(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

fn vocab_tag_for(vocab: &[String]) -> String {
    // FNV-1a over the joined vocabulary; enough to detect mismatched files.
    let mut hash: u64 = 0xcbf29ce484222325;
    for word in vocab {
        for b in word.as_bytes() {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= 0x1f;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("word-v1-{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_tokenizer() -> WordTokenizer {
        WordTokenizer::train_from_texts(["Bob agreed.", "the quick brown fox"])
    }

    #[test]
    fn empty_text_has_no_tokens() {
        let tok = toy_tokenizer().encode("");
        assert_eq!(tok.len(), 0);
        assert_eq!(tok.char_len, 0);
    }

    #[test]
    fn bob_agreed_offsets() {
        let tok = toy_tokenizer().encode("Bob agreed.");
        assert_eq!(tok.offsets, vec![(0, 3), (4, 10), (10, 11)]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = toy_tokenizer();
        let tok = t.encode("Bob shrugged");
        assert_eq!(tok.token_ids[1], t.specials().unk);
        assert_eq!(tok.offsets[1], (4, 12));
    }

    #[test]
    fn decode_reconstructs_template_text() {
        let t = WordTokenizer::train_from_texts(["Pat's color is red."]);
        let enc = t.encode("Pat's color is red.");
        assert_eq!(t.decode(&enc.token_ids), "Pat's color is red.");
    }

    #[test]
    fn decode_skips_special_tokens() {
        let t = toy_tokenizer();
        let sp = t.specials();
        let mut ids = vec![sp.bos];
        ids.extend(t.encode("Bob agreed.").token_ids);
        ids.push(sp.eos);
        assert_eq!(t.decode(&ids), "Bob agreed.");
    }

    #[test]
    fn empty_span_list_gives_empty_mask() {
        let tok = toy_tokenizer().encode("Bob agreed.");
        let mask = spans_to_token_mask(&tok, &[]).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn full_span_masks_every_token() {
        let tok = toy_tokenizer().encode("Bob agreed.");
        let mask = spans_to_token_mask(&tok, &[(0, 11)]).unwrap();
        assert_eq!(mask.len(), tok.len());
    }

    #[test]
    fn span_over_agreed_masks_token_one() {
        let tok = toy_tokenizer().encode("Bob agreed.");
        let mask = spans_to_token_mask(&tok, &[(4, 10)]).unwrap();
        assert_eq!(mask.iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn out_of_range_span_is_rejected() {
        let tok = toy_tokenizer().encode("Bob agreed.");
        assert!(matches!(
            spans_to_token_mask(&tok, &[(4, 12)]),
            Err(AlignError::SpanOutOfRange { .. })
        ));
        assert!(matches!(
            spans_to_token_mask(&tok, &[(5, 5)]),
            Err(AlignError::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn multibyte_offsets_are_code_points() {
        let t = WordTokenizer::train_from_texts(["Zoë agreed."]);
        let tok = t.encode("Zoë agreed.");
        assert_eq!(tok.offsets, vec![(0, 3), (4, 10), (10, 11)]);
        let mask = spans_to_token_mask(&tok, &[(0, 3)]).unwrap();
        assert_eq!(mask.iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn tokenizer_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokenizer.json");
        let t = WordTokenizer::train_from_texts(["Pat's color is red."]);
        t.save(&path).unwrap();
        let loaded = WordTokenizer::load(&path).unwrap();
        assert_eq!(loaded.vocab_tag(), t.vocab_tag());
        assert_eq!(
            loaded.encode("Pat's color is red.").token_ids,
            t.encode("Pat's color is red.").token_ids
        );
    }

    fn strip_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn decode_round_trips_up_to_whitespace(text in "[a-zA-Z0-9 .,'!?]{0,60}") {
            let t = WordTokenizer::train_from_texts([text.as_str()]);
            let enc = t.encode(&text);
            prop_assert_eq!(strip_ws(&t.decode(&enc.token_ids)), strip_ws(&text));
        }

        #[test]
        fn offsets_are_sorted_and_disjoint(text in "\\PC{0,80}") {
            let ranges = segment(&text);
            for w in ranges.windows(2) {
                prop_assert!(w[0].1 <= w[1].0);
            }
            for &(s, e) in &ranges {
                prop_assert!(s < e);
            }
        }

        #[test]
        fn enlarging_a_span_never_shrinks_the_mask(
            text in "[a-z ]{1,40}",
            start in 0usize..20,
            len in 1usize..10,
            grow in 0usize..5,
        ) {
            let t = WordTokenizer::train_from_texts([text.as_str()]);
            let tok = t.encode(&text);
            let n = tok.char_len;
            prop_assume!(n > 0);
            let s = start.min(n - 1);
            let e = (s + len).min(n);
            prop_assume!(s < e);
            let e2 = (e + grow).min(n);
            let small = spans_to_token_mask(&tok, &[(s, e)]).unwrap();
            let big = spans_to_token_mask(&tok, &[(s, e2)]).unwrap();
            prop_assert!(small.iter().all(|i| big.contains(i)));
        }

        #[test]
        fn mask_of_union_is_union_of_masks(
            text in "[a-z ]{2,40}",
            a in 0usize..20, al in 1usize..6,
            b in 0usize..20, bl in 1usize..6,
        ) {
            let t = WordTokenizer::train_from_texts([text.as_str()]);
            let tok = t.encode(&text);
            let n = tok.char_len;
            let (s1, e1) = (a.min(n - 1), (a.min(n - 1) + al).min(n));
            let (s2, e2) = (b.min(n - 1), (b.min(n - 1) + bl).min(n));
            prop_assume!(s1 < e1 && s2 < e2);
            let joint = spans_to_token_mask(&tok, &[(s1, e1), (s2, e2)]).unwrap();
            let m1 = spans_to_token_mask(&tok, &[(s1, e1)]).unwrap();
            let m2 = spans_to_token_mask(&tok, &[(s2, e2)]).unwrap();
            prop_assert_eq!(joint, m1.union(&m2));
        }
    }
}
