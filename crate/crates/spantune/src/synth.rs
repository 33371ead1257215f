//! Synthetic fact-grounded corpus with ground-truth hallucination spans.
//!
//! Documents and summaries are rendered from the closed template grammar
//! `<Entity>'s <attribute> is <value>.` so that faithfulness is exactly
//! decidable: a summary sentence is entailed iff its (entity, attribute,
//! value) triple appears in the document's facts.

use crate::corpus::{GeneratedSummary, Label, LabeledSample, SourceDocument};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("summary renders zero facts; nothing to perturb")]
    NoPerturbableSlot,
    #[error("perturbation kind `none` cannot be injected")]
    KindIsNone,
}

pub const ENTITIES: [&str; 24] = [
    "Mira", "Juno", "Felix", "Nora", "Ivan", "Lena", "Omar", "Ruth", "Theo", "Vera", "Alba",
    "Boris", "Cleo", "Dario", "Edith", "Farid", "Gwen", "Hugo", "Iris", "Jonas", "Kira", "Louis",
    "Mabel", "Nils",
];

pub const ATTRIBUTES: [(&str, [&str; 6]); 6] = [
    ("color", ["red", "blue", "green", "yellow", "purple", "orange"]),
    ("pet", ["cat", "dog", "parrot", "hamster", "rabbit", "turtle"]),
    ("city", ["Oslo", "Madrid", "Lisbon", "Vienna", "Prague", "Dublin"]),
    ("hobby", ["chess", "painting", "cycling", "fishing", "gardening", "skiing"]),
    ("drink", ["tea", "coffee", "juice", "milk", "cocoa", "water"]),
    ("sport", ["tennis", "soccer", "golf", "rowing", "karate", "rugby"]),
];

/// Every word that can occur in rendered documents and summaries, for
/// building a tokenizer with no out-of-vocabulary tokens.
pub fn template_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = ENTITIES.iter().map(|s| s.to_string()).collect();
    for (attr, values) in ATTRIBUTES {
        words.push(attr.to_string());
        words.extend(values.iter().map(|s| s.to_string()));
    }
    words.extend(["is", "s", "'", "."].map(String::from));
    words
}

pub fn values_for(attribute: &str) -> Option<&'static [&'static str; 6]> {
    ATTRIBUTES
        .iter()
        .find(|(a, _)| *a == attribute)
        .map(|(_, v)| v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

impl FactRecord {
    pub fn render(&self) -> String {
        format!("{}'s {} is {}.", self.entity, self.attribute, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    None,
    ValueSwap,
    EntitySwap,
    FabricatedFact,
}

impl std::fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PerturbationKind::None => "none",
            PerturbationKind::ValueSwap => "value_swap",
            PerturbationKind::EntitySwap => "entity_swap",
            PerturbationKind::FabricatedFact => "fabricated_fact",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub id: String,
    pub facts: Vec<FactRecord>,
    pub document_text: String,
    pub summary_text: String,
    pub true_spans: Vec<(usize, usize)>,
    pub perturbation_kind: PerturbationKind,
}

impl SynthSample {
    pub fn source_document(&self, dataset_tag: &str) -> SourceDocument {
        SourceDocument {
            id: self.id.clone(),
            dataset_tag: dataset_tag.to_string(),
            text: self.document_text.clone(),
        }
    }

    pub fn span_texts(&self) -> Vec<String> {
        let chars: Vec<char> = self.summary_text.chars().collect();
        self.true_spans
            .iter()
            .map(|&(s, e)| chars[s..e].iter().collect())
            .collect()
    }

    pub fn to_labeled_sample(&self, options: &SynthOptions) -> LabeledSample {
        LabeledSample {
            doc: self.source_document(&options.dataset_tag),
            summary: GeneratedSummary {
                doc_id: self.id.clone(),
                generator_tag: options.generator_tag.clone(),
                text: self.summary_text.clone(),
            },
            label: if self.true_spans.is_empty() {
                Label::Positive
            } else {
                Label::Negative
            },
            char_spans: self.true_spans.clone(),
            annotator_reasoning: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub facts_per_doc: (usize, usize),
    pub summary_facts: (usize, usize),
    pub entities_per_doc: (usize, usize),
    pub dataset_tag: String,
    pub generator_tag: String,
    pub id_prefix: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            facts_per_doc: (3, 5),
            summary_facts: (2, 3),
            entities_per_doc: (2, 3),
            dataset_tag: "synth".to_string(),
            generator_tag: "template-v1".to_string(),
            id_prefix: "synth-".to_string(),
        }
    }
}

pub fn gen_corpus(seed: u64, n_docs: usize, hallucination_rate: f64) -> Vec<SynthSample> {
    gen_corpus_with(seed, n_docs, hallucination_rate, &SynthOptions::default())
}

/// Deterministic under (seed, n_docs, rate, options). Each perturbed sample
/// carries exactly one hallucination span.
pub fn gen_corpus_with(
    seed: u64,
    n_docs: usize,
    hallucination_rate: f64,
    options: &SynthOptions,
) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let facts = gen_facts(&mut rng, options);
        let document_text = render_facts(&facts);

        let k_lo = options.summary_facts.0.min(facts.len());
        let k_hi = options.summary_facts.1.min(facts.len());
        let k = rng.gen_range(k_lo..=k_hi).max(1);
        let mut picked = rand::seq::index::sample(&mut rng, facts.len(), k).into_vec();
        picked.sort_unstable();
        let summary_facts: Vec<FactRecord> = picked.iter().map(|&j| facts[j].clone()).collect();
        let summary_text = render_facts(&summary_facts);

        let perturb = rng.gen::<f64>() < hallucination_rate;
        let (summary_text, true_spans, kind) = if perturb {
            let kind = [
                PerturbationKind::ValueSwap,
                PerturbationKind::EntitySwap,
                PerturbationKind::FabricatedFact,
            ][rng.gen_range(0..3)];
            let child_seed = rng.gen::<u64>();
            let (text, span) = inject_hallucination(&summary_text, &facts, kind, child_seed)
                .expect("summaries always render at least one fact");
            (text, vec![span], kind)
        } else {
            (summary_text, Vec::new(), PerturbationKind::None)
        };

        samples.push(SynthSample {
            id: format!("{}{:06}", options.id_prefix, i),
            facts,
            document_text,
            summary_text,
            true_spans,
            perturbation_kind: kind,
        });
    }
    samples
}

fn gen_facts(rng: &mut ChaCha8Rng, options: &SynthOptions) -> Vec<FactRecord> {
    let n_facts = rng.gen_range(options.facts_per_doc.0..=options.facts_per_doc.1);
    let pool_n = rng
        .gen_range(options.entities_per_doc.0..=options.entities_per_doc.1)
        .min(ENTITIES.len());
    let pool = rand::seq::index::sample(rng, ENTITIES.len(), pool_n).into_vec();

    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut facts = Vec::with_capacity(n_facts);
    for _ in 0..n_facts {
        let available: Vec<(usize, usize)> = pool
            .iter()
            .flat_map(|&e| (0..ATTRIBUTES.len()).map(move |a| (e, a)))
            .filter(|slot| !used.contains(slot))
            .collect();
        if available.is_empty() {
            break;
        }
        let (e, a) = available[rng.gen_range(0..available.len())];
        used.insert((e, a));
        let (attr, values) = ATTRIBUTES[a];
        facts.push(FactRecord {
            entity: ENTITIES[e].to_string(),
            attribute: attr.to_string(),
            value: values[rng.gen_range(0..values.len())].to_string(),
        });
    }
    facts
}

fn render_facts(facts: &[FactRecord]) -> String {
    facts
        .iter()
        .map(FactRecord::render)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One sentence of a rendered summary: its character span, and the parsed
/// triple when the sentence matches the template grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub triple: Option<FactRecord>,
    pub span: (usize, usize),
}

/// Splits text at sentence periods and parses each sentence against the
/// template grammar. A trailing fragment without a period, or any sentence
/// that does not match the grammar, yields an assertion with no triple.
pub fn parse_assertions(text: &str) -> Vec<Assertion> {
    parse_slots(text)
        .into_iter()
        .map(|slot| Assertion {
            triple: slot.triple,
            span: slot.sentence_span,
        })
        .collect()
}

struct FactSlot {
    triple: Option<FactRecord>,
    sentence_span: (usize, usize),
    entity_span: (usize, usize),
    value_span: (usize, usize),
}

fn parse_slots(text: &str) -> Vec<FactSlot> {
    let chars: Vec<char> = text.chars().collect();
    let mut slots = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i <= chars.len() {
        let at_end = i == chars.len();
        if at_end || chars[i] == '.' {
            let end = if at_end { i } else { i + 1 };
            if let Some(slot) = parse_sentence(&chars, start, end, !at_end) {
                slots.push(slot);
            }
            start = end;
        }
        i += 1;
    }
    slots
}

fn parse_sentence(
    chars: &[char],
    raw_start: usize,
    raw_end: usize,
    terminated: bool,
) -> Option<FactSlot> {
    let mut s = raw_start;
    let mut e = raw_end;
    while s < e && chars[s].is_whitespace() {
        s += 1;
    }
    while e > s && chars[e - 1].is_whitespace() {
        e -= 1;
    }
    if s == e {
        return None;
    }
    let sentence_span = (s, e);
    let unparsed = FactSlot {
        triple: None,
        sentence_span,
        entity_span: (0, 0),
        value_span: (0, 0),
    };

    if !terminated {
        return Some(unparsed);
    }
    // Words of the sentence body (without the final period), with spans.
    let body_end = e - 1;
    let mut words: Vec<(usize, usize)> = Vec::new();
    let mut w_start: Option<usize> = None;
    for i in s..body_end {
        if chars[i].is_whitespace() {
            if let Some(ws) = w_start.take() {
                words.push((ws, i));
            }
        } else if w_start.is_none() {
            w_start = Some(i);
        }
    }
    if let Some(ws) = w_start {
        words.push((ws, body_end));
    }
    if words.len() != 4 {
        return Some(unparsed);
    }
    let word = |&(a, b): &(usize, usize)| chars[a..b].iter().collect::<String>();
    let possessive = word(&words[0]);
    let attribute = word(&words[1]);
    let is_word = word(&words[2]);
    let value = word(&words[3]);
    if is_word != "is" || !possessive.ends_with("'s") || possessive.chars().count() <= 2 {
        return Some(unparsed);
    }
    let entity: String = possessive
        .chars()
        .take(possessive.chars().count() - 2)
        .collect();
    if entity.contains('\'') {
        return Some(unparsed);
    }
    let entity_span = (words[0].0, words[0].1 - 2);
    Some(FactSlot {
        triple: Some(FactRecord {
            entity,
            attribute,
            value,
        }),
        sentence_span,
        entity_span,
        value_span: words[3],
    })
}

/// Rewrites one summary so that exactly one span contradicts or is absent
/// from `facts`; returns the new text and the span covering the change.
pub fn inject_hallucination(
    summary_text: &str,
    facts: &[FactRecord],
    kind: PerturbationKind,
    seed: u64,
) -> Result<(String, (usize, usize)), SynthError> {
    if kind == PerturbationKind::None {
        return Err(SynthError::KindIsNone);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<FactSlot> = parse_slots(summary_text)
        .into_iter()
        .filter(|s| s.triple.is_some())
        .collect();
    if slots.is_empty() {
        return Err(SynthError::NoPerturbableSlot);
    }
    let chars: Vec<char> = summary_text.chars().collect();
    let replace = |span: (usize, usize), with: &str| -> (String, (usize, usize)) {
        let mut out: String = chars[..span.0].iter().collect();
        out.push_str(with);
        out.extend(&chars[span.1..]);
        (out, (span.0, span.0 + with.chars().count()))
    };

    match kind {
        PerturbationKind::ValueSwap => {
            let slot = &slots[rng.gen_range(0..slots.len())];
            let triple = slot.triple.as_ref().unwrap();
            let candidates: Vec<&str> = values_for(&triple.attribute)
                .map(|vs| vs.iter().copied().filter(|v| *v != triple.value).collect())
                .unwrap_or_default();
            if candidates.is_empty() {
                return Err(SynthError::NoPerturbableSlot);
            }
            let new_value = candidates[rng.gen_range(0..candidates.len())];
            Ok(replace(slot.value_span, new_value))
        }
        PerturbationKind::EntitySwap => {
            let slot = &slots[rng.gen_range(0..slots.len())];
            let triple = slot.triple.as_ref().unwrap();
            let contradicts = |e: &str| {
                !facts.iter().any(|f| {
                    f.entity == e && f.attribute == triple.attribute && f.value == triple.value
                })
            };
            let candidates: Vec<&str> = ENTITIES
                .iter()
                .copied()
                .filter(|e| *e != triple.entity && contradicts(e))
                .collect();
            if candidates.is_empty() {
                return Err(SynthError::NoPerturbableSlot);
            }
            let new_entity = candidates[rng.gen_range(0..candidates.len())];
            Ok(replace(slot.entity_span, new_entity))
        }
        PerturbationKind::FabricatedFact => {
            let doc_entities: Vec<&str> = {
                let mut seen = Vec::new();
                for f in facts {
                    if !seen.contains(&f.entity.as_str()) {
                        seen.push(f.entity.as_str());
                    }
                }
                seen
            };
            // Prefer an unused attribute of an entity already in the
            // document; fall back to an entity absent from it.
            let mut open_slots: Vec<(&str, usize)> = Vec::new();
            for e in &doc_entities {
                for (a, (attr, _)) in ATTRIBUTES.iter().enumerate() {
                    let taken = facts.iter().any(|f| f.entity == *e && f.attribute == *attr);
                    if !taken {
                        open_slots.push((e, a));
                    }
                }
            }
            let (entity, attr_idx) = if open_slots.is_empty() {
                let outside: Vec<&str> = ENTITIES
                    .iter()
                    .copied()
                    .filter(|e| !doc_entities.contains(e))
                    .collect();
                if outside.is_empty() {
                    return Err(SynthError::NoPerturbableSlot);
                }
                (
                    outside[rng.gen_range(0..outside.len())],
                    rng.gen_range(0..ATTRIBUTES.len()),
                )
            } else {
                open_slots[rng.gen_range(0..open_slots.len())]
            };
            let (attr, values) = ATTRIBUTES[attr_idx];
            let fact = FactRecord {
                entity: entity.to_string(),
                attribute: attr.to_string(),
                value: values[rng.gen_range(0..values.len())].to_string(),
            };
            let sentence = fact.render();
            let old_len = chars.len();
            let text = format!("{summary_text} {sentence}");
            let span = (old_len + 1, old_len + 1 + sentence.chars().count());
            Ok((text, span))
        }
        PerturbationKind::None => unreachable!(),
    }
}

/// Exact sentence-level entailment: an assertion is entailed iff it parses
/// and its triple appears among the document facts.
pub fn assertion_entailed(assertion: &Assertion, facts: &[FactRecord]) -> bool {
    match &assertion.triple {
        Some(t) => facts.contains(t),
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_zero_yields_no_spans() {
        let corpus = gen_corpus(0, 100, 0.0);
        assert_eq!(corpus.len(), 100);
        assert!(corpus.iter().all(|s| s.true_spans.is_empty()
            && s.perturbation_kind == PerturbationKind::None));
    }

    #[test]
    fn rate_one_yields_exactly_one_span_each() {
        let corpus = gen_corpus(0, 100, 1.0);
        assert!(corpus.iter().all(|s| s.true_spans.len() == 1
            && s.perturbation_kind != PerturbationKind::None));
    }

    #[test]
    fn same_seed_is_identical() {
        assert_eq!(gen_corpus(7, 50, 0.5), gen_corpus(7, 50, 0.5));
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(gen_corpus(1, 50, 0.5), gen_corpus(2, 50, 0.5));
    }

    #[test]
    fn value_swap_single_slot() {
        let facts = vec![FactRecord {
            entity: "Pat".to_string(),
            attribute: "color".to_string(),
            value: "red".to_string(),
        }];
        let (text, span) =
            inject_hallucination("Pat's color is red.", &facts, PerturbationKind::ValueSwap, 3)
                .unwrap();
        let swapped: String = text.chars().skip(span.0).take(span.1 - span.0).collect();
        assert_ne!(swapped, "red");
        assert!(values_for("color").unwrap().contains(&swapped.as_str()));
        assert_eq!(text, format!("Pat's color is {swapped}."));
    }

    #[test]
    fn fabricated_fact_appends_one_sentence() {
        let facts = vec![FactRecord {
            entity: "Mira".to_string(),
            attribute: "color".to_string(),
            value: "red".to_string(),
        }];
        let summary = "Mira's color is red.";
        let (text, span) =
            inject_hallucination(summary, &facts, PerturbationKind::FabricatedFact, 9).unwrap();
        assert!(text.starts_with(summary));
        let appended: String = text.chars().skip(span.0).take(span.1 - span.0).collect();
        assert!(appended.ends_with('.'));
        assert_eq!(span.1, text.chars().count());
        let assertions = parse_assertions(&text);
        assert_eq!(assertions.len(), 2);
    }

    #[test]
    fn injected_span_is_not_entailed() {
        for kind in [
            PerturbationKind::ValueSwap,
            PerturbationKind::EntitySwap,
            PerturbationKind::FabricatedFact,
        ] {
            for seed in 0..20 {
                let corpus = gen_corpus(seed, 1, 0.0);
                let sample = &corpus[0];
                let (text, span) =
                    inject_hallucination(&sample.summary_text, &sample.facts, kind, seed).unwrap();
                let overlapping: Vec<_> = parse_assertions(&text)
                    .into_iter()
                    .filter(|a| a.span.0 < span.1 && span.0 < a.span.1)
                    .collect();
                assert!(!overlapping.is_empty(), "{kind} seed {seed}: span hit no sentence");
                for a in overlapping {
                    assert!(
                        !assertion_entailed(&a, &sample.facts),
                        "{kind} seed {seed}: perturbed sentence still entailed"
                    );
                }
            }
        }
    }

    #[test]
    fn kind_none_is_rejected() {
        assert!(matches!(
            inject_hallucination("Mira's color is red.", &[], PerturbationKind::None, 0),
            Err(SynthError::KindIsNone)
        ));
    }

    #[test]
    fn no_perturbable_slot() {
        assert!(matches!(
            inject_hallucination("nothing here", &[], PerturbationKind::ValueSwap, 0),
            Err(SynthError::NoPerturbableSlot)
        ));
    }

    #[test]
    fn parse_assertions_reads_template_sentences() {
        let text = "Mira's color is red. Juno's pet is cat.";
        let assertions = parse_assertions(text);
        assert_eq!(assertions.len(), 2);
        assert_eq!(
            assertions[0].triple,
            Some(FactRecord {
                entity: "Mira".to_string(),
                attribute: "color".to_string(),
                value: "red".to_string(),
            })
        );
        assert_eq!(assertions[1].span, (21, 39));
    }

    #[test]
    fn parse_assertions_flags_garbage_and_fragments() {
        let assertions = parse_assertions("red red red. Mira's color is");
        assert_eq!(assertions.len(), 2);
        assert!(assertions.iter().all(|a| a.triple.is_none()));
        assert!(parse_assertions("").is_empty());
        assert!(parse_assertions(". . .").is_empty());
    }

    /// Oracle consistency: sentences overlapping a true span are exactly the
    /// non-entailed ones.
    #[test]
    fn corpus_oracle_consistency() {
        for sample in gen_corpus(11, 200, 0.5) {
            for assertion in parse_assertions(&sample.summary_text) {
                let overlaps = sample
                    .true_spans
                    .iter()
                    .any(|&(s, e)| assertion.span.0 < e && s < assertion.span.1);
                let entailed = assertion_entailed(&assertion, &sample.facts);
                assert_eq!(
                    overlaps, !entailed,
                    "sample {} sentence at {:?}",
                    sample.id, assertion.span
                );
            }
        }
    }

    #[test]
    fn labeled_sample_conversion() {
        let options = SynthOptions::default();
        for sample in gen_corpus(3, 40, 0.5) {
            let labeled = sample.to_labeled_sample(&options);
            assert_eq!(labeled.label == Label::Negative, !sample.true_spans.is_empty());
            assert_eq!(labeled.char_spans, sample.true_spans);
            assert_eq!(labeled.span_texts(), sample.span_texts());
        }
    }

    #[test]
    fn template_vocabulary_covers_rendered_text() {
        let vocab = template_vocabulary();
        let tok = crate::align::WordTokenizer::from_vocabulary(vocab);
        let unk = crate::align::Tokenizer::specials(&tok).unk;
        for sample in gen_corpus(5, 60, 1.0) {
            for text in [&sample.document_text, &sample.summary_text] {
                let enc = crate::align::Tokenizer::encode(&tok, text);
                assert!(
                    enc.token_ids.iter().all(|&id| id != unk),
                    "OOV token in {text:?}"
                );
            }
        }
    }
}
