//! Annotated corpus handling: parsing annotator responses, locating
//! hallucination spans, classifying samples, dataset statistics, and JSONL
//! persistence.

use crate::align::{spans_to_token_mask, AlignError, Tokenizer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

pub const REASONING_MARKER: &str = "[[ ## reasoning ## ]]";
pub const SPANS_MARKER: &str = "[[ ## hallucinated_spans ## ]]";
pub const COMPLETED_MARKER: &str = "[[ ## completed ## ]]";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing required marker {0:?} in annotator response")]
    MissingMarker(&'static str),
    #[error("hallucinated_spans block is not a JSON string array: {0}")]
    MalformedList(String),
    #[error("span {span:?} is not a substring of the summary")]
    SpanNotFound { span: String },
    #[error("span {span:?} has no occurrence after character {after}; spans must follow original order")]
    OrderViolation { span: String, after: usize },
    #[error("summary references document {expected:?} but was paired with document {found:?}")]
    DocMismatch { expected: String, found: String },
    #[error("dataset schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub dataset_tag: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSummary {
    pub doc_id: String,
    pub generator_tag: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

/// Parsed annotator output: free-text reasoning plus the hallucinated spans
/// in the order they occur in the summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanAnnotation {
    pub reasoning: String,
    pub spans: Vec<String>,
}

/// A document/summary pair with its faithfulness label and located spans.
/// `char_spans` is empty exactly when the label is positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub doc: SourceDocument,
    pub summary: GeneratedSummary,
    pub label: Label,
    pub char_spans: Vec<(usize, usize)>,
    pub annotator_reasoning: String,
}

impl LabeledSample {
    /// Slices the summary by each span's character offsets.
    pub fn span_texts(&self) -> Vec<String> {
        let chars: Vec<char> = self.summary.text.chars().collect();
        self.char_spans
            .iter()
            .map(|&(s, e)| chars[s..e].iter().collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub positive: usize,
    pub negative: usize,
    /// Mean hallucinated-token ratio over the group's negative samples;
    /// absent (not zero) when the group has no negative samples.
    pub htr: Option<f64>,
}

/// Counts and hallucinated-token ratios grouped by (dataset_tag,
/// generator_tag), recording which tokenizer produced the ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub groups: BTreeMap<(String, String), GroupStats>,
    pub tokenizer_tag: String,
}

impl DatasetStats {
    pub fn total(&self) -> usize {
        self.groups.values().map(|g| g.positive + g.negative).sum()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<16} {:>8} {:>8} {:>8}", "dataset", "generator", "pos", "neg", "htr");
        for ((dataset, generator), g) in &self.groups {
            let htr = match g.htr {
                Some(v) => format!("{v:.3}"),
                None => "-".to_string(),
            };
            let _ = writeln!(out, "{dataset:<16} {generator:<16} {:>8} {:>8} {htr:>8}", g.positive, g.negative);
        }
        let _ = writeln!(out, "total samples: {}", self.total());
        let _ = writeln!(out, "tokenizer: {}", self.tokenizer_tag);
        out
    }
}

/// Extracts the reasoning block and the hallucinated-spans block from a raw
/// annotator completion, parses the spans as a JSON string array, and
/// validates that the spans occur left-to-right in `summary_text`.
pub fn parse_annotation_response(
    raw: &str,
    summary_text: &str,
) -> Result<SpanAnnotation, CorpusError> {
    let r_at = raw
        .find(REASONING_MARKER)
        .ok_or(CorpusError::MissingMarker(REASONING_MARKER))?;
    let after_reasoning = r_at + REASONING_MARKER.len();
    let s_rel = raw[after_reasoning..]
        .find(SPANS_MARKER)
        .ok_or(CorpusError::MissingMarker(SPANS_MARKER))?;
    let s_at = after_reasoning + s_rel;
    let after_spans = s_at + SPANS_MARKER.len();
    let c_rel = raw[after_spans..]
        .find(COMPLETED_MARKER)
        .ok_or(CorpusError::MissingMarker(COMPLETED_MARKER))?;
    let c_at = after_spans + c_rel;

    let reasoning = raw[after_reasoning..s_at].trim().to_string();
    let spans_block = raw[after_spans..c_at].trim();
    let spans: Vec<String> = serde_json::from_str(spans_block)
        .map_err(|e| CorpusError::MalformedList(e.to_string()))?;
    if !spans.is_empty() {
        locate_spans(summary_text, &spans)?;
    }
    Ok(SpanAnnotation { reasoning, spans })
}

/// Greedy left-to-right matching: each span is placed at its first
/// occurrence strictly after the end of the previously placed span, so the
/// returned offsets are sorted and non-overlapping.
pub fn locate_spans(
    summary_text: &str,
    spans: &[String],
) -> Result<Vec<(usize, usize)>, CorpusError> {
    let chars: Vec<char> = summary_text.chars().collect();
    let mut located = Vec::with_capacity(spans.len());
    let mut cursor = 0usize;
    for span in spans {
        let needle: Vec<char> = span.chars().collect();
        if needle.is_empty() {
            return Err(CorpusError::SpanNotFound { span: span.clone() });
        }
        match find_chars(&chars, &needle, cursor) {
            Some(at) => {
                located.push((at, at + needle.len()));
                cursor = at + needle.len();
            }
            None => {
                if find_chars(&chars, &needle, 0).is_some() {
                    return Err(CorpusError::OrderViolation {
                        span: span.clone(),
                        after: cursor,
                    });
                }
                return Err(CorpusError::SpanNotFound { span: span.clone() });
            }
        }
    }
    Ok(located)
}

fn find_chars(haystack: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

/// An annotation with no spans yields a positive sample; otherwise the spans
/// are located in the summary and the sample is negative.
pub fn classify_sample(
    doc: &SourceDocument,
    summary: &GeneratedSummary,
    annotation: &SpanAnnotation,
) -> Result<LabeledSample, CorpusError> {
    if summary.doc_id != doc.id {
        return Err(CorpusError::DocMismatch {
            expected: summary.doc_id.clone(),
            found: doc.id.clone(),
        });
    }
    let (label, char_spans) = if annotation.spans.is_empty() {
        (Label::Positive, Vec::new())
    } else {
        (Label::Negative, locate_spans(&summary.text, &annotation.spans)?)
    };
    Ok(LabeledSample {
        doc: doc.clone(),
        summary: summary.clone(),
        label,
        char_spans,
        annotator_reasoning: annotation.reasoning.clone(),
    })
}

/// Per-group positive/negative counts and mean hallucinated-token ratio.
/// The ratio for one negative sample is |mask| / token count of its summary
/// under `tokenizer`.
pub fn compute_stats(
    samples: &[LabeledSample],
    tokenizer: &dyn Tokenizer,
) -> Result<DatasetStats, CorpusError> {
    struct Acc {
        positive: usize,
        negative: usize,
        ratio_sum: f64,
        ratio_n: usize,
    }
    let mut groups: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for sample in samples {
        let key = (
            sample.doc.dataset_tag.clone(),
            sample.summary.generator_tag.clone(),
        );
        let acc = groups.entry(key).or_insert(Acc {
            positive: 0,
            negative: 0,
            ratio_sum: 0.0,
            ratio_n: 0,
        });
        match sample.label {
            Label::Positive => acc.positive += 1,
            Label::Negative => {
                acc.negative += 1;
                let tok = tokenizer.encode(&sample.summary.text);
                if !tok.is_empty() {
                    let mask = spans_to_token_mask(&tok, &sample.char_spans)?;
                    acc.ratio_sum += mask.len() as f64 / tok.len() as f64;
                    acc.ratio_n += 1;
                }
            }
        }
    }
    Ok(DatasetStats {
        groups: groups
            .into_iter()
            .map(|(k, a)| {
                (
                    k,
                    GroupStats {
                        positive: a.positive,
                        negative: a.negative,
                        htr: (a.ratio_n > 0).then(|| a.ratio_sum / a.ratio_n as f64),
                    },
                )
            })
            .collect(),
        tokenizer_tag: tokenizer.vocab_tag().to_string(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanRange {
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    schema_version: u32,
    id: String,
    dataset_tag: String,
    generator_tag: String,
    source_text: String,
    summary_text: String,
    label: Label,
    spans: Vec<SpanRange>,
    annotator_reasoning: String,
}

/// Writes one JSON record per line; `read_dataset` is its exact inverse.
pub fn write_dataset(path: &Path, samples: &[LabeledSample]) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(w: &mut W, samples: &[LabeledSample]) -> Result<(), CorpusError> {
    for sample in samples {
        let record = DatasetRecord {
            schema_version: DATASET_SCHEMA_VERSION,
            id: sample.doc.id.clone(),
            dataset_tag: sample.doc.dataset_tag.clone(),
            generator_tag: sample.summary.generator_tag.clone(),
            source_text: sample.doc.text.clone(),
            summary_text: sample.summary.text.clone(),
            label: sample.label,
            spans: sample
                .char_spans
                .iter()
                .map(|&(start, end)| SpanRange { start, end })
                .collect(),
            annotator_reasoning: sample.annotator_reasoning.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| CorpusError::Schema(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledSample>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

pub fn read_dataset_from<R: Read>(reader: R) -> Result<Vec<LabeledSample>, CorpusError> {
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Schema(format!("line {}: {e}", lineno + 1)))?;
        samples.push(record_to_sample(record, lineno + 1)?);
    }
    Ok(samples)
}

fn record_to_sample(record: DatasetRecord, lineno: usize) -> Result<LabeledSample, CorpusError> {
    if record.schema_version != DATASET_SCHEMA_VERSION {
        return Err(CorpusError::Schema(format!(
            "line {lineno}: unsupported schema_version {}",
            record.schema_version
        )));
    }
    let char_spans: Vec<(usize, usize)> =
        record.spans.iter().map(|s| (s.start, s.end)).collect();
    let summary_len = record.summary_text.chars().count();
    let mut prev_end = 0usize;
    for &(start, end) in &char_spans {
        if start >= end || end > summary_len || start < prev_end {
            return Err(CorpusError::Schema(format!(
                "line {lineno}: invalid span ({start}, {end}) for summary of {summary_len} characters"
            )));
        }
        prev_end = end;
    }
    let consistent = match record.label {
        Label::Positive => char_spans.is_empty(),
        Label::Negative => !char_spans.is_empty(),
    };
    if !consistent {
        return Err(CorpusError::Schema(format!(
            "line {lineno}: label {:?} is inconsistent with {} spans",
            record.label,
            char_spans.len()
        )));
    }
    Ok(LabeledSample {
        doc: SourceDocument {
            id: record.id.clone(),
            dataset_tag: record.dataset_tag,
            text: record.source_text,
        },
        summary: GeneratedSummary {
            doc_id: record.id,
            generator_tag: record.generator_tag,
            text: record.summary_text,
        },
        label: record.label,
        char_spans,
        annotator_reasoning: record.annotator_reasoning,
    })
}
