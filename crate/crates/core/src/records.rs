//! Record data model and its JSONL wire format.
//!
//! One [`GenerationRecord`] holds a single generated response together with
//! the per-token probabilities of that response under up to four input
//! configurations. Records are exchanged as JSON lines; unknown fields are
//! kept in [`GenerationRecord::extra`] so that a parse/write cycle is lossless.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Where the record's context came from. `Gold` and `None` correspond to the
/// oracle-context and no-context evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    Bm25,
    Evac,
    Bm25Mlm,
    Gold,
    None,
    #[default]
    Other,
}

/// Input configuration under which a probability stream was captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// question, image and context
    Full,
    /// question and context
    NoImage,
    /// question and image
    NoContext,
    QuestionOnly,
}

impl Stream {
    pub const ALL: [Stream; 4] = [
        Stream::Full,
        Stream::NoImage,
        Stream::NoContext,
        Stream::QuestionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Full => "full",
            Stream::NoImage => "no_image",
            Stream::NoContext => "no_context",
            Stream::QuestionOnly => "question_only",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Stream::Full),
            "no_image" => Ok(Stream::NoImage),
            "no_context" => Ok(Stream::NoContext),
            "question_only" => Ok(Stream::QuestionOnly),
            other => Err(Error::invalid(format!("unknown stream name {other:?}"))),
        }
    }
}

/// A subset of the four streams, always iterated in canonical order
/// (full, no_image, no_context, question_only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamMask(u8);

impl StreamMask {
    pub const ALL: StreamMask = StreamMask(0b1111);
    pub const FULL_ONLY: StreamMask = StreamMask(0b0001);

    pub fn empty() -> Self {
        StreamMask(0)
    }

    pub fn from_streams<I: IntoIterator<Item = Stream>>(streams: I) -> Self {
        let mut mask = Self::empty();
        for s in streams {
            mask.0 |= 1 << s.index();
        }
        mask
    }

    pub fn contains(self, s: Stream) -> bool {
        self.0 & (1 << s.index()) != 0
    }

    pub fn without(self, s: Stream) -> Self {
        StreamMask(self.0 & !(1 << s.index()))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: StreamMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Stream> {
        Stream::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl fmt::Display for StreamMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Stream::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for StreamMask {
    type Err = Error;

    /// Comma-separated stream names, or `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(StreamMask::ALL);
        }
        let mut mask = StreamMask::empty();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            mask = StreamMask(mask.0 | (1 << part.parse::<Stream>()?.index()));
        }
        if mask.is_empty() {
            return Err(Error::invalid("stream mask is empty"));
        }
        Ok(mask)
    }
}

impl Serialize for StreamMask {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter().map(Stream::name))
    }
}

impl<'de> Deserialize<'de> for StreamMask {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let streams = Vec::<Stream>::deserialize(deserializer)?;
        Ok(StreamMask::from_streams(streams))
    }
}

/// An auxiliary sampled response, used by the multi-sample baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub tokens: Vec<String>,
    pub stream_full: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub context_source: ContextSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub response_tokens: Vec<String>,
    pub stream_full: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_no_image: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_no_context: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_question_only: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SampledResponse>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptrue_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imgper_top1_original: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imgper_top1_black: Option<Vec<f64>>,
    /// Fields not part of the schema, preserved verbatim.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl GenerationRecord {
    /// Minimal record with only the full-input stream.
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        tokens: Vec<String>,
        stream_full: Vec<f64>,
    ) -> Self {
        GenerationRecord {
            id: id.into(),
            question: question.into(),
            context: String::new(),
            context_source: ContextSource::None,
            image_ref: None,
            response_tokens: tokens,
            stream_full,
            stream_no_image: None,
            stream_no_context: None,
            stream_question_only: None,
            label: None,
            gold_answers: None,
            samples: None,
            ptrue_prob: None,
            imgper_top1_original: None,
            imgper_top1_black: None,
            extra: Map::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response_tokens.is_empty()
    }

    pub fn stream(&self, s: Stream) -> Option<&[f64]> {
        match s {
            Stream::Full => Some(&self.stream_full),
            Stream::NoImage => self.stream_no_image.as_deref(),
            Stream::NoContext => self.stream_no_context.as_deref(),
            Stream::QuestionOnly => self.stream_question_only.as_deref(),
        }
    }

    pub fn set_stream(&mut self, s: Stream, probs: Vec<f64>) {
        match s {
            Stream::Full => self.stream_full = probs,
            Stream::NoImage => self.stream_no_image = Some(probs),
            Stream::NoContext => self.stream_no_context = Some(probs),
            Stream::QuestionOnly => self.stream_question_only = Some(probs),
        }
    }

    pub fn available_streams(&self) -> StreamMask {
        StreamMask::from_streams(
            Stream::ALL
                .into_iter()
                .filter(|s| self.stream(*s).is_some()),
        )
    }

    /// The explicit label if present, otherwise exact match against the gold
    /// answers if those are present.
    pub fn resolved_label(&self) -> Option<u8> {
        if let Some(label) = self.label {
            return Some(label);
        }
        let gold = self.gold_answers.as_ref()?;
        exact_match(&self.response_tokens, gold).ok().map(u8::from)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.id.as_str();
        if id.is_empty() {
            return Err(Error::validation("<empty>", "id", "must be nonempty"));
        }
        let n = self.response_tokens.len();
        if n == 0 {
            return Err(Error::validation(
                id,
                "response_tokens",
                "must contain at least one token",
            ));
        }
        for s in Stream::ALL {
            if let Some(probs) = self.stream(s) {
                check_stream(id, stream_field(s), probs, n)?;
            }
        }
        if let Some(label) = self.label {
            if label > 1 {
                return Err(Error::validation(
                    id,
                    "label",
                    format!("must be 0 or 1, got {label}"),
                ));
            }
        }
        match self.context_source {
            ContextSource::None if !self.context.is_empty() => {
                return Err(Error::validation(
                    id,
                    "context",
                    "context_source none requires an empty context",
                ));
            }
            ContextSource::Gold if self.context.is_empty() => {
                return Err(Error::validation(
                    id,
                    "context",
                    "context_source gold requires a nonempty context",
                ));
            }
            _ => {}
        }
        if let Some(gold) = &self.gold_answers {
            if gold.is_empty() {
                return Err(Error::validation(
                    id,
                    "gold_answers",
                    "must be nonempty when present",
                ));
            }
        }
        if let Some(p) = self.ptrue_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(
                    id,
                    "ptrue_prob",
                    format!("{p} outside [0, 1]"),
                ));
            }
        }
        for (field, seq) in [
            ("imgper_top1_original", &self.imgper_top1_original),
            ("imgper_top1_black", &self.imgper_top1_black),
        ] {
            if let Some(seq) = seq {
                if seq.len() != n {
                    return Err(Error::validation(
                        id,
                        field,
                        format!("length mismatch: {} values for {n} tokens", seq.len()),
                    ));
                }
                if let Some(p) = seq.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::validation(id, field, format!("{p} outside [0, 1]")));
                }
            }
        }
        if let Some(samples) = &self.samples {
            let mut dim = None;
            for sample in samples {
                if sample.tokens.is_empty() {
                    return Err(Error::validation(id, "samples", "sample has no tokens"));
                }
                check_stream(id, "samples", &sample.stream_full, sample.tokens.len())?;
                if let Some(e) = &sample.embedding {
                    match dim {
                        None => dim = Some(e.len()),
                        Some(d) if d != e.len() => {
                            return Err(Error::validation(
                                id,
                                "samples",
                                format!("embedding dimension {} differs from {d}", e.len()),
                            ));
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}

fn stream_field(s: Stream) -> &'static str {
    match s {
        Stream::Full => "stream_full",
        Stream::NoImage => "stream_no_image",
        Stream::NoContext => "stream_no_context",
        Stream::QuestionOnly => "stream_question_only",
    }
}

fn check_stream(id: &str, field: &'static str, probs: &[f64], n: usize) -> Result<()> {
    if probs.len() != n {
        return Err(Error::validation(
            id,
            field,
            format!(
                "length mismatch: {} probabilities for {n} tokens",
                probs.len()
            ),
        ));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::validation(
            id,
            field,
            format!("probability {p} outside (0, 1]"),
        ));
    }
    Ok(())
}

/// Free-text metadata describing where a dataset came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retriever: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of an extra record field whose value groups records that must
    /// not be separated by [`split_dataset`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<GenerationRecord>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(records: Vec<GenerationRecord>) -> Result<Self> {
        let d = Dataset {
            records,
            provenance: Provenance::default(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            rec.validate()?;
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::validation(&rec.id, "id", "duplicate record id"));
            }
        }
        Ok(())
    }

    fn with_records(&self, records: Vec<GenerationRecord>) -> Dataset {
        Dataset {
            records,
            provenance: self.provenance.clone(),
        }
    }
}

/// Parses JSONL text into a validated dataset. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_records(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(line).map_err(|source| Error::Parse {
            line: idx + 1,
            source,
        })?;
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::validation(&rec.id, "id", "duplicate record id"));
        }
        records.push(rec);
    }
    Ok(Dataset {
        records,
        provenance: Provenance::default(),
    })
}

pub fn write_records(d: &Dataset) -> String {
    let mut out = String::new();
    for rec in &d.records {
        out.push_str(&serde_json::to_string(rec).expect("records always serialize"));
        out.push('\n');
    }
    out
}

fn normalize_answer(s: &str) -> String {
    let collapsed = s
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    match collapsed.strip_suffix('.') {
        Some(stripped) => stripped.trim_end().to_string(),
        None => collapsed,
    }
}

/// Exact match between the space-joined response and any gold answer after
/// normalization (lowercase, whitespace collapsed and trimmed, one terminal
/// period removed).
pub fn exact_match<S: AsRef<str>>(response_tokens: &[S], gold_answers: &[String]) -> Result<bool> {
    if gold_answers.is_empty() {
        return Err(Error::invalid(
            "exact_match requires at least one gold answer",
        ));
    }
    let joined = response_tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ");
    let response = normalize_answer(&joined);
    Ok(gold_answers.iter().any(|g| normalize_answer(g) == response))
}

/// Deterministic train/validation split. When the provenance names a group
/// key, records sharing that key's value end up in the same split.
pub fn split_dataset(d: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = d.records.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "cannot split a dataset of {n} record(s)"
        )));
    }

    // Groups in order of first appearance.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_key: BTreeMap<String, usize> = BTreeMap::new();
    for (i, rec) in d.records.iter().enumerate() {
        let key = d
            .provenance
            .group_key
            .as_ref()
            .and_then(|k| rec.extra.get(k))
            .map(|v| v.to_string());
        match key {
            Some(key) => match by_key.get(&key) {
                Some(&g) => groups[g].push(i),
                None => {
                    by_key.insert(key, groups.len());
                    groups.push(vec![i]);
                }
            },
            None => groups.push(vec![i]),
        }
    }

    let target = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut in_val = vec![false; n];
    let mut val_count = 0;
    for g in order {
        if val_count == target {
            break;
        }
        if val_count + groups[g].len() <= target {
            val_count += groups[g].len();
            for &i in &groups[g] {
                in_val[i] = true;
            }
        }
    }
    if val_count == 0 {
        return Err(Error::invalid("no group fits in the validation split"));
    }

    let (mut train, mut val) = (
        Vec::with_capacity(n - val_count),
        Vec::with_capacity(val_count),
    );
    for (rec, v) in d.records.iter().zip(in_val) {
        if v {
            val.push(rec.clone());
        } else {
            train.push(rec.clone());
        }
    }
    Ok((d.with_records(train), d.with_records(val)))
}
