//! Queries, retrieved documents and the token-span layout of an assembled
//! prompt.
//!
//! A prompt is laid out as `[instruction][doc_1]...[doc_k][query]`. The
//! context part (instruction plus documents) covers token positions
//! `[0, n)` and is partitioned into [`SegmentSpan`]s; the query occupies the
//! `m` positions that follow. Every column of a query-to-context attention
//! matrix therefore maps to exactly one span.

use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    /// Provider-supplied token count. Falls back to the word count of `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
            token_count: None,
        }
    }

    pub fn with_token_count(mut self, count: usize) -> Self {
        self.token_count = Some(count);
        self
    }

    pub fn tokens(&self) -> Result<usize> {
        match self.token_count {
            Some(0) => Err(Error::invalid(format!("document `{}` has zero tokens", self.id))),
            Some(c) => Ok(c),
            None => fallback_token_count(&self.text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::invalid(format!("document `{}` has empty text", self.id)));
        }
        self.tokens().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    #[serde(default, rename = "answers")]
    pub gold_answers: Vec<String>,
    pub documents: Vec<Document>,
    #[serde(default, rename = "labels", skip_serializing_if = "Option::is_none")]
    pub relevance_labels: Option<Vec<u8>>,
}

impl QuerySample {
    pub fn validate(&self) -> Result<()> {
        for doc in &self.documents {
            doc.validate()?;
        }
        if let Some(labels) = &self.relevance_labels {
            if labels.len() != self.documents.len() {
                return Err(Error::invalid(format!(
                    "{} relevance labels for {} documents",
                    labels.len(),
                    self.documents.len()
                )));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::invalid("relevance labels must be 0 or 1"));
            }
        }
        let mut ids: Vec<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate document ids in sample"));
        }
        Ok(())
    }

    /// Ids of documents labelled relevant, in retrieval order.
    pub fn relevant_ids(&self) -> Vec<String> {
        match &self.relevance_labels {
            Some(labels) => self
                .documents
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == 1)
                .map(|(d, _)| d.id.clone())
                .collect(),
            None => Vec::new(),
        }
    }

    /// Same sample restricted to `docs`, in the given order. Labels follow
    /// their documents.
    pub fn with_documents(&self, order: &[usize]) -> QuerySample {
        QuerySample {
            id: self.id.clone(),
            query: self.query.clone(),
            gold_answers: self.gold_answers.clone(),
            documents: order.iter().map(|&i| self.documents[i].clone()).collect(),
            relevance_labels: self
                .relevance_labels
                .as_ref()
                .map(|l| order.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Reads a JSON-Lines dataset. Blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<QuerySample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: QuerySample = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        sample
            .validate()
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Instruction,
    Document,
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Granularity {
    #[default]
    DocumentLevel,
    SentenceLevel,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doc" | "document" => Ok(Granularity::DocumentLevel),
            "sentence" | "sent" => Ok(Granularity::SentenceLevel),
            other => Err(Error::invalid(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub owner_id: String,
    pub start: usize,
    pub end: usize,
}

impl SegmentSpan {
    pub fn new(kind: SegmentKind, owner_id: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            kind,
            owner_id: owner_id.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

pub const INSTRUCTION_ID: &str = "instruction";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    context_spans: Vec<SegmentSpan>,
    n: usize,
    m: usize,
    granularity: Granularity,
}

impl PromptLayout {
    /// Builds a layout from an explicit span table, checking the partition
    /// invariant.
    pub fn from_spans(spans: Vec<SegmentSpan>, m: usize, granularity: Granularity) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("query span must contain at least one token"));
        }
        let Some(first) = spans.first() else {
            return Err(Error::NoSegments);
        };
        if first.kind != SegmentKind::Instruction {
            return Err(Error::invalid("first context span must be the instruction"));
        }
        let mut cursor = 0;
        for span in &spans {
            if span.is_empty() {
                return Err(Error::invalid(format!(
                    "empty span {}..{} for `{}`",
                    span.start, span.end, span.owner_id
                )));
            }
            if span.start != cursor {
                return Err(Error::invalid(format!(
                    "span table is not a partition: gap or overlap at {}..{}",
                    cursor.min(span.start),
                    cursor.max(span.start)
                )));
            }
            cursor = span.end;
        }
        if spans.iter().filter(|s| s.kind == SegmentKind::Instruction).count() != 1 {
            return Err(Error::invalid("layout must contain exactly one instruction span"));
        }
        let expected = match granularity {
            Granularity::DocumentLevel => SegmentKind::Document,
            Granularity::SentenceLevel => SegmentKind::Sentence,
        };
        if spans[1..].iter().any(|s| s.kind != expected) {
            return Err(Error::invalid(format!(
                "{granularity:?} layout contains a span that is not of kind {expected:?}"
            )));
        }
        Ok(Self {
            n: cursor,
            context_spans: spans,
            m,
            granularity,
        })
    }

    pub fn context_spans(&self) -> &[SegmentSpan] {
        &self.context_spans
    }

    pub fn instruction_span(&self) -> &SegmentSpan {
        &self.context_spans[0]
    }

    /// Document or sentence spans, in prompt order.
    pub fn segment_spans(&self) -> &[SegmentSpan] {
        &self.context_spans[1..]
    }

    /// Context token count.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Query token count.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn query_span(&self) -> Range<usize> {
        self.n..self.n + self.m
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Distinct document ids in prompt order.
    pub fn document_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for span in self.segment_spans() {
            if ids.last() != Some(&span.owner_id) {
                ids.push(span.owner_id.clone());
            }
        }
        ids
    }

    /// Token range covered by each document, in prompt order.
    pub fn document_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for span in self.segment_spans() {
            match out.last_mut() {
                Some((id, r)) if *id == span.owner_id => r.end = span.end,
                _ => out.push((span.owner_id.clone(), span.range())),
            }
        }
        out
    }

    /// Maps every context column to its index in `context_spans`.
    pub fn column_owner(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n];
        for (idx, span) in self.context_spans.iter().enumerate() {
            owner[span.range()].fill(idx);
        }
        owner
    }
}

/// Lays out instruction, documents and query, in retrieval order.
pub fn assemble_layout(
    instruction_token_count: usize,
    documents: &[Document],
    query_token_count: usize,
    granularity: Granularity,
) -> Result<PromptLayout> {
    if instruction_token_count == 0 || query_token_count == 0 {
        return Err(Error::invalid("token counts must be at least 1"));
    }
    if documents.is_empty() {
        return Err(Error::NoSegments);
    }
    let mut spans = vec![SegmentSpan::new(
        SegmentKind::Instruction,
        INSTRUCTION_ID,
        0,
        instruction_token_count,
    )];
    let mut cursor = instruction_token_count;
    for doc in documents {
        match granularity {
            Granularity::DocumentLevel => {
                let len = doc.tokens()?;
                spans.push(SegmentSpan::new(SegmentKind::Document, &doc.id, cursor, cursor + len));
                cursor += len;
            }
            Granularity::SentenceLevel => {
                let sentences = split_sentences(&doc.text);
                if sentences.is_empty() {
                    return Err(Error::invalid(format!("document `{}` has no sentences", doc.id)));
                }
                for sentence in sentences {
                    let len = fallback_token_count(sentence)?;
                    spans.push(SegmentSpan::new(SegmentKind::Sentence, &doc.id, cursor, cursor + len));
                    cursor += len;
                }
            }
        }
    }
    PromptLayout::from_spans(spans, query_token_count, granularity)
}

/// Whitespace-delimited word count.
pub fn fallback_token_count(text: &str) -> Result<usize> {
    match text.split_whitespace().count() {
        0 => Err(Error::Untokenizable),
        c => Ok(c),
    }
}

/// Tokens ending in a period that do not terminate a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "Dr", "Mr", "Mrs", "Ms", "Prof", "Sr", "Jr", "St", "Mt", "Gen", "Col", "Lt", "Sgt", "Capt",
    "Rev", "Hon", "Inc", "Ltd", "Co", "Corp", "No", "Fig", "vs", "etc", "e.g", "i.e", "approx",
    "Jan", "Feb", "Mar", "Apr", "Jun", "Jul", "Aug", "Sep", "Sept", "Oct", "Nov", "Dec",
];

/// Byte ranges of the sentences in `text`. Text between consecutive ranges
/// (and before the first / after the last) is whitespace only.
pub fn sentence_ranges(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        if matches!(c, '.' | '?' | '!') {
            // absorb runs like "?!" or "..."
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '?' | '!') {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let boundary = k > j && k < chars.len() && chars[k].1.is_uppercase();
            let s = start.unwrap_or(pos);
            if boundary && !(c == '.' && j == i + 1 && ends_with_abbreviation(&text[s..pos])) {
                out.push(s..end);
                start = None;
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            out.push(s..end);
        }
    }
    out
}

fn ends_with_abbreviation(before_period: &str) -> bool {
    let word = before_period
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.contains(&word)
}

/// Rule-based sentence splitter: a sentence ends at `.`, `?` or `!` followed
/// by whitespace and an uppercase letter, unless the period closes a known
/// abbreviation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_ranges(text).into_iter().map(|r| &text[r]).collect()
}
