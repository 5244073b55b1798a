//! Relevance labelling by shuffle-and-intersect compression, verified with
//! a generator.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, QuerySample};
use crate::error::{Error, Result};
use crate::generator::GeneratorClient;
use crate::provider::Scorer;
use crate::rng::derive_seed;
use crate::topp::{compress, TopPConfig};

/// Anything that picks a subset of a sample's documents.
pub trait Compressor: Send + Sync {
    /// Ids of the retained documents of `sample`, which holds its documents
    /// in the order they should be presented.
    fn retain(&self, sample: &QuerySample, config: &TopPConfig) -> Result<Vec<String>>;
}

impl Compressor for Scorer<'_> {
    fn retain(&self, sample: &QuerySample, config: &TopPConfig) -> Result<Vec<String>> {
        let (scores, _) = self.score(sample)?;
        let kept = compress(&scores, config).kept;
        let mut docs = Vec::new();
        for seg in &scores.segments {
            if kept.contains(&seg.id) && !docs.contains(&seg.doc_id) {
                docs.push(seg.doc_id.clone());
            }
        }
        Ok(docs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchPolicy {
    /// Normalized gold is a substring of the normalized prediction.
    #[default]
    Contains,
    /// Normalized strings are equal.
    Exact,
}

impl std::str::FromStr for MatchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contains" => Ok(MatchPolicy::Contains),
            "exact" => Ok(MatchPolicy::Exact),
            other => Err(Error::invalid(format!("unknown match policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for MatchPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchPolicy::Contains => "contains",
            MatchPolicy::Exact => "exact",
        })
    }
}

/// Lowercases, strips punctuation, drops the articles `a`, `an`, `the` and
/// collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalize_and_match(predicted: &str, golds: &[String], policy: MatchPolicy) -> bool {
    let pred = normalize_answer(predicted);
    golds.iter().any(|g| {
        let gold = normalize_answer(g);
        match policy {
            MatchPolicy::Contains => !gold.is_empty() && pred.contains(&gold),
            MatchPolicy::Exact => pred == gold,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub shuffles: usize,
    pub p: f64,
    pub epsilon: f64,
    pub max_fixpoint_iters: usize,
    pub seed: u64,
    pub policy: MatchPolicy,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            shuffles: 3,
            p: 0.95,
            epsilon: 1e-2,
            max_fixpoint_iters: 20,
            seed: 0,
            policy: MatchPolicy::Contains,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shuffles == 0 {
            return Err(Error::invalid("shuffle count must be at least 1"));
        }
        if self.max_fixpoint_iters == 0 {
            return Err(Error::invalid("fixpoint cap must be at least 1"));
        }
        self.topp().map(|_| ())
    }

    pub fn topp(&self) -> Result<TopPConfig> {
        TopPConfig::new(self.p, self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixpoint {
    /// Ids of the stable subset, in the order they were presented.
    pub retained: Vec<String>,
    pub iterations: usize,
}

/// Recompresses the retained documents until a pass keeps as many documents
/// as it was given, and returns that pass's input.
pub fn compress_to_fixpoint(
    compressor: &dyn Compressor,
    sample: &QuerySample,
    config: &TopPConfig,
    max_iters: usize,
) -> Result<Fixpoint> {
    let mut current = sample.clone();
    for iteration in 1..=max_iters {
        if current.documents.is_empty() {
            return Ok(Fixpoint {
                retained: Vec::new(),
                iterations: iteration - 1,
            });
        }
        let kept = compressor.retain(&current, config)?;
        if kept.len() == current.documents.len() {
            return Ok(Fixpoint {
                retained: current.documents.iter().map(|d| d.id.clone()).collect(),
                iterations: iteration,
            });
        }
        let order: Vec<usize> = current
            .documents
            .iter()
            .enumerate()
            .filter(|(_, d)| kept.contains(&d.id))
            .map(|(i, _)| i)
            .collect();
        if order.len() != kept.len() {
            return Err(Error::invalid("compressor retained documents it was not given"));
        }
        current = current.with_documents(&order);
    }
    Err(Error::NoConvergence(max_iters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnnotationOutcome {
    Positive {
        query: String,
        positive: Vec<Document>,
        negative: Vec<Document>,
    },
    Negative {
        query: String,
        negative: Vec<Document>,
    },
    Discarded,
}

/// One line of annotated output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub query: String,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    pub variant: String,
}

impl AnnotationOutcome {
    pub fn record(&self) -> Option<AnnotationRecord> {
        let ids = |docs: &[Document]| docs.iter().map(|d| d.id.clone()).collect();
        match self {
            AnnotationOutcome::Positive {
                query,
                positive,
                negative,
            } => Some(AnnotationRecord {
                query: query.clone(),
                positive_ids: ids(positive),
                negative_ids: ids(negative),
                variant: "positive".into(),
            }),
            AnnotationOutcome::Negative { query, negative } => Some(AnnotationRecord {
                query: query.clone(),
                positive_ids: Vec::new(),
                negative_ids: ids(negative),
                variant: "negative".into(),
            }),
            AnnotationOutcome::Discarded => None,
        }
    }
}

pub struct Annotator<'a> {
    pub compressor: &'a dyn Compressor,
    pub generator: &'a dyn GeneratorClient,
    /// Pool for replacement documents in negative examples.
    pub corpus: &'a [Document],
    pub config: AnnotationConfig,
}

impl Annotator<'_> {
    /// Documents retained in every shuffled round, in retrieval order.
    pub fn label(&self, sample: &QuerySample) -> Result<Vec<Document>> {
        let topp = self.config.topp()?;
        let mut canonical: Vec<usize> = (0..sample.documents.len()).collect();
        canonical.sort_by(|&a, &b| sample.documents[a].id.cmp(&sample.documents[b].id));
        let mut common: Option<BTreeSet<String>> = None;
        for round in 0..self.config.shuffles {
            let mut order = canonical.clone();
            let mut rng = Pcg64::seed_from_u64(derive_seed(self.config.seed, &format!("{}\u{0}{round}", sample.query)));
            order.shuffle(&mut rng);
            let fix = compress_to_fixpoint(
                self.compressor,
                &sample.with_documents(&order),
                &topp,
                self.config.max_fixpoint_iters,
            )?;
            let kept: BTreeSet<String> = fix.retained.into_iter().collect();
            common = Some(match common {
                None => kept,
                Some(c) => c.intersection(&kept).cloned().collect(),
            });
        }
        let common = common.unwrap_or_default();
        Ok(sample.documents.iter().filter(|d| common.contains(&d.id)).cloned().collect())
    }

    pub fn annotate(&self, sample: &QuerySample) -> Result<AnnotationOutcome> {
        self.config.validate()?;
        if sample.gold_answers.is_empty() {
            return Err(Error::invalid("annotation needs gold answers"));
        }
        let positive = self.label(sample)?;
        let positive_ids: HashSet<&str> = positive.iter().map(|d| d.id.as_str()).collect();
        let rest: Vec<Document> = sample
            .documents
            .iter()
            .filter(|d| !positive_ids.contains(d.id.as_str()))
            .cloned()
            .collect();
        let golds = &sample.gold_answers;
        if !positive.is_empty() {
            let answer = self.generator.generate(&sample.query, &positive)?;
            if normalize_and_match(&answer, golds, self.config.policy) {
                return Ok(AnnotationOutcome::Positive {
                    query: sample.query.clone(),
                    positive,
                    negative: rest,
                });
            }
        }
        let answer = self.generator.generate(&sample.query, &sample.documents)?;
        if normalize_and_match(&answer, golds, self.config.policy) {
            return Ok(AnnotationOutcome::Discarded);
        }
        let mut negative = rest;
        negative.extend(self.replacements(sample, positive.len())?);
        Ok(AnnotationOutcome::Negative {
            query: sample.query.clone(),
            negative,
        })
    }

    fn replacements(&self, sample: &QuerySample, count: usize) -> Result<Vec<Document>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let taken: HashSet<&str> = sample.documents.iter().map(|d| d.id.as_str()).collect();
        let pool: Vec<&Document> = self.corpus.iter().filter(|d| !taken.contains(d.id.as_str())).collect();
        if pool.len() < count {
            return Err(Error::invalid(format!(
                "corpus has {} unused documents, need {count}",
                pool.len()
            )));
        }
        let mut rng = Pcg64::seed_from_u64(derive_seed(self.config.seed, &format!("replace\u{0}{}", sample.query)));
        Ok(pool.sample(&mut rng, count).map(|d| (*d).clone()).collect())
    }
}

pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
