//! Batch evaluation: score, compress, optionally generate, and report.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{normalize_and_match, normalize_answer, MatchPolicy};
use crate::confidence::confidence;
use crate::corpus::{split_sentences, Document, Granularity, QuerySample};
use crate::error::{Error, Result};
use crate::generator::GeneratorClient;
use crate::provider::Scorer;
use crate::topp::{compress, TopPConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub tokens_retrieved: usize,
    /// Tokens of the kept segments, at least 1.
    pub tokens_compressed: usize,
    pub kept: Vec<String>,
    pub confidence: f64,
    pub s_ins: f64,
    /// Whether the sample has any document labelled relevant, when labels exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answerable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub compression_secs: f64,
    pub generation_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub index: usize,
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionRate {
    pub value: f64,
    /// Set when no compressed tokens were recorded; `value` is then infinite.
    pub infinite: bool,
}

pub fn compression_rate(records: &[EvalRecord]) -> Result<CompressionRate> {
    if records.is_empty() {
        return Err(Error::NoSamples);
    }
    let retrieved: usize = records.iter().map(|r| r.tokens_retrieved).sum();
    let compressed: usize = records.iter().map(|r| r.tokens_compressed).sum();
    if compressed == 0 {
        return Ok(CompressionRate {
            value: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(CompressionRate {
        value: retrieved as f64 / compressed as f64,
        infinite: false,
    })
}

/// Token-overlap F1 against the best-matching gold answer.
pub fn token_f1(predicted: &str, golds: &[String]) -> f64 {
    let pred = normalize_answer(predicted);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    golds
        .iter()
        .map(|g| {
            let gold = normalize_answer(g);
            let gold: Vec<&str> = gold.split_whitespace().collect();
            if pred.is_empty() || gold.is_empty() {
                return if pred == gold { 1.0 } else { 0.0 };
            }
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in &gold {
                *counts.entry(t).or_default() += 1;
            }
            let mut common = 0;
            for t in &pred {
                if let Some(c) = counts.get_mut(t) {
                    if *c > 0 {
                        *c -= 1;
                        common += 1;
                    }
                }
            }
            if common == 0 {
                return 0.0;
            }
            let precision = common as f64 / pred.len() as f64;
            let recall = common as f64 / gold.len() as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub granularity: Granularity,
    pub topp: TopPConfig,
    pub parallelism: usize,
    pub seed: u64,
    pub policy: MatchPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::DocumentLevel,
            topp: TopPConfig::default(),
            parallelism: 1,
            seed: 0,
            policy: MatchPolicy::Contains,
        }
    }
}

/// Kept documents in retrieval order. At sentence granularity each
/// document's text is reduced to its kept sentences.
pub fn compressed_documents(sample: &QuerySample, kept: &[String], granularity: Granularity) -> Vec<Document> {
    match granularity {
        Granularity::DocumentLevel => sample
            .documents
            .iter()
            .filter(|d| kept.contains(&d.id))
            .cloned()
            .collect(),
        Granularity::SentenceLevel => sample
            .documents
            .iter()
            .filter_map(|d| {
                let text: Vec<&str> = split_sentences(&d.text)
                    .into_iter()
                    .enumerate()
                    .filter(|(k, _)| kept.contains(&format!("{}#{k}", d.id)))
                    .map(|(_, s)| s.trim())
                    .collect();
                (!text.is_empty()).then(|| Document::new(d.id.clone(), d.title.clone(), text.join(" ")))
            })
            .collect(),
    }
}

pub fn evaluate_sample(
    sample: &QuerySample,
    index: usize,
    scorer: &Scorer<'_>,
    generator: Option<&dyn GeneratorClient>,
    config: &RunConfig,
) -> Result<EvalRecord> {
    sample.validate()?;
    let started = Instant::now();
    let (scores, layout) = scorer.score(sample)?;
    let result = compress(&scores, &config.topp);
    let compression_secs = started.elapsed().as_secs_f64();

    let spans = layout.segment_spans();
    let tokens_retrieved: usize = spans.iter().map(|s| s.len()).sum();
    let tokens_compressed: usize = scores
        .segments
        .iter()
        .zip(spans)
        .filter(|(seg, _)| result.kept.contains(&seg.id))
        .map(|(_, span)| span.len())
        .sum();

    let mut record = EvalRecord {
        id: sample.id.clone().unwrap_or_else(|| format!("#{index}")),
        tokens_retrieved,
        tokens_compressed: tokens_compressed.max(1),
        kept: result.kept.clone(),
        confidence: confidence(&scores).value(),
        s_ins: scores.instruction,
        answerable: sample.relevance_labels.as_ref().map(|l| l.contains(&1)),
        predicted: None,
        f1: None,
        accuracy: None,
        compression_secs,
        generation_secs: 0.0,
    };
    if let Some(generator) = generator {
        let docs = compressed_documents(sample, &result.kept, config.granularity);
        let started = Instant::now();
        let answer = generator.generate(&sample.query, &docs)?;
        record.generation_secs = started.elapsed().as_secs_f64();
        record.f1 = Some(token_f1(&answer, &sample.gold_answers));
        record.accuracy = Some(if normalize_and_match(&answer, &sample.gold_answers, config.policy) {
            1.0
        } else {
            0.0
        });
        record.predicted = Some(answer);
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<Failure>,
    pub policy: MatchPolicy,
    pub seed: u64,
}

/// Evaluates every sample on a pool of `config.parallelism` workers.
/// Records come back in dataset order; failed samples are set aside.
pub fn run_eval(
    samples: &[QuerySample],
    scorer: &Scorer<'_>,
    generator: Option<&dyn GeneratorClient>,
    config: &RunConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<EvalRecord>> = pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| evaluate_sample(s, i, scorer, generator, config))
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (index, (sample, result)) in samples.iter().zip(results).enumerate() {
        match result {
            Ok(r) => records.push(r),
            Err(e) => failures.push(Failure {
                index,
                id: sample.id.clone().unwrap_or_else(|| format!("#{index}")),
                error: e.to_string(),
            }),
        }
    }
    Ok(EvalReport {
        records,
        failures,
        policy: config.policy,
        seed: config.seed,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// `(metric, value)` rows. Timing metrics end in `_secs`.
    pub fn aggregate(&self) -> Vec<(String, String)> {
        let r = &self.records;
        let mut rows = vec![
            ("samples".to_string(), (r.len() + self.failures.len()).to_string()),
            ("evaluated".to_string(), r.len().to_string()),
            ("failures".to_string(), self.failures.len().to_string()),
        ];
        if let Ok(rate) = compression_rate(r) {
            rows.push(("compression_rate".into(), rate.value.to_string()));
            rows.push(("compression_rate_infinite".into(), rate.infinite.to_string()));
        }
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push((name.to_string(), v.to_string()));
            }
        };
        push("tokens_retrieved", Some(r.iter().map(|x| x.tokens_retrieved as f64).sum()));
        push("tokens_compressed", Some(r.iter().map(|x| x.tokens_compressed as f64).sum()));
        push("mean_kept", mean(r.iter().map(|x| x.kept.len() as f64)));
        push("empty_fraction", mean(r.iter().map(|x| x.kept.is_empty() as u8 as f64)));
        push("mean_confidence", mean(r.iter().map(|x| x.confidence)));
        push("mean_f1", mean(r.iter().filter_map(|x| x.f1)));
        push("accuracy", mean(r.iter().filter_map(|x| x.accuracy)));
        push("mean_compression_secs", mean(r.iter().map(|x| x.compression_secs)));
        push("mean_generation_secs", mean(r.iter().map(|x| x.generation_secs)));
        rows
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = format!("# accuracy_policy={},seed={}\nmetric,value\n", self.policy, self.seed);
        for (k, v) in self.aggregate() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// Writes `records.jsonl`, `aggregate.csv` and `failures.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))
        };
        write("records.jsonl", jsonl(&self.records)?)?;
        write("failures.jsonl", jsonl(&self.failures)?)?;
        write("aggregate.csv", self.aggregate_csv())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
