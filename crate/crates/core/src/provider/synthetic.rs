//! Seeded hidden states with planted relevance.
//!
//! A fixed unit direction `u` stands in for "what the query asks about".
//! Query tokens and tokens of relevant documents sit near `u`; tokens of
//! irrelevant documents and of the instruction are unit-scale noise with the
//! `u` component removed. Instruction tokens are drawn from the direction
//! seed, so every prompt shares the same instruction states, the way a fixed
//! instruction text does in a real model.
//!
//! Every document's tokens come from a stream keyed by the sample seed and
//! the document id, so permuting documents permutes rows and nothing else.

use std::collections::HashSet;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_layout, Document, Granularity, PromptLayout, QuerySample};
use crate::error::{Error, Result};
use crate::head::{HiddenBundle, Matrix};
use crate::rng::{derive_seed, GaussianStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub d_model: usize,
    pub sigma: f64,
    pub direction_seed: u64,
    pub instruction_tokens: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            d_model: 32,
            sigma: 0.25,
            direction_seed: 0,
            instruction_tokens: 16,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 {
            return Err(Error::invalid("synthetic d_model must be at least 2"));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::invalid("synthetic sigma must be non-negative"));
        }
        if self.instruction_tokens == 0 {
            return Err(Error::invalid("synthetic instruction needs at least one token"));
        }
        Ok(())
    }

    /// The planted relevance direction.
    pub fn direction(&self) -> Array1<f64> {
        let mut g = GaussianStream::new(derive_seed(self.direction_seed, "direction"));
        let v = Array1::from(g.normals(self.d_model, 1.0));
        let norm = v.dot(&v).sqrt();
        v / norm
    }

    /// Parses `key=value` pairs separated by commas, e.g. `d_model=32,sigma=0.1`.
    pub fn parse_inline(spec: &str) -> Result<Self> {
        let mut p = Self::default();
        for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, found `{pair}`")))?;
            let bad = |_| Error::invalid(format!("bad value for {key}: `{value}`"));
            match key.trim() {
                "d_model" => p.d_model = value.trim().parse().map_err(bad)?,
                "sigma" => p.sigma = value.trim().parse().map_err(|_| Error::invalid(format!("bad sigma `{value}`")))?,
                "direction_seed" => p.direction_seed = value.trim().parse().map_err(bad)?,
                "instruction_tokens" => p.instruction_tokens = value.trim().parse().map_err(bad)?,
                other => return Err(Error::invalid(format!("unknown synthetic parameter `{other}`"))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Inputs for one synthetic prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub params: SyntheticParams,
    pub relevant_doc_ids: Vec<String>,
    /// `(id, token count)` per document, in prompt order.
    pub doc_tokens: Vec<(String, usize)>,
    pub query_tokens: usize,
}

fn unit_noise(g: &mut GaussianStream, d: usize) -> Array1<f64> {
    Array1::from(g.normals(d, 1.0 / (d as f64).sqrt()))
}

fn orthogonal_noise(g: &mut GaussianStream, u: &Array1<f64>) -> Array1<f64> {
    let z = unit_noise(g, u.len());
    let proj = z.dot(u);
    z - u * proj
}

/// Hidden states for an arbitrary layout. Documents in `relevant` get
/// tokens near the planted direction.
pub fn generate_for_layout(
    layout: &PromptLayout,
    relevant: &HashSet<&str>,
    params: &SyntheticParams,
    seed: u64,
) -> Result<HiddenBundle> {
    params.validate()?;
    let d = params.d_model;
    let u = params.direction();
    let mut context = Matrix::zeros((layout.n(), d));

    let mut ins = GaussianStream::new(derive_seed(params.direction_seed, "instruction"));
    for row in layout.instruction_span().range() {
        context.row_mut(row).assign(&orthogonal_noise(&mut ins, &u));
    }
    for (id, range) in layout.document_ranges() {
        let mut g = GaussianStream::new(derive_seed(seed, &format!("doc:{id}")));
        let planted = relevant.contains(id.as_str());
        for row in range {
            let v = if planted {
                &u + &(unit_noise(&mut g, d) * params.sigma)
            } else {
                orthogonal_noise(&mut g, &u)
            };
            context.row_mut(row).assign(&v);
        }
    }

    let mut g = GaussianStream::new(derive_seed(seed, "query"));
    let mut query = Matrix::zeros((layout.m(), d));
    for mut row in query.rows_mut() {
        row.assign(&(&u + &(unit_noise(&mut g, d) * params.sigma)));
    }
    HiddenBundle::new(context, query, layout.clone())
}

/// Hidden states plus ground-truth labels (1 for planted documents).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(HiddenBundle, Vec<u8>)> {
    let docs: Vec<Document> = spec
        .doc_tokens
        .iter()
        .map(|(id, c)| Document::new(id.clone(), "", "synthetic").with_token_count(*c))
        .collect();
    let layout = assemble_layout(
        spec.params.instruction_tokens,
        &docs,
        spec.query_tokens,
        Granularity::DocumentLevel,
    )?;
    let relevant: HashSet<&str> = spec.relevant_doc_ids.iter().map(String::as_str).collect();
    if let Some(missing) = relevant.iter().find(|id| !spec.doc_tokens.iter().any(|(d, _)| d == *id)) {
        return Err(Error::invalid(format!("relevant id `{missing}` is not a document")));
    }
    let bundle = generate_for_layout(&layout, &relevant, &spec.params, seed)?;
    let labels = spec
        .doc_tokens
        .iter()
        .map(|(id, _)| u8::from(relevant.contains(id.as_str())))
        .collect();
    Ok((bundle, labels))
}

/// Same as [`generate_synthetic`] with no planted documents.
pub fn negative_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(HiddenBundle, Vec<u8>)> {
    let spec = SyntheticSpec {
        relevant_doc_ids: Vec::new(),
        ..spec.clone()
    };
    generate_synthetic(&spec, seed)
}

/// Number of all-irrelevant samples to mix with `positives` so that they
/// make up a quarter of the dataset.
pub fn negatives_for(positives: usize) -> usize {
    (positives as f64 / 3.0).round() as usize
}

/// Shape of a generated text dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShape {
    pub docs_per_sample: usize,
    /// Inclusive bounds on planted documents per positive sample.
    pub relevant_per_sample: (usize, usize),
    /// Inclusive bounds on document length in words.
    pub doc_words: (usize, usize),
    pub query_words: usize,
}

impl Default for DatasetShape {
    fn default() -> Self {
        Self {
            docs_per_sample: 8,
            relevant_per_sample: (1, 3),
            doc_words: (6, 12),
            query_words: 6,
        }
    }
}

const VOCAB: &[&str] = &[
    "river", "stone", "market", "winter", "engine", "garden", "harbor", "silver", "forest", "letter",
    "signal", "bridge", "canvas", "meadow", "quartz", "violet", "anchor", "ember", "summit", "lantern",
];

/// Text samples whose labels mark planted documents. Each relevant document
/// states the gold answer; irrelevant ones never mention it. The first
/// `positives` samples have planted documents, the rest have none.
pub fn synthetic_dataset(positives: usize, negatives: usize, shape: &DatasetShape, seed: u64) -> Vec<QuerySample> {
    use rand::seq::SliceRandom;
    use rand::RngExt;

    let mut g = GaussianStream::new(derive_seed(seed, "dataset"));
    (0..positives + negatives)
        .map(|i| {
            let answer = format!("answer{i}");
            let k = shape.docs_per_sample;
            let n_rel = if i < positives {
                let (lo, hi) = shape.relevant_per_sample;
                g.rng_mut().random_range(lo..=hi.min(k))
            } else {
                0
            };
            let mut slots: Vec<usize> = (0..k).collect();
            slots.shuffle(g.rng_mut());
            let relevant: HashSet<usize> = slots[..n_rel].iter().copied().collect();
            let mut labels = Vec::with_capacity(k);
            let documents = (0..k)
                .map(|j| {
                    let len = g.rng_mut().random_range(shape.doc_words.0..=shape.doc_words.1);
                    let mut words: Vec<String> =
                        (0..len).map(|_| VOCAB[g.rng_mut().random_range(0..VOCAB.len())].to_string()).collect();
                    if relevant.contains(&j) {
                        words[len / 2] = answer.clone();
                    }
                    words[0][..1].make_ascii_uppercase();
                    labels.push(u8::from(relevant.contains(&j)));
                    Document::new(format!("s{i}d{j}"), format!("Doc {j}"), format!("{}.", words.join(" ")))
                })
                .collect();
            let query_words: Vec<&str> = (0..shape.query_words)
                .map(|_| VOCAB[g.rng_mut().random_range(0..VOCAB.len())])
                .collect();
            QuerySample {
                id: Some(format!("s{i}")),
                query: format!("what about {}?", query_words.join(" ")),
                gold_answers: vec![answer],
                documents,
                relevance_labels: Some(labels),
            }
        })
        .collect()
}
