//! Sources of attention: exported bundles on disk or the synthetic
//! generator, behind one interface.

pub mod bundle;
pub mod synthetic;

use std::collections::HashSet;
use std::path::PathBuf;

use crate::corpus::{assemble_layout, fallback_token_count, Granularity, PromptLayout, QuerySample};
use crate::error::{Error, Result};
use crate::head::{forward, CrossAttentionHead, HiddenBundle};
use crate::rng::derive_seed;
use crate::scoring::{mean_over_heads, segment_scores, HeadStack, SegmentScores};

pub use synthetic::SyntheticParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderMode {
    RawAttention,
    HiddenStates,
}

pub struct ProviderRequest<'a> {
    pub sample: &'a QuerySample,
    pub mode: ProviderMode,
    pub granularity: Granularity,
}

pub enum ProviderOutput {
    Attention { stack: HeadStack, layout: PromptLayout },
    Hidden(HiddenBundle),
}

pub trait AttentionProvider: Send + Sync {
    fn supports(&self, mode: ProviderMode) -> bool;

    fn provide(&self, request: &ProviderRequest<'_>) -> Result<ProviderOutput>;

    /// Mode to request when the caller has no preference.
    fn preferred_mode(&self) -> ProviderMode {
        if self.supports(ProviderMode::HiddenStates) {
            ProviderMode::HiddenStates
        } else {
            ProviderMode::RawAttention
        }
    }
}

/// Reads `<root>/<sample id>/` bundles. A bundle holding `A` serves raw
/// attention; one holding `X_c`/`X_q` serves hidden states.
pub struct BundleProvider {
    root: PathBuf,
}

impl BundleProvider {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::invalid(format!("bundle root {} is not a directory", root.display())));
        }
        Ok(Self { root })
    }
}

impl AttentionProvider for BundleProvider {
    fn supports(&self, _mode: ProviderMode) -> bool {
        true
    }

    fn preferred_mode(&self) -> ProviderMode {
        ProviderMode::HiddenStates
    }

    fn provide(&self, request: &ProviderRequest<'_>) -> Result<ProviderOutput> {
        let id = request
            .sample
            .id
            .as_deref()
            .ok_or_else(|| Error::invalid("bundle provider needs sample ids"))?;
        let b = bundle::load_bundle(&self.root.join(id))?;
        let layout = b.layout()?;
        if layout.granularity() != request.granularity {
            return Err(Error::invalid(format!(
                "bundle for `{id}` is {:?}, requested {:?}",
                layout.granularity(),
                request.granularity
            )));
        }
        let want_hidden = request.mode == ProviderMode::HiddenStates;
        if want_hidden && b.has_tensor(bundle::CONTEXT_TENSOR) {
            return Ok(ProviderOutput::Hidden(b.hidden()?));
        }
        if b.has_tensor(bundle::ATTENTION_TENSOR) {
            return Ok(ProviderOutput::Attention {
                stack: b.attention()?,
                layout,
            });
        }
        if b.has_tensor(bundle::CONTEXT_TENSOR) {
            return Ok(ProviderOutput::Hidden(b.hidden()?));
        }
        Err(Error::bundle(&b.path, "bundle holds neither attention nor hidden states"))
    }
}

/// Planted-relevance hidden states. Relevance comes from the sample's
/// labels; token counts from its documents and query text.
pub struct SyntheticProvider {
    pub params: SyntheticParams,
    pub seed: u64,
}

impl SyntheticProvider {
    pub fn new(params: SyntheticParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, seed })
    }

    /// Per-sample seed, independent of sample position and document order.
    pub fn sample_seed(&self, sample: &QuerySample) -> u64 {
        derive_seed(self.seed, sample.id.as_deref().unwrap_or(&sample.query))
    }

    pub fn hidden(&self, sample: &QuerySample, granularity: Granularity) -> Result<HiddenBundle> {
        let layout = assemble_layout(
            self.params.instruction_tokens,
            &sample.documents,
            fallback_token_count(&sample.query)?,
            granularity,
        )?;
        let relevant_ids = sample.relevant_ids();
        let relevant: HashSet<&str> = relevant_ids.iter().map(String::as_str).collect();
        synthetic::generate_for_layout(&layout, &relevant, &self.params, self.sample_seed(sample))
    }
}

impl AttentionProvider for SyntheticProvider {
    fn supports(&self, mode: ProviderMode) -> bool {
        mode == ProviderMode::HiddenStates
    }

    fn provide(&self, request: &ProviderRequest<'_>) -> Result<ProviderOutput> {
        if request.mode != ProviderMode::HiddenStates {
            return Err(Error::invalid("synthetic provider only serves hidden states"));
        }
        Ok(ProviderOutput::Hidden(self.hidden(request.sample, request.granularity)?))
    }
}

/// Provider plus (optionally) a cross-attention head: everything needed to
/// turn a sample into segment scores.
pub struct Scorer<'a> {
    pub provider: &'a dyn AttentionProvider,
    pub head: Option<&'a CrossAttentionHead>,
    pub granularity: Granularity,
}

impl Scorer<'_> {
    pub fn score(&self, sample: &QuerySample) -> Result<(SegmentScores, PromptLayout)> {
        let mode = if self.head.is_some() {
            self.provider.preferred_mode()
        } else {
            ProviderMode::RawAttention
        };
        let mode = if self.provider.supports(mode) { mode } else { self.provider.preferred_mode() };
        let request = ProviderRequest {
            sample,
            mode,
            granularity: self.granularity,
        };
        match self.provider.provide(&request)? {
            ProviderOutput::Attention { stack, layout } => {
                let a = mean_over_heads(&stack);
                Ok((segment_scores(&a, &layout)?, layout))
            }
            ProviderOutput::Hidden(bundle) => {
                let head = self
                    .head
                    .ok_or_else(|| Error::invalid("hidden-state input needs cross-attention weights"))?;
                let a = forward(&bundle, head)?;
                Ok((segment_scores(&a, &bundle.layout)?, bundle.layout))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::scoring::AttentionMatrix;

    fn sample() -> QuerySample {
        QuerySample {
            id: Some("q1".into()),
            query: "who is it".into(),
            gold_answers: vec!["x".into()],
            documents: vec![Document::new("a", "", "one two three"), Document::new("b", "", "four five")],
            relevance_labels: Some(vec![0, 1]),
        }
    }

    #[test]
    fn synthetic_scores_sum_to_one() {
        let p = SyntheticProvider::new(SyntheticParams::default(), 1).unwrap();
        let head = CrossAttentionHead::init_random(2, 32, 8, 0).unwrap();
        let scorer = Scorer {
            provider: &p,
            head: Some(&head),
            granularity: Granularity::DocumentLevel,
        };
        let (s, layout) = scorer.score(&sample()).unwrap();
        assert_eq!(layout.m(), 3);
        assert_eq!(layout.n(), 16 + 5);
        assert!((s.total() - 1.0).abs() < 1e-9);
        assert!(!p.supports(ProviderMode::RawAttention));
    }

    #[test]
    fn hidden_input_without_head_fails() {
        let p = SyntheticProvider::new(SyntheticParams::default(), 1).unwrap();
        let scorer = Scorer {
            provider: &p,
            head: None,
            granularity: Granularity::DocumentLevel,
        };
        assert!(scorer.score(&sample()).is_err());
    }

    #[test]
    fn bundle_provider_serves_attention() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        let layout = assemble_layout(2, &s.documents, 3, Granularity::DocumentLevel).unwrap();
        let stack = HeadStack::new(vec![AttentionMatrix::uniform(3, layout.n())]).unwrap();
        bundle::write_attention_bundle(&dir.path().join("q1"), &stack, &layout, "t").unwrap();
        let p = BundleProvider::new(dir.path()).unwrap();
        let scorer = Scorer {
            provider: &p,
            head: None,
            granularity: Granularity::DocumentLevel,
        };
        let (scores, _) = scorer.score(&s).unwrap();
        assert!((scores.instruction - 2.0 / 7.0).abs() < 1e-6);
    }
}
