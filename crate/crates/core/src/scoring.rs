//! Aggregation of query-to-context attention into per-segment scores.
//!
//! The score of a context segment is the attention mass it receives,
//! summed over the segment's columns and averaged over query rows:
//!
//! ```text
//! s = (1/m) * sum_{i in query} sum_{j in segment} a_ij
//! ```
//!
//! Because every row of a valid attention matrix sums to one and the layout
//! partitions the context, the instruction score and all segment scores sum
//! to one.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Granularity, PromptLayout, SegmentKind, SegmentSpan};
use crate::error::{Error, Result};

/// Row-sum tolerance accepted for ingested matrices (32-bit storage).
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Row-stochastic `m x n` attention from query tokens to context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Array2<f64>);

impl AttentionMatrix {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        Self::with_tolerance(weights, ROW_SUM_TOLERANCE)
    }

    pub fn with_tolerance(weights: Array2<f64>, tolerance: f64) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::invalid("attention matrix must be non-empty"));
        }
        for (i, row) in weights.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&a| !a.is_finite() || a < 0.0) {
                return Err(Error::invalid(format!(
                    "attention row {i} has a negative or non-finite entry"
                )));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > tolerance {
                return Err(Error::invalid(format!("attention row {i} sums to {sum}")));
            }
        }
        Ok(Self(weights))
    }

    /// Wraps weights already known to be row-stochastic (softmax output).
    pub(crate) fn from_softmax(weights: Array2<f64>) -> Self {
        Self(weights)
    }

    pub fn uniform(m: usize, n: usize) -> Self {
        Self(Array2::from_elem((m, n), 1.0 / n as f64))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Attention maps of several heads over the same query and context.
#[derive(Debug, Clone)]
pub struct HeadStack {
    heads: Vec<AttentionMatrix>,
}

impl HeadStack {
    pub fn new(heads: Vec<AttentionMatrix>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::invalid("head stack is empty"));
        };
        let shape = (first.rows(), first.cols());
        if let Some(bad) = heads.iter().find(|h| (h.rows(), h.cols()) != shape) {
            return Err(Error::Shape {
                expected: format!("{}x{}", shape.0, shape.1),
                found: format!("{}x{}", bad.rows(), bad.cols()),
            });
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[AttentionMatrix] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    /// Document id, or `<doc>#<k>` for the k-th sentence of a document.
    pub id: String,
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub instruction: f64,
    /// Per-segment scores in prompt order, at the layout's granularity.
    pub segments: Vec<SegmentScore>,
    pub granularity: Granularity,
}

impl SegmentScores {
    /// Document-level scores from `(id, score)` pairs.
    pub fn from_doc_scores<S: Into<String>>(
        instruction: f64,
        docs: impl IntoIterator<Item = (S, f64)>,
    ) -> Self {
        Self {
            instruction,
            segments: docs
                .into_iter()
                .map(|(id, score)| {
                    let id = id.into();
                    SegmentScore {
                        doc_id: id.clone(),
                        id,
                        score,
                    }
                })
                .collect(),
            granularity: Granularity::DocumentLevel,
        }
    }

    /// Scores rolled up per document, in prompt order.
    pub fn doc_scores(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for seg in &self.segments {
            match out.last_mut() {
                Some((id, s)) if *id == seg.doc_id => *s += seg.score,
                _ => out.push((seg.doc_id.clone(), seg.score)),
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.instruction + self.segments.iter().map(|s| s.score).sum::<f64>()
    }
}

fn check_shape(attn: &AttentionMatrix, layout: &PromptLayout) -> Result<()> {
    if attn.rows() != layout.m() || attn.cols() != layout.n() {
        return Err(Error::Shape {
            expected: format!("{}x{}", layout.m(), layout.n()),
            found: format!("{}x{}", attn.rows(), attn.cols()),
        });
    }
    Ok(())
}

/// Attention mass per context column, averaged over query rows.
pub(crate) fn column_mass(attn: &Array2<f64>) -> Vec<f64> {
    let m = attn.nrows() as f64;
    attn.sum_axis(Axis(0)).iter().map(|&c| c / m).collect()
}

/// Per-span scores for every context span of `layout` (instruction first).
pub(crate) fn span_scores(mass: &[f64], spans: &[SegmentSpan]) -> Vec<f64> {
    spans.iter().map(|s| mass[s.range()].iter().sum()).collect()
}

pub fn segment_scores(attn: &AttentionMatrix, layout: &PromptLayout) -> Result<SegmentScores> {
    check_shape(attn, layout)?;
    let mass = column_mass(attn.weights());
    let spans = layout.context_spans();
    let scores = span_scores(&mass, spans);

    let mut segments = Vec::with_capacity(spans.len() - 1);
    let mut ordinal = 0;
    for (i, span) in spans.iter().enumerate().skip(1) {
        let id = match span.kind {
            SegmentKind::Sentence => {
                if i > 1 && spans[i - 1].owner_id == span.owner_id {
                    ordinal += 1;
                } else {
                    ordinal = 0;
                }
                format!("{}#{ordinal}", span.owner_id)
            }
            _ => span.owner_id.clone(),
        };
        segments.push(SegmentScore {
            id,
            doc_id: span.owner_id.clone(),
            score: scores[i],
        });
    }
    Ok(SegmentScores {
        instruction: scores[0],
        segments,
        granularity: layout.granularity(),
    })
}

/// Elementwise mean of all heads.
pub fn mean_over_heads(stack: &HeadStack) -> AttentionMatrix {
    let heads = stack.heads();
    let mut acc = heads[0].weights().clone();
    for h in &heads[1..] {
        acc += h.weights();
    }
    acc /= heads.len() as f64;
    AttentionMatrix(acc)
}

/// Attention mass each head puts on the union of `evidence` spans.
pub fn per_head_evidence_scores(
    stack: &HeadStack,
    evidence: &[SegmentSpan],
    layout: &PromptLayout,
) -> Result<Vec<f64>> {
    let n = layout.n();
    let mut mask = vec![false; n];
    for span in evidence {
        if span.start >= span.end || span.end > n {
            return Err(Error::invalid(format!(
                "evidence span {}..{} outside context [0, {n})",
                span.start, span.end
            )));
        }
        mask[span.range()].fill(true);
    }
    stack
        .heads()
        .iter()
        .map(|head| {
            check_shape(head, layout)?;
            let mass = column_mass(head.weights());
            Ok(mass.iter().zip(&mask).filter(|(_, &e)| e).map(|(&v, _)| v).sum())
        })
        .collect()
}

/// `c_k` = sum of the `k` largest scores, for `k = 1..=min(k_max, len)`.
pub fn cumulative_topk_curve(scores: &[f64], k_max: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("cumulative curve needs at least one score"));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("scores must be finite and non-negative"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted
        .iter()
        .take(k_max.min(sorted.len()))
        .scan(0.0, |acc, &s| {
            *acc += s;
            Some(*acc)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_layout, Document, INSTRUCTION_ID};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg64;

    fn layout(ins: usize, docs: &[usize], m: usize) -> PromptLayout {
        let docs: Vec<_> = docs
            .iter()
            .enumerate()
            .map(|(i, &c)| Document::new(format!("d{}", i + 1), "", "x").with_token_count(c))
            .collect();
        assemble_layout(ins, &docs, m, Granularity::DocumentLevel).unwrap()
    }

    fn random_stochastic(rng: &mut Pcg64, m: usize, n: usize) -> Array2<f64> {
        let mut a = Array2::from_shape_fn((m, n), |_| rng.random::<f64>() + 1e-3);
        for mut row in a.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row /= s;
        }
        a
    }

    #[test]
    fn uniform_attention_scores_by_length() {
        let l = layout(3, &[4, 5], 1);
        let s = segment_scores(&AttentionMatrix::uniform(1, 12), &l).unwrap();
        assert_abs_diff_eq!(s.instruction, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.segments[0].score, 4.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.segments[1].score, 5.0 / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn one_hot_rows_average() {
        let a = AttentionMatrix::new(array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let s = segment_scores(&a, &layout(1, &[3], 2)).unwrap();
        assert_eq!(s.instruction, 0.5);
        assert_eq!(s.segments[0].score, 0.5);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = Pcg64::seed_from_u64(11);
        let w = random_stochastic(&mut rng, 3, 8);
        let l = layout(2, &[3, 3], 3);
        let s = segment_scores(&AttentionMatrix::new(w.clone()).unwrap(), &l).unwrap();
        let mut oracle = [0.0; 3];
        for i in 0..3 {
            for j in 0..8 {
                let seg = if j < 2 { 0 } else if j < 5 { 1 } else { 2 };
                oracle[seg] += w[[i, j]];
            }
        }
        let got = [s.instruction, s.segments[0].score, s.segments[1].score];
        for (g, o) in got.iter().zip(oracle) {
            assert_abs_diff_eq!(*g, o / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let l = layout(2, &[3], 1);
        assert!(matches!(
            segment_scores(&AttentionMatrix::uniform(2, 5), &l),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sentence_scores_roll_up() {
        let docs = vec![Document::new("a", "", "One two. Three four."), Document::new("b", "", "Five.")];
        let l = assemble_layout(1, &docs, 1, Granularity::SentenceLevel).unwrap();
        let s = segment_scores(&AttentionMatrix::uniform(1, l.n()), &l).unwrap();
        let ids: Vec<_> = s.segments.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, ["a#0", "a#1", "b#0"]);
        let docs = s.doc_scores();
        assert_eq!(docs.len(), 2);
        assert_abs_diff_eq!(docs[0].1, 4.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_stochastic() {
        assert!(AttentionMatrix::new(array![[0.5, 0.4]]).is_err());
        assert!(AttentionMatrix::new(array![[1.5, -0.5]]).is_err());
        assert!(AttentionMatrix::new(array![[0.5, 0.5 + 5e-6]]).is_ok());
    }

    #[test]
    fn head_mean() {
        let h1 = AttentionMatrix::new(array![[1.0, 0.0]]).unwrap();
        let h2 = AttentionMatrix::new(array![[0.0, 1.0]]).unwrap();
        let single = HeadStack::new(vec![h1.clone()]).unwrap();
        assert_eq!(mean_over_heads(&single), h1);
        let mean = mean_over_heads(&HeadStack::new(vec![h1, h2]).unwrap());
        assert_eq!(mean.weights(), &array![[0.5, 0.5]]);
    }

    #[test]
    fn head_mean_matches_loop() {
        let mut rng = Pcg64::seed_from_u64(3);
        let heads: Vec<_> = (0..4).map(|_| random_stochastic(&mut rng, 3, 6)).collect();
        let stack =
            HeadStack::new(heads.iter().cloned().map(|h| AttentionMatrix::new(h).unwrap()).collect()).unwrap();
        let mean = mean_over_heads(&stack);
        for i in 0..3 {
            for j in 0..6 {
                let mut acc = 0.0;
                for h in &heads {
                    acc += h[[i, j]];
                }
                assert_abs_diff_eq!(mean.weights()[[i, j]], acc / 4.0, epsilon = 1e-12);
            }
        }
        assert!(AttentionMatrix::new(mean.into_inner()).is_ok());
    }

    #[test]
    fn heterogeneous_stack_rejected() {
        let r = HeadStack::new(vec![AttentionMatrix::uniform(1, 2), AttentionMatrix::uniform(1, 3)]);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn evidence_scores() {
        let l = layout(2, &[2], 1);
        let ev = [SegmentSpan::new(SegmentKind::Sentence, "e", 2, 4)];
        let uniform = HeadStack::new(vec![AttentionMatrix::uniform(1, 4)]).unwrap();
        assert_eq!(per_head_evidence_scores(&uniform, &ev, &l).unwrap(), vec![0.5]);
        let focused = AttentionMatrix::new(array![[0.0, 0.0, 0.3, 0.7]]).unwrap();
        let stack = HeadStack::new(vec![focused]).unwrap();
        assert_abs_diff_eq!(per_head_evidence_scores(&stack, &ev, &l).unwrap()[0], 1.0, epsilon = 1e-12);
        let oob = [SegmentSpan::new(SegmentKind::Sentence, "e", 3, 9)];
        assert!(per_head_evidence_scores(&stack, &oob, &l).is_err());
    }

    #[test]
    fn evidence_scores_match_loop() {
        let mut rng = Pcg64::seed_from_u64(5);
        let l = layout(2, &[3, 3, 2], 2);
        let heads: Vec<_> = (0..3).map(|_| random_stochastic(&mut rng, 2, 10)).collect();
        let stack =
            HeadStack::new(heads.iter().cloned().map(|h| AttentionMatrix::new(h).unwrap()).collect()).unwrap();
        let ev = [
            SegmentSpan::new(SegmentKind::Sentence, "e", 3, 5),
            SegmentSpan::new(SegmentKind::Sentence, "e", 8, 10),
        ];
        let got = per_head_evidence_scores(&stack, &ev, &l).unwrap();
        for (h, g) in heads.iter().zip(got) {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in (3..5).chain(8..10) {
                    acc += h[[i, j]];
                }
            }
            assert_abs_diff_eq!(g, acc / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn topk_curve_examples() {
        let c = cumulative_topk_curve(&[0.2, 0.5, 0.3], 3).unwrap();
        assert_abs_diff_eq!(c[0], 0.5);
        assert_abs_diff_eq!(c[1], 0.8);
        assert_abs_diff_eq!(c[2], 1.0);
        assert_eq!(cumulative_topk_curve(&[0.25; 4], 2).unwrap(), vec![0.25, 0.5]);
        assert!(cumulative_topk_curve(&[], 2).is_err());
    }

    #[test]
    fn topk_curve_matches_sort_oracle() {
        let mut rng = Pcg64::seed_from_u64(9);
        let scores: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let curve = cumulative_topk_curve(&scores, 100).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut acc = 0.0;
        for (k, s) in sorted.iter().enumerate() {
            acc += s;
            assert_abs_diff_eq!(curve[k], acc, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn scores_sum_to_one(seed in any::<u64>(), docs in proptest::collection::vec(1usize..6, 1..6), m in 1usize..4) {
            let mut rng = Pcg64::seed_from_u64(seed);
            let l = layout(2, &docs, m);
            let a = AttentionMatrix::new(random_stochastic(&mut rng, m, l.n())).unwrap();
            let s = segment_scores(&a, &l).unwrap();
            prop_assert!((s.total() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn permuting_documents_permutes_scores(seed in any::<u64>()) {
            let mut rng = Pcg64::seed_from_u64(seed);
            let l = layout(2, &[2, 3, 1], 2);
            let w = random_stochastic(&mut rng, 2, l.n());
            let s = segment_scores(&AttentionMatrix::new(w.clone()).unwrap(), &l).unwrap();
            // move d3 (col 7) to the front of the documents: order d3, d1, d2
            let cols: Vec<usize> = vec![0, 1, 7, 2, 3, 4, 5, 6];
            let wp = Array2::from_shape_fn((2, 8), |(i, j)| w[[i, cols[j]]]);
            let spans = vec![
                SegmentSpan::new(SegmentKind::Instruction, INSTRUCTION_ID, 0, 2),
                SegmentSpan::new(SegmentKind::Document, "d3", 2, 3),
                SegmentSpan::new(SegmentKind::Document, "d1", 3, 5),
                SegmentSpan::new(SegmentKind::Document, "d2", 5, 8),
            ];
            let lp = PromptLayout::from_spans(spans, 2, Granularity::DocumentLevel).unwrap();
            let sp = segment_scores(&AttentionMatrix::new(wp).unwrap(), &lp).unwrap();
            prop_assert!((s.instruction - sp.instruction).abs() < 1e-12);
            prop_assert!((s.segments[2].score - sp.segments[0].score).abs() < 1e-12);
            prop_assert!((s.segments[0].score - sp.segments[1].score).abs() < 1e-12);
            prop_assert!((s.segments[1].score - sp.segments[2].score).abs() < 1e-12);
        }

        #[test]
        fn adding_mass_never_decreases_segment(seed in any::<u64>(), bump in 0.0f64..2.0) {
            let mut rng = Pcg64::seed_from_u64(seed);
            let l = layout(2, &[2, 3], 2);
            let w = random_stochastic(&mut rng, 2, l.n());
            let before = segment_scores(&AttentionMatrix::new(w.clone()).unwrap(), &l).unwrap();
            let mut bumped = w.clone();
            bumped.column_mut(3).mapv_inplace(|v| v + bump);
            for mut row in bumped.axis_iter_mut(Axis(0)) {
                let s = row.sum();
                row /= s;
            }
            let after = segment_scores(&AttentionMatrix::new(bumped).unwrap(), &l).unwrap();
            prop_assert!(after.segments[0].score >= before.segments[0].score - 1e-12);
        }

        #[test]
        fn topk_curve_nondecreasing(scores in proptest::collection::vec(0.0f64..1.0, 1..50)) {
            let c = cumulative_topk_curve(&scores, scores.len()).unwrap();
            prop_assert!(c.windows(2).all(|w| w[1] >= w[0]));
            let total: f64 = scores.iter().sum();
            prop_assert!((c.last().unwrap() - total).abs() < 1e-9);
        }
    }
}
