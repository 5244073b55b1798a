//! Fine-tuning of the cross-attention head.
//!
//! Attention scores are supervised directly with binary cross-entropy:
//! every document score against its relevance label, and the instruction
//! score against "no document is relevant". The total loss is
//! `l_doc + lambda * l_ins`. Hidden states are fixed inputs, so only the
//! query/key projections receive gradients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptLayout, SegmentKind, SegmentSpan};
use crate::error::{Error, Result};
use crate::head::{forward_traced, CrossAttentionHead, HiddenBundle, Matrix};
use crate::rng::derive_seed;
use crate::scoring::{segment_scores, SegmentScores};

/// Scores are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub bundle: HiddenBundle,
    labels: Vec<u8>,
}

impl TrainingInstance {
    pub fn new(bundle: HiddenBundle, labels: Vec<u8>) -> Result<Self> {
        let docs = bundle.layout.document_ranges().len();
        if labels.len() != docs {
            return Err(Error::invalid(format!("{} labels for {docs} documents", labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Self { bundle, labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// 1 when no document is relevant.
    pub fn instruction_label(&self) -> u8 {
        u8::from(self.labels.iter().all(|&l| l == 0))
    }

    /// Reorders documents (with their labels). `order[k]` is the old index
    /// of the document placed k-th.
    pub fn permute_documents(&self, order: &[usize]) -> Result<Self> {
        let ranges = self.bundle.layout.document_ranges();
        let spans = self.bundle.layout.context_spans();
        let mut new_spans = vec![spans[0].clone()];
        let mut rows: Vec<usize> = spans[0].range().collect();
        for &k in order {
            let (id, range) = &ranges[k];
            for s in spans[1..].iter().filter(|s| &s.owner_id == id) {
                let start = rows.len();
                rows.extend(s.range());
                new_spans.push(SegmentSpan::new(s.kind, id, start, rows.len()));
            }
            debug_assert_eq!(range.len(), new_spans.iter().filter(|s| &s.owner_id == id).map(SegmentSpan::len).sum::<usize>());
        }
        let layout = PromptLayout::from_spans(new_spans, self.bundle.layout.m(), self.bundle.layout.granularity())?;
        let context = self.bundle.context.select(ndarray::Axis(0), &rows);
        Ok(Self {
            bundle: HiddenBundle::new(context, self.bundle.query.clone(), layout)?,
            labels: order.iter().map(|&k| self.labels[k]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub shuffle_docs_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 8,
            epochs: 8,
            lambda: 0.8,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_docs_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_doc: f64,
    pub l_ins: f64,
    pub total: f64,
}

fn clamp(s: f64) -> f64 {
    s.clamp(CLAMP, 1.0 - CLAMP)
}

fn bce(label: u8, s: f64) -> f64 {
    let s = clamp(s);
    if label == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// d bce / d s; zero where the clamp is active.
fn bce_grad(label: u8, s: f64) -> f64 {
    if !(CLAMP..=1.0 - CLAMP).contains(&s) {
        return 0.0;
    }
    if label == 1 {
        -1.0 / s
    } else {
        1.0 / (1.0 - s)
    }
}

pub fn loss(scores: &SegmentScores, labels: &[u8], lambda: f64) -> Result<LossBreakdown> {
    let docs = scores.doc_scores();
    if docs.len() != labels.len() {
        return Err(Error::invalid(format!("{} labels for {} documents", labels.len(), docs.len())));
    }
    let l_doc: f64 = docs.iter().zip(labels).map(|((_, s), &r)| bce(r, *s)).sum();
    let r_ins = u8::from(labels.iter().all(|&l| l == 0));
    let l_ins = bce(r_ins, scores.instruction);
    Ok(LossBreakdown {
        l_doc,
        l_ins,
        total: l_doc + lambda * l_ins,
    })
}

/// Gradients of the total loss with respect to every projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(head: &CrossAttentionHead) -> Self {
        let z = Matrix::zeros((head.d_model(), head.d_a()));
        Self {
            w_q: vec![z.clone(); head.heads()],
            w_k: vec![z; head.heads()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.w_q.iter().chain(self.w_k.iter())
    }

    fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.w_q.iter_mut().chain(self.w_k.iter_mut()).zip(other.iter()) {
            a.scaled_add(alpha, b);
        }
    }
}

/// Loss and analytic gradient for one instance.
///
/// The chain is loss -> segment scores -> averaged attention -> per-head
/// softmax -> logits -> projections. Segment scores are linear in the
/// attention, so `dL/dA[i, j]` only depends on the segment owning column `j`.
pub fn grad(
    bundle: &HiddenBundle,
    head: &CrossAttentionHead,
    labels: &[u8],
    lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let (attn, trace) = forward_traced(bundle, head)?;
    let layout = &bundle.layout;
    let scores = segment_scores(&attn, layout)?;
    let breakdown = loss(&scores, labels, lambda)?;

    // dL/ds per context span, then spread over columns
    let docs = scores.doc_scores();
    let r_ins = u8::from(labels.iter().all(|&l| l == 0));
    let ins_grad = lambda * bce_grad(r_ins, scores.instruction);
    let doc_grad: Vec<f64> = docs.iter().zip(labels).map(|((_, s), &r)| bce_grad(r, *s)).collect();
    let mut doc_index = 0;
    let mut span_grad = Vec::with_capacity(layout.context_spans().len());
    for (i, span) in layout.context_spans().iter().enumerate() {
        if span.kind == SegmentKind::Instruction {
            span_grad.push(ins_grad);
            continue;
        }
        if i > 1 && layout.context_spans()[i - 1].owner_id != span.owner_id {
            doc_index += 1;
        }
        span_grad.push(doc_grad[doc_index]);
    }
    let h = head.heads() as f64;
    let m = layout.m() as f64;
    let owner = layout.column_owner();
    // dL/dP_h[i, j], identical for every row i
    let col_grad: Vec<f64> = owner.iter().map(|&o| span_grad[o] / (m * h)).collect();

    let scale = 1.0 / (head.d_a() as f64).sqrt();
    let mut grads = Gradients::zeros_like(head);
    for hd in 0..head.heads() {
        let p = &trace.probs[hd];
        let mut dz = p.clone();
        for mut row in dz.rows_mut() {
            let mean: f64 = row.iter().zip(&col_grad).map(|(pij, g)| pij * g).sum();
            row.iter_mut().zip(&col_grad).for_each(|(v, g)| *v *= g - mean);
        }
        let dq = dz.dot(&trace.keys[hd]) * scale;
        let dk = dz.t().dot(&trace.queries[hd]) * scale;
        grads.w_q[hd] = bundle.query.t().dot(&dq);
        grads.w_k[hd] = bundle.context.t().dot(&dk);
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("gradient"));
    }
    Ok((breakdown, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: &TrainConfig, head: &CrossAttentionHead) -> Self {
        let zeros: Vec<Matrix> = head.params().map(|p| Matrix::zeros(p.raw_dim())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, head: &mut CrossAttentionHead, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((w, g), m), v) in head.params_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_doc: f64,
    pub l_ins: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: CrossAttentionHead,
    pub log: Vec<EpochLoss>,
    pub steps: usize,
}

/// Runs `epochs * ceil(N / batch_size)` Adam steps on the mean instance loss
/// of each batch. Instance order (and, optionally, document order within
/// each instance) is reshuffled every epoch from the config seed.
///
/// Per-instance gradients within a batch are computed in parallel and summed
/// in instance order, so results do not depend on thread count.
pub fn train(
    dataset: &[TrainingInstance],
    config: &TrainConfig,
    initial: CrossAttentionHead,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut head = initial;
    let mut adam = Adam::new(config, &head);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut rng = Pcg64::seed_from_u64(derive_seed(config.seed, &format!("epoch{epoch}")));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let doc_orders: Vec<Option<Vec<usize>>> = order
            .iter()
            .map(|&i| {
                config.shuffle_docs_each_epoch.then(|| {
                    let mut o: Vec<usize> = (0..dataset[i].labels.len()).collect();
                    o.shuffle(&mut rng);
                    o
                })
            })
            .collect();

        let mut sums = LossBreakdown::default();
        for (batch, batch_orders) in order.chunks(config.batch_size).zip(doc_orders.chunks(config.batch_size)) {
            let head_ref = &head;
            let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
                .par_iter()
                .zip(batch_orders)
                .map(|(&i, perm)| {
                    let inst = match perm {
                        Some(p) => std::borrow::Cow::Owned(dataset[i].permute_documents(p)?),
                        None => std::borrow::Cow::Borrowed(&dataset[i]),
                    };
                    grad(&inst.bundle, head_ref, &inst.labels, config.lambda)
                })
                .collect();

            let mut total = Gradients::zeros_like(&head);
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    Error::NumericalOverflow(_) => Error::Diverged { step, loss: f64::NAN },
                    other => other,
                })?;
                total.add_scaled(inv, &g);
                sums.l_doc += l.l_doc;
                sums.l_ins += l.l_ins;
                sums.total += l.total;
                batch_loss += l.total * inv;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step, loss: batch_loss });
            }
            adam.step(&mut head, &total);
            step += 1;
        }
        let n = dataset.len() as f64;
        log.push(EpochLoss {
            epoch: epoch + 1,
            l_doc: sums.l_doc / n,
            l_ins: sums.l_ins / n,
            total: sums.total / n,
        });
    }
    Ok(TrainOutcome { head, log, steps: step })
}

/// Writes `epoch,l_doc,l_ins,total` rows.
pub fn write_loss_log(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,l_doc,l_ins,total\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_doc, e.l_ins, e.total));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_layout, Document, Granularity};
    use crate::rng::GaussianStream;
    use approx::assert_abs_diff_eq;

    fn instance(seed: u64, docs: &[usize], labels: Vec<u8>, d: usize) -> TrainingInstance {
        let ds: Vec<_> = docs
            .iter()
            .enumerate()
            .map(|(i, &c)| Document::new(format!("d{i}"), "", "x").with_token_count(c))
            .collect();
        let layout = assemble_layout(2, &ds, 2, Granularity::DocumentLevel).unwrap();
        let mut g = GaussianStream::new(seed);
        let c = Matrix::from_shape_fn((layout.n(), d), |_| g.normal());
        let q = Matrix::from_shape_fn((2, d), |_| g.normal());
        TrainingInstance::new(HiddenBundle::new(c, q, layout).unwrap(), labels).unwrap()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let s = SegmentScores::from_doc_scores(0.0, [("a", 1.0), ("b", 0.0)]);
        let l = loss(&s, &[1, 0], 0.8).unwrap();
        // two documents plus the instruction, each at the clamp floor
        assert_abs_diff_eq!(l.total, -2.8 * (1.0 - CLAMP).ln(), epsilon = 1e-15);
        assert!(l.total < 1e-6);
    }

    #[test]
    fn scalar_bce() {
        let s = SegmentScores::from_doc_scores(0.5, [("a", 0.5)]);
        let l = loss(&s, &[1], 1.0).unwrap();
        assert_abs_diff_eq!(l.l_doc, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(l.l_ins, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(l.total, 1.3862943611198906, epsilon = 1e-12);
    }

    #[test]
    fn lambda_zero_ignores_instruction() {
        let a = loss(&SegmentScores::from_doc_scores(0.1, [("a", 0.3)]), &[1], 0.0).unwrap();
        let b = loss(&SegmentScores::from_doc_scores(0.6, [("a", 0.3)]), &[1], 0.0).unwrap();
        assert_eq!(a.total, a.l_doc);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn misaligned_labels() {
        let s = SegmentScores::from_doc_scores(0.5, [("a", 0.5)]);
        assert!(loss(&s, &[1, 0], 1.0).is_err());
        let inst = instance(0, &[2, 2], vec![1, 0], 3);
        assert!(TrainingInstance::new(inst.bundle.clone(), vec![1]).is_err());
    }

    #[test]
    fn instruction_label_derived() {
        assert_eq!(instance(0, &[2, 2], vec![0, 0], 3).instruction_label(), 1);
        assert_eq!(instance(0, &[2, 2], vec![0, 1], 3).instruction_label(), 0);
    }

    #[test]
    fn saturated_scores_have_zero_gradient() {
        // one context token: every score is 0 or 1, all in the clamped region
        let layout = assemble_layout(
            1,
            &[Document::new("a", "", "x").with_token_count(1)],
            1,
            Granularity::DocumentLevel,
        )
        .unwrap();
        // a single huge logit gap pins attention on the document
        let b = HiddenBundle::new(ndarray::array![[0.0], [1.0]], ndarray::array![[1.0]], layout).unwrap();
        let head = CrossAttentionHead::new(vec![ndarray::array![[100.0]]], vec![ndarray::array![[100.0]]]).unwrap();
        let (l, g) = grad(&b, &head, &[1], 0.8).unwrap();
        assert!(l.total < 1e-5);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_linear_in_lambda() {
        let inst = instance(3, &[2, 3], vec![0, 1], 4);
        let head = CrossAttentionHead::init_random(2, 4, 2, 1).unwrap();
        let g = |lambda| grad(&inst.bundle, &head, inst.labels(), lambda).unwrap().1;
        let (g0, g1, g2) = (g(0.0), g(1.0), g(2.0));
        for ((a, b), c) in g0.iter().zip(g1.iter()).zip(g2.iter()) {
            let ins1 = b - a;
            let ins2 = c - a;
            for (x, y) in ins1.iter().zip(ins2.iter()) {
                assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let inst = instance(5, &[2, 3, 1], vec![0, 1, 1], 4);
        let head = CrossAttentionHead::init_random(2, 4, 2, 3).unwrap();
        let (l, _) = grad(&inst.bundle, &head, inst.labels(), 0.8).unwrap();
        let p = inst.permute_documents(&[2, 0, 1]).unwrap();
        assert_eq!(p.labels(), &[1, 0, 1]);
        let (lp, _) = grad(&p.bundle, &head, p.labels(), 0.8).unwrap();
        assert_abs_diff_eq!(l.total, lp.total, epsilon = 1e-12);
        assert_abs_diff_eq!(l.l_doc, lp.l_doc, epsilon = 1e-12);
        assert_abs_diff_eq!(l.l_ins, lp.l_ins, epsilon = 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data: Vec<_> = (0..5).map(|s| instance(s, &[2, 2], vec![1, 0], 4)).collect();
        let init = CrossAttentionHead::init_random(2, 4, 2, 7).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let out = train(&data, &cfg, init.clone()).unwrap();
        assert_eq!(out.head, init);
        assert_eq!(out.steps, 6);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn single_step_matches_adam_algebra() {
        let inst = instance(2, &[2, 3], vec![1, 0], 4);
        let init = CrossAttentionHead::init_random(1, 4, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            shuffle_docs_each_epoch: false,
            ..Default::default()
        };
        let (_, g) = grad(&inst.bundle, &init, inst.labels(), cfg.lambda).unwrap();
        let out = train(std::slice::from_ref(&inst), &cfg, init.clone()).unwrap();
        // first step: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        for ((before, after), grad) in init.params().zip(out.head.params()).zip(g.iter()) {
            for ((b, a), g) in before.iter().zip(after.iter()).zip(grad.iter()) {
                let expected = -cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
                assert_abs_diff_eq!(a - b, expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn reproducible_training() {
        let data: Vec<_> = (0..6).map(|s| instance(s, &[2, 2, 1], vec![0, 1, 0], 4)).collect();
        let init = CrossAttentionHead::init_random(2, 4, 2, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let a = train(&data, &cfg, init.clone()).unwrap();
        let b = train(&data, &cfg, init.clone()).unwrap();
        assert_eq!(a.head, b.head);
        assert!(a.log[2].total < a.log[0].total);
    }

    #[test]
    fn empty_dataset_rejected() {
        let init = CrossAttentionHead::init_random(1, 2, 2, 0).unwrap();
        assert!(matches!(train(&[], &TrainConfig::default(), init), Err(Error::NoSamples)));
    }
}
