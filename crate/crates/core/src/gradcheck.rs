//! Central finite-difference check of the analytic gradients.
//!
//! The numerical side only runs the forward pass and the loss, never the
//! backward code it is checking.

use crate::corpus::{assemble_layout, Document, Granularity};
use crate::error::Result;
use crate::head::{forward, CrossAttentionHead, HiddenBundle, Matrix};
use crate::rng::{derive_seed, GaussianStream};
use crate::scoring::segment_scores;
use crate::trainer::{grad, loss, TrainingInstance};

pub const STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so entries that are zero in
/// both computations do not divide by zero.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn total_loss(bundle: &HiddenBundle, head: &CrossAttentionHead, labels: &[u8], lambda: f64) -> Result<f64> {
    let a = forward(bundle, head)?;
    let s = segment_scores(&a, &bundle.layout)?;
    Ok(loss(&s, labels, lambda)?.total)
}

fn perturbed(head: &CrossAttentionHead, which: usize, idx: (usize, usize), delta: f64) -> Result<CrossAttentionHead> {
    let h = head.heads();
    let mut w_q: Vec<Matrix> = head.w_q().to_vec();
    let mut w_k: Vec<Matrix> = head.w_k().to_vec();
    if which < h {
        w_q[which][idx] += delta;
    } else {
        w_k[which - h][idx] += delta;
    }
    CrossAttentionHead::new(w_q, w_k)
}

pub fn check_instance(
    bundle: &HiddenBundle,
    head: &CrossAttentionHead,
    labels: &[u8],
    lambda: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = grad(bundle, head, labels, lambda)?;
    let mut report = GradCheckReport {
        entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (which, g) in analytic.iter().enumerate() {
        for (idx, &a) in g.indexed_iter() {
            let plus = total_loss(bundle, &perturbed(head, which, idx, STEP)?, labels, lambda)?;
            let minus = total_loss(bundle, &perturbed(head, which, idx, -STEP)?, labels, lambda)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            report.entries += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        }
    }
    Ok(report)
}

/// A random small instance: `m <= 3`, `n <= 8`, `H <= 2`, `d_model <= 8`.
pub fn random_instance(seed: u64) -> Result<(TrainingInstance, CrossAttentionHead, f64)> {
    use rand::RngExt;
    let mut g = GaussianStream::new(derive_seed(seed, "gradcheck"));
    let m = g.rng_mut().random_range(1..=3);
    let ins = g.rng_mut().random_range(1..=2);
    let n_docs = g.rng_mut().random_range(1..=3);
    let docs: Vec<Document> = (0..n_docs)
        .map(|i| {
            let len = g.rng_mut().random_range(1..=2);
            Document::new(format!("d{i}"), "", "x").with_token_count(len)
        })
        .collect();
    let heads = g.rng_mut().random_range(1..=2);
    let d_model = g.rng_mut().random_range(2..=8);
    let d_a = g.rng_mut().random_range(1..=d_model);
    let labels: Vec<u8> = (0..n_docs).map(|_| g.rng_mut().random_range(0..=1)).collect();
    let lambda = 0.8;

    let layout = assemble_layout(ins, &docs, m, Granularity::DocumentLevel)?;
    let context = Matrix::from_shape_fn((layout.n(), d_model), |_| g.normal());
    let query = Matrix::from_shape_fn((m, d_model), |_| g.normal());
    let bundle = HiddenBundle::new(context, query, layout)?;
    let head = CrossAttentionHead::init_random(heads, d_model, d_a, derive_seed(seed, "head"))?;
    Ok((TrainingInstance::new(bundle, labels)?, head, lambda))
}

/// Checks `instances` random instances derived from `seed`.
pub fn run(seed: u64, instances: usize) -> Result<Vec<GradCheckReport>> {
    (0..instances)
        .map(|i| {
            let (inst, head, lambda) = random_instance(derive_seed(seed, &format!("instance{i}")))?;
            check_instance(&inst.bundle, &head, inst.labels(), lambda)
        })
        .collect()
}
