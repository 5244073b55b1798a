//! Trainable cross-attention scorer.
//!
//! Each head projects query hidden states with `W_Q` and context hidden
//! states with `W_K`, takes scaled dot products, and normalizes each query
//! row with a softmax over context positions. The head outputs are averaged:
//!
//! ```text
//! A = (1/H) * sum_h softmax((X_q W_Q[h]) (X_c W_K[h])^T / sqrt(d_a))
//! ```
//!
//! There is no value or output projection; the attention weights are the
//! whole output.

use std::path::Path;

use ndarray::{Array2, Axis};

use crate::corpus::PromptLayout;
use crate::error::{Error, Result};
use crate::provider::bundle::{self, Manifest, TensorData};
use crate::rng::GaussianStream;
use crate::scoring::AttentionMatrix;

pub type Matrix = Array2<f64>;

/// Frozen hidden states for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBundle {
    pub context: Matrix,
    pub query: Matrix,
    pub layout: PromptLayout,
}

impl HiddenBundle {
    pub fn new(context: Matrix, query: Matrix, layout: PromptLayout) -> Result<Self> {
        if context.nrows() != layout.n() || query.nrows() != layout.m() {
            return Err(Error::Shape {
                expected: format!("context {} rows, query {} rows", layout.n(), layout.m()),
                found: format!("context {} rows, query {} rows", context.nrows(), query.nrows()),
            });
        }
        if context.ncols() != query.ncols() {
            return Err(Error::Shape {
                expected: format!("query width {}", context.ncols()),
                found: query.ncols().to_string(),
            });
        }
        if context.iter().chain(query.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("hidden states contain non-finite values"));
        }
        Ok(Self {
            context,
            query,
            layout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.context.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionHead {
    d_model: usize,
    d_a: usize,
    w_q: Vec<Matrix>,
    w_k: Vec<Matrix>,
}

impl CrossAttentionHead {
    pub fn new(w_q: Vec<Matrix>, w_k: Vec<Matrix>) -> Result<Self> {
        let Some(first) = w_q.first() else {
            return Err(Error::invalid("cross-attention needs at least one head"));
        };
        let dims = first.dim();
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::invalid("projection dimensions must be positive"));
        }
        if w_q.len() != w_k.len() || w_q.iter().chain(&w_k).any(|w| w.dim() != dims) {
            return Err(Error::invalid("all query/key projections must share dimensions"));
        }
        if w_q.iter().chain(&w_k).flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection weights contain non-finite values"));
        }
        Ok(Self {
            d_model: dims.0,
            d_a: dims.1,
            w_q,
            w_k,
        })
    }

    pub fn zeros(heads: usize, d_model: usize, d_a: usize) -> Self {
        Self {
            d_model,
            d_a,
            w_q: vec![Matrix::zeros((d_model, d_a)); heads],
            w_k: vec![Matrix::zeros((d_model, d_a)); heads],
        }
    }

    /// I.i.d. `N(0, 1/d_model)` entries, deterministic in `seed`. Entries are
    /// rounded to `f32` so a freshly initialized head survives a bundle
    /// round trip bit for bit.
    pub fn init_random(heads: usize, d_model: usize, d_a: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_a == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        let mut g = GaussianStream::new(seed);
        let scale = 1.0 / (d_model as f64).sqrt();
        let mut draw = || {
            (0..heads)
                .map(|_| Matrix::from_shape_fn((d_model, d_a), |_| (g.normal() * scale) as f32 as f64))
                .collect::<Vec<_>>()
        };
        let w_q = draw();
        let w_k = draw();
        Ok(Self {
            d_model,
            d_a,
            w_q,
            w_k,
        })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn w_q(&self) -> &[Matrix] {
        &self.w_q
    }

    pub fn w_k(&self) -> &[Matrix] {
        &self.w_k
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.w_q.iter_mut().chain(self.w_k.iter_mut())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &Matrix> {
        self.w_q.iter().chain(self.w_k.iter())
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.heads() * self.d_model * self.d_a
    }

    /// Writes the weights as a bundle with tensors `W_Q` and `W_K`, each of
    /// shape `[H, d_model, d_a]`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with_provenance(dir, -1, &[])
    }

    pub fn save_with_provenance(&self, dir: &Path, source_layer: i64, head_indices: &[usize]) -> Result<()> {
        let dims = vec![self.heads(), self.d_model, self.d_a];
        let flatten = |ws: &[Matrix]| ws.iter().flat_map(|w| w.iter().copied()).collect::<Vec<f64>>();
        let mut manifest = Manifest::empty();
        manifest.d_model = self.d_model;
        manifest.heads = self.heads();
        manifest.d_a = self.d_a;
        manifest.source_layer = source_layer;
        manifest.head_indices = head_indices.to_vec();
        bundle::write_bundle(
            dir,
            manifest,
            &[
                TensorData::new("W_Q", dims.clone(), &flatten(&self.w_q)),
                TensorData::new("W_K", dims, &flatten(&self.w_k)),
            ],
        )
    }

    /// Loads weights written by [`CrossAttentionHead::save`] or by an
    /// exporter using the same bundle format.
    pub fn init_from_export(dir: &Path) -> Result<Self> {
        let b = bundle::load_bundle(dir)?;
        let (h, d_model, d_a) = (b.manifest.heads, b.manifest.d_model, b.manifest.d_a);
        let unpack = |name: &str| -> Result<Vec<Matrix>> {
            let t = b.tensor(name)?;
            if t.dims != [h, d_model, d_a] {
                return Err(Error::bundle(
                    dir,
                    format!("tensor {name} has dims {:?}, manifest says [{h}, {d_model}, {d_a}]", t.dims),
                ));
            }
            Ok(t.values
                .chunks_exact(d_model * d_a)
                .map(|c| Matrix::from_shape_vec((d_model, d_a), c.iter().map(|&v| v as f64).collect()).unwrap())
                .collect())
        };
        Self::new(unpack("W_Q")?, unpack("W_K")?)
    }
}

/// Intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `X_q W_Q[h]`, one per head.
    pub queries: Vec<Matrix>,
    /// `X_c W_K[h]`, one per head.
    pub keys: Vec<Matrix>,
    /// Scaled pre-softmax logits, one per head.
    pub logits: Vec<Matrix>,
    /// Per-head softmax output.
    pub probs: Vec<Matrix>,
}

fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !max.is_finite() {
            return Err(Error::NumericalOverflow("attention logits"));
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

fn check_dims(bundle: &HiddenBundle, head: &CrossAttentionHead) -> Result<()> {
    if bundle.d_model() != head.d_model {
        return Err(Error::Shape {
            expected: format!("d_model {}", head.d_model),
            found: format!("d_model {}", bundle.d_model()),
        });
    }
    Ok(())
}

pub fn forward(bundle: &HiddenBundle, head: &CrossAttentionHead) -> Result<AttentionMatrix> {
    forward_traced(bundle, head).map(|(a, _)| a)
}

pub fn forward_traced(
    bundle: &HiddenBundle,
    head: &CrossAttentionHead,
) -> Result<(AttentionMatrix, ForwardTrace)> {
    check_dims(bundle, head)?;
    let scale = 1.0 / (head.d_a as f64).sqrt();
    let h = head.heads();
    let mut trace = ForwardTrace {
        queries: Vec::with_capacity(h),
        keys: Vec::with_capacity(h),
        logits: Vec::with_capacity(h),
        probs: Vec::with_capacity(h),
    };
    let mut avg = Matrix::zeros((bundle.layout.m(), bundle.layout.n()));
    for (wq, wk) in head.w_q.iter().zip(&head.w_k) {
        let q = bundle.query.dot(wq);
        let k = bundle.context.dot(wk);
        let logits = q.dot(&k.t()) * scale;
        let probs = softmax_rows(&logits)?;
        avg.scaled_add(1.0 / h as f64, &probs);
        trace.queries.push(q);
        trace.keys.push(k);
        trace.logits.push(logits);
        trace.probs.push(probs);
    }
    if avg.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("attention weights"));
    }
    Ok((AttentionMatrix::from_softmax(avg), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_layout, Document, Granularity};
    use crate::scoring::segment_scores;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn layout(ins: usize, docs: &[usize], m: usize) -> PromptLayout {
        let docs: Vec<_> = docs
            .iter()
            .enumerate()
            .map(|(i, &c)| Document::new(format!("d{i}"), "", "x").with_token_count(c))
            .collect();
        assemble_layout(ins, &docs, m, Granularity::DocumentLevel).unwrap()
    }

    fn random_bundle(seed: u64, ins: usize, docs: &[usize], m: usize, d: usize) -> HiddenBundle {
        let l = layout(ins, docs, m);
        let mut g = GaussianStream::new(seed);
        let c = Matrix::from_shape_fn((l.n(), d), |_| g.normal());
        let q = Matrix::from_shape_fn((m, d), |_| g.normal());
        HiddenBundle::new(c, q, l).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let b = random_bundle(1, 2, &[3, 2], 2, 4);
        let a = forward(&b, &CrossAttentionHead::zeros(3, 4, 2)).unwrap();
        assert!(a.weights().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn duplicating_context_halves_uniform_entries() {
        let b = random_bundle(1, 1, &[2], 1, 3);
        let l2 = layout(2, &[4], 1);
        let doubled = ndarray::concatenate![Axis(0), b.context, b.context];
        let b2 = HiddenBundle::new(doubled, b.query.clone(), l2).unwrap();
        let head = CrossAttentionHead::zeros(1, 3, 3);
        let a1 = forward(&b, &head).unwrap();
        let a2 = forward(&b2, &head).unwrap();
        assert_abs_diff_eq!(a2.weights()[[0, 0]], a1.weights()[[0, 0]] / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn scalar_softmax() {
        let l = layout(1, &[1], 1);
        let b = HiddenBundle::new(array![[1.0], [2.0]], array![[1.0]], l).unwrap();
        let head = CrossAttentionHead::new(vec![array![[1.0]]], vec![array![[1.0]]]).unwrap();
        let (a, trace) = forward_traced(&b, &head).unwrap();
        assert_eq!(trace.logits[0], array![[1.0, 2.0]]);
        // 1 / (1 + e) and e / (1 + e)
        assert_abs_diff_eq!(a.weights()[[0, 0]], 0.2689414213699951, epsilon = 1e-12);
        assert_abs_diff_eq!(a.weights()[[0, 1]], 0.7310585786300049, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let b = random_bundle(1, 1, &[2], 1, 4);
        assert!(matches!(
            forward(&b, &CrossAttentionHead::zeros(1, 5, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn overflow_detected() {
        let l = layout(1, &[1], 1);
        let b = HiddenBundle::new(array![[1e200], [1.0]], array![[1e200]], l).unwrap();
        let head = CrossAttentionHead::new(vec![array![[1e200]]], vec![array![[1e200]]]).unwrap();
        assert!(matches!(forward(&b, &head), Err(Error::NumericalOverflow(_))));
    }

    #[test]
    fn rows_stochastic_and_scores_normalized() {
        for seed in 0..20 {
            let b = random_bundle(seed, 2, &[3, 4, 1], 3, 6);
            let head = CrossAttentionHead::init_random(4, 6, 3, seed + 100).unwrap();
            let a = forward(&b, &head).unwrap();
            for row in a.weights().axis_iter(Axis(0)) {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
            }
            let s = segment_scores(&a, &b.layout).unwrap();
            assert_abs_diff_eq!(s.total(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = array![[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]];
        let p = softmax_rows(&logits).unwrap();
        let shifted = softmax_rows(&(&logits + 17.5)).unwrap();
        for (a, b) in p.iter().zip(shifted.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn permuting_context_permutes_columns() {
        let b = random_bundle(4, 1, &[1, 1, 1], 2, 5);
        let head = CrossAttentionHead::init_random(2, 5, 3, 9).unwrap();
        let perm = [0usize, 3, 1, 2];
        let ctx = Matrix::from_shape_fn((4, 5), |(i, j)| b.context[[perm[i], j]]);
        let bp = HiddenBundle::new(ctx, b.query.clone(), b.layout.clone()).unwrap();
        let a = forward(&b, &head).unwrap();
        let ap = forward(&bp, &head).unwrap();
        for i in 0..2 {
            for (j, &pj) in perm.iter().enumerate() {
                assert_abs_diff_eq!(ap.weights()[[i, j]], a.weights()[[i, pj]], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn init_random_determinism_and_scale() {
        let a = CrossAttentionHead::init_random(2, 8, 4, 1).unwrap();
        assert_eq!(a, CrossAttentionHead::init_random(2, 8, 4, 1).unwrap());
        assert_ne!(a, CrossAttentionHead::init_random(2, 8, 4, 2).unwrap());

        // 2 * 5 * 64 * 16 = 10240 entries
        let big = CrossAttentionHead::init_random(5, 64, 16, 3).unwrap();
        let vals: Vec<f64> = big.params().flat_map(|w| w.iter().copied()).collect();
        assert!(vals.len() >= 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var * 64.0 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn weight_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = CrossAttentionHead::init_random(3, 6, 2, 5).unwrap();
        head.save(dir.path()).unwrap();
        let loaded = CrossAttentionHead::init_from_export(dir.path()).unwrap();
        assert_eq!(loaded, head);
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        CrossAttentionHead::init_random(2, 4, 2, 5).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join("W_K.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(CrossAttentionHead::init_from_export(dir.path()).is_err());
    }
}
