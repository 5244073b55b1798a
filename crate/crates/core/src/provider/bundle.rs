//! On-disk tensor bundles.
//!
//! A bundle is a directory holding `manifest.json` and one raw payload file
//! per tensor. Payloads are row-major little-endian `f32`; each carries a
//! 64-bit FNV-1a checksum in the manifest. Loading verifies every checksum
//! and byte length before any tensor is exposed.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Granularity, PromptLayout, SegmentKind, SegmentSpan};
use crate::error::{Error, Result};
use crate::head::{HiddenBundle, Matrix};
use crate::scoring::{AttentionMatrix, HeadStack, ROW_SUM_TOLERANCE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE_F32: &str = "f32";

/// Hidden states of context tokens, `[n, d_model]`.
pub const CONTEXT_TENSOR: &str = "X_c";
/// Hidden states of query tokens, `[m, d_model]`.
pub const QUERY_TENSOR: &str = "X_q";
/// Attention maps, `[H, m, n]`.
pub const ATTENTION_TENSOR: &str = "A";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dims: Vec<usize>,
    pub file: String,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEntry {
    pub kind: String,
    pub owner: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub m: usize,
    pub n: usize,
    pub d_model: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub d_a: usize,
    pub dtype: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub spans: Vec<SpanEntry>,
    #[serde(default)]
    pub tokenizer: String,
    #[serde(default)]
    pub source_layer: i64,
    #[serde(default)]
    pub head_indices: Vec<usize>,
}

impl Manifest {
    pub fn empty() -> Self {
        Self {
            m: 0,
            n: 0,
            d_model: 0,
            heads: 0,
            d_a: 0,
            dtype: DTYPE_F32.to_string(),
            tensors: BTreeMap::new(),
            spans: Vec::new(),
            tokenizer: String::new(),
            source_layer: -1,
            head_indices: Vec::new(),
        }
    }

    pub fn set_layout(&mut self, layout: &PromptLayout) {
        self.n = layout.n();
        self.m = layout.m();
        self.spans = layout
            .context_spans()
            .iter()
            .map(|s| SpanEntry {
                kind: kind_name(s.kind).to_string(),
                owner: s.owner_id.clone(),
                start: s.start,
                end: s.end,
            })
            .collect();
    }
}

fn kind_name(kind: SegmentKind) -> &'static str {
    match kind {
        SegmentKind::Instruction => "instruction",
        SegmentKind::Document => "document",
        SegmentKind::Sentence => "sentence",
    }
}

fn parse_kind(s: &str) -> Option<SegmentKind> {
    match s {
        "instruction" => Some(SegmentKind::Instruction),
        "document" => Some(SegmentKind::Document),
        "sentence" => Some(SegmentKind::Sentence),
        _ => None,
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

/// A tensor ready to be written.
pub struct TensorData {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorData {
    pub fn new(name: &str, dims: Vec<usize>, values: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            dims,
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        Self::new(name, vec![m.nrows(), m.ncols()], &m.iter().copied().collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn to_matrix(&self) -> Result<Matrix> {
        let [r, c] = self.dims[..] else {
            return Err(Error::invalid(format!("expected a 2-d tensor, found dims {:?}", self.dims)));
        };
        Ok(Array2::from_shape_vec((r, c), self.values.iter().map(|&v| v as f64).collect())
            .expect("length checked at load"))
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub path: PathBuf,
    pub manifest: Manifest,
    tensors: BTreeMap<String, Tensor>,
}

impl Bundle {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::bundle(&self.path, format!("missing tensor `{name}`")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn layout(&self) -> Result<PromptLayout> {
        let mut spans = Vec::with_capacity(self.manifest.spans.len());
        for s in &self.manifest.spans {
            let kind = parse_kind(&s.kind)
                .ok_or_else(|| Error::bundle(&self.path, format!("unknown span kind `{}`", s.kind)))?;
            spans.push(SegmentSpan::new(kind, &s.owner, s.start, s.end));
        }
        let granularity = if spans.iter().any(|s| s.kind == SegmentKind::Sentence) {
            Granularity::SentenceLevel
        } else {
            Granularity::DocumentLevel
        };
        PromptLayout::from_spans(spans, self.manifest.m, granularity)
            .map_err(|e| Error::bundle(&self.path, e.to_string()))
    }

    pub fn hidden(&self) -> Result<HiddenBundle> {
        let context = self.tensor(CONTEXT_TENSOR)?.to_matrix()?;
        let query = self.tensor(QUERY_TENSOR)?.to_matrix()?;
        HiddenBundle::new(context, query, self.layout()?)
    }

    pub fn attention(&self) -> Result<HeadStack> {
        let t = self.tensor(ATTENTION_TENSOR)?;
        let (h, m, n) = match t.dims[..] {
            [h, m, n] => (h, m, n),
            [m, n] => (1, m, n),
            _ => return Err(Error::bundle(&self.path, "attention tensor must be [H, m, n]")),
        };
        let heads = t
            .values
            .chunks_exact(m * n)
            .take(h)
            .map(|c| {
                let w = Array2::from_shape_vec((m, n), c.iter().map(|&v| v as f64).collect()).unwrap();
                AttentionMatrix::with_tolerance(w, ROW_SUM_TOLERANCE)
                    .map_err(|e| Error::bundle(&self.path, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        HeadStack::new(heads)
    }
}

/// Writes payloads first and the manifest last, so a crash never leaves a
/// manifest pointing at missing payloads.
pub fn write_bundle(dir: &Path, mut manifest: Manifest, tensors: &[TensorData]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.dtype = DTYPE_F32.to_string();
    manifest.tensors.clear();
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.values.len() {
            return Err(Error::invalid(format!(
                "tensor `{}` has {} values for dims {:?}",
                t.name,
                t.values.len(),
                t.dims
            )));
        }
        let bytes: Vec<u8> = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = format!("{}.bin", t.name);
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.tensors.insert(
            t.name.clone(),
            TensorEntry {
                dims: t.dims.clone(),
                file,
                fnv1a64: hex(fnv1a64(&bytes)),
            },
        );
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn write_hidden_bundle(dir: &Path, bundle: &HiddenBundle, tokenizer: &str) -> Result<()> {
    let mut manifest = Manifest::empty();
    manifest.set_layout(&bundle.layout);
    manifest.d_model = bundle.d_model();
    manifest.tokenizer = tokenizer.to_string();
    write_bundle(
        dir,
        manifest,
        &[
            TensorData::from_matrix(CONTEXT_TENSOR, &bundle.context),
            TensorData::from_matrix(QUERY_TENSOR, &bundle.query),
        ],
    )
}

pub fn write_attention_bundle(dir: &Path, stack: &HeadStack, layout: &PromptLayout, tokenizer: &str) -> Result<()> {
    let mut manifest = Manifest::empty();
    manifest.set_layout(layout);
    manifest.heads = stack.len();
    manifest.tokenizer = tokenizer.to_string();
    let values: Vec<f64> = stack.heads().iter().flat_map(|h| h.weights().iter().copied()).collect();
    write_bundle(
        dir,
        manifest,
        &[TensorData::new(ATTENTION_TENSOR, vec![stack.len(), layout.m(), layout.n()], &values)],
    )
}

/// Reads and fully validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::bundle(dir, format!("bad manifest: {e}")))?;
    if manifest.dtype != DTYPE_F32 {
        return Err(Error::bundle(dir, format!("unknown dtype `{}`", manifest.dtype)));
    }

    let mut tensors = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = entry.dims.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::bundle(
                dir,
                format!("tensor `{name}`: {} bytes on disk, dims {:?} need {expected}", bytes.len(), entry.dims),
            ));
        }
        let actual = hex(fnv1a64(&bytes));
        if !actual.eq_ignore_ascii_case(&entry.fnv1a64) {
            return Err(Error::Checksum {
                tensor: name.clone(),
                expected: entry.fnv1a64.clone(),
                actual,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(
            name.clone(),
            Tensor {
                dims: entry.dims.clone(),
                values,
            },
        );
    }

    let bundle = Bundle {
        path: dir.to_path_buf(),
        manifest,
        tensors,
    };
    validate(&bundle)?;
    Ok(bundle)
}

fn validate(b: &Bundle) -> Result<()> {
    let man = &b.manifest;
    let dims_of = |name: &str| b.tensors.get(name).map(|t| t.dims.as_slice());
    if !man.spans.is_empty() || man.n > 0 {
        let layout = b.layout()?;
        if layout.n() != man.n {
            return Err(Error::bundle(
                &b.path,
                format!("span table covers {} tokens but manifest n is {}", layout.n(), man.n),
            ));
        }
    }
    if let Some(d) = dims_of(CONTEXT_TENSOR) {
        if d != [man.n, man.d_model] {
            return Err(Error::bundle(&b.path, format!("X_c dims {d:?} != [n={}, d_model={}]", man.n, man.d_model)));
        }
    }
    if let Some(d) = dims_of(QUERY_TENSOR) {
        if d != [man.m, man.d_model] {
            return Err(Error::bundle(&b.path, format!("X_q dims {d:?} != [m={}, d_model={}]", man.m, man.d_model)));
        }
    }
    if let Some(d) = dims_of(ATTENTION_TENSOR) {
        let ok = match d {
            [h, m, n] => *h == man.heads.max(1) && *m == man.m && *n == man.n,
            [m, n] => *m == man.m && *n == man.n,
            _ => false,
        };
        if !ok {
            return Err(Error::bundle(&b.path, format!("attention dims {d:?} inconsistent with manifest")));
        }
        b.attention()?;
    }
    for name in ["W_Q", "W_K"] {
        if let Some(d) = dims_of(name) {
            if d != [man.heads, man.d_model, man.d_a] {
                return Err(Error::bundle(
                    &b.path,
                    format!("{name} dims {d:?} != [H={}, d_model={}, d_a={}]", man.heads, man.d_model, man.d_a),
                ));
            }
        }
    }
    Ok(())
}
