//! Criterion benchmarks for `attncomp`; see `benches/`.
