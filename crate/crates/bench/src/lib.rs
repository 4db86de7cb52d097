//! Criterion benchmarks for the restoration kernels; see `benches/`.
