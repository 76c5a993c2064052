//! Criterion benchmarks for capo-core live under `benches/`.
