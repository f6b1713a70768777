//! Criterion benchmarks for `cqd-core` live under `benches/`.
