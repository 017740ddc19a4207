//! Criterion benchmarks for the completion kernels; see `benches/kernels.rs`
//! and `bench.md`.
