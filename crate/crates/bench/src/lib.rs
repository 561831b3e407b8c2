//! Criterion benchmarks for the `wasi-core` kernels live in `benches/`.
//! Run them with `cargo bench -p wasi-bench`.
