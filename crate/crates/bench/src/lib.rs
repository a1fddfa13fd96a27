//! Criterion benchmarks for the dense kernels and a full training step; run
//! them with `cargo bench -p ltvit-bench`.
