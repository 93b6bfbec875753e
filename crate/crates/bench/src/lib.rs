//! Criterion benchmarks for the tensor kernels and a training step; see `benches/`.
