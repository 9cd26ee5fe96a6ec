//! Benchmarks for the numeric kernels and the training step; see `benches/`.
