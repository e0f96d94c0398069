//! Criterion benchmarks for the solver, learner, classifier and theory kernels.
//! See `benches/kernels.rs`.
