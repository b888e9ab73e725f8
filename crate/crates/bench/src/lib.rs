//! Benchmark-only crate; see `benches/pipeline_ops.rs`.
