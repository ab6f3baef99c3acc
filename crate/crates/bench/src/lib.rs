//! Benchmark-only crate; see `benches/hot_paths.rs`.
//!
//! Kept as a separate workspace member so the core library does not carry
//! criterion in its dependency tree.
