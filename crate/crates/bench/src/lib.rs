//! Criterion benchmarks for `fasternam-core`; see `benches/`.
