//! Criterion benchmarks for the negprompt pipeline live in `benches/`.
