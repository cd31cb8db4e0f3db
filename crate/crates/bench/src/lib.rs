//! Criterion benchmarks for the swarmfield hot paths; see `benches/`.
