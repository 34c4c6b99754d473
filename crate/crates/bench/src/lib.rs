//! Benchmarks for prompt assembly, Distinct-N and nearest-neighbour
//! retrieval live in `benches/`.
